#include "flowgate/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

namespace flowgate {

namespace fs = std::filesystem;

Tensor clip_window(const Tensor& src) {
  Tensor out(src.shape());
  for (std::int64_t i = 0; i < src.size(); ++i) {
    const double v = src[i] + 14.0;
    out[i] = v < 0.0 ? 0.0 : (v > 127.0 ? 127.0 : v);
  }
  return out;
}

Tensor dequantize(const Tensor& img, int n_bits, Rng* rng) {
  const double levels = std::pow(2.0, n_bits);
  Tensor out(img.shape());
  for (std::int64_t i = 0; i < img.size(); ++i) {
    const double v = img[i];
    if (v != std::floor(v) || v < 0.0 || v >= levels)
      throw DataError("dequantize: value " + std::to_string(v) + " outside integer range [0, " +
                      std::to_string(static_cast<int>(levels)) + ")");
    const double u = rng ? rng->next_double() : 0.5;
    out[i] = (v + u) / levels - 0.5;
  }
  return out;
}

Tensor quantize_to_bits(const Tensor& x, int n_bits) {
  const double levels = std::pow(2.0, n_bits);
  Tensor out(x.shape());
  for (std::int64_t i = 0; i < x.size(); ++i) {
    double v = std::floor((x[i] + 0.5) * levels);
    if (v < 0.0) v = 0.0;
    if (v > levels - 1.0) v = levels - 1.0;
    out[i] = v;
  }
  return out;
}

Tensor rotate_in_plane(const Tensor& volume, int axis, double degrees) {
  if (volume.rank() != 4) throw DimensionError("rotate_in_plane: need a [D,H,W,C] volume");
  if (axis < 0 || axis > 2) throw DimensionError("rotate_in_plane: axis must be 0, 1 or 2");
  if (degrees == 0.0) return volume;
  const int d = volume.extent(0), h = volume.extent(1), w = volume.extent(2), c = volume.extent(3);
  // Plane axes per rotation axis: 0 -> (H,W), 1 -> (D,W), 2 -> (D,H).
  const int pa = axis == 0 ? 1 : 0;
  const int pb = axis == 2 ? 1 : 2;
  const int ea = volume.extent(pa), eb = volume.extent(pb);
  const double ca = (ea - 1) / 2.0, cb = (eb - 1) / 2.0;
  const double rad = degrees * 3.14159265358979323846 / 180.0;
  const double cs = std::cos(rad), sn = std::sin(rad);
  Tensor out(volume.shape());
  int idx[3];
  for (idx[0] = 0; idx[0] < d; ++idx[0])
    for (idx[1] = 0; idx[1] < h; ++idx[1])
      for (idx[2] = 0; idx[2] < w; ++idx[2]) {
        const double a = idx[pa] - ca, b = idx[pb] - cb;
        // Sample the source at the inverse rotation.
        const double sa = cs * a + sn * b + ca;
        const double sb = -sn * a + cs * b + cb;
        const int a0 = static_cast<int>(std::floor(sa)), b0 = static_cast<int>(std::floor(sb));
        const double fa = sa - a0, fb = sb - b0;
        for (int k = 0; k < c; ++k) {
          double acc = 0.0;
          for (int da = 0; da < 2; ++da)
            for (int db = 0; db < 2; ++db) {
              const int ia = a0 + da, ib = b0 + db;
              if (ia < 0 || ia >= ea || ib < 0 || ib >= eb) continue;  // zero fill
              int src[3] = {idx[0], idx[1], idx[2]};
              src[pa] = ia;
              src[pb] = ib;
              const double weight = (da ? fa : 1.0 - fa) * (db ? fb : 1.0 - fb);
              acc += weight * volume.at(src[0], src[1], src[2], k);
            }
          out.at(idx[0], idx[1], idx[2], k) = acc;
        }
      }
  return out;
}

std::vector<Tensor> augment_rotations(const Tensor& volume) {
  if (volume.rank() != 4) throw DimensionError("augment_rotations: need a [D,H,W,C] volume");
  std::vector<Tensor> out;
  out.reserve(7);
  out.push_back(volume);
  for (int axis = 0; axis < 3; ++axis) {
    out.push_back(rotate_in_plane(volume, axis, 2.0));
    out.push_back(rotate_in_plane(volume, axis, -2.0));
  }
  return out;
}

void write_pgm(const std::string& path, const Tensor& img, int max_value) {
  if (img.rank() != 3 || img.extent(2) != 1)
    throw DataError("write_pgm: need an [H,W,1] tensor, got " + shape_str(img.shape()));
  if (max_value < 1 || max_value > 65535) throw DataError("write_pgm: max value out of range");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open for writing: " + path);
  const int h = img.extent(0), w = img.extent(1);
  os << "P5\n" << w << " " << h << "\n" << max_value << "\n";
  for (std::int64_t i = 0; i < img.size(); ++i) {
    const double v = img[i];
    if (v != std::floor(v) || v < 0.0 || v > max_value)
      throw DataError("write_pgm: value " + std::to_string(v) + " not an integer in [0, " +
                      std::to_string(max_value) + "]");
    const unsigned val = static_cast<unsigned>(v);
    if (max_value > 255) {
      const unsigned char b[2] = {static_cast<unsigned char>(val >> 8), static_cast<unsigned char>(val & 0xff)};
      os.write(reinterpret_cast<const char*>(b), 2);
    } else {
      const unsigned char b = static_cast<unsigned char>(val);
      os.write(reinterpret_cast<const char*>(&b), 1);
    }
  }
  if (!os) throw DataError("write failed: " + path);
}

namespace {

int pgm_token(std::istream& is, const std::string& path) {
  // Skips whitespace and '#' comments.
  int c = is.get();
  while (c != EOF) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = is.get();
    } else if (!std::isspace(c)) {
      break;
    }
    c = is.get();
  }
  if (c == EOF || !std::isdigit(c)) throw DataError("malformed PGM header: " + path);
  int value = 0;
  while (c != EOF && std::isdigit(c)) {
    value = value * 10 + (c - '0');
    c = is.get();
  }
  return value;
}

}  // namespace

Tensor read_pgm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open: " + path);
  char m0 = 0, m1 = 0;
  is.get(m0);
  is.get(m1);
  if (m0 != 'P' || m1 != '5') throw DataError("not a binary PGM (P5): " + path);
  const int w = pgm_token(is, path);
  const int h = pgm_token(is, path);
  const int maxval = pgm_token(is, path);
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 65535) throw DataError("bad PGM dimensions: " + path);
  Tensor img({h, w, 1});
  const bool wide = maxval > 255;
  for (std::int64_t i = 0; i < img.size(); ++i) {
    if (wide) {
      unsigned char b[2];
      if (!is.read(reinterpret_cast<char*>(b), 2)) throw DataError("truncated PGM payload: " + path);
      img[i] = static_cast<double>((static_cast<unsigned>(b[0]) << 8) | b[1]);
    } else {
      unsigned char b;
      if (!is.read(reinterpret_cast<char*>(&b), 1)) throw DataError("truncated PGM payload: " + path);
      img[i] = static_cast<double>(b);
    }
  }
  return img;
}

Tensor read_image_file(const std::string& path) {
  const std::string ext = fs::path(path).extension().string();
  if (ext == ".pgm") return read_pgm(path);
  if (ext == ".fgt") return read_tensor_file(path);
  throw DataError("unsupported image extension '" + ext + "': " + path);
}

std::string split_name(Split s) {
  switch (s) {
    case Split::kNormalTrain:
      return "normal_train";
    case Split::kMixtureTrain:
      return "mixture_train";
    case Split::kTest:
      return "test";
  }
  throw Error("unreachable split");
}

Split parse_split(const std::string& name) {
  if (name == "normal_train") return Split::kNormalTrain;
  if (name == "mixture_train") return Split::kMixtureTrain;
  if (name == "test") return Split::kTest;
  throw DataError("unknown split '" + name + "' (expected normal_train, mixture_train or test)");
}

bool is_abnormal_label(const std::string& label) { return label.rfind("abnormal", 0) == 0; }

DatasetManifest read_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open manifest: " + path);
  std::string line;
  if (!std::getline(is, line)) throw DataError("empty manifest: " + path);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "file,split,label") throw DataError("manifest header must be 'file,split,label', got '" + line + "'");
  DatasetManifest manifest;
  const char* env_root = std::getenv("FLOWGATE_DATA_ROOT");
  manifest.root = env_root && *env_root ? std::string(env_root) : fs::path(path).parent_path().string();
  if (manifest.root.empty()) manifest.root = ".";
  int line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto c1 = line.find(',');
    const auto c2 = c1 == std::string::npos ? std::string::npos : line.find(',', c1 + 1);
    if (c1 == std::string::npos || c2 == std::string::npos)
      throw DataError("manifest line " + std::to_string(line_no) + " needs 3 fields: " + line);
    ManifestEntry e;
    e.file = line.substr(0, c1);
    e.split = parse_split(line.substr(c1 + 1, c2 - c1 - 1));
    e.label = line.substr(c2 + 1);
    if (e.file.empty()) throw DataError("manifest line " + std::to_string(line_no) + " has an empty file field");
    manifest.entries.push_back(std::move(e));
  }
  return manifest;
}

void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot open manifest for writing: " + path);
  os << "file,split,label\n";
  for (const auto& e : entries) os << e.file << "," << split_name(e.split) << "," << e.label << "\n";
  if (!os) throw DataError("manifest write failed: " + path);
}

LoadedDataset load_dataset(const DatasetManifest& manifest, const LoadOptions& options) {
  LoadedDataset ds;
  const double levels = std::pow(2.0, options.n_bits);
  if (options.expected_shape) ds.shape = *options.expected_shape;
  std::set<std::string> normal_files, mixture_files;
  for (const auto& e : manifest.entries) {
    if (e.split == Split::kNormalTrain && is_abnormal_label(e.label))
      throw DataError("normal_train entry '" + e.file + "' carries abnormal label '" + e.label + "'");
    const std::string path = (fs::path(manifest.root) / e.file).string();
    if (!fs::exists(path)) throw DataError("missing file for entry '" + e.file + "': " + path);
    Tensor img = read_image_file(path);

    bool in_range = true;
    for (std::int64_t i = 0; i < img.size() && in_range; ++i)
      if (img[i] < 0.0 || img[i] >= levels) in_range = false;
    const bool window = options.window == WindowMode::kAlways ||
                        (options.window == WindowMode::kAuto && options.n_bits == 7 && !in_range);
    if (window) img = clip_window(img);

    if (ds.shape.empty()) ds.shape = img.shape();
    if (img.shape() != ds.shape)
      throw DataError("entry '" + e.file + "' has shape " + shape_str(img.shape()) + ", expected " +
                      shape_str(ds.shape));
    for (std::int64_t i = 0; i < img.size(); ++i)
      if (img[i] != std::floor(img[i]) || img[i] < 0.0 || img[i] >= levels)
        throw DataError("entry '" + e.file + "' has value " + std::to_string(img[i]) +
                        " outside integer range [0, " + std::to_string(static_cast<int>(levels)) + ")");

    Sample s{e.file, std::move(img), e.label};
    switch (e.split) {
      case Split::kNormalTrain:
        normal_files.insert(e.file);
        ds.normal_train.push_back(std::move(s));
        break;
      case Split::kMixtureTrain:
        mixture_files.insert(e.file);
        ds.mixture_train.push_back(std::move(s));
        break;
      case Split::kTest:
        ds.test.push_back(std::move(s));
        break;
    }
  }
  for (const auto& f : normal_files)
    if (mixture_files.count(f)) ++ds.overlap_count;
  return ds;
}

namespace {

// Smooth polynomial wave on [0,1) phase, range [-1,1]; pure arithmetic
// so generated datasets are byte-identical across platforms.
double poly_wave(double phase) {
  const double s = phase - std::floor(phase);
  const double t = 2.0 * s - 1.0;
  return 2.598076211353316 * t * (1.0 - t * t);
}

struct BodyGeometry {
  // Per-axis center and semi-extent (x=W, y=H, z=D).
  double cx, cy, cz, sx, sy, sz;
  bool threed;
};

struct TextureParams {
  double base, dome_amp;
  double f1x, f1y, f1z, p1, a1;
  double f2x, f2y, f2z, p2, a2;
};

double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * rng.next_double(); }

// Margin draw with an optional power skew toward the high end. The 0.5
// case uses sqrt, which IEEE 754 rounds exactly, keeping generated
// datasets byte-identical across platforms.
double margin_draw(Rng& rng, double lo, double hi, double skew) {
  double u = rng.next_double();
  if (skew == 0.5)
    u = std::sqrt(u);
  else if (skew != 1.0)
    u = std::pow(u, skew);
  return lo + (hi - lo) * u;
}

BodyGeometry draw_body(const SynthSpec& spec, Rng& rng, double margin_shift, double skew) {
  const bool threed = spec.shape.size() == 4;
  const int w = spec.shape[threed ? 2 : 1];
  const int h = spec.shape[threed ? 1 : 0];
  const int d = threed ? spec.shape[0] : 1;
  const double lo = spec.margin_lo + margin_shift, hi = spec.margin_hi + margin_shift;
  const double ml = margin_draw(rng, lo, hi, skew), mr = margin_draw(rng, lo, hi, skew);
  const double mt = margin_draw(rng, lo, hi, skew), mb = margin_draw(rng, lo, hi, skew);
  const double mf = threed ? margin_draw(rng, lo, hi, skew) * 0.5 : 0.0;
  const double mk = threed ? margin_draw(rng, lo, hi, skew) * 0.5 : 0.0;
  BodyGeometry g{};
  g.threed = threed;
  g.cx = (ml + (w - 1) - mr) / 2.0;
  g.sx = std::max(((w - 1) - mr - ml) / 2.0, 1.5);
  g.cy = (mt + (h - 1) - mb) / 2.0;
  g.sy = std::max(((h - 1) - mb - mt) / 2.0, 1.5);
  g.cz = threed ? (mf + (d - 1) - mk) / 2.0 : 0.0;
  g.sz = threed ? std::max(((d - 1) - mk - mf) / 2.0, 1.0) : 1.0;
  return g;
}

TextureParams draw_texture(Rng& rng) {
  TextureParams t{};
  t.base = uniform(rng, 55.0, 90.0);
  t.dome_amp = uniform(rng, 10.0, 25.0);
  t.f1x = uniform(rng, 0.05, 0.22);
  t.f1y = uniform(rng, 0.05, 0.22);
  t.f1z = uniform(rng, 0.05, 0.22);
  t.p1 = rng.next_double();
  t.a1 = uniform(rng, 6.0, 14.0);
  t.f2x = uniform(rng, 0.05, 0.22);
  t.f2y = uniform(rng, 0.05, 0.22);
  t.f2z = uniform(rng, 0.05, 0.22);
  t.p2 = rng.next_double();
  t.a2 = uniform(rng, 4.0, 10.0);
  return t;
}

double body_r2(const BodyGeometry& g, double x, double y, double z) {
  const double u = (x - g.cx) / g.sx;
  const double v = (y - g.cy) / g.sy;
  const double q = g.threed ? (z - g.cz) / g.sz : 0.0;
  return u * u + v * v + q * q;
}

Tensor render_body(const SynthSpec& spec, const BodyGeometry& g, const TextureParams& t, Rng& noise_rng) {
  Tensor img(spec.shape);
  const bool threed = g.threed;
  const int d = threed ? spec.shape[0] : 1;
  const int h = spec.shape[threed ? 1 : 0];
  const int w = spec.shape[threed ? 2 : 1];
  const double max_value = std::pow(2.0, spec.n_bits) - 1.0;
  for (int z = 0; z < d; ++z)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const double r2 = body_r2(g, x, y, z);
        // Noise is drawn for every voxel so the stream position does not
        // depend on the body geometry.
        const double noise = std::floor(noise_rng.next_double() * 7.0) - 3.0;
        double value = 0.0;
        if (r2 <= 1.0) {
          value = t.base + t.dome_amp * (1.0 - r2);
          value += t.a1 * poly_wave(t.f1x * x + t.f1y * y + t.f1z * z + t.p1);
          value += t.a2 * poly_wave(t.f2x * x + t.f2y * y + t.f2z * z + t.p2);
          value += noise;
          value = std::floor(value + 0.5);
          if (value < 8.0) value = 8.0;
          if (value > max_value) value = max_value;
        }
        img.at(z, y, x, 0) = value;
      }
  return img;
}

void apply_lesion(Tensor& img, const SynthSpec& spec, const BodyGeometry& g, Rng& rng, std::string& label) {
  const bool threed = g.threed;
  const int d = threed ? spec.shape[0] : 1;
  const int h = spec.shape[threed ? 1 : 0];
  const int w = spec.shape[threed ? 2 : 1];
  const double max_value = std::pow(2.0, spec.n_bits) - 1.0;
  const double radius = uniform(rng, spec.lesion_radius_lo, spec.lesion_radius_hi);
  const bool bright = rng.next_double() < 0.5;
  const double delta = uniform(rng, spec.lesion_delta_lo, spec.lesion_delta_hi) * (bright ? 1.0 : -1.0);
  // Place the lesion so its full extent stays inside the body: the zero
  // background is never touched.
  double px = g.cx, py = g.cy, pz = g.cz;
  for (int attempt = 0; attempt < 128; ++attempt) {
    const double cx = uniform(rng, g.cx - g.sx, g.cx + g.sx);
    const double cy = uniform(rng, g.cy - g.sy, g.cy + g.sy);
    const double cz = threed ? uniform(rng, g.cz - g.sz, g.cz + g.sz) : 0.0;
    bool inside = true;
    for (int corner = 0; corner < (threed ? 8 : 4) && inside; ++corner) {
      const double ox = cx + ((corner & 1) ? radius + 1.0 : -radius - 1.0);
      const double oy = cy + ((corner & 2) ? radius + 1.0 : -radius - 1.0);
      const double oz = threed ? cz + ((corner & 4) ? radius + 1.0 : -radius - 1.0) : 0.0;
      if (body_r2(g, ox, oy, oz) > 0.95) inside = false;
    }
    if (inside) {
      px = cx;
      py = cy;
      pz = cz;
      break;
    }
  }
  const double r2max = radius * radius;
  for (int z = 0; z < d; ++z)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const double dx = x - px, dy = y - py, dz = threed ? z - pz : 0.0;
        const double d2 = dx * dx + dy * dy + dz * dz;
        if (d2 > r2max) continue;
        const double falloff = 0.35 + 0.65 * (1.0 - d2 / r2max);
        double v = img.at(z, y, x, 0) + std::floor(delta * falloff + 0.5);
        if (v < 1.0) v = 1.0;  // lesions never create zero pixels
        if (v > max_value) v = max_value;
        img.at(z, y, x, 0) = v;
      }
  label = bright ? "abnormal:bright" : "abnormal:dark";
}

constexpr std::uint64_t kNormalStream = 0x4e4f524dULL;    // per-class stream tags
constexpr std::uint64_t kAbnormalStream = 0x41424e4dULL;

// `abnormal_margins` picks the margin distribution; `with_lesion`
// applies the lesion pass. The lesion rng is an independent fork, so a
// base image and its lesioned variant share every background draw.
SynthImage make_image(const SynthSpec& spec, std::uint64_t stream, std::uint64_t index, bool abnormal_margins,
                      bool with_lesion) {
  if (spec.shape.size() != 3 && spec.shape.size() != 4)
    throw DimensionError("synth shape must be [H,W,C] or [D,H,W,C]");
  if (spec.shape.back() != 1) throw DimensionError("synth generator emits single-channel images");
  Rng rng = Rng(spec.seed).fork(stream).fork(index);
  const double shift = abnormal_margins ? spec.abnormal_margin_shift : 0.0;
  const double skew = abnormal_margins ? spec.abnormal_margin_skew : 1.0;
  const BodyGeometry g = draw_body(spec, rng, shift, skew);
  const TextureParams t = draw_texture(rng);
  Rng noise_rng = rng.fork(1);
  SynthImage out;
  out.image = render_body(spec, g, t, noise_rng);
  out.label = "normal";
  if (with_lesion) {
    Rng lesion_rng = rng.fork(2);
    apply_lesion(out.image, spec, g, lesion_rng, out.label);
  }
  return out;
}

}  // namespace

SynthImage synth_normal(const SynthSpec& spec, std::uint64_t stream, std::uint64_t index) {
  return make_image(spec, stream ^ kNormalStream, index, false, false);
}

SynthImage synth_abnormal(const SynthSpec& spec, std::uint64_t stream, std::uint64_t index) {
  return make_image(spec, stream ^ kAbnormalStream, index, true, true);
}

std::pair<SynthImage, SynthImage> synth_pair(const SynthSpec& spec, std::uint64_t stream, std::uint64_t index) {
  SynthImage normal = make_image(spec, stream ^ kAbnormalStream, index, true, false);
  SynthImage abnormal = make_image(spec, stream ^ kAbnormalStream, index, true, true);
  return {std::move(normal), std::move(abnormal)};
}

DatasetManifest write_synth_dataset(const SynthSpec& spec, const SynthCounts& counts, const std::string& out_dir) {
  fs::create_directories(out_dir);
  const bool threed = spec.shape.size() == 4;
  const int max_value = static_cast<int>(std::pow(2.0, spec.n_bits)) - 1;
  std::vector<ManifestEntry> entries;

  auto emit = [&](const SynthImage& img, const std::string& stem, Split split, const std::string& label) {
    const std::string name = stem + (threed ? ".fgt" : ".pgm");
    const std::string path = (fs::path(out_dir) / name).string();
    if (threed)
      write_tensor_file(path, img.image);
    else
      write_pgm(path, img.image, max_value);
    entries.push_back({name, split, label});
  };

  char stem[64];
  for (int i = 0; i < counts.normal_train; ++i) {
    std::snprintf(stem, sizeof stem, "normal_train_%04d", i);
    emit(synth_normal(spec, 1, static_cast<std::uint64_t>(i)), stem, Split::kNormalTrain, "");
  }
  // Mixture entries are deliberately unlabeled: training never sees
  // class information for this split.
  for (int i = 0; i < counts.mixture_normal; ++i) {
    std::snprintf(stem, sizeof stem, "mix_%04d", i);
    emit(synth_normal(spec, 2, static_cast<std::uint64_t>(i)), stem, Split::kMixtureTrain, "");
  }
  for (int i = 0; i < counts.mixture_abnormal; ++i) {
    std::snprintf(stem, sizeof stem, "mix_%04d", counts.mixture_normal + i);
    emit(synth_abnormal(spec, 3, static_cast<std::uint64_t>(i)), stem, Split::kMixtureTrain, "");
  }
  for (int i = 0; i < counts.test_normal; ++i) {
    std::snprintf(stem, sizeof stem, "test_%04d", i);
    emit(synth_normal(spec, 4, static_cast<std::uint64_t>(i)), stem, Split::kTest, "normal");
  }
  for (int i = 0; i < counts.test_abnormal; ++i) {
    std::snprintf(stem, sizeof stem, "test_%04d", counts.test_normal + i);
    SynthImage img = synth_abnormal(spec, 5, static_cast<std::uint64_t>(i));
    emit(img, stem, Split::kTest, img.label);
  }

  const std::string manifest_path = (fs::path(out_dir) / "manifest.csv").string();
  write_manifest(manifest_path, entries);
  DatasetManifest manifest;
  manifest.root = out_dir;
  manifest.entries = std::move(entries);
  return manifest;
}

}  // namespace flowgate
