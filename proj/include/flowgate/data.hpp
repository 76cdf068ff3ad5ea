#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "flowgate/rng.hpp"
#include "flowgate/tensor.hpp"

namespace flowgate {

// ---- preprocessing ----

/// Intensity windowing for HU-like integer volumes:
/// I_dst = clip(I_src + 14, 0, 127). Idempotent on its own output.
Tensor clip_window(const Tensor& src);

/// (img + u) / 2^n_bits - 0.5 with u ~ Uniform[0,1) when rng is given,
/// u = 0.5 otherwise (deterministic scoring path). Values must be
/// integers in [0, 2^n_bits).
Tensor dequantize(const Tensor& img, int n_bits, Rng* rng);

/// Inverse of the deterministic rescale for emitting images:
/// round((x + 0.5) * 2^n_bits - 0.5) clipped to [0, 2^n_bits).
Tensor quantize_to_bits(const Tensor& x, int n_bits);

/// Original volume plus in-plane rotations of +-2 degrees about each of
/// the three axes: 7 outputs, bilinear resampling, zero fill.
std::vector<Tensor> augment_rotations(const Tensor& volume);
Tensor rotate_in_plane(const Tensor& volume, int axis, double degrees);

// ---- image files ----

// 8-bit or 16-bit binary PGM (P5); 16-bit payload is big-endian per the
// format. Shape [H,W,1].
void write_pgm(const std::string& path, const Tensor& img, int max_value);
Tensor read_pgm(const std::string& path);

// Reads .pgm or .fgt by extension.
Tensor read_image_file(const std::string& path);

// ---- manifests and datasets ----

enum class Split { kNormalTrain, kMixtureTrain, kTest };

std::string split_name(Split s);
Split parse_split(const std::string& name);

bool is_abnormal_label(const std::string& label);

struct ManifestEntry {
  std::string file;  // relative to the dataset root
  Split split;
  std::string label;  // "", "normal", "abnormal", or "abnormal:<subclass>"
};

struct DatasetManifest {
  std::string root;  // directory entries are resolved against
  std::vector<ManifestEntry> entries;
};

// CSV with header "file,split,label". The dataset root is the manifest
// directory unless FLOWGATE_DATA_ROOT is set.
DatasetManifest read_manifest(const std::string& path);
void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries);

struct Sample {
  std::string id;  // manifest file field
  Tensor raw;      // integer-valued, pre-dequantization
  std::string label;
};

struct LoadedDataset {
  std::vector<Sample> normal_train;
  std::vector<Sample> mixture_train;
  std::vector<Sample> test;
  int overlap_count = 0;  // files shared by normal_train and mixture_train
  Shape shape;
};

enum class WindowMode { kAuto, kNever, kAlways };

struct LoadOptions {
  int n_bits = 7;
  std::optional<Shape> expected_shape;
  // kAuto applies clip_window when n_bits is 7 and a file holds values
  // outside [0, 128).
  WindowMode window = WindowMode::kAuto;
};

/// Loads all three splits; every error names the offending entry.
/// Abnormal labels on normal_train entries are rejected. Overlap between
/// normal_train and mixture_train is allowed and counted.
LoadedDataset load_dataset(const DatasetManifest& manifest, const LoadOptions& options);

// ---- synthetic datasets ----

/// Desk-scale surrogate generator: a smooth elliptical "anatomy" on a
/// zero background with a random margin; abnormal images add a bright
/// or dark lesion strictly inside the anatomy, so lesions never change
/// the zero-pixel margin. Everything is drawn through the integer RNG
/// pipeline; a fixed seed reproduces images byte-exactly.
struct SynthSpec {
  Shape shape = {16, 16, 1};
  int n_bits = 7;
  double margin_lo = 1.5;  // body inset from each border, pixels
  double margin_hi = 3.5;
  // Added to abnormal-class margins only (shifts the range).
  double abnormal_margin_shift = 0.0;
  // Margin draws for the abnormal class use u^skew, u ~ U[0,1): values
  // below 1 skew abnormal margins toward margin_hi (more background,
  // more zero pixels) while keeping the same overall range. This is the
  // margin-confound knob: both classes still cover the full range, so
  // both trained models see every margin regime.
  double abnormal_margin_skew = 1.0;
  double lesion_radius_lo = 1.4;
  double lesion_radius_hi = 3.0;
  double lesion_delta_lo = 45.0;
  double lesion_delta_hi = 70.0;
  std::uint64_t seed = 0;
};

struct SynthImage {
  Tensor image;       // integer values in [0, 2^n_bits)
  std::string label;  // "normal", "abnormal:bright", "abnormal:dark"
};

SynthImage synth_normal(const SynthSpec& spec, std::uint64_t stream, std::uint64_t index);
SynthImage synth_abnormal(const SynthSpec& spec, std::uint64_t stream, std::uint64_t index);
// Paired variant: the abnormal image built on top of the exact normal
// base it perturbs (differs only inside the lesion bounding box).
std::pair<SynthImage, SynthImage> synth_pair(const SynthSpec& spec, std::uint64_t stream, std::uint64_t index);

struct SynthCounts {
  int normal_train = 250;
  int mixture_normal = 500;
  int mixture_abnormal = 500;
  int test_normal = 100;
  int test_abnormal = 100;
};

/// Writes images plus manifest.csv into out_dir; returns the manifest.
DatasetManifest write_synth_dataset(const SynthSpec& spec, const SynthCounts& counts, const std::string& out_dir);

}  // namespace flowgate
