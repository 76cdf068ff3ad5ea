#include "flowgate/tensor.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace flowgate {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ",";
    os << s[i];
  }
  os << "]";
  return os.str();
}

std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (int e : s) {
    if (e <= 0) throw DimensionError("non-positive extent in shape " + shape_str(s));
    n *= e;
  }
  return n;
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), values_(static_cast<std::size_t>(shape_numel(shape_)), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), values_(std::move(values)) {
  if (shape_numel(shape_) != static_cast<std::int64_t>(values_.size()))
    throw DimensionError("value count does not match shape " + shape_str(shape_));
}

namespace {

std::int64_t spatial_offset(const Shape& shape, int d, int h, int w, int c) {
  if (shape.size() == 4)
    return ((static_cast<std::int64_t>(d) * shape[1] + h) * shape[2] + w) * shape[3] + c;
  if (shape.size() == 3) {
    if (d != 0) throw DimensionError("depth index on a rank-3 tensor");
    return (static_cast<std::int64_t>(h) * shape[1] + w) * shape[2] + c;
  }
  throw DimensionError("at(d,h,w,c) needs a rank-3 or rank-4 tensor, got " + shape_str(shape));
}

}  // namespace

double& Tensor::at(int d, int h, int w, int c) {
  return values_[static_cast<std::size_t>(spatial_offset(shape_, d, h, w, c))];
}

double Tensor::at(int d, int h, int w, int c) const {
  return values_[static_cast<std::size_t>(spatial_offset(shape_, d, h, w, c))];
}

bool Tensor::all_finite() const {
  for (double v : values_)
    if (!std::isfinite(v)) return false;
  return true;
}

double Tensor::max_abs() const {
  double m = 0.0;
  for (double v : values_) m = std::max(m, std::abs(v));
  return m;
}

Tensor Tensor::reshaped(Shape new_shape) const {
  if (shape_numel(new_shape) != size())
    throw DimensionError("reshape " + shape_str(shape_) + " -> " + shape_str(new_shape) + " changes element count");
  return Tensor(std::move(new_shape), values_);
}

SquareMatrix::SquareMatrix(int order, double fill)
    : order_(order), values_(static_cast<std::size_t>(order) * order, fill) {
  if (order <= 0) throw DimensionError("matrix order must be positive");
}

SquareMatrix::SquareMatrix(int order, std::vector<double> values) : order_(order), values_(std::move(values)) {
  if (order <= 0 || values_.size() != static_cast<std::size_t>(order) * order)
    throw DimensionError("matrix values do not match order");
}

SquareMatrix SquareMatrix::identity(int order) {
  SquareMatrix m(order);
  for (int i = 0; i < order; ++i) m.at(i, i) = 1.0;
  return m;
}

SquareMatrix SquareMatrix::from_tensor(const Tensor& t) {
  if (t.rank() != 2 || t.extent(0) != t.extent(1))
    throw DimensionError("kernel tensor must be square, got " + shape_str(t.shape()));
  return SquareMatrix(t.extent(0), std::vector<double>(t.data(), t.data() + t.size()));
}

SquareMatrix SquareMatrix::transposed() const {
  SquareMatrix m(order_);
  for (int r = 0; r < order_; ++r)
    for (int c = 0; c < order_; ++c) m.at(c, r) = at(r, c);
  return m;
}

LuFactorization::LuFactorization(const SquareMatrix& m, double pivot_tolerance)
    : order_(m.order()), lu_(m.values()), pivots_(static_cast<std::size_t>(m.order())) {
  const int n = order_;
  for (int col = 0; col < n; ++col) {
    int pivot_row = col;
    double best = std::abs(lu_[static_cast<std::size_t>(col) * n + col]);
    for (int r = col + 1; r < n; ++r) {
      const double v = std::abs(lu_[static_cast<std::size_t>(r) * n + col]);
      if (v > best) {
        best = v;
        pivot_row = r;
      }
    }
    if (!(best > pivot_tolerance))
      throw SingularMatrixError("singular kernel: pivot " + std::to_string(best) + " at column " +
                                std::to_string(col));
    pivots_[static_cast<std::size_t>(col)] = pivot_row;
    if (pivot_row != col) {
      for (int c = 0; c < n; ++c)
        std::swap(lu_[static_cast<std::size_t>(pivot_row) * n + c], lu_[static_cast<std::size_t>(col) * n + c]);
      det_sign_ = -det_sign_;
    }
    const double pivot = lu_[static_cast<std::size_t>(col) * n + col];
    log_abs_det_ += std::log(std::abs(pivot));
    if (pivot < 0.0) det_sign_ = -det_sign_;
    for (int r = col + 1; r < n; ++r) {
      const double f = lu_[static_cast<std::size_t>(r) * n + col] / pivot;
      lu_[static_cast<std::size_t>(r) * n + col] = f;
      for (int c = col + 1; c < n; ++c)
        lu_[static_cast<std::size_t>(r) * n + c] -= f * lu_[static_cast<std::size_t>(col) * n + c];
    }
  }
}

std::vector<double> LuFactorization::solve_transposed(const std::vector<double>& rhs) const {
  // Solves y * M = rhs, i.e. M^T y^T = rhs^T with M = P^-1 L U.
  const int n = order_;
  if (rhs.size() != static_cast<std::size_t>(n)) throw DimensionError("rhs length does not match matrix order");
  std::vector<double> y(rhs);
  // Forward: U^T v = rhs.
  for (int i = 0; i < n; ++i) {
    double s = y[static_cast<std::size_t>(i)];
    for (int j = 0; j < i; ++j) s -= lu_[static_cast<std::size_t>(j) * n + i] * y[static_cast<std::size_t>(j)];
    y[static_cast<std::size_t>(i)] = s / lu_[static_cast<std::size_t>(i) * n + i];
  }
  // Backward: L^T w = v (unit diagonal).
  for (int i = n - 1; i >= 0; --i) {
    double s = y[static_cast<std::size_t>(i)];
    for (int j = i + 1; j < n; ++j) s -= lu_[static_cast<std::size_t>(j) * n + i] * y[static_cast<std::size_t>(j)];
    y[static_cast<std::size_t>(i)] = s;
  }
  // Undo the row permutation (columns of M^T).
  for (int i = n - 1; i >= 0; --i) {
    const int p = pivots_[static_cast<std::size_t>(i)];
    if (p != i) std::swap(y[static_cast<std::size_t>(i)], y[static_cast<std::size_t>(p)]);
  }
  return y;
}

SquareMatrix LuFactorization::inverse() const {
  const int n = order_;
  SquareMatrix inv(n);
  std::vector<double> e(static_cast<std::size_t>(n), 0.0);
  for (int r = 0; r < n; ++r) {
    std::fill(e.begin(), e.end(), 0.0);
    e[static_cast<std::size_t>(r)] = 1.0;
    // Row r of M^-1 solves row * M = e_r.
    const std::vector<double> row = solve_transposed(e);
    for (int c = 0; c < n; ++c) inv.at(r, c) = row[static_cast<std::size_t>(c)];
  }
  return inv;
}

Tensor channel_mix(const Tensor& x, const SquareMatrix& kernel) {
  const int c = kernel.order();
  if (x.rank() < 1 || x.channels() != c)
    throw DimensionError("channel_mix: tensor channels " + std::to_string(x.channels()) +
                         " do not match kernel order " + std::to_string(c));
  const std::int64_t pixels = x.size() / c;
  Tensor out(x.shape());
  const double* in = x.data();
  double* dst = out.data();
  const double* k = kernel.values().data();
  for (std::int64_t p = 0; p < pixels; ++p) {
    const double* row = in + p * c;
    double* orow = dst + p * c;
    for (int ci = 0; ci < c; ++ci) {
      const double v = row[ci];
      const double* krow = k + static_cast<std::int64_t>(ci) * c;
      for (int co = 0; co < c; ++co) orow[co] += v * krow[co];
    }
  }
  return out;
}

double log_abs_det(const SquareMatrix& kernel) { return LuFactorization(kernel).log_abs_det(); }

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw DataError("tensor stream truncated");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void put_f64(std::ostream& os, double v) {
  std::uint64_t u;
  std::memcpy(&u, &v, 8);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(u >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

double get_f64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw DataError("tensor stream truncated");
  std::uint64_t u = 0;
  for (int i = 0; i < 8; ++i) u |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  double v;
  std::memcpy(&v, &u, 8);
  return v;
}

constexpr char kMagic[4] = {'F', 'G', 'T', '1'};

}  // namespace

void write_tensor_stream(std::ostream& os, const Tensor& t) {
  os.write(kMagic, 4);
  put_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (int a = 0; a < t.rank(); ++a) put_u32(os, static_cast<std::uint32_t>(t.extent(a)));
  for (std::int64_t i = 0; i < t.size(); ++i) put_f64(os, t[i]);
}

Tensor read_tensor_stream(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) throw DataError("bad tensor magic (expected FGT1)");
  const std::uint32_t rank = get_u32(is);
  if (rank == 0 || rank > 8) throw DataError("unreasonable tensor rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& e : shape) {
    const std::uint32_t ext = get_u32(is);
    if (ext == 0 || ext > (1u << 24)) throw DataError("unreasonable tensor extent " + std::to_string(ext));
    e = static_cast<int>(ext);
  }
  const std::int64_t n = shape_numel(shape);
  std::vector<double> values(static_cast<std::size_t>(n));
  for (auto& v : values) v = get_f64(is);
  return Tensor(std::move(shape), std::move(values));
}

void write_tensor_file(const std::string& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open for writing: " + path);
  write_tensor_stream(os, t);
  if (!os) throw DataError("write failed: " + path);
}

Tensor read_tensor_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open: " + path);
  return read_tensor_stream(is);
}

}  // namespace flowgate
