#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "flowgate/common.hpp"

namespace flowgate {

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);
std::int64_t shape_numel(const Shape& s);

/// Dense n-dimensional array of doubles, row-major. Image layouts are
/// [H,W,C] (2-D) and [D,H,W,C] (3-D); matrices are rank-2.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  std::int64_t size() const { return static_cast<std::int64_t>(values_.size()); }
  int extent(int axis) const { return shape_[static_cast<std::size_t>(axis)]; }
  // Last extent; image tensors keep channels there.
  int channels() const { return shape_.empty() ? 1 : shape_.back(); }

  double* data() { return values_.data(); }
  const double* data() const { return values_.data(); }
  double& operator[](std::int64_t i) { return values_[static_cast<std::size_t>(i)]; }
  double operator[](std::int64_t i) const { return values_[static_cast<std::size_t>(i)]; }

  // (d,h,w,c) accessor for rank-4, (h,w,c) for rank-3.
  double& at(int d, int h, int w, int c);
  double at(int d, int h, int w, int c) const;

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  bool all_finite() const;
  double max_abs() const;

  Tensor reshaped(Shape new_shape) const;

 private:
  Shape shape_;
  std::vector<double> values_;
};

/// Square channel-mixing kernel; non-singularity is checked where it is
/// used as a flow kernel.
class SquareMatrix {
 public:
  SquareMatrix() = default;
  explicit SquareMatrix(int order, double fill = 0.0);
  SquareMatrix(int order, std::vector<double> values);
  static SquareMatrix identity(int order);
  static SquareMatrix from_tensor(const Tensor& t);

  int order() const { return order_; }
  double& at(int r, int c) { return values_[static_cast<std::size_t>(r) * order_ + c]; }
  double at(int r, int c) const { return values_[static_cast<std::size_t>(r) * order_ + c]; }
  const std::vector<double>& values() const { return values_; }
  Tensor as_tensor() const { return Tensor({order_, order_}, values_); }
  SquareMatrix transposed() const;

 private:
  int order_ = 0;
  std::vector<double> values_;
};

/// PA = LU with partial pivoting. Kernel inverses and log-determinants
/// both come from one factorization.
class LuFactorization {
 public:
  // Throws SingularMatrixError when a pivot magnitude falls below tol.
  explicit LuFactorization(const SquareMatrix& m, double pivot_tolerance = 1e-12);

  double log_abs_det() const { return log_abs_det_; }
  double det_sign() const { return det_sign_; }
  // Solves x * M = b row-wise over the last axis (matches channel_mix).
  std::vector<double> solve_transposed(const std::vector<double>& rhs) const;
  SquareMatrix inverse() const;

 private:
  int order_ = 0;
  std::vector<double> lu_;       // packed L (unit diag) and U
  std::vector<int> pivots_;
  double log_abs_det_ = 0.0;
  double det_sign_ = 1.0;
};

/// output(..., c) = sum_c' x(..., c') * K(c', c); the channel-mixing map
/// behind invertible 1x1 and 1x1x1 convolutions. Shape is preserved.
Tensor channel_mix(const Tensor& x, const SquareMatrix& kernel);

/// log |det K| via pivoted LU; O(C^3). Throws SingularMatrixError for
/// singular kernels (pivot below 1e-12).
double log_abs_det(const SquareMatrix& kernel);

// Binary tensor file: "FGT1", rank u32, extents u32 each, f64 payload,
// all little-endian.
void write_tensor_file(const std::string& path, const Tensor& t);
Tensor read_tensor_file(const std::string& path);
void write_tensor_stream(std::ostream& os, const Tensor& t);
Tensor read_tensor_stream(std::istream& is);

}  // namespace flowgate
