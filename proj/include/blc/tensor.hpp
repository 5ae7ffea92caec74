#pragma once

// Dense row-major tensors of order <= 4 and the operations the rest of the
// library is built on: the generalized tensor inner product, mode
// unfoldings, axis permutations, mode products and HOSVD.
//
// Axis numbering is zero-based throughout. The contraction written with
// one-based subscripts as U .jk V in the mathematical notation corresponds to
// tensor_inner(U, V, j - 1, k - 1); for instance ".12" is axes (0, 1) and
// ".21" is axes (1, 0).

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <optional>
#include <span>
#include <vector>

namespace blc {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

inline constexpr std::size_t kMaxOrder = 4;

class Tensor {
 public:
  /// Scalar zero (order 0). Only contraction results are order 0.
  Tensor();

  /// Zero-filled tensor. Every extent must be >= 1 and the order 1..4.
  explicit Tensor(std::vector<std::size_t> shape, DType dtype = DType::F64);
  Tensor(std::vector<std::size_t> shape, std::vector<double> data,
         DType dtype = DType::F64);

  static Tensor scalar(double value, DType dtype = DType::F64);
  static Tensor from_matrix(const Matrix& m, DType dtype = DType::F64);
  static Tensor from_vector(const Vector& v, DType dtype = DType::F64);

  Matrix to_matrix() const;
  Vector to_vector() const;

  std::size_t order() const noexcept { return shape_.size(); }
  std::span<const std::size_t> shape() const noexcept { return shape_; }
  std::size_t extent(std::size_t axis) const;
  std::size_t size() const noexcept { return data_.size(); }
  DType dtype() const noexcept { return dtype_; }

  std::span<const double> data() const noexcept { return data_; }
  std::span<double> data() noexcept { return data_; }

  /// Row-major strides, in elements.
  std::vector<std::size_t> strides() const;

  std::size_t offset(std::span<const std::size_t> index) const;

  double& at(std::initializer_list<std::size_t> index);
  double at(std::initializer_list<std::size_t> index) const;

  template <class... I>
  double& operator()(I... i) { return at({static_cast<std::size_t>(i)...}); }
  template <class... I>
  double operator()(I... i) const { return at({static_cast<std::size_t>(i)...}); }

  /// Copy with values rounded to the target precision.
  Tensor cast(DType dtype) const;

  bool all_finite() const noexcept;

  /// Shape and dtype equal, and every entry compares equal.
  friend bool operator==(const Tensor& a, const Tensor& b);

 private:
  friend Tensor make_result(std::vector<std::size_t>, DType);
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
  DType dtype_ = DType::F64;
};

/// Result dtype of a binary operation: F32 only when both operands are F32.
DType promote(DType a, DType b) noexcept;

/// Generalized tensor inner product. Contracts axis `axis_u` of `u` with
/// axis `axis_v` of `v`. The result carries u's surviving axes in their
/// original order followed by v's surviving axes in their original order.
/// Each entry is accumulated in ascending order of the contracted index,
/// starting from +0.0.
Tensor tensor_inner(const Tensor& u, const Tensor& v, std::size_t axis_u,
                    std::size_t axis_v);

/// Mode-n unfolding: rows indexed by axis n, columns enumerate the remaining
/// axes in ascending axis order, row-major (last remaining axis fastest).
Tensor mode_unfold(const Tensor& t, std::size_t axis);

/// result axis a is input axis perm[a].
Tensor permute_axes(const Tensor& t, std::span<const std::size_t> perm);
Tensor permute_axes(const Tensor& t, std::initializer_list<std::size_t> perm);

/// Mode-n product: replaces axis n (extent J) by the rows of `m` (I x J).
/// result[.., i, ..] = sum_j m(i, j) * t[.., j, ..]
Tensor mode_product(const Tensor& t, const Matrix& m, std::size_t axis);

struct Hosvd {
  Tensor core;
  /// factors[n] is extent(n) x rank(n), orthonormal columns ordered by
  /// descending mode-n singular value. Each column's largest-magnitude entry
  /// is nonnegative.
  std::vector<Matrix> factors;
  /// Singular values of each mode unfolding, descending.
  std::vector<Vector> singular_values;
};

/// Higher-order SVD. With `ranks` empty every mode keeps its full extent;
/// otherwise ranks[n] in [1, extent(n)] truncates mode n.
Hosvd hosvd(const Tensor& t, std::span<const std::size_t> ranks = {});

/// Multiplies the core back along every mode by its factor.
Tensor hosvd_reconstruct(const Hosvd& h);

/// Left singular vectors with the sign convention used across the library.
/// Returns (U full m x m, singular values).
std::pair<Matrix, Vector> left_singular_vectors(const Matrix& a);

/// Flips columns so that each column's largest-magnitude entry (first one on
/// ties) is nonnegative. Returns the applied signs.
Vector canonicalize_column_signs(Matrix& m);

double max_abs(const Tensor& t) noexcept;
double max_abs_diff(const Tensor& a, const Tensor& b);
double max_abs_diff(const Matrix& a, const Matrix& b);

}  // namespace blc
