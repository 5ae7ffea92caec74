#pragma once

// Bilinear MLP layers (W1 x) * (W2 x) and their third-order tensor form
// B[i][j][k] = W1[i][j] * W2[i][k], so that the layer output equals the
// double contraction x .12 B .21 x.

#include "blc/tensor.hpp"

#include <memory>
#include <optional>
#include <variant>
#include <vector>

namespace blc {

struct BilinearLayer {
  Matrix w1;  // m x n, modifier side
  Matrix w2;  // m x n, default-output side
  /// Footnote variant: modifier is W1 x + 1.
  bool one_plus_modifier = false;
  std::optional<Vector> b1;
  std::optional<Vector> b2;

  std::size_t out_dim() const noexcept { return static_cast<std::size_t>(w1.rows()); }
  std::size_t in_dim() const noexcept { return static_cast<std::size_t>(w1.cols()); }
  bool has_bias() const noexcept { return b1.has_value() || b2.has_value(); }

  /// Throws Dimension on inconsistent shapes.
  void validate() const;
};

BilinearLayer make_layer(Matrix w1, Matrix w2, bool one_plus_modifier = false);

/// (W1 x [+ b1] [+ 1]) * (W2 x [+ b2])
Vector forward(const BilinearLayer& layer, const Vector& x);

/// Superdiagonal m x m x m tensor: 1 where i == j == k.
Tensor build_z(std::size_t m);

inline constexpr std::size_t kDefaultMaterializationLimit = std::size_t{1} << 26;

/// The layer's quadratic part as an order-3 form, held either as the dense
/// m x n x n tensor or lazily as the pair (W1, W2).
class ThirdOrderForm {
 public:
  static ThirdOrderForm dense(Tensor b, std::size_t limit = kDefaultMaterializationLimit);
  static ThirdOrderForm factored(const BilinearLayer& layer,
                                 std::size_t limit = kDefaultMaterializationLimit);

  bool is_dense() const noexcept { return std::holds_alternative<Tensor>(repr_); }
  std::size_t out_dim() const noexcept { return m_; }
  std::size_t in_dim() const noexcept { return n_; }
  std::size_t materialization_limit() const noexcept { return limit_; }

  /// The dense tensor; Argument error for a factored form.
  const Tensor& tensor() const;
  /// Source layer of a factored form; Argument error for a dense form.
  const BilinearLayer& layer() const;

  /// Dense tensor, materializing a factored form if m*n*n is within the limit.
  Tensor materialize() const;

  /// W2 for forms built from a one-plus-modifier layer, whose output is the
  /// quadratic form plus the linear term W2 x.
  const std::optional<Matrix>& linear_term() const noexcept { return linear_; }

 private:
  friend ThirdOrderForm build_b(const BilinearLayer&, std::size_t);
  ThirdOrderForm() = default;
  std::variant<Tensor, std::shared_ptr<const BilinearLayer>> repr_;
  std::optional<Matrix> linear_;
  std::size_t m_ = 0, n_ = 0, limit_ = kDefaultMaterializationLimit;
};

/// Dense B from the elementwise definition. Precondition error if the layer
/// has biases, Capacity error if m*n*n exceeds `limit`.
ThirdOrderForm build_b(const BilinearLayer& layer, std::size_t limit = kDefaultMaterializationLimit);

/// B through contractions with Z: (W1 .12 Z) .21 W2 yields axes (j, i, k),
/// permuted (1, 0, 2) back to (i, j, k).
Tensor build_b_by_contraction(const BilinearLayer& layer);

enum class ContractionOrder { LeftFirst, RightFirst };

/// x .12 B .21 y. A factored form evaluates (W1 x) * (W2 y) without building
/// B. For a dense form `order` picks which side is contracted first.
Vector apply_quadratic(const ThirdOrderForm& form, const Vector& x, const Vector& y,
                       ContractionOrder order = ContractionOrder::LeftFirst);

/// Sparse combination of feature directions: x = sum_i a_i d_i.
struct FeatureSet {
  Matrix directions;    // n_features x d, one direction per row
  Vector coefficients;  // n_features, entries >= 0
  bool normalized = true;

  std::size_t size() const noexcept { return static_cast<std::size_t>(directions.rows()); }
  std::size_t dim() const noexcept { return static_cast<std::size_t>(directions.cols()); }
  /// Indices with nonzero coefficient, ascending.
  std::vector<std::size_t> active() const;
  Vector combine() const;
  /// Unit-norm rows (unless unnormalized), nonnegative finite coefficients.
  void validate() const;
};

FeatureSet make_feature_set(Matrix directions, Vector coefficients, bool normalized = true);

struct PairTerm {
  std::size_t i;
  std::size_t j;
  Vector value;  // a_i a_j (d_i .12 B .21 d_j)
};

struct PairwiseDecomposition {
  /// Ordered pairs over the active set, ascending (i, j).
  std::vector<PairTerm> terms;
  /// Present for one-plus-modifier forms: sum_i a_i W2 d_i.
  std::optional<Vector> linear;

  /// Sum of all terms plus the linear part; reproduces the layer output.
  Vector total(std::size_t out_dim) const;
};

PairwiseDecomposition pairwise_decompose(const ThirdOrderForm& form, const FeatureSet& features);

}  // namespace blc
