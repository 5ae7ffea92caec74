#pragma once

// Feature-construction analysis: modifier vectors, default-output-feature
// bases (SVD and ICA), least-squares right components, modification of
// default output features by input features, contribution scores and
// rankings over B.

#include "blc/bilinear.hpp"
#include "blc/tensor.hpp"

#include <cstdint>
#include <string_view>
#include <vector>

namespace blc {

enum class ModifierKind { Relu, Gelu, Identity, Bilinear };

/// "relu", "gelu", "identity", "bilinear"; Argument error otherwise.
ModifierKind parse_modifier_kind(std::string_view name);

double activate(ModifierKind kind, double z);

/// m(x)_i = act(Wx)_i / (Wx)_i, and 0 where (Wx)_i == 0. Argument error for
/// the bilinear kind, which has its own overload.
Vector modifier_vector(ModifierKind kind, const Matrix& w, const Vector& x);

/// W1 x (+ 1 for the one-plus variant).
Vector modifier_vector(const BilinearLayer& layer, const Vector& x);

enum class BasisMethod { Svd, Ica };

/// W ~ U * Vt.
struct Basis {
  Matrix u;   // m x r
  Matrix vt;  // r x n, empty when no weight matrix was supplied
  BasisMethod method = BasisMethod::Svd;
  double residual = 0.0;  // max-abs of W - U Vt
  Vector singular_values;  // svd only
  bool rank_deficient = false;

  // ICA diagnostics.
  bool gaussian_warning = false;
  bool converged = true;
  int iterations = 0;
  Vector excess_kurtosis;  // per recovered source
};

/// U = left singular vectors (thin), Vt = Sigma V^T. Each column of U has its
/// largest-magnitude entry nonnegative.
Basis svd_basis(const Matrix& w);

struct IcaOptions {
  std::size_t n_components = 0;  // 0: all of m
  std::uint64_t seed = 0;
  double tol = 1e-6;
  int max_iter = 1000;
  /// Every recovered source with |excess kurtosis| inside this band flags
  /// the data as near-Gaussian. The band is widened to 3 * sqrt(24 / samples)
  /// when sampling noise alone exceeds it.
  double gaussian_band = 0.05;
};

/// Symmetric fixed-point ICA with a logcosh contrast on samples x m data.
/// Columns of U are the unit-norm mixing directions. ConvergenceError if
/// the iteration does not settle, unless the data is flagged near-Gaussian,
/// in which case the unconverged basis is returned with both flags set.
Basis ica_basis(const Matrix& samples, const IcaOptions& options);

/// Left and right independent components of W: ICA on the pre-activations
/// inputs * W^T, then Vt from least squares.
Basis independent_components(const Matrix& w, const Matrix& inputs, const IcaOptions& options);

struct LeastSquares {
  Matrix vt;
  double residual = 0.0;  // max-abs of W - U Vt
  std::size_t rank = 0;
  bool rank_deficient = false;
};

/// Minimum-norm least-squares Vt for W ~ U Vt.
LeastSquares right_components(const Matrix& u, const Matrix& w);

/// Column l is (W1 d) * U2[:, l].
Matrix modified_default_features(const Vector& d, const Matrix& w1, const Matrix& u2);

/// The same matrix through tensor contractions: ((W1 d) .11 Z) .21 U2.
Matrix modified_default_features_by_contraction(const Vector& d, const Matrix& w1,
                                                const Matrix& u2);

struct ModificationReport {
  Matrix modified;                // U^(2,d)
  std::vector<double> magnitude;  // per default feature
  std::vector<std::size_t> top;   // descending magnitude, ties by index
};

ModificationReport modification_report(const Vector& d, const Matrix& w1, const Matrix& u2,
                                       std::size_t k);

std::vector<std::size_t> topk_modified(const Vector& d, const Matrix& w1, const Matrix& u2,
                                       std::size_t k);

/// (W d a)^T d_out.
double contribution_linear(const Matrix& w, const Vector& d, double a, const Vector& d_out);

/// Contribution of active feature i to the output projected on d_out, with
/// cross terms split evenly between the two features of each pair. Summed
/// over the active set it equals forward(x)^T d_out.
double contribution_pairwise(const ThirdOrderForm& form, std::size_t i,
                             const FeatureSet& features, const Vector& d_out);

struct BCoefficient {
  std::size_t i, j, k;
  double value;
};

/// k entries of largest |value|, ties by lexicographic (i, j, k).
std::vector<BCoefficient> top_b_coefficients(const ThirdOrderForm& form, std::size_t k);

struct PairScore {
  std::size_t l, m;
  double score;
  double correlation;
};

/// Heuristic ranking of ordered feature pairs (l, m):
///   |corr(a_l, a_m)| * max_f [ |U2_f - U2^(2,d_m)_f| * |mean(a_l) <U2_f, W2 d_l>| ]
/// Constant activation columns have correlation 0. Descending score, ties by
/// ascending (l, m). k == 0 returns every pair.
std::vector<PairScore> correlated_pair_ranking(const Matrix& activations,
                                               const Matrix& feature_directions,
                                               const Matrix& w1, const Matrix& w2,
                                               const Matrix& u2, std::size_t k);

/// Pearson correlation; 0 if either column is constant.
double pearson(const Vector& a, const Vector& b);

}  // namespace blc
