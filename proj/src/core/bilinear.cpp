#include "blc/bilinear.hpp"

#include "blc/error.hpp"

#include <cmath>
#include <sstream>

namespace blc {

namespace {

void require_bias_free(const BilinearLayer& layer, const char* what) {
  if (layer.has_bias())
    fail(ErrorKind::Precondition,
         std::string(what) + " is defined for bias-free layers only");
}

void check_input(std::size_t expected, const Vector& x, const char* name) {
  if (static_cast<std::size_t>(x.size()) != expected) {
    std::ostringstream os;
    os << name << " has length " << x.size() << ", layer expects " << expected;
    fail(ErrorKind::Dimension, os.str());
  }
}

}  // namespace

void BilinearLayer::validate() const {
  if (w1.rows() < 1 || w1.cols() < 1) fail(ErrorKind::Dimension, "W1 must be at least 1x1");
  if (w1.rows() != w2.rows() || w1.cols() != w2.cols()) {
    std::ostringstream os;
    os << "W1 is " << w1.rows() << "x" << w1.cols() << " but W2 is " << w2.rows() << "x"
       << w2.cols();
    fail(ErrorKind::Dimension, os.str());
  }
  if (b1 && b1->size() != w1.rows()) fail(ErrorKind::Dimension, "b1 length must equal rows of W1");
  if (b2 && b2->size() != w2.rows()) fail(ErrorKind::Dimension, "b2 length must equal rows of W2");
}

BilinearLayer make_layer(Matrix w1, Matrix w2, bool one_plus_modifier) {
  BilinearLayer layer{std::move(w1), std::move(w2), one_plus_modifier, std::nullopt, std::nullopt};
  layer.validate();
  return layer;
}

Vector forward(const BilinearLayer& layer, const Vector& x) {
  check_input(layer.in_dim(), x, "input");
  Vector left = layer.w1 * x;
  Vector right = layer.w2 * x;
  if (layer.b1) left += *layer.b1;
  if (layer.b2) right += *layer.b2;
  if (layer.one_plus_modifier) left.array() += 1.0;
  return left.cwiseProduct(right);
}

Tensor build_z(std::size_t m) {
  if (m < 1) fail(ErrorKind::Argument, "Z needs m >= 1");
  Tensor z({m, m, m});
  for (std::size_t i = 0; i < m; ++i) z(i, i, i) = 1.0;
  return z;
}

ThirdOrderForm ThirdOrderForm::dense(Tensor b, std::size_t limit) {
  if (b.order() != 3 || b.shape()[1] != b.shape()[2])
    fail(ErrorKind::Dimension, "a third-order form must have shape m x n x n");
  if (b.size() > limit) fail(ErrorKind::Capacity, "dense form exceeds the materialization limit");
  ThirdOrderForm f;
  f.m_ = b.shape()[0];
  f.n_ = b.shape()[1];
  f.limit_ = limit;
  f.repr_ = std::move(b);
  return f;
}

ThirdOrderForm ThirdOrderForm::factored(const BilinearLayer& layer, std::size_t limit) {
  layer.validate();
  require_bias_free(layer, "the third-order form");
  ThirdOrderForm f;
  f.m_ = layer.out_dim();
  f.n_ = layer.in_dim();
  f.limit_ = limit;
  if (layer.one_plus_modifier) f.linear_ = layer.w2;
  f.repr_ = std::make_shared<const BilinearLayer>(layer);
  return f;
}

const Tensor& ThirdOrderForm::tensor() const {
  if (!is_dense()) fail(ErrorKind::Argument, "form is factored; call materialize()");
  return std::get<Tensor>(repr_);
}

const BilinearLayer& ThirdOrderForm::layer() const {
  if (is_dense()) fail(ErrorKind::Argument, "form is dense and has no source layer");
  return *std::get<std::shared_ptr<const BilinearLayer>>(repr_);
}

Tensor ThirdOrderForm::materialize() const {
  if (is_dense()) return tensor();
  return build_b(layer(), limit_).tensor();
}

ThirdOrderForm build_b(const BilinearLayer& layer, std::size_t limit) {
  layer.validate();
  require_bias_free(layer, "build_b");
  const std::size_t m = layer.out_dim(), n = layer.in_dim();
  if (m * n * n > limit) {
    std::ostringstream os;
    os << "B would have " << m * n * n << " elements (limit " << limit
       << "); use the factored form instead";
    fail(ErrorKind::Capacity, os.str());
  }
  Tensor b({m, n, n});
  auto data = b.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t k = 0; k < n; ++k)
        data[(i * n + j) * n + k] = layer.w1(i, j) * layer.w2(i, k);
  ThirdOrderForm f = ThirdOrderForm::dense(std::move(b), limit);
  if (layer.one_plus_modifier) f.linear_ = layer.w2;
  return f;
}

Tensor build_b_by_contraction(const BilinearLayer& layer) {
  layer.validate();
  require_bias_free(layer, "build_b_by_contraction");
  const Tensor z = build_z(layer.out_dim());
  // W1 .12 Z -> [j][a][c] = W1[a][j] delta(a, c)
  const Tensor left = tensor_inner(Tensor::from_matrix(layer.w1), z, 0, 1);
  // (.) .21 W2 -> [j][c][k] = W1[c][j] W2[c][k]
  const Tensor jik = tensor_inner(left, Tensor::from_matrix(layer.w2), 1, 0);
  return permute_axes(jik, {1, 0, 2});
}

Vector apply_quadratic(const ThirdOrderForm& form, const Vector& x, const Vector& y,
                       ContractionOrder order) {
  check_input(form.in_dim(), x, "left input");
  check_input(form.in_dim(), y, "right input");
  if (!form.is_dense()) {
    const BilinearLayer& layer = form.layer();
    return (layer.w1 * x).cwiseProduct(layer.w2 * y);
  }
  const Tensor& b = form.tensor();
  const Tensor tx = Tensor::from_vector(x);
  const Tensor ty = Tensor::from_vector(y);
  if (order == ContractionOrder::LeftFirst) {
    const Tensor ik = tensor_inner(tx, b, 0, 1);
    return tensor_inner(ik, ty, 1, 0).to_vector();
  }
  const Tensor ij = tensor_inner(b, ty, 2, 0);
  return tensor_inner(tx, ij, 0, 1).to_vector();
}

std::vector<std::size_t> FeatureSet::active() const {
  std::vector<std::size_t> r;
  for (Eigen::Index i = 0; i < coefficients.size(); ++i)
    if (coefficients(i) != 0.0) r.push_back(static_cast<std::size_t>(i));
  return r;
}

Vector FeatureSet::combine() const {
  Vector x = Vector::Zero(directions.cols());
  for (std::size_t i : active()) x += coefficients(i) * directions.row(i).transpose();
  return x;
}

void FeatureSet::validate() const {
  if (coefficients.size() != directions.rows())
    fail(ErrorKind::Dimension, "one coefficient per feature direction is required");
  for (Eigen::Index i = 0; i < coefficients.size(); ++i)
    if (!std::isfinite(coefficients(i)) || coefficients(i) < 0.0)
      fail(ErrorKind::Argument, "feature coefficients must be finite and nonnegative");
  if (normalized)
    for (Eigen::Index i = 0; i < directions.rows(); ++i)
      if (std::abs(directions.row(i).norm() - 1.0) > 1e-9)
        fail(ErrorKind::Argument, "feature direction " + std::to_string(i) + " is not unit norm");
}

FeatureSet make_feature_set(Matrix directions, Vector coefficients, bool normalized) {
  FeatureSet f{std::move(directions), std::move(coefficients), normalized};
  f.validate();
  return f;
}

Vector PairwiseDecomposition::total(std::size_t out_dim) const {
  Vector s = Vector::Zero(static_cast<Eigen::Index>(out_dim));
  for (const PairTerm& t : terms) s += t.value;
  if (linear) s += *linear;
  return s;
}

PairwiseDecomposition pairwise_decompose(const ThirdOrderForm& form, const FeatureSet& features) {
  features.validate();
  if (features.dim() != form.in_dim()) {
    std::ostringstream os;
    os << "feature directions have length " << features.dim() << ", form expects "
       << form.in_dim();
    fail(ErrorKind::Dimension, os.str());
  }
  PairwiseDecomposition out;
  const auto act = features.active();
  if (act.empty()) return out;

  std::vector<Vector> dirs;
  for (std::size_t i : act) dirs.push_back(features.directions.row(i).transpose());

  // Per-feature images on each side, reused across all pairs.
  std::vector<Vector> left, right;
  if (!form.is_dense()) {
    for (const Vector& d : dirs) {
      left.push_back(form.layer().w1 * d);
      right.push_back(form.layer().w2 * d);
    }
  }
  out.terms.reserve(act.size() * act.size());
  for (std::size_t p = 0; p < act.size(); ++p) {
    for (std::size_t q = 0; q < act.size(); ++q) {
      const double scale = features.coefficients(act[p]) * features.coefficients(act[q]);
      Vector v = form.is_dense() ? apply_quadratic(form, dirs[p], dirs[q])
                                 : Vector(left[p].cwiseProduct(right[q]));
      out.terms.push_back({act[p], act[q], scale * v});
    }
  }
  if (form.linear_term()) {
    Vector lin = Vector::Zero(form.out_dim());
    for (std::size_t p = 0; p < act.size(); ++p)
      lin += features.coefficients(act[p]) * (*form.linear_term() * dirs[p]);
    out.linear = lin;
  }
  return out;
}

}  // namespace blc
