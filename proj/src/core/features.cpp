#include "blc/features.hpp"

#include "blc/error.hpp"
#include "blc/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <queue>
#include <sstream>

namespace blc {

ModifierKind parse_modifier_kind(std::string_view name) {
  if (name == "relu") return ModifierKind::Relu;
  if (name == "gelu") return ModifierKind::Gelu;
  if (name == "identity") return ModifierKind::Identity;
  if (name == "bilinear") return ModifierKind::Bilinear;
  fail(ErrorKind::Argument, "unknown modifier kind '" + std::string(name) + "'");
}

double activate(ModifierKind kind, double z) {
  switch (kind) {
    case ModifierKind::Relu: return z > 0.0 ? z : 0.0;
    case ModifierKind::Gelu: return 0.5 * z * (1.0 + std::erf(z / std::numbers::sqrt2));
    case ModifierKind::Identity: return z;
    case ModifierKind::Bilinear: break;
  }
  fail(ErrorKind::Argument, "bilinear layers have no elementwise activation");
}

Vector modifier_vector(ModifierKind kind, const Matrix& w, const Vector& x) {
  if (kind == ModifierKind::Bilinear)
    fail(ErrorKind::Argument, "use the BilinearLayer overload for the bilinear modifier");
  if (w.cols() != x.size()) fail(ErrorKind::Dimension, "W columns must match input length");
  const Vector z = w * x;
  Vector m(z.size());
  for (Eigen::Index i = 0; i < z.size(); ++i)
    m(i) = z(i) == 0.0 ? 0.0 : activate(kind, z(i)) / z(i);
  return m;
}

Vector modifier_vector(const BilinearLayer& layer, const Vector& x) {
  if (static_cast<std::size_t>(x.size()) != layer.in_dim())
    fail(ErrorKind::Dimension, "input length must match the layer");
  Vector m = layer.w1 * x;
  if (layer.b1) m += *layer.b1;
  if (layer.one_plus_modifier) m.array() += 1.0;
  return m;
}

Basis svd_basis(const Matrix& w) {
  if (!w.allFinite()) fail(ErrorKind::Argument, "svd_basis input contains non-finite values");
  Eigen::BDCSVD<Matrix> svd(w, Eigen::ComputeThinU | Eigen::ComputeThinV);
  Basis b;
  b.method = BasisMethod::Svd;
  b.u = svd.matrixU();
  const Vector signs = canonicalize_column_signs(b.u);
  b.singular_values = svd.singularValues();
  b.vt = (svd.matrixV() * signs.asDiagonal() * b.singular_values.asDiagonal()).transpose();
  b.residual = max_abs_diff(w, b.u * b.vt);
  return b;
}

LeastSquares right_components(const Matrix& u, const Matrix& w) {
  if (!u.allFinite()) fail(ErrorKind::Argument, "U contains non-finite values");
  if (u.rows() != w.rows()) fail(ErrorKind::Dimension, "U and W must have the same row count");
  Eigen::CompleteOrthogonalDecomposition<Matrix> cod(u);
  LeastSquares ls;
  ls.vt = cod.solve(w);
  ls.rank = static_cast<std::size_t>(cod.rank());
  ls.rank_deficient = ls.rank < static_cast<std::size_t>(u.cols());
  ls.residual = max_abs_diff(w, u * ls.vt);
  return ls;
}

namespace {

// (W W^T)^{-1/2} W
Matrix symmetric_decorrelate(const Matrix& w) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(w * w.transpose());
  const Vector inv_sqrt = es.eigenvalues().cwiseMax(1e-300).cwiseSqrt().cwiseInverse();
  return es.eigenvectors() * inv_sqrt.asDiagonal() * es.eigenvectors().transpose() * w;
}

Vector excess_kurtosis(const Matrix& sources) {
  Vector k(sources.cols());
  for (Eigen::Index c = 0; c < sources.cols(); ++c) {
    const Vector s = sources.col(c).array() - sources.col(c).mean();
    const double var = s.squaredNorm() / static_cast<double>(s.size());
    k(c) = s.array().pow(4).mean() / (var * var) - 3.0;
  }
  return k;
}

}  // namespace

Basis ica_basis(const Matrix& samples, const IcaOptions& opt) {
  const Eigen::Index n = samples.rows(), m = samples.cols();
  if (n < 2 || m < 1) fail(ErrorKind::Argument, "ICA needs at least two samples");
  if (!samples.allFinite()) fail(ErrorKind::Argument, "ICA input contains non-finite values");
  const Eigen::Index c = opt.n_components == 0 ? m : static_cast<Eigen::Index>(opt.n_components);
  if (c > m) fail(ErrorKind::Argument, "n_components exceeds the data dimension");

  // Whitening through the principal components.
  const Vector mean = samples.colwise().mean().transpose();
  const Matrix centered = samples.rowwise() - mean.transpose();
  const Matrix cov = centered.transpose() * centered / static_cast<double>(n);
  Eigen::SelfAdjointEigenSolver<Matrix> es(cov);
  Matrix e(m, c);
  Vector d(c);
  for (Eigen::Index i = 0; i < c; ++i) {
    e.col(i) = es.eigenvectors().col(m - 1 - i);
    d(i) = es.eigenvalues()(m - 1 - i);
  }
  if (!(d(c - 1) > 1e-12 * std::max(1.0, d(0))))
    fail(ErrorKind::Argument, "data covariance is rank deficient for the requested components");
  const Matrix whiten = d.cwiseSqrt().cwiseInverse().asDiagonal() * e.transpose();  // c x m
  const Matrix z = centered * whiten.transpose();                                   // n x c

  Rng rng(opt.seed);
  Matrix w(c, c);
  for (Eigen::Index i = 0; i < c; ++i)
    for (Eigen::Index j = 0; j < c; ++j) w(i, j) = rng.normal();
  w = symmetric_decorrelate(w);

  const double inv_n = 1.0 / static_cast<double>(n);
  bool converged = false;
  int it = 0;
  while (it < opt.max_iter) {
    ++it;
    const Matrix g = (z * w.transpose()).array().tanh().matrix();  // n x c
    const Vector g_prime_mean = (1.0 - g.array().square()).colwise().mean().transpose();
    Matrix w_new = g.transpose() * z * inv_n - g_prime_mean.asDiagonal() * w;
    w_new = symmetric_decorrelate(w_new);
    const double lim = ((w_new * w.transpose()).diagonal().cwiseAbs().array() - 1.0).abs().maxCoeff();
    w = std::move(w_new);
    if (lim < opt.tol) {
      converged = true;
      break;
    }
  }

  Basis b;
  b.method = BasisMethod::Ica;
  b.iterations = it;
  b.converged = converged;
  const Matrix sources = z * w.transpose();
  b.excess_kurtosis = excess_kurtosis(sources);
  // Sample excess kurtosis of Gaussian data has standard error sqrt(24 / n);
  // the band widens to three of those so the flag does not depend on luck.
  const double noise = 3.0 * std::sqrt(24.0 / static_cast<double>(sources.rows()));
  b.gaussian_warning = b.excess_kurtosis.cwiseAbs().maxCoeff() <= std::max(opt.gaussian_band, noise);
  if (!converged && !b.gaussian_warning) {
    std::ostringstream os;
    os << "ICA did not converge within " << it << " iterations";
    throw ConvergenceError(os.str(), it);
  }

  // Mixing directions: centered ~ sources * (E D^{1/2} W^T)^T.
  Matrix mixing = e * d.cwiseSqrt().asDiagonal() * w.transpose();  // m x c
  std::vector<Eigen::Index> order(c);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index bb) {
    return mixing.col(a).norm() > mixing.col(bb).norm();
  });
  b.u.resize(m, c);
  Vector kurt(c);
  for (Eigen::Index i = 0; i < c; ++i) {
    b.u.col(i) = mixing.col(order[i]).normalized();
    kurt(i) = b.excess_kurtosis(order[i]);
  }
  b.excess_kurtosis = kurt;
  canonicalize_column_signs(b.u);
  return b;
}

Basis independent_components(const Matrix& w, const Matrix& inputs, const IcaOptions& options) {
  if (inputs.cols() != w.cols()) fail(ErrorKind::Dimension, "inputs must have one column per W column");
  Basis b = ica_basis(inputs * w.transpose(), options);
  LeastSquares ls = right_components(b.u, w);
  b.vt = std::move(ls.vt);
  b.residual = ls.residual;
  b.rank_deficient = ls.rank_deficient;
  return b;
}

Matrix modified_default_features(const Vector& d, const Matrix& w1, const Matrix& u2) {
  if (w1.cols() != d.size()) fail(ErrorKind::Dimension, "d must have one entry per W1 column");
  if (u2.rows() != w1.rows()) fail(ErrorKind::Dimension, "U2 must have one row per W1 row");
  const Vector v = w1 * d;
  return v.asDiagonal() * u2;
}

Matrix modified_default_features_by_contraction(const Vector& d, const Matrix& w1,
                                                const Matrix& u2) {
  const Tensor v = tensor_inner(Tensor::from_matrix(w1), Tensor::from_vector(d), 1, 0);
  const Tensor diag = tensor_inner(v, build_z(static_cast<std::size_t>(w1.rows())), 0, 0);
  return tensor_inner(diag, Tensor::from_matrix(u2), 1, 0).to_matrix();
}

namespace {

std::vector<std::size_t> top_indices(const std::vector<double>& score, std::size_t k) {
  std::vector<std::size_t> idx(score.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });
  idx.resize(std::min(k, idx.size()));
  return idx;
}

}  // namespace

ModificationReport modification_report(const Vector& d, const Matrix& w1, const Matrix& u2,
                                       std::size_t k) {
  if (k > static_cast<std::size_t>(u2.cols()))
    fail(ErrorKind::Argument, "k exceeds the number of default output features");
  ModificationReport r;
  r.modified = modified_default_features(d, w1, u2);
  for (Eigen::Index l = 0; l < u2.cols(); ++l)
    r.magnitude.push_back((u2.col(l) - r.modified.col(l)).norm());
  r.top = top_indices(r.magnitude, k);
  return r;
}

std::vector<std::size_t> topk_modified(const Vector& d, const Matrix& w1, const Matrix& u2,
                                       std::size_t k) {
  return modification_report(d, w1, u2, k).top;
}

double contribution_linear(const Matrix& w, const Vector& d, double a, const Vector& d_out) {
  if (w.cols() != d.size() || w.rows() != d_out.size())
    fail(ErrorKind::Dimension, "contribution_linear: inconsistent shapes");
  return (w * d * a).dot(d_out);
}

double contribution_pairwise(const ThirdOrderForm& form, std::size_t i,
                             const FeatureSet& features, const Vector& d_out) {
  features.validate();
  if (static_cast<std::size_t>(d_out.size()) != form.out_dim())
    fail(ErrorKind::Dimension, "d_out must have the layer's output dimension");
  if (i >= features.size() || features.coefficients(i) == 0.0)
    fail(ErrorKind::Argument, "feature " + std::to_string(i) + " is not active");
  const Vector di = features.directions.row(i).transpose();
  const double ai = features.coefficients(i);
  Vector c = ai * ai * apply_quadratic(form, di, di);
  for (std::size_t j : features.active()) {
    if (j == i) continue;
    const Vector dj = features.directions.row(j).transpose();
    const double aj = features.coefficients(j);
    c += 0.5 * ai * aj * (apply_quadratic(form, di, dj) + apply_quadratic(form, dj, di));
  }
  if (form.linear_term()) c += ai * (*form.linear_term() * di);
  return c.dot(d_out);
}

std::vector<BCoefficient> top_b_coefficients(const ThirdOrderForm& form, std::size_t k) {
  const Tensor b = form.materialize();
  const std::size_t n = b.shape()[1];
  k = std::min(k, b.size());
  auto data = b.data();
  // "a ranks before b"
  auto before = [&](std::size_t a, std::size_t c) {
    const double va = std::abs(data[a]), vc = std::abs(data[c]);
    return va != vc ? va > vc : a < c;  // flat offset order is lexicographic
  };
  // Max-heap on "ranks later" keeps the current k best.
  std::priority_queue<std::size_t, std::vector<std::size_t>, decltype(before)> heap(before);
  for (std::size_t off = 0; off < data.size() && k > 0; ++off) {
    if (heap.size() < k) {
      heap.push(off);
    } else if (before(off, heap.top())) {
      heap.pop();
      heap.push(off);
    }
  }
  std::vector<std::size_t> best;
  while (!heap.empty()) {
    best.push_back(heap.top());
    heap.pop();
  }
  std::reverse(best.begin(), best.end());
  std::vector<BCoefficient> out;
  for (std::size_t off : best) out.push_back({off / (n * n), (off / n) % n, off % n, data[off]});
  return out;
}

double pearson(const Vector& a, const Vector& b) {
  const Vector ac = a.array() - a.mean();
  const Vector bc = b.array() - b.mean();
  const double na = ac.norm(), nb = bc.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return ac.dot(bc) / (na * nb);
}

std::vector<PairScore> correlated_pair_ranking(const Matrix& act, const Matrix& dirs,
                                               const Matrix& w1, const Matrix& w2,
                                               const Matrix& u2, std::size_t k) {
  const Eigen::Index nf = act.cols();
  if (dirs.rows() != nf) fail(ErrorKind::Dimension, "one feature direction per activation column");
  if (dirs.cols() != w1.cols() || w1.rows() != w2.rows() || w1.cols() != w2.cols())
    fail(ErrorKind::Dimension, "feature directions and weights are inconsistent");
  if (u2.rows() != w2.rows()) fail(ErrorKind::Dimension, "U2 must have one row per W2 row");

  const Eigen::Index nd = u2.cols();
  // modification[m][f] and induced[l][f]
  Matrix modification(nf, nd), induced(nf, nd);
  for (Eigen::Index i = 0; i < nf; ++i) {
    const Vector d = dirs.row(i).transpose();
    const Vector v = w1 * d;
    const Vector out = w2 * d;
    const double mean_a = act.col(i).mean();
    for (Eigen::Index f = 0; f < nd; ++f) {
      modification(i, f) = (u2.col(f) - v.cwiseProduct(u2.col(f))).norm();
      induced(i, f) = std::abs(mean_a * u2.col(f).dot(out));
    }
  }
  std::vector<PairScore> pairs;
  for (Eigen::Index l = 0; l < nf; ++l)
    for (Eigen::Index m = 0; m < nf; ++m) {
      if (l == m) continue;
      const double corr = pearson(act.col(l), act.col(m));
      double best = 0.0;
      for (Eigen::Index f = 0; f < nd; ++f)
        best = std::max(best, modification(m, f) * induced(l, f));
      pairs.push_back({static_cast<std::size_t>(l), static_cast<std::size_t>(m),
                       std::abs(corr) * best, corr});
    }
  std::stable_sort(pairs.begin(), pairs.end(),
                   [](const PairScore& a, const PairScore& b) { return a.score > b.score; });
  if (k > 0 && k < pairs.size()) pairs.resize(k);
  return pairs;
}

}  // namespace blc
