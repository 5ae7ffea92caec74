// Acceptance suite: one PASS/FAIL line per criterion. Exits 1 if any fail.
#include "blc/bilinear.hpp"
#include "blc/circuit.hpp"
#include "blc/error.hpp"
#include "blc/features.hpp"
#include "blc/persistence.hpp"
#include "blc/rng.hpp"
#include "blc/tensor.hpp"
#include "blc/training.hpp"

#include "convert.hpp"
#include "oracles.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

using namespace blc;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass;
  std::string detail;
};

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// NaN-sticky max.
double worst(double a, double b) { return (std::isnan(a) || b > a || std::isnan(b)) ? (std::isnan(a) ? a : b) : a; }

double gap(const std::vector<double>& a, const Vector& b) {
  double e = 0;
  for (std::size_t i = 0; i < a.size(); ++i) e = worst(e, std::abs(a[i] - b(static_cast<Eigen::Index>(i))));
  return e;
}

Matrix random_matrix(std::mt19937_64& g, std::size_t r, std::size_t c, double scale = 1.0) {
  return conv::from_mat(oracle::random_mat(g, r, c, scale));
}

Vector random_vector(std::mt19937_64& g, std::size_t n) { return random_matrix(g, n, 1); }

// sum_jk B[a][j][k] x[j] y[k], straight from the oracle tensor.
std::vector<double> oracle_quadratic(const oracle::Dense& b, const Vector& x, const Vector& y) {
  const std::size_t m = b.shape[0], n = b.shape[1];
  std::vector<double> out(m, 0.0);
  for (std::size_t a = 0; a < m; ++a)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t k = 0; k < n; ++k) out[a] += b.data[(a * n + j) * n + k] * x(j) * y(k);
  return out;
}

oracle::Transformer to_oracle(const ToyTransformer& t) {
  oracle::Transformer o;
  o.w_e = conv::to_mat(t.w_e);
  o.w_u = conv::to_mat(t.w_u);
  for (const AttentionHead& h : t.heads)
    o.heads.push_back({conv::to_mat(h.w_q), conv::to_mat(h.w_k), conv::to_mat(h.w_v), conv::to_mat(h.w_o)});
  o.in1 = conv::to_mat(t.mlp.w_in1);
  o.in2 = conv::to_mat(t.mlp.w_in2);
  o.out = conv::to_mat(t.mlp.w_out);
  o.qk_scale = t.qk_scale;
  return o;
}

Tokens random_tokens(std::mt19937_64& g, std::size_t n, std::size_t vocab) {
  Tokens t(n);
  for (auto& v : t) v = static_cast<std::int64_t>(g() % vocab);
  return t;
}

// ---------------------------------------------------------------------------

Outcome bform_identity() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 g(101);
  double fwd = 0, routes = 0;
  for (int c = 0; c < 200; ++c) {
    const std::size_t m = 1 + g() % 64, n = 1 + g() % 64;
    const double s = 1.0 / std::sqrt(double(n));
    const oracle::Mat w1 = oracle::random_mat(g, m, n, s), w2 = oracle::random_mat(g, m, n, s);
    const BilinearLayer layer = make_layer(conv::from_mat(w1), conv::from_mat(w2));
    const oracle::Dense b = oracle::b_tensor(w1, w2);
    const ThirdOrderForm dense = ThirdOrderForm::dense(build_b(layer).materialize());
    const ThirdOrderForm factored = ThirdOrderForm::factored(layer);
    for (int i = 0; i < 100; ++i) {
      const Vector x = random_vector(g, n);
      const Vector y = forward(layer, x);
      fwd = worst(fwd, gap(oracle_quadratic(b, x, x), y));
      fwd = worst(fwd, (y - apply_quadratic(dense, x, x)).cwiseAbs().maxCoeff());
      routes = worst(routes, (apply_quadratic(dense, x, x) - apply_quadratic(factored, x, x)).cwiseAbs().maxCoeff());
    }
  }
  const double t = seconds_since(t0);
  return {fwd <= 1e-10 && routes <= 1e-10 && t <= 30.0,
          "forward vs xBx " + fmt(fwd) + ", dense vs factored " + fmt(routes) + ", " + fmt(t) + " s"};
}

Outcome factored_construction() {
  std::mt19937_64 g(102);
  int exact = 0;
  for (int c = 0; c < 50; ++c) {
    const std::size_t m = 1 + g() % 16, n = 1 + g() % 16;
    const oracle::Mat w1 = oracle::random_mat(g, m, n), w2 = oracle::random_mat(g, m, n);
    const Tensor built = build_b_by_contraction(make_layer(conv::from_mat(w1), conv::from_mat(w2)));
    const oracle::Dense want = oracle::b_tensor(w1, w2);
    const auto got = built.data();
    exact += std::ranges::equal(built.shape(), want.shape) &&
             std::memcmp(got.data(), want.data.data(), want.data.size() * sizeof(double)) == 0;
  }
  return {exact == 50, std::to_string(exact) + "/50 bit-identical"};
}

Outcome associativity() {
  // Exact agreement needs every partial sum to be representable, so weights
  // and inputs are small dyadic rationals.
  std::mt19937_64 g(103);
  std::uniform_int_distribution<int> small(-8, 8);
  int exact = 0;
  double real_gap = 0;
  for (int c = 0; c < 100; ++c) {
    const std::size_t m = 1 + g() % 16, n = 1 + g() % 16;
    Matrix w1(m, n), w2(m, n);
    for (Eigen::Index i = 0; i < w1.size(); ++i) {
      w1.data()[i] = small(g) / 4.0;
      w2.data()[i] = small(g) / 4.0;
    }
    Vector x(n);
    for (std::size_t i = 0; i < n; ++i) x(i) = small(g) / 2.0;
    const ThirdOrderForm b = build_b(make_layer(w1, w2));
    exact += apply_quadratic(b, x, x, ContractionOrder::LeftFirst) ==
             apply_quadratic(b, x, x, ContractionOrder::RightFirst);

    const ThirdOrderForm r = build_b(make_layer(random_matrix(g, m, n), random_matrix(g, m, n)));
    const Vector xr = random_vector(g, n);
    real_gap = worst(real_gap, (apply_quadratic(r, xr, xr, ContractionOrder::LeftFirst) -
                                apply_quadratic(r, xr, xr, ContractionOrder::RightFirst))
                                   .cwiseAbs().maxCoeff());
  }
  return {exact == 100, std::to_string(exact) + "/100 exact on dyadic inputs; real-valued gap " + fmt(real_gap)};
}

Outcome path_expansion() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 g(104);
  double sum_gap = 0, oracle_gap = 0, mat_gap = 0;
  int materialized = 0;
  for (int c = 0; c < 50; ++c) {
    TransformerShape s;
    s.d_model = 1 + g() % 32;
    s.n_heads = g() % 5;
    s.d_head = 1 + g() % 8;
    s.d_mlp = 1 + g() % 64;
    s.n_vocab = 1 + g() % 64;
    const std::size_t n_ctx = 1 + g() % 16;
    s.n_ctx_max = c % 5 == 4 ? 16 : 0;
    s.qk_scale = c % 2 == 0;
    const ToyTransformer model = random_transformer(s, 2000 + c);
    const Tokens tokens = random_tokens(g, n_ctx, s.n_vocab);
    const Matrix logits = forward(model, tokens);
    sum_gap = worst(sum_gap, max_abs_diff(sum_terms(full_expansion(model, tokens)), logits));
    if (!model.pos) {
      const oracle::Mat want = oracle::transformer_logits(to_oracle(model), tokens);
      oracle_gap = worst(oracle_gap, max_abs_diff(conv::from_mat(want), logits));
      mat_gap = worst(mat_gap, materialized_check(model, tokens).vs_forward);
      ++materialized;
    }
  }
  const double t = seconds_since(t0);
  return {sum_gap <= 1e-8 && oracle_gap <= 1e-8 && mat_gap <= 1e-6 && t <= 120.0,
          "sum of terms vs forward " + fmt(sum_gap) + ", forward vs reference " + fmt(oracle_gap) +
              ", materialized (" + std::to_string(materialized) + " cases) " + fmt(mat_gap) + ", " + fmt(t) + " s"};
}

// F(x) = W_O ((W_I1 x) * (W_I2 x)) row by row, via the oracle.
Matrix oracle_mlp(const ToyTransformer& m, const Matrix& x1) {
  const oracle::Mat in1 = conv::to_mat(m.mlp.w_in1), in2 = conv::to_mat(m.mlp.w_in2),
                    out = conv::to_mat(m.mlp.w_out);
  Matrix r(x1.rows(), m.d_model());
  for (Eigen::Index p = 0; p < x1.rows(); ++p) {
    const auto h = oracle::bilinear(in1, in2, conv::to_std(x1.row(p).transpose()));
    const auto y = oracle::matvec(out, h);
    for (std::size_t d = 0; d < y.size(); ++d) r(p, static_cast<Eigen::Index>(d)) = y[d];
  }
  return r;
}

Outcome mlp_summands() {
  std::mt19937_64 g(105);
  bool ok = true;
  double worst_gap = 0;
  std::string note;
  for (int c = 0; c < 20; ++c) {
    TransformerShape s;
    s.n_heads = 0;
    ToyTransformer m0 = random_transformer(s, 3000 + c);
    const Tokens t0 = random_tokens(g, 1 + g() % 8, s.n_vocab);
    const auto g0 = mlp_term_groups(m0, t0, residual_components(m0, t0));
    std::size_t nonzero = 0;
    for (const auto& grp : g0)
      if (grp.values.cwiseAbs().maxCoeff() > 0) {
        ++nonzero;
        ok = ok && grp.term_class == TermClass::MlpDirectDirect;
      }
    ok = ok && nonzero == 1;
    worst_gap = worst(worst_gap, max_abs_diff(sum_terms(g0), oracle_mlp(m0, trace(m0, t0).x1)));

    s.n_heads = 1;
    ToyTransformer m1 = random_transformer(s, 4000 + c);
    const Tokens t1 = random_tokens(g, 1 + g() % 8, s.n_vocab);
    const auto g1 = mlp_term_groups(m1, t1, residual_components(m1, t1));
    ok = ok && g1.size() == 4;
    std::vector<TermClass> classes;
    for (const auto& grp : g1) classes.push_back(grp.term_class);
    for (TermClass want : {TermClass::MlpDirectDirect, TermClass::MlpHeadDirect, TermClass::MlpDirectHead,
                           TermClass::MlpHeadHead})
      ok = ok && std::count(classes.begin(), classes.end(), want) == 1;
    worst_gap = worst(worst_gap, max_abs_diff(sum_terms(g1), oracle_mlp(m1, trace(m1, t1).x1)));
  }
  return {ok && worst_gap <= 1e-9, std::string(ok ? "group structure as expected" : "unexpected groups") +
                                       ", sum vs F(x1) " + fmt(worst_gap)};
}

Outcome pairwise() {
  std::mt19937_64 g(106);
  std::normal_distribution<double> nd;
  double completeness = 0, four = 0;
  bool shapes = true;
  for (int c = 0; c < 50; ++c) {
    const std::size_t n = 2 + g() % 12, m = 1 + g() % 12, nf = 2 + g() % 32;
    const oracle::Mat w1 = oracle::random_mat(g, m, n), w2 = oracle::random_mat(g, m, n);
    const BilinearLayer l = make_layer(conv::from_mat(w1), conv::from_mat(w2));
    const oracle::Dense b = oracle::b_tensor(w1, w2);
    Matrix dirs = random_matrix(g, nf, n);
    for (Eigen::Index r = 0; r < dirs.rows(); ++r) dirs.row(r).normalize();

    Vector a = Vector::Zero(nf);
    for (int k = 0; k < 6; ++k) a(g() % nf) = std::abs(nd(g));
    const FeatureSet fs = make_feature_set(dirs, a);
    const Vector x = fs.combine();
    const Vector total = pairwise_decompose(ThirdOrderForm::factored(l), fs).total(m);
    completeness = worst(completeness, gap(oracle::bilinear(w1, w2, conv::to_std(x)), total));

    // Two active features: a_i a_j d_i B d_j for (i, j) in 00, 01, 10, 11.
    Vector a2 = Vector::Zero(nf);
    a2(0) = std::abs(nd(g)) + 0.1;
    a2(1) = std::abs(nd(g)) + 0.1;
    const FeatureSet two = make_feature_set(dirs, a2);
    const PairwiseDecomposition d = pairwise_decompose(build_b(l), two);
    shapes = shapes && d.terms.size() == 4;
    for (const PairTerm& t : d.terms) {
      const Vector di = dirs.row(t.i).transpose(), dj = dirs.row(t.j).transpose();
      std::vector<double> want = oracle_quadratic(b, di, dj);
      for (double& v : want) v *= a2(t.i) * a2(t.j);
      four = worst(four, gap(want, t.value));
    }
  }
  return {shapes && completeness <= 1e-9 && four <= 1e-9,
          "completeness " + fmt(completeness) + ", two-feature summands " + fmt(four)};
}

Outcome relu_modifier() {
  std::mt19937_64 g(107);
  std::size_t planted = 0;
  bool binary = true, exact = true;
  for (int c = 0; c < 10000; ++c) {
    const std::size_t m = 1 + g() % 8, n = 1 + g() % 8;
    Matrix w = random_matrix(g, m, n);
    Vector x = random_vector(g, n);
    if (c % 3 == 0) {
      w.row(g() % m).setZero();
      ++planted;
    }
    if (c % 7 == 0) x.setZero();
    const Vector z = w * x;
    const Vector mod = modifier_vector(ModifierKind::Relu, w, x);
    for (Eigen::Index i = 0; i < mod.size(); ++i) {
      binary = binary && (mod(i) == 0.0 || mod(i) == 1.0);
      const double relu = z(i) > 0 ? z(i) : 0.0;
      exact = exact && mod(i) * z(i) == relu;
    }
  }
  return {binary && exact, std::string(binary ? "{0,1}-valued" : "non-binary values") + ", " +
                               (exact ? "exact" : "mismatch") + " over 10000 cases (" + std::to_string(planted) +
                               " with planted zero rows)"};
}

double best_abs_cos(const Vector& target, const Matrix& u) {
  double best = 0;
  for (Eigen::Index c = 0; c < u.cols(); ++c)
    best = std::max(best, std::abs(target.normalized().dot(u.col(c).normalized())));
  return best;
}

Outcome ica() {
  std::string detail;
  bool ok = true;
  for (std::size_t m : {2u, 4u}) {
    int recovered = 0;
    for (int seed = 0; seed < 20; ++seed) {
      std::mt19937_64 g(5000 + 100 * m + seed);
      const Matrix a = random_matrix(g, m, m);
      std::uniform_real_distribution<double> u(-1.0, 1.0);
      Matrix s(2000, m);
      for (Eigen::Index i = 0; i < s.size(); ++i) s.data()[i] = u(g);
      IcaOptions opts;
      opts.seed = derive_seed(seed, "ica");
      const Basis b = ica_basis(s * a.transpose(), opts);
      bool all = true;
      for (Eigen::Index c = 0; c < a.cols(); ++c) all = all && best_abs_cos(a.col(c), b.u) >= 0.95;
      recovered += all;
    }
    ok = ok && recovered >= 18;
    detail += std::to_string(m) + " sources " + std::to_string(recovered) + "/20, ";
  }

  std::mt19937_64 g(5999);
  const Matrix w2 = random_matrix(g, 4, 6);
  std::uniform_real_distribution<double> u(-1, 1);
  Matrix inputs(3000, 6);
  for (Eigen::Index i = 0; i < inputs.size(); ++i) inputs.data()[i] = u(g);
  const Basis b = independent_components(w2, inputs, {});
  const double recon = (b.u * b.vt - w2).cwiseAbs().maxCoeff();
  ok = ok && b.u.cols() == 4 && recon <= 1e-6;

  Rng rng(7);
  Matrix gauss(5000, 3);
  for (Eigen::Index i = 0; i < gauss.size(); ++i) gauss.data()[i] = rng.normal();
  IcaOptions opts;
  opts.max_iter = 200;
  const bool warned = ica_basis(gauss, opts).gaussian_warning;
  ok = ok && warned;
  return {ok, detail + "U Vt vs W2 " + fmt(recon) + ", gaussian warning " + (warned ? "raised" : "missing")};
}

double frobenius_gap(const Tensor& a, const Tensor& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::pow(a.data()[i] - b.data()[i], 2);
  return std::sqrt(s);
}

Outcome hosvd_criterion() {
  std::mt19937_64 g(109);
  std::normal_distribution<double> nd;
  double full = 0;
  bool monotone = true;
  for (int c = 0; c < 20; ++c) {
    const std::vector<std::size_t> shape = {2 + g() % 7, 2 + g() % 7, 2 + g() % 7};
    Tensor t(shape);
    for (double& v : t.data()) v = nd(g);
    full = worst(full, max_abs_diff(hosvd_reconstruct(hosvd(t)), t));
    // Five retained-rank points from rank 1 to full, per mode.
    double prev = std::numeric_limits<double>::infinity();
    for (int p = 0; p < 5; ++p) {
      std::vector<std::size_t> ranks;
      for (std::size_t e : shape) ranks.push_back(1 + (e - 1) * p / 4);
      const double err = frobenius_gap(hosvd_reconstruct(hosvd(t, ranks)), t);
      monotone = monotone && err <= prev + 1e-12;
      prev = err;
    }
  }
  return {full <= 1e-10 && monotone,
          "full reconstruction " + fmt(full) + ", truncation error " + (monotone ? "non-increasing" : "increased")};
}

Outcome modification() {
  std::mt19937_64 g(110);
  double routes = 0;
  int matched = 0;
  for (int c = 0; c < 100; ++c) {
    const std::size_t m = 2 + g() % 12, n = 1 + g() % 12, r = 1 + g() % m;
    const Matrix w1 = random_matrix(g, m, n), u2 = random_matrix(g, m, r);
    const Vector d = random_vector(g, n);
    routes = worst(routes, (modified_default_features(d, w1, u2) - modified_default_features_by_contraction(d, w1, u2))
                               .cwiseAbs().maxCoeff());
    const auto mod = oracle::matvec(conv::to_mat(w1), conv::to_std(d));
    std::vector<double> mags(r);
    for (std::size_t l = 0; l < r; ++l) {
      double s = 0;
      for (std::size_t i = 0; i < m; ++i) s += std::pow(u2(i, l) - mod[i] * u2(i, l), 2);
      mags[l] = std::sqrt(s);
    }
    const std::size_t k = 1 + g() % r;
    matched += topk_modified(d, w1, u2, k) == oracle::topk(mags, k);
  }
  return {routes <= 1e-12 && matched == 100,
          "contraction vs scaling " + fmt(routes) + ", top-k " + std::to_string(matched) + "/100"};
}

std::size_t n_params(const Model& m) {
  std::size_t n = 0;
  for (const auto& [_, v] : m.params()) n += static_cast<std::size_t>(v->size());
  return n;
}

Outcome gradients() {
  double err = 0;
  std::size_t largest = 0;
  std::mt19937_64 g(111);
  for (Arch a : {Arch::Bilinear, Arch::Swiglu})
    for (bool one_plus : {false, true}) {
      const SuperpositionModel m(a, 6, 8, one_plus, 11);
      const Batch b{random_matrix(g, 5, 6), {}};
      largest = std::max(largest, n_params(m));
      err = worst(err, grad_check(m, b, {0.1, PenaltyKind::L2}, 1e-5, 1000).max_rel_error);
    }
  TaskConfig t;
  t.variant = TaskVariant::ToyLm;
  t.n_vocab = 7;
  t.n_ctx = 6;
  ModelConfig mc;
  mc.d_model = 6;
  mc.n_heads = 2;
  mc.d_head = 3;
  mc.d_mlp = 8;
  const auto lm = make_model(Arch::ToyTransformer, t, mc, 12);
  largest = std::max(largest, n_params(*lm));
  err = worst(err, grad_check(*lm, make_eval_batch(t, 12, 3), {0.1, PenaltyKind::L2}, 1e-5, 1000).max_rel_error);
  return {err <= 1e-6 && largest <= 1000,
          "max relative error " + fmt(err) + ", largest model " + std::to_string(largest) + " params"};
}

Outcome training_sanity() {
  TaskConfig sup;
  sup.n_features = 4;
  sup.d_input = 4;
  sup.sparsity = 1.0;
  OptConfig o;
  o.steps = 2000;
  o.seed = 1;
  const double mse = evaluate(*train(Arch::Bilinear, sup, o).model, sup, 1).loss;

  TaskConfig lm;
  lm.variant = TaskVariant::ToyLm;
  lm.n_vocab = 16;
  lm.n_ctx = 16;
  OptConfig lo;
  lo.steps = 3000;
  lo.batch_size = 32;
  lo.lr = 0.01;
  lo.seed = 3;
  const auto t0 = std::chrono::steady_clock::now();
  const EvalMetrics ev = evaluate(*train(Arch::ToyTransformer, lm, lo).model, lm, 3);
  const double lm_time = seconds_since(t0);
  const bool beats = ev.unigram_baseline && ev.loss < *ev.unigram_baseline && lm_time <= 300.0;

  int reduced = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    OptConfig po;
    po.steps = 300;
    po.seed = seed;
    const double free = evaluate(*train(Arch::Bilinear, sup, po).model, sup, seed).mean_modifier_norm;
    po.modifier_norm_penalty = 1e3;
    const double pen = evaluate(*train(Arch::Bilinear, sup, po).model, sup, seed).mean_modifier_norm;
    reduced += pen < free;
  }
  return {mse <= 0.01 && beats && reduced >= 9,
          "superposition MSE " + fmt(mse) + ", toy-LM loss " + fmt(ev.loss) + " vs unigram " +
              fmt(ev.unigram_baseline.value_or(NAN)) + " in " + fmt(lm_time) + " s, penalty reduced norm on " +
              std::to_string(reduced) + "/10 seeds"};
}

template <class F>
bool raises(ErrorKind kind, F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind() == kind;
  }
  return false;
}

Outcome persistence() {
  const fs::path dir = fs::temp_directory_path() / "blc_acceptance";
  fs::remove_all(dir);
  fs::create_directories(dir);
  std::mt19937_64 g(113);
  bool ok = true;
  for (DType dt : {DType::F32, DType::F64})
    for (std::size_t order = 1; order <= 4; ++order) {
      std::vector<std::size_t> shape;
      for (std::size_t a = 0; a < order; ++a) shape.push_back(1 + g() % 5);
      Tensor t(shape, dt);
      std::normal_distribution<double> nd;
      for (double& v : t.data()) v = dt == DType::F32 ? static_cast<float>(nd(g)) : nd(g);
      const fs::path p = dir / ("t" + std::to_string(order) + ".blt");
      write_tensor(t, p);
      const Tensor back = read_tensor(p);
      ok = ok && std::ranges::equal(back.shape(), t.shape()) && back.dtype() == dt &&
           std::memcmp(back.data().data(), t.data().data(), t.size() * sizeof(double)) == 0 &&
           encode_tensor(back) == read_file(p);
    }

  TaskConfig task;
  OptConfig opt;
  opt.steps = 20;
  const auto model = train(Arch::Bilinear, task, opt).model;
  const Checkpoint ck = to_checkpoint(*model, 5);
  write_checkpoint(ck, dir / "ckpt");
  const Checkpoint back = read_checkpoint(dir / "ckpt");
  for (const auto& [name, t] : ck.tensors)
    ok = ok && back.tensors.count(name) && encode_tensor(back.tensors.at(name)) == encode_tensor(t);
  ok = ok && back.arch == ck.arch && back.seed == ck.seed;

  auto bytes = encode_tensor(Tensor({2, 2}));
  bytes[0] = 'X';
  const bool magic = raises(ErrorKind::Format, [&] { decode_tensor(bytes); });
  bytes = encode_tensor(Tensor({2, 2}));
  bytes.pop_back();
  const bool truncated = raises(ErrorKind::Length, [&] { decode_tensor(bytes); });
  bytes = encode_tensor(Tensor({2, 2}));
  bytes[4] = 7;
  const bool dtype = raises(ErrorKind::Version, [&] { decode_tensor(bytes); });

  const fs::path f = dir / "ckpt" / tensor_file_name("layer.W2");
  auto raw = read_file(f);
  raw.back() ^= 0x01;
  write_file_atomic(f, raw);
  const bool hash = raises(ErrorKind::Integrity, [&] { read_checkpoint(dir / "ckpt"); });
  fs::remove(f);
  const bool missing = raises(ErrorKind::Integrity, [&] { read_checkpoint(dir / "ckpt"); });
  fs::remove_all(dir);

  const bool errors = magic && truncated && dtype && hash && missing;
  return {ok && errors, std::string(ok ? "round-trips bit-identical" : "round-trip mismatch") + ", error classes " +
                            (errors ? "as expected" : "wrong")};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"B-form identity", bform_identity},
      {"factored construction", factored_construction},
      {"contraction associativity", associativity},
      {"path-expansion exactness", path_expansion},
      {"MLP summand structure", mlp_summands},
      {"pairwise decomposition", pairwise},
      {"relu modifier vectors", relu_modifier},
      {"ICA pipeline", ica},
      {"HOSVD", hosvd_criterion},
      {"modification analysis", modification},
      {"gradient checks", gradients},
      {"desk-scale training", training_sanity},
      {"persistence", persistence},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("%s %2zu %s: %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(),
                o.detail.c_str(), seconds_since(t0));
    std::fflush(stdout);
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
