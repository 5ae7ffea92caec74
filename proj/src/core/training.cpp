#include "blc/training.hpp"

#include "blc/error.hpp"
#include "blc/persistence.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace blc {

namespace {

Matrix gaussian(Rng& rng, std::size_t rows, std::size_t cols, double stddev) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = stddev * rng.normal();
  return m;
}

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// Value and gradient of lambda / count * sum_rows ||row||.
double norm_penalty(const Matrix& p, const Penalty& pen, double count, Matrix* grad) {
  if (grad) *grad = Matrix::Zero(p.rows(), p.cols());
  if (pen.lambda == 0.0) return 0.0;
  double total = 0.0;
  const double scale = pen.lambda / count;
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    if (pen.kind == PenaltyKind::L2) {
      const double n = p.row(r).norm();
      total += n;
      if (grad && n > 0.0) grad->row(r) = scale * p.row(r) / n;
    } else {
      total += p.row(r).cwiseAbs().sum();
      if (grad)
        for (Eigen::Index c = 0; c < p.cols(); ++c)
          (*grad)(r, c) = scale * static_cast<double>((p(r, c) > 0.0) - (p(r, c) < 0.0));
    }
  }
  return scale * total;
}

std::vector<double> importance_weights(const TaskConfig& task) {
  std::vector<double> w(task.d_input);
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::pow(task.importance_decay, double(i));
  return w;
}

}  // namespace

// ---------------------------------------------------------------------------
// Configs

void TaskConfig::validate() const {
  if (variant == TaskVariant::Superposition) {
    if (n_features < 1 || d_input < 1) fail(ErrorKind::Config, "n_features and d_input must be >= 1");
    if (!(sparsity > 0.0 && sparsity <= 1.0)) fail(ErrorKind::Config, "sparsity p must be in (0, 1]");
    if (!(importance_decay > 0.0)) fail(ErrorKind::Config, "importance decay must be positive");
    if (dictionary == DictionaryKind::Identity && n_features != d_input)
      fail(ErrorKind::Config, "identity dictionary needs n_features == d_input");
  } else {
    if (n_vocab < 2) fail(ErrorKind::Config, "n_vocab must be >= 2");
    if (n_ctx < 2) fail(ErrorKind::Config, "n_ctx must be >= 2");
    if (repeat_len * 2 > n_ctx) fail(ErrorKind::Config, "repeat_len must be <= n_ctx / 2");
  }
}

void OptConfig::validate() const {
  if (steps < 0) fail(ErrorKind::Config, "steps must be >= 0");
  if (batch_size < 1) fail(ErrorKind::Config, "batch_size must be >= 1");
  if (!(lr >= 0.0)) fail(ErrorKind::Config, "learning rate must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0))
    fail(ErrorKind::Config, "Adam betas must be in [0, 1)");
  if (!(eps > 0.0)) fail(ErrorKind::Config, "Adam epsilon must be positive");
  if (!(modifier_norm_penalty >= 0.0)) fail(ErrorKind::Config, "penalty lambda must be >= 0");
}

Arch parse_arch(std::string_view name) {
  if (name == "linear") return Arch::Linear;
  if (name == "bilinear") return Arch::Bilinear;
  if (name == "relu") return Arch::Relu;
  if (name == "swiglu") return Arch::Swiglu;
  if (name == "toy-transformer" || name == "toy_transformer") return Arch::ToyTransformer;
  fail(ErrorKind::Config, "unknown architecture '" + std::string(name) + "'");
}

std::string to_string(Arch arch) {
  switch (arch) {
    case Arch::Linear: return "linear";
    case Arch::Bilinear: return "bilinear";
    case Arch::Relu: return "relu";
    case Arch::Swiglu: return "swiglu";
    case Arch::ToyTransformer: return "toy_transformer";
  }
  return "?";
}

std::vector<std::pair<std::string, const Matrix*>> Model::params() const {
  std::vector<std::pair<std::string, const Matrix*>> out;
  for (auto& p : const_cast<Model*>(this)->params()) out.emplace_back(p.name, p.value);
  return out;
}

// ---------------------------------------------------------------------------
// Superposition autoencoder

SuperpositionModel::SuperpositionModel(Arch arch, std::size_t d_input, std::size_t d_hidden,
                                       bool one_plus_modifier, std::uint64_t seed,
                                       double init_scale)
    : arch_(arch), one_plus_(one_plus_modifier && arch == Arch::Bilinear) {
  if (arch == Arch::ToyTransformer) fail(ErrorKind::Config, "not a superposition architecture");
  Rng rng(seed);
  const double in_std = init_scale / std::sqrt(double(d_input));
  const double out_std = init_scale / std::sqrt(double(d_hidden));
  w1_ = gaussian(rng, d_hidden, d_input, in_std);
  if (arch == Arch::Bilinear || arch == Arch::Swiglu) w2_ = gaussian(rng, d_hidden, d_input, in_std);
  if (arch == Arch::Relu) b_ = Matrix::Zero(d_hidden, 1);
  w_out_ = gaussian(rng, d_input, d_hidden, out_std);
  b_out_ = Matrix::Zero(d_input, 1);
  importance_.assign(d_input, 1.0);
}

SuperpositionModel::SuperpositionModel(Arch arch, bool one_plus_modifier,
                                       std::map<std::string, Matrix> p,
                                       std::vector<double> importance)
    : arch_(arch), one_plus_(one_plus_modifier && arch == Arch::Bilinear),
      importance_(std::move(importance)) {
  auto take = [&](const std::string& name) {
    auto it = p.find(name);
    if (it == p.end()) fail(ErrorKind::Integrity, "checkpoint lacks tensor " + name);
    return it->second;
  };
  const bool two = arch == Arch::Bilinear || arch == Arch::Swiglu;
  w1_ = take(two ? "layer.W1" : "layer.W");
  if (two) w2_ = take("layer.W2");
  if (arch == Arch::Relu) b_ = take("layer.b");
  w_out_ = take("out.W");
  b_out_ = take("out.b");
  if (importance_.empty()) importance_.assign(w_out_.rows(), 1.0);
  const auto dh = w1_.rows(), di = w1_.cols();
  if ((two && (w2_.rows() != dh || w2_.cols() != di)) || w_out_.rows() != di ||
      w_out_.cols() != dh || b_out_.rows() != di || (arch == Arch::Relu && b_.rows() != dh) ||
      importance_.size() != static_cast<std::size_t>(di))
    fail(ErrorKind::Dimension, "checkpoint tensors have inconsistent shapes");
}

std::vector<NamedParam> SuperpositionModel::params() {
  std::vector<NamedParam> p;
  const bool two = arch_ == Arch::Bilinear || arch_ == Arch::Swiglu;
  p.push_back({two ? "layer.W1" : "layer.W", &w1_});
  if (two) p.push_back({"layer.W2", &w2_});
  if (arch_ == Arch::Relu) p.push_back({"layer.b", &b_});
  p.push_back({"out.W", &w_out_});
  p.push_back({"out.b", &b_out_});
  return p;
}

std::unique_ptr<Model> SuperpositionModel::clone() const {
  return std::make_unique<SuperpositionModel>(*this);
}

BilinearLayer SuperpositionModel::hidden_layer() const {
  if (arch_ != Arch::Bilinear) fail(ErrorKind::Precondition, "model has no bilinear layer");
  return make_layer(w1_, w2_, one_plus_);
}

Matrix SuperpositionModel::predict(const Matrix& x) const {
  Matrix h;
  switch (arch_) {
    case Arch::Linear: h = x * w1_.transpose(); break;
    case Arch::Relu:
      h = ((x * w1_.transpose()).rowwise() + b_.col(0).transpose()).cwiseMax(0.0);
      break;
    case Arch::Bilinear: {
      Matrix u = x * w1_.transpose();
      if (one_plus_) u.array() += 1.0;
      h = u.cwiseProduct(x * w2_.transpose());
      break;
    }
    case Arch::Swiglu: {
      const Matrix z = x * w1_.transpose();
      const Matrix s = z.unaryExpr([](double v) { return v * sigmoid(v); });
      h = s.cwiseProduct(x * w2_.transpose());
      break;
    }
    case Arch::ToyTransformer: break;
  }
  return (h * w_out_.transpose()).rowwise() + b_out_.col(0).transpose();
}

double SuperpositionModel::loss(const Batch& batch, const Penalty& pen,
                                std::vector<Matrix>* grads) const {
  const Matrix& x = batch.x;
  if (x.cols() != w1_.cols()) fail(ErrorKind::Dimension, "batch width does not match the model");
  const double nb = static_cast<double>(x.rows());
  const double count = nb * static_cast<double>(x.cols());

  Matrix p1 = x * w1_.transpose();
  Matrix p2, left, act, h;
  switch (arch_) {
    case Arch::Linear: h = p1; break;
    case Arch::Relu:
      p1 = p1.rowwise() + b_.col(0).transpose();
      h = p1.cwiseMax(0.0);
      break;
    case Arch::Bilinear:
      p2 = x * w2_.transpose();
      left = p1;
      if (one_plus_) left.array() += 1.0;
      h = left.cwiseProduct(p2);
      break;
    case Arch::Swiglu:
      p2 = x * w2_.transpose();
      act = p1.unaryExpr([](double v) { return v * sigmoid(v); });
      h = act.cwiseProduct(p2);
      break;
    case Arch::ToyTransformer: break;
  }
  const Matrix y = (h * w_out_.transpose()).rowwise() + b_out_.col(0).transpose();
  const Matrix r = y - x;
  const Eigen::Map<const Vector> w(importance_.data(), static_cast<Eigen::Index>(importance_.size()));
  double mse = (r.array().square().rowwise() * w.transpose().array()).sum() / count;

  const bool has_modifier = arch_ == Arch::Bilinear || arch_ == Arch::Swiglu;
  Matrix dpen;
  const double penv = has_modifier ? norm_penalty(p1, pen, nb, grads ? &dpen : nullptr) : 0.0;
  if (!grads) return mse + penv;

  const Matrix dy = (2.0 / count) * (r.array().rowwise() * w.transpose().array()).matrix();
  const Matrix dw_out = dy.transpose() * h;
  const Matrix db_out = dy.colwise().sum().transpose();
  const Matrix dh = dy * w_out_;
  grads->clear();
  switch (arch_) {
    case Arch::Linear:
      grads->push_back(dh.transpose() * x);
      break;
    case Arch::Relu: {
      const Matrix dz = dh.cwiseProduct(p1.unaryExpr([](double v) { return v > 0.0 ? 1.0 : 0.0; }));
      grads->push_back(dz.transpose() * x);
      grads->push_back(dz.colwise().sum().transpose());
      break;
    }
    case Arch::Bilinear: {
      const Matrix dp1 = dh.cwiseProduct(p2) + dpen;
      const Matrix dp2 = dh.cwiseProduct(left);
      grads->push_back(dp1.transpose() * x);
      grads->push_back(dp2.transpose() * x);
      break;
    }
    case Arch::Swiglu: {
      const Matrix dswish = p1.unaryExpr([](double v) {
        const double s = sigmoid(v);
        return s + v * s * (1.0 - s);
      });
      const Matrix dp1 = dh.cwiseProduct(p2).cwiseProduct(dswish) + dpen;
      const Matrix dp2 = dh.cwiseProduct(act);
      grads->push_back(dp1.transpose() * x);
      grads->push_back(dp2.transpose() * x);
      break;
    }
    case Arch::ToyTransformer: break;
  }
  grads->push_back(dw_out);
  grads->push_back(db_out);
  return mse + penv;
}

double SuperpositionModel::penalty(const Batch& batch, const Penalty& pen) const {
  if (arch_ != Arch::Bilinear && arch_ != Arch::Swiglu) return 0.0;
  return norm_penalty(batch.x * w1_.transpose(), pen, double(batch.x.rows()), nullptr);
}

double SuperpositionModel::mean_modifier_norm(const Batch& batch) const {
  if (arch_ != Arch::Bilinear && arch_ != Arch::Swiglu) return 0.0;
  return (batch.x * w1_.transpose()).rowwise().norm().mean();
}

Vector SuperpositionModel::kink_preactivations(const Batch& batch) const {
  if (arch_ != Arch::Relu) return {};
  const Matrix z = (batch.x * w1_.transpose()).rowwise() + b_.col(0).transpose();
  return Eigen::Map<const Vector>(z.data(), z.size());
}

// ---------------------------------------------------------------------------
// Transformer language model

std::vector<NamedParam> TransformerLm::params() {
  std::vector<NamedParam> p;
  p.push_back({"W_E", &model_.w_e});
  p.push_back({"W_U", &model_.w_u});
  for (std::size_t h = 0; h < model_.heads.size(); ++h) {
    const std::string pre = "heads." + std::to_string(h) + ".";
    p.push_back({pre + "W_Q", &model_.heads[h].w_q});
    p.push_back({pre + "W_K", &model_.heads[h].w_k});
    p.push_back({pre + "W_V", &model_.heads[h].w_v});
    p.push_back({pre + "W_O", &model_.heads[h].w_o});
  }
  p.push_back({"mlp.W_I1", &model_.mlp.w_in1});
  p.push_back({"mlp.W_I2", &model_.mlp.w_in2});
  p.push_back({"mlp.W_O", &model_.mlp.w_out});
  if (model_.pos) p.push_back({"pos", &*model_.pos});
  return p;
}

std::unique_ptr<Model> TransformerLm::clone() const { return std::make_unique<TransformerLm>(*this); }

double TransformerLm::loss(const Batch& batch, const Penalty& pen,
                           std::vector<Matrix>* grads) const {
  const ToyTransformer& m = model_;
  const std::size_t nh = m.heads.size();
  if (batch.tokens.empty()) fail(ErrorKind::Argument, "empty token batch");
  std::size_t n_pred = 0, n_pos = 0;
  for (const Tokens& t : batch.tokens) {
    n_pred += t.size() - 1;
    n_pos += t.size();
  }
  const double scale = m.qk_scale ? 1.0 / std::sqrt(double(m.d_head())) : 1.0;

  // Gradient accumulators in params() order.
  Matrix g_we, g_wu, g_i1, g_i2, g_om, g_pos;
  std::vector<std::array<Matrix, 4>> g_heads(nh);
  if (grads) {
    g_we = Matrix::Zero(m.w_e.rows(), m.w_e.cols());
    g_wu = Matrix::Zero(m.w_u.rows(), m.w_u.cols());
    g_i1 = Matrix::Zero(m.mlp.w_in1.rows(), m.mlp.w_in1.cols());
    g_i2 = Matrix::Zero(m.mlp.w_in2.rows(), m.mlp.w_in2.cols());
    g_om = Matrix::Zero(m.mlp.w_out.rows(), m.mlp.w_out.cols());
    if (m.pos) g_pos = Matrix::Zero(m.pos->rows(), m.pos->cols());
    for (std::size_t h = 0; h < nh; ++h)
      g_heads[h] = {Matrix::Zero(m.heads[h].w_q.rows(), m.heads[h].w_q.cols()),
                    Matrix::Zero(m.heads[h].w_k.rows(), m.heads[h].w_k.cols()),
                    Matrix::Zero(m.heads[h].w_v.rows(), m.heads[h].w_v.cols()),
                    Matrix::Zero(m.heads[h].w_o.rows(), m.heads[h].w_o.cols())};
  }

  double ce = 0.0, penv = 0.0;
  for (const Tokens& tokens : batch.tokens) {
    const Matrix onehot = one_hot(m, tokens);
    const Eigen::Index n = onehot.rows();
    Matrix x0 = onehot * m.w_e.transpose();
    if (m.pos) {
      if (m.pos->rows() < n) fail(ErrorKind::Argument, "sequence longer than positional embedding");
      x0 += m.pos->topRows(n);
    }
    std::vector<Matrix> q(nh), k(nh), v(nh), a(nh), z(nh);
    Matrix x1 = x0;
    for (std::size_t h = 0; h < nh; ++h) {
      const AttentionHead& head = m.heads[h];
      q[h] = x0 * head.w_q.transpose();
      k[h] = x0 * head.w_k.transpose();
      v[h] = x0 * head.w_v.transpose();
      Matrix s = q[h] * k[h].transpose() * scale;
      for (Eigen::Index p = 0; p < n; ++p) {
        double mx = s(p, 0);
        for (Eigen::Index c = 1; c <= p; ++c) mx = std::max(mx, s(p, c));
        double tot = 0.0;
        for (Eigen::Index c = 0; c < n; ++c) {
          s(p, c) = c <= p ? std::exp(s(p, c) - mx) : 0.0;
          tot += s(p, c);
        }
        s.row(p) /= tot;
      }
      a[h] = std::move(s);
      z[h] = a[h] * v[h];
      x1 += z[h] * head.w_o.transpose();
    }
    const Matrix g1 = x1 * m.mlp.w_in1.transpose();
    const Matrix g2 = x1 * m.mlp.w_in2.transpose();
    const Matrix hid = g1.cwiseProduct(g2);
    const Matrix resid = x1 + hid * m.mlp.w_out.transpose();
    const Matrix logits = resid * m.w_u.transpose();

    Matrix dlogits = Matrix::Zero(n, logits.cols());
    for (Eigen::Index p = 0; p + 1 < n; ++p) {
      const double mx = logits.row(p).maxCoeff();
      const Vector e = (logits.row(p).array() - mx).exp().matrix().transpose();
      const double lse = mx + std::log(e.sum());
      const auto target = tokens[static_cast<std::size_t>(p) + 1];
      ce += lse - logits(p, target);
      if (grads) {
        dlogits.row(p) = (e / e.sum()).transpose();
        dlogits(p, target) -= 1.0;
      }
    }
    Matrix dpen;
    penv += norm_penalty(g1, pen, double(n_pos), grads ? &dpen : nullptr);
    if (!grads) continue;

    dlogits /= double(n_pred);
    g_wu += dlogits.transpose() * resid;
    const Matrix dresid = dlogits * m.w_u;
    g_om += dresid.transpose() * hid;
    const Matrix dhid = dresid * m.mlp.w_out;
    const Matrix dg1 = dhid.cwiseProduct(g2) + dpen;
    const Matrix dg2 = dhid.cwiseProduct(g1);
    g_i1 += dg1.transpose() * x1;
    g_i2 += dg2.transpose() * x1;
    const Matrix dx1 = dresid + dg1 * m.mlp.w_in1 + dg2 * m.mlp.w_in2;
    Matrix dx0 = dx1;
    for (std::size_t h = 0; h < nh; ++h) {
      const AttentionHead& head = m.heads[h];
      g_heads[h][3] += dx1.transpose() * z[h];
      const Matrix dz = dx1 * head.w_o;
      const Matrix da = dz * v[h].transpose();
      const Matrix dv = a[h].transpose() * dz;
      Matrix ds = a[h].cwiseProduct(da);
      const Vector rows = ds.rowwise().sum();
      ds -= a[h].cwiseProduct(rows.replicate(1, n));
      ds *= scale;
      const Matrix dq = ds * k[h];
      const Matrix dk = ds.transpose() * q[h];
      g_heads[h][0] += dq.transpose() * x0;
      g_heads[h][1] += dk.transpose() * x0;
      g_heads[h][2] += dv.transpose() * x0;
      dx0 += dq * head.w_q + dk * head.w_k + dv * head.w_v;
    }
    g_we += dx0.transpose() * onehot;
    if (m.pos) g_pos.topRows(n) += dx0;
  }

  if (grads) {
    grads->clear();
    grads->push_back(std::move(g_we));
    grads->push_back(std::move(g_wu));
    for (auto& gh : g_heads)
      for (auto& g : gh) grads->push_back(std::move(g));
    grads->push_back(std::move(g_i1));
    grads->push_back(std::move(g_i2));
    grads->push_back(std::move(g_om));
    if (m.pos) grads->push_back(std::move(g_pos));
  }
  return ce / double(n_pred) + penv;
}

double TransformerLm::penalty(const Batch& batch, const Penalty& pen) const {
  if (pen.lambda == 0.0) return 0.0;
  std::size_t n_pos = 0;
  for (const Tokens& t : batch.tokens) n_pos += t.size();
  double total = 0.0;
  for (const Tokens& t : batch.tokens)
    total += norm_penalty(trace(model_, t).x1 * model_.mlp.w_in1.transpose(), pen, double(n_pos), nullptr);
  return total;
}

double TransformerLm::mean_modifier_norm(const Batch& batch) const {
  double total = 0.0;
  std::size_t count = 0;
  for (const Tokens& t : batch.tokens) {
    const Matrix g1 = trace(model_, t).x1 * model_.mlp.w_in1.transpose();
    total += g1.rowwise().norm().sum();
    count += static_cast<std::size_t>(g1.rows());
  }
  return count ? total / double(count) : 0.0;
}

std::unique_ptr<Model> make_model(Arch arch, const TaskConfig& task, const ModelConfig& cfg,
                                  std::uint64_t seed) {
  if (arch == Arch::ToyTransformer) {
    if (task.variant != TaskVariant::ToyLm)
      fail(ErrorKind::Config, "toy_transformer trains on the toy_lm task");
    TransformerShape s;
    s.d_model = cfg.d_model;
    s.n_heads = cfg.n_heads;
    s.d_head = cfg.d_head;
    s.d_mlp = cfg.d_mlp;
    s.n_vocab = task.n_vocab;
    s.n_ctx_max = cfg.positional ? task.n_ctx : 0;
    s.qk_scale = cfg.qk_scale;
    if (s.d_model < 1 || s.d_mlp < 1 || (s.n_heads > 0 && s.d_head < 1))
      fail(ErrorKind::Config, "transformer dimensions must be positive");
    ToyTransformer t = random_transformer(s, seed, cfg.init_scale);
    // Small unembedding: the untrained model starts close to uniform predictions.
    t.w_u *= 0.1;
    return std::make_unique<TransformerLm>(std::move(t));
  }
  if (task.variant != TaskVariant::Superposition)
    fail(ErrorKind::Config, to_string(arch) + " trains on the superposition task");
  const std::size_t hidden = cfg.d_hidden == 0 ? task.d_input : cfg.d_hidden;
  auto model = std::make_unique<SuperpositionModel>(arch, task.d_input, hidden,
                                                    cfg.one_plus_modifier, seed, cfg.init_scale);
  model->set_importance(importance_weights(task));
  return model;
}

// ---------------------------------------------------------------------------
// Data

Matrix make_dictionary(const TaskConfig& cfg, std::uint64_t seed) {
  if (cfg.dictionary == DictionaryKind::Identity) return Matrix::Identity(cfg.n_features, cfg.d_input);
  Rng rng(seed);
  Matrix d = gaussian(rng, cfg.n_features, cfg.d_input, 1.0);
  for (Eigen::Index i = 0; i < d.rows(); ++i) d.row(i).normalize();
  return d;
}

SuperpositionBatch gen_superposition_batch(const TaskConfig& cfg, const Matrix& dictionary,
                                           std::size_t batch, Rng& rng) {
  SuperpositionBatch b;
  b.dictionary = dictionary;
  b.coefficients = Matrix::Zero(batch, cfg.n_features);
  for (std::size_t r = 0; r < batch; ++r)
    for (std::size_t f = 0; f < cfg.n_features; ++f) {
      const bool on = rng.bernoulli(cfg.sparsity);
      const double value = rng.uniform();
      if (on) b.coefficients(r, f) = value;
    }
  b.x = b.coefficients * dictionary;
  return b;
}

SuperpositionBatch gen_superposition_batch(const TaskConfig& cfg, std::size_t batch,
                                           std::uint64_t seed) {
  cfg.validate();
  Rng rng(derive_seed(seed, "data"));
  return gen_superposition_batch(cfg, make_dictionary(cfg, derive_seed(seed, "dictionary")), batch, rng);
}

std::vector<Tokens> gen_induction_batch(const TaskConfig& cfg, std::size_t batch, Rng& rng) {
  const std::size_t len = cfg.repeat_len == 0 ? cfg.n_ctx / 2 : cfg.repeat_len;
  std::vector<Tokens> out(batch, Tokens(cfg.n_ctx));
  for (Tokens& t : out) {
    for (std::size_t p = 0; p < cfg.n_ctx; ++p) {
      if (p >= len && p < 2 * len)
        t[p] = t[p - len];
      else
        t[p] = static_cast<std::int64_t>(rng.below(cfg.n_vocab));
    }
  }
  return out;
}

std::vector<Tokens> gen_induction_batch(const TaskConfig& cfg, std::size_t batch, std::uint64_t seed) {
  Rng rng(seed);
  return gen_induction_batch(cfg, batch, rng);
}

std::vector<Tokens> gen_bigram_batch(const TaskConfig& cfg, std::size_t batch, Rng& rng) {
  const auto v = static_cast<std::int64_t>(cfg.n_vocab);
  std::vector<Tokens> out(batch, Tokens(cfg.n_ctx));
  for (Tokens& t : out) {
    t[0] = static_cast<std::int64_t>(rng.below(cfg.n_vocab));
    for (std::size_t p = 1; p < cfg.n_ctx; ++p) {
      const bool follow = rng.bernoulli(0.8);
      const auto uniform = static_cast<std::int64_t>(rng.below(cfg.n_vocab));
      t[p] = follow ? (7 * t[p - 1] + 3) % v : uniform;
    }
  }
  return out;
}

namespace {

std::vector<Tokens> gen_sequences(const TaskConfig& cfg, std::size_t batch, Rng& rng) {
  return cfg.pattern == SequencePattern::Bigram ? gen_bigram_batch(cfg, batch, rng)
                                                : gen_induction_batch(cfg, batch, rng);
}

// Produces training batches: fresh ones, or a fixed dataset cycled in order.
class BatchSource {
 public:
  BatchSource(const TaskConfig& task, std::size_t batch, std::uint64_t seed)
      : task_(task), batch_(batch), rng_(derive_seed(seed, "data")) {
    if (task.variant == TaskVariant::Superposition)
      dictionary_ = make_dictionary(task, derive_seed(seed, "dictionary"));
    if (task.dataset_size > 0) {
      if (task.variant == TaskVariant::Superposition)
        data_x_ = gen_superposition_batch(task, dictionary_, task.dataset_size, rng_).x;
      else
        data_tokens_ = gen_sequences(task, task.dataset_size, rng_);
    }
  }

  Batch next() {
    Batch b;
    const std::size_t n = task_.dataset_size;
    if (task_.variant == TaskVariant::Superposition) {
      if (n == 0) return {gen_superposition_batch(task_, dictionary_, batch_, rng_).x, {}};
      b.x.resize(static_cast<Eigen::Index>(batch_), data_x_.cols());
      for (std::size_t r = 0; r < batch_; ++r) b.x.row(r) = data_x_.row((cursor_ + r) % n);
    } else {
      if (n == 0) return {Matrix(), gen_sequences(task_, batch_, rng_)};
      for (std::size_t r = 0; r < batch_; ++r) b.tokens.push_back(data_tokens_[(cursor_ + r) % n]);
    }
    cursor_ = (cursor_ + batch_) % n;
    return b;
  }

 private:
  TaskConfig task_;
  std::size_t batch_;
  Rng rng_;
  Matrix dictionary_;
  Matrix data_x_;
  std::vector<Tokens> data_tokens_;
  std::size_t cursor_ = 0;
};

}  // namespace

// ---------------------------------------------------------------------------
// Training

TrainResult train(Arch arch, const TaskConfig& task, const OptConfig& opt,
                  const ModelConfig& model_cfg) {
  task.validate();
  opt.validate();
  TrainResult result;
  result.model = make_model(arch, task, model_cfg, derive_seed(opt.seed, "init"));
  BatchSource source(task, opt.batch_size, opt.seed);
  const Penalty pen{opt.modifier_norm_penalty, opt.penalty_kind};

  auto params = result.model->params();
  std::vector<Matrix> m1, m2;
  for (const NamedParam& p : params) {
    m1.push_back(Matrix::Zero(p.value->rows(), p.value->cols()));
    m2.push_back(Matrix::Zero(p.value->rows(), p.value->cols()));
  }
  std::vector<Matrix> grads;
  double b1t = 1.0, b2t = 1.0;
  for (long step = 0; step < opt.steps; ++step) {
    const Batch batch = source.next();
    const double loss = result.model->loss(batch, pen, &grads);
    if (!std::isfinite(loss)) {
      std::ostringstream os;
      os << "loss became non-finite at step " << step;
      throw TrainingError(os.str(), step);
    }
    const double penv = pen.lambda > 0.0 ? result.model->penalty(batch, pen) : 0.0;
    result.metrics.push_back({step, loss, penv});

    b1t *= opt.beta1;
    b2t *= opt.beta2;
    for (std::size_t i = 0; i < params.size(); ++i) {
      m1[i] = opt.beta1 * m1[i] + (1.0 - opt.beta1) * grads[i];
      m2[i] = opt.beta2 * m2[i] + (1.0 - opt.beta2) * grads[i].cwiseProduct(grads[i]);
      const Matrix mhat = m1[i] / (1.0 - b1t);
      const Matrix vhat = m2[i] / (1.0 - b2t);
      *params[i].value -= opt.lr * mhat.cwiseQuotient((vhat.cwiseSqrt().array() + opt.eps).matrix());
    }
  }
  return result;
}

GradCheckResult grad_check(const Model& model, const Batch& batch, const Penalty& penalty,
                           double eps, std::size_t coords, std::uint64_t seed) {
  std::vector<Matrix> grads;
  model.loss(batch, penalty, &grads);
  auto probe = model.clone();
  auto params = probe->params();

  std::vector<std::pair<std::size_t, Eigen::Index>> all;
  for (std::size_t p = 0; p < params.size(); ++p)
    for (Eigen::Index i = 0; i < params[p].value->size(); ++i) all.emplace_back(p, i);
  if (all.size() > coords) {
    Rng rng(seed);
    for (std::size_t i = 0; i < coords; ++i)
      std::swap(all[i], all[i + rng.below(all.size() - i)]);
    all.resize(coords);
  }

  const Vector kinks = model.kink_preactivations(batch);
  GradCheckResult r;
  for (const auto& [p, i] : all) {
    double& v = params[p].value->data()[i];
    const double orig = v;
    v = orig + eps;
    const double lp = probe->loss(batch, penalty, nullptr);
    const Vector kp = probe->kink_preactivations(batch);
    v = orig - eps;
    const double lm = probe->loss(batch, penalty, nullptr);
    const Vector km = probe->kink_preactivations(batch);
    v = orig;
    bool near_kink = false;
    for (Eigen::Index k = 0; k < kinks.size() && !near_kink; ++k)
      near_kink = std::abs(kinks(k)) <= kKinkBand && (kp(k) != kinks(k) || km(k) != kinks(k));
    if (near_kink) {
      ++r.excluded;
      continue;
    }
    const double numeric = (lp - lm) / (2.0 * eps);
    const double analytic = grads[p].data()[i];
    const double denom = std::max({std::abs(analytic), std::abs(numeric), kGradCheckFloor});
    const double err = std::abs(analytic - numeric) / denom;
    r.max_rel_error = std::isnan(err) ? err : std::max(r.max_rel_error, err);
    ++r.checked;
  }
  return r;
}

// ---------------------------------------------------------------------------
// Evaluation

double recovery_score(const Matrix& dictionary, const Matrix& decoder) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < dictionary.rows(); ++i) {
    const Vector d = dictionary.row(i).transpose().normalized();
    double best = 0.0;
    for (Eigen::Index c = 0; c < decoder.cols(); ++c) {
      const double n = decoder.col(c).norm();
      if (n > 0.0) best = std::max(best, std::abs(d.dot(decoder.col(c)) / n));
    }
    total += best;
  }
  return dictionary.rows() ? total / double(dictionary.rows()) : 0.0;
}

double unigram_baseline(const std::vector<Tokens>& sequences, std::size_t n_vocab) {
  std::vector<double> counts(n_vocab, 0.0);
  double total = 0.0;
  for (const Tokens& t : sequences)
    for (std::size_t p = 1; p < t.size(); ++p) {
      counts[static_cast<std::size_t>(t[p])] += 1.0;
      total += 1.0;
    }
  double h = 0.0;
  for (double c : counts)
    if (c > 0.0) h -= (c / total) * std::log(c / total);
  return h;
}

Batch make_eval_batch(const TaskConfig& task, std::uint64_t seed, std::size_t n) {
  Rng rng(derive_seed(seed, "eval"));
  if (task.variant == TaskVariant::Superposition)
    return {gen_superposition_batch(task, make_dictionary(task, derive_seed(seed, "dictionary")), n, rng).x, {}};
  return {Matrix(), gen_sequences(task, n, rng)};
}

EvalMetrics evaluate(const Model& model, const TaskConfig& task, std::uint64_t seed,
                     std::size_t n_eval) {
  task.validate();
  const std::size_t n = task.variant == TaskVariant::ToyLm ? std::max<std::size_t>(1, n_eval / 4) : n_eval;
  const Batch batch = make_eval_batch(task, seed, n);
  EvalMetrics m;
  m.loss = model.loss(batch, {}, nullptr);
  m.mean_modifier_norm = model.mean_modifier_norm(batch);
  if (task.variant == TaskVariant::ToyLm) {
    m.unigram_baseline = unigram_baseline(batch.tokens, task.n_vocab);
  } else if (const auto* sm = dynamic_cast<const SuperpositionModel*>(&model)) {
    m.recovery_score = recovery_score(make_dictionary(task, derive_seed(seed, "dictionary")), sm->decoder());
  }
  return m;
}

// ---------------------------------------------------------------------------
// Checkpoints

Checkpoint to_checkpoint(const Model& model, std::uint64_t seed) {
  Checkpoint c;
  c.arch = to_string(model.arch());
  c.seed = seed;
  for (const auto& [name, value] : model.params()) {
    const bool vec = name.ends_with(".b");
    c.tensors.emplace(name, vec ? Tensor::from_vector(value->col(0)) : Tensor::from_matrix(*value));
  }
  nlohmann::json meta;
  if (const auto* sm = dynamic_cast<const SuperpositionModel*>(&model)) {
    meta["one_plus_modifier"] = sm->one_plus_modifier();
    meta["importance"] = sm->importance();
  } else if (const auto* lm = dynamic_cast<const TransformerLm*>(&model)) {
    meta["qk_scale"] = lm->transformer().qk_scale;
    meta["n_heads"] = lm->transformer().heads.size();
  }
  c.config["meta"] = meta;
  return c;
}

std::unique_ptr<Model> model_from_checkpoint(const Checkpoint& ckpt) {
  const Arch arch = parse_arch(ckpt.arch);
  const nlohmann::json meta = ckpt.config.value("meta", nlohmann::json::object());
  std::map<std::string, Matrix> p;
  for (const auto& [name, t] : ckpt.tensors) {
    if (t.order() == 1)
      p.emplace(name, Matrix(t.to_vector()));
    else if (t.order() == 2)
      p.emplace(name, t.to_matrix());
    else
      fail(ErrorKind::Format, "checkpoint tensor " + name + " must be order 1 or 2");
  }
  auto take = [&](const std::string& name) {
    auto it = p.find(name);
    if (it == p.end()) fail(ErrorKind::Integrity, "checkpoint lacks tensor " + name);
    return it->second;
  };
  if (arch == Arch::ToyTransformer) {
    ToyTransformer m;
    m.w_e = take("W_E");
    m.w_u = take("W_U");
    const std::size_t nh = meta.value("n_heads", std::size_t{0});
    for (std::size_t h = 0; h < nh; ++h) {
      const std::string pre = "heads." + std::to_string(h) + ".";
      m.heads.push_back({take(pre + "W_Q"), take(pre + "W_K"), take(pre + "W_V"), take(pre + "W_O")});
    }
    m.mlp = {take("mlp.W_I1"), take("mlp.W_I2"), take("mlp.W_O")};
    m.qk_scale = meta.value("qk_scale", true);
    if (p.count("pos")) m.pos = p.at("pos");
    m.validate();
    return std::make_unique<TransformerLm>(std::move(m));
  }
  return std::make_unique<SuperpositionModel>(
      arch, meta.value("one_plus_modifier", false), std::move(p),
      meta.value("importance", std::vector<double>{}));
}

}  // namespace blc
