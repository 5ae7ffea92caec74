#include "blc/circuit.hpp"
#include "blc/bilinear.hpp"

#include "blc/error.hpp"
#include "blc/rng.hpp"

#include <cmath>
#include <limits>
#include <sstream>

namespace blc {

namespace {

void check_shape(const Matrix& m, Eigen::Index rows, Eigen::Index cols, const std::string& name) {
  if (m.rows() != rows || m.cols() != cols) {
    std::ostringstream os;
    os << name << " is " << m.rows() << "x" << m.cols() << ", expected " << rows << "x" << cols;
    fail(ErrorKind::Dimension, os.str());
  }
}

Matrix gaussian(Rng& rng, std::size_t rows, std::size_t cols, double stddev) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = stddev * rng.normal();
  return m;
}

Matrix causal_softmax(Matrix scores) {
  const Eigen::Index n = scores.rows();
  for (Eigen::Index p = 0; p < n; ++p) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index q = 0; q <= p; ++q) mx = std::max(mx, scores(p, q));
    double z = 0.0;
    for (Eigen::Index q = 0; q < n; ++q) {
      scores(p, q) = q <= p ? std::exp(scores(p, q) - mx) : 0.0;
      z += scores(p, q);
    }
    scores.row(p) /= z;
  }
  return scores;
}

Matrix pattern_from_residual(const ToyTransformer& model, const Matrix& x0, std::size_t head) {
  const AttentionHead& h = model.heads[head];
  Matrix scores = (x0 * h.w_q.transpose()) * (x0 * h.w_k.transpose()).transpose();
  if (model.qk_scale) scores /= std::sqrt(static_cast<double>(model.d_head()));
  return causal_softmax(std::move(scores));
}

Matrix positional_rows(const ToyTransformer& model, std::size_t n_ctx) {
  if (static_cast<std::size_t>(model.pos->rows()) < n_ctx)
    fail(ErrorKind::Argument, "sequence is longer than the positional embedding");
  return model.pos->topRows(static_cast<Eigen::Index>(n_ctx));
}

Matrix embed(const ToyTransformer& model, const Matrix& token_weights) {
  Matrix x0 = token_weights * model.w_e.transpose();
  if (model.pos) x0 += positional_rows(model, static_cast<std::size_t>(token_weights.rows()));
  return x0;
}

std::string side_name(const PathComponent& c) {
  switch (c.kind) {
    case PathComponent::Kind::Direct: return "direct";
    case PathComponent::Kind::Positional: return "pos";
    case PathComponent::Kind::Head: return "head " + std::to_string(c.head);
  }
  return "?";
}

TermClass mlp_class(const PathComponent& l, const PathComponent& r) {
  const bool lh = l.kind == PathComponent::Kind::Head;
  const bool rh = r.kind == PathComponent::Kind::Head;
  if (lh && rh) return TermClass::MlpHeadHead;
  if (lh) return TermClass::MlpHeadDirect;
  if (rh) return TermClass::MlpDirectHead;
  return TermClass::MlpDirectDirect;
}

std::vector<PathComponent> components_from(const ToyTransformer& model, const Matrix& token_weights,
                                           const std::vector<Matrix>& patterns) {
  std::vector<PathComponent> comps;
  comps.push_back({"direct", PathComponent::Kind::Direct, 0, token_weights * model.w_e.transpose()});
  Matrix x0 = comps.front().values;
  if (model.pos) {
    Matrix p = positional_rows(model, static_cast<std::size_t>(token_weights.rows()));
    x0 += p;
    comps.push_back({"pos", PathComponent::Kind::Positional, 0, std::move(p)});
  }
  for (std::size_t h = 0; h < model.heads.size(); ++h) {
    const AttentionHead& head = model.heads[h];
    Matrix v = patterns[h] * (x0 * head.w_v.transpose()) * head.w_o.transpose();
    comps.push_back({"head:" + std::to_string(h), PathComponent::Kind::Head, h, std::move(v)});
  }
  return comps;
}

std::vector<TermContribution> distribute_mlp(const ToyTransformer& model,
                                             const std::vector<PathComponent>& comps) {
  std::vector<Matrix> left, right;
  for (const PathComponent& c : comps) {
    left.push_back(c.values * model.mlp.w_in1.transpose());
    right.push_back(c.values * model.mlp.w_in2.transpose());
  }
  std::vector<TermContribution> out;
  for (std::size_t a = 0; a < comps.size(); ++a)
    for (std::size_t b = 0; b < comps.size(); ++b) {
      Matrix hidden = left[a].cwiseProduct(right[b]);
      out.push_back({"mlp:" + side_name(comps[a]) + "×" + side_name(comps[b]),
                     mlp_class(comps[a], comps[b]), hidden * model.mlp.w_out.transpose()});
    }
  return out;
}

}  // namespace

void ToyTransformer::validate() const {
  const auto dm = w_e.rows(), nv = w_e.cols();
  if (dm < 1 || nv < 1) fail(ErrorKind::Dimension, "embedding must be at least 1x1");
  check_shape(w_u, nv, dm, "W_U");
  const auto dmlp = mlp.w_in1.rows();
  if (dmlp < 1) fail(ErrorKind::Dimension, "d_mlp must be >= 1");
  check_shape(mlp.w_in1, dmlp, dm, "W_I1");
  check_shape(mlp.w_in2, dmlp, dm, "W_I2");
  check_shape(mlp.w_out, dm, dmlp, "W_Om");
  if (!heads.empty()) {
    const auto dh = heads.front().w_q.rows();
    if (dh < 1) fail(ErrorKind::Dimension, "d_head must be >= 1");
    for (std::size_t h = 0; h < heads.size(); ++h) {
      const std::string p = "head " + std::to_string(h) + " ";
      check_shape(heads[h].w_q, dh, dm, p + "W_Q");
      check_shape(heads[h].w_k, dh, dm, p + "W_K");
      check_shape(heads[h].w_v, dh, dm, p + "W_V");
      check_shape(heads[h].w_o, dm, dh, p + "W_O");
    }
  }
  if (pos && (pos->cols() != dm || pos->rows() < 1))
    fail(ErrorKind::Dimension, "positional embedding must be n_ctx_max x d_model");
}

ToyTransformer random_transformer(const TransformerShape& s, std::uint64_t seed, double scale) {
  Rng rng(seed);
  auto fan = [&](std::size_t fan_in) { return scale / std::sqrt(static_cast<double>(fan_in)); };
  ToyTransformer m;
  m.qk_scale = s.qk_scale;
  m.w_e = gaussian(rng, s.d_model, s.n_vocab, scale);
  m.w_u = gaussian(rng, s.n_vocab, s.d_model, fan(s.d_model));
  for (std::size_t h = 0; h < s.n_heads; ++h) {
    AttentionHead head;
    head.w_q = gaussian(rng, s.d_head, s.d_model, fan(s.d_model));
    head.w_k = gaussian(rng, s.d_head, s.d_model, fan(s.d_model));
    head.w_v = gaussian(rng, s.d_head, s.d_model, fan(s.d_model));
    head.w_o = gaussian(rng, s.d_model, s.d_head, fan(s.d_head));
    m.heads.push_back(std::move(head));
  }
  m.mlp.w_in1 = gaussian(rng, s.d_mlp, s.d_model, fan(s.d_model));
  m.mlp.w_in2 = gaussian(rng, s.d_mlp, s.d_model, fan(s.d_model));
  m.mlp.w_out = gaussian(rng, s.d_model, s.d_mlp, fan(s.d_mlp));
  if (s.n_ctx_max > 0) m.pos = gaussian(rng, s.n_ctx_max, s.d_model, 0.1 * scale);
  m.validate();
  return m;
}

Matrix one_hot(const ToyTransformer& model, const Tokens& tokens) {
  if (tokens.empty()) fail(ErrorKind::Argument, "token sequence is empty");
  Matrix t = Matrix::Zero(static_cast<Eigen::Index>(tokens.size()), model.w_e.cols());
  for (std::size_t p = 0; p < tokens.size(); ++p) {
    if (tokens[p] < 0 || static_cast<std::size_t>(tokens[p]) >= model.n_vocab()) {
      std::ostringstream os;
      os << "token id " << tokens[p] << " at position " << p << " is outside [0, "
         << model.n_vocab() << ")";
      fail(ErrorKind::Argument, os.str());
    }
    t(static_cast<Eigen::Index>(p), tokens[p]) = 1.0;
  }
  return t;
}

Matrix attention_pattern(const ToyTransformer& model, const Tokens& tokens, std::size_t head) {
  if (head >= model.heads.size()) fail(ErrorKind::Argument, "head index out of range");
  return pattern_from_residual(model, embed(model, one_hot(model, tokens)), head);
}

Matrix mlp_apply(const ToyTransformer& model, const Matrix& x) {
  Matrix hidden = (x * model.mlp.w_in1.transpose()).cwiseProduct(x * model.mlp.w_in2.transpose());
  return hidden * model.mlp.w_out.transpose();
}

ForwardTrace trace(const ToyTransformer& model, const Tokens& tokens) {
  ForwardTrace t;
  t.x0 = embed(model, one_hot(model, tokens));
  t.x1 = t.x0;
  for (std::size_t h = 0; h < model.heads.size(); ++h) {
    t.patterns.push_back(pattern_from_residual(model, t.x0, h));
    const AttentionHead& head = model.heads[h];
    t.x1 += t.patterns.back() * (t.x0 * head.w_v.transpose()) * head.w_o.transpose();
  }
  t.mlp_out = mlp_apply(model, t.x1);
  t.logits = (t.x1 + t.mlp_out) * model.w_u.transpose();
  return t;
}

Matrix forward(const ToyTransformer& model, const Tokens& tokens) {
  return trace(model, tokens).logits;
}

std::vector<PathComponent> residual_components(const ToyTransformer& model, const Tokens& tokens) {
  const Matrix tw = one_hot(model, tokens);
  std::vector<Matrix> patterns;
  const Matrix x0 = embed(model, tw);
  for (std::size_t h = 0; h < model.heads.size(); ++h)
    patterns.push_back(pattern_from_residual(model, x0, h));
  return components_from(model, tw, patterns);
}

std::vector<TermContribution> mlp_term_groups(const ToyTransformer& model, const Tokens& tokens,
                                              const std::vector<PathComponent>& components) {
  const Matrix x1 = trace(model, tokens).x1;
  Matrix sum = Matrix::Zero(x1.rows(), x1.cols());
  for (const PathComponent& c : components) {
    if (c.values.rows() != x1.rows() || c.values.cols() != x1.cols())
      fail(ErrorKind::Consistency, "component " + c.label + " has the wrong shape");
    sum += c.values;
  }
  const double gap = max_abs_diff(sum, x1);
  if (!(gap <= 1e-6)) {
    std::ostringstream os;
    os << "components do not sum to the MLP input (max-abs gap " << gap << ")";
    fail(ErrorKind::Consistency, os.str());
  }
  return distribute_mlp(model, components);
}

std::vector<TermContribution> expand_with_patterns(const ToyTransformer& model,
                                                   const Matrix& token_weights,
                                                   const std::vector<Matrix>& patterns) {
  if (token_weights.cols() != model.w_e.cols())
    fail(ErrorKind::Dimension, "token weights must have n_vocab columns");
  if (patterns.size() != model.heads.size())
    fail(ErrorKind::Argument, "one attention pattern per head is required");
  const auto comps = components_from(model, token_weights, patterns);
  const Matrix wut = model.w_u.transpose();
  std::vector<TermContribution> terms;
  for (const PathComponent& c : comps) {
    switch (c.kind) {
      case PathComponent::Kind::Direct:
        terms.push_back({"embed-unembed", TermClass::EmbedUnembed, c.values * wut});
        break;
      case PathComponent::Kind::Positional:
        terms.push_back({"pos-unembed", TermClass::PosUnembed, c.values * wut});
        break;
      case PathComponent::Kind::Head:
        terms.push_back({c.label, TermClass::Head, c.values * wut});
        break;
    }
  }
  for (TermContribution& g : distribute_mlp(model, comps)) {
    g.values = g.values * wut;
    terms.push_back(std::move(g));
  }
  return terms;
}

std::vector<TermContribution> full_expansion(const ToyTransformer& model, const Tokens& tokens) {
  const Matrix tw = one_hot(model, tokens);
  const Matrix x0 = embed(model, tw);
  std::vector<Matrix> patterns;
  for (std::size_t h = 0; h < model.heads.size(); ++h)
    patterns.push_back(pattern_from_residual(model, x0, h));
  return expand_with_patterns(model, tw, patterns);
}

Matrix sum_terms(const std::vector<TermContribution>& terms) {
  if (terms.empty()) return Matrix();
  Matrix s = Matrix::Zero(terms.front().values.rows(), terms.front().values.cols());
  for (const TermContribution& t : terms) s += t.values;
  return s;
}

TermNormReport term_norm_report(const std::vector<TermContribution>& terms) {
  TermNormReport r;
  if (terms.empty()) return r;
  r.total_frobenius = sum_terms(terms).norm();
  for (const TermContribution& t : terms) {
    const double f = t.values.norm();
    const double share = r.total_frobenius > 0.0 ? f / r.total_frobenius : 0.0;
    r.entries.push_back({t.label, f, t.values.cwiseAbs().maxCoeff(), share});
    r.share_sum += share;
  }
  return r;
}

MaterializedCheck materialized_check(const ToyTransformer& model, const Tokens& tokens) {
  if (model.n_vocab() > kMaterializeVocabLimit) {
    std::ostringstream os;
    os << "--materialize supports n_vocab <= " << kMaterializeVocabLimit << ", model has "
       << model.n_vocab();
    fail(ErrorKind::Capacity, os.str());
  }
  if (model.pos)
    fail(ErrorKind::Argument, "materialized expansion does not cover positional embeddings");

  const ForwardTrace tr = trace(model, tokens);
  const Matrix tw = one_hot(model, tokens);
  const std::size_t n_ctx = tokens.size();

  // Vocab-space sources: the direct path and each head's OV circuit. Each has
  // a feature map (d_model x n_vocab) and a position mixing (n_ctx x n_ctx).
  struct Source {
    Matrix features;
    Matrix mixing;
  };
  std::vector<Source> sources;
  sources.push_back({model.w_e, Matrix::Identity(n_ctx, n_ctx)});
  for (std::size_t h = 0; h < model.heads.size(); ++h)
    sources.push_back({model.heads[h].w_ov() * model.w_e, tr.patterns[h]});

  Matrix logits = Matrix::Zero(n_ctx, model.n_vocab());
  for (const Source& s : sources) logits += s.mixing * tw * (model.w_u * s.features).transpose();

  const Tensor z = build_z(model.d_mlp());
  const Matrix readout = model.w_u * model.mlp.w_out;  // n_vocab x d_mlp
  const auto distributed = [&] {
    auto comps = components_from(model, tw, tr.patterns);
    return distribute_mlp(model, comps);
  }();

  double vs_distributed = 0.0;
  std::size_t group = 0;
  for (const Source& l : sources) {
    for (const Source& r : sources) {
      // Q[v][b][w] = (W_I1 F_l)[b][v] * (W_I2 F_r)[b][w], built through Z.
      const Tensor lt = Tensor::from_matrix(model.mlp.w_in1 * l.features);
      const Tensor rt = Tensor::from_matrix(model.mlp.w_in2 * r.features);
      const Tensor q = tensor_inner(tensor_inner(lt, z, 0, 0), rt, 2, 0);
      const Matrix lw = l.mixing * tw;
      const Matrix rw = r.mixing * tw;
      Matrix term(n_ctx, model.n_vocab());
      for (std::size_t p = 0; p < n_ctx; ++p) {
        const Tensor lv = Tensor::from_vector(lw.row(p).transpose());
        const Tensor rv = Tensor::from_vector(rw.row(p).transpose());
        const Vector hidden = tensor_inner(tensor_inner(lv, q, 0, 0), rv, 1, 0).to_vector();
        term.row(p) = (readout * hidden).transpose();
      }
      logits += term;
      const Matrix dist = distributed[group++].values * model.w_u.transpose();
      vs_distributed = std::max(vs_distributed, max_abs_diff(term, dist));
    }
  }
  return {max_abs_diff(logits, tr.logits), vs_distributed};
}

}  // namespace blc
