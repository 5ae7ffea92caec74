#pragma once

// One-layer transformer (attention heads + bilinear MLP, no layer norm) and
// its exact path expansion into labeled logit contributions.
//
// Conventions: the residual stream is stored as an n_ctx x d_model matrix,
// one row per position. Attention patterns act across positions (rows);
// weight products act across features (columns).

#include "blc/tensor.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace blc {

using Tokens = std::vector<std::int64_t>;

struct AttentionHead {
  Matrix w_q;  // d_head x d_model
  Matrix w_k;  // d_head x d_model
  Matrix w_v;  // d_head x d_model
  Matrix w_o;  // d_model x d_head

  Matrix w_ov() const { return w_o * w_v; }
  Matrix w_qk() const { return w_q.transpose() * w_k; }
};

struct BilinearMlp {
  Matrix w_in1;  // d_mlp x d_model
  Matrix w_in2;  // d_mlp x d_model
  Matrix w_out;  // d_model x d_mlp
};

struct ToyTransformer {
  Matrix w_e;  // d_model x n_vocab
  Matrix w_u;  // n_vocab x d_model
  std::vector<AttentionHead> heads;
  BilinearMlp mlp;
  /// Divide attention logits by sqrt(d_head).
  bool qk_scale = true;
  /// Optional n_ctx_max x d_model positional embedding.
  std::optional<Matrix> pos;

  std::size_t d_model() const noexcept { return static_cast<std::size_t>(w_e.rows()); }
  std::size_t n_vocab() const noexcept { return static_cast<std::size_t>(w_e.cols()); }
  std::size_t d_mlp() const noexcept { return static_cast<std::size_t>(mlp.w_in1.rows()); }
  std::size_t d_head() const noexcept {
    return heads.empty() ? 0 : static_cast<std::size_t>(heads.front().w_q.rows());
  }

  void validate() const;
};

/// Seeded N(0, scale^2 / fan_in) initialization.
struct TransformerShape {
  std::size_t d_model = 8;
  std::size_t n_heads = 2;
  std::size_t d_head = 4;
  std::size_t d_mlp = 16;
  std::size_t n_vocab = 11;
  std::size_t n_ctx_max = 0;  // > 0 enables positional embeddings
  bool qk_scale = true;
};
ToyTransformer random_transformer(const TransformerShape& shape, std::uint64_t seed,
                                  double scale = 1.0);

/// One-hot rows: n_ctx x n_vocab. Argument error on out-of-range ids.
Matrix one_hot(const ToyTransformer& model, const Tokens& tokens);

/// Causal softmax pattern of head h; row p is a distribution over 0..p.
Matrix attention_pattern(const ToyTransformer& model, const Tokens& tokens, std::size_t head);

/// (W_I1 x) * (W_I2 x) through W_Om, applied to every row of `x`.
Matrix mlp_apply(const ToyTransformer& model, const Matrix& x);

struct ForwardTrace {
  Matrix x0;                     // embeddings (+ positional)
  std::vector<Matrix> patterns;  // per head, n_ctx x n_ctx
  Matrix x1;                     // after attention
  Matrix mlp_out;                // F(x1)
  Matrix logits;                 // n_ctx x n_vocab
};

ForwardTrace trace(const ToyTransformer& model, const Tokens& tokens);
Matrix forward(const ToyTransformer& model, const Tokens& tokens);

struct PathComponent {
  enum class Kind { Direct, Positional, Head };
  std::string label;  // "direct", "pos", "head:h"
  Kind kind;
  std::size_t head = 0;
  Matrix values;  // n_ctx x d_model
};

/// x1 split into the direct embedding, the positional embedding (if any) and
/// one component per head.
std::vector<PathComponent> residual_components(const ToyTransformer& model, const Tokens& tokens);

enum class TermClass {
  EmbedUnembed,     // direct pathway
  PosUnembed,       // positional embedding straight to the unembedding
  Head,             // through one head's OV circuit
  MlpDirectDirect,  // first MLP summand
  MlpHeadDirect,    // head output only into the first MLP input matrix
  MlpDirectHead,    // head output only into the second MLP input matrix
  MlpHeadHead,      // head outputs into both MLP input matrices
};

struct TermContribution {
  std::string label;
  TermClass term_class;
  Matrix values;  // n_ctx x d_model (MLP groups) or n_ctx x n_vocab (logit terms)
};

/// Bilinear MLP distributed over every ordered pair of components. Labels
/// are "mlp:<left>×<right>" with sides "direct", "pos" or "head h".
/// Consistency error if the components do not sum to x1 within 1e-6.
std::vector<TermContribution> mlp_term_groups(const ToyTransformer& model, const Tokens& tokens,
                                              const std::vector<PathComponent>& components);

/// Every logit contribution; their sum equals forward(model, tokens).
std::vector<TermContribution> full_expansion(const ToyTransformer& model, const Tokens& tokens);

/// Expansion of an arbitrary token-weight matrix (n_ctx x n_vocab) with the
/// attention patterns held fixed. With one-hot rows and the patterns from the
/// forward pass this is full_expansion.
std::vector<TermContribution> expand_with_patterns(const ToyTransformer& model,
                                                   const Matrix& token_weights,
                                                   const std::vector<Matrix>& patterns);

Matrix sum_terms(const std::vector<TermContribution>& terms);

struct TermNorm {
  std::string label;
  double frobenius;
  double max_abs;
  double share;  // frobenius / frobenius of the summed logits
};

struct TermNormReport {
  std::vector<TermNorm> entries;
  double total_frobenius = 0.0;
  double share_sum = 0.0;
};

TermNormReport term_norm_report(const std::vector<TermContribution>& terms);

inline constexpr std::size_t kMaterializeVocabLimit = 64;

struct MaterializedCheck {
  /// max-abs gap between the logits assembled from the explicit vocab-space
  /// tensors and the forward pass.
  double vs_forward;
  /// max-abs gap between materialized and distributed MLP terms.
  double vs_distributed;
};

/// Builds the vocab-space order-3 tensors of every MLP summand through Z
/// contractions and evaluates the expansion with them. Capacity error if
/// n_vocab > 64; Argument error with positional embeddings.
MaterializedCheck materialized_check(const ToyTransformer& model, const Tokens& tokens);

}  // namespace blc
