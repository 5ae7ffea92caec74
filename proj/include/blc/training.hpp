#pragma once

// Desk-scale training: synthetic superposition and toy language-model tasks,
// small models with hand-written backward passes, Adam, finite-difference
// gradient checks and evaluation metrics.

#include "blc/bilinear.hpp"
#include "blc/circuit.hpp"
#include "blc/rng.hpp"
#include "blc/tensor.hpp"

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace blc {

struct Checkpoint;

enum class TaskVariant { Superposition, ToyLm };
enum class SequencePattern { InductionRepeat, Bigram };
enum class DictionaryKind { Random, Identity };

struct TaskConfig {
  TaskVariant variant = TaskVariant::Superposition;

  // superposition: x = sum_i a_i d_i, a_i ~ Bernoulli(p) * Uniform[0, 1]
  std::size_t n_features = 8;
  std::size_t d_input = 4;
  double sparsity = 1.0;          // p, probability a feature is active
  double importance_decay = 1.0;  // gamma; dimension i weighted gamma^i
  DictionaryKind dictionary = DictionaryKind::Random;

  // toy_lm
  std::size_t n_vocab = 16;
  std::size_t n_ctx = 16;
  SequencePattern pattern = SequencePattern::InductionRepeat;
  std::size_t repeat_len = 0;     // 0: n_ctx / 2

  /// > 0: train on a fixed dataset of this many examples, cycled in order;
  /// 0: fresh examples every step.
  std::size_t dataset_size = 0;

  void validate() const;
};

enum class PenaltyKind { L2, L1 };

struct OptConfig {
  long steps = 1000;
  std::size_t batch_size = 64;
  double lr = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 0;
  /// lambda * mean ||W1 x||; 0 disables.
  double modifier_norm_penalty = 0.0;
  PenaltyKind penalty_kind = PenaltyKind::L2;

  void validate() const;
};

enum class Arch { Linear, Bilinear, Relu, Swiglu, ToyTransformer };

Arch parse_arch(std::string_view name);  // accepts "toy-transformer" and "toy_transformer"
std::string to_string(Arch arch);

struct ModelConfig {
  // superposition autoencoder
  std::size_t d_hidden = 0;  // 0: d_input
  bool one_plus_modifier = true;
  double init_scale = 1.0;
  // toy transformer
  std::size_t d_model = 16;
  std::size_t n_heads = 2;
  std::size_t d_head = 8;
  std::size_t d_mlp = 32;
  bool qk_scale = true;
  bool positional = false;
};

struct Penalty {
  double lambda = 0.0;
  PenaltyKind kind = PenaltyKind::L2;
};

struct Batch {
  Matrix x;                   // superposition inputs, batch x d_input
  std::vector<Tokens> tokens;  // toy_lm sequences
};

struct NamedParam {
  std::string name;
  Matrix* value;
};

class Model {
 public:
  virtual ~Model() = default;
  virtual Arch arch() const = 0;
  /// Stable order; gradients are returned in the same order.
  virtual std::vector<NamedParam> params() = 0;
  std::vector<std::pair<std::string, const Matrix*>> params() const;

  /// Loss including the modifier-norm penalty; fills `grads` when given.
  virtual double loss(const Batch& batch, const Penalty& penalty,
                      std::vector<Matrix>* grads) const = 0;
  /// Penalty part of loss() alone.
  virtual double penalty(const Batch& batch, const Penalty& penalty) const = 0;
  /// mean ||W1 x||_2 over the batch (0 for models without a modifier side).
  virtual double mean_modifier_norm(const Batch& batch) const = 0;
  /// Pre-activations that pass through a kink (relu); empty otherwise.
  virtual Vector kink_preactivations(const Batch&) const { return {}; }

  virtual std::unique_ptr<Model> clone() const = 0;
};

/// y = W_out h(x) + b_out with h one of
///   linear:   W x
///   bilinear: (W1 x [+ 1]) * (W2 x)
///   relu:     relu(W x + b)
///   swiglu:   swish(W1 x) * (W2 x)
class SuperpositionModel final : public Model {
 public:
  SuperpositionModel(Arch arch, std::size_t d_input, std::size_t d_hidden,
                     bool one_plus_modifier, std::uint64_t seed, double init_scale = 1.0);
  SuperpositionModel(Arch arch, bool one_plus_modifier, std::map<std::string, Matrix> params,
                     std::vector<double> importance);

  Arch arch() const override { return arch_; }
  std::vector<NamedParam> params() override;
  double loss(const Batch& batch, const Penalty& penalty,
              std::vector<Matrix>* grads) const override;
  double penalty(const Batch& batch, const Penalty& penalty) const override;
  double mean_modifier_norm(const Batch& batch) const override;
  Vector kink_preactivations(const Batch& batch) const override;
  std::unique_ptr<Model> clone() const override;

  Matrix predict(const Matrix& x) const;
  bool one_plus_modifier() const noexcept { return one_plus_; }
  /// Per-dimension loss weights gamma^i.
  void set_importance(std::vector<double> w) { importance_ = std::move(w); }
  const std::vector<double>& importance() const noexcept { return importance_; }

  /// Bilinear arch only.
  BilinearLayer hidden_layer() const;
  const Matrix& decoder() const { return w_out_; }

 private:
  Arch arch_;
  bool one_plus_ = false;
  Matrix w1_, w2_, b_;  // relu/linear use w1_ as W and b_ as the hidden bias
  Matrix w_out_, b_out_;
  std::vector<double> importance_;
};

/// Next-token cross-entropy over a ToyTransformer.
class TransformerLm final : public Model {
 public:
  explicit TransformerLm(ToyTransformer model) : model_(std::move(model)) {}

  Arch arch() const override { return Arch::ToyTransformer; }
  std::vector<NamedParam> params() override;
  double loss(const Batch& batch, const Penalty& penalty,
              std::vector<Matrix>* grads) const override;
  double penalty(const Batch& batch, const Penalty& penalty) const override;
  double mean_modifier_norm(const Batch& batch) const override;
  std::unique_ptr<Model> clone() const override;

  const ToyTransformer& transformer() const noexcept { return model_; }

 private:
  ToyTransformer model_;
};

std::unique_ptr<Model> make_model(Arch arch, const TaskConfig& task, const ModelConfig& cfg,
                                  std::uint64_t seed);

// ---------------------------------------------------------------------------
// Data

/// n_features x d_input; rows are seeded random unit vectors (or identity).
Matrix make_dictionary(const TaskConfig& cfg, std::uint64_t seed);

struct SuperpositionBatch {
  Matrix coefficients;  // batch x n_features
  Matrix x;             // batch x d_input
  Matrix dictionary;    // n_features x d_input
};

SuperpositionBatch gen_superposition_batch(const TaskConfig& cfg, const Matrix& dictionary,
                                           std::size_t batch, Rng& rng);
/// Dictionary from stream "dictionary", coefficients from stream "data".
SuperpositionBatch gen_superposition_batch(const TaskConfig& cfg, std::size_t batch,
                                           std::uint64_t seed);

/// Positions [0, L) uniform, [L, 2L) copy them, the rest uniform.
std::vector<Tokens> gen_induction_batch(const TaskConfig& cfg, std::size_t batch, Rng& rng);
std::vector<Tokens> gen_induction_batch(const TaskConfig& cfg, std::size_t batch,
                                        std::uint64_t seed);
/// Markov chain: successor (7v + 3) mod V with probability 0.8, else uniform.
std::vector<Tokens> gen_bigram_batch(const TaskConfig& cfg, std::size_t batch, Rng& rng);

// ---------------------------------------------------------------------------
// Training

struct StepMetric {
  long step;
  double loss;     // total, including penalty
  double penalty;  // penalty part
};

struct TrainResult {
  std::unique_ptr<Model> model;
  std::vector<StepMetric> metrics;
};

/// Adam on the task loss. Deterministic for a fixed seed. TrainingError with
/// the step index if the loss becomes non-finite.
TrainResult train(Arch arch, const TaskConfig& task, const OptConfig& opt,
                  const ModelConfig& model_cfg = {});

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t excluded = 0;  // kink coordinates skipped
};

/// Relative error is |analytic - numeric| / max(|analytic|, |numeric|, 1e-3).
inline constexpr double kGradCheckFloor = 1e-3;
/// Coordinates whose perturbation moves a pre-activation with |z| <= this are
/// skipped for relu models.
inline constexpr double kKinkBand = 1e-3;

/// Central differences on `coords` sampled coordinates (all of them if the
/// model has fewer).
GradCheckResult grad_check(const Model& model, const Batch& batch, const Penalty& penalty = {},
                           double eps = 1e-5, std::size_t coords = 200, std::uint64_t seed = 0);

struct EvalMetrics {
  double loss = 0.0;
  std::optional<double> unigram_baseline;  // toy_lm
  std::optional<double> recovery_score;    // superposition
  double mean_modifier_norm = 0.0;
};

/// Held-out metrics on data from stream "eval" of `seed`.
EvalMetrics evaluate(const Model& model, const TaskConfig& task, std::uint64_t seed,
                     std::size_t n_eval = 1024);

/// Mean over dictionary rows of the best |cosine| against decoder columns.
double recovery_score(const Matrix& dictionary, const Matrix& decoder);

/// Entropy of the empirical next-token distribution.
double unigram_baseline(const std::vector<Tokens>& sequences, std::size_t n_vocab);

Batch make_eval_batch(const TaskConfig& task, std::uint64_t seed, std::size_t n);

// ---------------------------------------------------------------------------
// Checkpoint conversion

Checkpoint to_checkpoint(const Model& model, std::uint64_t seed);
std::unique_ptr<Model> model_from_checkpoint(const Checkpoint& ckpt);

}  // namespace blc
