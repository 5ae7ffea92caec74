#include "blc/runs.hpp"

#include "blc/error.hpp"
#include "blc/features.hpp"
#include "blc/persistence.hpp"

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <set>

namespace blc {

using nlohmann::json;

namespace {

json matrix_json(const Matrix& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

json vector_json(const Vector& v) {
  json out = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v(i));
  return out;
}

const json& require(const json& request, const char* key) {
  if (!request.contains(key) || request.at(key).is_null())
    fail(ErrorKind::Config, std::string("missing required option '") + key + "'");
  return request.at(key);
}

template <class T>
T get_as(const json& v, const std::string& key) {
  try {
    if constexpr (std::is_unsigned_v<T> && !std::is_same_v<T, bool>) {
      if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0))
        fail(ErrorKind::Config, "'" + key + "' must be a nonnegative integer");
    }
    return v.get<T>();
  } catch (const json::exception&) {
    fail(ErrorKind::Config, "'" + key + "' has the wrong type");
  }
}

template <class T>
void read(const json& section, const char* key, T& out) {
  if (section.contains(key)) out = get_as<T>(section.at(key), key);
}

void check_keys(const json& section, const std::string& name, std::initializer_list<const char*> keys) {
  if (!section.is_object()) fail(ErrorKind::Config, "config section '" + name + "' must be an object");
  const std::set<std::string> allowed(keys.begin(), keys.end());
  for (const auto& [k, _] : section.items())
    if (!allowed.count(k)) fail(ErrorKind::Config, "unknown config key '" + name + "." + k + "'");
}

TaskVariant parse_variant(const std::string& s) {
  if (s == "superposition") return TaskVariant::Superposition;
  if (s == "toy-lm" || s == "toy_lm") return TaskVariant::ToyLm;
  fail(ErrorKind::Config, "unknown task '" + s + "'");
}

const char* variant_name(TaskVariant v) { return v == TaskVariant::Superposition ? "superposition" : "toy_lm"; }

PenaltyKind parse_penalty(const std::string& s) {
  if (s == "l2" || s == "L2") return PenaltyKind::L2;
  if (s == "l1" || s == "L1") return PenaltyKind::L1;
  fail(ErrorKind::Config, "unknown penalty kind '" + s + "'");
}

std::uint64_t seed_of(const json& request, std::uint64_t fallback) {
  return request.contains("seed") && !request.at("seed").is_null()
             ? get_as<std::uint64_t>(request.at("seed"), "seed")
             : fallback;
}

double elapsed(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

json make_report(const std::string& command, const json& config, std::uint64_t seed) {
  json r;
  r["command"] = command;
  r["config"] = config;
  r["seed"] = seed;
  r["tool_version"] = kToolVersion;
  r["warnings"] = json::array();
  r["results"] = json::object();
  return r;
}

// Rounds every parameter to single precision when the numeric suite runs in f32.
void apply_dtype(Checkpoint& ck, NumericDType dtype) {
  if (dtype != NumericDType::F32) return;
  for (auto& [_, t] : ck.tensors) t = t.cast(DType::F32);
}

const char* dtype_name(NumericDType d) { return d == NumericDType::F32 ? "f32" : "f64"; }

struct Loaded {
  Checkpoint ckpt;
  std::unique_ptr<Model> model;
  RunConfig cfg;
};

Loaded load(const json& request) {
  Loaded l;
  l.ckpt = read_checkpoint(require(request, "ckpt").get<std::string>());
  l.model = model_from_checkpoint(l.ckpt);
  json sections = json::object();
  for (const char* k : {"task", "opt", "model"})
    if (l.ckpt.config.contains(k)) sections[k] = l.ckpt.config.at(k);
  l.cfg = parse_run_config(sections);
  return l;
}

std::optional<BilinearLayer> bilinear_of(const Model& model) {
  if (const auto* sm = dynamic_cast<const SuperpositionModel*>(&model)) {
    if (sm->arch() == Arch::Bilinear) return sm->hidden_layer();
    return std::nullopt;
  }
  if (const auto* lm = dynamic_cast<const TransformerLm*>(&model))
    return make_layer(lm->transformer().mlp.w_in1, lm->transformer().mlp.w_in2, false);
  return std::nullopt;
}

BilinearLayer require_bilinear(const Model& model) {
  auto layer = bilinear_of(model);
  if (!layer) fail(ErrorKind::Precondition, "this analysis needs a bilinear layer; checkpoint is " + to_string(model.arch()));
  return *layer;
}

Matrix round_f32(Matrix m) {
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(m.data()[i]);
  return m;
}

// ---------------------------------------------------------------------------
// verification suites

struct Invariant {
  std::string name;
  double max_error;
  double tolerance;
  std::string note;
  bool pass() const { return max_error <= tolerance; }  // NaN fails
};

json invariant_json(const Invariant& inv) {
  json j{{"name", inv.name}, {"max_error", inv.max_error}, {"tolerance", inv.tolerance},
         {"pass", inv.pass()}};
  if (!inv.note.empty()) j["note"] = inv.note;
  return j;
}

// std::max drops a NaN in its second argument; errors must keep it.
double worst(double a, double b) { return std::isnan(a) || std::isnan(b) ? std::nan("") : std::max(a, b); }

// Tolerances per invariant; the second column applies when BLC_DTYPE=f32.
double tol(NumericDType d, double f64, double f32) { return d == NumericDType::F32 ? f32 : f64; }

json suite_json(const std::string& name, const std::vector<Invariant>& invs, const std::string& skipped) {
  json s{{"suite", name}};
  if (!skipped.empty()) {
    s["status"] = "skipped";
    s["reason"] = skipped;
    s["invariants"] = json::array();
    return s;
  }
  bool ok = true;
  json arr = json::array();
  for (const Invariant& inv : invs) {
    ok = ok && inv.pass();
    arr.push_back(invariant_json(inv));
  }
  s["status"] = ok ? "pass" : "fail";
  s["invariants"] = std::move(arr);
  return s;
}

json suite_bform(const Model& model, std::uint64_t seed, NumericDType dtype) {
  auto maybe = bilinear_of(model);
  if (!maybe) return suite_json("bform", {}, "checkpoint has no bilinear layer");
  BilinearLayer layer = *maybe;
  if (dtype == NumericDType::F32) {
    layer.w1 = round_f32(layer.w1);
    layer.w2 = round_f32(layer.w2);
  }
  const std::size_t m = layer.out_dim(), n = layer.in_dim();
  if (m * n * n > kDefaultMaterializationLimit)
    return suite_json("bform", {}, "B exceeds the materialization limit");

  const ThirdOrderForm dense = build_b(layer);
  const ThirdOrderForm factored = ThirdOrderForm::factored(layer);
  Rng rng(derive_seed(seed, "verify.bform"));
  double fwd = 0.0, routes = 0.0, assoc = 0.0;
  for (int s = 0; s < 100; ++s) {
    Vector x(n);
    for (std::size_t i = 0; i < n; ++i) x(i) = rng.normal();
    if (dtype == NumericDType::F32) x = round_f32(x);
    Vector q = apply_quadratic(dense, x, x, ContractionOrder::LeftFirst);
    const Vector qr = apply_quadratic(dense, x, x, ContractionOrder::RightFirst);
    const Vector qf = apply_quadratic(factored, x, x);
    assoc = worst(assoc, max_abs_diff(Matrix(q), Matrix(qr)));
    routes = worst(routes, max_abs_diff(Matrix(q), Matrix(qf)));
    if (dense.linear_term()) q += *dense.linear_term() * x;
    fwd = worst(fwd, max_abs_diff(Matrix(forward(layer, x)), Matrix(q)));
  }
  const double construction = max_abs_diff(build_b_by_contraction(layer), dense.tensor());
  return suite_json("bform",
                    {{"forward_vs_quadratic_form", fwd, tol(dtype, 1e-10, 1e-4), ""},
                     {"dense_vs_factored", routes, tol(dtype, 1e-10, 1e-4), ""},
                     {"construction_by_contraction", construction, 0.0, "elementwise vs Z contraction"},
                     {"left_vs_right_contraction", assoc, tol(dtype, 1e-10, 1e-4),
                      "real-valued inputs; exact on dyadic inputs"}},
                    "");
}

std::vector<Tokens> verify_sequences(const ToyTransformer& t, std::size_t n_ctx, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "verify.expansion"));
  std::size_t len = std::max<std::size_t>(1, n_ctx);
  if (t.pos) len = std::min(len, static_cast<std::size_t>(t.pos->rows()));
  std::vector<Tokens> seqs(4, Tokens(len));
  for (Tokens& s : seqs)
    for (auto& tok : s) tok = static_cast<std::int64_t>(rng.below(t.n_vocab()));
  return seqs;
}

json suite_expansion(const Model& model, const RunConfig& cfg, std::uint64_t seed, NumericDType dtype) {
  const auto* lm = dynamic_cast<const TransformerLm*>(&model);
  if (!lm) return suite_json("expansion", {}, "checkpoint is not a toy transformer");
  const ToyTransformer& t = lm->transformer();
  double sum_gap = 0.0, mlp_gap = 0.0, mat_gap = 0.0;
  std::string mat_note;
  bool materialize = t.n_vocab() <= kMaterializeVocabLimit && !t.pos;
  if (!materialize)
    mat_note = t.pos ? "skipped: positional embeddings present" : "skipped: vocabulary above 64";
  std::vector<Invariant> invs;
  try {
    for (const Tokens& seq : verify_sequences(t, cfg.task.n_ctx, seed)) {
      const ForwardTrace tr = trace(t, seq);
      const auto terms = full_expansion(t, seq);
      sum_gap = worst(sum_gap, max_abs_diff(sum_terms(terms), tr.logits));
      const auto groups = mlp_term_groups(t, seq, residual_components(t, seq));
      mlp_gap = worst(mlp_gap, max_abs_diff(sum_terms(groups), tr.mlp_out));
      if (materialize) mat_gap = worst(mat_gap, materialized_check(t, seq).vs_forward);
      if (std::isnan(sum_gap) || std::isnan(mlp_gap) || std::isnan(mat_gap)) break;
    }
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::Consistency) throw;
    return suite_json("expansion",
                      {{"sum_terms_vs_forward", std::numeric_limits<double>::infinity(), 1e-8, e.what()}},
                      "");
  }
  invs.push_back({"sum_terms_vs_forward", sum_gap, tol(dtype, 1e-8, 1e-8), ""});
  invs.push_back({"mlp_groups_vs_mlp_output", mlp_gap, tol(dtype, 1e-9, 1e-9), ""});
  if (materialize)
    invs.push_back({"materialized_vs_forward", mat_gap, tol(dtype, 1e-6, 1e-6), ""});
  json s = suite_json("expansion", invs, "");
  if (!mat_note.empty()) s["materialized"] = mat_note;
  return s;
}

json suite_gradcheck(const Model& model, const RunConfig& cfg, std::uint64_t seed, NumericDType dtype) {
  const bool lm = cfg.task.variant == TaskVariant::ToyLm;
  const Batch batch = make_eval_batch(cfg.task, derive_seed(seed, "gradcheck"), lm ? 2 : 8);
  const Penalty pen{cfg.opt.modifier_norm_penalty, cfg.opt.penalty_kind};
  const GradCheckResult r = grad_check(model, batch, pen, 1e-5, 200, derive_seed(seed, "gradcheck"));
  Invariant inv{"max_relative_error", r.max_rel_error, tol(dtype, 1e-6, 1e-6),
                std::to_string(r.checked) + " coordinates checked, " + std::to_string(r.excluded) +
                    " excluded at relu kinks"};
  return suite_json("gradcheck", {inv}, "");
}

}  // namespace

NumericDType numeric_dtype_from_env() {
  const char* v = std::getenv("BLC_DTYPE");
  if (!v || std::string_view(v).empty() || std::string_view(v) == "f64") return NumericDType::F64;
  if (std::string_view(v) == "f32") return NumericDType::F32;
  fail(ErrorKind::Config, "BLC_DTYPE must be f32 or f64");
}

RunConfig parse_run_config(const json& doc) {
  RunConfig c;
  if (!doc.is_object()) fail(ErrorKind::Config, "config must be a JSON object");
  check_keys(doc, "config", {"task", "opt", "model"});
  if (doc.contains("task")) {
    const json& t = doc.at("task");
    check_keys(t, "task", {"variant", "n_features", "d_input", "sparsity", "importance_decay",
                           "dictionary", "n_vocab", "n_ctx", "pattern", "repeat_len", "dataset_size"});
    if (t.contains("variant")) c.task.variant = parse_variant(get_as<std::string>(t.at("variant"), "variant"));
    read(t, "n_features", c.task.n_features);
    read(t, "d_input", c.task.d_input);
    read(t, "sparsity", c.task.sparsity);
    read(t, "importance_decay", c.task.importance_decay);
    if (t.contains("dictionary")) {
      const auto d = get_as<std::string>(t.at("dictionary"), "dictionary");
      if (d == "random") c.task.dictionary = DictionaryKind::Random;
      else if (d == "identity") c.task.dictionary = DictionaryKind::Identity;
      else fail(ErrorKind::Config, "unknown dictionary '" + d + "'");
    }
    read(t, "n_vocab", c.task.n_vocab);
    read(t, "n_ctx", c.task.n_ctx);
    if (t.contains("pattern")) {
      const auto p = get_as<std::string>(t.at("pattern"), "pattern");
      if (p == "induction_repeat" || p == "induction-repeat") c.task.pattern = SequencePattern::InductionRepeat;
      else if (p == "bigram") c.task.pattern = SequencePattern::Bigram;
      else fail(ErrorKind::Config, "unknown pattern '" + p + "'");
    }
    read(t, "repeat_len", c.task.repeat_len);
    read(t, "dataset_size", c.task.dataset_size);
  }
  if (doc.contains("opt")) {
    const json& o = doc.at("opt");
    check_keys(o, "opt", {"steps", "batch_size", "lr", "beta1", "beta2", "eps", "seed",
                          "modifier_norm_penalty", "penalty_kind"});
    read(o, "steps", c.opt.steps);
    read(o, "batch_size", c.opt.batch_size);
    read(o, "lr", c.opt.lr);
    read(o, "beta1", c.opt.beta1);
    read(o, "beta2", c.opt.beta2);
    read(o, "eps", c.opt.eps);
    read(o, "seed", c.opt.seed);
    read(o, "modifier_norm_penalty", c.opt.modifier_norm_penalty);
    if (o.contains("penalty_kind")) c.opt.penalty_kind = parse_penalty(get_as<std::string>(o.at("penalty_kind"), "penalty_kind"));
  }
  if (doc.contains("model")) {
    const json& m = doc.at("model");
    check_keys(m, "model", {"d_hidden", "one_plus_modifier", "init_scale", "d_model", "n_heads",
                            "d_head", "d_mlp", "qk_scale", "positional"});
    read(m, "d_hidden", c.model.d_hidden);
    read(m, "one_plus_modifier", c.model.one_plus_modifier);
    read(m, "init_scale", c.model.init_scale);
    read(m, "d_model", c.model.d_model);
    read(m, "n_heads", c.model.n_heads);
    read(m, "d_head", c.model.d_head);
    read(m, "d_mlp", c.model.d_mlp);
    read(m, "qk_scale", c.model.qk_scale);
    read(m, "positional", c.model.positional);
  }
  return c;
}

json to_json(const RunConfig& c) {
  json j;
  j["task"] = {{"variant", variant_name(c.task.variant)},
               {"n_features", c.task.n_features},
               {"d_input", c.task.d_input},
               {"sparsity", c.task.sparsity},
               {"importance_decay", c.task.importance_decay},
               {"dictionary", c.task.dictionary == DictionaryKind::Random ? "random" : "identity"},
               {"n_vocab", c.task.n_vocab},
               {"n_ctx", c.task.n_ctx},
               {"pattern", c.task.pattern == SequencePattern::Bigram ? "bigram" : "induction_repeat"},
               {"repeat_len", c.task.repeat_len},
               {"dataset_size", c.task.dataset_size}};
  j["opt"] = {{"steps", c.opt.steps},
              {"batch_size", c.opt.batch_size},
              {"lr", c.opt.lr},
              {"beta1", c.opt.beta1},
              {"beta2", c.opt.beta2},
              {"eps", c.opt.eps},
              {"seed", c.opt.seed},
              {"modifier_norm_penalty", c.opt.modifier_norm_penalty},
              {"penalty_kind", c.opt.penalty_kind == PenaltyKind::L2 ? "l2" : "l1"}};
  j["model"] = {{"d_hidden", c.model.d_hidden},
                {"one_plus_modifier", c.model.one_plus_modifier},
                {"init_scale", c.model.init_scale},
                {"d_model", c.model.d_model},
                {"n_heads", c.model.n_heads},
                {"d_head", c.model.d_head},
                {"d_mlp", c.model.d_mlp},
                {"qk_scale", c.model.qk_scale},
                {"positional", c.model.positional}};
  return j;
}

RunOutcome run_train(const json& request) {
  const auto t0 = std::chrono::steady_clock::now();
  const NumericDType dtype = numeric_dtype_from_env();
  const std::filesystem::path out = require(request, "out").get<std::string>();
  RunConfig cfg;
  if (request.contains("config") && !request.at("config").is_null()) {
    const std::string path = request.at("config").get<std::string>();
    std::ifstream in(path);
    if (!in) fail(ErrorKind::Config, "cannot open config file " + path);
    json doc;
    try {
      doc = json::parse(in);
    } catch (const json::parse_error& e) {
      fail(ErrorKind::Config, "config file " + path + " is not valid JSON: " + e.what());
    }
    cfg = parse_run_config(doc);
  }
  if (request.contains("task")) cfg.task.variant = parse_variant(request.at("task").get<std::string>());
  const Arch arch = parse_arch(require(request, "arch").get<std::string>());
  cfg.opt.seed = seed_of(request, cfg.opt.seed);
  if (request.contains("lambda") && !request.at("lambda").is_null())
    cfg.opt.modifier_norm_penalty = get_as<double>(request.at("lambda"), "lambda");
  if (request.contains("penalty") && !request.at("penalty").is_null())
    cfg.opt.penalty_kind = parse_penalty(request.at("penalty").get<std::string>());

  TrainResult r = train(arch, cfg.task, cfg.opt, cfg.model);

  std::filesystem::create_directories(out);
  std::string lines;
  for (const StepMetric& m : r.metrics)
    lines += json{{"step", m.step}, {"loss", m.loss}, {"penalty", m.penalty}}.dump() + "\n";
  write_file_atomic(out / "metrics.jsonl",
                    std::span(reinterpret_cast<const std::uint8_t*>(lines.data()), lines.size()));

  Checkpoint ck = to_checkpoint(*r.model, cfg.opt.seed);
  const json resolved = to_json(cfg);
  for (const auto& [k, v] : resolved.items()) ck.config[k] = v;
  ck.config["dtype"] = dtype_name(dtype);
  apply_dtype(ck, dtype);
  write_checkpoint(ck, out);

  // Metrics are recomputed from what was written.
  const auto saved = model_from_checkpoint(ck);
  const EvalMetrics ev = evaluate(*saved, cfg.task, cfg.opt.seed);

  json config = resolved;
  config["arch"] = to_string(arch);
  config["dtype"] = dtype_name(dtype);
  RunOutcome o;
  o.report = make_report("train", config, cfg.opt.seed);
  json& res = o.report["results"];
  res["steps"] = r.metrics.size();
  res["final_loss"] = r.metrics.empty() ? json(nullptr) : json(r.metrics.back().loss);
  res["eval"] = {{"loss", ev.loss}, {"mean_modifier_norm", ev.mean_modifier_norm}};
  if (ev.unigram_baseline) res["eval"]["unigram_baseline"] = *ev.unigram_baseline;
  if (ev.recovery_score) res["eval"]["recovery_score"] = *ev.recovery_score;
  res["checkpoint"] = out.string();
  res["metrics_file"] = (out / "metrics.jsonl").string();
  o.report["wall_time_s"] = elapsed(t0);
  const std::string text = o.report.dump(2) + "\n";
  write_file_atomic(out / "report.json",
                    std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  return o;
}

RunOutcome run_verify(const json& request) {
  const auto t0 = std::chrono::steady_clock::now();
  const NumericDType dtype = numeric_dtype_from_env();
  const std::string suite = request.value("suite", std::string("all"));
  if (suite != "all" && suite != "bform" && suite != "expansion" && suite != "gradcheck")
    fail(ErrorKind::Config, "unknown suite '" + suite + "'");
  Loaded l = load(request);
  const std::uint64_t seed = seed_of(request, l.ckpt.seed);

  json suites = json::array();
  if (suite == "all" || suite == "bform") suites.push_back(suite_bform(*l.model, seed, dtype));
  if (suite == "all" || suite == "expansion") suites.push_back(suite_expansion(*l.model, l.cfg, seed, dtype));
  if (suite == "all" || suite == "gradcheck") suites.push_back(suite_gradcheck(*l.model, l.cfg, seed, dtype));

  RunOutcome o;
  o.report = make_report("verify",
                         {{"ckpt", request.at("ckpt")}, {"suite", suite}, {"dtype", dtype_name(dtype)},
                          {"arch", l.ckpt.arch}},
                         seed);
  bool ok = true;
  for (const json& s : suites) {
    ok = ok && s.at("status") != "fail";
    if (s.at("status") == "skipped")
      o.report["warnings"].push_back(s.at("suite").get<std::string>() + " suite skipped: " +
                                     s.at("reason").get<std::string>());
  }
  o.report["results"] = {{"suites", suites}, {"pass", ok}};
  o.report["wall_time_s"] = elapsed(t0);
  o.verdict = ok ? 0 : 4;
  return o;
}

RunOutcome run_expand(const json& request) {
  const auto t0 = std::chrono::steady_clock::now();
  Loaded l = load(request);
  const auto* lm = dynamic_cast<const TransformerLm*>(l.model.get());
  if (!lm) fail(ErrorKind::Config, "expand needs a toy transformer checkpoint");
  const ToyTransformer& t = lm->transformer();
  Tokens tokens;
  for (const json& v : require(request, "tokens")) tokens.push_back(get_as<std::int64_t>(v, "tokens"));
  if (tokens.empty()) fail(ErrorKind::Config, "at least one token is required");
  const bool materialize = request.value("materialize", false);

  const auto terms = full_expansion(t, tokens);
  const Matrix logits = forward(t, tokens);
  const double gap = max_abs_diff(sum_terms(terms), logits);
  const TermNormReport norms = term_norm_report(terms);

  RunOutcome o;
  o.report = make_report("expand",
                         {{"ckpt", request.at("ckpt")}, {"tokens", tokens}, {"materialize", materialize}},
                         l.ckpt.seed);
  json entries = json::array();
  for (const TermNorm& e : norms.entries)
    entries.push_back({{"label", e.label}, {"frobenius", e.frobenius}, {"max_abs", e.max_abs}, {"share", e.share}});
  json& res = o.report["results"];
  res["terms"] = std::move(entries);
  res["total_frobenius"] = norms.total_frobenius;
  res["share_sum"] = norms.share_sum;
  res["sum_vs_forward"] = {{"max_abs_gap", gap}, {"tolerance", 1e-8}, {"pass", gap <= 1e-8}};
  bool ok = gap <= 1e-8;
  if (materialize) {
    const MaterializedCheck mc = materialized_check(t, tokens);
    const bool mok = mc.vs_forward <= 1e-6 && mc.vs_distributed <= 1e-6;
    res["materialized"] = {{"vs_forward", mc.vs_forward}, {"vs_distributed", mc.vs_distributed},
                           {"tolerance", 1e-6}, {"pass", mok}};
    ok = ok && mok;
  }
  o.report["wall_time_s"] = elapsed(t0);
  o.verdict = ok ? 0 : 4;
  return o;
}

RunOutcome run_analyze(const json& request) {
  const auto t0 = std::chrono::steady_clock::now();
  Loaded l = load(request);
  const std::string method = require(request, "method").get<std::string>();
  const std::size_t k = request.contains("k") ? get_as<std::size_t>(request.at("k"), "k") : 0;
  const std::uint64_t seed = seed_of(request, l.ckpt.seed);
  const bool has_data = request.contains("data") && !request.at("data").is_null();
  auto data_matrix = [&]() {
    const Tensor t = read_tensor(request.at("data").get<std::string>());
    if (t.order() != 2) fail(ErrorKind::Config, "--data must hold an order-2 tensor");
    return t.to_matrix();
  };

  RunOutcome o;
  json config{{"ckpt", request.at("ckpt")}, {"method", method}, {"k", k}};
  if (has_data) config["data"] = request.at("data");
  o.report = make_report("analyze", config, seed);
  json& res = o.report["results"];
  json& warnings = o.report["warnings"];
  res["method"] = method;

  // Weight whose rows are the default-output-side pre-activation directions.
  const auto layer = bilinear_of(*l.model);
  Matrix w2;
  if (layer) {
    w2 = layer->w2;
  } else {
    auto params = l.model->params();
    w2 = *params.front().value;
  }

  if (method == "svd") {
    const Basis b = svd_basis(w2);
    const std::size_t r = k == 0 ? static_cast<std::size_t>(b.u.cols()) : std::min<std::size_t>(k, b.u.cols());
    res["singular_values"] = vector_json(b.singular_values);
    res["u"] = matrix_json(b.u.leftCols(r));
    res["residual"] = b.residual;
    res["rank_deficient"] = b.rank_deficient;
  } else if (method == "ica") {
    if (!has_data) fail(ErrorKind::Config, "--method ica needs --data (input activations)");
    IcaOptions opts;
    opts.n_components = k;
    opts.seed = derive_seed(seed, "ica");
    const Basis b = independent_components(w2, data_matrix(), opts);
    res["u"] = matrix_json(b.u);
    res["vt"] = matrix_json(b.vt);
    res["residual"] = b.residual;
    res["rank_deficient"] = b.rank_deficient;
    res["converged"] = b.converged;
    res["iterations"] = b.iterations;
    res["excess_kurtosis"] = vector_json(b.excess_kurtosis);
    if (b.gaussian_warning) warnings.push_back("ica_gaussian_inputs: recovered sources are near-Gaussian");
    if (!b.converged) warnings.push_back("ica_not_converged");
    if (b.rank_deficient) warnings.push_back("rank_deficient_mixing");
  } else if (method == "hosvd") {
    const Tensor b = build_b(require_bilinear(*l.model)).tensor();
    std::vector<std::size_t> ranks;
    for (std::size_t e : b.shape()) ranks.push_back(k == 0 ? e : std::min(k, e));
    const Hosvd h = hosvd(b, ranks);
    json sv = json::array();
    for (const Vector& s : h.singular_values) sv.push_back(vector_json(s));
    res["ranks"] = ranks;
    res["singular_values"] = std::move(sv);
    res["reconstruction_error"] = max_abs_diff(hosvd_reconstruct(h), b);
  } else if (method == "top-b") {
    const ThirdOrderForm form = build_b(require_bilinear(*l.model));
    json arr = json::array();
    for (const BCoefficient& c : top_b_coefficients(form, k == 0 ? 10 : k))
      arr.push_back({{"i", c.i}, {"j", c.j}, {"k", c.k}, {"value", c.value}});
    res["coefficients"] = std::move(arr);
  } else if (method == "top-modified") {
    const BilinearLayer lay = require_bilinear(*l.model);
    const Matrix u2 = svd_basis(lay.w2).u;
    const Matrix dirs = has_data ? data_matrix() : Matrix(Matrix::Identity(lay.in_dim(), lay.in_dim()));
    if (dirs.cols() != lay.w1.cols()) fail(ErrorKind::Dimension, "--data rows must have the layer input width");
    const std::size_t kk = k == 0 ? static_cast<std::size_t>(u2.cols()) : k;
    json arr = json::array();
    for (Eigen::Index i = 0; i < dirs.rows(); ++i) {
      const ModificationReport rep = modification_report(dirs.row(i).transpose(), lay.w1, u2, kk);
      json top = json::array();
      for (std::size_t f : rep.top) top.push_back({{"feature", f}, {"magnitude", rep.magnitude[f]}});
      arr.push_back({{"direction", i}, {"top", std::move(top)}});
    }
    res["directions"] = std::move(arr);
  } else if (method == "pairs") {
    const BilinearLayer lay = require_bilinear(*l.model);
    if (l.cfg.task.variant != TaskVariant::Superposition)
      fail(ErrorKind::Precondition, "pair ranking needs a superposition checkpoint (feature dictionary)");
    const Matrix dict = make_dictionary(l.cfg.task, derive_seed(l.ckpt.seed, "dictionary"));
    Matrix act;
    if (has_data) {
      act = data_matrix();
    } else {
      Rng rng(derive_seed(seed, "eval"));
      act = gen_superposition_batch(l.cfg.task, dict, 1024, rng).coefficients;
    }
    const Matrix u2 = svd_basis(lay.w2).u;
    json arr = json::array();
    for (const PairScore& p : correlated_pair_ranking(act, dict, lay.w1, lay.w2, u2, k))
      arr.push_back({{"l", p.l}, {"m", p.m}, {"score", p.score}, {"correlation", p.correlation}});
    res["pairs"] = std::move(arr);
    warnings.push_back("heuristic_pair_ranking: scores are a heuristic, not an exact decomposition");
  } else {
    fail(ErrorKind::Config, "unknown method '" + method + "'");
  }
  o.report["wall_time_s"] = elapsed(t0);
  return o;
}

RunOutcome run_command(std::string_view command, const json& request) {
  if (!request.is_object()) fail(ErrorKind::Config, "request must be a JSON object");
  RunOutcome o;
  if (command == "train") o = run_train(request);
  else if (command == "verify") o = run_verify(request);
  else if (command == "expand") o = run_expand(request);
  else if (command == "analyze") o = run_analyze(request);
  else fail(ErrorKind::Config, "unknown command '" + std::string(command) + "'");
  if (request.contains("report") && !request.at("report").is_null()) {
    const std::string text = o.report.dump(2) + "\n";
    write_file_atomic(request.at("report").get<std::string>(),
                      std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  }
  return o;
}

}  // namespace blc
