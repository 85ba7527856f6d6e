#pragma once

// End-to-end experiment stages over an on-disk workspace. Every stage reads
// its upstream artifacts (verified against the upstream manifest hashes),
// writes its own artifacts plus a manifest, and derives all randomness from
// the root seed.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "rrw/attacks.hpp"
#include "rrw/baselines.hpp"
#include "rrw/corpus.hpp"
#include "rrw/guard.hpp"
#include "rrw/metrics.hpp"
#include "rrw/pools.hpp"
#include "rrw/routers.hpp"

namespace rrw {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline constexpr std::string_view kOutputEnv = "RRW_OUTPUT_ROOT";

// ---------------------------------------------------------------------------
// Configuration.

struct ExperimentConfig {
  std::uint64_t seed = 1234;
  std::string output_dir = "rrw-out";

  struct Corpus {
    std::size_t router_simple = 600, router_complex = 600;
    std::size_t raw_simple = 1500, raw_complex = 1500;
    std::size_t eval_simple = 300, eval_complex = 300;
    double noise_fraction = 0.10;
    PreferenceOptions preferences;
  } corpus;

  struct Routers {
    std::vector<RouterKind> kinds{kAllRouters.begin(), kAllRouters.end()};
    RouterTrainConfig train;
  } routers;

  struct Attack {
    AttackConfig base;
    int triggers_per_method = 50;
    int batch_size = 10;
    int weak_iterations = 100;
    int adaptive_seeds = 5;
    double adaptive_penalty = 0.5;
    int adaptive_whitebox_runs = 2;
    int adaptive_whitebox_batch = 64;
    AdaptiveWeights adaptive_weights;
    int boxfree_tokens = 10;
  } attack;

  GuardConfig guard;

  struct Baselines {
    double ppl_k = 0.5;
  } baselines;

  struct Serve {
    std::string host = "127.0.0.1";
    int port = 8080;
    std::string router = "r_cls";
  } serve;

  void validate() const {
    if (corpus.router_simple == 0 || corpus.router_complex == 0 || corpus.raw_simple == 0 ||
        corpus.raw_complex == 0 || corpus.eval_simple == 0 || corpus.eval_complex == 0)
      throw ConfigError("corpus counts must be positive");
    if (corpus.noise_fraction < 0 || corpus.noise_fraction > 1)
      throw ConfigError("corpus.noise_fraction must be in [0,1]");
    if (routers.kinds.empty()) throw ConfigError("routers.kinds must not be empty");
    routers.train.train.validate();
    attack.base.validate();
    if (attack.triggers_per_method < 5) throw ConfigError("attack.triggers_per_method must be >= 5");
    if (attack.batch_size < 1) throw ConfigError("attack.batch_size must be >= 1");
    guard.validate();
    if (baselines.ppl_k < 0) throw ConfigError("baselines.ppl_k must be >= 0");
  }
};

namespace detail {

template <typename T>
void read_opt(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config key '") + key + "': " + e.what());
  }
}

inline void read_train(const json& j, TrainConfig& t) {
  read_opt(j, "lr_head", t.lr_head);
  read_opt(j, "lr_backbone", t.lr_backbone);
  read_opt(j, "weight_decay_head", t.weight_decay_head);
  read_opt(j, "weight_decay_backbone", t.weight_decay_backbone);
  read_opt(j, "batch_size", t.batch_size);
  read_opt(j, "clip_norm", t.clip_norm);
  read_opt(j, "lr_warmup_steps", t.warmup_steps);
  read_opt(j, "max_epochs", t.max_epochs);
}

inline json train_json(const TrainConfig& t) {
  return {{"lr_head", t.lr_head},
          {"lr_backbone", t.lr_backbone},
          {"weight_decay_head", t.weight_decay_head},
          {"weight_decay_backbone", t.weight_decay_backbone},
          {"batch_size", t.batch_size},
          {"clip_norm", t.clip_norm},
          {"lr_warmup_steps", t.warmup_steps},
          {"max_epochs", t.max_epochs}};
}

inline void check_keys(const json& j, std::initializer_list<std::string_view> allowed,
                       std::string_view where) {
  if (!j.is_object()) throw ConfigError(std::string(where) + " must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (auto a : allowed) ok = ok || it.key() == a;
    if (!ok) throw ConfigError("unknown config key '" + std::string(where) + "." + it.key() + "'");
  }
}

}  // namespace detail

inline ExperimentConfig config_from_json(const json& j) {
  using detail::read_opt;
  ExperimentConfig c;
  detail::check_keys(j, {"seed", "output_dir", "corpus", "routers", "attack", "guard", "baselines", "serve"},
                     "config");
  read_opt(j, "seed", c.seed);
  read_opt(j, "output_dir", c.output_dir);
  if (j.contains("corpus")) {
    const auto& s = j["corpus"];
    detail::check_keys(s, {"router_simple", "router_complex", "raw_simple", "raw_complex",
                           "eval_simple", "eval_complex", "noise_fraction", "p_complex",
                           "p_simple", "p_tie"}, "corpus");
    read_opt(s, "router_simple", c.corpus.router_simple);
    read_opt(s, "router_complex", c.corpus.router_complex);
    read_opt(s, "raw_simple", c.corpus.raw_simple);
    read_opt(s, "raw_complex", c.corpus.raw_complex);
    read_opt(s, "eval_simple", c.corpus.eval_simple);
    read_opt(s, "eval_complex", c.corpus.eval_complex);
    read_opt(s, "noise_fraction", c.corpus.noise_fraction);
    read_opt(s, "p_complex", c.corpus.preferences.p_complex);
    read_opt(s, "p_simple", c.corpus.preferences.p_simple);
    read_opt(s, "p_tie", c.corpus.preferences.p_tie);
  }
  if (j.contains("routers")) {
    const auto& s = j["routers"];
    detail::check_keys(s, {"kinds", "train", "hidden", "mf_dim", "k_retrieve", "tau", "llm_score_noise"},
                       "routers");
    if (s.contains("kinds")) {
      c.routers.kinds.clear();
      for (const auto& k : s["kinds"]) c.routers.kinds.push_back(router_kind_from_string(k.get<std::string>()));
    }
    if (s.contains("train")) detail::read_train(s["train"], c.routers.train.train);
    read_opt(s, "hidden", c.routers.train.hidden);
    read_opt(s, "mf_dim", c.routers.train.mf_dim);
    read_opt(s, "k_retrieve", c.routers.train.k_retrieve);
    read_opt(s, "tau", c.routers.train.tau);
    read_opt(s, "llm_score_noise", c.routers.train.llm_score_noise);
  }
  if (j.contains("attack")) {
    const auto& s = j["attack"];
    detail::check_keys(s, {"trigger_length", "iterations", "neighbors", "topk", "batch_queries",
                           "triggers_per_method", "batch_size", "weak_iterations",
                           "adaptive_seeds", "adaptive_penalty", "adaptive_whitebox_runs",
                           "adaptive_whitebox_batch", "adaptive_alpha", "adaptive_beta",
                           "adaptive_eps", "boxfree_tokens"}, "attack");
    read_opt(s, "trigger_length", c.attack.base.trigger_length);
    read_opt(s, "iterations", c.attack.base.iterations);
    read_opt(s, "neighbors", c.attack.base.neighbors);
    read_opt(s, "topk", c.attack.base.topk);
    read_opt(s, "batch_queries", c.attack.base.batch_queries);
    read_opt(s, "triggers_per_method", c.attack.triggers_per_method);
    read_opt(s, "batch_size", c.attack.batch_size);
    read_opt(s, "weak_iterations", c.attack.weak_iterations);
    read_opt(s, "adaptive_seeds", c.attack.adaptive_seeds);
    read_opt(s, "adaptive_penalty", c.attack.adaptive_penalty);
    read_opt(s, "adaptive_whitebox_runs", c.attack.adaptive_whitebox_runs);
    read_opt(s, "adaptive_whitebox_batch", c.attack.adaptive_whitebox_batch);
    read_opt(s, "adaptive_alpha", c.attack.adaptive_weights.alpha);
    read_opt(s, "adaptive_beta", c.attack.adaptive_weights.beta);
    read_opt(s, "adaptive_eps", c.attack.adaptive_weights.eps);
    read_opt(s, "boxfree_tokens", c.attack.boxfree_tokens);
  }
  if (j.contains("guard")) {
    const auto& s = j["guard"];
    detail::check_keys(s, {"lambda_bce", "lambda_contr", "temperature", "hard_negative_weight",
                           "negative_cross_ratio", "K", "warmup_steps", "patience",
                           "encoder_hidden", "encoder_out", "projection_dim",
                           "classifier_hidden", "train"}, "guard");
    read_opt(s, "lambda_bce", c.guard.lambda_bce);
    read_opt(s, "lambda_contr", c.guard.lambda_contr);
    read_opt(s, "temperature", c.guard.temperature);
    read_opt(s, "hard_negative_weight", c.guard.hard_negative_weight);
    read_opt(s, "negative_cross_ratio", c.guard.negative_cross_ratio);
    read_opt(s, "K", c.guard.K);
    read_opt(s, "warmup_steps", c.guard.warmup_steps);
    read_opt(s, "patience", c.guard.patience);
    read_opt(s, "encoder_hidden", c.guard.encoder_hidden);
    read_opt(s, "encoder_out", c.guard.encoder_out);
    read_opt(s, "projection_dim", c.guard.projection_dim);
    read_opt(s, "classifier_hidden", c.guard.classifier_hidden);
    if (s.contains("train")) detail::read_train(s["train"], c.guard.train);
  }
  if (j.contains("baselines")) {
    detail::check_keys(j["baselines"], {"ppl_k"}, "baselines");
    read_opt(j["baselines"], "ppl_k", c.baselines.ppl_k);
  }
  if (j.contains("serve")) {
    detail::check_keys(j["serve"], {"host", "port", "router"}, "serve");
    read_opt(j["serve"], "host", c.serve.host);
    read_opt(j["serve"], "port", c.serve.port);
    read_opt(j["serve"], "router", c.serve.router);
    router_kind_from_string(c.serve.router);
  }
  c.validate();
  return c;
}

inline json config_to_json(const ExperimentConfig& c) {
  json kinds = json::array();
  for (auto k : c.routers.kinds) kinds.push_back(to_string(k));
  return {
      {"seed", c.seed},
      {"output_dir", c.output_dir},
      {"corpus",
       {{"router_simple", c.corpus.router_simple}, {"router_complex", c.corpus.router_complex},
        {"raw_simple", c.corpus.raw_simple}, {"raw_complex", c.corpus.raw_complex},
        {"eval_simple", c.corpus.eval_simple}, {"eval_complex", c.corpus.eval_complex},
        {"noise_fraction", c.corpus.noise_fraction},
        {"p_complex", c.corpus.preferences.p_complex},
        {"p_simple", c.corpus.preferences.p_simple},
        {"p_tie", c.corpus.preferences.p_tie}}},
      {"routers",
       {{"kinds", kinds}, {"train", detail::train_json(c.routers.train.train)},
        {"hidden", c.routers.train.hidden}, {"mf_dim", c.routers.train.mf_dim},
        {"k_retrieve", c.routers.train.k_retrieve}, {"tau", c.routers.train.tau},
        {"llm_score_noise", c.routers.train.llm_score_noise}}},
      {"attack",
       {{"trigger_length", c.attack.base.trigger_length}, {"iterations", c.attack.base.iterations},
        {"neighbors", c.attack.base.neighbors}, {"topk", c.attack.base.topk},
        {"batch_queries", c.attack.base.batch_queries},
        {"triggers_per_method", c.attack.triggers_per_method},
        {"batch_size", c.attack.batch_size}, {"weak_iterations", c.attack.weak_iterations},
        {"adaptive_seeds", c.attack.adaptive_seeds},
        {"adaptive_penalty", c.attack.adaptive_penalty},
        {"adaptive_whitebox_runs", c.attack.adaptive_whitebox_runs},
        {"adaptive_whitebox_batch", c.attack.adaptive_whitebox_batch},
        {"adaptive_alpha", c.attack.adaptive_weights.alpha},
        {"adaptive_beta", c.attack.adaptive_weights.beta},
        {"adaptive_eps", c.attack.adaptive_weights.eps},
        {"boxfree_tokens", c.attack.boxfree_tokens}}},
      {"guard",
       {{"lambda_bce", c.guard.lambda_bce}, {"lambda_contr", c.guard.lambda_contr},
        {"temperature", c.guard.temperature},
        {"hard_negative_weight", c.guard.hard_negative_weight},
        {"negative_cross_ratio", c.guard.negative_cross_ratio}, {"K", c.guard.K},
        {"warmup_steps", c.guard.warmup_steps}, {"patience", c.guard.patience},
        {"encoder_hidden", c.guard.encoder_hidden}, {"encoder_out", c.guard.encoder_out},
        {"projection_dim", c.guard.projection_dim},
        {"classifier_hidden", c.guard.classifier_hidden},
        {"train", detail::train_json(c.guard.train)}}},
      {"baselines", {{"ppl_k", c.baselines.ppl_k}}},
      {"serve", {{"host", c.serve.host}, {"port", c.serve.port}, {"router", c.serve.router}}}};
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file: " + path);
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw ConfigError("malformed config " + path + ": " + e.what());
  }
  return config_from_json(j);
}

inline std::string config_hash(const ExperimentConfig& c) {
  json j = config_to_json(c);
  j.erase("output_dir");
  j.erase("serve");
  return hex64(fnv1a64(j.dump()));
}

// ---------------------------------------------------------------------------
// Workspace and manifests.

inline std::string hash_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw MissingArtifact("cannot read " + p.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return hex64(fnv1a64(ss.str()));
}

inline const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> kStages = {"gen-data", "train-routers", "calibrate",
                                                   "attack", "train-guard", "eval", "report"};
  return kStages;
}

class Workspace {
 public:
  Workspace(ExperimentConfig cfg) : cfg_(std::move(cfg)) {
    root_ = cfg_.output_dir;
    fs::create_directories(root_);
  }

  const ExperimentConfig& config() const { return cfg_; }
  const fs::path& root() const { return root_; }
  std::uint64_t seed(std::string_view label) const { return derive_seed(cfg_.seed, label); }

  std::string path(std::string_view rel) const {
    const fs::path p = root_ / fs::path(rel);
    fs::create_directories(p.parent_path());
    return p.string();
  }

  void write_json(std::string_view rel, const json& j) const {
    std::ofstream os(path(rel), std::ios::binary);
    if (!os) throw Error("cannot write " + path(rel));
    os << j.dump(2) << '\n';
  }
  json read_json(std::string_view rel) const {
    std::ifstream is(root_ / fs::path(rel));
    if (!is) throw MissingArtifact("cannot read " + (root_ / fs::path(rel)).string());
    return json::parse(is);
  }

  void write_manifest(const std::string& stage, const std::vector<std::string>& outputs,
                      const json& extra = json::object()) const {
    json m;
    m["stage"] = stage;
    m["config_hash"] = config_hash(cfg_);
    m["seed"] = cfg_.seed;
    json out = json::object();
    for (const auto& o : outputs) out[o] = hash_file(root_ / o);
    m["outputs"] = out;
    m["info"] = extra;
    write_json("manifests/" + stage + ".json", m);
  }

  // Verifies an upstream stage's outputs against its manifest.
  void require_stage(const std::string& stage, const std::string& needed_by) const {
    const fs::path mp = root_ / "manifests" / (stage + ".json");
    auto fail = [&](const std::string& why) {
      throw MissingArtifact("stage '" + needed_by + "' needs the artifacts of stage '" + stage +
                            "' (" + why + "); run `rrw " + stage + "` first");
    };
    if (!fs::exists(mp)) fail("no manifest at " + mp.string());
    json m;
    try {
      m = read_json("manifests/" + stage + ".json");
    } catch (const std::exception& e) {
      fail(std::string("unreadable manifest: ") + e.what());
    }
    for (auto it = m["outputs"].begin(); it != m["outputs"].end(); ++it) {
      const fs::path p = root_ / it.key();
      if (!fs::exists(p)) fail("missing " + p.string());
      if (hash_file(p) != it.value().get<std::string>()) fail("stale or modified " + p.string());
    }
  }

 private:
  ExperimentConfig cfg_;
  fs::path root_;
};

// ---------------------------------------------------------------------------
// Shared loaders.

struct LoadedRouters {
  Vocabulary vocab;
  std::vector<std::unique_ptr<Router>> routers;
  std::vector<CalibratedThreshold> calibration;  // empty before calibrate

  const Router& get(RouterKind k) const {
    for (const auto& r : routers)
      if (r->kind() == k) return *r;
    throw ConfigError("router " + to_string(k) + " is not part of this experiment");
  }
  const TokenMeanRouter* llm() const {
    for (const auto& r : routers)
      if (r->kind() == RouterKind::LLM) return static_cast<const TokenMeanRouter*>(r.get());
    return nullptr;
  }
  double alpha(RouterKind k) const {
    for (const auto& c : calibration)
      if (c.router == to_string(k)) return c.alpha;
    throw Error("router " + to_string(k) + " is not calibrated");
  }
  std::vector<DeployedRouter> deployed() const {
    std::vector<DeployedRouter> out;
    for (std::size_t i = 0; i < routers.size(); ++i)
      out.push_back({routers[i].get(), i < calibration.size() ? std::optional(calibration[i]) : std::nullopt});
    return out;
  }
};

inline LoadedRouters load_routers(const Workspace& ws, bool with_calibration) {
  LoadedRouters lr;
  lr.vocab = Vocabulary::load(ws.path("corpus/vocab.txt"));
  for (auto k : ws.config().routers.kinds) {
    auto r = make_router(k, lr.vocab, ws.config().routers.train);
    r->from_checkpoint(Checkpoint::load(ws.path("routers/" + to_string(k) + ".ckpt")));
    lr.routers.push_back(std::move(r));
    if (with_calibration) {
      lr.calibration.push_back(
          ws.read_json("calibration/" + to_string(k) + ".json").get<CalibratedThreshold>());
    }
  }
  return lr;
}

struct TriggerRun {
  std::string id;
  std::string method;
  std::string target;
  std::string router;
  std::string trigger;
  std::vector<double> objective_trace;
  std::uint64_t seed = 0;
};

inline void to_json(json& j, const TriggerRun& r) {
  j = {{"id", r.id},           {"method", r.method},
       {"target", r.target},   {"router", r.router},
       {"trigger", r.trigger}, {"objective_trace", r.objective_trace},
       {"seed", r.seed}};
}
inline void from_json(const json& j, TriggerRun& r) {
  r.id = j.at("id").get<std::string>();
  r.method = j.at("method").get<std::string>();
  r.target = j.at("target").get<std::string>();
  r.router = j.at("router").get<std::string>();
  r.trigger = j.at("trigger").get<std::string>();
  r.objective_trace = j.at("objective_trace").get<std::vector<double>>();
  r.seed = j.at("seed").get<std::uint64_t>();
}

inline std::vector<Query> with_split(std::span<const Query> qs, Split s) {
  std::vector<Query> out;
  for (const auto& q : qs)
    if (q.split == s) out.push_back(q);
  return out;
}

inline std::vector<Query> with_complexity(std::span<const Query> qs, Complexity c) {
  std::vector<Query> out;
  for (const auto& q : qs)
    if (q.complexity == c) out.push_back(q);
  return out;
}

inline std::vector<Trigger> with_method(std::span<const Trigger> ts, TriggerMethod m) {
  std::vector<Trigger> out;
  for (const auto& t : ts)
    if (t.method == m) out.push_back(t);
  return out;
}

inline std::string prefixed(std::string_view trigger, std::string_view text) {
  return std::string(trigger) + " " + std::string(text);
}

// ---------------------------------------------------------------------------
// Stages.

inline void stage_gen_data(const Workspace& ws) {
  const auto& c = ws.config().corpus;
  auto router = generate_synthetic_corpus(ws.seed("router-corpus"), c.router_simple, c.router_complex,
                                          {c.noise_fraction, "r", "router-train"});
  for (auto& q : router) q.split = Split::Train;
  const auto prefs = synthesize_preferences(router, ws.seed("router-preferences"), c.preferences);
  const auto raw = generate_synthetic_corpus(ws.seed("raw-corpus"), c.raw_simple, c.raw_complex,
                                             {c.noise_fraction, "q", "raw"});
  auto eval = generate_synthetic_corpus(ws.seed("eval-corpus"), c.eval_simple, c.eval_complex,
                                        {c.noise_fraction, "e", "eval"});
  for (auto& q : eval) q.split = Split::Test;
  const auto vocab = Vocabulary::build(texts_of(router));

  write_jsonl<Query>(ws.path("corpus/router.jsonl"), router);
  write_jsonl<PreferenceRecord>(ws.path("corpus/router_prefs.jsonl"), prefs);
  write_jsonl<Query>(ws.path("corpus/raw.jsonl"), raw);
  write_jsonl<Query>(ws.path("corpus/eval.jsonl"), eval);
  vocab.save(ws.path("corpus/vocab.txt"));
  json info = {{"router", CorpusManifest::of(router, ws.seed("router-corpus"))},
               {"raw", CorpusManifest::of(raw, ws.seed("raw-corpus"))},
               {"eval", CorpusManifest::of(eval, ws.seed("eval-corpus"))},
               {"vocab_size", vocab.size()}};
  ws.write_manifest("gen-data",
                    {"corpus/router.jsonl", "corpus/router_prefs.jsonl", "corpus/raw.jsonl",
                     "corpus/eval.jsonl", "corpus/vocab.txt"},
                    info);
}

inline void stage_train_routers(const Workspace& ws) {
  ws.require_stage("gen-data", "train-routers");
  const auto router = read_jsonl<Query>(ws.path("corpus/router.jsonl"));
  const auto prefs = read_jsonl<PreferenceRecord>(ws.path("corpus/router_prefs.jsonl"));
  const auto vocab = Vocabulary::load(ws.path("corpus/vocab.txt"));
  std::vector<std::string> outputs;
  for (auto k : ws.config().routers.kinds) {
    RouterTrainConfig cfg = ws.config().routers.train;
    cfg.train.seed = ws.seed("router-" + to_string(k));
    auto r = make_router(k, vocab, cfg);
    r->train(router, prefs, cfg);
    const std::string rel = "routers/" + to_string(k) + ".ckpt";
    r->to_checkpoint().save(ws.path(rel));
    outputs.push_back(rel);
  }
  ws.write_manifest("train-routers", outputs);
}

inline std::vector<RouterScores> score_corpus(const LoadedRouters& lr, std::span<const Query> qs) {
  const auto texts = texts_of(qs);
  std::vector<RouterScores> out;
  for (std::size_t i = 0; i < lr.routers.size(); ++i) {
    RouterScores s;
    s.router = lr.routers[i]->id();
    s.win_rates = lr.routers[i]->win_rates(texts);
    if (i < lr.calibration.size()) s.calibration = lr.calibration[i];
    out.push_back(std::move(s));
  }
  return out;
}

inline void stage_calibrate(const Workspace& ws) {
  ws.require_stage("gen-data", "calibrate");
  ws.require_stage("train-routers", "calibrate");
  auto lr = load_routers(ws, false);
  const auto raw = read_jsonl<Query>(ws.path("corpus/raw.jsonl"));
  const std::string corpus_id = "raw:" + hash_file(ws.path("corpus/raw.jsonl"));
  auto scores = score_corpus(lr, raw);
  std::vector<std::string> outputs;
  json info = json::object();
  for (auto& s : scores) {
    s.calibration = calibrate_threshold(s.win_rates, s.router, corpus_id);
    const std::string rel = "calibration/" + s.router + ".json";
    ws.write_json(rel, *s.calibration);
    outputs.push_back(rel);
    info[s.router] = {{"alpha", s.calibration->alpha},
                      {"selection_rate", *selection_rate(s.win_rates, s.calibration->alpha, Target::Strong)}};
  }
  {
    std::ofstream os(ws.path("calibration/raw_scores.jsonl"), std::ios::binary);
    for (std::size_t i = 0; i < raw.size(); ++i) {
      json row = {{"id", raw[i].id}};
      for (const auto& s : scores) row[s.router] = s.win_rates[i];
      os << row.dump() << '\n';
    }
  }
  outputs.push_back("calibration/raw_scores.jsonl");
  const auto normal = select_normal_pool(raw, scores);
  const auto complex_pool = select_complex_pool(raw, scores);
  const auto splits = split_queries(normal, ws.seed("normal-split"));
  std::vector<Query> normal_split = splits.train;
  normal_split.insert(normal_split.end(), splits.val.begin(), splits.val.end());
  normal_split.insert(normal_split.end(), splits.test.begin(), splits.test.end());
  std::sort(normal_split.begin(), normal_split.end(),
            [](const Query& a, const Query& b) { return a.id < b.id; });
  write_jsonl<Query>(ws.path("pools/normal.jsonl"), normal_split);
  write_jsonl<Query>(ws.path("pools/complex.jsonl"), complex_pool);
  outputs.push_back("pools/normal.jsonl");
  outputs.push_back("pools/complex.jsonl");
  info["normal_pool"] = {{"size", normal.size()},
                         {"train", splits.train.size()},
                         {"val", splits.val.size()},
                         {"test", splits.test.size()}};
  info["complex_pool"] = {{"size", complex_pool.size()}};
  ws.write_manifest("calibrate", outputs, info);
}

inline std::vector<RouterScores> load_raw_scores(const Workspace& ws, const LoadedRouters& lr,
                                                 std::span<const Query> raw) {
  std::ifstream is(ws.path("calibration/raw_scores.jsonl"));
  if (!is) throw MissingArtifact("missing calibration/raw_scores.jsonl; run `rrw calibrate` first");
  std::vector<RouterScores> out;
  for (std::size_t i = 0; i < lr.routers.size(); ++i)
    out.push_back({lr.routers[i]->id(), {}, lr.calibration[i]});
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    const auto row = json::parse(line);
    if (n >= raw.size() || row.at("id").get<std::string>() != raw[n].id)
      throw MissingArtifact("raw scores out of sync with corpus; rerun `rrw calibrate`");
    for (auto& s : out) s.win_rates.push_back(row.at(s.router).get<double>());
    ++n;
  }
  return out;
}

// One attack batch. `index0` offsets run indices so batches never reuse seeds.
struct BatchSpec {
  TriggerMethod method;
  Target target;
  std::optional<RouterKind> router;  // gray-box victim; fixed to r_llm for white-box
  int count;
  int index0 = 0;
  int iterations = -1;
};

inline std::string method_code(TriggerMethod m) {
  switch (m) {
    case TriggerMethod::GrayBox: return "gb";
    case TriggerMethod::WhiteBox: return "wb";
    case TriggerMethod::BoxFree: return "bf";
  }
  return "gb";
}

// Gray-box runs rotate over the experiment's routers unless one is given.
inline std::vector<TriggerRun> run_attack_batch(const Workspace& ws, const LoadedRouters& lr,
                                                std::span<const Query> attacker_queries,
                                                std::span<const RouterScores> proxy_scores,
                                                std::span<const Query> raw, const BatchSpec& spec) {
  const auto& acfg = ws.config().attack;
  std::vector<TriggerRun> out;
  const std::string tcode = spec.target == Target::Strong ? "s" : "w";
  for (int i = 0; i < spec.count; ++i) {
    const int idx = spec.index0 + i;
    AttackConfig cfg = acfg.base;
    cfg.target = spec.target;
    if (spec.iterations >= 0) cfg.iterations = spec.iterations;
    cfg.seed = derive_seed(ws.seed("attack-" + method_code(spec.method) + "-" + tcode),
                           static_cast<std::uint64_t>(idx));
    TriggerRun run;
    run.method = to_string(spec.method);
    run.target = to_string(spec.target);
    run.seed = cfg.seed;
    if (spec.method == TriggerMethod::GrayBox) {
      const RouterKind k = spec.router ? *spec.router
                                       : ws.config().routers.kinds[static_cast<std::size_t>(idx) %
                                                                   ws.config().routers.kinds.size()];
      const auto res = graybox_optimize(lr.get(k), lr.vocab, cfg);
      run.router = to_string(k);
      run.trigger = res.text;
      run.objective_trace = res.trace.objective;
    } else if (spec.method == TriggerMethod::WhiteBox) {
      const auto* llm = lr.llm();
      if (!llm) throw ConfigError("white-box attacks need the r_llm router");
      const auto res = whitebox_optimize(*llm, attacker_queries, cfg);
      run.router = "r_llm";
      run.trigger = res.text;
      run.objective_trace = res.trace.objective;
    } else {
      LogOddsSummarizer summ;
      summ.n_tokens = acfg.boxfree_tokens;
      run.router = "proxies";
      run.trigger = boxfree_optimize(raw, proxy_scores, summ, spec.target, cfg.seed);
    }
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s-%s-%03d", method_code(spec.method).c_str(), tcode.c_str(), idx);
    run.id = buf;
    if (spec.method == TriggerMethod::GrayBox && spec.router) run.id += "-" + run.router;
    out.push_back(std::move(run));
  }
  return out;
}

inline void stage_attack(const Workspace& ws) {
  ws.require_stage("gen-data", "attack");
  ws.require_stage("train-routers", "attack");
  ws.require_stage("calibrate", "attack");
  const auto lr = load_routers(ws, true);
  const auto attacker = read_jsonl<Query>(ws.path("corpus/router.jsonl"));
  const auto raw = read_jsonl<Query>(ws.path("corpus/raw.jsonl"));
  const auto proxies = load_raw_scores(ws, lr, raw);
  const auto& acfg = ws.config().attack;
  const int n = acfg.triggers_per_method;

  std::vector<TriggerRun> bank_runs;
  for (auto m : {TriggerMethod::GrayBox, TriggerMethod::WhiteBox, TriggerMethod::BoxFree}) {
    auto b = run_attack_batch(ws, lr, attacker, proxies, raw, {m, Target::Strong, std::nullopt, n});
    bank_runs.insert(bank_runs.end(), b.begin(), b.end());
  }
  std::vector<Trigger> bank;
  for (const auto& r : bank_runs)
    bank.push_back({r.id, method_from_string(r.method), r.trigger, Split::Unassigned});
  const auto ts = split_triggers(bank, ws.seed("trigger-split"), static_cast<std::size_t>(n));
  std::vector<Trigger> bank_split = ts.train;
  bank_split.insert(bank_split.end(), ts.val.begin(), ts.val.end());
  bank_split.insert(bank_split.end(), ts.test.begin(), ts.test.end());
  std::sort(bank_split.begin(), bank_split.end(),
            [](const Trigger& a, const Trigger& b) { return a.id < b.id; });

  std::vector<TriggerRun> weak_runs;
  for (auto k : ws.config().routers.kinds) {
    auto b = run_attack_batch(ws, lr, attacker, proxies, raw,
                              {TriggerMethod::GrayBox, Target::Weak, k, acfg.batch_size, 0,
                               acfg.weak_iterations});
    weak_runs.insert(weak_runs.end(), b.begin(), b.end());
  }
  write_jsonl<Trigger>(ws.path("attacks/bank.jsonl"), bank_split);
  write_jsonl<TriggerRun>(ws.path("attacks/runs.jsonl"), bank_runs);
  write_jsonl<TriggerRun>(ws.path("attacks/weak_runs.jsonl"), weak_runs);
  ws.write_manifest("attack", {"attacks/bank.jsonl", "attacks/runs.jsonl", "attacks/weak_runs.jsonl"},
                    {{"bank", bank_split.size()}, {"weak_runs", weak_runs.size()}});
}

struct GuardData {
  std::vector<Query> normal_train, normal_val, normal_test;
  std::vector<Trigger> bank;
  std::map<Split, std::vector<Query>> adv;  // all methods mixed, aligned with normal split
};

inline GuardData load_guard_data(const Workspace& ws) {
  GuardData d;
  const auto normal = read_jsonl<Query>(ws.path("pools/normal.jsonl"));
  d.normal_train = with_split(normal, Split::Train);
  d.normal_val = with_split(normal, Split::Val);
  d.normal_test = with_split(normal, Split::Test);
  d.bank = read_jsonl<Trigger>(ws.path("attacks/bank.jsonl"));
  for (auto s : {Split::Train, Split::Val, Split::Test}) {
    std::vector<Trigger> ts;
    for (const auto& t : d.bank)
      if (t.split == s) ts.push_back(t);
    const auto& ns = s == Split::Train ? d.normal_train : s == Split::Val ? d.normal_val : d.normal_test;
    d.adv[s] = build_adversarial_set(ns, ts, ws.seed("adv-" + to_string(s)));
  }
  return d;
}

inline void stage_train_guard(const Workspace& ws) {
  ws.require_stage("calibrate", "train-guard");
  ws.require_stage("attack", "train-guard");
  const auto d = load_guard_data(ws);
  GuardConfig gcfg = ws.config().guard;
  gcfg.train.seed = ws.seed("guard");
  const auto train_pairs =
      build_pair_dataset(d.normal_train, d.adv.at(Split::Train), gcfg, ws.seed("pairs-train"));
  const auto val_pairs = build_pair_dataset(d.normal_val, d.adv.at(Split::Val), gcfg, ws.seed("pairs-val"));
  TrainLog log;
  const auto model = train_guard(train_pairs, val_pairs, gcfg, &log);
  model.to_checkpoint().save(ws.path("guard/siamese.ckpt"));

  GuardConfig scfg = gcfg;
  scfg.train.seed = ws.seed("single-query");
  const auto single = train_single_query_baseline(d.normal_train, d.adv.at(Split::Train), d.normal_val,
                                                  d.adv.at(Split::Val), scfg);
  single.to_checkpoint().save(ws.path("guard/single.ckpt"));

  const auto router = read_jsonl<Query>(ws.path("corpus/router.jsonl"));
  BigramLM lm(ws.config().baselines.ppl_k);
  lm.fit(texts_of(router));
  lm.save(ws.path("baselines/lm.txt"));
  const auto th = calibrate_ppl_threshold(lm, texts_of(d.normal_train), "normal-train");
  ws.write_json("baselines/ppl_threshold.json", {{"value", th.value}, {"corpus_id", th.corpus_id}});
  ws.write_json("guard/train_log.json", {{"epoch_loss", log.epoch_loss},
                                         {"val_f1", log.val_f1},
                                         {"best_epoch", log.best_epoch},
                                         {"best_val_f1", log.best_val_f1},
                                         {"train_pairs", train_pairs.size()},
                                         {"val_pairs", val_pairs.size()}});
  ws.write_manifest("train-guard",
                    {"guard/siamese.ckpt", "guard/single.ckpt", "guard/train_log.json",
                     "baselines/lm.txt", "baselines/ppl_threshold.json"});
}

// ---------------------------------------------------------------------------
// Evaluation.

namespace detail {

inline json opt_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

inline double mean_of(std::span<const double> v) {
  if (v.empty()) return 0.0;
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline std::vector<double> present(std::span<const std::optional<double>> v) {
  std::vector<double> out;
  for (const auto& x : v)
    if (x) out.push_back(*x);
  return out;
}

inline json dm_json(const DetectionMetrics& m) {
  return {{"accuracy", m.accuracy}, {"precision", m.precision}, {"recall", m.recall},
          {"f1", m.f1},             {"tp", m.tp},               {"fp", m.fp},
          {"tn", m.tn},             {"fn", m.fn}};
}

}  // namespace detail

// Everything the evaluation needs, loaded once.
struct EvalContext {
  const Workspace& ws;
  LoadedRouters lr;
  std::vector<Query> eval_corpus, raw, complex_pool, attacker;
  GuardData gd;
  std::vector<TriggerRun> runs, weak_runs;
  SiameseModel guard;
  SingleQueryModel single;
  std::unique_ptr<ReferencePool> refs;
  BigramLM lm;
  PPLThreshold ppl;
  std::uint64_t deploy_seed;
  int K;

  explicit EvalContext(const Workspace& w) : ws(w), lr(load_routers(w, true)) {
    eval_corpus = read_jsonl<Query>(ws.path("corpus/eval.jsonl"));
    raw = read_jsonl<Query>(ws.path("corpus/raw.jsonl"));
    attacker = read_jsonl<Query>(ws.path("corpus/router.jsonl"));
    complex_pool = read_jsonl<Query>(ws.path("pools/complex.jsonl"));
    gd = load_guard_data(ws);
    runs = read_jsonl<TriggerRun>(ws.path("attacks/runs.jsonl"));
    weak_runs = read_jsonl<TriggerRun>(ws.path("attacks/weak_runs.jsonl"));
    guard = SiameseModel::from_checkpoint(Checkpoint::load(ws.path("guard/siamese.ckpt")));
    single = SingleQueryModel::from_checkpoint(Checkpoint::load(ws.path("guard/single.ckpt")));
    refs = std::make_unique<ReferencePool>(guard, gd.normal_train);
    lm = BigramLM::load(ws.path("baselines/lm.txt"));
    const auto pj = ws.read_json("baselines/ppl_threshold.json");
    ppl = {pj.at("value").get<double>(), pj.at("corpus_id").get<std::string>()};
    deploy_seed = ws.seed("deploy");
    K = ws.config().guard.K;
  }

  bool blocked(const Query& q) const {
    return deploy_vote(guard, *refs, q.text, hex64(fnv1a64(q.text)), K, deploy_seed).decision ==
           GuardDecision::Block;
  }
};

// Per-trigger ASR/ACG of one trigger batch against one router.
inline json trigger_batch_effect(const Router& r, double alpha, std::span<const Query> qs,
                                 std::span<const std::string> triggers, Target dir,
                                 std::vector<double>* asr_values = nullptr,
                                 std::vector<double>* acg_values = nullptr) {
  const auto texts = texts_of(qs);
  const auto before = r.win_rates(texts);
  std::vector<std::optional<double>> asrs;
  std::vector<double> acgs;
  for (const auto& t : triggers) {
    std::vector<std::string> adv;
    for (const auto& q : texts) adv.push_back(prefixed(t, q));
    const auto after = r.win_rates(adv);
    asrs.push_back(asr(before, after, alpha, dir));
    acgs.push_back(acg(before, after));
  }
  const auto got = detail::present(asrs);
  if (asr_values) asr_values->insert(asr_values->end(), got.begin(), got.end());
  if (acg_values) acg_values->insert(acg_values->end(), acgs.begin(), acgs.end());
  json per = json::array();
  for (std::size_t i = 0; i < triggers.size(); ++i)
    per.push_back({{"asr", detail::opt_json(asrs[i])}, {"acg", acgs[i]}});
  return {{"mean_asr", got.empty() ? json(nullptr) : json(detail::mean_of(got))},
          {"max_asr", got.empty() ? json(nullptr) : json(*std::max_element(got.begin(), got.end()))},
          {"mean_acg", detail::mean_of(acgs)},
          {"n_queries", qs.size()},
          {"per_trigger", per}};
}

inline std::vector<std::string> run_triggers(std::span<const TriggerRun> runs, std::string_view method,
                                             std::string_view router, std::size_t limit) {
  std::vector<std::string> out;
  for (const auto& r : runs) {
    if (r.method != method) continue;
    if (!router.empty() && r.router != router) continue;
    out.push_back(r.trigger);
    if (out.size() == limit) break;
  }
  return out;
}

inline json eval_calibration(const EvalContext& c) {
  json out = json::object();
  const auto scores = score_corpus(c.lr, c.raw);
  for (const auto& s : scores) {
    const double sel = *selection_rate(s.win_rates, s.calibration->alpha, Target::Strong);
    out[s.router] = {{"alpha", s.calibration->alpha},
                     {"selection_rate", sel},
                     {"n", s.win_rates.size()},
                     {"corpus_id", s.calibration->corpus_id}};
  }
  return out;
}

inline json eval_attacks(const EvalContext& c, std::map<std::string, std::vector<double>>& cdf_groups) {
  const auto& cfg = c.ws.config();
  const auto batch = static_cast<std::size_t>(cfg.attack.batch_size);
  const auto simple = with_complexity(c.eval_corpus, Complexity::Simple);
  const auto complex_q = with_complexity(c.eval_corpus, Complexity::Complex);
  const auto strong = ModelSimulator::strong(c.ws.seed("sim-strong"));
  const auto weak = ModelSimulator::weak(c.ws.seed("sim-weak"));
  json out = json::object();
  for (const auto& rp : c.lr.routers) {
    const Router& r = *rp;
    const double alpha = c.lr.alpha(r.kind());
    json rj;
    for (auto m : {TriggerMethod::GrayBox, TriggerMethod::WhiteBox, TriggerMethod::BoxFree}) {
      const std::string router_filter = m == TriggerMethod::GrayBox ? r.id() : "";
      auto trig = run_triggers(c.runs, to_string(m), router_filter, batch);
      std::vector<double> asr_vals;
      json e = trigger_batch_effect(r, alpha, simple, trig, Target::Strong, &asr_vals);
      cdf_groups[to_string(m) + "/" + r.id()] = asr_vals;
      // benchmark score over the whole eval corpus, clean vs first trigger
      std::vector<ModelChoice> clean, attacked;
      for (const auto& q : c.eval_corpus) {
        clean.push_back(route(WinRate(r.win_rate(q.text)), alpha).model);
        attacked.push_back(route(WinRate(r.win_rate(prefixed(trig.front(), q.text))), alpha).model);
      }
      e["benchmark_clean"] = benchmark_score(c.eval_corpus, clean, &strong, &weak);
      e["benchmark_attacked"] = benchmark_score(c.eval_corpus, attacked, &strong, &weak);
      std::vector<double> wc, wa;
      for (const auto& q : c.eval_corpus) {
        wc.push_back(r.win_rate(q.text));
        wa.push_back(r.win_rate(prefixed(trig.front(), q.text)));
      }
      e["selection_clean"] = *selection_rate(wc, alpha, Target::Strong);
      e["selection_attacked"] = *selection_rate(wa, alpha, Target::Strong);
      rj[to_string(m)] = e;
    }
    const auto weak_trig = run_triggers(c.weak_runs, "graybox", r.id(), batch);
    rj["graybox_weak"] = trigger_batch_effect(r, alpha, complex_q, weak_trig, Target::Weak);
    out[r.id()] = rj;
  }
  return out;
}

// Balanced detection sets per method on the held-out normal test split.
inline std::map<TriggerMethod, std::vector<Query>> adversarial_test_sets(const EvalContext& c) {
  std::map<TriggerMethod, std::vector<Query>> out;
  for (auto m : {TriggerMethod::GrayBox, TriggerMethod::WhiteBox, TriggerMethod::BoxFree}) {
    std::vector<Trigger> ts;
    for (const auto& t : c.gd.bank)
      if (t.method == m && t.split == Split::Test) ts.push_back(t);
    out[m] = build_adversarial_set(c.gd.normal_test, ts, c.ws.seed("adv-test-" + to_string(m)));
  }
  return out;
}

inline json eval_detection(const EvalContext& c, const std::map<TriggerMethod, std::vector<Query>>& adv_sets) {
  json out = json::object();
  std::vector<int> benign_pred;
  for (const auto& q : c.gd.normal_test) benign_pred.push_back(c.blocked(q) ? 1 : 0);
  std::size_t benign_blocks = 0;
  for (int p : benign_pred) benign_blocks += static_cast<std::size_t>(p);
  out["benign_block_rate"] = static_cast<double>(benign_blocks) / static_cast<double>(benign_pred.size());
  out["benign_n"] = benign_pred.size();
  for (const auto& [m, adv] : adv_sets) {
    std::vector<int> pred = benign_pred, ppl_pred, single_pred, allpos, y(benign_pred.size(), 0);
    for (const auto& q : c.gd.normal_test) {
      ppl_pred.push_back(ppl_filter(c.lm, c.ppl, q.text) == GuardDecision::Block);
      single_pred.push_back(c.single.prob(q.text) > 0.5);
    }
    for (const auto& q : adv) {
      pred.push_back(c.blocked(q) ? 1 : 0);
      ppl_pred.push_back(ppl_filter(c.lm, c.ppl, q.text) == GuardDecision::Block);
      single_pred.push_back(c.single.prob(q.text) > 0.5);
      y.push_back(1);
    }
    allpos.assign(y.size(), 1);
    std::size_t ppl_adv_blocks = 0;
    for (std::size_t i = benign_pred.size(); i < ppl_pred.size(); ++i) ppl_adv_blocks += ppl_pred[i];
    out[to_string(m)] = {
        {"guard", detail::dm_json(detection_metrics(pred, y))},
        {"ppl", detail::dm_json(detection_metrics(ppl_pred, y))},
        {"ppl_block_rate_adv", static_cast<double>(ppl_adv_blocks) / static_cast<double>(adv.size())},
        {"single_query", detail::dm_json(detection_metrics(single_pred, y))},
        {"all_positive", detail::dm_json(detection_metrics(allpos, y))},
        {"n", y.size()}};
  }
  return out;
}

// ASR on the adversarial test sets without a filter, behind the guard, behind
// the PPL filter, and under the multi-router vote.
inline json eval_mitigation(const EvalContext& c, const std::map<TriggerMethod, std::vector<Query>>& adv_sets) {
  json out = json::object();
  std::vector<DeployedRouter> deployed = c.lr.deployed();
  for (const auto& [m, adv] : adv_sets) {
    std::vector<char> blocked, ppl_blocked;
    for (const auto& q : adv) {
      blocked.push_back(c.blocked(q));
      ppl_blocked.push_back(ppl_filter(c.lm, c.ppl, q.text) == GuardDecision::Block);
    }
    json mj = json::object();
    for (const auto& rp : c.lr.routers) {
      const double alpha = c.lr.alpha(rp->kind());
      std::vector<std::string> clean_texts;
      for (const auto& q : c.gd.normal_test) clean_texts.push_back(q.text);
      const auto before = rp->win_rates(clean_texts);
      const auto after = rp->win_rates(texts_of(adv));
      std::vector<double> after_guard = after, after_ppl = after;
      for (std::size_t i = 0; i < adv.size(); ++i) {
        // a blocked query never reaches the router, so it cannot be rerouted
        if (blocked[i]) after_guard[i] = before[i];
        if (ppl_blocked[i]) after_ppl[i] = before[i];
      }
      mj[rp->id()] = {{"asr_no_defense", detail::opt_json(asr(before, after, alpha, Target::Strong))},
                      {"asr_guard", detail::opt_json(asr(before, after_guard, alpha, Target::Strong))},
                      {"asr_ppl", detail::opt_json(asr(before, after_ppl, alpha, Target::Strong))}};
    }
    // multi-router majority vote as a defense: success iff the vote flips Weak -> Strong
    std::size_t eligible = 0, flipped = 0;
    for (std::size_t i = 0; i < adv.size(); ++i) {
      if (multi_router_route(deployed, c.gd.normal_test[i].text) != ModelChoice::Weak) continue;
      ++eligible;
      flipped += multi_router_route(deployed, adv[i].text) == ModelChoice::Strong;
    }
    mj["multi_router"] = {{"asr", eligible ? json(static_cast<double>(flipped) / static_cast<double>(eligible))
                                           : json(nullptr)}};
    out[to_string(m)] = mj;
  }
  return out;
}

// Complex-pool benign queries against adversarial test queries, balanced.
inline json eval_ood(const EvalContext& c, const std::map<TriggerMethod, std::vector<Query>>& adv_sets) {
  std::vector<Query> adv_all;
  for (const auto& [m, adv] : adv_sets) adv_all.insert(adv_all.end(), adv.begin(), adv.end());
  auto benign = detail::keyed_shuffle(std::span<const Query>(c.complex_pool), c.ws.seed("ood-benign"));
  auto adv = detail::keyed_shuffle(std::span<const Query>(adv_all), c.ws.seed("ood-adv"));
  const std::size_t n = std::min(benign.size(), adv.size());
  if (n == 0) return {{"n", 0}};
  benign.resize(n);
  adv.resize(n);
  std::vector<int> y, g, s;
  std::size_t benign_blocked = 0;
  for (const auto& q : benign) {
    y.push_back(0);
    g.push_back(c.blocked(q));
    benign_blocked += static_cast<std::size_t>(g.back());
    s.push_back(c.single.prob(q.text) > 0.5);
  }
  for (const auto& q : adv) {
    y.push_back(1);
    g.push_back(c.blocked(q));
    s.push_back(c.single.prob(q.text) > 0.5);
  }
  return {{"n_per_class", n},
          {"guard", detail::dm_json(detection_metrics(g, y))},
          {"single_query", detail::dm_json(detection_metrics(s, y))},
          {"benign_block_rate", static_cast<double>(benign_blocked) / static_cast<double>(n)}};
}

inline json eval_adaptive(const EvalContext& c, const std::map<TriggerMethod, std::vector<Query>>& adv_sets) {
  const auto& cfg = c.ws.config();
  GuardScorer scorer(c.guard, *c.refs, c.K, c.deploy_seed);
  json runs = json::array();
  std::vector<double> gp_plain, gp_adaptive, asr_plain, asr_adapt;
  (void)adv_sets;
  auto post_guard_asr = [&](const Router& r, double alpha, const std::string& trigger) {
    std::vector<double> before, after;
    for (const auto& q : c.gd.normal_test) {
      const double b = r.win_rate(q.text);
      Query aq = q;
      aq.text = prefixed(trigger, q.text);
      before.push_back(b);
      after.push_back(c.blocked(aq) ? b : r.win_rate(aq.text));
    }
    return asr(before, after, alpha, Target::Strong);
  };
  for (int s = 0; s < cfg.attack.adaptive_seeds; ++s) {
    const RouterKind k = cfg.routers.kinds[static_cast<std::size_t>(s) % cfg.routers.kinds.size()];
    const Router& r = c.lr.get(k);
    AttackConfig ac = cfg.attack.base;
    ac.target = Target::Strong;
    ac.seed = derive_seed(c.ws.seed("adaptive-graybox"), static_cast<std::uint64_t>(s));
    const auto plain = graybox_optimize(r, c.lr.vocab, ac);
    const auto adapt = adaptive_graybox(r, scorer, c.lr.vocab, ac, cfg.attack.adaptive_penalty);
    const double gp0 = scorer.adversarial_prob(plain.text);
    const double gp1 = scorer.adversarial_prob(adapt.text);
    gp_plain.push_back(gp0);
    gp_adaptive.push_back(gp1);
    const auto a0 = post_guard_asr(r, c.lr.alpha(k), plain.text);
    const auto a1 = post_guard_asr(r, c.lr.alpha(k), adapt.text);
    if (a0) asr_plain.push_back(*a0);
    if (a1) asr_adapt.push_back(*a1);
    runs.push_back({{"seed_index", s},
                    {"router", to_string(k)},
                    {"plain_trigger", plain.text},
                    {"adaptive_trigger", adapt.text},
                    {"plain_guard_prob", gp0},
                    {"adaptive_guard_prob", gp1},
                    {"plain_objective", plain.trace.objective.back()},
                    {"adaptive_objective", adapt.trace.objective.back()},
                    {"plain_post_guard_asr", detail::opt_json(a0)},
                    {"adaptive_post_guard_asr", detail::opt_json(a1)}});
  }
  json wb = json::array();
  std::vector<double> wb_asr;
  if (const auto* llm = c.lr.llm()) {
    for (int s = 0; s < cfg.attack.adaptive_whitebox_runs; ++s) {
      AttackConfig ac = cfg.attack.base;
      ac.target = Target::Strong;
      ac.batch_queries = cfg.attack.adaptive_whitebox_batch;
      ac.seed = derive_seed(c.ws.seed("adaptive-whitebox"), static_cast<std::uint64_t>(s));
      const auto res = adaptive_whitebox(*llm, scorer, c.attacker, ac, cfg.attack.adaptive_weights);
      const auto a = post_guard_asr(*llm, c.lr.alpha(RouterKind::LLM), res.text);
      if (a) wb_asr.push_back(*a);
      wb.push_back({{"trigger", res.text},
                    {"guard_prob", scorer.adversarial_prob(res.text)},
                    {"objective", res.trace.objective.back()},
                    {"post_guard_asr", detail::opt_json(a)}});
    }
  }
  return {{"graybox_runs", runs},
          {"mean_guard_prob_plain", detail::mean_of(gp_plain)},
          {"mean_guard_prob_adaptive", detail::mean_of(gp_adaptive)},
          {"mean_post_guard_asr_graybox_plain", detail::mean_of(asr_plain)},
          {"mean_post_guard_asr_graybox_adaptive", detail::mean_of(asr_adapt)},
          {"whitebox_runs", wb},
          {"mean_post_guard_asr_whitebox_adaptive", detail::mean_of(wb_asr)}};
}

inline json eval_patterns(const EvalContext& c, const std::map<TriggerMethod, std::vector<Query>>& adv_sets) {
  std::map<std::string, std::vector<std::string>> groups;
  groups["normal"] = texts_of(c.gd.normal_test);
  for (const auto& [m, adv] : adv_sets) groups[to_string(m)] = texts_of(adv);
  const auto stats = trigger_pattern_stats(groups, [&](const std::string& t) { return c.lm.perplexity(t); });
  json out = json::object();
  for (const auto& [g, s] : stats) out[g] = {{"mean_ppl", s.mean_ppl}, {"mean_length", s.mean_length}, {"n", s.n}};
  out["ppl_threshold"] = c.ppl.value;
  std::size_t cal_blocks = 0;
  for (const auto& q : c.gd.normal_train) cal_blocks += ppl_filter(c.lm, c.ppl, q.text) == GuardDecision::Block;
  out["ppl_calibration_block_rate"] = static_cast<double>(cal_blocks) / static_cast<double>(c.gd.normal_train.size());
  return out;
}

inline json eval_pca(const EvalContext& c, const std::map<TriggerMethod, std::vector<Query>>& adv_sets,
                     std::vector<std::pair<std::string, Eigen::Vector2d>>& points) {
  std::vector<std::pair<std::string, const Query*>> items;
  for (const auto& q : c.gd.normal_test) items.emplace_back("normal", &q);
  for (const auto& [m, adv] : adv_sets)
    for (const auto& q : adv) items.emplace_back(to_string(m), &q);
  Eigen::MatrixXd X(static_cast<Eigen::Index>(items.size()), c.guard.dim());
  for (std::size_t i = 0; i < items.size(); ++i)
    X.row(static_cast<Eigen::Index>(i)) = c.guard.encode(items[i].second->text).transpose();
  const auto p = pca_2d(X);
  std::map<std::string, std::pair<Eigen::Vector2d, int>> centroids;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const Eigen::Vector2d xy = p.coords.row(static_cast<Eigen::Index>(i)).transpose();
    points.emplace_back(items[i].first, xy);
    auto& [sum, n] = centroids[items[i].first];
    if (n == 0) sum.setZero();
    sum += xy;
    ++n;
  }
  json cj = json::object();
  for (const auto& [g, sn] : centroids)
    cj[g] = {sn.first.x() / sn.second, sn.first.y() / sn.second};
  return {{"explained_variance", {p.explained[0], p.explained[1]}}, {"centroids", cj}};
}

inline void stage_eval(const Workspace& ws) {
  ws.require_stage("gen-data", "eval");
  ws.require_stage("calibrate", "eval");
  ws.require_stage("attack", "eval");
  ws.require_stage("train-guard", "eval");
  EvalContext c(ws);
  std::map<std::string, std::vector<double>> cdf_groups;
  const auto adv_sets = adversarial_test_sets(c);
  std::vector<std::pair<std::string, Eigen::Vector2d>> points;
  json report;
  report["config_hash"] = config_hash(ws.config());
  report["seed"] = ws.config().seed;
  report["calibration"] = eval_calibration(c);
  report["attacks"] = eval_attacks(c, cdf_groups);
  report["detection"] = eval_detection(c, adv_sets);
  report["mitigation"] = eval_mitigation(c, adv_sets);
  report["ood"] = eval_ood(c, adv_sets);
  report["adaptive"] = eval_adaptive(c, adv_sets);
  report["patterns"] = eval_patterns(c, adv_sets);
  report["pca"] = eval_pca(c, adv_sets, points);
  report["guard_training"] = ws.read_json("guard/train_log.json");
  ws.write_json("reports/eval.json", report);
  {
    std::ofstream os(ws.path("reports/asr_cdf.tsv"), std::ios::binary);
    os << "group\tasr\tcumulative\n";
    for (const auto& [g, vals] : cdf_groups)
      for (const auto& pt : asr_cdf(vals)) os << g << '\t' << pt.value << '\t' << pt.cumulative << '\n';
  }
  {
    std::ofstream os(ws.path("reports/pca.tsv"), std::ios::binary);
    os.precision(10);
    os << "group\tpc1\tpc2\n";
    for (const auto& [g, xy] : points) os << g << '\t' << xy.x() << '\t' << xy.y() << '\n';
  }
  ws.write_manifest("eval", {"reports/eval.json", "reports/asr_cdf.tsv", "reports/pca.tsv"});
}

// ---------------------------------------------------------------------------
// Report tables.

namespace detail {
inline std::string fmt(const json& v, int prec = 3) {
  if (v.is_null()) return "n/a";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v.get<double>());
  return buf;
}
}  // namespace detail

inline void stage_report(const Workspace& ws) {
  ws.require_stage("eval", "report");
  const auto r = ws.read_json("reports/eval.json");
  using detail::fmt;
  std::vector<std::string> outputs;
  auto write = [&](const std::string& rel, const std::string& body) {
    std::ofstream os(ws.path(rel), std::ios::binary);
    os << body;
    outputs.push_back(rel);
  };
  const std::vector<std::string> methods = {"graybox", "whitebox", "boxfree"};
  {
    std::ostringstream os;
    os << "router,alpha,selection_rate,n\n";
    for (auto it = r["calibration"].begin(); it != r["calibration"].end(); ++it)
      os << it.key() << ',' << fmt(it.value()["alpha"], 5) << ',' << fmt(it.value()["selection_rate"], 4)
         << ',' << it.value()["n"].get<std::size_t>() << '\n';
    write("reports/calibration.csv", os.str());
  }
  {
    std::ostringstream os;
    os << "router,method,mean_asr,max_asr,mean_acg,benchmark_clean,benchmark_attacked,selection_clean,selection_attacked\n";
    for (auto it = r["attacks"].begin(); it != r["attacks"].end(); ++it) {
      for (const auto& m : methods) {
        const auto& e = it.value()[m];
        os << it.key() << ',' << m << ',' << fmt(e["mean_asr"]) << ',' << fmt(e["max_asr"]) << ','
           << fmt(e["mean_acg"]) << ',' << fmt(e["benchmark_clean"], 1) << ','
           << fmt(e["benchmark_attacked"], 1) << ',' << fmt(e["selection_clean"]) << ','
           << fmt(e["selection_attacked"]) << '\n';
      }
    }
    write("reports/cost_escalation.csv", os.str());
  }
  {
    std::ostringstream os;
    os << "router,mean_asr_weak,mean_acg_weak\n";
    for (auto it = r["attacks"].begin(); it != r["attacks"].end(); ++it)
      os << it.key() << ',' << fmt(it.value()["graybox_weak"]["mean_asr"]) << ','
         << fmt(it.value()["graybox_weak"]["mean_acg"]) << '\n';
    write("reports/quality_hijacking.csv", os.str());
  }
  {
    std::ostringstream os;
    os << "method,detector,accuracy,precision,recall,f1\n";
    for (const auto& m : methods)
      for (const auto& d : {"guard", "single_query", "ppl", "all_positive"}) {
        const auto& e = r["detection"][m][d];
        os << m << ',' << d << ',' << fmt(e["accuracy"]) << ',' << fmt(e["precision"]) << ','
           << fmt(e["recall"]) << ',' << fmt(e["f1"]) << '\n';
      }
    os << "benign_block_rate," << fmt(r["detection"]["benign_block_rate"], 4) << "\n";
    write("reports/detection.csv", os.str());
  }
  {
    std::ostringstream os;
    os << "method,router,asr_no_defense,asr_ppl,asr_guard\n";
    for (const auto& m : methods) {
      for (auto it = r["mitigation"][m].begin(); it != r["mitigation"][m].end(); ++it) {
        if (it.key() == "multi_router") {
          os << m << ",multi_router_vote," << fmt(it.value()["asr"]) << ",,\n";
          continue;
        }
        os << m << ',' << it.key() << ',' << fmt(it.value()["asr_no_defense"]) << ','
           << fmt(it.value()["asr_ppl"]) << ',' << fmt(it.value()["asr_guard"]) << '\n';
      }
    }
    write("reports/mitigation.csv", os.str());
  }
  {
    std::ostringstream os;
    os << "setting,guard_f1,guard_accuracy,single_query_f1,single_query_accuracy\n";
    os << "ood_complex_pool," << fmt(r["ood"]["guard"]["f1"]) << ',' << fmt(r["ood"]["guard"]["accuracy"]) << ','
       << fmt(r["ood"]["single_query"]["f1"]) << ',' << fmt(r["ood"]["single_query"]["accuracy"]) << '\n';
    for (const auto& m : methods)
      os << "in_distribution_" << m << ',' << fmt(r["detection"][m]["guard"]["f1"]) << ','
         << fmt(r["detection"][m]["guard"]["accuracy"]) << ',' << fmt(r["detection"][m]["single_query"]["f1"])
         << ',' << fmt(r["detection"][m]["single_query"]["accuracy"]) << '\n';
    write("reports/ablation.csv", os.str());
  }
  {
    std::ostringstream os;
    os << "attack,mean_guard_prob,mean_post_guard_asr\n";
    os << "graybox," << fmt(r["adaptive"]["mean_guard_prob_plain"]) << ','
       << fmt(r["adaptive"]["mean_post_guard_asr_graybox_plain"]) << '\n';
    os << "graybox_adaptive," << fmt(r["adaptive"]["mean_guard_prob_adaptive"]) << ','
       << fmt(r["adaptive"]["mean_post_guard_asr_graybox_adaptive"]) << '\n';
    os << "whitebox_adaptive,," << fmt(r["adaptive"]["mean_post_guard_asr_whitebox_adaptive"]) << '\n';
    write("reports/adaptive.csv", os.str());
  }
  {
    std::ostringstream os;
    os << "group,mean_ppl,mean_length\n";
    for (const auto& g : {"normal", "graybox", "whitebox", "boxfree"})
      os << g << ',' << fmt(r["patterns"][g]["mean_ppl"], 1) << ',' << fmt(r["patterns"][g]["mean_length"], 1) << '\n';
    write("reports/trigger_patterns.csv", os.str());
  }
  ws.write_manifest("report", outputs);
}

inline void run_stage(const Workspace& ws, std::string_view stage) {
  if (stage == "gen-data") return stage_gen_data(ws);
  if (stage == "train-routers") return stage_train_routers(ws);
  if (stage == "calibrate") return stage_calibrate(ws);
  if (stage == "attack") return stage_attack(ws);
  if (stage == "train-guard") return stage_train_guard(ws);
  if (stage == "eval") return stage_eval(ws);
  if (stage == "report") return stage_report(ws);
  throw ConfigError("unknown stage: " + std::string(stage));
}

inline void run_pipeline(const Workspace& ws, std::ostream* progress = nullptr) {
  for (const auto& s : stage_names()) {
    const auto t0 = std::chrono::steady_clock::now();
    run_stage(ws, s);
    if (progress) {
      const double secs =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      *progress << "[rrw] " << s << " done in " << secs << " s\n";
    }
  }
}

}  // namespace rrw
