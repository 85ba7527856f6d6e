#pragma once

// Trigger optimization: gray-box hill climbing on observed win rates,
// white-box HotFlip on a differentiable token-mean router, the box-free
// summarizer attack, and the guard-aware adaptive variants.

#include <algorithm>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "rrw/corpus.hpp"
#include "rrw/embedding.hpp"
#include "rrw/pools.hpp"
#include "rrw/routers.hpp"

namespace rrw {

struct AttackConfig {
  Target target = Target::Strong;
  int trigger_length = 10;
  int iterations = 200;
  int neighbors = 32;
  int topk = 16;
  int batch_queries = 256;
  std::uint64_t seed = 0;

  void validate() const {
    if (trigger_length < 1) throw ConfigError("trigger_length must be >= 1");
    if (topk < 1) throw ConfigError("topk must be >= 1");
    if (neighbors < 0) throw ConfigError("neighbors must be >= 0");
    if (iterations < 0) throw ConfigError("iterations must be >= 0");
  }
};

struct AttackTrace {
  std::vector<double> objective;  // entry 0 is the initial trigger
  std::vector<int> final_ids;
  AttackConfig config;
};

struct AttackResult {
  std::vector<int> ids;
  std::string text;
  AttackTrace trace;
};

// Target-oriented transform of a strong-model win rate.
inline double target_value(double win_rate, Target t) {
  return t == Target::Strong ? win_rate : 1.0 - win_rate;
}

// Something that assigns an adversarial probability to a query text.
class AdversarialScorer {
 public:
  virtual ~AdversarialScorer() = default;
  virtual double adversarial_prob(std::string_view text) const = 0;
};

// Token ids eligible for triggers: every vocabulary entry except UNK.
inline std::vector<int> trigger_token_pool(const Vocabulary& vocab) {
  std::vector<int> pool;
  for (int i = 1; i < static_cast<int>(vocab.size()); ++i) pool.push_back(i);
  if (pool.empty()) throw Error("vocabulary has no usable trigger tokens");
  return pool;
}

inline std::vector<int> random_trigger(std::span<const int> pool, int length, Rng& rng) {
  std::vector<int> ids;
  for (int i = 0; i < length; ++i) ids.push_back(pool[rng.below(pool.size())]);
  return ids;
}

// ---------------------------------------------------------------------------
// Gray-box.

// One random edit: substitution, insertion or deletion, keeping the length
// inside [min_len, max_len].
inline std::vector<int> random_neighbour(const std::vector<int>& ids,
                                         std::span<const int> pool, std::size_t min_len,
                                         std::size_t max_len, Rng& rng) {
  std::vector<int> moves{0};
  if (ids.size() < max_len) moves.push_back(1);
  if (ids.size() > std::max<std::size_t>(min_len, 1)) moves.push_back(2);
  std::vector<int> out = ids;
  switch (moves[rng.below(moves.size())]) {
    case 0: out[rng.below(out.size())] = pool[rng.below(pool.size())]; break;
    case 1: {
      const auto pos = rng.below(out.size() + 1);
      out.insert(out.begin() + static_cast<std::ptrdiff_t>(pos), pool[rng.below(pool.size())]);
      break;
    }
    default: out.erase(out.begin() + static_cast<std::ptrdiff_t>(rng.below(out.size()))); break;
  }
  return out;
}

using TriggerObjective = std::function<double(const std::vector<int>&)>;

// Greedy hill climbing with the incumbent always in the candidate set.
inline AttackResult graybox_optimize(const TriggerObjective& objective,
                                     std::span<const int> pool,
                                     const AttackConfig& cfg) {
  cfg.validate();
  if (pool.empty()) throw Error("graybox: empty token pool");
  Rng rng(derive_seed(cfg.seed, "graybox"));
  const auto min_len = static_cast<std::size_t>(cfg.trigger_length);
  const auto max_len = static_cast<std::size_t>(2 * cfg.trigger_length);
  AttackResult res;
  res.ids = random_trigger(pool, cfg.trigger_length, rng);
  double best = objective(res.ids);
  res.trace.objective.push_back(best);
  for (int it = 0; it < cfg.iterations; ++it) {
    std::vector<int> step_best;
    double step_val = best;
    for (int c = 0; c < cfg.neighbors; ++c) {
      auto cand = random_neighbour(res.ids, pool, min_len, max_len, rng);
      const double v = objective(cand);
      if (v > step_val) {
        step_val = v;
        step_best = std::move(cand);
      }
    }
    if (!step_best.empty()) {
      res.ids = std::move(step_best);
      best = step_val;
    }
    res.trace.objective.push_back(best);
  }
  res.trace.final_ids = res.ids;
  res.trace.config = cfg;
  return res;
}

// Objective seen by the gray-box attacker: the target-side win rate of the
// trigger text alone.
inline TriggerObjective router_trigger_objective(const Router& router,
                                                 const Vocabulary& vocab, Target t) {
  return [&router, &vocab, t](const std::vector<int>& ids) {
    return target_value(router.win_rate(vocab.decode(ids)), t);
  };
}

inline AttackResult graybox_optimize(const Router& router, const Vocabulary& vocab,
                                     const AttackConfig& cfg) {
  const auto pool = trigger_token_pool(vocab);
  auto res = graybox_optimize(router_trigger_objective(router, vocab, cfg.target), pool, cfg);
  res.text = vocab.decode(res.ids);
  return res;
}

// Gray-box with the guard's adversarial probability as a penalty.
inline AttackResult adaptive_graybox(const Router& router, const AdversarialScorer& guard,
                                     const Vocabulary& vocab, const AttackConfig& cfg,
                                     double alpha = 0.5) {
  const auto base = router_trigger_objective(router, vocab, cfg.target);
  TriggerObjective obj = base;
  if (alpha != 0.0) {
    obj = [&, base](const std::vector<int>& ids) {
      return base(ids) - alpha * guard.adversarial_prob(vocab.decode(ids));
    };
  }
  const auto pool = trigger_token_pool(vocab);
  auto res = graybox_optimize(obj, pool, cfg);
  res.text = vocab.decode(res.ids);
  return res;
}

// ---------------------------------------------------------------------------
// White-box.

// A differentiable scalar score of a mean-pooled token embedding.
class PooledScorer {
 public:
  virtual ~PooledScorer() = default;
  virtual const Mat& rows() const = 0;  // |V| x d token table
  virtual double score(const Vec& pooled, Vec* grad) const = 0;
};

// Target-side win rate of the token-mean router.
class RouterPooledScorer final : public PooledScorer {
 public:
  RouterPooledScorer(const TokenMeanRouter& r, Target t) : r_(r), t_(t) {}
  const Mat& rows() const override { return r_.table().rows; }
  double score(const Vec& pooled, Vec* grad) const override {
    if (!grad) return target_value(r_.win_rate_from_pooled(pooled), t_);
    const double w = r_.win_rate_and_grad(pooled, *grad);
    if (t_ == Target::Weak) *grad = -*grad;
    return target_value(w, t_);
  }

 private:
  const TokenMeanRouter& r_;
  Target t_;
};

// score = a^T pooled + b.
class LinearPooledScorer final : public PooledScorer {
 public:
  LinearPooledScorer(Mat rows, Vec a, double b) : rows_(std::move(rows)), a_(std::move(a)), b_(b) {}
  const Mat& rows() const override { return rows_; }
  double score(const Vec& pooled, Vec* grad) const override {
    if (grad) *grad = a_;
    return a_.dot(pooled) + b_;
  }

 private:
  Mat rows_;
  Vec a_;
  double b_;
};

struct FlipCandidate {
  int position;
  int token;
  double gain;  // first-order estimate
};

// Batch objective over fixed queries, with per-query row sums cached so a
// trigger evaluation is O(batch * (L + network)).
class HotFlipProblem {
 public:
  using ExactTerm = std::function<double(const std::vector<int>&)>;

  HotFlipProblem(const PooledScorer& scorer, std::span<const TokenSeq> queries,
                 double weight = 1.0, ExactTerm extra = {})
      : scorer_(scorer), weight_(weight), extra_(std::move(extra)) {
    if (queries.empty()) throw Error("hotflip: empty query batch");
    const auto d = scorer.rows().cols();
    for (const auto& q : queries) {
      Vec s = Vec::Zero(d);
      for (int id : q.ids) {
        if (id < 0 || id >= scorer.rows().rows()) throw Error("hotflip: token index out of range");
        s += scorer.rows().row(id).transpose();
      }
      sums_.push_back(std::move(s));
      lengths_.push_back(static_cast<double>(q.ids.size()));
    }
  }

  Vec trigger_sum(const std::vector<int>& ids) const {
    Vec s = Vec::Zero(scorer_.rows().cols());
    for (int id : ids) s += scorer_.rows().row(id).transpose();
    return s;
  }

  // weight * mean_q score(t ⊕ q) + extra(t).
  double objective(const std::vector<int>& ids) const {
    const Vec ts = trigger_sum(ids);
    const double n_t = static_cast<double>(ids.size());
    double total = 0;
    for (std::size_t i = 0; i < sums_.size(); ++i)
      total += scorer_.score((ts + sums_[i]) / (n_t + lengths_[i]), nullptr);
    double v = weight_ * total / static_cast<double>(sums_.size());
    if (extra_) v += extra_(ids);
    return v;
  }

  // Gradient of the differentiable part with respect to each trigger
  // token's embedding row. Mean pooling makes it identical across positions.
  Vec row_gradient(const std::vector<int>& ids) const {
    const Vec ts = trigger_sum(ids);
    const double n_t = static_cast<double>(ids.size());
    Vec g = Vec::Zero(ts.size());
    Vec gq;
    for (std::size_t i = 0; i < sums_.size(); ++i) {
      const double n = n_t + lengths_[i];
      scorer_.score((ts + sums_[i]) / n, &gq);
      g += gq / n;
    }
    return weight_ * g / static_cast<double>(sums_.size());
  }

  // All single flips scored by (e_v - e_{t_i})^T g, best first; ties by
  // (position, token).
  std::vector<FlipCandidate> rank_flips(const std::vector<int>& ids,
                                        std::span<const int> pool) const {
    const Vec g = row_gradient(ids);
    const Vec s = scorer_.rows() * g;
    std::vector<FlipCandidate> out;
    for (std::size_t p = 0; p < ids.size(); ++p) {
      for (int v : pool) {
        if (v == ids[p]) continue;
        out.push_back({static_cast<int>(p), v, s[v] - s[ids[p]]});
      }
    }
    std::sort(out.begin(), out.end(), [](const FlipCandidate& a, const FlipCandidate& b) {
      if (a.gain != b.gain) return a.gain > b.gain;
      if (a.position != b.position) return a.position < b.position;
      return a.token < b.token;
    });
    return out;
  }

 private:
  const PooledScorer& scorer_;
  double weight_;
  ExactTerm extra_;
  std::vector<Vec> sums_;
  std::vector<double> lengths_;
};

struct HotFlipStep {
  std::optional<FlipCandidate> chosen;
  double objective;
};

// Re-evaluates the top-k first-order candidates exactly and returns the best
// one if it strictly improves the objective.
inline HotFlipStep hotflip_step(const HotFlipProblem& prob, const std::vector<int>& ids,
                                double current, std::span<const int> pool, int topk) {
  const auto ranked = prob.rank_flips(ids, pool);
  const auto k = std::min<std::size_t>(static_cast<std::size_t>(topk), ranked.size());
  std::vector<FlipCandidate> top(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(k));
  std::sort(top.begin(), top.end(), [](const FlipCandidate& a, const FlipCandidate& b) {
    if (a.position != b.position) return a.position < b.position;
    return a.token < b.token;
  });
  HotFlipStep step{std::nullopt, current};
  for (const auto& c : top) {
    auto cand = ids;
    cand[static_cast<std::size_t>(c.position)] = c.token;
    const double v = prob.objective(cand);
    if (v > step.objective) {
      step.objective = v;
      step.chosen = c;
    }
  }
  return step;
}

inline AttackResult hotflip_optimize(const HotFlipProblem& prob, std::span<const int> pool,
                                     const AttackConfig& cfg) {
  cfg.validate();
  Rng rng(derive_seed(cfg.seed, "whitebox"));
  AttackResult res;
  res.ids = random_trigger(pool, cfg.trigger_length, rng);
  double cur = prob.objective(res.ids);
  res.trace.objective.push_back(cur);
  for (int it = 0; it < cfg.iterations; ++it) {
    const auto step = hotflip_step(prob, res.ids, cur, pool, cfg.topk);
    if (!step.chosen) break;
    res.ids[static_cast<std::size_t>(step.chosen->position)] = step.chosen->token;
    cur = step.objective;
    res.trace.objective.push_back(cur);
  }
  res.trace.final_ids = res.ids;
  res.trace.config = cfg;
  return res;
}

// Deterministic batch of up to batch_queries training queries.
inline std::vector<Query> sample_attack_batch(std::span<const Query> train, int batch,
                                              std::uint64_t seed) {
  auto shuffled = detail::keyed_shuffle(train, derive_seed(seed, "attack-batch"));
  if (static_cast<int>(shuffled.size()) > batch) shuffled.resize(static_cast<std::size_t>(batch));
  return shuffled;
}

inline std::vector<TokenSeq> encode_all(std::span<const Query> qs, const Vocabulary& vocab) {
  std::vector<TokenSeq> out;
  for (const auto& q : qs) out.push_back(vocab.encode(q.text));
  return out;
}

inline AttackResult whitebox_optimize(const TokenMeanRouter& router,
                                      std::span<const Query> train_queries,
                                      const AttackConfig& cfg) {
  if (!router.trained()) throw Error("whitebox: router is not differentiable/trained");
  const auto batch = sample_attack_batch(train_queries, cfg.batch_queries, cfg.seed);
  const auto seqs = encode_all(batch, router.vocab());
  RouterPooledScorer scorer(router, cfg.target);
  HotFlipProblem prob(scorer, seqs);
  const auto pool = trigger_token_pool(router.vocab());
  auto res = hotflip_optimize(prob, pool, cfg);
  res.text = router.vocab().decode(res.ids);
  return res;
}

// -log(p_benign + eps); lower when the guard finds the text less adversarial.
inline double defense_loss(double benign_prob, double eps = 1e-8) {
  return -std::log(benign_prob + eps);
}

struct AdaptiveWeights {
  double alpha = 0.5;
  double beta = 0.5;
  double eps = 1e-8;
};

// Exact L_combined = alpha * (-E[target win]) + beta * E[L_defense(t ⊕ q)].
inline double combined_loss(const HotFlipProblem& router_part,
                            const std::function<double(const std::vector<int>&)>& mean_defense,
                            const std::vector<int>& ids, const AdaptiveWeights& w) {
  return -router_part.objective(ids) * w.alpha + w.beta * mean_defense(ids);
}

// HotFlip on -L_combined. The guard reads hashed text features, not the
// router's token rows, so its term enters only the exact re-evaluation.
inline AttackResult adaptive_whitebox(const TokenMeanRouter& router, const AdversarialScorer& guard,
                                      std::span<const Query> train_queries,
                                      const AttackConfig& cfg, AdaptiveWeights w = {}) {
  if (!router.trained()) throw Error("whitebox: router is not differentiable/trained");
  const auto batch = sample_attack_batch(train_queries, cfg.batch_queries, cfg.seed);
  const auto seqs = encode_all(batch, router.vocab());
  const auto& vocab = router.vocab();
  RouterPooledScorer scorer(router, cfg.target);
  HotFlipProblem::ExactTerm extra;
  if (w.beta != 0.0) {
    extra = [&, w](const std::vector<int>& ids) {
      const std::string t = vocab.decode(ids);
      double total = 0;
      for (const auto& q : batch)
        total += defense_loss(1.0 - guard.adversarial_prob(t + " " + q.text), w.eps);
      return -w.beta * total / static_cast<double>(batch.size());
    };
  }
  HotFlipProblem prob(scorer, seqs, w.alpha, extra);
  const auto pool = trigger_token_pool(vocab);
  auto res = hotflip_optimize(prob, pool, cfg);
  res.text = vocab.decode(res.ids);
  return res;
}

// ---------------------------------------------------------------------------
// Box-free.

class Summarizer {
 public:
  virtual ~Summarizer() = default;
  virtual std::string summarize(std::span<const Query> favoured,
                                std::span<const Query> rest, std::uint64_t seed) const = 0;
};

// Picks characteristic tokens of the favoured set by smoothed log-odds
// against the rest and fills "Consider: <tokens>. Now answer:".
class LogOddsSummarizer final : public Summarizer {
 public:
  int n_tokens = 10;
  int candidate_pool = 30;   // tokens sampled from the top of the ranking
  double subsample = 0.5;    // share of each set seen per seed
  double smoothing = 0.5;

  std::vector<std::pair<std::string, double>> rank(std::span<const Query> favoured,
                                                   std::span<const Query> rest) const {
    std::map<std::string, double> cf, cr;
    double nf = 0, nr = 0;
    for (const auto& q : favoured)
      for (auto& t : tokenize_words(q.text)) cf[t] += 1, nf += 1;
    for (const auto& q : rest)
      for (auto& t : tokenize_words(q.text)) cr[t] += 1, nr += 1;
    std::set<std::string> vocab;
    for (const auto& [t, c] : cf) vocab.insert(t);
    for (const auto& [t, c] : cr) vocab.insert(t);
    const double v = static_cast<double>(vocab.size());
    std::vector<std::pair<std::string, double>> out;
    for (const auto& t : vocab) {
      if (t.size() < 3 || !std::all_of(t.begin(), t.end(), [](unsigned char c) { return std::isalpha(c); }))
        continue;
      const double a = cf.count(t) ? cf.at(t) : 0.0;
      const double b = cr.count(t) ? cr.at(t) : 0.0;
      const double lo = std::log((a + smoothing) / (nf + smoothing * v)) -
                        std::log((b + smoothing) / (nr + smoothing * v));
      out.emplace_back(t, lo);
    }
    std::sort(out.begin(), out.end(), [](const auto& x, const auto& y) {
      if (x.second != y.second) return x.second > y.second;
      return x.first < y.first;
    });
    return out;
  }

  std::string summarize(std::span<const Query> favoured, std::span<const Query> rest,
                        std::uint64_t seed) const override {
    if (favoured.empty()) throw Error("boxfree: empty optimization question set");
    auto sub = [&](std::span<const Query> qs, std::string_view label) {
      auto s = detail::keyed_shuffle(qs, derive_seed(seed, label));
      const auto keep = std::max<std::size_t>(1, static_cast<std::size_t>(subsample * s.size()));
      if (s.size() > keep) s.resize(keep);
      return s;
    };
    const auto f = sub(favoured, "boxfree-fav");
    const auto r = rest.empty() ? std::vector<Query>{} : sub(rest, "boxfree-rest");
    auto ranked = rank(f, r);
    if (ranked.empty()) throw Error("boxfree: no candidate tokens");
    const auto pool_n = std::min<std::size_t>(ranked.size(), static_cast<std::size_t>(candidate_pool));
    ranked.resize(pool_n);
    std::vector<std::size_t> idx(pool_n);
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(derive_seed(seed, "boxfree-pick"));
    rng.shuffle(idx);
    idx.resize(std::min<std::size_t>(idx.size(), static_cast<std::size_t>(n_tokens)));
    std::sort(idx.begin(), idx.end());  // keep log-odds order
    std::string out = "Consider:";
    for (auto i : idx) out += " " + ranked[i].first;
    out += ". Now answer:";
    return out;
  }
};

// Target-favoring set across all proxies and its complement.
struct OptimizationSet {
  std::vector<Query> favoured, rest;
};

inline OptimizationSet optimization_set(std::span<const Query> corpus,
                                        std::span<const RouterScores> proxies, Target t) {
  OptimizationSet s;
  s.favoured = t == Target::Strong ? select_complex_pool(corpus, proxies)
                                   : select_normal_pool(corpus, proxies);
  std::unordered_set<std::string> in;
  for (const auto& q : s.favoured) in.insert(q.id);
  for (const auto& q : corpus)
    if (!in.count(q.id)) s.rest.push_back(q);
  return s;
}

inline std::string boxfree_optimize(std::span<const Query> corpus,
                                    std::span<const RouterScores> proxies,
                                    const Summarizer& summarizer, Target t,
                                    std::uint64_t seed) {
  const auto s = optimization_set(corpus, proxies, t);
  if (s.favoured.empty()) throw Error("boxfree: optimization question set is empty");
  return summarizer.summarize(s.favoured, s.rest, seed);
}

}  // namespace rrw
