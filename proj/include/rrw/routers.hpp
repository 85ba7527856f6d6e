#pragma once

// The four win-rate estimators, the threshold routing rule and median
// calibration.

#include <algorithm>
#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "rrw/corpus.hpp"
#include "rrw/embedding.hpp"
#include "rrw/nn.hpp"

namespace rrw {

enum class ModelChoice { Strong, Weak };
using Target = ModelChoice;

inline std::string to_string(ModelChoice m) {
  return m == ModelChoice::Strong ? "Strong" : "Weak";
}

class WinRate {
 public:
  explicit WinRate(double v) : v_(v) {
    if (!(v >= 0.0 && v <= 1.0)) {
      throw Error("WinRate out of [0,1]: " + std::to_string(v));
    }
  }
  double value() const { return v_; }
  operator double() const { return v_; }

 private:
  double v_;
};

struct RouterDecision {
  ModelChoice model;
  WinRate win_rate;
  double threshold;
};

inline RouterDecision route(WinRate w, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw Error("route: alpha outside [0,1]");
  }
  return {w.value() >= alpha ? ModelChoice::Strong : ModelChoice::Weak, w, alpha};
}

struct CalibratedThreshold {
  std::string router;
  double alpha = 0.5;
  std::string corpus_id;
};

inline void to_json(nlohmann::json& j, const CalibratedThreshold& c) {
  j = {{"router", c.router}, {"alpha", c.alpha}, {"corpus_id", c.corpus_id}};
}
inline void from_json(const nlohmann::json& j, CalibratedThreshold& c) {
  c.router = j.at("router").get<std::string>();
  c.alpha = j.at("alpha").get<double>();
  c.corpus_id = j.at("corpus_id").get<std::string>();
}

// sorted[n/2]. With the >= routing rule this sends exactly half of an
// even-sized, tie-free calibration set to Strong.
inline double median_threshold(std::vector<double> values) {
  if (values.empty()) throw Error("median of empty set");
  std::sort(values.begin(), values.end());
  return values[values.size() / 2];
}

inline CalibratedThreshold calibrate_threshold(std::span<const double> win_rates,
                                               std::string router_id,
                                               std::string corpus_id) {
  if (win_rates.empty()) throw Error("calibrate_threshold: empty corpus");
  return {std::move(router_id),
          median_threshold(std::vector<double>(win_rates.begin(), win_rates.end())),
          std::move(corpus_id)};
}

struct BTCoefficients {
  double xi_strong = 0.0;
  double xi_weak = 0.0;
};

inline constexpr double kXiClamp = 10.0;

struct WeightedOutcome {
  double weight;
  Outcome outcome;
};

inline double outcome_score(Outcome o) {
  switch (o) {
    case Outcome::StrongWins: return 1.0;
    case Outcome::Tie: return 0.5;
    case Outcome::WeakWins: return 0.0;
  }
  return 0.5;
}

// Similarity-weighted Bradley-Terry log-likelihood of xi_s (xi_w = 0);
// a tie counts as half a win for each side.
inline double bt_log_likelihood(std::span<const WeightedOutcome> obs, double xi_s) {
  double ll = 0;
  const double ls = -std::log1p(std::exp(-xi_s));  // log sigma(xi)
  const double lw = -std::log1p(std::exp(xi_s));   // log (1 - sigma(xi))
  for (const auto& o : obs) {
    const double s = outcome_score(o.outcome);
    ll += o.weight * (s * ls + (1 - s) * lw);
  }
  return ll;
}

// Maximizes the weighted BT likelihood by bisection on its derivative,
// which is monotone decreasing in xi_s. Result clamped to [-10, 10].
inline BTCoefficients fit_bradley_terry(std::span<const WeightedOutcome> obs) {
  double total = 0;
  for (const auto& o : obs) {
    if (o.weight < 0) throw Error("fit_bradley_terry: negative weight");
    total += o.weight;
  }
  if (total <= 0) return {};
  auto deriv = [&](double xi) {
    const double p = ops::sigmoid(xi);
    double d = 0;
    for (const auto& o : obs) d += o.weight * (outcome_score(o.outcome) - p);
    return d;
  };
  double lo = -kXiClamp, hi = kXiClamp;
  if (deriv(hi) >= 0) return {hi, 0.0};
  if (deriv(lo) <= 0) return {lo, 0.0};
  for (int it = 0; it < 200 && hi - lo > 1e-13; ++it) {
    const double mid = 0.5 * (lo + hi);
    (deriv(mid) > 0 ? lo : hi) = mid;
  }
  return {0.5 * (lo + hi), 0.0};
}

inline double bt_win_rate(const BTCoefficients& c) {
  return 1.0 / (1.0 + std::exp(c.xi_weak - c.xi_strong));
}

// R_CLS reads the strong-win component of [p_strong, p_tie, p_weak].
inline double cls_win_rate_from_probs(const Vec& p) {
  if (p.size() != 3) throw Error("cls: expected 3 outcome probabilities");
  return std::clamp(p[0], 0.0, 1.0);
}

inline double mf_win_rate_from_delta(double delta_strong, double delta_weak) {
  return ops::sigmoid(delta_strong - delta_weak);
}

// 1 - sum_{i >= tau} p_i over scores 1..5.
inline double llm_win_rate_from_probs(const Vec& p, int tau) {
  if (p.size() != 5) throw Error("llm: expected 5 score probabilities");
  if (tau < 1 || tau > 5) throw Error("llm: tau must be in [1,5]");
  double tail = 0;
  for (int i = tau; i <= 5; ++i) tail += p[i - 1];
  return std::clamp(1.0 - tail, 0.0, 1.0);
}

// ---------------------------------------------------------------------------

enum class RouterKind { CLS, MF, SW, LLM };

inline std::string to_string(RouterKind k) {
  switch (k) {
    case RouterKind::CLS: return "r_cls";
    case RouterKind::MF: return "r_mf";
    case RouterKind::SW: return "r_sw";
    case RouterKind::LLM: return "r_llm";
  }
  return "r_cls";
}
inline RouterKind router_kind_from_string(std::string_view s) {
  if (s == "r_cls") return RouterKind::CLS;
  if (s == "r_mf") return RouterKind::MF;
  if (s == "r_sw") return RouterKind::SW;
  if (s == "r_llm") return RouterKind::LLM;
  throw ConfigError("unknown router: " + std::string(s));
}
inline constexpr std::array<RouterKind, 4> kAllRouters = {
    RouterKind::CLS, RouterKind::MF, RouterKind::SW, RouterKind::LLM};

struct RouterTrainConfig {
  TrainConfig train{.lr_head = 5e-3, .lr_backbone = 5e-3,
                    .weight_decay_head = 1e-4, .weight_decay_backbone = 1e-4,
                    .batch_size = 64, .clip_norm = 1.0, .warmup_steps = 0,
                    .max_epochs = 12, .seed = 0};
  int hidden = 32;
  int mf_dim = 16;
  int k_retrieve = 16;
  int tau = 4;
  double llm_score_noise = 0.10;
};

class Router {
 public:
  virtual ~Router() = default;
  virtual RouterKind kind() const = 0;
  std::string id() const { return to_string(kind()); }
  virtual double win_rate(std::string_view text) const = 0;

  virtual std::vector<double> win_rates(std::span<const std::string> texts) const {
    std::vector<double> out;
    out.reserve(texts.size());
    for (const auto& t : texts) out.push_back(win_rate(t));
    return out;
  }

  virtual void train(std::span<const Query> corpus,
                     std::span<const PreferenceRecord> prefs,
                     const RouterTrainConfig& cfg) = 0;
  virtual Checkpoint to_checkpoint() const = 0;
  virtual void from_checkpoint(const Checkpoint& ck) = 0;
  bool trained() const { return trained_; }

 protected:
  void require_trained() const {
    if (!trained_) throw Error(id() + ": router is not trained");
  }
  bool trained_ = false;
};

namespace detail {

// Outcome per corpus query, in corpus order; throws if any is missing.
inline std::vector<Outcome> aligned_outcomes(std::span<const Query> corpus,
                                             std::span<const PreferenceRecord> prefs) {
  std::unordered_map<std::string, Outcome> by_id;
  for (const auto& p : prefs) by_id.emplace(p.query_id, p.outcome);
  std::vector<Outcome> out;
  out.reserve(corpus.size());
  for (const auto& q : corpus) {
    auto it = by_id.find(q.id);
    if (it == by_id.end()) throw Error("preferences do not cover query " + q.id);
    out.push_back(it->second);
  }
  return out;
}

inline Mat hashed_matrix(std::span<const std::string> texts) {
  Mat m(kHashedDim, static_cast<Eigen::Index>(texts.size()));
  for (std::size_t i = 0; i < texts.size(); ++i)
    m.col(static_cast<Eigen::Index>(i)) = embed_hashed(texts[i]);
  return m;
}

// Deterministic minibatch order per epoch.
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(derive_seed(seed, static_cast<std::uint64_t>(epoch)));
  rng.shuffle(idx);
  return idx;
}

inline int outcome_class(Outcome o) {
  return o == Outcome::StrongWins ? 0 : o == Outcome::Tie ? 1 : 2;
}

}  // namespace detail

// 3-way outcome classifier over the hashed query vector.
class ClsRouter final : public Router {
 public:
  RouterKind kind() const override { return RouterKind::CLS; }

  Vec probs(std::string_view text) const {
    require_trained();
    return ops::softmax(net_.forward(Mat(embed_hashed(text)))).col(0);
  }
  double win_rate(std::string_view text) const override {
    return cls_win_rate_from_probs(probs(text));
  }
  std::vector<double> win_rates(std::span<const std::string> texts) const override {
    require_trained();
    const Mat p = ops::softmax(net_.forward(detail::hashed_matrix(texts)));
    std::vector<double> out(texts.size());
    for (std::size_t i = 0; i < texts.size(); ++i)
      out[i] = cls_win_rate_from_probs(p.col(static_cast<Eigen::Index>(i)));
    return out;
  }

  void train(std::span<const Query> corpus, std::span<const PreferenceRecord> prefs,
             const RouterTrainConfig& cfg) override {
    if (corpus.size() < 2) throw Error("r_cls: insufficient data");
    const auto outcomes = detail::aligned_outcomes(corpus, prefs);
    const Mat x = detail::hashed_matrix(texts_of(corpus));
    Rng rng(derive_seed(cfg.train.seed, "r_cls-init"));
    net_ = DenseNet::make({kHashedDim, cfg.hidden, 3},
                          {Activation::Tanh, Activation::Identity},
                          ParamGroup::Head, rng);
    DenseGrads grads = net_.zero_grads();
    ParamList params;
    net_.register_params("cls", grads, params);
    AdamW opt(cfg.train);
    for (int epoch = 0; epoch < cfg.train.max_epochs; ++epoch) {
      const auto order = detail::epoch_order(corpus.size(), cfg.train.seed, epoch);
      for (std::size_t b = 0; b < order.size(); b += cfg.train.batch_size) {
        const std::size_t e = std::min(order.size(), b + cfg.train.batch_size);
        const auto n = static_cast<Eigen::Index>(e - b);
        Mat xb(kHashedDim, n), target = Mat::Zero(3, n);
        for (Eigen::Index i = 0; i < n; ++i) {
          xb.col(i) = x.col(static_cast<Eigen::Index>(order[b + i]));
          target(detail::outcome_class(outcomes[order[b + i]]), i) = 1.0;
        }
        ForwardCache cache;
        const Mat p = ops::softmax(net_.forward(xb, &cache));
        zero_grads(params);
        net_.backward(cache, (p - target) / static_cast<double>(n), grads);
        opt.step(params);
      }
    }
    trained_ = true;
  }

  Checkpoint to_checkpoint() const override {
    require_trained();
    Checkpoint ck;
    ck.meta["kind"] = id();
    ck.put_net("cls", net_);
    return ck;
  }
  void from_checkpoint(const Checkpoint& ck) override {
    if (ck.meta_at("kind") != id()) throw Error("checkpoint is not r_cls");
    net_ = ck.get_net("cls");
    trained_ = true;
  }

 private:
  DenseNet net_;
};

// Bilinear matrix-factorization scorer delta(M, q) = m_M^T W e_q + b_M.
class MfRouter final : public Router {
 public:
  RouterKind kind() const override { return RouterKind::MF; }

  double delta_difference(const Vec& e) const {
    require_trained();
    return (m_strong_ - m_weak_).dot(W_ * e) + (b_(0) - b_(1));
  }
  std::pair<double, double> deltas(std::string_view text) const {
    require_trained();
    const Vec we = W_ * embed_hashed(text);
    return {m_strong_.dot(we) + b_(0), m_weak_.dot(we) + b_(1)};
  }
  double win_rate(std::string_view text) const override {
    const auto [ds, dw] = deltas(text);
    return mf_win_rate_from_delta(ds, dw);
  }
  std::vector<double> win_rates(std::span<const std::string> texts) const override {
    require_trained();
    const Vec diff = (W_.transpose() * (m_strong_ - m_weak_));
    const Mat x = detail::hashed_matrix(texts);
    const Vec z = (x.transpose() * diff).array() + (b_(0) - b_(1));
    std::vector<double> out(texts.size());
    for (std::size_t i = 0; i < texts.size(); ++i)
      out[i] = ops::sigmoid(z[static_cast<Eigen::Index>(i)]);
    return out;
  }

  // Logistic loss on sigma(delta_s - delta_w) against StrongWins vs
  // WeakWins; tie records carry no binary label and are skipped.
  void train(std::span<const Query> corpus, std::span<const PreferenceRecord> prefs,
             const RouterTrainConfig& cfg) override {
    const auto outcomes = detail::aligned_outcomes(corpus, prefs);
    std::vector<std::size_t> usable;
    for (std::size_t i = 0; i < corpus.size(); ++i)
      if (outcomes[i] != Outcome::Tie) usable.push_back(i);
    if (usable.size() < 2) throw Error("r_mf: insufficient data");
    const Mat x = detail::hashed_matrix(texts_of(corpus));
    Rng rng(derive_seed(cfg.train.seed, "r_mf-init"));
    const int d = cfg.mf_dim;
    W_.resize(d, kHashedDim);
    const double lim = std::sqrt(6.0 / (d + kHashedDim));
    for (Eigen::Index i = 0; i < W_.size(); ++i) W_.data()[i] = rng.uniform(-lim, lim);
    m_strong_.resize(d);
    m_weak_.resize(d);
    for (int i = 0; i < d; ++i) {
      m_strong_[i] = rng.normal() * 0.5;
      m_weak_[i] = rng.normal() * 0.5;
    }
    b_ = Vec::Zero(2);
    Mat gW = Mat::Zero(d, kHashedDim);
    Vec gms = Vec::Zero(d), gmw = Vec::Zero(d), gb = Vec::Zero(2);
    ParamList params{make_slot("mf.W", W_, gW, ParamGroup::Backbone),
                     make_slot("mf.m_strong", m_strong_, gms, ParamGroup::Head),
                     make_slot("mf.m_weak", m_weak_, gmw, ParamGroup::Head),
                     make_slot("mf.b", b_, gb, ParamGroup::Head)};
    AdamW opt(cfg.train);
    for (int epoch = 0; epoch < cfg.train.max_epochs; ++epoch) {
      const auto order = detail::epoch_order(usable.size(), cfg.train.seed, epoch);
      for (std::size_t b = 0; b < order.size(); b += cfg.train.batch_size) {
        const std::size_t e = std::min(order.size(), b + cfg.train.batch_size);
        const double inv_n = 1.0 / static_cast<double>(e - b);
        zero_grads(params);
        const Vec dm = m_strong_ - m_weak_;
        for (std::size_t i = b; i < e; ++i) {
          const auto qi = usable[order[i]];
          const auto xq = x.col(static_cast<Eigen::Index>(qi));
          const Vec we = W_ * xq;
          const double z = dm.dot(we) + b_(0) - b_(1);
          const double y = outcomes[qi] == Outcome::StrongWins ? 1.0 : 0.0;
          const double g = (ops::sigmoid(z) - y) * inv_n;
          gW.noalias() += g * dm * xq.transpose();
          gms += g * we;
          gmw -= g * we;
          gb(0) += g;
          gb(1) -= g;
        }
        opt.step(params);
      }
    }
    trained_ = true;
  }

  Checkpoint to_checkpoint() const override {
    require_trained();
    Checkpoint ck;
    ck.meta["kind"] = id();
    ck.put("mf.W", W_, ParamGroup::Backbone);
    ck.put("mf.m_strong", m_strong_);
    ck.put("mf.m_weak", m_weak_);
    ck.put("mf.b", b_);
    return ck;
  }
  void from_checkpoint(const Checkpoint& ck) override {
    if (ck.meta_at("kind") != id()) throw Error("checkpoint is not r_mf");
    W_ = ck.at("mf.W").values;
    m_strong_ = ck.vec("mf.m_strong");
    m_weak_ = ck.vec("mf.m_weak");
    b_ = ck.vec("mf.b");
    trained_ = true;
  }

  // Direct construction for tests.
  void set_parameters(Mat W, Vec m_strong, Vec m_weak, double b_strong, double b_weak) {
    W_ = std::move(W);
    m_strong_ = std::move(m_strong);
    m_weak_ = std::move(m_weak);
    b_ = Vec(2);
    b_ << b_strong, b_weak;
    trained_ = true;
  }

 private:
  Mat W_;
  Vec m_strong_, m_weak_, b_;
};

// Training-free similarity-weighted Bradley-Terry router.
class SwRouter final : public Router {
 public:
  RouterKind kind() const override { return RouterKind::SW; }

  explicit SwRouter(int k_retrieve = 16) : k_(k_retrieve) {
    if (k_ < 1) throw Error("r_sw: k_retrieve must be >= 1");
  }

  void index(std::span<const std::string> texts, std::span<const Outcome> outcomes) {
    if (texts.size() != outcomes.size()) throw Error("r_sw: store size mismatch");
    store_ = detail::hashed_matrix(texts);
    outcomes_.assign(outcomes.begin(), outcomes.end());
    trained_ = true;
  }

  std::size_t store_size() const { return outcomes_.size(); }
  int k_retrieve() const { return k_; }

  // Top-k neighbours with weights max(cos, 0); ties by store index.
  std::vector<WeightedOutcome> neighbours(const Vec& e) const {
    if (outcomes_.empty()) throw Error("r_sw: empty preference store");
    std::vector<WeightedOutcome> out;
    if (e.norm() == 0) return out;
    const Vec sims = store_.transpose() * e;  // unit vectors, so cosines
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(sims.size()));
    std::iota(idx.begin(), idx.end(), Eigen::Index{0});
    const auto k = std::min<std::size_t>(static_cast<std::size_t>(k_), idx.size());
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                      [&](Eigen::Index a, Eigen::Index b) {
                        if (sims[a] != sims[b]) return sims[a] > sims[b];
                        return a < b;
                      });
    for (std::size_t i = 0; i < k; ++i)
      out.push_back({std::max(0.0, sims[idx[i]]), outcomes_[static_cast<std::size_t>(idx[i])]});
    return out;
  }

  double win_rate(std::string_view text) const override {
    require_trained();
    if (outcomes_.empty()) throw Error("r_sw: empty preference store");
    return bt_win_rate(fit_bradley_terry(neighbours(embed_hashed(text))));
  }

  void train(std::span<const Query> corpus, std::span<const PreferenceRecord> prefs,
             const RouterTrainConfig& cfg) override {
    if (corpus.empty()) throw Error("r_sw: empty preference store");
    k_ = cfg.k_retrieve;
    const auto outcomes = detail::aligned_outcomes(corpus, prefs);
    index(texts_of(corpus), outcomes);
  }

  Checkpoint to_checkpoint() const override {
    require_trained();
    Checkpoint ck;
    ck.meta["kind"] = id();
    ck.meta["k_retrieve"] = std::to_string(k_);
    ck.put("sw.store", store_);
    Vec o(static_cast<Eigen::Index>(outcomes_.size()));
    for (std::size_t i = 0; i < outcomes_.size(); ++i)
      o[static_cast<Eigen::Index>(i)] = detail::outcome_class(outcomes_[i]);
    ck.put("sw.outcomes", o);
    return ck;
  }
  void from_checkpoint(const Checkpoint& ck) override {
    if (ck.meta_at("kind") != id()) throw Error("checkpoint is not r_sw");
    k_ = std::stoi(ck.meta_at("k_retrieve"));
    store_ = ck.at("sw.store").values;
    const Vec o = ck.vec("sw.outcomes");
    outcomes_.clear();
    for (Eigen::Index i = 0; i < o.size(); ++i) {
      const int c = static_cast<int>(o[i]);
      outcomes_.push_back(c == 0 ? Outcome::StrongWins : c == 1 ? Outcome::Tie : Outcome::WeakWins);
    }
    trained_ = true;
  }

 private:
  int k_;
  Mat store_;  // kHashedDim x N
  std::vector<Outcome> outcomes_;
};

// Score-predictor router: trainable token table, mean pooling, MLP over
// five weak-model quality scores. Differentiable with respect to token rows.
class TokenMeanRouter final : public Router {
 public:
  RouterKind kind() const override { return RouterKind::LLM; }

  TokenMeanRouter() = default;
  TokenMeanRouter(Vocabulary vocab, int tau = 4) : vocab_(std::move(vocab)), tau_(tau) {
    if (tau < 1 || tau > 5) throw Error("r_llm: tau must be in [1,5]");
  }

  const Vocabulary& vocab() const { return vocab_; }
  const EmbeddingTable& table() const { return table_; }
  EmbeddingTable& table() { return table_; }
  const DenseNet& head() const { return net_; }
  int tau() const { return tau_; }
  void set_tau(int tau) {
    if (tau < 1 || tau > 5) throw Error("r_llm: tau must be in [1,5]");
    tau_ = tau;
  }

  Vec pooled(const TokenSeq& seq) const {
    return embed_tokens(seq, table_).pooled;
  }
  Vec probs_from_pooled(const Vec& pooled) const {
    require_trained();
    return ops::softmax(net_.forward(Mat(pooled))).col(0);
  }
  double win_rate_from_pooled(const Vec& pooled) const {
    return llm_win_rate_from_probs(probs_from_pooled(pooled), tau_);
  }
  // Win rate and its gradient with respect to the pooled vector.
  double win_rate_and_grad(const Vec& pooled, Vec& grad) const {
    require_trained();
    ForwardCache cache;
    const Mat p = ops::softmax(net_.forward(Mat(pooled), &cache));
    Mat gp = Mat::Zero(5, 1);
    for (int i = 0; i < tau_ - 1; ++i) gp(i, 0) = 1.0;  // win = sum_{i<tau} p_i
    DenseGrads scratch = net_.zero_grads();
    grad = net_.backward(cache, ops::softmax_backward(p, gp), scratch).col(0);
    return llm_win_rate_from_probs(p.col(0), tau_);
  }

  double win_rate(std::string_view text) const override {
    return win_rate_from_pooled(pooled(vocab_.encode(text)));
  }
  std::vector<double> win_rates(std::span<const std::string> texts) const override {
    require_trained();
    Mat pooled_all(table_.dim(), static_cast<Eigen::Index>(texts.size()));
    for (std::size_t i = 0; i < texts.size(); ++i)
      pooled_all.col(static_cast<Eigen::Index>(i)) = pooled(vocab_.encode(texts[i]));
    const Mat p = ops::softmax(net_.forward(pooled_all));
    std::vector<double> out(texts.size());
    for (std::size_t i = 0; i < texts.size(); ++i)
      out[i] = llm_win_rate_from_probs(p.col(static_cast<Eigen::Index>(i)), tau_);
    return out;
  }

  // Synthetic weak-model judge score: StrongWins -> uniform 1..3, otherwise
  // uniform 4..5; a noise share is replaced by a uniform 1..5 draw.
  static int synthetic_score(Outcome o, Rng& rng, double noise) {
    if (rng.bernoulli(noise)) return rng.between(1, 5);
    return o == Outcome::StrongWins ? rng.between(1, 3) : rng.between(4, 5);
  }

  void train(std::span<const Query> corpus, std::span<const PreferenceRecord> prefs,
             const RouterTrainConfig& cfg) override {
    if (corpus.size() < 2) throw Error("r_llm: insufficient data");
    if (vocab_.size() <= 1) vocab_ = Vocabulary::build(texts_of(corpus));
    tau_ = cfg.tau;
    const auto outcomes = detail::aligned_outcomes(corpus, prefs);
    std::vector<TokenSeq> seqs;
    std::vector<int> scores;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
      seqs.push_back(vocab_.encode(corpus[i].text));
      Rng srng(derive_seed(derive_seed(cfg.train.seed, "r_llm-score"), corpus[i].id));
      scores.push_back(synthetic_score(outcomes[i], srng, cfg.llm_score_noise));
    }
    Rng rng(derive_seed(cfg.train.seed, "r_llm-init"));
    table_ = EmbeddingTable::random(vocab_.size(), kTokenDim, rng, 0.1);
    net_ = DenseNet::make({kTokenDim, cfg.hidden, 5},
                          {Activation::Tanh, Activation::Identity},
                          ParamGroup::Head, rng);
    DenseGrads grads = net_.zero_grads();
    Mat gtable = Mat::Zero(table_.rows.rows(), table_.rows.cols());
    ParamList params;
    params.push_back(make_slot("llm.table", table_.rows, gtable, ParamGroup::Backbone));
    net_.register_params("llm", grads, params);
    AdamW opt(cfg.train);
    trained_ = true;
    for (int epoch = 0; epoch < cfg.train.max_epochs; ++epoch) {
      const auto order = detail::epoch_order(corpus.size(), cfg.train.seed, epoch);
      for (std::size_t b = 0; b < order.size(); b += cfg.train.batch_size) {
        const std::size_t e = std::min(order.size(), b + cfg.train.batch_size);
        const auto n = static_cast<Eigen::Index>(e - b);
        Mat xb(kTokenDim, n), target = Mat::Zero(5, n);
        for (Eigen::Index i = 0; i < n; ++i) {
          xb.col(i) = pooled(seqs[order[b + i]]);
          target(scores[order[b + i]] - 1, i) = 1.0;
        }
        ForwardCache cache;
        const Mat p = ops::softmax(net_.forward(xb, &cache));
        zero_grads(params);
        const Mat gx = net_.backward(cache, (p - target) / static_cast<double>(n), grads);
        for (Eigen::Index i = 0; i < n; ++i)
          mean_pool_backward(seqs[order[b + i]], gx.col(i), gtable);
        opt.step(params);
      }
    }
  }

  Checkpoint to_checkpoint() const override {
    require_trained();
    Checkpoint ck;
    ck.meta["kind"] = id();
    ck.meta["tau"] = std::to_string(tau_);
    ck.put("llm.table", table_.rows, ParamGroup::Backbone);
    ck.put_net("llm", net_);
    return ck;
  }
  void from_checkpoint(const Checkpoint& ck) override {
    if (ck.meta_at("kind") != id()) throw Error("checkpoint is not r_llm");
    tau_ = std::stoi(ck.meta_at("tau"));
    table_.rows = ck.at("llm.table").values;
    net_ = ck.get_net("llm");
    if (static_cast<std::size_t>(table_.rows.rows()) != vocab_.size())
      throw Error("r_llm: checkpoint table does not match vocabulary");
    trained_ = true;
  }

  // Direct construction for tests.
  void set_parameters(EmbeddingTable table, DenseNet head) {
    table_ = std::move(table);
    net_ = std::move(head);
    trained_ = true;
  }

 private:
  Vocabulary vocab_;
  int tau_ = 4;
  EmbeddingTable table_;
  DenseNet net_;
};

inline std::unique_ptr<Router> make_router(RouterKind k, const Vocabulary& vocab,
                                           const RouterTrainConfig& cfg = {}) {
  switch (k) {
    case RouterKind::CLS: return std::make_unique<ClsRouter>();
    case RouterKind::MF: return std::make_unique<MfRouter>();
    case RouterKind::SW: return std::make_unique<SwRouter>(cfg.k_retrieve);
    case RouterKind::LLM: return std::make_unique<TokenMeanRouter>(vocab, cfg.tau);
  }
  throw Error("unknown router kind");
}

// A router plus its (optional) calibration.
struct DeployedRouter {
  const Router* router = nullptr;
  std::optional<CalibratedThreshold> calibration;

  double alpha() const {
    if (!calibration) throw Error(router->id() + ": router is not calibrated");
    return calibration->alpha;
  }
  RouterDecision decide(std::string_view text) const {
    return route(WinRate(router->win_rate(text)), alpha());
  }
};

inline CalibratedThreshold calibrate_threshold(const Router& router,
                                               std::span<const Query> corpus,
                                               std::string corpus_id) {
  if (corpus.empty()) throw Error("calibrate_threshold: empty corpus");
  const auto w = router.win_rates(texts_of(corpus));
  return calibrate_threshold(w, router.id(), std::move(corpus_id));
}

}  // namespace rrw
