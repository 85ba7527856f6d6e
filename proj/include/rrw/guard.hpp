#pragma once

// Siamese rerouting detector: pair construction, encoder/projection/pair
// classifier, BCE + weighted supervised-contrastive training, and K-reference
// majority-vote deployment. Also the single-query ablation classifier.

#include <algorithm>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "rrw/attacks.hpp"
#include "rrw/corpus.hpp"
#include "rrw/embedding.hpp"
#include "rrw/metrics.hpp"
#include "rrw/nn.hpp"

namespace rrw {

enum class PairKind { NormNorm, AdvAdv, CrossNegative, SelfNegative };

inline std::string to_string(PairKind k) {
  switch (k) {
    case PairKind::NormNorm: return "norm_norm";
    case PairKind::AdvAdv: return "adv_adv";
    case PairKind::CrossNegative: return "cross_negative";
    case PairKind::SelfNegative: return "self_negative";
  }
  return "norm_norm";
}

struct QueryPair {
  Query a, b;
  int y = 0;  // 0 same class, 1 cross class
  PairKind kind = PairKind::NormNorm;
};

inline int pair_label(PairKind k) {
  return (k == PairKind::NormNorm || k == PairKind::AdvAdv) ? 0 : 1;
}

struct GuardConfig {
  double lambda_bce = 0.65;
  double lambda_contr = 0.35;
  double temperature = 0.1;
  double hard_negative_weight = 1.2;
  double negative_cross_ratio = 0.5;
  int K = 4;
  int warmup_steps = 50;
  int patience = 4;
  int encoder_hidden = 128;
  int encoder_out = 64;
  int projection_dim = 32;
  int classifier_hidden = 32;
  TrainConfig train{.lr_head = 1e-3, .lr_backbone = 3e-4,
                    .weight_decay_head = 1e-4, .weight_decay_backbone = 1e-2,
                    .batch_size = 64, .clip_norm = 1.0, .warmup_steps = 0,
                    .max_epochs = 30, .seed = 0};

  void validate() const {
    if (std::abs(lambda_bce + lambda_contr - 1.0) > 1e-9)
      throw ConfigError("lambda_bce + lambda_contr must equal 1");
    if (!(temperature > 0)) throw ConfigError("temperature must be > 0");
    if (K < 1) throw ConfigError("K must be >= 1");
    if (negative_cross_ratio < 0 || negative_cross_ratio > 1)
      throw ConfigError("negative_cross_ratio must be in [0,1]");
    if (warmup_steps < 0) throw ConfigError("warmup_steps must be >= 0");
    train.validate();
  }
};

// ---------------------------------------------------------------------------
// Pair construction.

// Per normal sample i: one positive (NormNorm for even i, AdvAdv for odd i)
// and one negative (CrossNegative with probability negative_cross_ratio,
// else SelfNegative). Pair order is drawn per pair so both orders of
// cross-domain pairs appear. adv[i] must be derived from normal[i].
inline std::vector<QueryPair> build_pair_dataset(std::span<const Query> normal,
                                                 std::span<const Query> adv,
                                                 const GuardConfig& cfg, std::uint64_t seed) {
  if (normal.empty() || adv.empty()) throw Error("build_pair_dataset: empty inputs");
  if (normal.size() != adv.size()) throw Error("build_pair_dataset: splits not aligned");
  const std::size_t n = normal.size();
  std::vector<QueryPair> out;
  out.reserve(2 * n);
  const auto base = derive_seed(seed, "pairs");
  auto other = [&](Rng& rng, std::size_t i) {
    if (n == 1) return i;
    std::size_t j = rng.below(n - 1);
    return j >= i ? j + 1 : j;
  };
  for (std::size_t i = 0; i < n; ++i) {
    if (!adv[i].id.starts_with(normal[i].id + "+"))
      throw Error("build_pair_dataset: adversarial split not aligned at " + normal[i].id);
    Rng rng(derive_seed(base, normal[i].id));
    {
      QueryPair p;
      const std::size_t j = other(rng, i);
      p.kind = (i % 2 == 0) ? PairKind::NormNorm : PairKind::AdvAdv;
      const auto& src = p.kind == PairKind::NormNorm ? normal : adv;
      p.a = src[i];
      p.b = src[j];
      if (rng.bernoulli(0.5)) std::swap(p.a, p.b);
      p.y = 0;
      out.push_back(std::move(p));
    }
    {
      QueryPair p;
      const bool cross = rng.uniform() < cfg.negative_cross_ratio;
      p.kind = cross ? PairKind::CrossNegative : PairKind::SelfNegative;
      p.a = normal[i];
      p.b = cross ? adv[other(rng, i)] : adv[i];
      if (rng.bernoulli(0.5)) std::swap(p.a, p.b);
      p.y = 1;
      out.push_back(std::move(p));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Losses.

inline constexpr double kProbClamp = 1e-12;

inline double bce_loss(std::span<const double> pred, std::span<const int> labels) {
  if (pred.size() != labels.size() || pred.empty()) throw Error("bce_loss: size mismatch");
  double s = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double p = std::clamp(pred[i], kProbClamp, 1.0 - kProbClamp);
    s += labels[i] ? std::log(p) : std::log(1.0 - p);
  }
  return -s / static_cast<double>(pred.size());
}

// Weighted SupCon over columns of Z (unit vectors). weights(i,k) multiplies
// the k-th denominator term of anchor i (pass an all-ones matrix for the
// unweighted loss). Anchors without a same-class partner are left out of
// the average. If grad is non-null it receives dL/dZ.
inline double supcon_loss(const Mat& Z, std::span<const int> labels, double tau,
                          const Mat& weights, Mat* grad = nullptr) {
  const auto m = Z.cols();
  if (static_cast<Eigen::Index>(labels.size()) != m) throw Error("supcon: label count mismatch");
  if (!(tau > 0)) throw Error("supcon: temperature must be > 0");
  const Mat S = Z.transpose() * Z;
  Mat C = Mat::Zero(m, m);
  double total = 0;
  int anchors = 0;
  for (Eigen::Index i = 0; i < m; ++i) {
    int np = 0;
    for (Eigen::Index j = 0; j < m; ++j)
      if (j != i && labels[j] == labels[i]) ++np;
    if (np == 0) continue;
    ++anchors;
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index k = 0; k < m; ++k)
      if (k != i) mx = std::max(mx, S(i, k) / tau);
    double denom = 0;
    for (Eigen::Index k = 0; k < m; ++k)
      if (k != i) denom += weights(i, k) * std::exp(S(i, k) / tau - mx);
    const double log_denom = std::log(denom) + mx;
    double li = 0;
    for (Eigen::Index j = 0; j < m; ++j)
      if (j != i && labels[j] == labels[i]) li += S(i, j) / tau - log_denom;
    total += -li / np;
    for (Eigen::Index k = 0; k < m; ++k) {
      if (k == i) continue;
      const double q = weights(i, k) * std::exp(S(i, k) / tau - log_denom);
      C(i, k) = q / tau - ((labels[k] == labels[i]) ? 1.0 / (tau * np) : 0.0);
    }
  }
  if (anchors == 0) {
    if (grad) *grad = Mat::Zero(Z.rows(), m);
    return 0.0;
  }
  if (anchors < m) {
    log_warning("supcon: " + std::to_string(m - anchors) + " anchors without positives skipped");
  }
  C /= anchors;
  if (grad) *grad = Z * (C + C.transpose());
  return total / anchors;
}

inline double contrastive_ramp(int step, int warmup_steps) {
  if (warmup_steps <= 0) return 1.0;
  return std::min(1.0, static_cast<double>(step) / warmup_steps);
}

// ---------------------------------------------------------------------------
// Model.

inline const Vec& hashed_cached(const std::string& text,
                                std::unordered_map<std::string, Vec>& cache) {
  auto it = cache.find(text);
  if (it == cache.end()) it = cache.emplace(text, embed_hashed(text)).first;
  return it->second;
}

struct SiameseGrads {
  DenseGrads encoder, projection, classifier;
};

struct PairForward {
  ForwardCache enc, proj, cls;
  Mat projected;  // pre-normalization, d x 2B
  Vec norms;
  Mat z;          // unit embeddings, a's then b's
  Mat features;
  Vec probs;
};

class SiameseModel {
 public:
  DenseNet encoder, projection, classifier;

  static SiameseModel make(const GuardConfig& cfg, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "siamese-init"));
    SiameseModel m;
    m.encoder = DenseNet::make({kHashedDim, cfg.encoder_hidden, cfg.encoder_out},
                               {Activation::ReLU, Activation::ReLU}, ParamGroup::Backbone, rng);
    m.projection = DenseNet::make({cfg.encoder_out, cfg.projection_dim},
                                  {Activation::Identity}, ParamGroup::Head, rng);
    m.classifier = DenseNet::make({4 * cfg.projection_dim, cfg.classifier_hidden, 1},
                                  {Activation::ReLU, Activation::Identity}, ParamGroup::Head, rng);
    return m;
  }

  Eigen::Index dim() const { return projection.output_dim(); }

  // Unit-norm embeddings of hashed inputs (one per column).
  Mat encode_hashed(const Mat& x) const {
    return ops::l2_normalize(projection.forward(encoder.forward(x)));
  }
  Vec encode(std::string_view text) const {
    return encode_hashed(Mat(embed_hashed(text))).col(0);
  }

  // Probability that (a, b) is a cross-class pair.
  Vec classify_pairs(const Mat& ea, const Mat& eb) const {
    if (ea.rows() != dim() || eb.rows() != dim() || ea.cols() != eb.cols())
      throw Error("classify_pair: dimension mismatch");
    return ops::sigmoid(classifier.forward(ops::pair_features(ea, eb))).row(0).transpose();
  }
  double classify_pair(const Vec& ea, const Vec& eb) const {
    return classify_pairs(Mat(ea), Mat(eb))[0];
  }

  // Forward for a batch of pairs with all caches needed for training.
  PairForward forward_pairs(const Mat& xa, const Mat& xb) const {
    PairForward f;
    const auto B = xa.cols();
    Mat x(xa.rows(), 2 * B);
    x.leftCols(B) = xa;
    x.rightCols(B) = xb;
    const Mat h = encoder.forward(x, &f.enc);
    f.projected = projection.forward(h, &f.proj);
    f.z = ops::l2_normalize(f.projected, &f.norms);
    f.features = ops::pair_features(f.z.leftCols(B), f.z.rightCols(B));
    f.probs = ops::sigmoid(classifier.forward(f.features, &f.cls)).row(0).transpose();
    return f;
  }

  // Backward from dL/dlogits and dL/dz (embedding-level, e.g. SupCon).
  void backward_pairs(const PairForward& f, const Vec& grad_logits, const Mat& grad_z,
                      SiameseGrads& g) const {
    const auto B = grad_logits.size();
    const Mat gf = classifier.backward(f.cls, Mat(grad_logits.transpose()), g.classifier);
    Mat ga, gb;
    ops::pair_features_backward(f.z.leftCols(B), f.z.rightCols(B), gf, ga, gb);
    Mat gz = grad_z;
    gz.leftCols(B) += ga;
    gz.rightCols(B) += gb;
    const Mat gp = ops::l2_normalize_backward(f.z, f.norms, gz);
    const Mat gh = projection.backward(f.proj, gp, g.projection);
    encoder.backward(f.enc, gh, g.encoder);
  }

  void register_params(SiameseGrads& g, ParamList& out) {
    encoder.register_params("encoder", g.encoder, out);
    projection.register_params("projection", g.projection, out);
    classifier.register_params("classifier", g.classifier, out);
  }

  Checkpoint to_checkpoint() const {
    Checkpoint ck;
    ck.meta["kind"] = "siamese";
    ck.put_net("encoder", encoder);
    ck.put_net("projection", projection);
    ck.put_net("classifier", classifier);
    return ck;
  }
  static SiameseModel from_checkpoint(const Checkpoint& ck) {
    if (ck.meta_at("kind") != "siamese") throw Error("checkpoint is not a siamese guard");
    SiameseModel m;
    m.encoder = ck.get_net("encoder");
    m.projection = ck.get_net("projection");
    m.classifier = ck.get_net("classifier");
    return m;
  }

  bool operator==(const SiameseModel& o) const {
    return encoder == o.encoder && projection == o.projection && classifier == o.classifier;
  }
};

struct BatchLoss {
  double bce = 0, supcon = 0, total = 0;
};

// Composite loss on one batch of pairs; fills grads when requested.
// Class label per embedding: 1 for adversarial-origin queries.
inline BatchLoss total_loss(const SiameseModel& model, std::span<const QueryPair> batch,
                            const GuardConfig& cfg, int step,
                            std::unordered_map<std::string, Vec>& hash_cache,
                            SiameseGrads* grads = nullptr) {
  const auto B = static_cast<Eigen::Index>(batch.size());
  Mat xa(kHashedDim, B), xb(kHashedDim, B);
  std::vector<int> y(static_cast<std::size_t>(B)), cls(static_cast<std::size_t>(2 * B));
  for (Eigen::Index i = 0; i < B; ++i) {
    const auto& p = batch[static_cast<std::size_t>(i)];
    xa.col(i) = hashed_cached(p.a.text, hash_cache);
    xb.col(i) = hashed_cached(p.b.text, hash_cache);
    y[static_cast<std::size_t>(i)] = p.y;
    cls[static_cast<std::size_t>(i)] = is_adversarial(p.a) ? 1 : 0;
    cls[static_cast<std::size_t>(B + i)] = is_adversarial(p.b) ? 1 : 0;
  }
  const auto f = model.forward_pairs(xa, xb);
  BatchLoss L;
  std::vector<double> probs(f.probs.data(), f.probs.data() + B);
  L.bce = bce_loss(probs, y);
  Mat W = Mat::Ones(2 * B, 2 * B);
  for (Eigen::Index i = 0; i < B; ++i) {
    if (y[static_cast<std::size_t>(i)] == 1 && f.probs[i] <= 0.5) {
      W(i, B + i) = cfg.hard_negative_weight;
      W(B + i, i) = cfg.hard_negative_weight;
    }
  }
  const double ramp = contrastive_ramp(step, cfg.warmup_steps);
  const double wc = cfg.lambda_contr * ramp;
  Mat gz;
  L.supcon = supcon_loss(f.z, cls, cfg.temperature, W, grads ? &gz : nullptr);
  L.total = cfg.lambda_bce * L.bce + wc * L.supcon;
  if (grads) {
    Vec gl(B);
    for (Eigen::Index i = 0; i < B; ++i)
      gl[i] = cfg.lambda_bce * (f.probs[i] - y[static_cast<std::size_t>(i)]) / static_cast<double>(B);
    model.backward_pairs(f, gl, wc * gz, *grads);
  }
  return L;
}

// ---------------------------------------------------------------------------
// Training.

struct TrainLog {
  std::vector<double> epoch_loss;
  std::vector<double> val_f1;
  int best_epoch = -1;
  double best_val_f1 = -1;
};

inline double pair_f1(const SiameseModel& model, std::span<const QueryPair> pairs,
                      std::unordered_map<std::string, Vec>& cache) {
  std::vector<int> pred, y;
  for (std::size_t b = 0; b < pairs.size(); b += 256) {
    const std::size_t e = std::min(pairs.size(), b + 256);
    const auto n = static_cast<Eigen::Index>(e - b);
    Mat xa(kHashedDim, n), xb(kHashedDim, n);
    for (Eigen::Index i = 0; i < n; ++i) {
      xa.col(i) = hashed_cached(pairs[b + static_cast<std::size_t>(i)].a.text, cache);
      xb.col(i) = hashed_cached(pairs[b + static_cast<std::size_t>(i)].b.text, cache);
    }
    const Vec p = model.classify_pairs(model.encode_hashed(xa), model.encode_hashed(xb));
    for (Eigen::Index i = 0; i < n; ++i) {
      pred.push_back(p[i] > 0.5 ? 1 : 0);
      y.push_back(pairs[b + static_cast<std::size_t>(i)].y);
    }
  }
  return detection_metrics(pred, y).f1;
}

inline std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  rng.shuffle(idx);
  return idx;
}

// AdamW with backbone/head groups, clipping and contrastive warmup; early
// stopping on validation pair F1 restores the best epoch's parameters.
inline SiameseModel train_guard(std::span<const QueryPair> train, std::span<const QueryPair> val,
                                const GuardConfig& cfg, TrainLog* log = nullptr) {
  cfg.validate();
  if (train.empty()) throw Error("train_guard: empty pair dataset");
  SiameseModel model = SiameseModel::make(cfg, cfg.train.seed);
  SiameseGrads grads;
  ParamList params;
  model.register_params(grads, params);
  AdamW opt(cfg.train);
  std::unordered_map<std::string, Vec> cache;
  TrainLog local;
  TrainLog& lg = log ? *log : local;
  SiameseModel best = model;
  int since_best = 0, step = 0;
  const auto bs = static_cast<std::size_t>(cfg.train.batch_size);
  for (int epoch = 0; epoch < cfg.train.max_epochs; ++epoch) {
    const auto order = shuffled_indices(
        train.size(), derive_seed(derive_seed(cfg.train.seed, "guard-epoch"),
                                  static_cast<std::uint64_t>(epoch)));
    double sum = 0;
    int batches = 0;
    for (std::size_t b = 0; b < order.size(); b += bs) {
      std::vector<QueryPair> batch;
      for (std::size_t i = b; i < std::min(order.size(), b + bs); ++i) batch.push_back(train[order[i]]);
      zero_grads(params);
      const auto L = total_loss(model, batch, cfg, step, cache, &grads);
      if (!std::isfinite(L.total))
        throw Error("train_guard: loss diverged at epoch " + std::to_string(epoch) + " step " +
                    std::to_string(step));
      opt.step(params);
      sum += L.total;
      ++batches;
      ++step;
    }
    lg.epoch_loss.push_back(sum / std::max(1, batches));
    const double f1 = val.empty() ? 0.0 : pair_f1(model, val, cache);
    lg.val_f1.push_back(f1);
    if (val.empty() || f1 > lg.best_val_f1) {
      lg.best_val_f1 = f1;
      lg.best_epoch = epoch;
      best = model;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Deployment.

// Mean pair probability of (q, ref) over the references.
inline double guard_prob(const SiameseModel& model, std::string_view q,
                         std::span<const std::string> refs) {
  if (refs.empty()) throw Error("guard_prob: empty references");
  const Vec eq = model.encode(q);
  Mat er(model.dim(), static_cast<Eigen::Index>(refs.size()));
  for (std::size_t i = 0; i < refs.size(); ++i) er.col(static_cast<Eigen::Index>(i)) = model.encode(refs[i]);
  const Mat eqs = eq.replicate(1, er.cols());
  return model.classify_pairs(eqs, er).mean();
}

// Gradients of guard_prob with respect to the guard's own parameters and
// its hashed input vector. The hashed input is a fixed function of the text
// with no trainable upstream (in particular no router token rows).
struct GuardGradientProbe {
  double param_grad_norm = 0;
  Vec hashed_input_grad;
};

inline GuardGradientProbe probe_guard_gradients(const SiameseModel& model, std::string_view q,
                                                std::span<const std::string> refs) {
  if (refs.empty()) throw Error("guard_prob: empty references");
  SiameseModel m = model;
  SiameseGrads g;
  ParamList params;
  m.register_params(g, params);
  zero_grads(params);
  const auto B = static_cast<Eigen::Index>(refs.size());
  Mat xa(kHashedDim, B), xb(kHashedDim, B);
  const Vec xq = embed_hashed(q);
  for (Eigen::Index i = 0; i < B; ++i) {
    xa.col(i) = xq;
    xb.col(i) = embed_hashed(refs[static_cast<std::size_t>(i)]);
  }
  const auto f = m.forward_pairs(xa, xb);
  // d mean(sigmoid)/d logit = p(1-p)/B
  Vec gl = (f.probs.array() * (1.0 - f.probs.array())).matrix() / static_cast<double>(B);
  const Mat gf = m.classifier.backward(f.cls, Mat(gl.transpose()), g.classifier);
  Mat ga, gb;
  ops::pair_features_backward(f.z.leftCols(B), f.z.rightCols(B), gf, ga, gb);
  Mat gz(f.z.rows(), 2 * B);
  gz.leftCols(B) = ga;
  gz.rightCols(B) = gb;
  const Mat gp = ops::l2_normalize_backward(f.z, f.norms, gz);
  const Mat gh = m.projection.backward(f.proj, gp, g.projection);
  const Mat gx = m.encoder.backward(f.enc, gh, g.encoder);
  GuardGradientProbe out;
  out.param_grad_norm = grad_norm(params);
  out.hashed_input_grad = gx.leftCols(B).rowwise().sum();
  return out;
}

enum class GuardDecision { Block, Forward };

inline std::string to_string(GuardDecision d) { return d == GuardDecision::Block ? "Block" : "Forward"; }

// Strict majority: a K/2 tie forwards.
inline GuardDecision vote_decision(int adv_votes, int K) {
  return 2 * adv_votes > K ? GuardDecision::Block : GuardDecision::Forward;
}

struct VoteRecord {
  std::string query_id;
  int adv_votes = 0;
  int K = 0;
  GuardDecision decision = GuardDecision::Forward;
  std::vector<double> pair_probs;
  std::vector<std::string> reference_ids;
};

inline void to_json(nlohmann::json& j, const VoteRecord& v) {
  j = {{"query_id", v.query_id},
       {"adv_votes", v.adv_votes},
       {"K", v.K},
       {"decision", to_string(v.decision)},
       {"pair_probs", v.pair_probs}};
}

// K reference indices drawn per (seed, key) without replacement; with
// replacement (and a warning) when the pool is smaller than K.
inline std::vector<std::size_t> sample_references(std::size_t pool_size, int K,
                                                  std::uint64_t seed, std::string_view key) {
  if (pool_size == 0) throw Error("deploy_vote: empty reference pool");
  if (K < 1) throw Error("deploy_vote: K must be >= 1");
  Rng rng(derive_seed(derive_seed(seed, "guard-refs"), key));
  std::vector<std::size_t> out;
  const auto k = static_cast<std::size_t>(K);
  if (pool_size < k) {
    log_warning("reference pool (" + std::to_string(pool_size) + ") smaller than K=" +
                std::to_string(K) + "; sampling with replacement");
    for (std::size_t i = 0; i < k; ++i) out.push_back(rng.below(pool_size));
    return out;
  }
  // partial Fisher-Yates over an index map
  std::unordered_map<std::size_t, std::size_t> swapped;
  auto at = [&](std::size_t i) {
    auto it = swapped.find(i);
    return it == swapped.end() ? i : it->second;
  };
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + rng.below(pool_size - i);
    const std::size_t vi = at(i), vj = at(j);
    swapped[i] = vj;
    swapped[j] = vi;
    out.push_back(vj);
  }
  return out;
}

// Reference pool with embeddings computed once.
class ReferencePool {
 public:
  ReferencePool(const SiameseModel& model, std::vector<Query> refs) : refs_(std::move(refs)) {
    if (refs_.empty()) throw Error("deploy_vote: empty reference pool");
    Mat x(kHashedDim, static_cast<Eigen::Index>(refs_.size()));
    for (std::size_t i = 0; i < refs_.size(); ++i) x.col(static_cast<Eigen::Index>(i)) = embed_hashed(refs_[i].text);
    emb_ = model.encode_hashed(x);
  }
  const std::vector<Query>& queries() const { return refs_; }
  const Mat& embeddings() const { return emb_; }
  std::size_t size() const { return refs_.size(); }

 private:
  std::vector<Query> refs_;
  Mat emb_;
};

// Majority vote over K (reference, query) pairs; Block iff adv_votes > K/2.
inline VoteRecord deploy_vote(const SiameseModel& model, const ReferencePool& pool,
                              std::string_view text, std::string_view key, int K,
                              std::uint64_t seed) {
  const auto idx = sample_references(pool.size(), K, seed, key);
  const Vec eq = model.encode(text);
  Mat er(model.dim(), static_cast<Eigen::Index>(idx.size()));
  for (std::size_t i = 0; i < idx.size(); ++i)
    er.col(static_cast<Eigen::Index>(i)) = pool.embeddings().col(static_cast<Eigen::Index>(idx[i]));
  const Vec p = model.classify_pairs(er, eq.replicate(1, er.cols()));
  VoteRecord v;
  v.query_id = std::string(key);
  v.K = K;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    v.pair_probs.push_back(p[static_cast<Eigen::Index>(i)]);
    v.reference_ids.push_back(pool.queries()[idx[i]].id);
    if (p[static_cast<Eigen::Index>(i)] > 0.5) ++v.adv_votes;
  }
  v.decision = vote_decision(v.adv_votes, K);
  return v;
}

inline VoteRecord deploy_vote(const SiameseModel& model, const ReferencePool& pool,
                              const Query& q, int K, std::uint64_t seed) {
  return deploy_vote(model, pool, q.text, q.id, K, seed);
}

// guard_prob with references drawn per text, for attack feedback.
class GuardScorer final : public AdversarialScorer {
 public:
  GuardScorer(const SiameseModel& model, const ReferencePool& pool, int K, std::uint64_t seed)
      : model_(model), pool_(pool), K_(K), seed_(seed) {}

  double adversarial_prob(std::string_view text) const override {
    const auto idx = sample_references(pool_.size(), K_, seed_, hex64(fnv1a64(text)));
    const Vec eq = model_.encode(text);
    Mat er(model_.dim(), static_cast<Eigen::Index>(idx.size()));
    for (std::size_t i = 0; i < idx.size(); ++i)
      er.col(static_cast<Eigen::Index>(i)) = pool_.embeddings().col(static_cast<Eigen::Index>(idx[i]));
    return model_.classify_pairs(eq.replicate(1, er.cols()), er).mean();
  }

 private:
  const SiameseModel& model_;
  const ReferencePool& pool_;
  int K_;
  std::uint64_t seed_;
};

// ---------------------------------------------------------------------------
// Single-query ablation: same encoder and projection, direct sigmoid head.

class SingleQueryModel {
 public:
  DenseNet encoder, projection, head;

  static SingleQueryModel make(const GuardConfig& cfg, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "single-init"));
    SingleQueryModel m;
    m.encoder = DenseNet::make({kHashedDim, cfg.encoder_hidden, cfg.encoder_out},
                               {Activation::ReLU, Activation::ReLU}, ParamGroup::Backbone, rng);
    m.projection = DenseNet::make({cfg.encoder_out, cfg.projection_dim},
                                  {Activation::Identity}, ParamGroup::Head, rng);
    m.head = DenseNet::make({cfg.projection_dim, cfg.classifier_hidden, 1},
                            {Activation::ReLU, Activation::Identity}, ParamGroup::Head, rng);
    return m;
  }

  Vec probs_hashed(const Mat& x) const {
    const Mat z = ops::l2_normalize(projection.forward(encoder.forward(x)));
    return ops::sigmoid(head.forward(z)).row(0).transpose();
  }
  double prob(std::string_view text) const { return probs_hashed(Mat(embed_hashed(text)))[0]; }

  Checkpoint to_checkpoint() const {
    Checkpoint ck;
    ck.meta["kind"] = "single_query";
    ck.put_net("encoder", encoder);
    ck.put_net("projection", projection);
    ck.put_net("head", head);
    return ck;
  }
  static SingleQueryModel from_checkpoint(const Checkpoint& ck) {
    if (ck.meta_at("kind") != "single_query") throw Error("checkpoint is not a single-query model");
    SingleQueryModel m;
    m.encoder = ck.get_net("encoder");
    m.projection = ck.get_net("projection");
    m.head = ck.get_net("head");
    return m;
  }
  bool operator==(const SingleQueryModel& o) const {
    return encoder == o.encoder && projection == o.projection && head == o.head;
  }
};

inline double single_f1(const SingleQueryModel& m, std::span<const Query> qs,
                        std::span<const int> y, std::unordered_map<std::string, Vec>& cache) {
  Mat x(kHashedDim, static_cast<Eigen::Index>(qs.size()));
  for (std::size_t i = 0; i < qs.size(); ++i) x.col(static_cast<Eigen::Index>(i)) = hashed_cached(qs[i].text, cache);
  const Vec p = m.probs_hashed(x);
  std::vector<int> pred;
  for (Eigen::Index i = 0; i < p.size(); ++i) pred.push_back(p[i] > 0.5 ? 1 : 0);
  return detection_metrics(pred, y).f1;
}

inline SingleQueryModel train_single_query_baseline(std::span<const Query> normal_train,
                                                    std::span<const Query> adv_train,
                                                    std::span<const Query> normal_val,
                                                    std::span<const Query> adv_val,
                                                    const GuardConfig& cfg) {
  cfg.validate();
  if (normal_train.empty() || adv_train.empty()) throw Error("single-query baseline: empty inputs");
  std::vector<Query> xs(normal_train.begin(), normal_train.end());
  xs.insert(xs.end(), adv_train.begin(), adv_train.end());
  std::vector<int> ys(normal_train.size(), 0);
  ys.insert(ys.end(), adv_train.size(), 1);
  std::vector<Query> vx(normal_val.begin(), normal_val.end());
  vx.insert(vx.end(), adv_val.begin(), adv_val.end());
  std::vector<int> vy(normal_val.size(), 0);
  vy.insert(vy.end(), adv_val.size(), 1);

  SingleQueryModel m = SingleQueryModel::make(cfg, cfg.train.seed);
  DenseGrads ge = m.encoder.zero_grads(), gp = m.projection.zero_grads(), gh = m.head.zero_grads();
  ParamList params;
  m.encoder.register_params("encoder", ge, params);
  m.projection.register_params("projection", gp, params);
  m.head.register_params("head", gh, params);
  AdamW opt(cfg.train);
  std::unordered_map<std::string, Vec> cache;
  SingleQueryModel best = m;
  double best_f1 = -1;
  int since_best = 0;
  const auto bs = static_cast<std::size_t>(cfg.train.batch_size);
  for (int epoch = 0; epoch < cfg.train.max_epochs; ++epoch) {
    const auto order = shuffled_indices(
        xs.size(), derive_seed(derive_seed(cfg.train.seed, "single-epoch"),
                               static_cast<std::uint64_t>(epoch)));
    for (std::size_t b = 0; b < order.size(); b += bs) {
      const std::size_t e = std::min(order.size(), b + bs);
      const auto n = static_cast<Eigen::Index>(e - b);
      Mat x(kHashedDim, n);
      Vec y(n);
      for (Eigen::Index i = 0; i < n; ++i) {
        x.col(i) = hashed_cached(xs[order[b + static_cast<std::size_t>(i)]].text, cache);
        y[i] = ys[order[b + static_cast<std::size_t>(i)]];
      }
      ForwardCache ce, cp, ch;
      Vec norms;
      const Mat h = m.encoder.forward(x, &ce);
      const Mat pr = m.projection.forward(h, &cp);
      const Mat z = ops::l2_normalize(pr, &norms);
      const Vec p = ops::sigmoid(m.head.forward(z, &ch)).row(0).transpose();
      zero_grads(params);
      const Vec gl = (p - y) / static_cast<double>(n);
      const Mat gz = m.head.backward(ch, Mat(gl.transpose()), gh);
      const Mat gpr = ops::l2_normalize_backward(z, norms, gz);
      const Mat ghh = m.projection.backward(cp, gpr, gp);
      m.encoder.backward(ce, ghh, ge);
      opt.step(params);
    }
    const double f1 = vx.empty() ? 0.0 : single_f1(m, vx, vy, cache);
    if (vx.empty() || f1 > best_f1) {
      best_f1 = f1;
      best = m;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  return best;
}

}  // namespace rrw
