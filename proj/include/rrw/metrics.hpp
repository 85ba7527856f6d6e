#pragma once

// Attack and defense measurements: ASR, selection rate, ACG, simulated
// benchmark scores, detection metrics, PCA projection, trigger-pattern
// statistics and the ASR CDF.

#include <Eigen/Dense>

#include <algorithm>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "rrw/common.hpp"
#include "rrw/corpus.hpp"
#include "rrw/routers.hpp"

namespace rrw {

// Fraction of eligible queries whose decision flips toward the target.
// Strong: eligible iff before < alpha, success iff after >= alpha.
// Weak: eligible iff before >= alpha, success iff after < alpha.
// Absent when nothing is eligible.
inline std::optional<double> asr(std::span<const double> before, std::span<const double> after,
                                 double alpha, Target direction) {
  if (before.size() != after.size()) throw Error("asr: length mismatch");
  std::size_t eligible = 0, crossed = 0;
  for (std::size_t i = 0; i < before.size(); ++i) {
    if (direction == Target::Strong) {
      if (before[i] < alpha) {
        ++eligible;
        crossed += after[i] >= alpha;
      }
    } else if (before[i] >= alpha) {
      ++eligible;
      crossed += after[i] < alpha;
    }
  }
  if (eligible == 0) return std::nullopt;
  return static_cast<double>(crossed) / static_cast<double>(eligible);
}

inline std::optional<double> selection_rate(std::span<const double> win_rates, double alpha,
                                            Target target) {
  if (win_rates.empty()) return std::nullopt;
  std::size_t n = 0;
  for (double w : win_rates) n += (w >= alpha) == (target == Target::Strong);
  return static_cast<double>(n) / static_cast<double>(win_rates.size());
}

inline double acg(std::span<const double> before, std::span<const double> after) {
  if (before.size() != after.size()) throw Error("acg: length mismatch");
  if (before.empty()) return 0.0;
  double s = 0;
  for (std::size_t i = 0; i < before.size(); ++i) s += after[i] - before[i];
  return s / static_cast<double>(before.size());
}

// Stand-in backend that answers correctly with a fixed probability per
// complexity class, keyed by (seed, query id).
struct ModelSimulator {
  ModelChoice role = ModelChoice::Strong;
  double p_simple = 0.9;
  double p_complex = 0.75;
  std::uint64_t seed = 0;

  static ModelSimulator strong(std::uint64_t seed) { return {ModelChoice::Strong, 0.9, 0.75, seed}; }
  static ModelSimulator weak(std::uint64_t seed) { return {ModelChoice::Weak, 0.8, 0.2, seed}; }

  bool correct(const Query& q) const {
    if (p_simple < 0 || p_simple > 1 || p_complex < 0 || p_complex > 1)
      throw Error("ModelSimulator: probabilities must be in [0,1]");
    Rng rng(derive_seed(derive_seed(seed, to_string(role)), q.id));
    const double p = q.complexity == Complexity::Complex ? p_complex : p_simple;
    return rng.uniform() < p;
  }
};

// 100 x accuracy of the answers from whichever model each query was routed to.
inline double benchmark_score(std::span<const Query> queries, std::span<const ModelChoice> routed,
                              const ModelSimulator* strong, const ModelSimulator* weak) {
  if (queries.size() != routed.size()) throw Error("benchmark_score: length mismatch");
  if (queries.empty()) throw Error("benchmark_score: empty input");
  std::size_t ok = 0;
  for (std::size_t i = 0; i < queries.size(); ++i) {
    const ModelSimulator* sim = routed[i] == ModelChoice::Strong ? strong : weak;
    if (!sim) throw Error("benchmark_score: missing simulator");
    ok += sim->correct(queries[i]);
  }
  return 100.0 * static_cast<double>(ok) / static_cast<double>(queries.size());
}

struct DetectionMetrics {
  double accuracy = 0, precision = 0, recall = 0, f1 = 0;
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
};

inline DetectionMetrics detection_metrics(std::span<const int> pred, std::span<const int> labels) {
  if (pred.empty() || pred.size() != labels.size()) throw Error("detection_metrics: bad input");
  DetectionMetrics m;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] && labels[i]) ++m.tp;
    else if (pred[i] && !labels[i]) ++m.fp;
    else if (!pred[i] && labels[i]) ++m.fn;
    else ++m.tn;
  }
  const double n = static_cast<double>(pred.size());
  m.accuracy = static_cast<double>(m.tp + m.tn) / n;
  m.precision = (m.tp + m.fp) ? static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fp) : 0.0;
  m.recall = (m.tp + m.fn) ? static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fn) : 0.0;
  m.f1 = (m.precision + m.recall) > 0 ? 2 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
  return m;
}

// ---------------------------------------------------------------------------
// PCA.

struct Pca2d {
  Eigen::MatrixXd coords;      // n x 2
  Eigen::MatrixXd components;  // d x 2, unit columns
  Eigen::Vector2d explained = Eigen::Vector2d::Zero();
};

// Top-2 principal axes by power iteration with deflation. Each axis is
// signed so its largest-magnitude component is positive.
inline Pca2d pca_2d(const Eigen::MatrixXd& points, int max_iter = 5000, double tol = 1e-13) {
  const auto n = points.rows(), d = points.cols();
  if (n < 3) throw Error("pca_2d: need at least 3 points");
  Pca2d out;
  out.coords = Eigen::MatrixXd::Zero(n, 2);
  out.components = Eigen::MatrixXd::Zero(d, 2);
  const Eigen::MatrixXd X = points.rowwise() - points.colwise().mean();
  Eigen::MatrixXd C = X.transpose() * X / static_cast<double>(n - 1);
  if (C.norm() == 0) {
    log_warning("pca_2d: degenerate covariance");
    return out;
  }
  for (int c = 0; c < std::min<Eigen::Index>(2, d); ++c) {
    Eigen::VectorXd v(d);
    for (Eigen::Index i = 0; i < d; ++i) v[i] = 1.0 + 0.01 * static_cast<double>(i);  // fixed start
    v.normalize();
    double lambda = 0;
    for (int it = 0; it < max_iter; ++it) {
      Eigen::VectorXd w = C * v;
      const double nw = w.norm();
      if (nw == 0) {
        lambda = 0;
        break;
      }
      w /= nw;
      const double diff = std::min((w - v).norm(), (w + v).norm());
      v = w;
      lambda = v.dot(C * v);
      if (diff < tol) break;
    }
    Eigen::Index arg;
    v.cwiseAbs().maxCoeff(&arg);
    if (v[arg] < 0) v = -v;
    out.components.col(c) = v;
    out.explained[c] = std::max(0.0, lambda);
    C -= lambda * v * v.transpose();
  }
  out.coords = X * out.components;
  return out;
}

// ---------------------------------------------------------------------------
// Trigger patterns and CDF.

struct PatternStats {
  double mean_ppl = 0;
  double mean_length = 0;
  std::size_t n = 0;
};

template <typename Perplexity>
PatternStats pattern_stats(std::span<const std::string> texts, const Perplexity& ppl) {
  if (texts.empty()) throw Error("trigger_pattern_stats: empty group");
  PatternStats s;
  s.n = texts.size();
  for (const auto& t : texts) {
    s.mean_ppl += ppl(t);
    s.mean_length += static_cast<double>(utf8_length(t));
  }
  s.mean_ppl /= static_cast<double>(s.n);
  s.mean_length /= static_cast<double>(s.n);
  return s;
}

template <typename Perplexity>
std::map<std::string, PatternStats> trigger_pattern_stats(
    const std::map<std::string, std::vector<std::string>>& groups, const Perplexity& ppl) {
  std::map<std::string, PatternStats> out;
  for (const auto& [name, texts] : groups) out[name] = pattern_stats(texts, ppl);
  return out;
}

struct CdfPoint {
  double value;
  double cumulative;
};

// Sorted distinct values with the fraction of samples <= value.
inline std::vector<CdfPoint> asr_cdf(std::vector<double> values) {
  std::sort(values.begin(), values.end());
  std::vector<CdfPoint> out;
  const double n = static_cast<double>(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i + 1 < values.size() && values[i + 1] == values[i]) continue;
    out.push_back({values[i], static_cast<double>(i + 1) / n});
  }
  return out;
}

// Smallest value whose cumulative fraction reaches 0.5.
inline double cdf_median(std::span<const CdfPoint> cdf) {
  if (cdf.empty()) throw Error("cdf_median: empty");
  for (const auto& p : cdf)
    if (p.cumulative >= 0.5) return p.value;
  return cdf.back().value;
}

// Judge interface for jailbreak success; no default implementation.
class HarmJudge {
 public:
  virtual ~HarmJudge() = default;
  virtual bool harmful(std::string_view query, std::string_view response) const = 0;
};

}  // namespace rrw
