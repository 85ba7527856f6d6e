#pragma once

// Bottom-half / top-half intersections across calibrated routers.

#include <algorithm>
#include <string>
#include <vector>

#include "rrw/corpus.hpp"
#include "rrw/routers.hpp"

namespace rrw {

// Win rates of every corpus query under one router, with that router's
// calibration (absent when uncalibrated).
struct RouterScores {
  std::string router;
  std::vector<double> win_rates;
  std::optional<CalibratedThreshold> calibration;
};

namespace detail {

enum class Half { Bottom, Top };

inline std::vector<Query> select_pool(std::span<const Query> corpus,
                                      std::span<const RouterScores> scores, Half half) {
  if (scores.empty()) throw Error("select pool: no routers");
  for (const auto& s : scores) {
    if (!s.calibration) throw Error("select pool: router " + s.router + " is not calibrated");
    if (s.win_rates.size() != corpus.size())
      throw Error("select pool: scores for " + s.router + " do not cover the corpus");
  }
  std::vector<Query> out;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    bool keep = true;
    for (const auto& s : scores) {
      const bool top = s.win_rates[i] >= s.calibration->alpha;
      if ((half == Half::Top) != top) {
        keep = false;
        break;
      }
    }
    if (keep) out.push_back(corpus[i]);
  }
  std::sort(out.begin(), out.end(), [](const Query& a, const Query& b) { return a.id < b.id; });
  return out;
}

inline std::vector<RouterScores> score_all(std::span<const Query> corpus,
                                           std::span<const DeployedRouter> routers) {
  const auto texts = texts_of(corpus);
  std::vector<RouterScores> out;
  for (const auto& r : routers) {
    if (!r.calibration) throw Error("select pool: router " + r.router->id() + " is not calibrated");
    out.push_back({r.router->id(), r.router->win_rates(texts), r.calibration});
  }
  return out;
}

}  // namespace detail

// Queries strictly below every router's threshold, ordered by id.
inline std::vector<Query> select_normal_pool(std::span<const Query> corpus,
                                             std::span<const RouterScores> scores) {
  return detail::select_pool(corpus, scores, detail::Half::Bottom);
}

// Queries at or above every router's threshold, ordered by id.
inline std::vector<Query> select_complex_pool(std::span<const Query> corpus,
                                              std::span<const RouterScores> scores) {
  return detail::select_pool(corpus, scores, detail::Half::Top);
}

inline std::vector<Query> select_normal_pool(std::span<const Query> corpus,
                                             std::span<const DeployedRouter> routers) {
  const auto s = detail::score_all(corpus, routers);
  return select_normal_pool(corpus, s);
}

inline std::vector<Query> select_complex_pool(std::span<const Query> corpus,
                                              std::span<const DeployedRouter> routers) {
  const auto s = detail::score_all(corpus, routers);
  return select_complex_pool(corpus, s);
}

}  // namespace rrw
