#pragma once

// Comparison defenses: bigram-perplexity filtering and multi-router voting.

#include <cmath>
#include <fstream>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "rrw/embedding.hpp"
#include "rrw/guard.hpp"
#include "rrw/routers.hpp"

namespace rrw {

// Add-k smoothed bigram model over word tokens with a sentence-start
// context. Unknown tokens share one extra vocabulary slot.
class BigramLM {
 public:
  static constexpr std::string_view kBos = "<s>";
  static constexpr std::string_view kUnkTok = "<unk>";

  explicit BigramLM(double k = 0.5) : k_(k) {
    if (k < 0) throw Error("BigramLM: k must be >= 0");
  }

  void fit(std::span<const std::string> texts) {
    unigram_.clear();
    bigram_.clear();
    context_.clear();
    for (const auto& t : texts)
      for (const auto& w : tokenize_words(t)) unigram_[w] += 1;
    unigram_[std::string(kUnkTok)] += 0;
    for (const auto& t : texts) {
      std::string prev(kBos);
      for (const auto& w : tokenize_words(t)) {
        bigram_[prev][w] += 1;
        context_[prev] += 1;
        prev = w;
      }
    }
  }

  std::size_t vocab_size() const { return unigram_.size(); }
  double k() const { return k_; }

  std::string map(const std::string& w) const {
    return unigram_.count(w) ? w : std::string(kUnkTok);
  }

  // P(w | prev) with add-k smoothing; falls back to uniform for an unseen
  // context when k = 0.
  double prob(const std::string& prev, const std::string& w) const {
    const double V = static_cast<double>(vocab_size());
    if (V == 0) throw Error("BigramLM: not trained");
    const auto cit = context_.find(prev);
    const double cctx = cit == context_.end() ? 0.0 : cit->second;
    double cbi = 0;
    if (auto bit = bigram_.find(prev); bit != bigram_.end()) {
      if (auto wit = bit->second.find(w); wit != bit->second.end()) cbi = wit->second;
    }
    const double denom = cctx + k_ * V;
    if (denom == 0) return 1.0 / V;
    return (cbi + k_) / denom;
  }

  double perplexity(std::string_view text) const {
    const auto words = tokenize_words(text);
    if (words.empty()) throw Error("perplexity: empty text");
    double nll = 0;
    std::string prev(kBos);
    for (const auto& raw : words) {
      const std::string w = map(raw);
      const double p = prob(prev, w);
      if (p <= 0) return std::numeric_limits<double>::infinity();
      nll -= std::log(p);
      prev = w;
    }
    return std::exp(nll / static_cast<double>(words.size()));
  }

  // Counts file: "k <k>", then "u <word> <count>" and "b <prev> <word> <count>".
  void save(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw Error("cannot write " + path);
    os.precision(17);
    os << "k " << k_ << '\n';
    std::map<std::string, double> u(unigram_.begin(), unigram_.end());
    for (const auto& [w, c] : u) os << "u " << w << ' ' << c << '\n';
    std::map<std::string, std::map<std::string, double>> b;
    for (const auto& [p, m] : bigram_) b[p] = std::map<std::string, double>(m.begin(), m.end());
    for (const auto& [p, m] : b)
      for (const auto& [w, c] : m) os << "b " << p << ' ' << w << ' ' << c << '\n';
  }
  static BigramLM load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw MissingArtifact("cannot read " + path);
    std::string tag;
    double k = 0.5;
    BigramLM lm;
    while (is >> tag) {
      if (tag == "k") {
        is >> k;
        lm.k_ = k;
      } else if (tag == "u") {
        std::string w;
        double c;
        is >> w >> c;
        lm.unigram_[w] = c;
      } else if (tag == "b") {
        std::string p, w;
        double c;
        is >> p >> w >> c;
        lm.bigram_[p][w] = c;
        lm.context_[p] += c;
      } else {
        throw Error("bad LM file " + path);
      }
    }
    return lm;
  }

 private:
  double k_;
  std::unordered_map<std::string, double> unigram_;
  std::unordered_map<std::string, std::unordered_map<std::string, double>> bigram_;
  std::unordered_map<std::string, double> context_;
};

struct PPLThreshold {
  double value = 0;
  std::string corpus_id;
};

inline PPLThreshold calibrate_ppl_threshold(const BigramLM& lm, std::span<const std::string> benign,
                                            std::string corpus_id = "") {
  if (benign.empty()) throw Error("calibrate_ppl_threshold: empty corpus");
  double mx = 0;
  for (const auto& t : benign) mx = std::max(mx, lm.perplexity(t));
  return {mx, std::move(corpus_id)};
}

inline GuardDecision ppl_filter(const BigramLM& lm, const PPLThreshold& th, std::string_view text) {
  return lm.perplexity(text) > th.value ? GuardDecision::Block : GuardDecision::Forward;
}

// Majority of per-router decisions; an even split goes Weak.
inline ModelChoice majority_vote(std::span<const ModelChoice> votes) {
  if (votes.empty()) throw Error("majority_vote: no votes");
  std::size_t strong = 0;
  for (auto v : votes) strong += v == ModelChoice::Strong;
  return 2 * strong > votes.size() ? ModelChoice::Strong : ModelChoice::Weak;
}

inline ModelChoice multi_router_route(std::span<const DeployedRouter> routers, std::string_view text) {
  std::vector<ModelChoice> votes;
  for (const auto& r : routers) votes.push_back(r.decide(text).model);
  return majority_vote(votes);
}

}  // namespace rrw
