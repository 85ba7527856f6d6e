#pragma once

// Tokenization, the vocabulary, feature-hashed sentence vectors and the
// trainable token-embedding table.

#include <Eigen/Dense>

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "rrw/common.hpp"

namespace rrw {

inline constexpr std::size_t kMaxSequenceLength = 256;
inline constexpr int kHashedDim = 512;
inline constexpr int kTokenDim = 32;

// Lowercases ASCII, splits on whitespace, and emits each ASCII punctuation
// character as its own token. Bytes >= 0x80 are treated as word characters so
// any UTF-8 input is accepted.
inline std::vector<std::string> tokenize_words(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  };
  for (unsigned char c : text) {
    if (c >= 0x80 || std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (std::isspace(c) || std::iscntrl(c)) {
      flush();
    } else {
      flush();
      out.emplace_back(1, static_cast<char>(c));
    }
  }
  flush();
  return out;
}

// Tokens re-joined by single spaces; tokenize_words is idempotent on this.
inline std::string normalize_text(std::string_view text) {
  std::string out;
  for (const auto& tok : tokenize_words(text)) {
    if (!out.empty()) out.push_back(' ');
    out += tok;
  }
  return out;
}

struct TokenSeq {
  std::vector<int> ids;

  std::size_t size() const { return ids.size(); }
  bool empty() const { return ids.empty(); }
};

class Vocabulary {
 public:
  static constexpr int kUnk = 0;
  static constexpr std::string_view kUnkToken = "<unk>";

  Vocabulary() { add(std::string(kUnkToken)); }

  // Builds from texts; tokens seen fewer than min_count times map to UNK.
  // Index order is first appearance, so the result is deterministic.
  static Vocabulary build(std::span<const std::string> texts,
                          int min_count = 1) {
    std::unordered_map<std::string, int> counts;
    std::vector<std::string> order;
    for (const auto& t : texts) {
      for (auto& tok : tokenize_words(t)) {
        auto [it, inserted] = counts.try_emplace(tok, 0);
        if (inserted) order.push_back(tok);
        ++it->second;
      }
    }
    Vocabulary v;
    for (const auto& tok : order) {
      if (counts[tok] >= min_count) v.add(tok);
    }
    return v;
  }

  int add(const std::string& token) {
    auto [it, inserted] =
        index_.try_emplace(token, static_cast<int>(tokens_.size()));
    if (inserted) tokens_.push_back(token);
    return it->second;
  }

  int lookup(std::string_view token) const {
    auto it = index_.find(std::string(token));
    return it == index_.end() ? kUnk : it->second;
  }

  const std::string& token(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
      throw Error("Vocabulary::token: index out of range");
    }
    return tokens_[static_cast<std::size_t>(id)];
  }

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  TokenSeq encode(std::string_view text,
                  std::size_t max_len = kMaxSequenceLength) const {
    TokenSeq seq;
    for (const auto& tok : tokenize_words(text)) {
      if (seq.ids.size() >= max_len) break;
      seq.ids.push_back(lookup(tok));
    }
    return seq;
  }

  std::string decode(std::span<const int> ids) const {
    std::string out;
    for (int id : ids) {
      if (!out.empty()) out.push_back(' ');
      out += token(id);
    }
    return out;
  }

  // One token per line; line number is the index.
  void save(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw Error("cannot write vocabulary: " + path);
    for (const auto& t : tokens_) os << t << '\n';
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw MissingArtifact("cannot read vocabulary: " + path);
    Vocabulary v;
    v.tokens_.clear();
    v.index_.clear();
    std::string line;
    while (std::getline(is, line)) v.add(line);
    if (v.tokens_.empty() || v.tokens_[0] != kUnkToken) {
      throw Error("vocabulary file does not start with <unk>: " + path);
    }
    return v;
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

// Convenience: tokenize against a vocabulary with the default truncation.
inline TokenSeq tokenize(std::string_view text, const Vocabulary& vocab) {
  return vocab.encode(text);
}

namespace detail {
inline constexpr std::uint64_t kWordBasis = kFnvOffset ^ 0x77ULL;
inline constexpr std::uint64_t kCharBasis = kFnvOffset ^ 0x63ULL;

inline void add_hashed(Eigen::VectorXd& v, std::uint64_t h) {
  const auto bucket = static_cast<Eigen::Index>(h % static_cast<std::uint64_t>(v.size()));
  v[bucket] += (h >> 63) ? -1.0 : 1.0;
}
}  // namespace detail

// Signed feature hashing of word unigrams plus character 3..5-grams of the
// normalized text (padded with one space on each side), L2-normalized.
// Empty input yields the zero vector.
inline Eigen::VectorXd embed_hashed(std::string_view text,
                                    int dim = kHashedDim) {
  Eigen::VectorXd v = Eigen::VectorXd::Zero(dim);
  const auto words = tokenize_words(text);
  if (words.empty()) return v;
  std::string padded = " ";
  for (std::size_t i = 0; i < words.size(); ++i) {
    detail::add_hashed(v, fnv1a64(words[i], detail::kWordBasis));
    if (i) padded.push_back(' ');
    padded += words[i];
  }
  padded.push_back(' ');
  const std::string_view sv = padded;
  for (std::size_t n = 3; n <= 5; ++n) {
    for (std::size_t i = 0; i + n <= sv.size(); ++i) {
      detail::add_hashed(v, fnv1a64(sv.substr(i, n), detail::kCharBasis + n));
    }
  }
  const double norm = v.norm();
  if (norm > 0.0) v /= norm;
  return v;
}

inline double cosine(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  if (a.size() != b.size()) throw Error("cosine: dimension mismatch");
  const double na = a.norm();
  const double nb = b.norm();
  if (na == 0.0 || nb == 0.0) throw Error("cosine: zero vector");
  return std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
}

// Trainable per-token rows (|V| x d_tok).
struct EmbeddingTable {
  Eigen::MatrixXd rows;

  static EmbeddingTable random(std::size_t vocab_size, int dim, Rng& rng,
                               double scale = 0.1) {
    EmbeddingTable t;
    t.rows.resize(static_cast<Eigen::Index>(vocab_size), dim);
    for (Eigen::Index i = 0; i < t.rows.rows(); ++i)
      for (Eigen::Index j = 0; j < t.rows.cols(); ++j)
        t.rows(i, j) = scale * rng.normal();
    return t;
  }

  Eigen::Index vocab_size() const { return rows.rows(); }
  Eigen::Index dim() const { return rows.cols(); }
};

struct TokenEmbedding {
  Eigen::MatrixXd per_token;  // n x d
  Eigen::VectorXd pooled;     // mean over tokens (zero when n == 0)
};

inline void check_indices(const TokenSeq& seq, const EmbeddingTable& table) {
  for (int id : seq.ids) {
    if (id < 0 || id >= table.vocab_size()) {
      throw Error("embed_tokens: token index out of range");
    }
  }
}

inline TokenEmbedding embed_tokens(const TokenSeq& seq,
                                   const EmbeddingTable& table) {
  check_indices(seq, table);
  TokenEmbedding out;
  const auto n = static_cast<Eigen::Index>(seq.size());
  out.per_token.resize(n, table.dim());
  out.pooled = Eigen::VectorXd::Zero(table.dim());
  for (Eigen::Index i = 0; i < n; ++i) {
    out.per_token.row(i) = table.rows.row(seq.ids[static_cast<std::size_t>(i)]);
    out.pooled += out.per_token.row(i).transpose();
  }
  if (n > 0) out.pooled /= static_cast<double>(n);
  return out;
}

// Backward of mean pooling: adds d(pooled)/d(row) * grad_pooled into the
// table-shaped gradient for every occurrence of every token.
inline void mean_pool_backward(const TokenSeq& seq,
                               const Eigen::VectorXd& grad_pooled,
                               Eigen::MatrixXd& grad_table) {
  if (seq.empty()) return;
  const double inv = 1.0 / static_cast<double>(seq.size());
  for (int id : seq.ids) grad_table.row(id) += inv * grad_pooled.transpose();
}

}  // namespace rrw
