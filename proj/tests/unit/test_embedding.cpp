#include <cmath>
#include <sstream>

#include <gtest/gtest.h>

#include "rrw/embedding.hpp"
#include "test_util.hpp"

namespace rrw {
namespace {

TEST(Hashing, Fnv1aKnownVectors) {
  EXPECT_EQ(fnv1a64(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(fnv1a64("a"), 0xaf63dc4c8601ec8cULL);
  EXPECT_EQ(fnv1a64("foobar"), 0x85944171f73967e8ULL);
}

TEST(Hashing, DeriveSeedSeparatesLabels) {
  EXPECT_EQ(derive_seed(1, "x"), derive_seed(1, "x"));
  EXPECT_NE(derive_seed(1, "x"), derive_seed(1, "y"));
  EXPECT_NE(derive_seed(1, "x"), derive_seed(2, "x"));
  EXPECT_EQ(hex64(0xabcULL), "0000000000000abc");
}

TEST(Rng, BelowStaysInRangeAndCoversIt) {
  Rng rng(3);
  std::vector<int> seen(7, 0);
  for (int i = 0; i < 7000; ++i) ++seen[rng.below(7)];
  for (int c : seen) EXPECT_NEAR(c, 1000, 150);
  EXPECT_THROW(rng.below(0), Error);
}

TEST(Tokenize, SplitsPunctuationAndLowercases) {
  EXPECT_EQ(tokenize_words("Hello, world"),
            (std::vector<std::string>{"hello", ",", "world"}));
  const auto vocab = Vocabulary::build(std::vector<std::string>{"hello , world"});
  const auto seq = tokenize("Hello, world", vocab);
  ASSERT_EQ(seq.size(), 3u);
  EXPECT_EQ(vocab.decode(seq.ids), "hello , world");
}

TEST(Tokenize, TruncatesTo256) {
  std::string text;
  for (int i = 0; i < 400; ++i) text += "w" + std::to_string(i) + " ";
  const auto vocab = Vocabulary::build(std::vector<std::string>{text});
  EXPECT_EQ(tokenize(text, vocab).size(), 256u);
  EXPECT_EQ(tokenize_words(text).size(), 400u);
}

TEST(Tokenize, EmptyAndUnknown) {
  Vocabulary vocab;
  EXPECT_TRUE(tokenize("", vocab).empty());
  const auto seq = tokenize("never seen", vocab);
  ASSERT_EQ(seq.size(), 2u);
  EXPECT_EQ(seq.ids[0], Vocabulary::kUnk);
  EXPECT_EQ(seq.ids[1], Vocabulary::kUnk);
}

TEST(Tokenize, IdempotentOnNormalizedText) {
  const std::string fixture = "What's the capital of France?  Tell me (briefly)!";
  const auto vocab = Vocabulary::build(std::vector<std::string>{fixture});
  const std::string once = vocab.decode(tokenize(fixture, vocab).ids);
  const std::string twice = vocab.decode(tokenize(once, vocab).ids);
  EXPECT_EQ(once, twice);
  EXPECT_EQ(tokenize(once, vocab).ids, tokenize(fixture, vocab).ids);
}

TEST(Vocabulary, SaveLoadRoundTrip) {
  test::TempDir dir;
  const auto v = Vocabulary::build(std::vector<std::string>{"b a c a", "d"});
  v.save(dir.str("vocab.txt"));
  const auto w = Vocabulary::load(dir.str("vocab.txt"));
  EXPECT_EQ(v.tokens(), w.tokens());
  EXPECT_EQ(w.lookup("<unk>"), Vocabulary::kUnk);
  EXPECT_EQ(w.lookup("c"), v.lookup("c"));
}

TEST(EmbedHashed, DeterministicAndUnitNorm) {
  const auto a = embed_hashed("abc");
  const auto b = embed_hashed("abc");
  EXPECT_EQ(a.size(), kHashedDim);
  EXPECT_TRUE(a == b);
  for (const char* s : {"abc", "x", "Solve 2+2 step by step", "\xE2\x88\x91 \xF0\x9F\x98\x80"}) {
    EXPECT_NEAR(embed_hashed(s).norm(), 1.0, 1e-6) << s;
  }
  EXPECT_EQ(embed_hashed("").norm(), 0.0);
}

TEST(EmbedHashed, ParaphraseCloserThanUnrelated) {
  const auto a = embed_hashed("solve the integral step by step");
  const auto b = embed_hashed("solve this integral stepwise");
  const auto c = embed_hashed("what is the capital of France");
  EXPECT_GT(cosine(a, b), cosine(a, c));
}

TEST(EmbedHashed, TotalOnArbitraryBytes) {
  Rng rng(11);
  for (int t = 0; t < 50; ++t) {
    std::string s;
    for (int i = 0; i < 40; ++i) s.push_back(static_cast<char>(rng.below(256)));
    const auto v = embed_hashed(s);
    EXPECT_TRUE(v.allFinite());
  }
}

TEST(Cosine, Examples) {
  Eigen::VectorXd v(3);
  v << 0.3, -1.2, 2.0;
  EXPECT_NEAR(cosine(v, v), 1.0, 1e-12);
  EXPECT_NEAR(cosine(v, -v), -1.0, 1e-12);
  EXPECT_NEAR(cosine(Eigen::Vector2d(1, 0), Eigen::Vector2d(0, 1)), 0.0, 1e-12);
  EXPECT_THROW(cosine(v, Eigen::VectorXd::Zero(3)), Error);
  EXPECT_THROW(cosine(v, Eigen::VectorXd::Ones(2)), Error);
}

TEST(Cosine, SymmetricAndScaleInvariant) {
  Rng rng(5);
  for (int t = 0; t < 20; ++t) {
    Eigen::VectorXd a(6), b(6);
    for (int i = 0; i < 6; ++i) {
      a[i] = rng.normal();
      b[i] = rng.normal();
    }
    const double alpha = 0.1 + 10 * rng.uniform();
    EXPECT_NEAR(cosine(a, b), cosine(b, a), 1e-12);
    EXPECT_NEAR(cosine(alpha * a, b), cosine(a, b), 1e-12);
    EXPECT_LE(std::abs(cosine(a, b)), 1.0);
  }
}

TEST(EmbedTokens, SingleTokenPoolsToItsRow) {
  Rng rng(1);
  const auto table = EmbeddingTable::random(5, kTokenDim, rng);
  const auto out = embed_tokens(TokenSeq{{3}}, table);
  EXPECT_TRUE(out.pooled.isApprox(table.rows.row(3).transpose()));
  EXPECT_THROW(embed_tokens(TokenSeq{{5}}, table), Error);
  EXPECT_THROW(embed_tokens(TokenSeq{{-1}}, table), Error);
}

TEST(EmbedTokens, PermutationInvariantPool) {
  Rng rng(2);
  const auto table = EmbeddingTable::random(8, 4, rng);
  const auto a = embed_tokens(TokenSeq{{1, 4, 4, 7, 2}}, table);
  const auto b = embed_tokens(TokenSeq{{7, 2, 4, 1, 4}}, table);
  EXPECT_LT((a.pooled - b.pooled).norm(), 1e-12);
}

TEST(EmbedTokens, PoolGradientMatchesFiniteDifferences) {
  Rng rng(9);
  auto table = EmbeddingTable::random(6, 4, rng);
  const TokenSeq seq{{2, 5, 2, 0}};
  Eigen::VectorXd w(4);
  w << 0.7, -1.3, 0.4, 2.1;
  auto loss = [&](const EmbeddingTable& t) {
    const auto p = embed_tokens(seq, t).pooled;
    return std::sin(w.dot(p)) + p.squaredNorm();
  };
  const auto p = embed_tokens(seq, table).pooled;
  const Eigen::VectorXd grad_pooled = std::cos(w.dot(p)) * w + 2 * p;
  Eigen::MatrixXd grad = Eigen::MatrixXd::Zero(6, 4);
  mean_pool_backward(seq, grad_pooled, grad);
  const double h = 1e-6;
  for (int row : {0, 2, 5}) {
    for (int c = 0; c < 4; ++c) {
      auto plus = table, minus = table;
      plus.rows(row, c) += h;
      minus.rows(row, c) -= h;
      const double fd = (loss(plus) - loss(minus)) / (2 * h);
      EXPECT_LT(test::rel_err(fd, grad(row, c)), 1e-4) << row << "," << c;
    }
  }
  EXPECT_EQ(grad.row(1).norm(), 0.0);
}

}  // namespace
}  // namespace rrw
