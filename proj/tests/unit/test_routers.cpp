#include <algorithm>
#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "rrw/routers.hpp"
#include "test_util.hpp"

namespace rrw {
namespace {

Vec vec(std::initializer_list<double> xs) {
  Vec v(static_cast<Eigen::Index>(xs.size()));
  Eigen::Index i = 0;
  for (double x : xs) v[i++] = x;
  return v;
}

TEST(ClsWinRate, ReadsStrongComponent) {
  EXPECT_DOUBLE_EQ(cls_win_rate_from_probs(vec({0.4, 0.4, 0.2})), 0.4);
  const Vec uniform = ops::softmax(Mat::Zero(3, 1)).col(0);
  EXPECT_NEAR(uniform.sum(), 1.0, 1e-9);
  EXPECT_NEAR(cls_win_rate_from_probs(uniform), 1.0 / 3.0, 1e-12);
  EXPECT_THROW(cls_win_rate_from_probs(vec({0.5, 0.5})), Error);
}

TEST(MfWinRate, SigmoidOfDeltaDifference) {
  EXPECT_DOUBLE_EQ(mf_win_rate_from_delta(1.3, 1.3), 0.5);
  EXPECT_NEAR(mf_win_rate_from_delta(std::log(3.0), 0.0), 0.75, 1e-12);
  EXPECT_NEAR(mf_win_rate_from_delta(0.0, std::log(3.0)), 0.25, 1e-12);
  double prev = 0;
  for (double d = -5; d <= 5; d += 0.25) {
    const double w = mf_win_rate_from_delta(d, 0);
    EXPECT_GT(w, prev);
    prev = w;
  }
}

TEST(MfRouter, BiasOnlyParametersGiveClosedForm) {
  MfRouter r;
  r.set_parameters(Mat::Zero(4, kHashedDim), Vec::Zero(4), Vec::Zero(4), std::log(3.0), 0.0);
  EXPECT_NEAR(r.win_rate("anything"), 0.75, 1e-12);
  MfRouter untrained;
  EXPECT_THROW(untrained.win_rate("x"), Error);
}

TEST(MfRouter, PositiveScalingPreservesOrdering) {
  Rng rng(3);
  Mat W(4, kHashedDim);
  for (Eigen::Index i = 0; i < W.size(); ++i) W.data()[i] = rng.normal();
  const Vec ms = vec({1, -0.5, 0.3, 2}), mw = vec({0.2, 0.1, -1, 0.4});
  MfRouter a, b;
  a.set_parameters(W, ms, mw, 0, 0);
  b.set_parameters(3.5 * W, ms, mw, 0, 0);
  const std::vector<std::string> texts{"what is 2+2", "prove the theorem carefully", "capital of peru",
                                       "design a cache", "name a fruit"};
  const auto wa = a.win_rates(texts), wb = b.win_rates(texts);
  for (std::size_t i = 0; i < texts.size(); ++i) {
    EXPECT_NEAR(wa[i], a.win_rate(texts[i]), 1e-12);
    for (std::size_t j = 0; j < texts.size(); ++j) EXPECT_EQ(wa[i] < wa[j], wb[i] < wb[j]);
  }
}

TEST(LlmWinRate, TailSumExamples) {
  EXPECT_NEAR(llm_win_rate_from_probs(vec({0, 0, 0, 0.5, 0.5}), 4), 0.0, 1e-12);
  EXPECT_NEAR(llm_win_rate_from_probs(Vec::Constant(5, 0.2), 4), 0.6, 1e-12);
  Rng rng(1);
  for (int t = 0; t < 10; ++t) {
    Vec p(5);
    for (int i = 0; i < 5; ++i) p[i] = rng.uniform();
    p /= p.sum();
    EXPECT_NEAR(llm_win_rate_from_probs(p, 1), 0.0, 1e-12);
  }
  EXPECT_THROW(llm_win_rate_from_probs(Vec::Constant(5, 0.2), 0), Error);
  EXPECT_THROW(llm_win_rate_from_probs(Vec::Constant(5, 0.2), 6), Error);
}

TEST(Route, ThresholdRule) {
  EXPECT_EQ(route(WinRate(0.7), 0.7).model, ModelChoice::Strong);
  EXPECT_EQ(route(WinRate(0.69), 0.7).model, ModelChoice::Weak);
  for (double w : {0.0, 0.3, 1.0}) EXPECT_EQ(route(WinRate(w), 0.0).model, ModelChoice::Strong);
  EXPECT_THROW(route(WinRate(0.5), 1.5), Error);
  EXPECT_THROW(WinRate(-0.1), Error);
  EXPECT_THROW(WinRate(std::nan("")), Error);
}

TEST(Calibration, EvenSizeSelectsExactHalf) {
  const std::vector<double> even{0.4, 0.1, 0.3, 0.2};
  const auto c = calibrate_threshold(even, "r", "corpus-a");
  EXPECT_EQ(c.corpus_id, "corpus-a");
  // Enumerate both middle elements and keep the one selecting exactly half.
  auto rate = [&](double alpha) {
    return std::count_if(even.begin(), even.end(), [&](double w) { return w >= alpha; }) / 4.0;
  };
  EXPECT_DOUBLE_EQ(rate(0.2), 0.75);
  EXPECT_DOUBLE_EQ(rate(0.3), 0.5);
  EXPECT_DOUBLE_EQ(c.alpha, 0.3);
  EXPECT_DOUBLE_EQ(calibrate_threshold(std::vector<double>{0.9, 0.1, 0.5}, "r", "c").alpha, 0.5);
  EXPECT_THROW(calibrate_threshold(std::vector<double>{}, "r", "c"), Error);
}

TEST(Calibration, SelectionRateWithinOneOverN) {
  Rng rng(12);
  for (int n : {11, 50, 101, 400}) {
    std::vector<double> w(static_cast<std::size_t>(n));
    for (auto& x : w) x = std::round(rng.uniform() * 20) / 20;  // heavy ties
    const auto c = calibrate_threshold(w, "r", "c");
    const double sel = std::count_if(w.begin(), w.end(), [&](double x) { return x >= c.alpha; }) / double(n);
    const auto ties = std::count(w.begin(), w.end(), c.alpha);
    EXPECT_LE(std::abs(sel - 0.5), 1.0 / n + static_cast<double>(ties) / n);
  }
  std::vector<double> distinct(100);
  std::iota(distinct.begin(), distinct.end(), 0.0);
  for (auto& x : distinct) x /= 100;
  const auto c = calibrate_threshold(distinct, "r", "c");
  EXPECT_EQ(std::count_if(distinct.begin(), distinct.end(), [&](double x) { return x >= c.alpha; }), 50);
}

TEST(BradleyTerry, MatchesGridSearchOracle) {
  const std::vector<WeightedOutcome> obs{{0.9, Outcome::StrongWins}, {0.5, Outcome::WeakWins}, {0.1, Outcome::StrongWins}};
  auto ll = [&](double xi) {
    double s = 0;
    const double p = 1 / (1 + std::exp(-xi));
    for (const auto& o : obs) {
      const double y = o.outcome == Outcome::StrongWins ? 1 : o.outcome == Outcome::Tie ? 0.5 : 0;
      s += o.weight * (y * std::log(p) + (1 - y) * std::log(1 - p));
    }
    return s;
  };
  double best = -10, best_ll = -1e300;
  for (double xi = -10; xi <= 10; xi += 1e-4) {
    const double v = ll(xi);
    if (v > best_ll) {
      best_ll = v;
      best = xi;
    }
  }
  const auto fit = fit_bradley_terry(obs);
  EXPECT_EQ(fit.xi_weak, 0.0);
  EXPECT_NEAR(bt_win_rate(fit), 1 / (1 + std::exp(-best)), 1e-3);
  EXPECT_NEAR(bt_win_rate(fit), 1.0 / 1.5, 1e-6);  // weighted strong share
  EXPECT_NEAR(bt_log_likelihood(obs, fit.xi_strong), ll(fit.xi_strong), 1e-12);
}

TEST(BradleyTerry, DegenerateCases) {
  const std::vector<WeightedOutcome> strong(5, {0.8, Outcome::StrongWins});
  EXPECT_DOUBLE_EQ(fit_bradley_terry(strong).xi_strong, kXiClamp);
  EXPECT_GT(bt_win_rate(fit_bradley_terry(strong)), 0.9999);
  const std::vector<WeightedOutcome> balanced{{0.4, Outcome::StrongWins}, {0.4, Outcome::WeakWins},
                                              {0.4, Outcome::StrongWins}, {0.4, Outcome::WeakWins}};
  EXPECT_NEAR(bt_win_rate(fit_bradley_terry(balanced)), 0.5, 1e-6);
  const std::vector<WeightedOutcome> ties(3, {1.0, Outcome::Tie});
  EXPECT_NEAR(bt_win_rate(fit_bradley_terry(ties)), 0.5, 1e-6);
  EXPECT_THROW(fit_bradley_terry(std::vector<WeightedOutcome>{{-1, Outcome::Tie}}), Error);
}

TEST(SwRouter, EmptyStoreAndRetrieval) {
  SwRouter empty;
  EXPECT_THROW(empty.win_rate("x"), Error);
  EXPECT_THROW(empty.train(std::vector<Query>{}, std::vector<PreferenceRecord>{}, RouterTrainConfig{}), Error);
  SwRouter idx(2);
  idx.index(std::vector<std::string>{}, std::vector<Outcome>{});
  EXPECT_THROW(idx.win_rate("x"), Error);

  SwRouter r(2);
  r.index(std::vector<std::string>{"integral of x squared", "integral of x cubed", "capital of france"},
          std::vector<Outcome>{Outcome::StrongWins, Outcome::StrongWins, Outcome::WeakWins});
  const auto nb = r.neighbours(embed_hashed("integral of x squared"));
  ASSERT_EQ(nb.size(), 2u);
  EXPECT_NEAR(nb[0].weight, 1.0, 1e-9);
  EXPECT_GE(nb[0].weight, nb[1].weight);
  EXPECT_GT(r.win_rate("integral of x squared"), 0.99);
}

class TrainedRouters : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    corpus_ = new std::vector<Query>(generate_synthetic_corpus(31, 250, 250));
    prefs_ = new std::vector<PreferenceRecord>(synthesize_preferences(*corpus_, 31));
    vocab_ = new Vocabulary(Vocabulary::build(texts_of(*corpus_)));
  }
  static void TearDownTestSuite() {
    delete corpus_;
    delete prefs_;
    delete vocab_;
  }
  static RouterTrainConfig cfg() {
    RouterTrainConfig c;
    c.train.max_epochs = 6;
    c.train.seed = 5;
    return c;
  }
  static std::vector<Query>* corpus_;
  static std::vector<PreferenceRecord>* prefs_;
  static Vocabulary* vocab_;
};
std::vector<Query>* TrainedRouters::corpus_ = nullptr;
std::vector<PreferenceRecord>* TrainedRouters::prefs_ = nullptr;
Vocabulary* TrainedRouters::vocab_ = nullptr;

TEST_F(TrainedRouters, ComplexScoresAboveSimple) {
  const auto test = generate_synthetic_corpus(77, 100, 100);
  for (auto kind : kAllRouters) {
    auto r = make_router(kind, *vocab_, cfg());
    EXPECT_THROW(r->win_rate("x"), Error) << r->id();
    r->train(*corpus_, *prefs_, cfg());
    const auto w = r->win_rates(texts_of(test));
    double sc = 0, ss = 0;
    for (std::size_t i = 0; i < test.size(); ++i) {
      EXPECT_GE(w[i], 0.0);
      EXPECT_LE(w[i], 1.0);
      (test[i].complexity == Complexity::Complex ? sc : ss) += w[i];
    }
    EXPECT_GT(sc / 100, ss / 100) << r->id();
  }
}

TEST_F(TrainedRouters, RetrainingIsDeterministicAndCheckpointsRoundTrip) {
  test::TempDir dir;
  for (auto kind : kAllRouters) {
    auto a = make_router(kind, *vocab_, cfg());
    auto b = make_router(kind, *vocab_, cfg());
    a->train(*corpus_, *prefs_, cfg());
    b->train(*corpus_, *prefs_, cfg());
    std::ostringstream sa, sb;
    a->to_checkpoint().write(sa);
    b->to_checkpoint().write(sb);
    EXPECT_EQ(sa.str(), sb.str()) << a->id();

    const auto path = dir.str(a->id() + ".ckpt");
    a->to_checkpoint().save(path);
    auto c = make_router(kind, *vocab_, cfg());
    c->from_checkpoint(Checkpoint::load(path));
    for (const auto& q : std::span(*corpus_).first(20)) EXPECT_EQ(a->win_rate(q.text), c->win_rate(q.text));
  }
}

TEST_F(TrainedRouters, LlmGradientMatchesFiniteDifferences) {
  TokenMeanRouter r(*vocab_);
  r.train(*corpus_, *prefs_, cfg());
  const Vec p = r.pooled(vocab_->encode((*corpus_)[0].text));
  Vec g;
  const double w = r.win_rate_and_grad(p, g);
  EXPECT_NEAR(w, r.win_rate_from_pooled(p), 1e-12);
  const double h = 1e-6;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    Vec pp = p, pm = p;
    pp[i] += h;
    pm[i] -= h;
    const double fd = (r.win_rate_from_pooled(pp) - r.win_rate_from_pooled(pm)) / (2 * h);
    EXPECT_NEAR(fd, g[i], 1e-7 + 1e-4 * std::abs(fd));
  }
}

}  // namespace
}  // namespace rrw
