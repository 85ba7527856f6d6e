#include <algorithm>
#include <cmath>
#include <sstream>

#include <gtest/gtest.h>

#include "rrw/guard.hpp"
#include "test_util.hpp"

namespace rrw {
namespace {

std::vector<Query> simple_queries(std::uint64_t seed, std::size_t n, std::string prefix) {
  CorpusOptions opts;
  opts.id_prefix = std::move(prefix);
  opts.noise_fraction = 0;
  auto c = generate_synthetic_corpus(seed, n, 1, opts);
  std::erase_if(c, [](const Query& q) { return q.complexity != Complexity::Simple; });
  return c;
}

std::vector<Trigger> random_triggers(std::uint64_t seed, std::size_t n) {
  const auto src = generate_synthetic_corpus(seed, 50, 50);
  const auto vocab = Vocabulary::build(texts_of(src));
  Rng rng(seed);
  std::vector<Trigger> out;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<int> ids;
    for (int k = 0; k < 10; ++k) ids.push_back(1 + static_cast<int>(rng.below(vocab.size() - 1)));
    out.push_back({"t" + std::to_string(i), TriggerMethod::GrayBox, vocab.decode(ids), Split::Unassigned});
  }
  return out;
}

GuardConfig small_config() {
  GuardConfig cfg;
  cfg.encoder_hidden = 32;
  cfg.encoder_out = 16;
  cfg.projection_dim = 8;
  cfg.classifier_hidden = 8;
  cfg.warmup_steps = 10;
  cfg.train.max_epochs = 15;
  cfg.train.batch_size = 32;
  cfg.train.seed = 3;
  return cfg;
}

// Direct double-sum SupCon, written independently of the batched version.
double supcon_oracle(const Mat& Z, const std::vector<int>& labels, double tau, const Mat& W) {
  const auto m = Z.cols();
  double total = 0;
  int anchors = 0;
  for (Eigen::Index i = 0; i < m; ++i) {
    std::vector<Eigen::Index> pos;
    for (Eigen::Index j = 0; j < m; ++j)
      if (j != i && labels[j] == labels[i]) pos.push_back(j);
    if (pos.empty()) continue;
    ++anchors;
    double denom = 0;
    for (Eigen::Index k = 0; k < m; ++k)
      if (k != i) denom += W(i, k) * std::exp(Z.col(i).dot(Z.col(k)) / tau);
    double s = 0;
    for (auto j : pos) s += std::log(std::exp(Z.col(i).dot(Z.col(j)) / tau) / denom);
    total += -s / static_cast<double>(pos.size());
  }
  return anchors ? total / anchors : 0.0;
}

Mat random_unit_columns(Rng& rng, int d, int m) {
  Mat Z(d, m);
  for (Eigen::Index i = 0; i < Z.size(); ++i) Z.data()[i] = rng.normal();
  for (int c = 0; c < m; ++c) Z.col(c).normalize();
  return Z;
}

TEST(PairDataset, CountsAndLabels) {
  const auto normal = simple_queries(1, 80, "n");
  const auto adv = build_adversarial_set(normal, random_triggers(2, 5), 3);
  const auto pairs = build_pair_dataset(normal, adv, GuardConfig{}, 4);
  ASSERT_EQ(pairs.size(), 2 * normal.size());
  std::size_t pos = 0, cross_ab = 0, cross_ba = 0;
  for (const auto& p : pairs) {
    EXPECT_EQ(p.y, pair_label(p.kind));
    pos += p.y == 0;
    if (p.kind == PairKind::NormNorm) {
      EXPECT_FALSE(is_adversarial(p.a) || is_adversarial(p.b));
    }
    if (p.kind == PairKind::AdvAdv) {
      EXPECT_TRUE(is_adversarial(p.a) && is_adversarial(p.b));
    }
    if (p.kind == PairKind::SelfNegative) {
      const auto& n = is_adversarial(p.a) ? p.b : p.a;
      const auto& a = is_adversarial(p.a) ? p.a : p.b;
      EXPECT_TRUE(a.id.starts_with(n.id + "+"));
    }
    if (p.y == 1) (is_adversarial(p.a) ? cross_ba : cross_ab)++;
  }
  EXPECT_EQ(pos, normal.size());
  EXPECT_GT(cross_ab, 0u);
  EXPECT_GT(cross_ba, 0u);
  const auto again = build_pair_dataset(normal, adv, GuardConfig{}, 4);
  for (std::size_t i = 0; i < pairs.size(); ++i) EXPECT_EQ(pairs[i].a.text + pairs[i].b.text, again[i].a.text + again[i].b.text);
  EXPECT_THROW(build_pair_dataset(std::vector<Query>{}, adv, GuardConfig{}, 4), Error);
}

TEST(PairDataset, CrossRatio) {
  std::vector<Query> normal;
  for (int i = 0; i < 10000; ++i)
    normal.push_back({"n" + std::to_string(i), "plain question " + std::to_string(i), Complexity::Simple, "", Split::Unassigned});
  const auto adv = build_adversarial_set(normal, random_triggers(6, 50), 7);
  GuardConfig cfg;
  cfg.negative_cross_ratio = 0;
  for (const auto& p : build_pair_dataset(normal, adv, cfg, 1))
    if (p.y == 1) {
      EXPECT_EQ(p.kind, PairKind::SelfNegative);
    }
  cfg.negative_cross_ratio = 0.5;
  std::size_t cross = 0, neg = 0;
  for (const auto& p : build_pair_dataset(normal, adv, cfg, 1)) {
    if (p.y != 1) continue;
    ++neg;
    cross += p.kind == PairKind::CrossNegative;
  }
  EXPECT_NEAR(static_cast<double>(cross) / neg, 0.5, 0.02);
}

TEST(SiameseModel, EncodeAndClassify) {
  const auto m = SiameseModel::make(small_config(), 1);
  const Vec a = m.encode("what is the capital of chile");
  EXPECT_NEAR(a.norm(), 1.0, 1e-6);
  EXPECT_EQ(a, m.encode("what is the capital of chile"));
  const Query q1{"x1", "same text", Complexity::Simple, "", Split::Test};
  const Query q2{"x2", "same text", Complexity::Simple, "", Split::Test};
  EXPECT_EQ(m.encode(q1.text), m.encode(q2.text));
  const Mat f = ops::pair_features(Mat(a), Mat(a));
  EXPECT_EQ(f.middleRows(2 * a.size(), a.size()).norm(), 0.0);
  const Vec b = m.encode("integrate x squared");
  const double p = m.classify_pair(a, b);
  EXPECT_GT(p, 0.0);
  EXPECT_LT(p, 1.0);
  EXPECT_THROW(m.classify_pair(a, Vec::Zero(a.size() + 1)), Error);
}

TEST(Losses, BceClosedForms) {
  EXPECT_NEAR(bce_loss(std::vector<double>{0.5}, std::vector<int>{1}), std::log(2.0), 1e-12);
  EXPECT_NEAR(bce_loss(std::vector<double>{1.0, 0.0}, std::vector<int>{1, 0}), 0.0, 1e-11);
  EXPECT_TRUE(std::isfinite(bce_loss(std::vector<double>{0.0}, std::vector<int>{1})));
  EXPECT_THROW(bce_loss(std::vector<double>{0.5}, std::vector<int>{}), Error);
}

TEST(Losses, BceLogitGradient) {
  const std::vector<double> z{-1.2, 0.3, 2.5, 0.0};
  const std::vector<int> y{0, 1, 1, 0};
  auto loss = [&](std::vector<double> zz) {
    std::vector<double> p;
    for (double v : zz) p.push_back(ops::sigmoid(v));
    return bce_loss(p, y);
  };
  const double h = 1e-6;
  for (std::size_t i = 0; i < z.size(); ++i) {
    auto zp = z, zm = z;
    zp[i] += h;
    zm[i] -= h;
    const double fd = (loss(zp) - loss(zm)) / (2 * h);
    const double analytic = (ops::sigmoid(z[i]) - y[i]) / 4.0;
    EXPECT_LT(test::rel_err(fd, analytic), 1e-5);
  }
}

TEST(Losses, SupconMatchesOracleOnFixture) {
  Mat Z(2, 4);
  Z << 1, 0.8, 0, -0.6, 0, 0.6, 1, 0.8;
  const std::vector<int> labels{0, 0, 1, 1};
  const Mat W = Mat::Ones(4, 4);
  const double expected = supcon_oracle(Z, labels, 0.5, W);
  EXPECT_NEAR(supcon_loss(Z, labels, 0.5, W), expected, 1e-12);
  EXPECT_GT(expected, 0.0);
}

TEST(Losses, SupconMatchesOracleOnRandomFixtures) {
  Rng rng(77);
  for (int t = 0; t < 50; ++t) {
    const int m = 2 * (1 + static_cast<int>(rng.below(8)));
    const Mat Z = random_unit_columns(rng, 5, m);
    std::vector<int> labels(static_cast<std::size_t>(m));
    for (auto& l : labels) l = static_cast<int>(rng.below(2));
    Mat W = Mat::Ones(m, m);
    for (Eigen::Index i = 0; i < W.size(); ++i)
      if (rng.bernoulli(0.2)) W.data()[i] = 1.2;
    const double tau = 0.05 + rng.uniform();
    EXPECT_NEAR(supcon_loss(Z, labels, tau, W), supcon_oracle(Z, labels, tau, W), 1e-9) << t;
  }
}

TEST(Losses, SupconPrefersTightPositives) {
  Mat A(3, 4), B(3, 4);
  A << 1, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1;
  B = A;
  B.col(1) << 0.6, 0.0, 0.8;
  const std::vector<int> labels{0, 0, 1, 1};
  const Mat W = Mat::Ones(4, 4);
  EXPECT_LT(supcon_oracle(A, labels, 0.5, W), supcon_oracle(B, labels, 0.5, W));
  EXPECT_LT(supcon_loss(A, labels, 0.5, W), supcon_loss(B, labels, 0.5, W));
}

TEST(Losses, SupconUniformWeightShiftsByLogRatio) {
  Rng rng(3);
  const Mat Z = random_unit_columns(rng, 4, 6);
  const std::vector<int> labels{0, 1, 0, 1, 1, 0};
  const double base = supcon_loss(Z, labels, 0.2, Mat::Ones(6, 6));
  const double weighted = supcon_loss(Z, labels, 0.2, Mat::Constant(6, 6, 1.2));
  EXPECT_NEAR(weighted - base, std::log(1.2), 1e-12);
  EXPECT_NEAR(weighted, supcon_oracle(Z, labels, 0.2, Mat::Constant(6, 6, 1.2)), 1e-12);
}

TEST(Losses, SupconGradientAndSkippedAnchors) {
  Rng rng(8);
  Mat Z = random_unit_columns(rng, 3, 5);
  const std::vector<int> labels{0, 0, 1, 1, 2};  // anchor 4 has no positive
  Mat W = Mat::Ones(5, 5);
  W(0, 2) = 1.2;
  Mat g;
  supcon_loss(Z, labels, 0.3, W, &g);
  const double h = 1e-6;
  for (Eigen::Index i = 0; i < Z.size(); ++i) {
    Mat zp = Z, zm = Z;
    zp.data()[i] += h;
    zm.data()[i] -= h;
    const double fd = (supcon_loss(zp, labels, 0.3, W) - supcon_loss(zm, labels, 0.3, W)) / (2 * h);
    EXPECT_LT(test::rel_err(fd, g.data()[i]), 1e-5);
  }
  EXPECT_NEAR(supcon_loss(Z, labels, 0.3, W), supcon_oracle(Z, labels, 0.3, W), 1e-12);
  EXPECT_EQ(supcon_loss(Z, std::vector<int>{0, 1, 2, 3, 4}, 0.3, W), 0.0);
  EXPECT_THROW(supcon_loss(Z, labels, 0.0, W), Error);
}

TEST(Losses, ContrastiveRamp) {
  EXPECT_EQ(contrastive_ramp(0, 10), 0.0);
  EXPECT_EQ(contrastive_ramp(5, 10), 0.5);
  EXPECT_EQ(contrastive_ramp(10, 10), 1.0);
  EXPECT_EQ(contrastive_ramp(50, 10), 1.0);
  EXPECT_EQ(contrastive_ramp(0, 0), 1.0);
}

class PairBatch : public ::testing::Test {
 protected:
  void SetUp() override {
    normal = simple_queries(11, 12, "n");
    adv = build_adversarial_set(normal, random_triggers(12, 4), 13);
    pairs = build_pair_dataset(normal, adv, GuardConfig{}, 14);
    pairs.resize(8);
  }
  std::vector<Query> normal, adv;
  std::vector<QueryPair> pairs;
  std::unordered_map<std::string, Vec> cache;
};

TEST_F(PairBatch, TotalLossComposition) {
  GuardConfig cfg = small_config();
  const auto m = SiameseModel::make(cfg, 2);
  const auto at0 = total_loss(m, pairs, cfg, 0, cache);
  EXPECT_DOUBLE_EQ(at0.total, cfg.lambda_bce * at0.bce);
  const auto full = total_loss(m, pairs, cfg, cfg.warmup_steps, cache);
  EXPECT_DOUBLE_EQ(full.total, cfg.lambda_bce * full.bce + cfg.lambda_contr * full.supcon);
  cfg.lambda_contr = 0;
  cfg.lambda_bce = 1;
  const auto pure = total_loss(m, pairs, cfg, 100, cache);
  EXPECT_DOUBLE_EQ(pure.total, pure.bce);
}

TEST_F(PairBatch, CompositeGradientMatchesFiniteDifferences) {
  GuardConfig cfg = small_config();
  cfg.encoder_hidden = 6;
  cfg.encoder_out = 5;
  cfg.projection_dim = 4;
  cfg.classifier_hidden = 4;
  auto m = SiameseModel::make(cfg, 9);
  SiameseGrads g;
  ParamList params;
  m.register_params(g, params);
  zero_grads(params);
  total_loss(m, pairs, cfg, cfg.warmup_steps, cache, &g);
  const double h = 1e-6;
  int checked = 0;
  for (const auto& p : params) {
    const std::size_t stride = p.size > 200 ? 37 : 1;
    for (std::size_t i = 0; i < p.size; i += stride) {
      const double orig = p.value[i];
      p.value[i] = orig + h;
      const double lp = total_loss(m, pairs, cfg, cfg.warmup_steps, cache).total;
      p.value[i] = orig - h;
      const double lm = total_loss(m, pairs, cfg, cfg.warmup_steps, cache).total;
      p.value[i] = orig;
      const double fd = (lp - lm) / (2 * h);
      EXPECT_LE(std::abs(fd - p.grad[i]), 1e-4 * std::max(std::abs(fd), std::abs(p.grad[i])) + 1e-9)
          << p.name << "[" << i << "]";
      ++checked;
    }
  }
  EXPECT_GT(checked, 100);
}

TEST(Vote, StrictMajority) {
  EXPECT_EQ(vote_decision(3, 4), GuardDecision::Block);
  EXPECT_EQ(vote_decision(2, 4), GuardDecision::Forward);
  EXPECT_EQ(vote_decision(1, 1), GuardDecision::Block);
  EXPECT_EQ(vote_decision(0, 1), GuardDecision::Forward);
  EXPECT_EQ(vote_decision(2, 3), GuardDecision::Block);
}

TEST(Vote, ReferenceSampling) {
  const auto a = sample_references(100, 4, 1, "q1");
  EXPECT_EQ(a, sample_references(100, 4, 1, "q1"));
  EXPECT_NE(a, sample_references(100, 4, 1, "q2"));
  std::vector<std::size_t> sorted = a;
  std::sort(sorted.begin(), sorted.end());
  EXPECT_EQ(std::unique(sorted.begin(), sorted.end()), sorted.end());
  for (auto i : a) EXPECT_LT(i, 100u);
  EXPECT_EQ(sample_references(2, 4, 1, "q").size(), 4u);
  EXPECT_THROW(sample_references(0, 4, 1, "q"), Error);
  EXPECT_THROW(sample_references(5, 0, 1, "q"), Error);
}

TEST(Vote, DeployMatchesPairVerdicts) {
  const auto m = SiameseModel::make(small_config(), 4);
  const auto refs = simple_queries(21, 30, "r");
  ReferencePool pool(m, refs);
  for (const char* text : {"what is 2+2", "zz qq xx integral", "name a fruit"}) {
    const auto v = deploy_vote(m, pool, text, text, 4, 5);
    int votes = 0;
    for (double p : v.pair_probs) votes += p > 0.5;
    EXPECT_EQ(v.adv_votes, votes);
    EXPECT_EQ(v.decision, vote_decision(votes, 4));
    const auto again = deploy_vote(m, pool, text, text, 4, 5);
    EXPECT_EQ(again.pair_probs, v.pair_probs);
    EXPECT_EQ(again.reference_ids, v.reference_ids);
    const auto one = deploy_vote(m, pool, text, text, 1, 5);
    ASSERT_EQ(one.pair_probs.size(), 1u);
    EXPECT_EQ(one.decision == GuardDecision::Block, one.pair_probs[0] > 0.5);
  }
}

TEST(GuardProb, ClosedForms) {
  auto m = SiameseModel::make(small_config(), 6);
  const std::vector<std::string> refs{"what is the capital of peru", "name a mammal"};
  const double single = m.classify_pair(m.encode("query text"), m.encode(refs[0]));
  EXPECT_NEAR(guard_prob(m, "query text", std::span(refs).first(1)), single, 1e-12);
  auto& last = m.classifier.layers().back();
  last.weight.setZero();
  last.bias.setConstant(-1000);
  EXPECT_EQ(guard_prob(m, "query text", refs), 0.0);
  EXPECT_THROW(guard_prob(m, "q", std::vector<std::string>{}), Error);
}

TEST(GuardProb, GradientProbe) {
  const auto m = SiameseModel::make(small_config(), 7);
  const std::vector<std::string> refs{"what is the capital of peru", "name a mammal", "spell cat"};
  const std::string q = "solve the integral step by step";
  const auto probe = probe_guard_gradients(m, q, refs);
  EXPECT_GT(probe.param_grad_norm, 0.0);
  ASSERT_EQ(probe.hashed_input_grad.size(), kHashedDim);
  // Finite differences along the hashed query vector.
  Mat er(m.dim(), 3);
  for (int i = 0; i < 3; ++i) er.col(i) = m.encode(refs[static_cast<std::size_t>(i)]);
  const Vec x = embed_hashed(q);
  auto prob_at = [&](const Vec& xq) {
    const Vec eq = m.encode_hashed(Mat(xq)).col(0);
    return m.classify_pairs(eq.replicate(1, 3), er).mean();
  };
  EXPECT_NEAR(prob_at(x), guard_prob(m, q, refs), 1e-12);
  const double h = 1e-6;
  int nonzero = 0;
  for (Eigen::Index i = 0; i < x.size(); i += 16) {
    Vec xp = x, xm = x;
    xp[i] += h;
    xm[i] -= h;
    const double fd = (prob_at(xp) - prob_at(xm)) / (2 * h);
    EXPECT_NEAR(fd, probe.hashed_input_grad[i], 1e-6 + 1e-4 * std::abs(fd));
    nonzero += fd != 0.0;
  }
  EXPECT_GT(nonzero, 0);
}

class TrainedGuard : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    const auto normal = simple_queries(31, 400, "n");
    const auto triggers = random_triggers(32, 20);
    const std::vector<Query> nt(normal.begin(), normal.begin() + 250), nv(normal.begin() + 250, normal.end());
    data_ = new Data;
    data_->nt = nt;
    data_->nv = nv;
    data_->at = build_adversarial_set(nt, triggers, 33);
    data_->av = build_adversarial_set(nv, triggers, 34);
    data_->train = build_pair_dataset(nt, data_->at, small_config(), 35);
    data_->val = build_pair_dataset(nv, data_->av, small_config(), 36);
    data_->model = train_guard(data_->train, data_->val, small_config(), &data_->log);
  }
  static void TearDownTestSuite() { delete data_; }
  struct Data {
    std::vector<Query> nt, nv, at, av;
    std::vector<QueryPair> train, val;
    SiameseModel model;
    TrainLog log;
  };
  static Data* data_;
};
TrainedGuard::Data* TrainedGuard::data_ = nullptr;

TEST_F(TrainedGuard, LearnsHeldOutPairs) {
  std::unordered_map<std::string, Vec> cache;
  EXPECT_GE(pair_f1(data_->model, data_->val, cache), 0.9);
  EXPECT_EQ(data_->log.best_val_f1, *std::max_element(data_->log.val_f1.begin(), data_->log.val_f1.end()));
}

TEST_F(TrainedGuard, DeterministicCheckpoint) {
  const auto again = train_guard(data_->train, data_->val, small_config());
  std::ostringstream a, b;
  data_->model.to_checkpoint().write(a);
  again.to_checkpoint().write(b);
  EXPECT_EQ(a.str(), b.str());
  test::TempDir dir;
  data_->model.to_checkpoint().save(dir.str("g.ckpt"));
  EXPECT_TRUE(SiameseModel::from_checkpoint(Checkpoint::load(dir.str("g.ckpt"))) == data_->model);
}

TEST_F(TrainedGuard, SwapGapSmall) {
  double gap = 0;
  for (const auto& p : data_->val) {
    const Vec ea = data_->model.encode(p.a.text), eb = data_->model.encode(p.b.text);
    gap += std::abs(data_->model.classify_pair(ea, eb) - data_->model.classify_pair(eb, ea));
  }
  EXPECT_LT(gap / static_cast<double>(data_->val.size()), 0.1);
}

TEST_F(TrainedGuard, ShuffledLabelsGiveChanceF1) {
  auto shuffled = data_->train;
  Rng rng(5);
  std::vector<int> ys;
  for (const auto& p : shuffled) ys.push_back(p.y);
  rng.shuffle(ys);
  for (std::size_t i = 0; i < shuffled.size(); ++i) shuffled[i].y = ys[i];
  GuardConfig cfg = small_config();
  cfg.lambda_bce = 1.0;
  cfg.lambda_contr = 0.0;
  const auto m = train_guard(shuffled, {}, cfg);
  std::unordered_map<std::string, Vec> cache;
  EXPECT_NEAR(pair_f1(m, data_->val, cache), 0.5, 0.1);
}

TEST_F(TrainedGuard, SingleQueryBaselineComparable) {
  const auto cfg = small_config();
  const auto single = train_single_query_baseline(data_->nt, data_->at, data_->nv, data_->av, cfg);
  const auto again = train_single_query_baseline(data_->nt, data_->at, data_->nv, data_->av, cfg);
  EXPECT_TRUE(single == again);
  std::vector<int> pred_s, pred_g, y;
  ReferencePool pool(data_->model, data_->nt);
  auto score = [&](const Query& q, int label) {
    pred_s.push_back(single.prob(q.text) > 0.5);
    pred_g.push_back(deploy_vote(data_->model, pool, q, 4, 1).decision == GuardDecision::Block);
    y.push_back(label);
  };
  for (const auto& q : data_->nv) score(q, 0);
  for (const auto& q : data_->av) score(q, 1);
  const double f1_single = detection_metrics(pred_s, y).f1;
  const double f1_guard = detection_metrics(pred_g, y).f1;
  EXPECT_GE(f1_guard, 0.9);
  EXPECT_NEAR(f1_single, f1_guard, 0.05);
}

}  // namespace
}  // namespace rrw
