#include <algorithm>
#include <cmath>

#include <Eigen/Eigenvalues>
#include <gtest/gtest.h>

#include "rrw/metrics.hpp"

namespace rrw {
namespace {

std::vector<double> random_rates(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform();
  return v;
}

TEST(Asr, Examples) {
  const std::vector<double> before{0.1, 0.2, 0.3, 0.4, 0.9};
  const std::vector<double> after{0.6, 0.7, 0.8, 0.45, 0.2};
  EXPECT_DOUBLE_EQ(*asr(before, after, 0.5, Target::Strong), 0.75);
  EXPECT_DOUBLE_EQ(*asr(before, before, 0.5, Target::Strong), 0.0);
  EXPECT_DOUBLE_EQ(*asr(before, after, 0.5, Target::Weak), 1.0);
  EXPECT_FALSE(asr(std::vector<double>{0.9}, std::vector<double>{0.1}, 0.5, Target::Strong).has_value());
  EXPECT_THROW(asr(before, std::vector<double>{0.1}, 0.5, Target::Strong), Error);
}

TEST(Asr, MatchesIndicatorRecount) {
  Rng rng(1);
  for (int t = 0; t < 30; ++t) {
    const auto b = random_rates(rng, 40), a = random_rates(rng, 40);
    const double alpha = rng.uniform();
    double num = 0, den = 0, wnum = 0, wden = 0;
    for (std::size_t i = 0; i < b.size(); ++i) {
      const double below = b[i] < alpha ? 1 : 0, above_after = a[i] >= alpha ? 1 : 0;
      num += below * above_after;
      den += below;
      wnum += (1 - below) * (1 - above_after);
      wden += 1 - below;
    }
    const auto s = asr(b, a, alpha, Target::Strong), w = asr(b, a, alpha, Target::Weak);
    if (den > 0) EXPECT_DOUBLE_EQ(*s, num / den); else EXPECT_FALSE(s);
    if (wden > 0) EXPECT_DOUBLE_EQ(*w, wnum / wden); else EXPECT_FALSE(w);
  }
}

TEST(SelectionRate, Examples) {
  const std::vector<double> w{0.1, 0.5, 0.7, 0.3};
  EXPECT_DOUBLE_EQ(*selection_rate(w, 0.0, Target::Strong), 1.0);
  EXPECT_DOUBLE_EQ(*selection_rate(w, 0.5, Target::Strong), 0.5);
  EXPECT_DOUBLE_EQ(*selection_rate(w, 0.5, Target::Weak), 0.5);
  EXPECT_FALSE(selection_rate(std::vector<double>{}, 0.5, Target::Strong));
  Rng rng(2);
  for (std::size_t n : {7u, 50u, 101u}) {
    const auto r = random_rates(rng, n);
    const auto cal = calibrate_threshold(r, "x", "c");
    EXPECT_NEAR(*selection_rate(r, cal.alpha, Target::Strong), 0.5, 1.0 / static_cast<double>(n));
    const double brute = static_cast<double>(std::count_if(r.begin(), r.end(), [&](double x) { return x >= cal.alpha; }));
    EXPECT_DOUBLE_EQ(*selection_rate(r, cal.alpha, Target::Strong), brute / static_cast<double>(n));
  }
}

TEST(Acg, Examples) {
  const std::vector<double> b{0.2, 0.4}, a{0.4, 0.8};
  EXPECT_NEAR(acg(b, a), 0.3, 1e-15);
  EXPECT_EQ(acg(b, b), 0.0);
  EXPECT_EQ(acg(a, b), -acg(b, a));
  EXPECT_THROW(acg(b, std::vector<double>{1.0}), Error);
}

TEST(Benchmark, Simulators) {
  const auto corpus = generate_synthetic_corpus(3, 200, 400, {.noise_fraction = 0});
  std::vector<Query> complex;
  for (const auto& q : corpus)
    if (q.complexity == Complexity::Complex) complex.push_back(q);
  ASSERT_EQ(complex.size(), 400u);
  const auto weak = ModelSimulator::weak(7), strong = ModelSimulator::strong(7);
  const std::vector<ModelChoice> all_weak(complex.size(), ModelChoice::Weak);
  EXPECT_NEAR(benchmark_score(complex, all_weak, &strong, &weak), 20.0, 4.0);
  EXPECT_EQ(benchmark_score(complex, all_weak, &strong, &weak), benchmark_score(complex, all_weak, &strong, &weak));
  const std::vector<ModelChoice> all_strong(complex.size(), ModelChoice::Strong);
  EXPECT_GT(benchmark_score(complex, all_strong, &strong, &weak), benchmark_score(complex, all_weak, &strong, &weak));
  ModelSimulator perfect{ModelChoice::Strong, 1.0, 1.0, 1};
  EXPECT_EQ(benchmark_score(complex, all_strong, &perfect, &weak), 100.0);
  EXPECT_THROW(benchmark_score(complex, all_strong, nullptr, &weak), Error);
  ModelSimulator bad{ModelChoice::Weak, 1.5, 0.2, 1};
  EXPECT_THROW(benchmark_score(complex, all_weak, &strong, &bad), Error);
}

TEST(Detection, ClosedForms) {
  const std::vector<int> y{1, 1, 0, 0};
  auto m = detection_metrics(y, y);
  EXPECT_EQ(m.accuracy, 1.0);
  EXPECT_EQ(m.precision, 1.0);
  EXPECT_EQ(m.recall, 1.0);
  EXPECT_EQ(m.f1, 1.0);
  m = detection_metrics(std::vector<int>{1, 1, 1, 1}, y);
  EXPECT_EQ(m.accuracy, 0.5);
  EXPECT_EQ(m.recall, 1.0);
  EXPECT_NEAR(m.f1, 2.0 / 3.0, 1e-15);
  m = detection_metrics(std::vector<int>{0, 0, 0, 0}, y);
  EXPECT_EQ(m.f1, 0.0);
  EXPECT_THROW(detection_metrics(std::vector<int>{}, std::vector<int>{}), Error);
}

TEST(Detection, MatchesConfusionRecount) {
  Rng rng(4);
  for (int t = 0; t < 20; ++t) {
    std::vector<int> p(60), y(60);
    for (auto& v : p) v = rng.bernoulli(0.5);
    for (auto& v : y) v = rng.bernoulli(0.5);
    int c[2][2] = {{0, 0}, {0, 0}};
    for (std::size_t i = 0; i < p.size(); ++i) ++c[p[i]][y[i]];
    const double prec = c[1][1] / double(c[1][1] + c[1][0]);
    const double rec = c[1][1] / double(c[1][1] + c[0][1]);
    const auto m = detection_metrics(p, y);
    EXPECT_DOUBLE_EQ(m.accuracy, (c[1][1] + c[0][0]) / 60.0);
    EXPECT_DOUBLE_EQ(m.precision, prec);
    EXPECT_DOUBLE_EQ(m.recall, rec);
    EXPECT_NEAR(m.f1, 2 * prec * rec / (prec + rec), 1e-15);
  }
}

TEST(Pca, MatchesDenseEigensolver) {
  Rng rng(5);
  Eigen::MatrixXd X(10, 5);
  for (Eigen::Index i = 0; i < X.size(); ++i) X.data()[i] = rng.normal();
  X.col(0) *= 4;
  X.col(2) *= 2;
  const auto pca = pca_2d(X);
  const Eigen::MatrixXd Xc = X.rowwise() - X.colwise().mean();
  const Eigen::MatrixXd C = Xc.transpose() * Xc / 9.0;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(C);
  const Eigen::MatrixXd top = es.eigenvectors().rightCols(2);  // ascending order
  // Principal angles between the two 2-D subspaces.
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(top.transpose() * pca.components);
  for (Eigen::Index i = 0; i < 2; ++i) EXPECT_LT(std::acos(std::min(1.0, svd.singularValues()[i])), 1e-6);
  EXPECT_NEAR(pca.explained[0], es.eigenvalues()[4], 1e-9);
  EXPECT_NEAR(pca.explained[1], es.eigenvalues()[3], 1e-9);
  EXPECT_GE(pca.explained[0], pca.explained[1]);
  for (int c = 0; c < 2; ++c) {
    Eigen::Index arg;
    pca.components.col(c).cwiseAbs().maxCoeff(&arg);
    EXPECT_GT(pca.components(arg, c), 0.0);
  }
  EXPECT_TRUE(pca.coords.isApprox(Xc * pca.components));
}

TEST(Pca, CollinearAndDegenerate) {
  Eigen::MatrixXd X(6, 3);
  for (int i = 0; i < 6; ++i) X.row(i) << i, 2.0 * i, -1.0 * i;
  const auto pca = pca_2d(X);
  EXPECT_NEAR(pca.explained[1], 0.0, 1e-9);
  EXPECT_GT(pca.explained[0], 0.0);
  const auto flat = pca_2d(Eigen::MatrixXd::Ones(4, 3));
  EXPECT_EQ(flat.coords.norm(), 0.0);
  EXPECT_THROW(pca_2d(Eigen::MatrixXd::Ones(2, 3)), Error);
}

TEST(PatternStats, Means) {
  auto len = [](const std::string& s) { return static_cast<double>(s.size()); };
  const std::map<std::string, std::vector<std::string>> groups{{"one", {"héllo"}}, {"two", {"ab", "abcd"}}};
  const auto st = trigger_pattern_stats(groups, len);
  EXPECT_EQ(st.at("one").mean_length, 5.0);  // code points, not bytes
  EXPECT_EQ(st.at("one").mean_ppl, 6.0);
  EXPECT_EQ(st.at("two").mean_length, 3.0);
  EXPECT_THROW(trigger_pattern_stats(std::map<std::string, std::vector<std::string>>{{"e", {}}}, len), Error);
  const Query q{"q1", "what is two plus two", Complexity::Simple, "", Split::Test};
  const Trigger t{"t", TriggerMethod::GrayBox, "zz yy", Split::Test};
  const auto g = trigger_pattern_stats(
      std::map<std::string, std::vector<std::string>>{{"adv", {make_adversarial(q, t).text}}, {"normal", {q.text}}}, len);
  EXPECT_GT(g.at("adv").mean_length, g.at("normal").mean_length);
}

TEST(Cdf, Properties) {
  const auto one = asr_cdf({0.5});
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one[0].value, 0.5);
  EXPECT_EQ(one[0].cumulative, 1.0);
  Rng rng(6);
  for (std::size_t n : {1u, 2u, 9u, 40u}) {
    std::vector<double> v(n);
    for (auto& x : v) x = std::round(rng.uniform() * 10) / 10;
    const auto cdf = asr_cdf(v);
    for (std::size_t i = 1; i < cdf.size(); ++i) {
      EXPECT_GT(cdf[i].value, cdf[i - 1].value);
      EXPECT_GT(cdf[i].cumulative, cdf[i - 1].cumulative);
    }
    EXPECT_EQ(cdf.back().cumulative, 1.0);
    std::sort(v.begin(), v.end());
    // Lower median: the smallest value reaching half the mass.
    EXPECT_EQ(cdf_median(cdf), v[(n - 1) / 2]);
  }
}

}  // namespace
}  // namespace rrw
