// Trains two routers on a small synthetic corpus, calibrates them, and shows a
// gray-box trigger pushing Simple queries to the Strong model.

#include <iostream>

#include "rrw/attacks.hpp"
#include "rrw/metrics.hpp"
#include "rrw/routers.hpp"

int main() {
  using namespace rrw;
  auto corpus = generate_synthetic_corpus(7, 300, 300, {0.1, "d", "demo"});
  const auto prefs = synthesize_preferences(corpus, 8, {});
  const auto vocab = Vocabulary::build(texts_of(corpus));
  const auto held_out = generate_synthetic_corpus(9, 200, 200, {0.1, "h", "demo"});
  std::vector<std::string> simple;
  for (const auto& q : held_out)
    if (q.complexity == Complexity::Simple) simple.push_back(q.text);
  for (auto kind : {RouterKind::CLS, RouterKind::SW}) {
    RouterTrainConfig cfg;
    cfg.train.seed = 11;
    auto router = make_router(kind, vocab, cfg);
    router->train(corpus, prefs, cfg);
    const auto cal = calibrate_threshold(*router, held_out, "held-out");
    AttackConfig ac;
    ac.seed = 13;
    const auto res = graybox_optimize(*router, vocab, ac);
    std::vector<std::string> attacked;
    for (const auto& q : simple) attacked.push_back(res.text + " " + q);
    const auto a = asr(router->win_rates(simple), router->win_rates(attacked), cal.alpha, Target::Strong);
    std::cout << router->id() << "  alpha=" << cal.alpha << "  trigger=\"" << res.text << "\"  ASR="
              << (a ? std::to_string(*a) : std::string("n/a")) << '\n';
  }
}
