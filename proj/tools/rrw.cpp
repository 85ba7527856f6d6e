#include <cstdlib>
#include <iostream>

#include "CLI11.hpp"
#include "rrw/gateway.hpp"
#include "rrw/pipeline.hpp"

namespace {

rrw::ExperimentConfig resolve_config(const std::string& path, const std::string& out, long long seed) {
  rrw::ExperimentConfig cfg = path.empty() ? rrw::ExperimentConfig{} : rrw::load_config(path);
  if (const char* env = std::getenv(std::string(rrw::kOutputEnv).c_str()); env && *env) cfg.output_dir = env;
  if (!out.empty()) cfg.output_dir = out;
  if (seed >= 0) cfg.seed = static_cast<std::uint64_t>(seed);
  cfg.validate();
  return cfg;
}

int emit_attack_batch(const rrw::Workspace& ws, const std::string& method, const std::string& target,
                      const std::string& router) {
  using namespace rrw;
  ws.require_stage("gen-data", "attack");
  ws.require_stage("calibrate", "attack");
  const auto lr = load_routers(ws, true);
  const auto attacker = read_jsonl<Query>(ws.path("corpus/router.jsonl"));
  const auto raw = read_jsonl<Query>(ws.path("corpus/raw.jsonl"));
  const auto proxies = load_raw_scores(ws, lr, raw);
  BatchSpec spec{method_from_string(method), target == "strong" ? Target::Strong : Target::Weak,
                 router.empty() ? std::nullopt : std::optional(router_kind_from_string(router)),
                 ws.config().attack.batch_size};
  for (const auto& r : run_attack_batch(ws, lr, attacker, proxies, raw, spec))
    std::cout << json(r).dump() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Router rerouting attacks and pair-based guard: experiment harness"};
  app.require_subcommand(1);
  std::string config_path, output_dir;
  long long seed = -1;
  app.add_option("-c,--config", config_path, "JSON experiment config");
  app.add_option("-o,--output", output_dir, "output root (overrides config and RRW_OUTPUT_ROOT)");
  app.add_option("--seed", seed, "root seed override");

  std::vector<CLI::App*> stage_cmds;
  for (const auto& s : rrw::stage_names()) {
    if (s == "attack") continue;
    stage_cmds.push_back(app.add_subcommand(s, "run the " + s + " stage"));
  }
  auto* all = app.add_subcommand("all", "run every stage in order");
  auto* attack = app.add_subcommand("attack", "run the attack stage, or emit one trigger batch");
  std::string method, target, router;
  attack->add_option("--method", method, "graybox | whitebox | boxfree")
      ->check(CLI::IsMember({"graybox", "whitebox", "boxfree"}));
  attack->add_option("--target", target, "strong | weak")->check(CLI::IsMember({"strong", "weak"}));
  attack->add_option("--router", router, "gray-box victim router")
      ->check(CLI::IsMember({"r_cls", "r_mf", "r_sw", "r_llm"}));
  auto* serve = app.add_subcommand("serve", "start the routing gateway");
  std::string host;
  int port = -1;
  serve->add_option("--host", host, "bind address");
  serve->add_option("--port", port, "bind port");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    auto cfg = resolve_config(config_path, output_dir, seed);
    if (!host.empty()) cfg.serve.host = host;
    if (port >= 0) cfg.serve.port = port;
    rrw::Workspace ws(cfg);
    if (all->parsed()) {
      rrw::run_pipeline(ws, &std::cerr);
    } else if (attack->parsed()) {
      if (method.empty() != target.empty())
        throw rrw::ConfigError("attack: --method and --target go together");
      if (method.empty()) rrw::run_stage(ws, "attack");
      else emit_attack_batch(ws, method, target, router);
    } else if (serve->parsed()) {
      return rrw::serve(ws, std::cerr);
    } else {
      for (auto* c : stage_cmds)
        if (c->parsed()) rrw::run_stage(ws, c->get_name());
    }
  } catch (const rrw::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const rrw::MissingArtifact& e) {
    std::cerr << "missing artifact: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
