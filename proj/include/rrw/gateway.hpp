#pragma once

// Routing gateway: guard vote first, router threshold second, one JSON-Lines
// decision log. The HTTP layer is a thin shell over Gateway::handle_route.

#include <atomic>
#include <chrono>
#include <fstream>
#include <memory>
#include <mutex>
#include <string>

#include "rrw/pipeline.hpp"

// must follow Eigen (resolv.h defines `_res`)
#include "httplib.h"

namespace rrw {

struct RouteResponse {
  std::string decision;  // Strong | Weak | Blocked
  std::optional<double> win_rate;
  int adv_votes = 0;
  int K = 0;
  std::string router;
  double latency_ms = 0;
};

inline void to_json(json& j, const RouteResponse& r) {
  j = {{"decision", r.decision},
       {"win_rate", r.win_rate ? json(*r.win_rate) : json(nullptr)},
       {"guard_votes", {{"adv", r.adv_votes}, {"K", r.K}}},
       {"router", r.router},
       {"latency_ms", r.latency_ms}};
}

struct HttpReply {
  int status = 200;
  json body;
};

// Immutable model state for serving.
struct GatewayModels {
  LoadedRouters routers;
  RouterKind router_kind;
  SiameseModel guard;
  std::unique_ptr<ReferencePool> refs;
  int K = 4;
  std::uint64_t deploy_seed = 0;

  static std::unique_ptr<GatewayModels> load(const Workspace& ws) {
    ws.require_stage("calibrate", "serve");
    ws.require_stage("train-guard", "serve");
    auto m = std::make_unique<GatewayModels>();
    m->routers = load_routers(ws, true);
    m->router_kind = router_kind_from_string(ws.config().serve.router);
    m->routers.get(m->router_kind);
    m->guard = SiameseModel::from_checkpoint(Checkpoint::load(ws.path("guard/siamese.ckpt")));
    const auto normal = read_jsonl<Query>(ws.path("pools/normal.jsonl"));
    m->refs = std::make_unique<ReferencePool>(m->guard, with_split(normal, Split::Train));
    m->K = ws.config().guard.K;
    m->deploy_seed = ws.seed("deploy");
    return m;
  }
};

class Gateway {
 public:
  explicit Gateway(std::string log_path) : log_path_(std::move(log_path)) {}

  void install(std::unique_ptr<GatewayModels> m) {
    models_ = std::move(m);
    ready_.store(true, std::memory_order_release);
  }
  bool ready() const { return ready_.load(std::memory_order_acquire); }

  RouteResponse route_query(const std::string& text) {
    if (!ready()) throw Error("gateway: models not loaded");
    const auto t0 = std::chrono::steady_clock::now();
    const GatewayModels& m = *models_;
    const std::string key = hex64(fnv1a64(text));
    RouteResponse r;
    r.router = to_string(m.router_kind);
    const auto vote = deploy_vote(m.guard, *m.refs, text, key, m.K, m.deploy_seed);
    r.adv_votes = vote.adv_votes;
    r.K = vote.K;
    json guard_entry = {{"request", key}, {"stage", "guard"}, {"vote", vote}};
    json router_entry = {{"request", key}, {"stage", "router"}, {"router", r.router}};
    if (vote.decision == GuardDecision::Block) {
      r.decision = "Blocked";
      router_entry["skipped"] = true;
    } else {
      const Router& router = m.routers.get(m.router_kind);
      const auto d = route(WinRate(router.win_rate(text)), m.routers.alpha(m.router_kind));
      r.decision = to_string(d.model);
      r.win_rate = d.win_rate.value();
      router_entry["skipped"] = false;
      router_entry["win_rate"] = d.win_rate.value();
      router_entry["alpha"] = d.threshold;
      router_entry["decision"] = r.decision;
    }
    r.latency_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    append_log(guard_entry, router_entry);
    return r;
  }

  HttpReply handle_route(const std::string& body) {
    if (!ready()) return {503, {{"error", "models not loaded"}}};
    json req;
    try {
      req = json::parse(body);
    } catch (const json::exception&) {
      return {400, {{"error", "malformed JSON body"}}};
    }
    if (!req.is_object() || !req.contains("query") || !req["query"].is_string())
      return {400, {{"error", "body must be {\"query\": \"...\"}"}}};
    try {
      return {200, json(route_query(req["query"].get<std::string>()))};
    } catch (const std::exception& e) {
      return {500, {{"error", e.what()}}};
    }
  }

  HttpReply handle_health() const {
    if (!ready()) return {503, {{"status", "loading"}}};
    return {200, {{"status", "ready"}}};
  }

 private:
  void append_log(const json& a, const json& b) {
    std::lock_guard<std::mutex> lock(log_mu_);
    if (!log_.is_open()) log_.open(log_path_, std::ios::app | std::ios::binary);
    log_ << a.dump() << '\n' << b.dump() << '\n';
    log_.flush();
  }

  std::string log_path_;
  std::unique_ptr<GatewayModels> models_;
  std::atomic<bool> ready_{false};
  std::mutex log_mu_;
  std::ofstream log_;
};

inline void mount(httplib::Server& srv, Gateway& gw) {
  auto send = [](httplib::Response& res, const HttpReply& r) {
    res.status = r.status;
    res.set_content(r.body.dump(), "application/json");
  };
  srv.Post("/route", [&gw, send](const httplib::Request& req, httplib::Response& res) {
    send(res, gw.handle_route(req.body));
  });
  srv.Get("/health", [&gw, send](const httplib::Request&, httplib::Response& res) {
    send(res, gw.handle_health());
  });
}

// Binds, then loads models while /health already answers 503.
inline int serve(const Workspace& ws, std::ostream& log) {
  const auto& sc = ws.config().serve;
  Gateway gw(ws.path("serve/decisions.jsonl"));
  httplib::Server srv;
  mount(srv, gw);
  if (!srv.bind_to_port(sc.host, sc.port)) throw Error("cannot bind " + sc.host + ":" + std::to_string(sc.port));
  std::thread loop([&] { srv.listen_after_bind(); });
  try {
    gw.install(GatewayModels::load(ws));
  } catch (...) {
    srv.stop();
    loop.join();
    throw;
  }
  log << "[rrw] serving on http://" << sc.host << ':' << sc.port << '\n';
  loop.join();
  return 0;
}

}  // namespace rrw
