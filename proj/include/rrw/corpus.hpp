#pragma once

// Query corpora: synthetic generation, preference synthesis, splits,
// trigger bookkeeping and trigger-query joins, plus JSON-Lines I/O.

#include "json.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_set>
#include <vector>

#include "rrw/common.hpp"

namespace rrw {

enum class Complexity { Simple, Complex, Unknown };
enum class Split { Train, Val, Test, Unassigned };
enum class TriggerMethod { GrayBox, WhiteBox, BoxFree };
enum class Outcome { StrongWins, Tie, WeakWins };

inline constexpr std::string_view kGeneratorVersion = "rrw-synth-1";

inline std::string to_string(Complexity c) {
  switch (c) {
    case Complexity::Simple: return "simple";
    case Complexity::Complex: return "complex";
    case Complexity::Unknown: return "unknown";
  }
  return "unknown";
}
inline std::string to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
    case Split::Unassigned: return "unassigned";
  }
  return "unassigned";
}
inline std::string to_string(TriggerMethod m) {
  switch (m) {
    case TriggerMethod::GrayBox: return "graybox";
    case TriggerMethod::WhiteBox: return "whitebox";
    case TriggerMethod::BoxFree: return "boxfree";
  }
  return "graybox";
}
inline std::string to_string(Outcome o) {
  switch (o) {
    case Outcome::StrongWins: return "strong_wins";
    case Outcome::Tie: return "tie";
    case Outcome::WeakWins: return "weak_wins";
  }
  return "tie";
}

inline Complexity complexity_from_string(std::string_view s) {
  if (s == "simple") return Complexity::Simple;
  if (s == "complex") return Complexity::Complex;
  if (s == "unknown") return Complexity::Unknown;
  throw Error("unknown complexity: " + std::string(s));
}
inline Split split_from_string(std::string_view s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  if (s == "unassigned") return Split::Unassigned;
  throw Error("unknown split: " + std::string(s));
}
inline TriggerMethod method_from_string(std::string_view s) {
  if (s == "graybox") return TriggerMethod::GrayBox;
  if (s == "whitebox") return TriggerMethod::WhiteBox;
  if (s == "boxfree") return TriggerMethod::BoxFree;
  throw Error("unknown trigger method: " + std::string(s));
}
inline Outcome outcome_from_string(std::string_view s) {
  if (s == "strong_wins") return Outcome::StrongWins;
  if (s == "tie") return Outcome::Tie;
  if (s == "weak_wins") return Outcome::WeakWins;
  throw Error("unknown outcome: " + std::string(s));
}

struct Query {
  std::string id;
  std::string text;
  Complexity complexity = Complexity::Unknown;
  std::string origin;
  Split split = Split::Unassigned;

  bool operator==(const Query&) const = default;
};

struct Trigger {
  std::string id;
  TriggerMethod method = TriggerMethod::GrayBox;
  std::string text;
  Split split = Split::Unassigned;

  bool operator==(const Trigger&) const = default;
};

struct PreferenceRecord {
  std::string query_id;
  Outcome outcome = Outcome::Tie;

  bool operator==(const PreferenceRecord&) const = default;
};

struct CorpusManifest {
  std::uint64_t seed = 0;
  // counts[split][complexity]
  std::map<std::string, std::map<std::string, std::size_t>> counts;
  std::string generator_version{kGeneratorVersion};

  static CorpusManifest of(std::span<const Query> queries, std::uint64_t seed) {
    CorpusManifest m;
    m.seed = seed;
    for (const auto& q : queries) ++m.counts[to_string(q.split)][to_string(q.complexity)];
    return m;
  }
};

// ---------------------------------------------------------------------------
// Synthetic generation.

namespace synth {

using Words = std::vector<std::string_view>;

inline const Words kCountries = {
    "France", "Japan", "Brazil", "Canada", "Kenya", "Norway", "Peru",
    "Egypt", "Italy", "Chile", "India", "Spain", "Ghana", "Nepal",
    "Poland", "Mexico", "Vietnam", "Ireland", "Morocco", "Finland",
    "Greece", "Portugal", "Austria", "Colombia"};
inline const Words kCities = {
    "Paris", "Tokyo", "Lima", "Oslo", "Cairo", "Rome", "Madrid",
    "Nairobi", "Dublin", "Lisbon", "Vienna", "Athens", "Helsinki",
    "Warsaw", "Bogota", "Hanoi", "Toronto", "Santiago", "Accra", "Delhi"};
inline const Words kBooks = {
    "Hamlet", "Dracula", "Emma", "Beloved", "Ulysses", "Frankenstein",
    "Persuasion", "Middlemarch", "Rebecca", "Walden", "Siddhartha",
    "Candide", "Lolita", "Ivanhoe", "Kim", "Matilda", "Heidi", "Dune"};
inline const Words kAnimals = {
    "dolphin", "penguin", "bat", "whale", "platypus", "shark", "otter",
    "koala", "salamander", "ostrich", "beaver", "octopus", "lizard",
    "camel", "hedgehog", "seal", "frog", "eagle"};
inline const Words kThings = {
    "banana", "ruby", "sapphire", "lemon", "flamingo", "emerald",
    "carrot", "pumpkin", "lime", "cherry", "plum", "tangerine", "daisy",
    "tulip", "lavender", "coral"};
inline const Words kTerms = {
    "photosynthesis", "democracy", "gravity", "inflation", "osmosis",
    "erosion", "metaphor", "irony", "entropy", "humidity", "latitude",
    "monsoon", "allergy", "vaccine", "glacier", "volcano", "comet",
    "tariff", "syllable", "pronoun"};
inline const Words kLanguages = {"Spanish", "German", "French", "Italian",
                                 "Portuguese", "Dutch", "Swedish", "Turkish"};
inline const Words kEverydayWords = {
    "hello", "thanks", "apple", "window", "friend", "water", "house",
    "bread", "river", "morning", "garden", "chair", "music", "summer"};
inline const Words kSubstances = {"water", "ethanol", "mercury", "iron",
                                  "gold", "oxygen", "copper", "salt",
                                  "sugar", "lead", "silver", "helium"};
inline const Words kPeople = {
    "Einstein", "Newton", "Curie", "Darwin", "Galileo", "Tesla",
    "Lovelace", "Mozart", "Picasso", "Shakespeare", "Gandhi", "Mandela",
    "Cleopatra", "Napoleon", "Confucius", "Beethoven"};
inline const Words kSimplePrefixes = {"", "", "", "Quick question: ",
                                      "Hey, ", "Please tell me: ",
                                      "I wonder, ", "Quickly, "};
inline const Words kSimpleSuffixes = {"", "", "", " Thanks!",
                                      " Just curious.", " Short answer please."};

inline std::string pick(Rng& rng, const Words& w) {
  return std::string(w[rng.below(w.size())]);
}

inline std::string simple_text(Rng& rng) {
  std::string body;
  switch (rng.below(14)) {
    case 0: body = "What is the capital of " + pick(rng, kCountries) + "?"; break;
    case 1: body = "Who wrote " + pick(rng, kBooks) + "?"; break;
    case 2: body = "What color is a " + pick(rng, kThings) + "?"; break;
    case 3: body = "Define the word " + pick(rng, kTerms) + "."; break;
    case 4:
      body = "Translate the word " + pick(rng, kEverydayWords) + " into " +
             pick(rng, kLanguages) + ".";
      break;
    case 5: body = "Is a " + pick(rng, kAnimals) + " a mammal?"; break;
    case 6: body = "What is the currency of " + pick(rng, kCountries) + "?"; break;
    case 7: body = "Where was " + pick(rng, kPeople) + " born?"; break;
    case 8: body = "What is the boiling point of " + pick(rng, kSubstances) + "?"; break;
    case 9: body = "Which continent is " + pick(rng, kCountries) + " in?"; break;
    case 10: body = "What language do people speak in " + pick(rng, kCities) + "?"; break;
    case 11: body = "How do you spell " + pick(rng, kTerms) + "?"; break;
    case 12: body = "What does a " + pick(rng, kAnimals) + " eat?"; break;
    default:
      body = "What is the time zone of " + pick(rng, kCities) + "?";
      break;
  }
  return pick(rng, kSimplePrefixes) + body + pick(rng, kSimpleSuffixes);
}

inline const Words kTasks = {
    "merges overlapping intervals", "finds the longest palindromic substring",
    "detects cycles in a directed graph", "balances a binary search tree",
    "schedules jobs with deadlines and profits",
    "computes shortest paths with negative edges",
    "deduplicates records across sharded tables",
    "rate-limits requests per user with a sliding window"};
inline const Words kEdges = {"empty input", "duplicate keys",
                             "integer overflow", "very deep recursion",
                             "concurrent updates", "unicode strings"};
inline const Words kFunctions = {"x^2 * e^x", "sin(x) * cos(x)",
                                 "ln(x + 1)", "x / (1 + x^2)",
                                 "x^3 - 4x", "e^(-x) * sin(x)"};
inline const Words kTech = {"PostgreSQL", "Cassandra", "Kafka",
                            "RabbitMQ", "Kubernetes", "serverless functions",
                            "Redis", "a monolith", "microservices", "SQLite"};
inline const Words kConstraints = {
    "no flights", "vegetarian meals only", "at most two museums",
    "one rest day", "wheelchair accessible venues", "public transport only",
    "a cooking class", "an evening concert"};
inline const Words kComplexOpeners = {
    "", "", "", "Carefully ", "Rigorously ", "In detail, "};
inline const Words kComplexClosers = {
    " Show every intermediate step.",
    " Justify each step of your reasoning.",
    " Explain the derivation step by step.",
    " State any assumptions and check the final answer.",
    " Present the full derivation and verify the result.",
    ""};

inline std::string num(Rng& rng, int lo, int hi) {
  return std::to_string(rng.between(lo, hi));
}

inline std::string complex_text(Rng& rng) {
  std::string body;
  switch (rng.below(10)) {
    case 0:
      body = "A train leaves " + pick(rng, kCities) + " at " + num(rng, 40, 140) +
             " km/h and another leaves " + pick(rng, kCities) + " at " +
             num(rng, 40, 140) + " km/h toward it; the cities are " +
             num(rng, 200, 900) +
             " km apart. Calculate when and where the trains meet.";
      break;
    case 1:
      body = "Prove that the sum of the first " + num(rng, 5, 60) +
             " odd numbers is a perfect square, then generalize the argument "
             "to arithmetic sequences with common difference " +
             num(rng, 2, 9) + ".";
      break;
    case 2:
      body = "Write an algorithm that " + pick(rng, kTasks) +
             ", analyze its time and memory complexity, and explain how to "
             "handle " + pick(rng, kEdges) + ".";
      break;
    case 3:
      body = "Solve the system " + num(rng, 2, 19) + "x + " + num(rng, 2, 19) +
             "y = " + num(rng, 10, 99) + " and " + num(rng, 2, 19) + "x - " +
             num(rng, 2, 19) + "y = " + num(rng, 10, 99) +
             ", then verify the solution by substitution and discuss whether "
             "it is unique.";
      break;
    case 4:
      body = "Plan a " + num(rng, 3, 9) + "-day itinerary for " +
             pick(rng, kCities) + " on a budget of " + num(rng, 400, 4000) +
             " dollars that satisfies these constraints: " +
             pick(rng, kConstraints) + ", " + pick(rng, kConstraints) +
             ", and " + pick(rng, kConstraints) +
             ", and optimize the total travel time.";
      break;
    case 5:
      body = "Compute the definite integral of " + pick(rng, kFunctions) +
             " from 0 to " + num(rng, 2, 12) +
             " using integration by parts or substitution, and bound the "
             "numerical error of a trapezoid approximation with " +
             num(rng, 4, 64) + " intervals.";
      break;
    case 6:
      body = "A company's revenue grows by " + num(rng, 3, 25) +
             " percent per year from " + num(rng, 100, 900) +
             " thousand dollars while costs grow by " + num(rng, 2, 15) +
             " percent; derive a formula for profit after n years and "
             "determine the year when profit first exceeds " +
             num(rng, 1, 9) + " million.";
      break;
    case 7:
      body = "Compare " + pick(rng, kTech) + " and " + pick(rng, kTech) +
             " for a system handling " + num(rng, 2, 90) +
             " thousand writes per second, weigh consistency, cost and "
             "operational risk, and recommend an architecture for a team of " +
             num(rng, 3, 40) + " engineers.";
      break;
    case 8:
      body = "A tank holds " + num(rng, 100, 999) +
             " liters and drains through a valve at a rate proportional to "
             "the square root of the volume; set up the differential "
             "equation, solve it, and find how long until only " +
             num(rng, 5, 60) + " liters remain.";
      break;
    default:
      body = "Given " + num(rng, 5, 40) + " tasks with dependencies and " +
             num(rng, 2, 8) +
             " workers, formulate a scheduling model that minimizes the "
             "makespan, derive a lower bound, and estimate the optimality gap "
             "of a greedy heuristic.";
      break;
  }
  return pick(rng, kComplexOpeners) + body + pick(rng, kComplexClosers);
}

}  // namespace synth

struct CorpusOptions {
  double noise_fraction = 0.10;  // share of queries drawn from the other template family
  std::string id_prefix = "q";
  std::string origin = "synthetic";
};

inline std::string format_id(std::string_view prefix, std::size_t index) {
  std::string digits = std::to_string(index);
  if (digits.size() < 6) digits.insert(0, 6 - digits.size(), '0');
  return std::string(prefix) + digits;
}

// Generates n_simple + n_complex queries with unique texts. Labels are
// shuffled across ids; each query draws its template from its own family
// except for a noise_fraction share that draws from the other family while
// keeping its label.
inline std::vector<Query> generate_synthetic_corpus(
    std::uint64_t seed, std::size_t n_simple, std::size_t n_complex,
    const CorpusOptions& opts = {}) {
  if (n_simple == 0 || n_complex == 0) {
    throw Error("generate_synthetic_corpus: counts must be positive");
  }
  Rng rng(derive_seed(seed, "corpus"));
  std::vector<Complexity> labels(n_simple, Complexity::Simple);
  labels.insert(labels.end(), n_complex, Complexity::Complex);
  rng.shuffle(labels);

  std::unordered_set<std::string> seen;
  std::vector<Query> out;
  out.reserve(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const bool flip = rng.bernoulli(opts.noise_fraction);
    const bool complex_family = (labels[i] == Complexity::Complex) != flip;
    std::string text;
    for (int attempt = 0;; ++attempt) {
      if (attempt > 10000) {
        throw Error("generate_synthetic_corpus: template space exhausted");
      }
      text = complex_family ? synth::complex_text(rng) : synth::simple_text(rng);
      if (seen.insert(text).second) break;
    }
    out.push_back(Query{format_id(opts.id_prefix, i), std::move(text),
                        labels[i], opts.origin, Split::Unassigned});
  }
  return out;
}

struct PreferenceOptions {
  double p_complex = 0.85;  // StrongWins probability for Complex queries
  double p_simple = 0.15;   // StrongWins probability for Simple queries
  double p_tie = 0.10;
};

// One outcome per query, drawn from a generator keyed by (seed, query id).
inline std::vector<PreferenceRecord> synthesize_preferences(
    std::span<const Query> corpus, std::uint64_t seed,
    const PreferenceOptions& opts = {}) {
  if (corpus.empty()) throw Error("synthesize_preferences: empty corpus");
  std::vector<PreferenceRecord> out;
  out.reserve(corpus.size());
  for (const auto& q : corpus) {
    Rng rng(derive_seed(derive_seed(seed, "preference"), q.id));
    const double p_strong = q.complexity == Complexity::Complex ? opts.p_complex
                            : q.complexity == Complexity::Simple ? opts.p_simple
                                                                 : 0.5;
    const double p_tie = std::min(opts.p_tie, 1.0 - p_strong);
    const double u = rng.uniform();
    Outcome o = u < p_strong ? Outcome::StrongWins
                : u < p_strong + p_tie ? Outcome::Tie
                                       : Outcome::WeakWins;
    out.push_back({q.id, o});
  }
  return out;
}

struct QuerySplits {
  std::vector<Query> train, val, test;
};

namespace detail {
// Orders items by a hash of (seed, id) so that adding items never reshuffles
// the relative order of existing ones.
template <typename T>
std::vector<T> keyed_shuffle(std::span<const T> items, std::uint64_t seed) {
  std::vector<std::pair<std::uint64_t, std::size_t>> keys;
  keys.reserve(items.size());
  for (std::size_t i = 0; i < items.size(); ++i) {
    keys.emplace_back(derive_seed(seed, items[i].id), i);
  }
  std::sort(keys.begin(), keys.end(), [&](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first < b.first;
    return items[a.second].id < items[b.second].id;
  });
  std::vector<T> out;
  out.reserve(items.size());
  for (const auto& k : keys) out.push_back(items[k.second]);
  return out;
}
}  // namespace detail

// 8:1:1 partition: floor(0.8n) / floor(0.1n) / remainder.
inline QuerySplits split_queries(std::span<const Query> pool,
                                 std::uint64_t seed) {
  if (pool.size() < 10) throw Error("split_queries: pool smaller than 10");
  for (const auto& q : pool) {
    if (q.split != Split::Unassigned) {
      throw Error("split_queries: query " + q.id + " already has a split");
    }
  }
  auto shuffled = detail::keyed_shuffle(pool, derive_seed(seed, "split"));
  const std::size_t n = shuffled.size();
  const std::size_t n_train = (n * 8) / 10;
  const std::size_t n_val = n / 10;
  QuerySplits s;
  for (std::size_t i = 0; i < n; ++i) {
    Query q = shuffled[i];
    if (i < n_train) {
      q.split = Split::Train;
      s.train.push_back(std::move(q));
    } else if (i < n_train + n_val) {
      q.split = Split::Val;
      s.val.push_back(std::move(q));
    } else {
      q.split = Split::Test;
      s.test.push_back(std::move(q));
    }
  }
  return s;
}

struct TriggerSplits {
  std::vector<Trigger> train, val, test;

  std::vector<Trigger> of(Split s) const {
    switch (s) {
      case Split::Train: return train;
      case Split::Val: return val;
      case Split::Test: return test;
      default: return {};
    }
  }
};

// 6:2:2 partition within each method (30/10/10 for 50 triggers).
inline TriggerSplits split_triggers(std::span<const Trigger> triggers,
                                    std::uint64_t seed,
                                    std::size_t expected_per_method = 50) {
  TriggerSplits s;
  for (auto method : {TriggerMethod::GrayBox, TriggerMethod::WhiteBox,
                      TriggerMethod::BoxFree}) {
    std::vector<Trigger> group;
    for (const auto& t : triggers)
      if (t.method == method) group.push_back(t);
    if (group.empty()) continue;
    if (group.size() != expected_per_method) {
      throw Error("split_triggers: expected " +
                  std::to_string(expected_per_method) + " " +
                  to_string(method) + " triggers, got " +
                  std::to_string(group.size()));
    }
    auto shuffled = detail::keyed_shuffle(
        std::span<const Trigger>(group),
        derive_seed(seed, "trigger-split-" + to_string(method)));
    const std::size_t n = shuffled.size();
    const std::size_t n_train = (n * 6) / 10;
    const std::size_t n_val = (n * 2) / 10;
    for (std::size_t i = 0; i < n; ++i) {
      Trigger t = shuffled[i];
      if (i < n_train) {
        t.split = Split::Train;
        s.train.push_back(std::move(t));
      } else if (i < n_train + n_val) {
        t.split = Split::Val;
        s.val.push_back(std::move(t));
      } else {
        t.split = Split::Test;
        s.test.push_back(std::move(t));
      }
    }
  }
  return s;
}

inline constexpr std::string_view kAdversarialOriginPrefix = "adv:";

// trigger.text + ' ' + query.text; the label and split are carried over.
inline Query make_adversarial(const Query& query, const Trigger& trigger) {
  if (query.text.empty() || trigger.text.empty()) {
    throw Error("make_adversarial: empty text");
  }
  Query q;
  q.id = query.id + "+" + trigger.id;
  q.text = trigger.text + " " + query.text;
  q.complexity = query.complexity;
  q.origin = std::string(kAdversarialOriginPrefix) + to_string(trigger.method);
  q.split = query.split;
  return q;
}

inline bool is_adversarial(const Query& q) {
  return q.origin.starts_with(kAdversarialOriginPrefix);
}

// Inverse of make_adversarial for a known trigger.
inline std::optional<std::string> strip_trigger(std::string_view text,
                                                const Trigger& trigger) {
  const std::string prefix = trigger.text + " ";
  if (!text.starts_with(prefix)) return std::nullopt;
  return std::string(text.substr(prefix.size()));
}

// For every query, one trigger drawn uniformly from `triggers` with a
// generator keyed by (seed, query id).
inline std::vector<Query> build_adversarial_set(std::span<const Query> normal,
                                                std::span<const Trigger> triggers,
                                                std::uint64_t seed) {
  if (triggers.empty()) throw Error("build_adversarial_set: no triggers");
  std::vector<Query> out;
  out.reserve(normal.size());
  for (const auto& q : normal) {
    Rng rng(derive_seed(derive_seed(seed, "adv-pairing"), q.id));
    out.push_back(make_adversarial(q, triggers[rng.below(triggers.size())]));
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSON-Lines.

inline void to_json(nlohmann::json& j, const Query& q) {
  j = {{"id", q.id},
       {"text", q.text},
       {"complexity", to_string(q.complexity)},
       {"origin", q.origin},
       {"split", to_string(q.split)}};
}
inline void from_json(const nlohmann::json& j, Query& q) {
  q.id = j.at("id").get<std::string>();
  q.text = j.at("text").get<std::string>();
  q.complexity = complexity_from_string(j.at("complexity").get<std::string>());
  q.origin = j.at("origin").get<std::string>();
  q.split = split_from_string(j.at("split").get<std::string>());
}
inline void to_json(nlohmann::json& j, const Trigger& t) {
  j = {{"id", t.id},
       {"method", to_string(t.method)},
       {"text", t.text},
       {"split", to_string(t.split)}};
}
inline void from_json(const nlohmann::json& j, Trigger& t) {
  t.id = j.at("id").get<std::string>();
  t.method = method_from_string(j.at("method").get<std::string>());
  t.text = j.at("text").get<std::string>();
  t.split = split_from_string(j.at("split").get<std::string>());
}
inline void to_json(nlohmann::json& j, const PreferenceRecord& p) {
  j = {{"query_id", p.query_id}, {"outcome", to_string(p.outcome)}};
}
inline void from_json(const nlohmann::json& j, PreferenceRecord& p) {
  p.query_id = j.at("query_id").get<std::string>();
  p.outcome = outcome_from_string(j.at("outcome").get<std::string>());
}
inline void to_json(nlohmann::json& j, const CorpusManifest& m) {
  j = {{"seed", m.seed},
       {"counts", m.counts},
       {"generator_version", m.generator_version}};
}
inline void from_json(const nlohmann::json& j, CorpusManifest& m) {
  m.seed = j.at("seed").get<std::uint64_t>();
  m.counts = j.at("counts")
                 .get<std::map<std::string, std::map<std::string, std::size_t>>>();
  m.generator_version = j.at("generator_version").get<std::string>();
}

template <typename T>
void write_jsonl(const std::string& path, std::span<const T> records) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path);
  for (const auto& r : records) os << nlohmann::json(r).dump() << '\n';
}

template <typename T>
std::vector<T> read_jsonl(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingArtifact("cannot read " + path);
  std::vector<T> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(nlohmann::json::parse(line).get<T>());
    } catch (const nlohmann::json::exception& e) {
      throw Error(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline std::vector<std::string> texts_of(std::span<const Query> queries) {
  std::vector<std::string> out;
  out.reserve(queries.size());
  for (const auto& q : queries) out.push_back(q.text);
  return out;
}

}  // namespace rrw
