#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "fdrec/common.hpp"
#include "fdrec/dataio.hpp"

namespace fdrec {

enum class Protocol { Repeat, Exploration, Combined };

inline const char* protocol_name(Protocol p) {
  switch (p) {
    case Protocol::Repeat: return "repeat";
    case Protocol::Exploration: return "exploration";
    case Protocol::Combined: return "combined";
  }
  return "?";
}

inline Protocol parse_protocol(const std::string& s) {
  if (s == "repeat") return Protocol::Repeat;
  if (s == "exploration") return Protocol::Exploration;
  if (s == "combined") return Protocol::Combined;
  throw Error("unknown protocol '" + s + "'");
}

enum class SlateOrigin { Repeat, Exploration, Combined };

/// Candidates with one score each, in input order.
struct ScoredSlate {
  std::vector<StoreId> candidates;
  std::vector<double> scores;
  SlateOrigin origin = SlateOrigin::Combined;
};

inline constexpr std::size_t kMaxCandidates = 1000;

/// One evaluation instance. candidates always contain the target.
struct EvalCase {
  std::size_t row = 0;
  Protocol protocol = Protocol::Combined;
  std::vector<StoreId> candidates;
  std::uint64_t rng_seed = 0;
  std::size_t target_pos = 0;  // index of the target inside candidates
  std::size_t num_prior = 0;   // leading candidates that are prior stores (combined and repeat)
};

namespace detail {

/// Draws up to `want` stores uniformly without replacement from stores that
/// are neither in `exclude` nor equal to `target`.
inline std::vector<StoreId> sample_unvisited(std::size_t num_stores, const std::vector<bool>& exclude,
                                             std::size_t want, Rng& rng) {
  std::vector<StoreId> pool;
  pool.reserve(num_stores);
  for (StoreId s = 0; s < num_stores; ++s)
    if (!exclude[s]) pool.push_back(s);
  want = std::min(want, pool.size());
  for (std::size_t i = 0; i < want; ++i) std::swap(pool[i], pool[i + uniform_index(rng, pool.size() - i)]);
  pool.resize(want);
  return pool;
}

}  // namespace detail

/// Candidate list for one row under a protocol.
///
/// repeat: the user's distinct prior stores (first-visit order).
/// exploration: the target followed by min(999, #unvisited) sampled stores
/// the user never ordered from before this row.
/// combined: prior stores, then the target if it is new, then sampled
/// unvisited stores until the list holds kMaxCandidates (or the catalog runs
/// out). `max_candidates` lowers the list cap (prior stores are always kept).
inline EvalCase make_case(const DatasetSplit& split, std::size_t row, Protocol protocol, std::uint64_t seed,
                          std::size_t max_candidates = kMaxCandidates) {
  const auto& log = *split.log;
  const StoreId target = log.row(row).store;
  EvalCase c;
  c.row = row;
  c.protocol = protocol;
  c.rng_seed = mix_seed(seed, row);
  Rng rng(c.rng_seed);
  auto prior = prior_stores(log, row);
  std::vector<bool> exclude(log.num_stores(), false);
  for (auto s : prior) exclude[s] = true;
  bool is_repeat = exclude[target];
  exclude[target] = true;

  switch (protocol) {
    case Protocol::Repeat: {
      if (prior.empty()) throw Error("internal: repeat case without history at row " + std::to_string(row));
      if (!is_repeat) throw Error("internal: repeat case whose target is new at row " + std::to_string(row));
      c.candidates = std::move(prior);
      c.num_prior = c.candidates.size();
      break;
    }
    case Protocol::Exploration: {
      if (is_repeat) throw Error("internal: exploration case whose target was visited at row " + std::to_string(row));
      c.candidates.push_back(target);
      auto neg = detail::sample_unvisited(log.num_stores(), exclude, max_candidates - 1, rng);
      c.candidates.insert(c.candidates.end(), neg.begin(), neg.end());
      break;
    }
    case Protocol::Combined: {
      c.candidates = std::move(prior);
      c.num_prior = c.candidates.size();
      if (!is_repeat) c.candidates.push_back(target);
      std::size_t room = c.candidates.size() >= max_candidates ? 0 : max_candidates - c.candidates.size();
      auto neg = detail::sample_unvisited(log.num_stores(), exclude, room, rng);
      c.candidates.insert(c.candidates.end(), neg.begin(), neg.end());
      break;
    }
  }
  c.target_pos = static_cast<std::size_t>(std::find(c.candidates.begin(), c.candidates.end(), target) -
                                          c.candidates.begin());
  return c;
}

/// Builds cases for every eligible row of a partition: repeat rows for the
/// repeat protocol, exploration rows for the exploration protocol, all rows
/// for combined. With max_cases > 0 the eligible rows are thinned to an
/// evenly spaced subset of that size.
inline std::vector<EvalCase> build_cases(const DatasetSplit& split, Protocol protocol, std::uint64_t seed,
                                         Partition part = Partition::Test, std::size_t max_cases = 0) {
  std::vector<std::size_t> rows;
  for (std::size_t i = split.begin(part); i < split.end(part); ++i) {
    bool rep = split.repeat[i] != 0;
    if (protocol == Protocol::Repeat && !rep) continue;
    if (protocol == Protocol::Exploration && rep) continue;
    rows.push_back(i);
  }
  if (max_cases > 0 && rows.size() > max_cases) {
    std::vector<std::size_t> thin(max_cases);
    for (std::size_t k = 0; k < max_cases; ++k) thin[k] = rows[k * rows.size() / max_cases];
    rows = std::move(thin);
  }
  std::vector<EvalCase> cases(rows.size());
  parallel_for(rows.size(), [&](std::size_t k) { cases[k] = make_case(split, rows[k], protocol, seed); });
  return cases;
}

struct RankResult {
  int hit = 0;
  double ndcg = 0.0;
  std::size_t rank = 0;
};

/// Pessimistic rank of the target: 1 + #scores strictly greater + #other
/// scores equal to the target's.
inline RankResult rank_metrics(const std::vector<double>& scores, std::size_t target_pos, std::size_t k) {
  if (target_pos >= scores.size()) throw Error("rank_metrics: target not in slate");
  const double t = scores[target_pos];
  std::size_t rank = 1;
  for (std::size_t i = 0; i < scores.size(); ++i)
    if (i != target_pos && scores[i] >= t) ++rank;
  RankResult r;
  r.rank = rank;
  if (rank <= k) {
    r.hit = 1;
    r.ndcg = 1.0 / std::log2(static_cast<double>(rank) + 1.0);
  }
  return r;
}

inline RankResult rank_metrics(const ScoredSlate& slate, StoreId target, std::size_t k) {
  auto it = std::find(slate.candidates.begin(), slate.candidates.end(), target);
  if (it == slate.candidates.end()) throw Error("rank_metrics: target not in slate");
  return rank_metrics(slate.scores, static_cast<std::size_t>(it - slate.candidates.begin()), k);
}

struct ProtocolMetrics {
  double hr = 0.0;
  double ndcg = 0.0;
  std::size_t n = 0;
};

using CaseScorer = std::function<std::vector<double>(const EvalCase&)>;

/// Per-case hits, averaged. `hits` receives the per-case hit flags when non-null.
inline ProtocolMetrics evaluate(const CaseScorer& scorer, const std::vector<EvalCase>& cases, std::size_t k = 3,
                                std::vector<int>* hits = nullptr) {
  std::vector<RankResult> res(cases.size());
  parallel_for(cases.size(), [&](std::size_t i) {
    std::vector<double> scores;
    try {
      scores = scorer(cases[i]);
    } catch (const std::exception& e) {
      throw Error("scoring case at row " + std::to_string(cases[i].row) + ": " + e.what());
    }
    if (scores.size() != cases[i].candidates.size())
      throw Error("scorer returned " + std::to_string(scores.size()) + " scores for " +
                  std::to_string(cases[i].candidates.size()) + " candidates at row " + std::to_string(cases[i].row));
    res[i] = rank_metrics(scores, cases[i].target_pos, k);
  });
  ProtocolMetrics m;
  m.n = cases.size();
  for (const auto& r : res) {
    m.hr += r.hit;
    m.ndcg += r.ndcg;
  }
  if (m.n > 0) {
    m.hr /= static_cast<double>(m.n);
    m.ndcg /= static_cast<double>(m.n);
  }
  if (hits) {
    hits->clear();
    for (const auto& r : res) hits->push_back(r.hit);
  }
  return m;
}

struct MetricsReport {
  std::string model;
  std::uint64_t seed = 0;
  std::size_t k = 3;
  std::map<std::string, ProtocolMetrics> protocols;
  std::map<std::string, std::size_t> parameter_counts;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["model"] = model;
    j["seed"] = seed;
    j["k"] = k;
    const std::string hr = "hr@" + std::to_string(k), nd = "ndcg@" + std::to_string(k);
    for (const auto& [name, m] : protocols) j["metrics"][name] = {{hr, m.hr}, {nd, m.ndcg}, {"n", m.n}};
    j["parameters"] = nlohmann::json::object();
    for (const auto& [name, n] : parameter_counts) j["parameters"][name] = n;
    return j;
  }

  static MetricsReport from_json(const nlohmann::json& j) {
    MetricsReport r;
    r.model = j.at("model").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.k = j.at("k").get<std::size_t>();
    const std::string hr = "hr@" + std::to_string(r.k), nd = "ndcg@" + std::to_string(r.k);
    if (j.contains("metrics"))
      for (const auto& [name, m] : j["metrics"].items())
        r.protocols[name] = {m.at(hr).get<double>(), m.at(nd).get<double>(), m.at("n").get<std::size_t>()};
    for (const auto& [name, n] : j.at("parameters").items()) r.parameter_counts[name] = n.get<std::size_t>();
    return r;
  }

  void write(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(path + ": cannot open for writing");
    out << to_json().dump(2) << "\n";
    if (!out) throw Error(path + ": write failed");
  }

  static MetricsReport read(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(path + ": cannot open report");
    try {
      return from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::exception& e) {
      throw Error(path + ": malformed report: " + e.what());
    }
  }
};

}  // namespace fdrec
