#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "fdrec/dataio.hpp"
#include "fdrec/situsim.hpp"

namespace fdrec {

struct CurveSeries {
  std::vector<double> x;
  std::vector<double> y;
  std::vector<std::size_t> n;
};

enum class ConsumptionKind : std::uint8_t { Repeat, Exploration };

inline const char* kind_name(ConsumptionKind k) {
  return k == ConsumptionKind::Repeat ? "repeat" : "exploration";
}

struct InfluenceRecord {
  std::size_t row = 0;
  ConsumptionKind kind = ConsumptionKind::Repeat;
  std::optional<double> influence;
};

/// Share of users whose n-th order is a repeat, over users with >= n orders.
inline CurveSeries repeat_ratio_by_order_index(const InteractionLog& log, int max_n) {
  if (max_n < 2) throw Error("repeat_ratio_by_order_index: max_n must be >= 2");
  auto flags = label_repeat_flags(log);
  CurveSeries c;
  for (int n = 1; n <= max_n; ++n) {
    std::size_t users = 0, repeats = 0;
    for (UserId u = 0; u < log.num_users(); ++u) {
      auto seq = log.user_rows(u);
      if (seq.size() < static_cast<std::size_t>(n)) continue;
      ++users;
      repeats += flags[seq[n - 1]];
    }
    c.x.push_back(n);
    c.y.push_back(users ? static_cast<double>(repeats) / static_cast<double>(users) : 0.0);
    c.n.push_back(users);
  }
  return c;
}

/// Mean number of distinct stores within the first n orders.
inline CurveSeries explored_store_counts(const InteractionLog& log, int max_n) {
  if (max_n < 1) throw Error("explored_store_counts: max_n must be >= 1");
  std::vector<double> total(max_n, 0.0);
  std::vector<std::size_t> users(max_n, 0);
  for (UserId u = 0; u < log.num_users(); ++u) {
    auto seq = log.user_rows(u);
    std::unordered_set<StoreId> seen;
    for (std::size_t k = 0; k < seq.size() && k < static_cast<std::size_t>(max_n); ++k) {
      seen.insert(log.row(seq[k]).store);
      total[k] += static_cast<double>(seen.size());
      ++users[k];
    }
  }
  CurveSeries c;
  for (int n = 1; n <= max_n; ++n) {
    c.x.push_back(n);
    c.y.push_back(users[n - 1] ? total[n - 1] / static_cast<double>(users[n - 1]) : 0.0);
    c.n.push_back(users[n - 1]);
  }
  return c;
}

struct RatioCdf {
  CurveSeries users;
  CurveSeries stores;
};

/// Over the last window_s seconds: for each grid value r in {0, .01, .., 1},
/// the fraction of users (stores) whose repeat ratio is >= r.
inline RatioCdf repeat_exploration_cdf(const InteractionLog& log, std::int64_t window_s) {
  if (log.empty()) return {};
  if (window_s > log.last_time() - log.epoch())
    throw Error("repeat_exploration_cdf: window exceeds the dataset span");
  auto flags = label_repeat_flags(log);
  const std::int64_t begin = log.last_time() - window_s;
  std::vector<std::size_t> u_all(log.num_users(), 0), u_rep(log.num_users(), 0);
  std::vector<std::size_t> s_all(log.num_stores(), 0), s_rep(log.num_stores(), 0);
  for (std::size_t i = 0; i < log.size(); ++i) {
    const auto& x = log.row(i);
    if (x.time < begin) continue;
    ++u_all[x.user];
    u_rep[x.user] += flags[i];
    ++s_all[x.store];
    s_rep[x.store] += flags[i];
  }
  auto curve = [](const std::vector<std::size_t>& all, const std::vector<std::size_t>& rep) {
    std::vector<double> ratios;
    for (std::size_t i = 0; i < all.size(); ++i)
      if (all[i]) ratios.push_back(static_cast<double>(rep[i]) / static_cast<double>(all[i]));
    CurveSeries c;
    if (ratios.empty()) return c;
    for (int g = 0; g <= 100; ++g) {
      double r = g / 100.0;
      std::size_t above = 0;
      // Grid points are rounded to the nearest hundredth; compare with a
      // half-ulp margin so ratios like 0.29 land on their grid point.
      for (double v : ratios) above += v >= r - 1e-12;
      c.x.push_back(r);
      c.y.push_back(static_cast<double>(above) / static_cast<double>(ratios.size()));
      c.n.push_back(ratios.size());
    }
    return c;
  };
  return {curve(u_all, u_rep), curve(s_all, s_rep)};
}

/// Correlation between situation similarity and store similarity over a
/// user's own prior orders, for every order with at least min_history priors.
inline std::vector<InfluenceRecord> historical_influence(const InteractionLog& log, std::size_t min_history = 5) {
  if (!log.has_catalog()) throw Error("historical_influence: store catalog required");
  auto flags = label_repeat_flags(log);
  std::vector<InfluenceRecord> out;
  std::vector<double> sim_mu, sim_tau;
  for (std::size_t i = 0; i < log.size(); ++i) {
    std::uint32_t rank = log.rank_in_user(i);
    if (rank < min_history) continue;
    const auto& x = log.row(i);
    auto now = log.situation(i);
    auto seq = log.user_rows(x.user);
    sim_mu.clear();
    sim_tau.clear();
    for (std::uint32_t k = 0; k < rank; ++k) {
      sim_mu.push_back(situation_similarity(now, log.situation(seq[k])));
      sim_tau.push_back(store_similarity(log.store_meta(x.store), log.store_meta(log.row(seq[k]).store)));
    }
    out.push_back({i, flags[i] ? ConsumptionKind::Repeat : ConsumptionKind::Exploration, pearson(sim_mu, sim_tau)});
  }
  return out;
}

/// Correlation between situation and store similarity over the recent
/// orders (t - t_delta_s, t) of the user's collaborative users. Neighbor
/// lists are refreshed every t_delta_s from the history before each refresh
/// point, so they never see the order being analyzed. Orders with fewer than
/// min_interactions collaborative orders are skipped.
inline std::vector<InfluenceRecord> collaborative_influence(const InteractionLog& log, std::size_t k,
                                                            std::int64_t t_delta_s,
                                                            std::size_t min_interactions = 5) {
  if (k < 1) throw Error("collaborative_influence: K must be >= 1");
  if (t_delta_s <= 0) throw Error("collaborative_influence: t_delta must be positive");
  if (!log.has_catalog()) throw Error("collaborative_influence: store catalog required");
  auto flags = label_repeat_flags(log);
  std::vector<InfluenceRecord> out;
  std::int64_t snapshot = std::numeric_limits<std::int64_t>::min();
  std::vector<NeighborList> neighbors;
  std::vector<double> sim_mu, sim_tau;
  for (std::size_t i = 0; i < log.size(); ++i) {
    const auto& x = log.row(i);
    std::int64_t as_of = log.epoch() + ((x.time - log.epoch()) / t_delta_s) * t_delta_s;
    if (as_of != snapshot) {
      snapshot = as_of;
      neighbors = all_collaborative_users(log, k, as_of);
    }
    auto now = log.situation(i);
    sim_mu.clear();
    sim_tau.clear();
    for (const auto& nb : neighbors[x.user]) {
      auto seq = log.user_rows(nb.user);
      auto first = std::lower_bound(seq.begin(), seq.end(), x.time - t_delta_s + 1,
                                    [&](std::uint32_t r, std::int64_t t) { return log.row(r).time < t; });
      for (auto it = first; it != seq.end() && log.row(*it).time < x.time; ++it) {
        sim_mu.push_back(situation_similarity(now, log.situation(*it)));
        sim_tau.push_back(store_similarity(log.store_meta(x.store), log.store_meta(log.row(*it).store)));
      }
    }
    if (sim_mu.size() < min_interactions) continue;
    out.push_back({i, flags[i] ? ConsumptionKind::Repeat : ConsumptionKind::Exploration, pearson(sim_mu, sim_tau)});
  }
  return out;
}

constexpr int kInfluenceBins = 41;

/// Bin counts of defined influences of one kind over [-1, 1].
inline std::vector<std::size_t> influence_histogram(const std::vector<InfluenceRecord>& records, ConsumptionKind kind) {
  std::vector<std::size_t> bins(kInfluenceBins, 0);
  for (const auto& r : records) {
    if (r.kind != kind || !r.influence) continue;
    int b = static_cast<int>(std::floor((*r.influence + 1.0) / 2.0 * kInfluenceBins));
    bins[std::clamp(b, 0, kInfluenceBins - 1)] += 1;
  }
  return bins;
}

struct InfluenceSummary {
  double mean = 0.0;
  std::size_t defined = 0;
  std::size_t undefined = 0;
};

inline InfluenceSummary summarize(const std::vector<InfluenceRecord>& records, ConsumptionKind kind) {
  InfluenceSummary s;
  for (const auto& r : records) {
    if (r.kind != kind) continue;
    if (!r.influence) {
      ++s.undefined;
      continue;
    }
    s.mean += *r.influence;
    ++s.defined;
  }
  if (s.defined) s.mean /= static_cast<double>(s.defined);
  return s;
}

struct AnalysisResult {
  CurveSeries repeat_ratio;
  CurveSeries explored;
  RatioCdf cdf;
  std::vector<InfluenceRecord> inf_his;
  std::vector<InfluenceRecord> inf_col;
};

struct AnalysisOptions {
  int max_n = 30;
  std::int64_t cdf_window_s = 14 * kSecondsPerDay;
  std::size_t k = 10;
  std::int64_t t_delta_s = 7 * kSecondsPerDay;
};

inline AnalysisResult run_analysis(const InteractionLog& log, const AnalysisOptions& opt) {
  AnalysisResult r;
  r.repeat_ratio = repeat_ratio_by_order_index(log, opt.max_n);
  r.explored = explored_store_counts(log, opt.max_n);
  r.cdf = repeat_exploration_cdf(log, std::min(opt.cdf_window_s, log.last_time() - log.epoch()));
  r.inf_his = historical_influence(log);
  r.inf_col = collaborative_influence(log, opt.k, opt.t_delta_s);
  return r;
}

namespace detail {

inline std::string fmt_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

inline std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw Error("cannot write " + p.string());
  return out;
}

inline void write_curve(const std::filesystem::path& p, const CurveSeries& c) {
  auto out = open_out(p);
  out << "x,y,n\n";
  for (std::size_t i = 0; i < c.x.size(); ++i) out << fmt_real(c.x[i]) << ',' << fmt_real(c.y[i]) << ',' << c.n[i] << '\n';
  if (!out) throw Error("write failed: " + p.string());
}

inline void write_histogram(const std::filesystem::path& p, const std::vector<InfluenceRecord>& recs) {
  auto out = open_out(p);
  out << "bin_lo,bin_hi,repeat,exploration\n";
  if (!recs.empty()) {
    auto rep = influence_histogram(recs, ConsumptionKind::Repeat);
    auto exp = influence_histogram(recs, ConsumptionKind::Exploration);
    for (int b = 0; b < kInfluenceBins; ++b) {
      double lo = -1.0 + 2.0 * b / kInfluenceBins, hi = -1.0 + 2.0 * (b + 1) / kInfluenceBins;
      out << fmt_real(lo) << ',' << fmt_real(hi) << ',' << rep[b] << ',' << exp[b] << '\n';
    }
  }
  if (!out) throw Error("write failed: " + p.string());
}

}  // namespace detail

/// Writes the curve CSVs, 41-bin influence histograms and a summary table.
inline void emit_analysis_report(const AnalysisResult& r, const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw Error("cannot create " + out_dir.string() + ": " + ec.message());
  detail::write_curve(out_dir / "repeat_ratio.csv", r.repeat_ratio);
  detail::write_curve(out_dir / "explored.csv", r.explored);
  detail::write_curve(out_dir / "cdf_users.csv", r.cdf.users);
  detail::write_curve(out_dir / "cdf_stores.csv", r.cdf.stores);
  detail::write_histogram(out_dir / "inf_his.csv", r.inf_his);
  detail::write_histogram(out_dir / "inf_col.csv", r.inf_col);

  auto out = detail::open_out(out_dir / "summary.csv");
  out << "metric,kind,mean,defined,undefined\n";
  for (auto [name, recs] : {std::pair{"inf_his", &r.inf_his}, std::pair{"inf_col", &r.inf_col}}) {
    if (recs->empty()) continue;
    for (auto k : {ConsumptionKind::Repeat, ConsumptionKind::Exploration}) {
      auto s = summarize(*recs, k);
      out << name << ',' << kind_name(k) << ',' << detail::fmt_real(s.mean) << ',' << s.defined << ','
          << s.undefined << '\n';
    }
  }
  if (!out) throw Error("write failed: summary.csv");
}

}  // namespace fdrec
