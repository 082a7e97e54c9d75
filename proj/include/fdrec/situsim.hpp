#pragma once

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "fdrec/dataio.hpp"

namespace fdrec {

/// Similarity of two order situations in [0, 1]: one minus the mean of four
/// normalized differences (date capped at 30 days, circular hour, circular
/// weekday, location mismatch).
inline double situation_similarity(const SituationFeatures& a, const SituationFeatures& b) {
  double d_date = std::min(std::abs(a.day_index - b.day_index), 30) / 30.0;
  int dh = std::abs(a.hour - b.hour);
  double d_hour = std::min(dh, 24 - dh) / 12.0;
  int dd = std::abs(a.day_of_week - b.day_of_week);
  double d_dow = std::min(dd, 7 - dd) / 3.0;
  double mismatch = a.location == b.location ? 0.0 : 1.0;
  return 1.0 - 0.25 * (d_date + d_hour + d_dow + mismatch);
}

/// Fraction of matching attributes among brand, cuisine and store location.
inline double store_similarity(const StoreMeta& a, const StoreMeta& b) {
  int same = (a.brand == b.brand) + (a.cuisine == b.cuisine) + (a.location == b.location);
  return same / 3.0;
}

/// Sample Pearson correlation. Empty optional when either side is constant.
inline std::optional<double> pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw Error("pearson: length mismatch");
  if (x.size() < 2) throw Error("pearson: need at least two points");
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double dx = x[i] - mx, dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  // Sequences constant up to rounding count as constant.
  auto flat = [n](double ss, double mean) { return ss <= 1e-20 * n * (1.0 + mean * mean); };
  if (flat(sxx, mx) || flat(syy, my)) return std::nullopt;
  double r = sxy / std::sqrt(sxx * syy);
  return std::clamp(r, -1.0, 1.0);
}

/// Relative store frequency of a history, keyed by store id.
using PreferenceVector = std::map<StoreId, double>;

inline PreferenceVector preference_vector(std::span<const Interaction> history) {
  if (history.empty()) throw Error("preference_vector: empty history");
  PreferenceVector p;
  for (const auto& x : history) p[x.store] += 1.0;
  for (auto& [s, v] : p) v /= static_cast<double>(history.size());
  return p;
}

struct Neighbor {
  UserId user = 0;
  double similarity = 0.0;
};
using NeighborList = std::vector<Neighbor>;

namespace detail {

inline std::vector<Interaction> history_before(const InteractionLog& log, UserId u, std::int64_t as_of) {
  std::vector<Interaction> h;
  for (auto r : log.user_rows(u)) {
    if (log.row(r).time >= as_of) break;
    h.push_back(log.row(r));
  }
  return h;
}

inline void sort_and_truncate(NeighborList& list, std::size_t k) {
  std::sort(list.begin(), list.end(), [](const Neighbor& a, const Neighbor& b) {
    if (a.similarity != b.similarity) return a.similarity > b.similarity;
    return a.user < b.user;
  });
  if (list.size() > k) list.resize(k);
}

}  // namespace detail

/// Pearson similarity of two preference vectors aligned over the union of
/// their supports (missing stores count 0). Undefined correlations and
/// disjoint supports yield 0.
inline double preference_similarity(const PreferenceVector& a, const PreferenceVector& b) {
  bool overlap = false;
  for (const auto& [s, v] : a)
    if (b.count(s)) {
      overlap = true;
      break;
    }
  if (!overlap) return 0.0;
  std::vector<double> x, y;
  auto ia = a.begin();
  auto ib = b.begin();
  while (ia != a.end() || ib != b.end()) {
    if (ib == b.end() || (ia != a.end() && ia->first < ib->first)) {
      x.push_back(ia->second);
      y.push_back(0.0);
      ++ia;
    } else if (ia == a.end() || ib->first < ia->first) {
      x.push_back(0.0);
      y.push_back(ib->second);
      ++ib;
    } else {
      x.push_back(ia->second);
      y.push_back(ib->second);
      ++ia;
      ++ib;
    }
  }
  if (x.size() < 2) return 0.0;
  return pearson(x, y).value_or(0.0);
}

/// Top-K users by preference similarity using interactions strictly before
/// as_of. Ties broken by ascending user id; the target is never included.
inline NeighborList collaborative_users(UserId target, const InteractionLog& log, std::size_t k,
                                        std::int64_t as_of) {
  if (k < 1) throw Error("collaborative_users: K must be >= 1");
  if (target >= log.num_users()) throw Error("collaborative_users: unknown user");
  auto mine = detail::history_before(log, target, as_of);
  if (mine.empty()) return {};
  auto pa = preference_vector(mine);
  NeighborList out;
  for (UserId v = 0; v < log.num_users(); ++v) {
    if (v == target) continue;
    auto theirs = detail::history_before(log, v, as_of);
    double sim = theirs.empty() ? 0.0 : preference_similarity(pa, preference_vector(theirs));
    out.push_back({v, sim});
  }
  detail::sort_and_truncate(out, k);
  return out;
}

/// Neighbor lists for every user at once. Uses an inverted store index, so
/// only pairs with overlapping support are scored explicitly; all other
/// users have similarity 0 and fill remaining slots by ascending id.
/// Produces the same lists as collaborative_users.
inline std::vector<NeighborList> all_collaborative_users(const InteractionLog& log, std::size_t k,
                                                         std::int64_t as_of) {
  if (k < 1) throw Error("collaborative_users: K must be >= 1");
  const std::size_t U = log.num_users();
  // Sparse preference vectors, sorted by store id.
  std::vector<std::vector<std::pair<StoreId, double>>> pref(U);
  std::vector<double> sumsq(U, 0.0);
  for (UserId u = 0; u < U; ++u) {
    auto h = detail::history_before(log, u, as_of);
    if (h.empty()) continue;
    for (const auto& [s, v] : preference_vector(h)) {
      pref[u].emplace_back(s, v);
      sumsq[u] += v * v;
    }
  }
  std::vector<std::vector<std::pair<UserId, double>>> by_store(log.num_stores());
  for (UserId u = 0; u < U; ++u)
    for (const auto& [s, v] : pref[u]) by_store[s].emplace_back(u, v);

  std::vector<NeighborList> result(U);
  parallel_for(U, [&](std::size_t ui) {
    const auto u = static_cast<UserId>(ui);
    if (pref[u].empty()) return;
    std::vector<double> dot(U, 0.0);
    std::vector<std::uint32_t> common(U, 0);
    std::vector<UserId> touched;
    for (const auto& [s, x] : pref[u])
      for (const auto& [v, y] : by_store[s]) {
        if (v == u) continue;
        if (common[v] == 0) touched.push_back(v);
        ++common[v];
        dot[v] += x * y;
      }
    NeighborList list;
    list.reserve(touched.size());
    for (UserId v : touched) {
      // Both vectors sum to one, so over a union support of size n the
      // centered moments reduce to (sum of products - 1/n) terms.
      double n = static_cast<double>(pref[u].size() + pref[v].size() - common[v]);
      double sim = 0.0;
      if (n >= 2) {
        double cov = dot[v] - 1.0 / n;
        double vx = sumsq[u] - 1.0 / n;
        double vy = sumsq[v] - 1.0 / n;
        if (vx > 1e-15 && vy > 1e-15) sim = std::clamp(cov / std::sqrt(vx * vy), -1.0, 1.0);
      }
      list.push_back({v, sim});
    }
    detail::sort_and_truncate(list, std::max<std::size_t>(k, list.size()));
    // Users without overlap sit at similarity 0; keep positives, then merge
    // zero-similarity users in id order, then negatives.
    NeighborList out;
    std::size_t i = 0;
    while (i < list.size() && list[i].similarity > 0.0 && out.size() < k) out.push_back(list[i++]);
    if (out.size() < k) {
      std::vector<UserId> zeros;
      std::vector<bool> scored(U, false);
      for (const auto& n : list) scored[n.user] = true;
      for (std::size_t j = i; j < list.size() && list[j].similarity == 0.0; ++j) zeros.push_back(list[j].user);
      std::size_t unscored = 0;
      for (UserId v = 0; v < U && unscored < k; ++v)
        if (v != u && !scored[v]) {
          zeros.push_back(v);
          ++unscored;
        }
      std::sort(zeros.begin(), zeros.end());
      for (UserId v : zeros) {
        if (out.size() >= k) break;
        out.push_back({v, 0.0});
      }
      while (i < list.size() && list[i].similarity == 0.0) ++i;
      while (i < list.size() && out.size() < k) out.push_back(list[i++]);
    }
    result[u] = std::move(out);
  });
  return result;
}

}  // namespace fdrec
