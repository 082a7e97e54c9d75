#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <string>
#include <vector>

#include "fdrec/dataio.hpp"
#include "fdrec/situsim.hpp"

namespace fdrec {

/// Parameters of the planted-effect order generator.
struct SynthConfig {
  std::size_t n_users = 1000;
  std::size_t n_stores = 200;
  std::size_t n_orders_per_user = 20;
  double repeat_prob = 0.55;
  double situation_coupling = 0.9;
  double collab_coupling = 0.9;
  std::size_t n_locations = 12;
  std::size_t n_brands = 60;
  std::size_t n_cuisines = 12;
  // Generator knobs beyond the core contract.
  std::size_t n_days = 56;
  std::size_t n_clusters = 4;
  double repeat_prob_spread = 0.0;   // per-user p = repeat_prob +/- spread
  double situation_sharpness = 16.0;  // exponent on the repeat situation match
  std::size_t n_phases = 8;
  double trend_boost = 20.0;
  double off_taste = 0.02;     // affinity factor for cuisines outside the cluster taste
  double off_location = 0.005;  // affinity factor for stores away from the delivery location
  std::size_t locations_per_cluster = 8;
  double roaming = 1.0;  // probability an order is delivered to a random location of the cluster
  std::size_t phase_days = 7;
  std::size_t liked_cuisines = 3;
  std::int64_t start_time = 1672531200;  // 2023-01-01T00:00:00Z

  void validate() const {
    if (n_users == 0 || n_stores == 0 || n_orders_per_user == 0) throw Error("synth: sizes must be positive");
    if (n_locations == 0 || n_brands == 0 || n_cuisines == 0 || n_clusters == 0 || n_days == 0 ||
        n_phases == 0 || phase_days == 0)
      throw Error("synth: category counts must be positive");
    auto unit = [](double v) { return v >= 0.0 && v <= 1.0; };
    if (!unit(repeat_prob) || !unit(situation_coupling) || !unit(collab_coupling) || !unit(repeat_prob_spread))
      throw Error("synth: probabilities and couplings must lie in [0,1]");
    if (repeat_prob == 0.0 && repeat_prob_spread == 0.0 && n_orders_per_user > n_stores)
      throw Error("synth: infeasible config: more orders per user than stores with repeat_prob = 0");
    if (situation_sharpness < 0.0) throw Error("synth: situation_sharpness must be >= 0");
  }
};

/// Latent generator state, exposed for diagnostics and tests. Indexed by
/// generator user number (the numeric suffix of the user id).
struct SynthTruth {
  std::vector<std::size_t> user_cluster;
  std::vector<double> user_repeat_prob;
};

namespace detail {

inline std::string padded(const char* prefix, std::size_t i, int width) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s%0*zu", prefix, width, i);
  return buf;
}

enum class MealSlot { Lunch, Dinner };

}  // namespace detail

/// Simulates a food-ordering log whose repeat choices follow past order
/// situations and whose exploration choices follow an affinity shared by a
/// user cluster. The result carries its store catalog.
///
/// Users belong to one of n_clusters clusters. A cluster has a liked-cuisine
/// set per meal slot, a pool of delivery locations and one trending brand per
/// (phase, slot). Orders land on a uniform day; the slot and hour follow a
/// weekday/weekend pattern and the delivery location is home, work, or (with
/// probability roaming) any location of the cluster pool.
///
/// Each order after the first is a repeat with the user's repeat probability
/// (forced to explore when nothing was visited, forced to repeat when every
/// store was visited). Repeats re-pick a visited store with weight
/// (1-c_s) + c_s * m, where m is the mean situation similarity against that store's
/// past orders raised to situation_sharpness and mean-normalized over the
/// visited set. Explorations pick an unvisited store with weight
/// (1-c_c) + c_c * a, where a = taste(slot, cuisine) * location factor *
/// trend factor, mean-normalized over the unvisited set.
inline InteractionLog generate_synthetic(const SynthConfig& cfg, std::uint64_t seed, SynthTruth* truth = nullptr) {
  cfg.validate();
  Rng rng(seed);
  using detail::MealSlot;

  struct Store {
    std::size_t brand, cuisine, location;
  };
  std::vector<Store> stores(cfg.n_stores);
  for (auto& s : stores) {
    s.brand = uniform_index(rng, cfg.n_brands);
    s.cuisine = s.brand % cfg.n_cuisines;
    s.location = uniform_index(rng, cfg.n_locations);
  }

  // Static cuisine taste per meal slot, plus one trending brand per
  // (phase, slot) that rotates every phase_days.
  struct Cluster {
    std::vector<std::vector<double>> taste;  // [slot][cuisine]
    std::vector<std::size_t> trend;          // [phase * 2 + slot] -> brand
    std::vector<std::size_t> locations;
  };
  std::vector<Cluster> clusters(cfg.n_clusters);
  const std::size_t pool = std::min<std::size_t>(cfg.n_locations, cfg.locations_per_cluster);
  std::vector<std::size_t> perm;
  for (auto& c : clusters) {
    c.taste.assign(2, std::vector<double>(cfg.n_cuisines, cfg.off_taste));
    for (auto& t : c.taste) {
      perm.resize(cfg.n_cuisines);
      std::iota(perm.begin(), perm.end(), 0);
      std::shuffle(perm.begin(), perm.end(), rng);
      for (std::size_t i = 0; i < cfg.liked_cuisines && i < perm.size(); ++i) t[perm[i]] = 1.0;
    }
    c.trend.resize(cfg.n_phases * 2);
    for (auto& b : c.trend) b = uniform_index(rng, cfg.n_brands);
    perm.resize(cfg.n_locations);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    c.locations.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(pool));
  }

  LogBuilder builder(0);
  const int uw = static_cast<int>(std::to_string(cfg.n_users).size());
  const int sw = static_cast<int>(std::to_string(cfg.n_stores).size());
  const int lw = static_cast<int>(std::to_string(cfg.n_locations).size());
  std::vector<std::string> loc_names(cfg.n_locations);
  for (std::size_t l = 0; l < cfg.n_locations; ++l) loc_names[l] = detail::padded("L", l, lw);

  const std::int64_t epoch_day = cfg.start_time / kSecondsPerDay;
  struct Order {
    std::int64_t time;
    std::size_t location;
    MealSlot slot;
    SituationFeatures sit;
    std::size_t store;
  };

  for (std::size_t u = 0; u < cfg.n_users; ++u) {
    std::size_t cluster = uniform_index(rng, cfg.n_clusters);
    const auto& cl = clusters[cluster];
    std::size_t home = cl.locations[uniform_index(rng, cl.locations.size())];
    std::size_t work = cl.locations[uniform_index(rng, cl.locations.size())];
    double p_user = cfg.repeat_prob;
    if (cfg.repeat_prob_spread > 0.0)
      p_user = std::clamp(p_user + (uniform01(rng) < 0.5 ? -1.0 : 1.0) * cfg.repeat_prob_spread, 0.0, 1.0);

    if (truth) {
      truth->user_cluster.push_back(cluster);
      truth->user_repeat_prob.push_back(p_user);
    }
    std::vector<Order> orders(cfg.n_orders_per_user);
    for (auto& o : orders) {
      std::int64_t day = static_cast<std::int64_t>(uniform_index(rng, cfg.n_days));
      int dow = static_cast<int>(((epoch_day + day + 3) % 7 + 7) % 7);
      bool weekday = dow < 5;
      double r = uniform01(rng);
      if (weekday) {
        o.slot = r < 0.5 ? MealSlot::Lunch : MealSlot::Dinner;
        o.location = o.slot == MealSlot::Lunch ? work : home;
      } else {
        o.slot = r < 0.3 ? MealSlot::Lunch : MealSlot::Dinner;
        o.location = home;
      }
      if (uniform01(rng) < cfg.roaming) o.location = cl.locations[uniform_index(rng, cl.locations.size())];
      int hour = o.slot == MealSlot::Lunch ? 11 + static_cast<int>(uniform_index(rng, 3))
                                           : 17 + static_cast<int>(uniform_index(rng, 4));
      std::int64_t sec = static_cast<std::int64_t>(uniform_index(rng, 3600));
      o.time = cfg.start_time + day * kSecondsPerDay + hour * 3600 + sec;
    }
    std::sort(orders.begin(), orders.end(), [](const Order& a, const Order& b) { return a.time < b.time; });

    std::vector<bool> visited(cfg.n_stores, false);
    std::vector<std::size_t> visited_list;
    std::vector<double> w;
    for (std::size_t k = 0; k < orders.size(); ++k) {
      auto& o = orders[k];
      o.sit = situation_at(o.time, static_cast<LocationId>(o.location), cfg.start_time, 0);
      bool repeat = !visited_list.empty() && uniform01(rng) < p_user;
      if (!repeat && visited_list.size() == cfg.n_stores) repeat = true;

      if (repeat) {
        w.assign(visited_list.size(), 0.0);
        for (std::size_t j = 0; j < visited_list.size(); ++j) {
          // Mean match against every past order of the store.
          double sum = 0.0;
          std::size_t cnt = 0;
          for (std::size_t i = 0; i < k; ++i)
            if (orders[i].store == visited_list[j]) {
              sum += situation_similarity(o.sit, orders[i].sit);
              ++cnt;
            }
          const double match = cnt ? sum / static_cast<double>(cnt) : 0.0;
          w[j] = std::pow(match, cfg.situation_sharpness);
        }
        double mean = std::accumulate(w.begin(), w.end(), 0.0) / static_cast<double>(w.size());
        for (auto& x : w)
          x = (1.0 - cfg.situation_coupling) + cfg.situation_coupling * (mean > 0 ? x / mean : 1.0);
        o.store = visited_list[weighted_index(rng, w)];
      } else {
        std::vector<std::size_t> cand;
        cand.reserve(cfg.n_stores - visited_list.size());
        w.clear();
        for (std::size_t s = 0; s < cfg.n_stores; ++s) {
          if (visited[s]) continue;
          cand.push_back(s);
          std::size_t phase = (static_cast<std::size_t>(o.sit.day_index) / cfg.phase_days) % cfg.n_phases;
          std::size_t slot = o.slot == MealSlot::Lunch ? 0 : 1;
          const auto& st = stores[s];
          double a = cl.taste[slot][st.cuisine] * (st.location == o.location ? 1.0 : cfg.off_location) *
                     (st.brand == cl.trend[phase * 2 + slot] ? cfg.trend_boost : 1.0);
          w.push_back(a);
        }
        double mean = std::accumulate(w.begin(), w.end(), 0.0) / static_cast<double>(w.size());
        for (auto& x : w) x = (1.0 - cfg.collab_coupling) + cfg.collab_coupling * (mean > 0 ? x / mean : 1.0);
        o.store = cand[weighted_index(rng, w)];
        visited[o.store] = true;
        visited_list.push_back(o.store);
      }
    }
    std::string uname = detail::padded("u", u, uw);
    for (const auto& o : orders)
      builder.add(uname, detail::padded("s", o.store, sw), o.time, loc_names[o.location]);
  }

  const int bw = static_cast<int>(std::to_string(cfg.n_brands).size());
  const int cw = static_cast<int>(std::to_string(cfg.n_cuisines).size());
  for (std::size_t s = 0; s < cfg.n_stores; ++s)
    builder.add_store(detail::padded("s", s, sw), detail::padded("b", stores[s].brand, bw),
                      detail::padded("c", stores[s].cuisine, cw), loc_names[stores[s].location]);
  return std::move(builder).build();
}

}  // namespace fdrec
