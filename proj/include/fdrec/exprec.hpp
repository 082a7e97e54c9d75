#pragma once

#include <array>
#include <limits>
#include <string>
#include <vector>

#include "fdrec/evalharness.hpp"
#include "fdrec/modelcore.hpp"
#include "fdrec/situsim.hpp"

namespace fdrec {

/// Trigger order used by the fusion layer and the ablation mask.
enum Trigger : std::size_t { kSituation = 0, kHistory = 1, kUser = 2, kCollab = 3 };
inline constexpr std::size_t kNumTriggers = 4;
inline constexpr std::size_t kNumActivations = 4;  // identity, tanh, sigmoid, relu

inline const char* trigger_name(std::size_t t) {
  static const char* names[] = {"situation", "history", "user", "collab"};
  return t < kNumTriggers ? names[t] : "?";
}

inline std::size_t parse_trigger(const std::string& s) {
  for (std::size_t t = 0; t < kNumTriggers; ++t)
    if (s == trigger_name(t)) return t;
  throw Error("unknown trigger '" + s + "' (expected situation, history, user or collab)");
}

/// true = trigger removed before the fusion softmax.
using TriggerMask = std::array<bool, kNumTriggers>;

struct ExpRecConfig {
  TrainConfig train{};
  std::size_t history_limit = 20;
  std::size_t neighbors = 10;
  TriggerMask ablate{};
};

namespace detail {

inline Vec activation(std::size_t j, const Vec& x) {
  switch (j) {
    case 0: return x;
    case 1: return x.array().tanh().matrix();
    case 2: return sigmoid(x);
    default: return x.cwiseMax(0.0);
  }
}

inline Vec activation_grad(std::size_t j, const Vec& x) {
  switch (j) {
    case 0: return Vec::Ones(x.size());
    case 1: return (1.0 - x.array().tanh().square()).matrix();
    case 2: {
      Vec s = sigmoid(x);
      return (s.array() * (1.0 - s.array())).matrix();
    }
    default: return x.unaryExpr([](double v) { return v > 0.0 ? 1.0 : 0.0; });
  }
}

}  // namespace detail

/// Neighbor mixing weights: max(sim, 0) normalized to sum 1, uniform when no
/// neighbor is positive, empty when there are no neighbors.
inline std::vector<double> neighbor_weights(const NeighborList& nb) {
  std::vector<double> w(nb.size(), 0.0);
  double total = 0.0;
  for (std::size_t j = 0; j < nb.size(); ++j) total += w[j] = std::max(nb[j].similarity, 0.0);
  for (auto& x : w) x = total > 0.0 ? x / total : 1.0 / static_cast<double>(nb.size());
  return w;
}

struct FusionResult {
  Vec output;
  Vec weights;  // zero at masked triggers
};

/// Exploration recommender fusing four triggers (situation, encoded history,
/// situation-conditioned user, collaborative users) with a learned softmax
/// gate, scoring stores by dot product with the fused vector.
struct ExpRecModel {
  ModelState state;
  LocationMap locations;
  std::vector<NeighborList> neighbors;  // frozen, indexed by user
  std::size_t stores = 0, users = 0;
  SituationEmbedding situation;
  Gru gru;
  std::size_t cond_W = 0, cond_b = 0, fuse_W = 0, fuse_b = 0;
  std::size_t history_limit = 20;
  TriggerMask ablate{};

  static ExpRecModel create(std::size_t num_stores, std::size_t num_users, LocationMap locations, std::size_t dim,
                            std::uint64_t seed) {
    ExpRecModel m{ModelState(seed), std::move(locations)};
    m.stores = m.state.add("exprec.store", {num_stores, dim}, Init::Embedding);
    m.situation = SituationEmbedding::create(m.state, "exprec.situation", m.locations.rows, dim);
    m.users = m.state.add("exprec.user", {num_users, dim}, Init::Embedding);
    m.gru = Gru::create(m.state, "exprec.gru", 2 * dim, dim);
    m.cond_W = m.state.add("exprec.cond.W", {kNumActivations, dim}, Init::Weight);
    m.cond_b = m.state.add("exprec.cond.b", {kNumActivations}, Init::Zero);
    m.fuse_W = m.state.add("exprec.fuse.W", {kNumTriggers, 2 * dim}, Init::Weight);
    m.fuse_b = m.state.add("exprec.fuse.b", {kNumTriggers}, Init::Zero);
    m.neighbors.assign(num_users, {});
    return m;
  }

  std::size_t dim() const { return state[stores].cols(); }

  std::vector<Vec> history_inputs(const History& history) const {
    std::size_t begin = history.size() > history_limit && history_limit > 0 ? history.size() - history_limit : 0;
    std::vector<Vec> xs;
    xs.reserve(history.size() - begin);
    const auto D = static_cast<Eigen::Index>(dim());
    for (std::size_t i = begin; i < history.size(); ++i) {
      Vec x(2 * D);
      x << state[stores].row(history[i].store), situation.encode(state, history[i].situation, locations);
      xs.push_back(std::move(x));
    }
    return xs;
  }

  /// Final GRU state over the last history_limit entries; zero when empty.
  Vec encode_history(const History& history) const { return gru_sequence(state, gru, history_inputs(history)); }

  /// Mixture weights over the activation set for a situation vector.
  Vec activation_weights(const Vec& e_mu) const { return softmax(dense(state[cond_W], state[cond_b], e_mu)); }

  Vec condition_user(const Vec& user_vec, const Vec& e_mu) const {
    return condition_with(user_vec, activation_weights(e_mu));
  }

  static Vec condition_with(const Vec& x, const Vec& a) {
    Vec out = Vec::Zero(x.size());
    for (std::size_t j = 0; j < kNumActivations; ++j) out += a[static_cast<Eigen::Index>(j)] * detail::activation(j, x);
    return out;
  }

  Vec collaborative_embedding(const NeighborList& nb, const Vec& e_mu) const {
    Vec out = Vec::Zero(static_cast<Eigen::Index>(dim()));
    if (nb.empty()) return out;
    Vec a = activation_weights(e_mu);
    auto w = neighbor_weights(nb);
    for (std::size_t j = 0; j < nb.size(); ++j) out += w[j] * condition_with(state[users].row(nb[j].user), a);
    return out;
  }

  FusionResult trigger_fusion(const Vec& e_mu, const Vec& e_h, const Vec& e_u, const Vec& e_cu,
                              const TriggerMask& mask) const {
    std::size_t active = 0;
    for (bool m : mask) active += !m;
    if (active == 0) throw Error("exprec: all four triggers are masked");
    Vec z(e_mu.size() + e_u.size());
    z << e_mu, e_u;
    Vec logits = dense(state[fuse_W], state[fuse_b], z);
    FusionResult r;
    r.weights = masked_softmax(logits, mask);
    const Vec* trig[] = {&e_mu, &e_h, &e_u, &e_cu};
    r.output = Vec::Zero(e_mu.size());
    for (std::size_t k = 0; k < kNumTriggers; ++k)
      if (!mask[k]) r.output += r.weights[static_cast<Eigen::Index>(k)] * *trig[k];
    return r;
  }

  static Vec masked_softmax(const Vec& logits, const TriggerMask& mask) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < kNumTriggers; ++k)
      if (!mask[k]) mx = std::max(mx, logits[static_cast<Eigen::Index>(k)]);
    Vec w = Vec::Zero(kNumTriggers);
    double total = 0.0;
    for (std::size_t k = 0; k < kNumTriggers; ++k)
      if (!mask[k]) total += w[static_cast<Eigen::Index>(k)] = std::exp(logits[static_cast<Eigen::Index>(k)] - mx);
    return w / total;
  }

  /// The fused exploration query s_e for one decision point.
  Vec query(UserId user, const History& history, const SituationFeatures& now) const {
    Vec e_mu = situation.encode(state, now, locations);
    Vec e_h = ablate[kHistory] ? Vec::Zero(e_mu.size()) : encode_history(history);
    Vec a = activation_weights(e_mu);
    Vec e_u = condition_with(state[users].row(user), a);
    Vec e_cu = ablate[kCollab] ? Vec::Zero(e_mu.size()) : collaborative_embedding(neighbors.at(user), e_mu);
    return trigger_fusion(e_mu, e_h, e_u, e_cu, ablate).output;
  }

  std::vector<double> score(UserId user, const History& history, const SituationFeatures& now,
                            const std::vector<StoreId>& candidates) const {
    Vec se = query(user, history, now);
    std::vector<double> out;
    out.reserve(candidates.size());
    for (auto c : candidates) out.push_back(state[stores].row(c).dot(se));
    return out;
  }

  /// Scores unvisited candidates; any candidate found in the history is an error.
  ScoredSlate exprec_score(UserId user, const History& history, const SituationFeatures& now,
                           const std::vector<StoreId>& candidates) const {
    for (const auto& h : history)
      for (auto c : candidates)
        if (h.store == c) throw Error("exprec: candidate store " + std::to_string(c) + " is in the history");
    return {candidates, score(user, history, now, candidates), SlateOrigin::Exploration};
  }

  /// One training pair for a user. The instance's history is the first
  /// `pos` entries of the history passed to group_loss.
  struct Instance {
    std::size_t pos = 0;
    SituationFeatures now;
    StoreId positive = 0, negative = 0;
  };

  /// BPR loss for one instance; accumulates gradients.
  double loss(UserId user, const History& history, const SituationFeatures& now, StoreId pos, StoreId neg) {
    return group_loss(user, history, {{history.size(), now, pos, neg}});
  }

  /// Summed BPR loss over instances of one user; accumulates gradients. The
  /// GRU runs once over the shared prefix and neighbor activations are
  /// computed once, so the result equals summing loss() per instance at a
  /// fraction of the cost.
  double group_loss(UserId user, const History& history, const std::vector<Instance>& inst) {
    const auto D = static_cast<Eigen::Index>(dim());
    auto& S = state[stores];
    auto& Ut = state[users];
    const std::size_t L = history_limit == 0 ? history.size() : history_limit;

    // History states. Prefixes of length <= L come from one pass; longer
    // ones need their own window.
    const bool use_h = !ablate[kHistory];
    std::size_t pass_len = 0;
    if (use_h)
      for (const auto& x : inst)
        if (x.pos <= L) pass_len = std::max(pass_len, x.pos);
    std::vector<Vec> xs;
    std::vector<GruCache> caches(pass_len);
    std::vector<Vec> states{Vec::Zero(D)};
    for (std::size_t t = 0; t < pass_len; ++t) {
      Vec x(2 * D);
      x << S.row(history[t].store), situation.encode(state, history[t].situation, locations);
      states.push_back(gru_cell(state, gru, x, states.back(), &caches[t]));
    }
    std::vector<Vec> dstates(pass_len + 1, Vec::Zero(D));

    // Activations of the user's own vector and of its neighbors.
    const Vec xu = Ut.row(user);
    std::array<Vec, kNumActivations> act_u, dact_u, bar, gu, gc;
    for (std::size_t k = 0; k < kNumActivations; ++k) {
      act_u[k] = detail::activation(k, xu);
      dact_u[k] = detail::activation_grad(k, xu);
      bar[k] = Vec::Zero(D);
      gu[k] = Vec::Zero(D);
      gc[k] = Vec::Zero(D);
    }
    const auto& nb = neighbors.at(user);
    const bool use_c = !ablate[kCollab] && !nb.empty();
    std::vector<double> nw;
    if (use_c) {
      nw = neighbor_weights(nb);
      for (std::size_t j = 0; j < nb.size(); ++j) {
        Vec xj = Ut.row(nb[j].user);
        for (std::size_t k = 0; k < kNumActivations; ++k) bar[k] += nw[j] * detail::activation(k, xj);
      }
    }

    double total = 0.0;
    for (const auto& x : inst) {
      Vec e_mu = situation.encode(state, x.now, locations);
      Vec e_h = Vec::Zero(D);
      std::vector<GruCache> wcache;
      if (use_h) {
        if (x.pos <= L) {
          e_h = states[x.pos];
        } else {
          std::vector<Vec> wx;
          for (std::size_t t = x.pos - L; t < x.pos; ++t) {
            Vec v(2 * D);
            v << S.row(history[t].store), situation.encode(state, history[t].situation, locations);
            wx.push_back(std::move(v));
          }
          e_h = gru_sequence(state, gru, wx, &wcache);
        }
      }
      Vec a = activation_weights(e_mu);
      Vec e_u = Vec::Zero(D), e_cu = Vec::Zero(D);
      for (std::size_t k = 0; k < kNumActivations; ++k) {
        e_u += a[static_cast<Eigen::Index>(k)] * act_u[k];
        if (use_c) e_cu += a[static_cast<Eigen::Index>(k)] * bar[k];
      }
      auto fr = trigger_fusion(e_mu, e_h, e_u, e_cu, ablate);
      const Vec& se = fr.output;

      Vec sp = S.row(x.positive), sn = S.row(x.negative);
      double xp = sp.dot(se), xn = sn.dot(se);
      double g = bpr_grad(xp, xn);
      total += bpr_loss(xp, xn);
      S.grow(x.positive) += g * se;
      S.grow(x.negative) -= g * se;
      Vec dse = g * (sp - sn);

      // Fusion gate; masked triggers carry zero weight and zero gradient.
      const Vec* trig[] = {&e_mu, &e_h, &e_u, &e_cu};
      Vec dw = Vec::Zero(kNumTriggers);
      for (std::size_t k = 0; k < kNumTriggers; ++k)
        if (!ablate[k]) dw[static_cast<Eigen::Index>(k)] = trig[k]->dot(dse);
      Vec z(2 * D);
      z << e_mu, e_u;
      Vec dz = dense_backward(state[fuse_W], state[fuse_b], z, softmax_backward(fr.weights, dw));
      Vec de_mu = dz.head(D) + fr.weights[kSituation] * dse;
      Vec de_u = dz.tail(D) + fr.weights[kUser] * dse;
      Vec de_h = fr.weights[kHistory] * dse;
      Vec de_cu = fr.weights[kCollab] * dse;

      // Conditional encoder.
      Vec da(kNumActivations);
      for (std::size_t k = 0; k < kNumActivations; ++k) {
        auto kk = static_cast<Eigen::Index>(k);
        da[kk] = act_u[k].dot(de_u) + (use_c ? bar[k].dot(de_cu) : 0.0);
        gu[k] += a[kk] * de_u;
        if (use_c) gc[k] += a[kk] * de_cu;
      }
      de_mu += dense_backward(state[cond_W], state[cond_b], e_mu, softmax_backward(a, da));
      situation.backward(state, x.now, locations, de_mu);

      if (use_h && fr.weights[kHistory] != 0.0) {
        if (x.pos <= L) {
          dstates[x.pos] += de_h;
        } else {
          std::vector<Vec> gxs;
          gru_sequence_backward(state, gru, wcache, de_h, &gxs);
          for (std::size_t t = 0; t < gxs.size(); ++t) {
            const auto& h = history[x.pos - L + t];
            S.grow(h.store) += gxs[t].head(D);
            situation.backward(state, h.situation, locations, gxs[t].tail(D));
          }
        }
      }
    }

    // User and neighbor rows.
    Vec du = Vec::Zero(D);
    for (std::size_t k = 0; k < kNumActivations; ++k) du += dact_u[k].cwiseProduct(gu[k]);
    Ut.grow(user) += du;
    if (use_c)
      for (std::size_t j = 0; j < nb.size(); ++j) {
        Vec xj = Ut.row(nb[j].user);
        Vec dj = Vec::Zero(D);
        for (std::size_t k = 0; k < kNumActivations; ++k) dj += detail::activation_grad(k, xj).cwiseProduct(gc[k]);
        Ut.grow(nb[j].user) += nw[j] * dj;
      }

    // Shared GRU pass, gradients injected at every used prefix length.
    Vec gh = dstates[pass_len];
    for (std::size_t t = pass_len; t-- > 0;) {
      Vec gx, gprev;
      gru_cell_backward(state, gru, caches[t], gh, &gx, &gprev);
      S.grow(history[t].store) += gx.head(D);
      situation.backward(state, history[t].situation, locations, gx.tail(D));
      gh = gprev + dstates[t];
    }
    return total;
  }
};

inline CaseScorer exprec_scorer(const ExpRecModel& m, const DatasetSplit& split) {
  return [&m, &split](const EvalCase& c) {
    const auto& log = *split.log;
    return m.score(log.row(c.row).user, history_before(split, c.row, m.history_limit), log.situation(c.row),
                   c.candidates);
  };
}

/// Neighbor lists frozen at the validation boundary.
inline std::vector<NeighborList> frozen_neighbors(const DatasetSplit& split, std::size_t k) {
  return all_collaborative_users(*split.log, k, split.valid_begin);
}

/// Trains on exploration-flagged training interactions with negatives drawn
/// uniformly from stores the user has not visited. Instances are processed
/// user by user (users shuffled per epoch); an Adam step is taken once at
/// least `batch` instances have accumulated. Early stopping follows
/// validation HR@3 on the exploration protocol.
inline ExpRecModel exprec_train(const DatasetSplit& split, const ExpRecConfig& cfg, TrainHistory* history = nullptr,
                                const std::function<void(const EpochRecord&)>& log_fn = {}) {
  const auto& log = *split.log;
  // Exploration rows grouped by user.
  std::vector<std::vector<std::size_t>> by_user(log.num_users());
  std::size_t n_inst = 0;
  for (std::size_t i = split.begin(Partition::Train); i < split.end(Partition::Train); ++i)
    if (!split.repeat[i]) {
      by_user[log.row(i).user].push_back(i);
      ++n_inst;
    }
  if (n_inst == 0) throw Error("exprec: no exploration instances in the training partition");
  std::vector<UserId> active;
  for (UserId u = 0; u < log.num_users(); ++u)
    if (!by_user[u].empty()) active.push_back(u);

  const auto& tc = cfg.train;
  auto m = ExpRecModel::create(log.num_stores(), log.num_users(), LocationMap::from_split(split), tc.dim, tc.seed);
  m.history_limit = cfg.history_limit;
  m.ablate = cfg.ablate;
  m.neighbors = frozen_neighbors(split, cfg.neighbors);
  auto valid = build_cases(split, Protocol::Exploration, tc.seed, Partition::Valid, tc.valid_cases);

  std::vector<bool> seen(log.num_stores(), false);
  auto epoch = [&](std::size_t e) {
    auto order = epoch_order(active.size(), tc.seed, e);
    Rng rng(mix_seed(tc.seed ^ 0xe4e4, e));
    double total = 0.0;
    std::size_t in_batch = 0;
    for (std::size_t oi = 0; oi < order.size(); ++oi) {
      const UserId u = active[order[oi]];
      const auto& rows = by_user[u];
      History hist = history_before(split, rows.back(), 0);
      std::vector<ExpRecModel::Instance> inst;
      for (auto row : rows) {
        const std::size_t pos = log.rank_in_user(row);
        const StoreId target = log.row(row).store;
        std::size_t distinct = 0;
        for (std::size_t t = 0; t < pos; ++t) distinct += !seen[hist[t].store], seen[hist[t].store] = true;
        distinct += !seen[target];
        seen[target] = true;
        StoreId neg = target;
        if (distinct < log.num_stores()) {
          do neg = static_cast<StoreId>(uniform_index(rng, log.num_stores()));
          while (seen[neg]);
        }
        for (std::size_t t = 0; t < pos; ++t) seen[hist[t].store] = false;
        seen[target] = false;
        if (neg != target) inst.push_back({pos, log.situation(row), target, neg});
      }
      total += m.group_loss(u, hist, inst);
      in_batch += inst.size();
      if (in_batch >= tc.batch || oi + 1 == order.size()) {
        m.state.adam_step(tc.adam);
        in_batch = 0;
      }
    }
    return total / static_cast<double>(n_inst);
  };
  auto val = [&] { return valid.empty() ? 0.0 : evaluate(exprec_scorer(m, split), valid).hr; };
  auto h = fit(m.state, tc, epoch, val, log_fn);
  if (history) *history = std::move(h);
  return m;
}

}  // namespace fdrec
