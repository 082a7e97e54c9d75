#pragma once

#include <vector>

#include "fdrec/evalharness.hpp"
#include "fdrec/modelcore.hpp"

namespace fdrec {

struct RepRecConfig {
  TrainConfig train{};
  std::size_t history_limit = 50;
};

/// Repeat recommender: the current situation attends over past situations
/// with raw cosine weights; the weighted sum of past store embeddings is the
/// query that scores previously visited stores.
struct RepRecModel {
  ModelState state;
  LocationMap locations;
  std::size_t stores = 0;
  SituationEmbedding situation;
  std::size_t history_limit = 50;

  static RepRecModel create(std::size_t num_stores, LocationMap locations, std::size_t dim, std::uint64_t seed,
                            std::size_t history_limit = 50) {
    RepRecModel m{ModelState(seed), std::move(locations)};
    m.stores = m.state.add("reprec.store", {num_stores, dim}, Init::Embedding);
    m.situation = SituationEmbedding::create(m.state, "reprec.situation", m.locations.rows, dim);
    m.history_limit = history_limit;
    return m;
  }

  /// Attention weights w_i = cos(mu_i, mu_now).
  std::vector<double> attention(const History& history, const SituationFeatures& now) const {
    Vec mu = situation.encode(state, now, locations);
    std::vector<double> w;
    w.reserve(history.size());
    for (const auto& h : history) w.push_back(cosine(situation.encode(state, h.situation, locations), mu));
    return w;
  }

  Vec query(const History& history, const SituationFeatures& now) const {
    auto w = attention(history, now);
    const auto& S = state[stores];
    Vec sr = Vec::Zero(static_cast<Eigen::Index>(S.cols()));
    for (std::size_t i = 0; i < history.size(); ++i) sr += w[i] * S.row(history[i].store);
    return sr;
  }

  ScoredSlate forward(const History& history, const SituationFeatures& now,
                      const std::vector<StoreId>& candidates) const {
    if (history.empty()) throw Error("reprec: empty history");
    if (candidates.empty()) throw Error("reprec: no candidates");
    for (auto c : candidates) {
      bool found = false;
      for (const auto& h : history)
        if (h.store == c) {
          found = true;
          break;
        }
      if (!found) throw Error("reprec: candidate store " + std::to_string(c) + " is not in the history");
    }
    Vec sr = query(history, now);
    ScoredSlate out;
    out.origin = SlateOrigin::Repeat;
    out.candidates = candidates;
    for (auto c : candidates) out.scores.push_back(state[stores].row(c).dot(sr));
    return out;
  }

  /// Scores without the containment check; candidates may fall outside a
  /// truncated history.
  std::vector<double> score(const History& history, const SituationFeatures& now,
                            const std::vector<StoreId>& candidates) const {
    Vec sr = query(history, now);
    std::vector<double> out;
    out.reserve(candidates.size());
    for (auto c : candidates) out.push_back(state[stores].row(c).dot(sr));
    return out;
  }

  /// BPR loss for one instance; accumulates gradients.
  double loss(const History& history, const SituationFeatures& now, StoreId pos, StoreId neg) {
    auto& S = state[stores];
    const auto D = static_cast<Eigen::Index>(S.cols());
    Vec mu = situation.encode(state, now, locations);
    std::vector<Vec> mus;
    std::vector<double> w;
    mus.reserve(history.size());
    Vec sr = Vec::Zero(D);
    for (const auto& h : history) {
      mus.push_back(situation.encode(state, h.situation, locations));
      w.push_back(cosine(mus.back(), mu));
      sr += w.back() * S.row(h.store);
    }
    Vec sp = S.row(pos), sn = S.row(neg);
    double xp = sp.dot(sr), xn = sn.dot(sr);
    double g = bpr_grad(xp, xn);
    S.grow(pos) += g * sr;
    S.grow(neg) -= g * sr;
    Vec dsr = g * (sp - sn);
    Vec gmu = Vec::Zero(D);
    for (std::size_t i = 0; i < history.size(); ++i) {
      double dw = S.row(history[i].store).dot(dsr);
      S.grow(history[i].store) += w[i] * dsr;
      Vec gmi = Vec::Zero(D);
      cosine_backward(mus[i], mu, dw, gmi, gmu);
      situation.backward(state, history[i].situation, locations, gmi);
    }
    situation.backward(state, now, locations, gmu);
    return bpr_loss(xp, xn);
  }
};

inline CaseScorer reprec_scorer(const RepRecModel& m, const DatasetSplit& split) {
  return [&m, &split](const EvalCase& c) {
    return m.score(history_before(split, c.row, m.history_limit), split.log->situation(c.row), c.candidates);
  };
}

/// Trains on repeat-flagged training interactions. The negative is drawn
/// uniformly from the user's other prior stores; instances with fewer than
/// two distinct prior stores are skipped. Early stopping follows validation
/// HR@3 on the repeat protocol.
inline RepRecModel reprec_train(const DatasetSplit& split, const RepRecConfig& cfg, TrainHistory* history = nullptr,
                                const std::function<void(const EpochRecord&)>& log_fn = {}) {
  const auto& log = *split.log;
  struct Instance {
    std::size_t row;
    std::vector<StoreId> prior;
  };
  std::vector<Instance> inst;
  for (std::size_t i = split.begin(Partition::Train); i < split.end(Partition::Train); ++i) {
    if (!split.repeat[i]) continue;
    auto prior = prior_stores(log, i);
    if (prior.size() < 2) continue;
    inst.push_back({i, std::move(prior)});
  }
  if (inst.empty()) throw Error("reprec: no trainable repeat instances in the training partition");

  const auto& tc = cfg.train;
  auto m = RepRecModel::create(log.num_stores(), LocationMap::from_split(split), tc.dim, tc.seed, cfg.history_limit);
  auto valid = build_cases(split, Protocol::Repeat, tc.seed, Partition::Valid, tc.valid_cases);

  auto epoch = [&](std::size_t e) {
    auto order = epoch_order(inst.size(), tc.seed, e);
    Rng rng(mix_seed(tc.seed ^ 0x4e9e, e));
    double total = 0.0;
    for (std::size_t b = 0; b < inst.size(); b += tc.batch) {
      std::size_t end = std::min(inst.size(), b + tc.batch);
      for (std::size_t k = b; k < end; ++k) {
        const auto& x = inst[order[k]];
        StoreId pos = log.row(x.row).store;
        StoreId neg;
        do neg = x.prior[uniform_index(rng, x.prior.size())];
        while (neg == pos);
        total += m.loss(history_before(split, x.row, cfg.history_limit), log.situation(x.row), pos, neg);
      }
      m.state.adam_step(tc.adam);
    }
    return total / static_cast<double>(inst.size());
  };
  auto val = [&] { return valid.empty() ? 0.0 : evaluate(reprec_scorer(m, split), valid).hr; };
  auto h = fit(m.state, tc, epoch, val, log_fn);
  if (history) *history = std::move(h);
  return m;
}

}  // namespace fdrec
