#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "fdrec/evalharness.hpp"
#include "fdrec/modelcore.hpp"
#include "fdrec/situsim.hpp"

namespace fdrec {

/// HisPop: each candidate scores the sum of situation similarities between
/// `now` and the history entries of that store. Training-free, repeat-only.
inline ScoredSlate hispop_score(const History& history, const SituationFeatures& now,
                                const std::vector<StoreId>& candidates) {
  std::unordered_map<StoreId, double> acc;
  for (const auto& h : history) acc[h.store] += situation_similarity(now, h.situation);
  ScoredSlate out;
  out.origin = SlateOrigin::Repeat;
  out.candidates = candidates;
  out.scores.reserve(candidates.size());
  for (auto c : candidates) {
    auto it = acc.find(c);
    if (it == acc.end()) throw Error("hispop: candidate store " + std::to_string(c) + " is not in the history");
    out.scores.push_back(it->second);
  }
  return out;
}

inline CaseScorer hispop_scorer(const DatasetSplit& split) {
  return [&split](const EvalCase& c) {
    return hispop_score(history_before(split, c.row), split.log->situation(c.row), c.candidates).scores;
  };
}

/// SOnly: dot product between a situation vector and store embeddings,
/// identical for every user in the same situation.
struct SOnlyModel {
  ModelState state;
  LocationMap locations;
  std::size_t stores = 0;
  SituationEmbedding situation;

  static SOnlyModel create(std::size_t num_stores, LocationMap locations, std::size_t dim, std::uint64_t seed) {
    SOnlyModel m{ModelState(seed), std::move(locations)};
    m.stores = m.state.add("sonly.store", {num_stores, dim}, Init::Embedding);
    m.situation = SituationEmbedding::create(m.state, "sonly.situation", m.locations.rows, dim);
    return m;
  }

  ScoredSlate score(const SituationFeatures& now, const std::vector<StoreId>& candidates) const {
    Vec mu = situation.encode(state, now, locations);
    ScoredSlate out;
    out.origin = SlateOrigin::Exploration;
    out.candidates = candidates;
    out.scores.reserve(candidates.size());
    const auto& S = state[stores];
    for (auto c : candidates) out.scores.push_back(S.row(c).dot(mu));
    return out;
  }

  /// BPR loss for one (situation, positive, negative) triple; accumulates
  /// gradients.
  double loss(const SituationFeatures& now, StoreId pos, StoreId neg) {
    Vec mu = situation.encode(state, now, locations);
    auto& S = state[stores];
    Vec sp = S.row(pos), sn = S.row(neg);
    double xp = sp.dot(mu), xn = sn.dot(mu);
    double g = bpr_grad(xp, xn);
    S.grow(pos) += g * mu;
    S.grow(neg) -= g * mu;
    situation.backward(state, now, locations, Vec(g * (sp - sn)));
    return bpr_loss(xp, xn);
  }
};

inline CaseScorer sonly_scorer(const SOnlyModel& m, const DatasetSplit& split) {
  return [&m, &split](const EvalCase& c) { return m.score(split.log->situation(c.row), c.candidates).scores; };
}

/// Trains SOnly with BPR over every training interaction; negatives are
/// uniform over the catalog. Early stopping follows validation HR@3 on the
/// exploration protocol.
inline SOnlyModel sonly_train(const DatasetSplit& split, const TrainConfig& cfg, TrainHistory* history = nullptr,
                              const std::function<void(const EpochRecord&)>& log_fn = {}) {
  const auto& log = *split.log;
  const std::size_t n = split.count(Partition::Train);
  if (n == 0) throw Error("sonly: empty training partition");
  if (log.num_stores() < 2) throw Error("sonly: need at least two stores");
  auto m = SOnlyModel::create(log.num_stores(), LocationMap::from_split(split), cfg.dim, cfg.seed);
  auto valid = build_cases(split, Protocol::Exploration, cfg.seed, Partition::Valid, cfg.valid_cases);

  auto epoch = [&](std::size_t e) {
    auto order = epoch_order(n, cfg.seed, e);
    Rng rng(mix_seed(cfg.seed ^ 0x50a1, e));
    double total = 0.0;
    for (std::size_t b = 0; b < n; b += cfg.batch) {
      std::size_t end = std::min(n, b + cfg.batch);
      for (std::size_t k = b; k < end; ++k) {
        std::size_t row = split.begin(Partition::Train) + order[k];
        StoreId pos = log.row(row).store;
        StoreId neg;
        do neg = static_cast<StoreId>(uniform_index(rng, log.num_stores()));
        while (neg == pos);
        total += m.loss(log.situation(row), pos, neg);
      }
      m.state.adam_step(cfg.adam);
    }
    return total / static_cast<double>(n);
  };
  auto val = [&] { return valid.empty() ? 0.0 : evaluate(sonly_scorer(m, split), valid).hr; };
  auto h = fit(m.state, cfg, epoch, val, log_fn);
  if (history) *history = std::move(h);
  return m;
}

}  // namespace fdrec
