#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fdrec/dataio.hpp"
#include "fdrec/diffcore.hpp"

namespace fdrec {

/// Maps log location ids to embedding rows. Locations that occur in the
/// training partition get their own row; every other location shares the
/// trailing fallback row.
struct LocationMap {
  std::vector<std::uint32_t> row_of;  // indexed by LocationId
  std::size_t rows = 1;

  static LocationMap from_split(const DatasetSplit& split) {
    const auto& log = *split.log;
    LocationMap m;
    constexpr auto unset = static_cast<std::uint32_t>(-1);
    m.row_of.assign(log.num_locations(), unset);
    std::uint32_t next = 0;
    for (std::size_t i = split.begin(Partition::Train); i < split.end(Partition::Train); ++i) {
      auto l = log.row(i).location;
      if (m.row_of[l] == unset) m.row_of[l] = next++;
    }
    for (auto& r : m.row_of)
      if (r == unset) r = next;
    m.rows = next + 1;
    return m;
  }

  /// Identity map over n locations plus the fallback row.
  static LocationMap identity(std::size_t n) {
    LocationMap m;
    for (std::uint32_t i = 0; i < n; ++i) m.row_of.push_back(i);
    m.rows = n + 1;
    return m;
  }

  std::uint32_t operator()(LocationId l) const {
    return l < row_of.size() ? row_of[l] : static_cast<std::uint32_t>(rows - 1);
  }
  std::size_t fallback() const { return rows - 1; }
};

/// Sum of hour, day-of-week and location embeddings.
struct SituationEmbedding {
  std::size_t hour = 0, dow = 0, loc = 0;

  static SituationEmbedding create(ModelState& s, const std::string& prefix, std::size_t location_rows,
                                   std::size_t dim) {
    SituationEmbedding e;
    e.hour = s.add(prefix + ".hour", {24, dim}, Init::Embedding);
    e.dow = s.add(prefix + ".dow", {7, dim}, Init::Embedding);
    e.loc = s.add(prefix + ".location", {location_rows, dim}, Init::Embedding);
    return e;
  }

  Vec encode(const ModelState& s, const SituationFeatures& f, const LocationMap& lm) const {
    return s[hour].row(static_cast<std::size_t>(f.hour)) + s[dow].row(static_cast<std::size_t>(f.day_of_week)) +
           s[loc].row(lm(f.location));
  }

  void backward(ModelState& s, const SituationFeatures& f, const LocationMap& lm, const Vec& g) const {
    s[hour].grow(static_cast<std::size_t>(f.hour)) += g;
    s[dow].grow(static_cast<std::size_t>(f.day_of_week)) += g;
    s[loc].grow(lm(f.location)) += g;
  }
};

/// A past order as seen by the models.
struct HistoryEntry {
  StoreId store = 0;
  SituationFeatures situation;
  bool repeat = false;
};
using History = std::vector<HistoryEntry>;

/// The user's interactions strictly before row (per-user order), keeping
/// the most recent `limit` (0 keeps all).
inline History history_before(const DatasetSplit& split, std::size_t row, std::size_t limit = 0) {
  const auto& log = *split.log;
  auto seq = log.user_rows(log.row(row).user);
  std::size_t end = log.rank_in_user(row);
  std::size_t begin = (limit > 0 && end > limit) ? end - limit : 0;
  History h;
  h.reserve(end - begin);
  for (std::size_t k = begin; k < end; ++k) {
    auto r = seq[k];
    h.push_back({log.row(r).store, log.situation(r), split.repeat[r] != 0});
  }
  return h;
}

/// Hyperparameters shared by every trained model.
struct TrainConfig {
  std::size_t dim = 64;
  std::size_t batch = 256;
  std::size_t patience = 10;
  std::size_t max_epochs = 100;
  std::size_t valid_cases = 0;  // 0 evaluates every validation case
  AdamConfig adam{};
  std::uint64_t seed = 1;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double loss = 0.0;
  double valid = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_valid = -1.0;
};

/// Epoch loop with early stopping on a validation score (higher is better).
/// Keeps the parameters of the best epoch. `epoch_fn` runs one pass and
/// returns the mean training loss.
inline TrainHistory fit(ModelState& state, const TrainConfig& cfg, const std::function<double(std::size_t)>& epoch_fn,
                        const std::function<double()>& valid_fn, const std::function<void(const EpochRecord&)>& log = {}) {
  TrainHistory h;
  auto best = state.snapshot();
  std::size_t since = 0;
  for (std::size_t e = 1; e <= cfg.max_epochs; ++e) {
    EpochRecord r{e, epoch_fn(e), valid_fn()};
    h.epochs.push_back(r);
    if (log) log(r);
    if (r.valid > h.best_valid) {
      h.best_valid = r.valid;
      h.best_epoch = e;
      best = state.snapshot();
      since = 0;
    } else if (++since >= cfg.patience) {
      break;
    }
  }
  state.restore(best);
  return h;
}

/// Shuffled index order for one epoch, reproducible from (seed, epoch).
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(mix_seed(seed, epoch));
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

inline double cosine(const Vec& a, const Vec& b) {
  double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return a.dot(b) / (na * nb);
}

/// Accumulates d cos(a,b) / da and / db scaled by g. Zero-norm inputs have
/// zero gradient, matching the cosine-is-zero convention.
inline void cosine_backward(const Vec& a, const Vec& b, double g, Vec& ga, Vec& gb) {
  double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) return;
  double c = a.dot(b) / (na * nb);
  ga += g * (b / (na * nb) - c * a / (na * na));
  gb += g * (a / (na * nb) - c * b / (nb * nb));
}

}  // namespace fdrec
