#include <gtest/gtest.h>

#include "fdrec/baselines.hpp"
#include "fdrec/reprec.hpp"
#include "fixtures.hpp"

using namespace fdrec;
using namespace fdrec::testing;

namespace {

// Situation vector rebuilt straight from the tensors.
Vec situation_oracle(const RepRecModel& m, const SituationFeatures& f) {
  const auto& st = m.state;
  Vec v = Vec::Zero(static_cast<Eigen::Index>(st.get("reprec.store").cols()));
  for (Eigen::Index d = 0; d < v.size(); ++d) {
    auto D = static_cast<std::size_t>(v.size());
    v[d] = st.get("reprec.situation.hour").values[static_cast<std::size_t>(f.hour) * D + static_cast<std::size_t>(d)] +
           st.get("reprec.situation.dow").values[static_cast<std::size_t>(f.day_of_week) * D + static_cast<std::size_t>(d)] +
           st.get("reprec.situation.location").values[m.locations(f.location) * D + static_cast<std::size_t>(d)];
  }
  return v;
}

History sample_history() {
  return {{2, {0, 9, 0, 0}, false}, {4, {1, 12, 1, 1}, false}, {2, {2, 19, 2, 0}, true}, {7, {3, 12, 3, 2}, false}};
}

}  // namespace

TEST(RepRec, ForwardMatchesOracle) {
  auto m = RepRecModel::create(10, LocationMap::identity(3), 8, 5);
  auto h = sample_history();
  SituationFeatures now{4, 12, 4, 1};
  std::vector<StoreId> cands = {2, 4, 7};
  auto out = m.forward(h, now, cands);
  Vec mu = situation_oracle(m, now);
  const auto& S = m.state.get("reprec.store");
  for (std::size_t j = 0; j < cands.size(); ++j) {
    double want = 0.0;
    for (const auto& e : h) {
      Vec mi = situation_oracle(m, e.situation);
      double w = mi.dot(mu) / (mi.norm() * mu.norm());
      want += w * S.row(e.store).dot(S.row(cands[j]));
    }
    EXPECT_NEAR(out.scores[j], want, 1e-12);
  }
  EXPECT_EQ(out.origin, SlateOrigin::Repeat);
}

TEST(RepRec, IdenticalSituationHasUnitWeight) {
  auto m = RepRecModel::create(10, LocationMap::identity(3), 8, 5);
  History h = {{1, {0, 12, 2, 1}, false}};
  auto w = m.attention(h, {5, 12, 2, 1});  // same hour, weekday, location; only the date differs
  EXPECT_NEAR(w[0], 1.0, 1e-12);
}

TEST(RepRec, Errors) {
  auto m = RepRecModel::create(10, LocationMap::identity(3), 8, 5);
  SituationFeatures now{4, 12, 4, 1};
  EXPECT_THROW(m.forward({}, now, {1}), Error);
  EXPECT_THROW(m.forward(sample_history(), now, {}), Error);
  EXPECT_THROW(m.forward(sample_history(), now, {2, 3}), Error);
}

TEST(RepRec, LossGradient) {
  auto m = RepRecModel::create(10, LocationMap::identity(3), 6, 5);
  auto h = sample_history();
  SituationFeatures now{4, 12, 4, 1};
  auto loss = [&](ModelState&) { return m.loss(h, now, 2, 4) + m.loss(h, {5, 19, 5, 0}, 7, 2); };
  auto r = finite_difference_check(loss, m.state, 1e-5, 300);
  EXPECT_LE(r.max_rel_error, 1e-5) << r.worst;
}

TEST(RepRec, ScorerTruncatesHistory) {
  auto s = synth_split(50, 40, 80, 3);
  auto m = RepRecModel::create(s.log->num_stores(), LocationMap::from_split(s), 8, 1, 5);
  auto cases = build_cases(s, Protocol::Repeat, 1);
  ASSERT_FALSE(cases.empty());
  const auto& c = cases.back();
  auto full = history_before(s, c.row);
  ASSERT_GT(full.size(), 5u);
  History tail(full.end() - 5, full.end());
  EXPECT_EQ(reprec_scorer(m, s)(c), m.score(tail, s.log->situation(c.row), c.candidates));
}

TEST(RepRec, TrainingReachesHisPopLevel) {
  auto s = synth_split(400, 150, 25, 9);
  RepRecConfig cfg;
  cfg.train.dim = 16;
  cfg.train.max_epochs = 8;
  cfg.train.patience = 3;
  cfg.train.valid_cases = 800;
  TrainHistory h;
  auto m = reprec_train(s, cfg, &h);
  auto cases = build_cases(s, Protocol::Repeat, 1);
  double rep = evaluate(reprec_scorer(m, s), cases).hr;
  double pop = evaluate(hispop_scorer(s), cases).hr;
  EXPECT_GT(rep, pop - 0.1);
  EXPECT_LE(h.best_epoch, h.epochs.size());
}

TEST(RepRec, SingleIdenticalEntryScoresSquaredNorm) {
  auto m = RepRecModel::create(10, LocationMap::identity(3), 8, 5);
  SituationFeatures now{4, 12, 4, 1};
  auto out = m.forward({{3, {1, 12, 4, 1}, false}}, now, {3});
  EXPECT_NEAR(out.scores[0], m.state.get("reprec.store").row(3).squaredNorm(), 1e-12);
}

TEST(RepRec, DuplicatedHistoryDoublesScores) {
  auto m = RepRecModel::create(10, LocationMap::identity(3), 8, 5);
  auto h = sample_history();
  History twice;
  for (const auto& e : h) {
    twice.push_back(e);
    twice.push_back(e);
  }
  SituationFeatures now{4, 12, 4, 1};
  auto a = m.forward(h, now, {2, 4, 7}), b = m.forward(twice, now, {2, 4, 7});
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(b.scores[i], 2.0 * a.scores[i], 1e-12);
}

TEST(RepRec, HistoryOrderDoesNotMatter) {
  auto m = RepRecModel::create(10, LocationMap::identity(3), 8, 5);
  auto h = sample_history();
  SituationFeatures now{4, 12, 4, 1};
  auto a = m.forward(h, now, {2, 4, 7});
  std::rotate(h.begin(), h.begin() + 1, h.end());
  std::swap(h[0], h[2]);
  auto b = m.forward(h, now, {2, 4, 7});
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(a.scores[i], b.scores[i], 1e-12);
}

TEST(RepRec, PlantedSituationDataBeatsHisPopAndIsReproducible) {
  SynthConfig c;
  c.situation_coupling = 1.0;
  c.repeat_prob = 0.7;
  auto s = synth_split(1500, 300, 20, 21, c);
  RepRecConfig cfg;
  cfg.train.max_epochs = 15;
  cfg.train.patience = 5;
  cfg.train.valid_cases = 2000;
  TrainHistory h;
  auto m = reprec_train(s, cfg, &h);
  auto valid = build_cases(s, Protocol::Repeat, cfg.train.seed, Partition::Valid);
  double rep = evaluate(reprec_scorer(m, s), valid).hr;
  double pop = evaluate(hispop_scorer(s), valid).hr;
  EXPECT_GT(rep, pop) << "reprec " << rep << " hispop " << pop;
  auto again = reprec_train(s, cfg);
  EXPECT_EQ(evaluate(reprec_scorer(again, s), valid).hr, rep);
}
