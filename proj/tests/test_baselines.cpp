#include <gtest/gtest.h>

#include <map>

#include "fdrec/baselines.hpp"
#include "fixtures.hpp"

using namespace fdrec;
using namespace fdrec::testing;

TEST(HisPop, MatchesBruteForceSum) {
  auto s = synth_split(200, 150, 20, 3);
  const auto& log = *s.log;
  auto cases = build_cases(s, Protocol::Repeat, 1);
  ASSERT_FALSE(cases.empty());
  auto scorer = hispop_scorer(s);
  for (std::size_t i = 0; i < cases.size(); i += 7) {
    const auto& c = cases[i];
    auto got = scorer(c);
    const auto now = log.situation(c.row);
    auto seq = log.user_rows(log.row(c.row).user);
    for (std::size_t j = 0; j < c.candidates.size(); ++j) {
      double want = 0.0;
      for (std::size_t k = 0; k < log.rank_in_user(c.row); ++k)
        if (log.row(seq[k]).store == c.candidates[j]) want += situation_similarity(now, log.situation(seq[k]));
      EXPECT_NEAR(got[j], want, 1e-12);
    }
  }
}

TEST(HisPop, HandExample) {
  SituationFeatures now{10, 12, 0, 0};
  History h = {{1, {10, 12, 0, 0}, false}, {2, {10, 0, 3, 1}, false}, {1, {10, 12, 0, 0}, true}};
  auto out = hispop_score(h, now, {1, 2});
  EXPECT_DOUBLE_EQ(out.scores[0], 2.0);
  // Same day, hour distance 12 -> 1, dow distance 3 -> 1, other location: 1 - 3/4.
  EXPECT_DOUBLE_EQ(out.scores[1], 0.25);
  EXPECT_THROW(hispop_score(h, now, {1, 5}), Error);
}

TEST(HisPop, BeatsRandomOnSituationBoundRepeats) {
  auto s = synth_split(300, 200, 25, 5);
  auto cases = build_cases(s, Protocol::Repeat, 1);
  auto m = evaluate(hispop_scorer(s), cases);
  double chance = 0.0;
  for (const auto& c : cases) chance += std::min(1.0, 3.0 / static_cast<double>(c.candidates.size()));
  chance /= static_cast<double>(cases.size());
  EXPECT_GT(m.hr, chance + 0.1);
}

TEST(SOnly, UserIndependentScores) {
  auto s = synth_split(100, 80, 15, 2);
  auto m = SOnlyModel::create(s.log->num_stores(), LocationMap::from_split(s), 16, 3);
  SituationFeatures f{3, 18, 4, 0};
  std::vector<StoreId> cands = {0, 5, 7};
  auto a = m.score(f, cands), b = m.score(f, cands);
  EXPECT_EQ(a.scores, b.scores);
  // Rows from two different users in the same situation score identically.
  const auto& log = *s.log;
  std::map<std::tuple<int, int, LocationId>, std::size_t> seen;
  int checked = 0;
  for (std::size_t i = 0; i < log.size() && checked < 20; ++i) {
    auto sit = log.situation(i);
    auto key = std::make_tuple(sit.hour, sit.day_of_week, sit.location);
    auto it = seen.find(key);
    if (it == seen.end()) {
      seen[key] = i;
      continue;
    }
    if (log.row(it->second).user == log.row(i).user) continue;
    EvalCase c1, c2;
    c1.row = it->second;
    c2.row = i;
    c1.candidates = c2.candidates = cands;
    EXPECT_EQ(sonly_scorer(m, s)(c1), sonly_scorer(m, s)(c2));
    ++checked;
  }
  EXPECT_GT(checked, 0);
}

TEST(SOnly, LossGradient) {
  auto m = SOnlyModel::create(10, LocationMap::identity(3), 8, 4);
  SituationFeatures f{0, 7, 2, 1};
  auto loss = [&](ModelState&) { return m.loss(f, 3, 6) + m.loss(f, 1, 3); };
  auto r = finite_difference_check(loss, m.state, 1e-5, 200);
  EXPECT_LE(r.max_rel_error, 1e-6) << r.worst;
}

TEST(SOnly, UnseenLocationUsesFallbackRow) {
  auto lm = LocationMap::identity(2);
  EXPECT_EQ(lm(0), 0u);
  EXPECT_EQ(lm(7), 2u);
  EXPECT_EQ(lm.fallback(), 2u);
}

TEST(SOnly, TrainingBeatsChanceAndRestoresBest) {
  auto s = synth_split(300, 200, 20, 7);
  TrainConfig cfg;
  cfg.dim = 16;
  cfg.max_epochs = 6;
  cfg.patience = 3;
  cfg.adam.lr = 3e-3;
  cfg.valid_cases = 500;
  TrainHistory h;
  auto m = sonly_train(s, cfg, &h);
  ASSERT_FALSE(h.epochs.empty());
  EXPECT_GE(h.best_epoch, 1u);
  auto valid = build_cases(s, Protocol::Exploration, cfg.seed, Partition::Valid, cfg.valid_cases);
  EXPECT_DOUBLE_EQ(evaluate(sonly_scorer(m, s), valid).hr, h.best_valid);
  auto test = build_cases(s, Protocol::Exploration, 1);
  EXPECT_GT(evaluate(sonly_scorer(m, s), test).hr, 0.05);  // chance is under 0.02
}

namespace {

// Similarity targets: Δday 12 -> 0.9, Δday 24 -> 0.8, other location and Δdow 3 -> 0.5.
const SituationFeatures kNow{40, 12, 0, 0};
const SituationFeatures kSim09{28, 12, 0, 0}, kSim08{16, 12, 0, 0}, kSim05{40, 12, 3, 1};

}  // namespace

TEST(HisPop, WorkedExamples) {
  auto one = hispop_score({{4, kSim08, false}}, kNow, {4});
  EXPECT_NEAR(one.scores[0], 0.8, 1e-12);
  History h = {{1, kSim09, false}, {1, kSim05, true}, {2, kSim08, false}};
  auto out = hispop_score(h, kNow, {1, 2});
  EXPECT_NEAR(out.scores[0], 1.4, 1e-12);
  EXPECT_NEAR(out.scores[1], 0.8, 1e-12);
  // Equal similarities reduce to frequency ranking.
  History eq = {{1, kSim09, false}, {2, kSim09, false}, {2, kSim09, true}, {3, kSim09, false}, {2, kSim09, true},
                {3, kSim09, true}};
  auto f = hispop_score(eq, kNow, {1, 2, 3});
  EXPECT_LT(f.scores[0], f.scores[2]);
  EXPECT_LT(f.scores[2], f.scores[1]);
}

TEST(HisPop, HistoryOrderDoesNotMatter) {
  History h = {{1, kSim09, false}, {2, kSim05, false}, {1, kSim08, true}, {3, kSim05, false}};
  auto a = hispop_score(h, kNow, {1, 2, 3});
  std::reverse(h.begin(), h.end());
  auto b = hispop_score(h, kNow, {1, 2, 3});
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_NEAR(a.scores[i], b.scores[i], 1e-15);
    EXPECT_GE(a.scores[i], 0.0);
  }
}

TEST(HisPop, EvaluatedTwiceGivesIdenticalReports) {
  auto s = synth_split(150, 100, 20, 4);
  auto cases = build_cases(s, Protocol::Repeat, 2);
  auto a = evaluate(hispop_scorer(s), cases), b = evaluate(hispop_scorer(s), cases);
  EXPECT_EQ(a.hr, b.hr);
  EXPECT_EQ(a.ndcg, b.ndcg);
}

TEST(SOnly, ZeroStateScoresZeroAndOracle) {
  auto m = SOnlyModel::create(3, LocationMap::identity(2), 4, 9);
  SituationFeatures f{0, 5, 2, 1};
  std::vector<StoreId> c = {0, 1, 2};
  const auto& S = m.state.get("sonly.store");
  Vec mu = m.state.get("sonly.situation.hour").row(5) + m.state.get("sonly.situation.dow").row(2) +
           m.state.get("sonly.situation.location").row(1);
  auto got = m.score(f, c).scores;
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(got[i], S.row(i).dot(mu), 1e-12);
  for (std::size_t k = 0; k < m.state.num_tensors(); ++k)
    std::fill(m.state[k].values.begin(), m.state[k].values.end(), 0.0);
  for (double v : m.score(f, c).scores) EXPECT_EQ(v, 0.0);
}

TEST(SOnly, ParameterCount) {
  auto s = synth_split(100, 80, 15, 2);
  auto lm = LocationMap::from_split(s);
  auto m = SOnlyModel::create(s.log->num_stores(), lm, 16, 3);
  // lm.rows counts the fallback row for locations unseen in training.
  EXPECT_EQ(m.state.parameter_count(), (s.log->num_stores() + 24 + 7 + lm.rows) * 16);
}

TEST(SOnly, LearnsASituationBoundStore) {
  // Store "x" is only ever ordered at 03:00 on Mondays at location "night"; other stores at other times.
  std::vector<Row> rows;
  const std::int64_t monday = 1672617600;
  for (int d = 0; d < 35; ++d)
    for (int u = 0; u < 12; ++u) {
      std::string user = "u" + std::to_string(u);
      std::int64_t day = monday + d * kSecondsPerDay;
      if (d % 7 == 0) rows.push_back({user, "x", day + 3 * 3600 + u, "night"});
      rows.push_back({user, "s" + std::to_string((u * 7 + d) % 60), day + (10 + u % 10) * 3600, "day" + std::to_string(u % 3)});
    }
  // First-time users ordering "x" on the validation Monday give early stopping a signal.
  for (int v = 0; v < 6; ++v) rows.push_back({"v" + std::to_string(v), "x", monday + 28 * kSecondsPerDay + 3 * 3600 + 60 + v, "night"});
  auto split = split_global_timeline(share(make_log(rows)), 5 * kSecondsPerDay, 5 * kSecondsPerDay);
  ASSERT_EQ(split.partition_of(split.log->size() - 1), Partition::Test);
  TrainConfig cfg;
  cfg.dim = 8;
  cfg.max_epochs = 30;
  cfg.adam.lr = 0.02;
  auto m = sonly_train(split, cfg);
  const auto& log = *split.log;
  SituationFeatures night{0, 3, 0, *log.locations().find("night")};
  std::vector<StoreId> all(log.num_stores());
  for (StoreId i = 0; i < all.size(); ++i) all[i] = i;
  auto sc = m.score(night, all).scores;
  EXPECT_EQ(static_cast<StoreId>(std::max_element(sc.begin(), sc.end()) - sc.begin()), *log.stores().find("x"));
  // Same seed, same parameters.
  auto again = sonly_train(split, cfg);
  for (std::size_t k = 0; k < m.state.num_tensors(); ++k) EXPECT_EQ(m.state[k].values, again.state[k].values);
}
