#include <gtest/gtest.h>

#include <set>

#include "fdrec/evalharness.hpp"
#include "fixtures.hpp"

using namespace fdrec;
using namespace fdrec::testing;

TEST(RankMetrics, Examples) {
  auto r = rank_metrics(std::vector<double>{0.1, 0.9, 0.5}, 1, 3);
  EXPECT_EQ(r.rank, 1u);
  EXPECT_EQ(r.hit, 1);
  EXPECT_DOUBLE_EQ(r.ndcg, 1.0);
  r = rank_metrics(std::vector<double>{0.1, 0.9, 0.5, 0.7}, 2, 3);
  EXPECT_EQ(r.rank, 3u);
  EXPECT_DOUBLE_EQ(r.ndcg, 0.5);  // 1/log2(4)
  r = rank_metrics(std::vector<double>{0.1, 0.9, 0.5, 0.7}, 0, 3);
  EXPECT_EQ(r.hit, 0);
  EXPECT_EQ(r.ndcg, 0.0);
  EXPECT_THROW(rank_metrics(std::vector<double>{1.0}, 1, 3), Error);
}

TEST(RankMetrics, TiesArePessimistic) {
  // Target tied with three others: rank 4, a miss at K = 3.
  auto r = rank_metrics(std::vector<double>{0.5, 0.5, 0.5, 0.5}, 2, 3);
  EXPECT_EQ(r.rank, 4u);
  EXPECT_EQ(r.hit, 0);
  r = rank_metrics(std::vector<double>{0.5, 0.5, 0.1}, 0, 3);
  EXPECT_EQ(r.rank, 2u);
  EXPECT_NEAR(r.ndcg, 1.0 / std::log2(3.0), 1e-15);
}

TEST(RankMetrics, NdcgBoundedByHitAndHitMonotoneInK) {
  Rng rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int t = 0; t < 2000; ++t) {
    std::vector<double> s(1 + uniform_index(rng, 40));
    for (auto& v : s) v = std::floor(u(rng) * 8) / 8;  // coarse, many ties
    std::size_t pos = uniform_index(rng, s.size());
    int prev = 0;
    for (std::size_t k = 1; k <= 10; ++k) {
      auto r = rank_metrics(s, pos, k);
      EXPECT_LE(r.ndcg, r.hit);
      EXPECT_GE(r.hit, prev);
      prev = r.hit;
      // Brute-force rank oracle.
      std::size_t rank = 1;
      for (std::size_t i = 0; i < s.size(); ++i) rank += (i != pos && s[i] >= s[pos]);
      EXPECT_EQ(r.rank, rank);
    }
  }
}

class Cases : public ::testing::Test {
 protected:
  static void SetUpTestSuite() { split_ = new DatasetSplit(synth_split(300, 1200, 20, 4)); }
  static void TearDownTestSuite() { delete split_; }
  static DatasetSplit* split_;
};
DatasetSplit* Cases::split_ = nullptr;

TEST_F(Cases, ProtocolInvariants) {
  const auto& s = *split_;
  const auto& log = *s.log;
  for (auto proto : {Protocol::Repeat, Protocol::Exploration, Protocol::Combined}) {
    auto cases = build_cases(s, proto, 9);
    ASSERT_FALSE(cases.empty());
    for (const auto& c : cases) {
      const StoreId target = log.row(c.row).store;
      auto prior = prior_stores(log, c.row);
      std::set<StoreId> prior_set(prior.begin(), prior.end());
      std::set<StoreId> uniq(c.candidates.begin(), c.candidates.end());
      ASSERT_EQ(uniq.size(), c.candidates.size()) << "duplicate candidate";
      ASSERT_LT(c.target_pos, c.candidates.size());
      ASSERT_EQ(c.candidates[c.target_pos], target);
      ASSERT_GE(c.row, s.begin(Partition::Test));
      switch (proto) {
        case Protocol::Repeat:
          ASSERT_EQ(uniq, prior_set);
          break;
        case Protocol::Exploration: {
          ASSERT_FALSE(prior_set.count(target));
          for (auto x : c.candidates) ASSERT_FALSE(prior_set.count(x));
          std::size_t unvisited = log.num_stores() - prior_set.size() - 1;
          ASSERT_EQ(c.candidates.size(), 1 + std::min<std::size_t>(999, unvisited));
          break;
        }
        case Protocol::Combined:
          for (auto x : prior) ASSERT_TRUE(uniq.count(x));
          ASSERT_EQ(c.candidates.size(), std::min<std::size_t>(std::max<std::size_t>(1000, prior.size() +
                                                                                   !prior_set.count(target)),
                                                               log.num_stores()));
          ASSERT_EQ(c.num_prior, prior.size());
          break;
      }
    }
  }
}

TEST_F(Cases, RepeatAndExplorationPartitionTheTestRows) {
  auto rep = build_cases(*split_, Protocol::Repeat, 1);
  auto exp = build_cases(*split_, Protocol::Exploration, 1);
  auto all = build_cases(*split_, Protocol::Combined, 1);
  EXPECT_EQ(rep.size() + exp.size(), all.size());
  EXPECT_EQ(all.size(), split_->count(Partition::Test));
}

TEST_F(Cases, DeterministicPerSeed) {
  auto a = build_cases(*split_, Protocol::Exploration, 42);
  auto b = build_cases(*split_, Protocol::Exploration, 42);
  auto c = build_cases(*split_, Protocol::Exploration, 43);
  ASSERT_EQ(a.size(), b.size());
  bool differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].candidates, b[i].candidates);
    differs |= a[i].candidates != c[i].candidates;
  }
  EXPECT_TRUE(differs);
  // A single case does not depend on which other rows were built.
  auto one = make_case(*split_, a[3].row, Protocol::Exploration, 42);
  EXPECT_EQ(one.candidates, a[3].candidates);
}

TEST_F(Cases, OracleScoresOneAndConstantScoresZero) {
  auto cases = build_cases(*split_, Protocol::Combined, 2);
  CaseScorer oracle = [](const EvalCase& c) {
    std::vector<double> s(c.candidates.size(), 0.0);
    s[c.target_pos] = 1.0;
    return s;
  };
  CaseScorer flat = [](const EvalCase& c) { return std::vector<double>(c.candidates.size(), 1.0); };
  auto m = evaluate(oracle, cases);
  EXPECT_EQ(m.hr, 1.0);
  EXPECT_EQ(m.ndcg, 1.0);
  EXPECT_EQ(m.n, cases.size());
  EXPECT_EQ(evaluate(flat, cases).hr, 0.0);
  CaseScorer wrong = [](const EvalCase&) { return std::vector<double>(2, 0.0); };
  EXPECT_THROW(evaluate(wrong, cases), Error);
}

TEST_F(Cases, MaxCasesThinsEvenly) {
  auto all = build_cases(*split_, Protocol::Combined, 1);
  auto some = build_cases(*split_, Protocol::Combined, 1, Partition::Test, 50);
  ASSERT_EQ(some.size(), 50u);
  EXPECT_EQ(some.front().row, all.front().row);
  auto valid = build_cases(*split_, Protocol::Combined, 1, Partition::Valid);
  EXPECT_EQ(valid.size(), split_->count(Partition::Valid));
}

TEST(ExplorationCount, CatalogFiftyVisitedTen) {
  // 9 prior stores, the 10th visited store is the new target: 1 + 40 others = 41.
  std::vector<Row> rows;
  for (int i = 0; i < 9; ++i) rows.push_back({"u", "s" + std::to_string(i), 100 + i, "l"});
  rows.push_back({"u", "s9", 200, "l"});
  for (int i = 10; i < 50; ++i) rows.push_back({"other", "s" + std::to_string(i), 10 + i, "l"});
  auto log = share(make_log(rows));
  DatasetSplit s;
  s.log = log;
  s.repeat = label_repeat_flags(*log);
  s.valid_start = s.test_start = log->size() - 1;
  auto c = make_case(s, log->size() - 1, Protocol::Exploration, 1);
  EXPECT_EQ(c.candidates.size(), 41u);
  EXPECT_EQ(c.target_pos, 0u);
}

TEST(ExplorationCount, LargeCatalogCapsAtOneThousand) {
  auto s = synth_split(50, 3000, 10, 2);
  for (const auto& c : build_cases(s, Protocol::Exploration, 1)) EXPECT_EQ(c.candidates.size(), 1000u);
}

TEST(RandomScorer, HitRateNearThreeInAThousand) {
  auto s = synth_split(2500, 3000, 30, 6);
  auto cases = build_cases(s, Protocol::Exploration, 3);
  ASSERT_GT(cases.size(), 2000u);
  CaseScorer random = [](const EvalCase& c) {
    Rng rng(c.rng_seed ^ 0x9e3779b97f4a7c15ULL);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> out(c.candidates.size());
    for (auto& v : out) v = u(rng);
    return out;
  };
  auto m = evaluate(random, cases);
  double p = 0.003, se = std::sqrt(p * (1 - p) / static_cast<double>(cases.size()));
  EXPECT_NEAR(m.hr, p, 4 * se);
}

TEST(MetricsReport, JsonRoundTrip) {
  MetricsReport r;
  r.model = "exprec";
  r.seed = 11;
  r.k = 3;
  r.protocols["exploration"] = {0.125, 0.0625, 800};
  r.parameter_counts["exprec"] = 12345;
  auto dir = scratch_dir("report");
  r.write((dir / "r.json").string());
  auto back = MetricsReport::read((dir / "r.json").string());
  EXPECT_EQ(back.model, "exprec");
  EXPECT_EQ(back.seed, 11u);
  EXPECT_EQ(back.protocols.at("exploration").hr, 0.125);
  EXPECT_EQ(back.protocols.at("exploration").n, 800u);
  EXPECT_EQ(back.parameter_counts.at("exprec"), 12345u);
  EXPECT_NE(read_file(dir / "r.json").find("\"hr@3\""), std::string::npos);
  write_file(dir / "bad.json", "{\"model\": 1}");
  EXPECT_THROW(MetricsReport::read((dir / "bad.json").string()), Error);
  EXPECT_THROW(MetricsReport::read((dir / "none.json").string()), Error);
}

TEST(Protocols, NamesRoundTrip) {
  for (auto p : {Protocol::Repeat, Protocol::Exploration, Protocol::Combined})
    EXPECT_EQ(parse_protocol(protocol_name(p)), p);
  EXPECT_THROW(parse_protocol("both"), Error);
}
