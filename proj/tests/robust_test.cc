#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "expcrc/robust.hpp"
#include "test_support.hpp"

namespace expcrc {
namespace {

TokenizedQuestion question(std::vector<std::string> tokens, std::string id = "q") {
  TokenizedQuestion q;
  q.id = std::move(id);
  q.tokens = std::move(tokens);
  return q;
}

SynonymLexicon lexicon_of(std::initializer_list<std::pair<std::string, std::set<std::string>>> entries) {
  SynonymLexicon lex;
  for (const auto& [t, s] : entries) lex.add(t, s);
  lex.close(false);
  return lex;
}

TEST(Lexicon, CloseRepairsSelfInclusionAndSymmetry) {
  SynonymLexicon lex;
  lex.add("pain", {"ache"});
  std::vector<std::string> warnings;
  auto prev = set_warning_handler([&](const std::string& m) { warnings.push_back(m); });
  const auto repairs = lex.close();
  set_warning_handler(prev);
  EXPECT_EQ(repairs, 2u);
  EXPECT_EQ(warnings.size(), 2u);
  EXPECT_EQ(lex.synonym_set("pain"), (std::set<std::string>{"ache", "pain"}));
  EXPECT_EQ(lex.synonym_set("ache"), (std::set<std::string>{"ache", "pain"}));
  EXPECT_EQ(lex.synonym_set("knee"), (std::set<std::string>{"knee"}));
  EXPECT_TRUE(lex.alternatives("knee").empty());
}

TEST(Lexicon, ReadsJsonLinesAndReportsBadLines) {
  std::istringstream good(R"({"token":"pain","synonyms":["pain","ache"]})"
                          "\n\n"
                          R"({"token":"knee","synonyms":["knee"]})"
                          "\n");
  const auto lex = read_lexicon(good, "mem");
  EXPECT_EQ(lex.alternatives("ache"), std::vector<std::string>{"pain"});
  std::istringstream bad(R"({"token":"a","synonyms":["a"]})"
                         "\n"
                         R"({"token":"b"})");
  try {
    read_lexicon(bad, "mem");
    FAIL();
  } catch (const InputError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
  std::istringstream round(lexicon_to_jsonl(lex));
  EXPECT_EQ(read_lexicon(round, "mem").entries(), lex.entries());
}

TEST(BallSize, KnownValues) {
  const auto lex = lexicon_of({{"a", {"a", "a1"}}, {"b", {"b", "b1", "b2"}}, {"c", {"c", "c1"}}});
  EXPECT_EQ(ball_size(question({"a"}), lex, 1), 2u);
  EXPECT_EQ(ball_size(question({"a", "x"}), lex, 2), 2u);
  // alternatives (1,2,1): e0 + e1 + e2 + e3 = 1 + 4 + 5 + 2 = 12 = 2*3*2
  EXPECT_EQ(ball_size(question({"a", "b", "c"}), lex, 3), 12u);
  EXPECT_EQ(ball_size(question({"a", "b", "c"}), lex, 1), 5u);
  EXPECT_EQ(ball_size(question({"a", "b", "c"}), lex, 0), 1u);
}

TEST(BallSize, ThreeAlternativesEachAtDistanceTwo) {
  SynonymLexicon lex;
  std::vector<std::string> tokens;
  for (int j = 0; j < 3; ++j) {
    const std::string t = "t" + std::to_string(j);
    tokens.push_back(t);
    lex.add(t, {t, t + "a", t + "b", t + "c"});
  }
  lex.close(false);
  // 1 + 3*3 + 3*9 = 37
  EXPECT_EQ(ball_size(question(tokens), lex, 2), 37u);
}

TEST(BallSize, SaturatesInsteadOfOverflowing) {
  SynonymLexicon lex;
  std::vector<std::string> tokens;
  for (int j = 0; j < 64; ++j) {
    const std::string t = "t" + std::to_string(j);
    tokens.push_back(t);
    std::set<std::string> syns{t};
    for (int i = 0; i < 1000; ++i) syns.insert(t + "~" + std::to_string(i));
    lex.add(t, syns);
  }
  lex.close(false);
  EXPECT_EQ(ball_size(question(tokens), lex, 64), std::numeric_limits<std::uint64_t>::max());
}

TEST(EnumerateBall, MatchesBruteForceAndCount) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t k = 1 + trial % 6;
    auto inst = testing::random_instance(rng, k, 3, trial);
    for (std::size_t d = 0; d <= std::min<std::size_t>(k, 3); ++d) {
      BallSpec spec;
      spec.d = d;
      const auto members = enumerate_ball(inst.clean, inst.lexicon, spec);
      std::set<std::vector<std::string>> seen;
      for (const auto& m : members) {
        EXPECT_TRUE(in_ball(m, inst.clean, inst.lexicon, d));
        seen.insert(m.tokens);
      }
      EXPECT_EQ(seen.size(), members.size()) << "duplicate member";
      const auto brute = testing::brute_ball(inst.clean, inst.lexicon, d);
      EXPECT_EQ(seen, std::set<std::vector<std::string>>(brute.begin(), brute.end()));
      EXPECT_EQ(members.size(), ball_size(inst.clean, inst.lexicon, d));
      ASSERT_FALSE(members.empty());
      EXPECT_EQ(members.front().tokens, inst.clean.tokens);
    }
  }
}

TEST(EnumerateBall, DeterministicOrder) {
  const auto lex = lexicon_of({{"a", {"a", "a1", "a2"}}, {"b", {"b", "b1"}}});
  BallSpec spec;
  spec.d = 2;
  std::vector<std::vector<std::string>> got;
  for (const auto& m : enumerate_ball(question({"a", "b"}), lex, spec)) got.push_back(m.tokens);
  const std::vector<std::vector<std::string>> expected{
      {"a", "b"}, {"a1", "b"}, {"a2", "b"}, {"a1", "b1"}, {"a2", "b1"}, {"a", "b1"}};
  EXPECT_EQ(got, expected);
}

TEST(EnumerateBall, BudgetAndRadiusChecks) {
  const auto lex = lexicon_of({{"a", {"a", "a1", "a2"}}, {"b", {"b", "b1"}}});
  BallSpec spec;
  spec.d = 2;
  spec.enumeration_budget = 5;
  EXPECT_THROW(enumerate_ball(question({"a", "b"}), lex, spec), BudgetError);
  spec.enumeration_budget = 6;
  EXPECT_NO_THROW(enumerate_ball(question({"a", "b"}), lex, spec));
  spec.d = 3;
  EXPECT_THROW(enumerate_ball(question({"a", "b"}), lex, spec), InputError);
}

TEST(RobustScore, MatchesExhaustiveOracleWithContextDependentScorer) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t k = 1 + trial % 5;
    const std::size_t d = std::min<std::size_t>(k, trial % 3);
    auto inst = testing::random_instance(rng, k, 3, trial);
    const auto table = testing::random_table_over_ball(rng, inst.clean, inst.lexicon, d);
    BallSpec spec;
    spec.d = d;
    for (std::size_t j = 0; j < k; ++j)
      for (const auto& c : inst.lexicon.synonym_set(inst.clean.tokens[j])) {
        const double want =
            testing::brute_robust_score(inst.clean, j, c, inst.lexicon, d, table);
        EXPECT_EQ(robust_score(inst.clean, j, c, inst.lexicon, spec, table), want);
      }
  }
}

TEST(RobustScore, NoSupportAtRadiusZero) {
  const auto lex = lexicon_of({{"a", {"a", "a1"}}});
  BallSpec spec;
  spec.d = 0;
  const ConstantScorer s(0.9);
  EXPECT_EQ(robust_score(question({"a"}), 0, "a1", lex, spec, s), kNoSupport);
  EXPECT_EQ(robust_score(question({"a"}), 0, "a", lex, spec, s), 0.9);
  EXPECT_THROW(robust_score(question({"a"}), 0, "zzz", lex, spec, s), std::invalid_argument);
}

TEST(RobustScore, CoordinatewiseRefusesContextDependentScorer) {
  const auto lex = lexicon_of({{"a", {"a", "a1"}}});
  BallSpec spec;
  spec.mode = RobustMode::coordinatewise;
  const UniformRandomScorer s(1);
  EXPECT_THROW(robust_score(question({"a"}), 0, "a1", lex, spec, s), InputError);
}

TEST(RobustScore, CoordinatewiseEqualsExactForContextFreeScorer) {
  std::mt19937_64 rng(33);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t k = 2 + trial % 5;
    auto inst = testing::random_instance(rng, k, 3, trial);
    Dataset data;
    CalibrationExample ex;
    ex.question = inst.clean;
    ex.explanation.indices = {0, k - 1};
    data.examples.push_back(ex);
    const OracleNoiseScorer scorer(make_truth_lookup(data), 0.4, trial);
    for (std::size_t d = 1; d <= 2; ++d) {
      BallSpec exact, coord;
      exact.d = coord.d = d;
      coord.mode = RobustMode::coordinatewise;
      EXPECT_EQ(robust_score_table(inst.clean, inst.lexicon, exact, scorer),
                robust_score_table(inst.clean, inst.lexicon, coord, scorer));
    }
  }
}

TEST(RobustSet, SupersetOfCleanPlainSet) {
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 80; ++trial) {
    const std::size_t k = 1 + trial % 8;
    const std::size_t d = std::min<std::size_t>(k, 1 + trial % 2);
    auto inst = testing::random_instance(rng, k, 3, trial);
    // scores over the ball of the noisy question, which contains the clean one
    const auto noisy = inject_noise(inst.clean, inst.lexicon, d, trial);
    const auto table = testing::random_table_over_ball(rng, noisy, inst.lexicon, d);
    CalibrationResult cal;
    cal.lambda_hat = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    cal.scorer = table.identity();
    BallSpec spec;
    spec.d = d;
    const auto robust = build_robust_set(noisy, inst.lexicon, spec, table, cal);
    const auto plain = predict(inst.clean, table, cal);
    for (const auto& [pos, tok] : plain.tokens) EXPECT_TRUE(robust.contains(pos, tok));
  }
}

TEST(RobustSet, RadiusZeroMatchesPlainPipeline) {
  std::mt19937_64 rng(5);
  auto inst = testing::random_instance(rng, 6, 2);
  const auto table = testing::random_table_over_ball(rng, inst.clean, inst.lexicon, 0);
  CalibrationResult cal;
  cal.lambda_hat = 0.5;
  cal.scorer = table.identity();
  BallSpec spec;
  spec.d = 0;
  const auto robust = build_robust_set(inst.clean, inst.lexicon, spec, table, cal);
  const auto plain = predict(inst.clean, table, cal);
  ASSERT_EQ(robust.items.size(), plain.tokens.size());
  for (std::size_t i = 0; i < plain.tokens.size(); ++i) {
    EXPECT_EQ(robust.items[i].position, plain.tokens[i].first);
    EXPECT_EQ(robust.items[i].candidate, plain.tokens[i].second);
  }
  EXPECT_EQ(robust.stats.ball_size, 1u);
  EXPECT_EQ(robust.stats.scorer_calls, 1u);
}

TEST(RobustSet, JsonCarriesStats) {
  const auto lex = lexicon_of({{"a", {"a", "a1"}}, {"b", {"b", "b1"}}});
  const ConstantScorer s(0.7);
  CalibrationResult cal;
  cal.lambda_hat = 0.5;
  cal.scorer = s.identity();
  BallSpec spec;
  const auto set = build_robust_set(question({"a", "b"}), lex, spec, s, cal);
  const auto doc = to_json(set);
  EXPECT_EQ(doc["ball_size"], 3);
  EXPECT_EQ(doc["scorer_calls"], 3);
  EXPECT_EQ(doc["items"].size(), 4u);
  EXPECT_EQ(doc["mode"], "exact");
}

TEST(EvaluateRobust, MatchesByPositionAndCleanToken) {
  const auto clean = testing::make_example("q", {"a", "b"}, {0.9, 0.9}, {0, 1});
  RobustUncertaintySet set;
  set.question_id = "q";
  set.items = {{0, "a", 0.9}, {1, "b1", 0.9}};
  const auto r = evaluate_robust(set, clean);
  EXPECT_DOUBLE_EQ(r.loss, 0.5);
  EXPECT_EQ(r.set_size, 2u);
}

TEST(InjectNoise, ChangesExactlyMinOfDAndPerturbable) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t k = 1 + trial % 8;
    auto inst = testing::random_instance(rng, k, 2, trial);
    std::size_t perturbable = 0;
    for (const auto& t : inst.clean.tokens) perturbable += inst.lexicon.alternatives(t).empty() ? 0 : 1;
    const std::size_t d = trial % (k + 1);
    const auto noisy = inject_noise(inst.clean, inst.lexicon, d, trial);
    std::size_t changed = 0;
    for (std::size_t j = 0; j < k; ++j) changed += noisy.tokens[j] != inst.clean.tokens[j];
    EXPECT_EQ(changed, std::min(d, perturbable));
    EXPECT_TRUE(in_ball(noisy, inst.clean, inst.lexicon, d));
    EXPECT_TRUE(in_ball(inst.clean, noisy, inst.lexicon, d));
    EXPECT_EQ(noisy.tokens, inject_noise(inst.clean, inst.lexicon, d, trial).tokens);
  }
  const auto lex = lexicon_of({{"a", {"a", "a1"}}});
  EXPECT_THROW(inject_noise(question({"a"}), lex, 2, 1), InputError);
}

}  // namespace
}  // namespace expcrc
