// Acceptance suite: one [PASS]/[FAIL] line per criterion, exit status 1 if
// any criterion fails.

#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include "../test_support.hpp"

#ifndef EXPCRC_CLI_PATH
#error "EXPCRC_CLI_PATH must name the expcrc executable"
#endif

namespace fs = std::filesystem;
using namespace expcrc;
using expcrc::testing::brute_robust_score;
using expcrc::testing::brute_smallest_feasible;
using expcrc::testing::random_example;
using expcrc::testing::random_instance;
using expcrc::testing::random_table_over_ball;
using expcrc::testing::SmallInstance;

namespace {

struct Outcome {
  bool pass = true;
  std::vector<std::string> details;

  void check(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      if (failures_logged_++ < 10) details.push_back("violation: " + what);
    }
  }
  void note(const std::string& s) { details.push_back(s); }

 private:
  int failures_logged_ = 0;
};

std::size_t workers() { return std::max(1u, std::thread::hardware_concurrency()); }

std::string fmt(double v) { return format_double(v); }

SyntheticConfig base_config() {
  SyntheticConfig c;
  c.n_calibration = 100;
  c.n_test = 100;
  c.k_min = 8;
  c.k_max = 16;
  c.truth_fraction = 0.4;
  c.sigma = 0.3;
  c.seed = 20240601;
  return c;
}

std::string describe(const CoverageReport& r) {
  std::ostringstream os;
  os << "alpha=" << fmt(r.alpha) << " mean_loss=" << fmt(r.mean_loss) << " se=" << fmt(r.se)
     << " limit=" << fmt(r.alpha + 3.0 * r.se) << " mean_set_size=" << fmt(r.mean_set_size)
     << " mean_lambda=" << fmt(r.mean_lambda);
  return os.str();
}

// ---------------------------------------------------------------------------

Outcome ac1_coverage() {
  Outcome out;
  ExperimentOptions opts;
  for (double alpha : {0.1, 0.2, 0.45, 0.8}) {
    const auto r = run_coverage_experiment(base_config(), alpha, 500, opts, workers());
    out.note(describe(r));
    out.check(r.se_defined && r.within_bound(3.0), "coverage at alpha " + fmt(alpha));
  }
  return out;
}

// ---------------------------------------------------------------------------

Outcome ac2_robust() {
  Outcome out;
  auto config = base_config();
  config.synonym_fanout = 2;
  config.d = 1;
  ExperimentOptions opts;
  opts.robust = true;
  for (double alpha : {0.2, 0.45}) {
    const auto r = run_coverage_experiment(config, alpha, 500, opts, workers());
    out.note(describe(r) + " nonrobust_loss=" + fmt(r.nonrobust_mean_loss) +
             " superset_rate=" + fmt(r.superset_rate));
    out.check(r.se_defined && r.within_bound(3.0), "robust coverage at alpha " + fmt(alpha));
    out.check(r.superset_rate == 1.0, "Monte Carlo superset rate at alpha " + fmt(alpha));
  }

  // Exhaustive superset check: every noisy question in the ball of the clean
  // one, a context-dependent scorer, several thresholds.
  std::mt19937_64 rng(515);
  std::size_t instances = 0, checked = 0;
  for (std::size_t k = 1; k <= 8; ++k)
    for (std::size_t d = 0; d <= std::min<std::size_t>(k, 2); ++d)
      for (std::size_t fanout = 1; fanout <= 3; ++fanout) {
        SmallInstance inst;
        inst.clean.id = "x" + std::to_string(instances);
        for (std::size_t j = 0; j < k; ++j) {
          const std::string t = "c" + std::to_string(j);
          inst.clean.tokens.push_back(t);
          std::set<std::string> syns{t};
          const std::size_t f = std::uniform_int_distribution<std::size_t>(0, fanout)(rng);
          for (std::size_t i = 1; i <= f; ++i) syns.insert(t + "~" + std::to_string(i));
          inst.lexicon.add(t, syns);
        }
        inst.lexicon.close(false);
        ++instances;
        const UniformRandomScorer scorer(rng());
        BallSpec spec;
        spec.d = d;
        spec.enumeration_budget = 1'000'000;
        for (const auto& noisy : enumerate_ball(inst.clean, inst.lexicon, spec)) {
          for (double lambda : {0.1, 0.35, 0.6, 0.85}) {
            CalibrationResult cal;
            cal.lambda_hat = lambda;
            cal.scorer = scorer.identity();
            const auto robust = build_robust_set(noisy, inst.lexicon, spec, scorer, cal);
            const auto plain = predict(inst.clean, scorer, cal, true);
            bool superset = true;
            for (const auto& [pos, tok] : plain.tokens) superset = superset && robust.contains(pos, tok);
            out.check(superset, "superset failed for instance " + inst.clean.id);
            ++checked;
          }
        }
      }
  out.note("exhaustive superset: " + std::to_string(instances) + " instances, " +
           std::to_string(checked) + " (noisy question, lambda) cases");
  return out;
}

// ---------------------------------------------------------------------------

Outcome ac3_exactness() {
  Outcome out;
  constexpr long kPoints = 100'000;
  const double step = 1.0 / static_cast<double>(kPoints - 1);
  std::mt19937_64 rng(303);
  std::uniform_real_distribution<double> alpha_dist(0.05, 0.6);
  std::size_t feasible = 0;
  double worst_gap = 0.0;
  for (int ds = 0; ds < 100; ++ds) {
    std::vector<CalibrationExample> data;
    for (std::size_t i = 0; i < 50; ++i) data.push_back(random_example(rng, i, 1, 16, ds % 4 == 0));
    const double alpha = alpha_dist(rng);
    const auto exact = calibrate_exact(data, alpha);
    const long idx = brute_smallest_feasible(data, exact.adjusted_bound, kPoints);
    if (!exact.feasible) {
      out.check(idx == -1, "dataset " + std::to_string(ds) + ": exact infeasible, brute feasible");
    } else {
      ++feasible;
      const double g = static_cast<double>(idx) / static_cast<double>(kPoints - 1);
      const bool ok = idx >= 0 && g >= exact.lambda_hat && g - exact.lambda_hat <= step;
      out.check(ok, "dataset " + std::to_string(ds) + ": brute " + fmt(g) + " vs exact " +
                        fmt(exact.lambda_hat));
      if (idx >= 0) worst_gap = std::max(worst_gap, g - exact.lambda_hat);
    }
    const auto crit = critical_thresholds(data);
    const auto grid = calibrate_grid(data, alpha, crit);
    out.check(grid.lambda_hat == exact.lambda_hat && grid.feasible == exact.feasible &&
                  grid.empirical_risk == exact.empirical_risk,
              "dataset " + std::to_string(ds) + ": critical-grid result differs from exact");
  }
  out.note("100 datasets, " + std::to_string(feasible) + " feasible, worst brute gap " +
           fmt(worst_gap) + " (step " + fmt(step) + ")");
  return out;
}

// ---------------------------------------------------------------------------

Outcome ac4_monotonicity() {
  Outcome out;
  std::mt19937_64 rng(404);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int c = 0; c < 10'000; ++c) {
    const auto ex = random_example(rng, c, 1, 20, c % 3 == 0);
    double l1 = u(rng), l2 = u(rng);
    if (c % 5 == 0) l2 = l1;
    if (c % 7 == 0) l1 = 1.0 - ex.scores.values[0];
    if (l1 > l2) std::swap(l1, l2);
    const auto s1 = build_set(ex, l1);
    const auto s2 = build_set(ex, l2);
    const bool nested =
        std::includes(s2.indices.begin(), s2.indices.end(), s1.indices.begin(), s1.indices.end());
    out.check(nested, "nesting at case " + std::to_string(c));
    out.check(loss(s2, ex.explanation) <= loss(s1, ex.explanation),
              "loss increased at case " + std::to_string(c));
  }
  out.note("10000 cases");
  return out;
}

// ---------------------------------------------------------------------------

Outcome ac5_degenerate() {
  Outcome out;
  std::mt19937_64 rng(505);

  for (int i = 0; i < 2000; ++i) {
    const auto ex = random_example(rng, i, 1, 20, i % 2 == 0);
    const auto full = build_set(ex, 1.0);
    out.check(full.size() == ex.question.size(), "lambda=1 set not full");
    out.check(loss(full, ex.explanation) == 0.0, "lambda=1 loss not zero");
  }

  for (double alpha : {0.05, 0.2, 0.45}) {
    const std::size_t n = 1;  // alpha - (1 - alpha) / 1 < 0
    std::vector<CalibrationExample> data;
    for (std::size_t i = 0; i < n; ++i) data.push_back(random_example(rng, i));
    out.check(adjusted_bound(alpha, n) < 0.0, "bound not negative");
    for (auto mode : {CalibrationMode::exact, CalibrationMode::grid}) {
      const auto r = calibrate(data, alpha, mode);
      out.check(r.lambda_hat == 1.0 && !r.feasible, "negative bound not infeasible at lambda 1");
    }
  }
  {
    std::vector<CalibrationExample> data;
    for (std::size_t i = 0; i < 3; ++i) data.push_back(random_example(rng, i));
    const auto r = calibrate_exact(data, 0.2);  // 0.2 - 0.8/3 < 0
    out.check(r.lambda_hat == 1.0 && !r.feasible, "n=3 alpha=0.2 must be infeasible");
  }

  {
    auto config = base_config();
    config.sigma = 0.0;
    const auto data = generate_synthetic_dataset(config);
    std::vector<double> lambdas{std::numeric_limits<double>::denorm_min(), 1e-12};
    for (double l : uniform_grid(101)) if (l > 0.0) lambdas.push_back(l);
    for (double l : critical_thresholds(data.examples)) if (l > 0.0) lambdas.push_back(l);
    for (double l : lambdas)
      out.check(empirical_risk(data.examples, l) == 0.0, "sigma=0 risk nonzero at " + fmt(l));
    const auto r = run_trial(config, 0.1);
    out.check(r.mean_loss == 0.0, "sigma=0 test loss nonzero");
  }

  {
    auto config = base_config();
    config.d = 0;
    config.n_calibration = 60;
    config.n_test = 60;
    std::size_t compared = 0;
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
      config.seed = seed;
      ExperimentOptions plain_opts, robust_opts;
      robust_opts.robust = true;
      const auto plain = run_trial(config, 0.3, plain_opts);
      const auto robust = run_trial(config, 0.3, robust_opts);
      out.check(plain.lambda_hat == robust.lambda_hat && plain.mean_loss == robust.mean_loss &&
                    plain.mean_set_size == robust.mean_set_size,
                "d=0 trial differs from plain at seed " + std::to_string(seed));

      const auto data = generate_synthetic_dataset(config);
      const OracleNoiseScorer scorer(make_truth_lookup(data), config.sigma, config.seed);
      const auto lex = synthetic_lexicon(data, 2);
      CalibrationResult cal = calibrate_exact(data.examples, 0.3);
      cal.scorer = scorer.identity();
      BallSpec ball;
      ball.d = 0;
      for (const auto& ex : data.examples) {
        const auto p = predict(ex.question, scorer, cal, true);
        const auto rs = build_robust_set(ex.question, lex, ball, scorer, cal);
        bool same = rs.items.size() == p.tokens.size();
        for (std::size_t i = 0; same && i < rs.items.size(); ++i)
          same = rs.items[i].position == p.tokens[i].first &&
                 rs.items[i].candidate == p.tokens[i].second &&
                 rs.items[i].robust_score == scorer.score(ex.question).values[p.indices[i]];
        out.check(same, "d=0 robust set differs for " + ex.question.id);
        ++compared;
      }
    }
    out.note("d=0 compared on " + std::to_string(compared) + " questions");
  }
  return out;
}

// ---------------------------------------------------------------------------

Outcome ac6_sup_oracle() {
  Outcome out;
  std::mt19937_64 rng(606);
  std::size_t pairs = 0;
  for (int inst_id = 0; inst_id < 200; ++inst_id) {
    const std::size_t k = std::uniform_int_distribution<std::size_t>(1, 6)(rng);
    const std::size_t d = std::uniform_int_distribution<std::size_t>(0, std::min<std::size_t>(k, 2))(rng);
    auto inst = random_instance(rng, k, 3, inst_id);
    const auto table = random_table_over_ball(rng, inst.clean, inst.lexicon, d);
    BallSpec spec;
    spec.d = d;
    const auto fast = robust_score_table(inst.clean, inst.lexicon, spec, table);
    for (std::size_t j = 0; j < k; ++j)
      for (const auto& c : inst.lexicon.synonym_set(inst.clean.tokens[j])) {
        const double want = brute_robust_score(inst.clean, j, c, inst.lexicon, d, table);
        out.check(robust_score(inst.clean, j, c, inst.lexicon, spec, table) == want,
                  "robust_score mismatch in instance " + std::to_string(inst_id));
        out.check(fast[j].at(c) == want, "table mismatch in instance " + std::to_string(inst_id));
        ++pairs;
      }
  }
  out.note("200 instances, " + std::to_string(pairs) + " (position, candidate) pairs");

  std::size_t compared = 0;
  for (int inst_id = 0; inst_id < 200; ++inst_id) {
    const std::size_t k = std::uniform_int_distribution<std::size_t>(1, 6)(rng);
    auto inst = random_instance(rng, k, 3, inst_id);
    Dataset data;
    CalibrationExample ex;
    ex.question = inst.clean;
    ex.explanation.indices = {0};
    data.examples.push_back(ex);
    const OracleNoiseScorer oracle(make_truth_lookup(data), 0.3, inst_id);
    const ConstantScorer constant(0.37);
    for (const Scorer* scorer : {static_cast<const Scorer*>(&oracle), static_cast<const Scorer*>(&constant)})
      for (std::size_t d = 0; d <= std::min<std::size_t>(k, 2); ++d) {
        BallSpec exact, coord;
        exact.d = coord.d = d;
        coord.mode = RobustMode::coordinatewise;
        out.check(robust_score_table(inst.clean, inst.lexicon, exact, *scorer) ==
                      robust_score_table(inst.clean, inst.lexicon, coord, *scorer),
                  "coordinatewise differs from exact in instance " + std::to_string(inst_id));
        ++compared;
      }
  }
  out.note("coordinatewise vs exact on " + std::to_string(compared) + " tables");
  return out;
}

// ---------------------------------------------------------------------------

int run(const std::string& command) {
  const int status = std::system(command.c_str());
  if (status == -1 || !WIFEXITED(status)) return -1;
  return WEXITSTATUS(status);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::string quote(const fs::path& p) { return "'" + p.string() + "'"; }

Outcome ac7_cli() {
  Outcome out;
  const std::string cli = EXPCRC_CLI_PATH;
  const fs::path root = fs::temp_directory_path() / "expcrc_acceptance_cli";
  fs::remove_all(root);
  const std::vector<std::string> files{"cal.jsonl", "test.jsonl", "calibration.json",
                                       "calibration.curve.csv", "predictions.jsonl",
                                       "stats.json"};

  for (const char* run_name : {"a", "b"}) {
    const fs::path dir = root / run_name;
    fs::create_directories(dir);
    const std::string log = " 2>>" + quote(dir / "stderr.log");
    const int g = run(cli + " generate --seed 7 --n-calibration 200 --n-test 50 --sigma 0.3" +
                      " --calibration-out " + quote(dir / "cal.jsonl") + " --test-out " +
                      quote(dir / "test.jsonl") + " >/dev/null" + log);
    const int c = run(cli + " calibrate --alpha 0.2 --data " + quote(dir / "cal.jsonl") +
                      " --scorer oracle_noise:sigma=0.3,seed=7 --out " +
                      quote(dir / "calibration.json") + log);
    const int p = run(cli + " predict --calibration " + quote(dir / "calibration.json") +
                      " --data " + quote(dir / "test.jsonl") +
                      " --scorer oracle_noise:sigma=0.3,seed=7 --strict --out " +
                      quote(dir / "predictions.jsonl") + log);
    const int s = run(cli + " stats --calibration " + quote(dir / "calibration.json") + " --data " +
                      quote(dir / "cal.jsonl") + " > " + quote(dir / "stats.json") + log);
    out.check(g == 0 && c == 0 && p == 0 && s == 0,
              std::string("run ") + run_name + " exit codes " + std::to_string(g) + "," +
                  std::to_string(c) + "," + std::to_string(p) + "," + std::to_string(s));
  }
  for (const auto& f : files) {
    const auto a = slurp(root / "a" / f);
    out.check(!a.empty() && a == slurp(root / "b" / f), f + " differs between runs");
  }

  // Tamper with lambda_hat: just below the recorded value, and at zero.
  json cal = json::parse(slurp(root / "a" / "calibration.json"));
  const double lambda_hat = cal.at("lambda_hat").get<double>();
  out.note("lambda_hat=" + fmt(lambda_hat) + "; outputs byte-identical across runs");
  for (double tampered : {std::nextafter(lambda_hat, 0.0), 0.0}) {
    cal["lambda_hat"] = tampered;
    const fs::path path = root / "tampered.json";
    std::ofstream(path) << cal.dump(2) << "\n";
    const int code = run(cli + " stats --calibration " + quote(path) + " --data " +
                         quote(root / "a" / "cal.jsonl") + " >/dev/null 2>" +
                         quote(root / "tampered.log"));
    out.check(code == 3, "tampered lambda " + fmt(tampered) + " gave exit " + std::to_string(code));
    out.check(slurp(root / "tampered.log").find("bound violated") != std::string::npos,
              "no bound-violation message for tampered lambda " + fmt(tampered));
  }
  return out;
}

}  // namespace

int main() {
  struct Criterion {
    const char* id;
    const char* title;
    Outcome (*fn)();
  };
  const Criterion criteria[] = {
      {"AC1", "coverage, 500 trials per alpha, mean loss <= alpha + 3 SE", ac1_coverage},
      {"AC2", "robust coverage and superset property", ac2_robust},
      {"AC3", "exact calibration vs 1e5-point brute scan and critical grid", ac3_exactness},
      {"AC4", "set nesting and loss monotonicity, 1e4 cases", ac4_monotonicity},
      {"AC5", "degenerate paths", ac5_degenerate},
      {"AC6", "robust score vs exhaustive sup oracle", ac6_sup_oracle},
      {"AC7", "CLI round trip determinism and tamper detection", ac7_cli},
  };
  set_warning_handler([](const std::string&) {});
  bool all = true;
  for (const auto& c : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.fn();
    } catch (const std::exception& e) {
      o.pass = false;
      o.note(std::string("exception: ") + e.what());
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    all = all && o.pass;
    std::printf("[%s] %s %s (%.1fs)\n", o.pass ? "PASS" : "FAIL", c.id, c.title, secs);
    for (const auto& d : o.details) std::printf("       %s\n", d.c_str());
    std::fflush(stdout);
  }
  return all ? 0 : 1;
}
