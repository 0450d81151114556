#pragma once

// Synthetic data and Monte Carlo coverage experiments.

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "expcrc/calibrate.hpp"
#include "expcrc/core.hpp"
#include "expcrc/predict.hpp"
#include "expcrc/robust.hpp"
#include "expcrc/scorer.hpp"

namespace expcrc {

struct SyntheticConfig {
  std::size_t n_calibration = 100;
  std::size_t n_test = 100;
  std::size_t k_min = 8;
  std::size_t k_max = 16;
  double truth_fraction = 0.4;
  double sigma = 0.3;
  std::uint64_t seed = 1;
  std::size_t synonym_fanout = 2;
  std::size_t d = 1;
  std::size_t vocabulary = 5000;

  void validate() const {
    if (n_calibration == 0 || n_test == 0) throw InputError("synthetic: counts must be positive");
    if (k_min == 0 || k_max < k_min) throw InputError("synthetic: need 1 <= k_min <= k_max");
    if (!(truth_fraction > 0.0 && truth_fraction <= 1.0))
      throw InputError("synthetic: truth_fraction must be in (0,1]");
    if (!(sigma >= 0.0)) throw InputError("synthetic: sigma must be >= 0");
    if (vocabulary == 0) throw InputError("synthetic: vocabulary must be positive");
    if (d > k_min) throw InputError("synthetic: d must not exceed k_min");
  }

  std::size_t total() const { return n_calibration + n_test; }
};

/// Spec of the scorer that produced the synthetic scores.
inline ScorerSpec synthetic_scorer_spec(const SyntheticConfig& config) {
  ScorerSpec spec;
  spec.kind = ScorerKind::oracle_noise;
  spec.sigma = config.sigma;
  spec.seed = config.seed;
  return spec;
}

/// i.i.d. questions of random vocabulary tokens. Each position is annotated
/// with probability truth_fraction (at least one per question); scores come
/// from the oracle-noise scorer at level sigma.
inline Dataset generate_synthetic_dataset(const SyntheticConfig& config) {
  config.validate();
  std::mt19937_64 rng(config.seed);
  std::uniform_int_distribution<std::size_t> length(config.k_min, config.k_max);
  std::uniform_int_distribution<std::size_t> word(0, config.vocabulary - 1);
  std::bernoulli_distribution annotate(config.truth_fraction);

  Dataset data;
  data.source_path = "synthetic:seed=" + std::to_string(config.seed);
  data.examples.reserve(config.total());
  for (std::size_t i = 0; i < config.total(); ++i) {
    CalibrationExample ex;
    ex.question.id = "q" + std::to_string(i);
    const std::size_t k = length(rng);
    for (std::size_t j = 0; j < k; ++j) {
      ex.question.tokens.push_back("w" + std::to_string(word(rng)));
      if (annotate(rng)) ex.explanation.indices.push_back(j);
    }
    if (ex.explanation.indices.empty())
      ex.explanation.indices.push_back(std::uniform_int_distribution<std::size_t>(0, k - 1)(rng));
    ex.scores = oracle_noise_score(ex.explanation, ex.question, config.sigma, config.seed);
    data.examples.push_back(std::move(ex));
  }
  return data;
}

/// Every token t gets alternatives t~1..t~fanout; the lexicon is then closed
/// (so t~i also maps back to t).
inline SynonymLexicon synthetic_lexicon(const Dataset& data, std::size_t fanout) {
  SynonymLexicon lex;
  for (const auto& ex : data.examples)
    for (const auto& t : ex.question.tokens) {
      std::set<std::string> syns{t};
      for (std::size_t f = 1; f <= fanout; ++f) syns.insert(t + "~" + std::to_string(f));
      lex.add(t, syns);
    }
  lex.close(false);
  return lex;
}

// ---------------------------------------------------------------------------

struct ExperimentOptions {
  CalibrationMode mode = CalibrationMode::exact;
  bool robust = false;
  std::size_t grid_points = 1001;
  std::uint64_t enumeration_budget = 100'000;
};

struct TrialResult {
  double lambda_hat = 1.0;
  bool feasible = false;
  double mean_loss = 0.0;
  double mean_set_size = 0.0;
  // Robust runs only: plain sets on the noisy questions, and how often the
  // robust set contained the clean-question plain set.
  double nonrobust_mean_loss = 0.0;
  double nonrobust_mean_set_size = 0.0;
  double superset_rate = 1.0;
};

/// generate -> split -> calibrate -> predict -> evaluate, seeded by
/// config.seed.
inline TrialResult run_trial(const SyntheticConfig& config, double alpha,
                             const ExperimentOptions& opts = {}) {
  const Dataset data = generate_synthetic_dataset(config);
  const double fraction = static_cast<double>(config.n_calibration) /
                          static_cast<double>(config.total());
  const auto [cal, test] = split_dataset(data, fraction, derive_seed(config.seed, 1));

  const OracleNoiseScorer scorer(make_truth_lookup(data), config.sigma, config.seed);
  CalibrationResult calibration = calibrate(cal.examples, alpha, opts.mode, opts.grid_points);
  calibration.scorer = scorer.identity();

  TrialResult out;
  out.lambda_hat = calibration.lambda_hat;
  out.feasible = calibration.feasible;
  const double n_test = static_cast<double>(test.size());

  if (!opts.robust) {
    std::vector<double> losses, sizes;
    for (const auto& ex : test.examples) {
      const auto report = evaluate(predict(ex.question, scorer, calibration, true), ex);
      losses.push_back(report.loss);
      sizes.push_back(static_cast<double>(report.set_size));
    }
    out.mean_loss = pairwise_sum(losses) / n_test;
    out.mean_set_size = pairwise_sum(sizes) / n_test;
    return out;
  }

  const SynonymLexicon lexicon = synthetic_lexicon(test, config.synonym_fanout);
  BallSpec ball;
  ball.d = config.d;
  ball.enumeration_budget = opts.enumeration_budget;
  ball.mode = RobustMode::exact;

  std::vector<double> losses, sizes, plain_losses, plain_sizes;
  std::size_t supersets = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const auto& ex = test.examples[i];
    const auto noisy = inject_noise(ex.question, lexicon, config.d, derive_seed(config.seed, 1000 + i));

    const auto robust = build_robust_set(noisy, lexicon, ball, scorer, calibration);
    const auto robust_report = evaluate_robust(robust, ex);
    losses.push_back(robust_report.loss);
    sizes.push_back(static_cast<double>(robust_report.set_size));

    const auto plain_noisy = predict(noisy, scorer, calibration, true);
    const auto plain_report = evaluate_against_clean(plain_noisy, ex);
    plain_losses.push_back(plain_report.loss);
    plain_sizes.push_back(static_cast<double>(plain_report.set_size));

    const auto clean_set = predict(ex.question, scorer, calibration, true);
    bool superset = true;
    for (const auto& [pos, tok] : clean_set.tokens) superset = superset && robust.contains(pos, tok);
    supersets += superset ? 1 : 0;
  }
  out.mean_loss = pairwise_sum(losses) / n_test;
  out.mean_set_size = pairwise_sum(sizes) / n_test;
  out.nonrobust_mean_loss = pairwise_sum(plain_losses) / n_test;
  out.nonrobust_mean_set_size = pairwise_sum(plain_sizes) / n_test;
  out.superset_rate = static_cast<double>(supersets) / n_test;
  return out;
}

struct CoverageReport {
  double alpha = 0.0;
  std::size_t trials = 0;
  CalibrationMode mode = CalibrationMode::exact;
  bool robust = false;
  std::vector<double> trial_losses;
  double mean_loss = 0.0;
  /// Standard error of the mean over trials; NaN with se_defined = false
  /// when there is a single trial.
  double se = std::numeric_limits<double>::quiet_NaN();
  bool se_defined = false;
  double mean_set_size = 0.0;
  double mean_lambda = 0.0;
  double feasibility_rate = 0.0;
  double nonrobust_mean_loss = 0.0;
  double nonrobust_mean_set_size = 0.0;
  double superset_rate = 1.0;

  /// The Monte Carlo form of the coverage guarantee.
  bool within_bound(double num_se = 3.0) const {
    const double slack = se_defined ? num_se * se : 0.0;
    return mean_loss <= alpha + slack;
  }
};

/// Trial t runs with seed derive_seed(config.seed, t), so any trial can be
/// re-run on its own.
inline CoverageReport run_coverage_experiment(const SyntheticConfig& config, double alpha,
                                              std::size_t trials,
                                              const ExperimentOptions& opts = {},
                                              std::size_t workers = 1) {
  if (trials == 0) throw InputError("experiment: trials must be >= 1");
  config.validate();
  std::vector<TrialResult> results(trials);
  parallel_for(trials, workers, [&](std::size_t t) {
    SyntheticConfig trial_config = config;
    trial_config.seed = derive_seed(config.seed, t);
    results[t] = run_trial(trial_config, alpha, opts);
  });

  CoverageReport report;
  report.alpha = alpha;
  report.trials = trials;
  report.mode = opts.mode;
  report.robust = opts.robust;
  std::vector<double> sizes, lambdas, feasible, plain_losses, plain_sizes, supersets;
  for (const auto& r : results) {
    report.trial_losses.push_back(r.mean_loss);
    sizes.push_back(r.mean_set_size);
    lambdas.push_back(r.lambda_hat);
    feasible.push_back(r.feasible ? 1.0 : 0.0);
    plain_losses.push_back(r.nonrobust_mean_loss);
    plain_sizes.push_back(r.nonrobust_mean_set_size);
    supersets.push_back(r.superset_rate);
  }
  const double T = static_cast<double>(trials);
  auto mean = [T](const std::vector<double>& v) { return pairwise_sum(v) / T; };
  report.mean_loss = mean(report.trial_losses);
  report.mean_set_size = mean(sizes);
  report.mean_lambda = mean(lambdas);
  report.feasibility_rate = mean(feasible);
  report.nonrobust_mean_loss = mean(plain_losses);
  report.nonrobust_mean_set_size = mean(plain_sizes);
  report.superset_rate = mean(supersets);
  if (trials > 1) {
    std::vector<double> sq;
    for (double l : report.trial_losses) sq.push_back((l - report.mean_loss) * (l - report.mean_loss));
    const double variance = pairwise_sum(sq) / (T - 1.0);
    report.se = std::sqrt(variance / T);
    report.se_defined = true;
  }
  return report;
}

inline constexpr const char* kCoverageCsvHeader =
    "alpha,mode,robust,trials,mean_loss,se,mean_set_size,mean_lambda,feasibility_rate";

/// One CSV row per report, in input order; header only for an empty list.
inline std::string summarize(std::span<const CoverageReport> reports) {
  std::string out = std::string(kCoverageCsvHeader) + "\n";
  for (const auto& r : reports) {
    out += format_double(r.alpha) + ',' + to_string(r.mode) + ',' +
           (r.robust ? "true" : "false") + ',' + std::to_string(r.trials) + ',' +
           format_double(r.mean_loss) + ',' + (r.se_defined ? format_double(r.se) : "NA") +
           ',' + format_double(r.mean_set_size) + ',' + format_double(r.mean_lambda) + ',' +
           format_double(r.feasibility_rate) + '\n';
  }
  return out;
}

inline json to_json(const CoverageReport& r) {
  json doc{{"alpha", r.alpha},
           {"trials", r.trials},
           {"mode", to_string(r.mode)},
           {"robust", r.robust},
           {"mean_loss", r.mean_loss},
           {"se", r.se_defined ? json(r.se) : json(nullptr)},
           {"mean_set_size", r.mean_set_size},
           {"mean_lambda", r.mean_lambda},
           {"feasibility_rate", r.feasibility_rate},
           {"within_3se", r.within_bound()}};
  if (r.robust) {
    doc["nonrobust_mean_loss"] = r.nonrobust_mean_loss;
    doc["nonrobust_mean_set_size"] = r.nonrobust_mean_set_size;
    doc["superset_rate"] = r.superset_rate;
  }
  return doc;
}

// ---------------------------------------------------------------------------
// Batch sweeps driven by a JSON experiment file.

struct ExperimentPlan {
  SyntheticConfig config;
  std::vector<double> alphas{0.1, 0.2, 0.45, 0.8};
  std::size_t trials = 500;
  std::vector<CalibrationMode> modes{CalibrationMode::exact};
  std::vector<bool> robust{false};
  std::size_t grid_points = 1001;
  std::uint64_t enumeration_budget = 100'000;
};

inline ExperimentPlan plan_from_json(const json& doc) {
  ExperimentPlan plan;
  try {
    auto& c = plan.config;
    c.n_calibration = doc.value("n_calibration", c.n_calibration);
    c.n_test = doc.value("n_test", c.n_test);
    c.k_min = doc.value("k_min", c.k_min);
    c.k_max = doc.value("k_max", c.k_max);
    c.truth_fraction = doc.value("truth_fraction", c.truth_fraction);
    c.sigma = doc.value("sigma", c.sigma);
    c.seed = doc.value("seed", c.seed);
    c.synonym_fanout = doc.value("synonym_fanout", c.synonym_fanout);
    c.d = doc.value("d", c.d);
    c.vocabulary = doc.value("vocabulary", c.vocabulary);
    plan.alphas = doc.value("alphas", plan.alphas);
    plan.trials = doc.value("trials", plan.trials);
    if (doc.contains("modes")) {
      plan.modes.clear();
      for (const auto& m : doc["modes"]) plan.modes.push_back(parse_calibration_mode(m.get<std::string>()));
    }
    plan.robust = doc.value("robust", plan.robust);
    plan.grid_points = doc.value("grid_points", plan.grid_points);
    plan.enumeration_budget = doc.value("budget", plan.enumeration_budget);
  } catch (const json::exception& e) {
    throw InputError(std::string("experiment config: ") + e.what());
  }
  plan.config.validate();
  for (double a : plan.alphas)
    if (!(a > 0.0 && a < 1.0)) throw InputError("experiment config: alpha outside (0,1)");
  if (plan.trials == 0) throw InputError("experiment config: trials must be >= 1");
  return plan;
}

/// Runs every (robust flag, mode, alpha) combination in that nesting order.
inline std::vector<CoverageReport> run_plan(const ExperimentPlan& plan, std::size_t workers = 1) {
  std::vector<CoverageReport> reports;
  for (bool robust : plan.robust)
    for (auto mode : plan.modes)
      for (double alpha : plan.alphas) {
        ExperimentOptions opts;
        opts.mode = mode;
        opts.robust = robust;
        opts.grid_points = plan.grid_points;
        opts.enumeration_budget = plan.enumeration_budget;
        reports.push_back(run_coverage_experiment(plan.config, alpha, plan.trials, opts, workers));
      }
  return reports;
}

}  // namespace expcrc
