// expcrc: calibrate, predict and verify token-level explanation sets.
//
// Exit codes: 0 success, 1 internal fault, 2 input error, 3 verification
// failure.

#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "expcrc/expcrc.hpp"
#include "expcrc/remote_scorer.hpp"

namespace {

using namespace expcrc;

constexpr int kExitOk = 0;
constexpr int kExitInternal = 1;
constexpr int kExitInput = 2;
constexpr int kExitVerification = 3;

struct SharedFlags {
  double alpha = 0.1;
  std::string mode = "exact";
  std::size_t grid_size = 1001;
  std::size_t workers = 1;
  std::string cache_dir;
  bool strict = false;
  bool clamp_scores = false;
  std::string out;
};

void check_alpha(double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0))
    throw InputError("--alpha must be in (0,1), got " + format_double(alpha));
}

std::filesystem::path default_curve_path(const std::filesystem::path& out) {
  auto p = out;
  p.replace_extension(".curve.csv");
  return p;
}

// ---------------------------------------------------------------------------

struct GenerateArgs {
  SyntheticConfig config;
  std::string calibration_out, test_out, lexicon_out;
};

int cmd_generate(const GenerateArgs& args) {
  const Dataset data = generate_synthetic_dataset(args.config);
  const double fraction = static_cast<double>(args.config.n_calibration) /
                          static_cast<double>(args.config.total());
  const auto [cal, test] = split_dataset(data, fraction, derive_seed(args.config.seed, 1));
  save_dataset(args.calibration_out, cal);
  save_dataset(args.test_out, test);
  if (!args.lexicon_out.empty())
    write_file_atomic(args.lexicon_out,
                      lexicon_to_jsonl(synthetic_lexicon(data, args.config.synonym_fanout)));
  std::cout << synthetic_scorer_spec(args.config).identity() << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct CalibrateArgs {
  std::string data;
  std::string scorer;
  std::string curve_out;
};

int cmd_calibrate(const SharedFlags& flags, const CalibrateArgs& args) {
  check_alpha(flags.alpha);
  if (flags.out.empty()) throw InputError("calibrate: --out is required");
  const auto mode = parse_calibration_mode(flags.mode);
  LoadOptions load;
  load.clamp_scores = flags.clamp_scores;
  const Dataset data = load_dataset(args.data, load);

  CalibrationResult result;
  std::vector<double> curve_grid;
  if (mode == CalibrationMode::exact) {
    result = calibrate_exact(data.examples, flags.alpha);
    curve_grid = critical_thresholds(data.examples);
  } else {
    curve_grid = uniform_grid(flags.grid_size);
    result = calibrate_grid(data.examples, flags.alpha, curve_grid);
  }
  result.scorer = args.scorer.empty() ? "stored" : parse_scorer_spec(args.scorer).identity();

  write_file_atomic(flags.out, to_json(result).dump(2) + "\n");
  const auto curve_path = args.curve_out.empty() ? default_curve_path(flags.out)
                                                 : std::filesystem::path(args.curve_out);
  write_file_atomic(curve_path, to_csv(risk_curve(data.examples, curve_grid)));

  std::cerr << "lambda_hat=" << format_double(result.lambda_hat)
            << " feasible=" << (result.feasible ? "true" : "false")
            << " risk=" << format_double(result.empirical_risk)
            << " bound=" << format_double(result.adjusted_bound) << " n=" << result.n << '\n';
  if (!result.feasible)
    std::cerr << "note: adjusted bound not attainable; falling back to lambda = 1 (full sets)\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct PredictArgs {
  std::string calibration;
  std::string data;
  std::string scorer;
  // robust-predict only
  std::string lexicon;
  std::size_t d = 1;
  std::uint64_t budget = 100'000;
  std::string robust_mode = "exact";
};

struct LoadedInputs {
  CalibrationResult calibration;
  Dataset data;
  std::unique_ptr<Scorer> scorer;
};

LoadedInputs load_predict_inputs(const SharedFlags& flags, const PredictArgs& args) {
  LoadedInputs in;
  in.calibration = load_calibration(args.calibration);
  LoadOptions load;
  load.clamp_scores = flags.clamp_scores;
  load.validation.require_explanation = false;
  load.validation.require_scores = args.scorer.empty();
  in.data = load_dataset(args.data, load);
  if (args.scorer.empty()) {
    in.scorer = std::make_unique<StoredScorer>(in.data);
  } else {
    ScorerContext ctx;
    ctx.truth = make_truth_lookup(in.data);
    ctx.cache_dir = resolve_cache_dir(flags.cache_dir);
    in.scorer = make_scorer(parse_scorer_spec(args.scorer), ctx);
  }
  return in;
}

void report_mean(const char* label, const std::vector<double>& losses,
                 const std::vector<double>& sizes) {
  std::cerr << label << ": " << sizes.size() << " questions, mean set size "
            << format_double(sizes.empty() ? 0.0 : pairwise_sum(sizes) / sizes.size());
  if (!losses.empty())
    std::cerr << ", mean loss " << format_double(pairwise_sum(losses) / losses.size()) << " over "
              << losses.size() << " labeled";
  std::cerr << '\n';
}

int cmd_predict(const SharedFlags& flags, const PredictArgs& args) {
  if (flags.out.empty()) throw InputError("predict: --out is required");
  const auto in = load_predict_inputs(flags, args);
  std::vector<TokenizedQuestion> questions;
  for (const auto& ex : in.data.examples) questions.push_back(ex.question);
  const auto sets = predict_batch(questions, *in.scorer, in.calibration, flags.strict, flags.workers);

  std::string out;
  std::vector<double> losses, sizes;
  for (std::size_t i = 0; i < sets.size(); ++i) {
    out += to_json(sets[i]).dump() + "\n";
    sizes.push_back(static_cast<double>(sets[i].size()));
    if (!in.data.examples[i].explanation.indices.empty())
      losses.push_back(evaluate(sets[i], in.data.examples[i]).loss);
  }
  write_file_atomic(flags.out, out);
  report_mean("predict", losses, sizes);
  return kExitOk;
}

int cmd_robust_predict(const SharedFlags& flags, const PredictArgs& args) {
  if (flags.out.empty()) throw InputError("robust-predict: --out is required");
  if (args.lexicon.empty()) throw InputError("robust-predict: --lexicon is required");
  if (args.scorer.empty())
    throw InputError("robust-predict: --scorer is required; stored scores cover only the "
                     "observed questions, not their perturbations");
  const auto in = load_predict_inputs(flags, args);
  const auto lexicon = load_lexicon(args.lexicon);
  check_provenance(*in.scorer, in.calibration, flags.strict);
  BallSpec ball;
  ball.d = args.d;
  ball.enumeration_budget = args.budget;
  ball.mode = parse_robust_mode(args.robust_mode);

  std::string out;
  std::vector<double> losses, sizes;
  std::uint64_t calls = 0, hits = 0;
  for (const auto& ex : in.data.examples) {
    const auto set = build_robust_set(ex.question, lexicon, ball, *in.scorer, in.calibration,
                                      flags.workers);
    out += to_json(set).dump() + "\n";
    sizes.push_back(static_cast<double>(set.size()));
    calls += set.stats.scorer_calls;
    hits += set.stats.cache_hits;
    // Inputs are the observed questions; their labels are read as clean.
    if (!ex.explanation.indices.empty()) losses.push_back(evaluate_robust(set, ex).loss);
  }
  write_file_atomic(flags.out, out);
  report_mean("robust-predict", losses, sizes);
  std::cerr << "scorer calls " << calls << ", cache hits " << hits << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct SimulateArgs {
  std::string config_path;
  SyntheticConfig config;
  std::vector<double> alphas;
  std::size_t trials = 500;
  bool robust = false;
  std::string report_json;
  bool check = false;
};

int cmd_simulate(const SharedFlags& flags, SimulateArgs args) {
  ExperimentPlan plan;
  if (!args.config_path.empty()) {
    std::ifstream in(args.config_path);
    if (!in) throw InputError("cannot open experiment config " + args.config_path);
    json doc;
    try {
      doc = json::parse(in);
    } catch (const json::parse_error& e) {
      throw InputError(args.config_path + ": malformed JSON: " + e.what());
    }
    plan = plan_from_json(doc);
  } else {
    plan.config = args.config;
    plan.config.validate();
    if (!args.alphas.empty()) plan.alphas = args.alphas;
    for (double a : plan.alphas) check_alpha(a);
    plan.trials = args.trials;
    plan.modes = {parse_calibration_mode(flags.mode)};
    plan.robust = {args.robust};
    plan.grid_points = flags.grid_size;
  }
  const auto reports = run_plan(plan, flags.workers);
  const std::string csv = summarize(reports);
  if (flags.out.empty())
    std::cout << csv;
  else
    write_file_atomic(flags.out, csv);
  if (!args.report_json.empty()) {
    json doc = json::array();
    for (const auto& r : reports) doc.push_back(to_json(r));
    write_file_atomic(args.report_json, doc.dump(2) + "\n");
  }
  bool ok = true;
  for (const auto& r : reports) {
    std::cerr << (r.robust ? "robust " : "plain ") << to_string(r.mode) << " alpha="
              << format_double(r.alpha) << " mean_loss=" << format_double(r.mean_loss)
              << (r.within_bound() ? " within" : " EXCEEDS") << " alpha+3SE";
    if (r.robust)
      std::cerr << " (non-robust on noisy: " << format_double(r.nonrobust_mean_loss) << ")";
    std::cerr << '\n';
    ok = ok && r.within_bound();
  }
  return (args.check && !ok) ? kExitVerification : kExitOk;
}

// ---------------------------------------------------------------------------

struct StatsArgs {
  std::string calibration;
  std::string data;
};

int cmd_stats(const SharedFlags& flags, const StatsArgs& args) {
  const auto result = load_calibration(args.calibration);
  LoadOptions load;
  load.clamp_scores = flags.clamp_scores;
  const Dataset data = load_dataset(args.data, load);

  std::vector<std::string> violations;
  std::vector<std::string> warnings;
  const double bound = adjusted_bound(result.alpha, data.size());
  const double risk = empirical_risk(data.examples, result.lambda_hat);
  const auto reference = calibrate_exact(data.examples, result.alpha);

  if (result.n != data.size())
    violations.push_back("n = " + std::to_string(result.n) + " but dataset has " +
                         std::to_string(data.size()) + " examples");
  if (result.adjusted_bound != bound)
    violations.push_back("recorded adjusted bound " + format_double(result.adjusted_bound) +
                         " != recomputed " + format_double(bound));
  if (result.feasible && !(risk <= bound))
    violations.push_back("bound violated: empirical risk " + format_double(risk) +
                         " at lambda_hat " + format_double(result.lambda_hat) + " exceeds " +
                         format_double(bound));
  if (!result.feasible) {
    if (result.lambda_hat != 1.0)
      violations.push_back("infeasible result must use lambda_hat = 1");
    if (reference.feasible)
      warnings.push_back("marked infeasible but lambda " + format_double(reference.lambda_hat) +
                         " meets the bound");
  } else if (reference.feasible && result.lambda_hat > reference.lambda_hat) {
    warnings.push_back("lambda_hat is conservative: exact minimum is " +
                       format_double(reference.lambda_hat));
  }

  std::vector<std::size_t> sizes;
  std::map<std::size_t, std::size_t> histogram;
  for (const auto& ex : data.examples) {
    const auto n_sel = build_set(ex, result.lambda_hat).size();
    sizes.push_back(n_sel);
    ++histogram[n_sel];
  }
  std::sort(sizes.begin(), sizes.end());
  double total = 0.0;
  for (auto s : sizes) total += static_cast<double>(s);
  json hist = json::object();
  for (const auto& [size, count] : histogram) hist[std::to_string(size)] = count;

  const json summary{{"lambda_hat", result.lambda_hat},
                     {"alpha", result.alpha},
                     {"n", data.size()},
                     {"adjusted_bound", bound},
                     {"empirical_risk", risk},
                     {"exact_lambda_hat", reference.lambda_hat},
                     {"set_size", {{"mean", total / static_cast<double>(sizes.size())},
                                   {"min", sizes.front()},
                                   {"median", sizes[sizes.size() / 2]},
                                   {"max", sizes.back()},
                                   {"histogram", hist}}},
                     {"warnings", warnings},
                     {"violations", violations},
                     {"verified", violations.empty()}};
  if (flags.out.empty())
    std::cout << summary.dump(2) << '\n';
  else
    write_file_atomic(flags.out, summary.dump(2) + "\n");
  for (const auto& w : warnings) warn(w);
  for (const auto& v : violations) std::cerr << "verification failure: " << v << '\n';
  return violations.empty() ? kExitOk : kExitVerification;
}

// ---------------------------------------------------------------------------

void add_shared(CLI::App* cmd, SharedFlags& f, bool calibration_flags) {
  if (calibration_flags) {
    cmd->add_option("--alpha", f.alpha, "Target risk level in (0,1)");
    cmd->add_option("--mode", f.mode, "Calibration mode: exact|grid");
    cmd->add_option("--grid-size", f.grid_size, "Uniform grid points for grid mode");
  }
  cmd->add_option("--workers", f.workers, "Worker threads");
  cmd->add_option("--cache-dir", f.cache_dir, "Score cache directory (or SCORER_CACHE_DIR)");
  cmd->add_flag("--strict", f.strict, "Fail on calibration/test scorer mismatch");
  cmd->add_flag("--clamp-scores", f.clamp_scores, "Clamp out-of-range scores into [0,1]");
  cmd->add_option("--out", f.out, "Output path");
}

void add_synthetic(CLI::App* cmd, SyntheticConfig& c) {
  cmd->add_option("--n-calibration", c.n_calibration);
  cmd->add_option("--n-test", c.n_test);
  cmd->add_option("--k-min", c.k_min);
  cmd->add_option("--k-max", c.k_max);
  cmd->add_option("--truth-fraction", c.truth_fraction);
  cmd->add_option("--sigma", c.sigma, "Oracle scorer noise level");
  cmd->add_option("--seed", c.seed);
  cmd->add_option("--fanout", c.synonym_fanout, "Synonyms per token");
  cmd->add_option("--d", c.d, "Noise budget (positions)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Distribution-free coverage for token-level explanations"};
  app.require_subcommand(1);

  SharedFlags flags;
  GenerateArgs gen;
  CalibrateArgs cal;
  PredictArgs pred;
  SimulateArgs sim;
  StatsArgs stats;

  auto* generate = app.add_subcommand("generate", "Write a synthetic calibration/test split");
  add_synthetic(generate, gen.config);
  generate->add_option("--calibration-out", gen.calibration_out)->required();
  generate->add_option("--test-out", gen.test_out)->required();
  generate->add_option("--lexicon-out", gen.lexicon_out);

  auto* calibrate = app.add_subcommand("calibrate", "Choose lambda_hat on calibration data");
  add_shared(calibrate, flags, true);
  calibrate->add_option("--data", cal.data, "Calibration JSON Lines")->required();
  calibrate->add_option("--scorer", cal.scorer, "Spec of the scorer that produced the scores");
  calibrate->add_option("--curve-out", cal.curve_out, "Risk curve CSV");

  auto add_predict = [&](CLI::App* cmd) {
    add_shared(cmd, flags, false);
    cmd->add_option("--calibration", pred.calibration, "Calibration result JSON")->required();
    cmd->add_option("--data", pred.data, "Questions JSON Lines")->required();
    cmd->add_option("--scorer", pred.scorer, "Scorer spec; stored scores when omitted");
  };
  auto* predict = app.add_subcommand("predict", "Build sets at lambda_hat");
  add_predict(predict);

  auto* robust = app.add_subcommand("robust-predict", "Build robust sets under synonym noise");
  add_predict(robust);
  robust->add_option("--lexicon", pred.lexicon, "Synonym lexicon JSON Lines")->required();
  robust->add_option("--d", pred.d, "Max perturbed positions");
  robust->add_option("--budget", pred.budget, "Max ball size for exact enumeration");
  robust->add_option("--robust-mode", pred.robust_mode, "exact|coordinatewise");

  auto* simulate = app.add_subcommand("simulate", "Monte Carlo coverage experiments");
  add_shared(simulate, flags, true);
  add_synthetic(simulate, sim.config);
  simulate->add_option("--config", sim.config_path, "JSON experiment plan");
  simulate->add_option("--alphas", sim.alphas, "Risk levels (repeatable)");
  simulate->add_option("--trials", sim.trials);
  simulate->add_flag("--robust", sim.robust, "Noisy tests with robust sets");
  simulate->add_option("--report-json", sim.report_json);
  simulate->add_flag("--check", sim.check, "Exit 3 if any mean loss exceeds alpha + 3 SE");

  auto* stats_cmd = app.add_subcommand("stats", "Re-verify a calibration result");
  add_shared(stats_cmd, flags, false);
  stats_cmd->add_option("--calibration", stats.calibration)->required();
  stats_cmd->add_option("--data", stats.data)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitInput;
  }

  try {
    if (*generate) return cmd_generate(gen);
    if (*calibrate) return cmd_calibrate(flags, cal);
    if (*predict) return cmd_predict(flags, pred);
    if (*robust) return cmd_robust_predict(flags, pred);
    if (*simulate) return cmd_simulate(flags, sim);
    if (*stats_cmd) return cmd_stats(flags, stats);
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitInput;
  } catch (const ScorerError& e) {
    std::cerr << "scorer error: " << e.what() << '\n';
    return kExitInternal;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return kExitInternal;
  }
  return kExitInternal;
}
