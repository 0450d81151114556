#pragma once

// Coverage loss, empirical risk and threshold calibration.
//
// The calibrated threshold is the smallest lambda whose mean calibration
// loss is at most alpha - (1 - alpha) / n. The empirical risk is a
// non-increasing right-continuous step function of lambda that only moves
// where some score crosses 1 - lambda, so searching those jump points
// realizes the infimum exactly. Grid mode runs the classic binary search
// over a caller-supplied ascending grid.

#include <charconv>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "expcrc/core.hpp"
#include "expcrc/sets.hpp"

namespace expcrc {

inline double coverage_loss(std::size_t covered, std::size_t truth_size) {
  return 1.0 - static_cast<double>(covered) / static_cast<double>(truth_size);
}

/// 1 - |truth ∩ set| / |truth|, by position.
inline double loss(const UncertaintySet& set, const GroundTruthExplanation& truth) {
  if (truth.indices.empty())
    throw std::invalid_argument("loss: empty ground-truth explanation");
  std::size_t covered = 0;
  for (std::size_t j : truth.indices) covered += set.contains(j) ? 1 : 0;
  return coverage_loss(covered, truth.size());
}

inline double empirical_risk(std::span<const CalibrationExample> examples,
                             double lambda) {
  if (examples.empty()) throw std::invalid_argument("empirical_risk: no examples");
  std::vector<double> losses;
  losses.reserve(examples.size());
  for (const auto& ex : examples)
    losses.push_back(loss(build_set(ex, lambda), ex.explanation));
  return pairwise_sum(losses) / static_cast<double>(examples.size());
}

inline double adjusted_bound(double alpha, std::size_t n) {
  if (!(alpha > 0.0 && alpha < 1.0))
    throw std::invalid_argument("adjusted_bound: alpha must be in (0,1)");
  if (n == 0) throw std::invalid_argument("adjusted_bound: n must be >= 1");
  return alpha - (1.0 - alpha) / static_cast<double>(n);
}

/// Smallest double lambda in [0,1] at which a token with this score enters
/// the set. Equals 1 - score up to rounding; the nudging makes it agree
/// bit-for-bit with is_selected().
inline double jump_point(double score) {
  double lambda = std::clamp(1.0 - score, 0.0, 1.0);
  while (lambda < 1.0 && !is_selected(score, lambda))
    lambda = std::nextafter(lambda, 2.0);
  while (lambda > 0.0 && is_selected(score, std::nextafter(lambda, -1.0)))
    lambda = std::nextafter(lambda, -1.0);
  return lambda;
}

/// Sorted, deduplicated jump points of every observed score, plus 0 and 1.
inline std::vector<double> critical_thresholds(
    std::span<const CalibrationExample> examples) {
  if (examples.empty())
    throw std::invalid_argument("critical_thresholds: no examples");
  std::vector<double> out{0.0, 1.0};
  for (const auto& ex : examples)
    for (double s : ex.scores.values) out.push_back(jump_point(s));
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

inline std::vector<double> uniform_grid(std::size_t points = 1001) {
  if (points < 2) return {1.0};
  std::vector<double> grid(points);
  for (std::size_t i = 0; i < points; ++i)
    grid[i] = static_cast<double>(i) / static_cast<double>(points - 1);
  grid.back() = 1.0;
  return grid;
}

// ---------------------------------------------------------------------------

enum class CalibrationMode { exact, grid };

inline std::string to_string(CalibrationMode m) {
  return m == CalibrationMode::exact ? "exact" : "grid";
}

inline CalibrationMode parse_calibration_mode(const std::string& s) {
  if (s == "exact") return CalibrationMode::exact;
  if (s == "grid") return CalibrationMode::grid;
  throw InputError("unknown calibration mode '" + s + "' (expected exact|grid)");
}

struct CalibrationResult {
  double lambda_hat = 1.0;
  double alpha = 0.1;
  std::size_t n = 0;
  double adjusted_bound = 0.0;
  bool feasible = false;
  CalibrationMode mode = CalibrationMode::exact;
  std::optional<std::size_t> grid_size;
  double empirical_risk = 0.0;  // at lambda_hat
  std::string scorer = "stored";

  friend bool operator==(const CalibrationResult&, const CalibrationResult&) = default;
};

namespace detail {
inline void check_calibration_inputs(std::span<const CalibrationExample> examples,
                                     double alpha) {
  if (examples.empty()) throw InputError("calibrate: no calibration examples");
  if (!(alpha > 0.0 && alpha < 1.0)) throw InputError("calibrate: alpha must be in (0,1)");
}
}  // namespace detail

/// Sweeps the critical thresholds upward, tracking per-example coverage
/// counts, and stops at the first one meeting the adjusted bound. Falls back
/// to lambda = 1 with feasible = false when none does.
inline CalibrationResult calibrate_exact(std::span<const CalibrationExample> examples,
                                         double alpha) {
  detail::check_calibration_inputs(examples, alpha);
  const std::size_t n = examples.size();
  CalibrationResult result;
  result.alpha = alpha;
  result.n = n;
  result.adjusted_bound = adjusted_bound(alpha, n);
  result.mode = CalibrationMode::exact;

  struct Event {
    double lambda;
    std::size_t example;
  };
  std::vector<Event> events;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& ex = examples[i];
    if (ex.explanation.indices.empty())
      throw InputError("calibrate: example '" + ex.question.id + "' has no explanation");
    for (std::size_t j : ex.explanation.indices)
      events.push_back({jump_point(ex.scores.values.at(j)), i});
  }
  std::sort(events.begin(), events.end(),
            [](const Event& a, const Event& b) { return a.lambda < b.lambda; });

  std::vector<std::size_t> covered(n, 0);
  std::vector<double> losses(n);
  for (std::size_t i = 0; i < n; ++i)
    losses[i] = coverage_loss(0, examples[i].explanation.size());

  std::size_t next = 0;
  for (double t : critical_thresholds(examples)) {
    for (; next < events.size() && events[next].lambda <= t; ++next) {
      const std::size_t i = events[next].example;
      losses[i] = coverage_loss(++covered[i], examples[i].explanation.size());
    }
    const double risk = pairwise_sum(losses) / static_cast<double>(n);
    if (risk <= result.adjusted_bound) {
      result.lambda_hat = t;
      result.feasible = true;
      result.empirical_risk = risk;
      return result;
    }
  }
  result.lambda_hat = 1.0;
  result.feasible = false;
  result.empirical_risk = empirical_risk(examples, 1.0);
  return result;
}

inline void validate_grid(std::span<const double> grid) {
  if (grid.empty()) throw InputError("calibrate: empty threshold grid");
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (!(grid[i] >= 0.0 && grid[i] <= 1.0))
      throw InputError("calibrate: grid value outside [0,1]");
    if (i > 0 && !(grid[i] > grid[i - 1]))
      throw InputError("calibrate: grid must be strictly ascending");
  }
  if (grid.back() != 1.0) throw InputError("calibrate: grid must end at 1");
}

/// Binary search for the smallest grid index whose risk meets the adjusted
/// bound (low/high/mid bisection over the ascending grid).
inline CalibrationResult calibrate_grid(std::span<const CalibrationExample> examples,
                                        double alpha, std::span<const double> grid) {
  detail::check_calibration_inputs(examples, alpha);
  validate_grid(grid);
  CalibrationResult result;
  result.alpha = alpha;
  result.n = examples.size();
  result.adjusted_bound = adjusted_bound(alpha, examples.size());
  result.mode = CalibrationMode::grid;
  result.grid_size = grid.size();

  std::size_t low = 0;
  std::size_t high = grid.size() - 1;
  while (low < high) {
    const std::size_t mid = (low + high) / 2;
    if (empirical_risk(examples, grid[mid]) <= result.adjusted_bound)
      high = mid;
    else
      low = mid + 1;
  }
  const double risk = empirical_risk(examples, grid[low]);
  if (risk <= result.adjusted_bound) {
    result.lambda_hat = grid[low];
    result.feasible = true;
    result.empirical_risk = risk;
  } else {
    result.lambda_hat = 1.0;
    result.feasible = false;
    result.empirical_risk = empirical_risk(examples, 1.0);
  }
  return result;
}

inline CalibrationResult calibrate(std::span<const CalibrationExample> examples,
                                   double alpha, CalibrationMode mode,
                                   std::size_t grid_points = 1001) {
  if (mode == CalibrationMode::exact) return calibrate_exact(examples, alpha);
  const auto grid = uniform_grid(grid_points);
  return calibrate_grid(examples, alpha, grid);
}

// ---------------------------------------------------------------------------
// Risk curves and serialization

struct RiskCurve {
  std::vector<double> thresholds;
  std::vector<double> risks;
  std::size_t n = 0;
};

inline RiskCurve risk_curve(std::span<const CalibrationExample> examples,
                            std::span<const double> grid) {
  RiskCurve curve;
  curve.n = examples.size();
  curve.thresholds.assign(grid.begin(), grid.end());
  curve.risks.reserve(grid.size());
  for (double lambda : grid) curve.risks.push_back(empirical_risk(examples, lambda));
  return curve;
}

/// Shortest representation that round-trips.
inline std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, end);
}

inline std::string to_csv(const RiskCurve& curve) {
  std::string out = "lambda,risk,n\n";
  for (std::size_t i = 0; i < curve.thresholds.size(); ++i) {
    out += format_double(curve.thresholds[i]);
    out += ',';
    out += format_double(curve.risks[i]);
    out += ',';
    out += std::to_string(curve.n);
    out += '\n';
  }
  return out;
}

inline json to_json(const CalibrationResult& r) {
  json doc;
  doc["lambda_hat"] = r.lambda_hat;
  doc["alpha"] = r.alpha;
  doc["n"] = r.n;
  doc["adjusted_bound"] = r.adjusted_bound;
  doc["feasible"] = r.feasible;
  doc["mode"] = to_string(r.mode);
  doc["grid_size"] = r.grid_size ? json(*r.grid_size) : json(nullptr);
  doc["empirical_risk"] = r.empirical_risk;
  doc["scorer"] = r.scorer;
  return doc;
}

inline CalibrationResult calibration_from_json(const json& doc) {
  try {
    CalibrationResult r;
    r.lambda_hat = doc.at("lambda_hat").get<double>();
    r.alpha = doc.at("alpha").get<double>();
    r.n = doc.at("n").get<std::size_t>();
    r.adjusted_bound = doc.at("adjusted_bound").get<double>();
    r.feasible = doc.at("feasible").get<bool>();
    r.mode = parse_calibration_mode(doc.at("mode").get<std::string>());
    if (doc.contains("grid_size") && !doc["grid_size"].is_null())
      r.grid_size = doc["grid_size"].get<std::size_t>();
    r.empirical_risk = doc.value("empirical_risk", 0.0);
    r.scorer = doc.value("scorer", std::string("stored"));
    if (!(r.lambda_hat >= 0.0 && r.lambda_hat <= 1.0))
      throw InputError("lambda_hat outside [0,1]");
    if (!(r.alpha > 0.0 && r.alpha < 1.0)) throw InputError("alpha outside (0,1)");
    return r;
  } catch (const json::exception& e) {
    throw InputError(std::string("calibration result: ") + e.what());
  }
}

inline CalibrationResult load_calibration(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open calibration result " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw InputError(path.string() + ": malformed JSON: " + e.what());
  }
  return calibration_from_json(doc);
}

}  // namespace expcrc
