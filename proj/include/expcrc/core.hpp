#pragma once

// Domain types, validation, JSON Lines ingestion and dataset splitting.

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <mutex>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

namespace expcrc {

using json = nlohmann::json;

inline constexpr const char* kDefaultPrompt =
    "Read the question and assign each word an importance score between 0 "
    "and 1 that reflects how essential the word is for answering it. Reply "
    "with a JSON object {\"scores\": [...]} holding exactly one score per "
    "token, in token order, then give your final answer.";

/// Malformed or schema-violating input. The CLI maps this to exit code 2.
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Warnings

using WarningHandler = std::function<void(const std::string&)>;

namespace detail {
inline WarningHandler& warning_handler() {
  static WarningHandler handler = [](const std::string& msg) {
    std::cerr << "warning: " << msg << '\n';
  };
  return handler;
}
inline std::mutex& warning_mutex() {
  static std::mutex m;
  return m;
}
}  // namespace detail

/// Replaces the process-wide warning sink and returns the previous one.
inline WarningHandler set_warning_handler(WarningHandler handler) {
  std::lock_guard lock(detail::warning_mutex());
  return std::exchange(detail::warning_handler(), std::move(handler));
}

inline void warn(const std::string& msg) {
  std::lock_guard lock(detail::warning_mutex());
  if (detail::warning_handler()) detail::warning_handler()(msg);
}

// ---------------------------------------------------------------------------
// Domain types

struct TokenizedQuestion {
  std::string id;
  std::vector<std::string> tokens;
  std::string prompt = kDefaultPrompt;

  std::size_t size() const { return tokens.size(); }
  friend bool operator==(const TokenizedQuestion&,
                         const TokenizedQuestion&) = default;
};

/// One score per token position, each in [0, 1].
struct ImportanceScores {
  std::vector<double> values;

  std::size_t size() const { return values.size(); }
  double operator[](std::size_t j) const { return values[j]; }
  friend bool operator==(const ImportanceScores&,
                         const ImportanceScores&) = default;
};

/// Annotated explanation as token positions of the clean question. Kept
/// sorted and free of duplicates by the loader.
struct GroundTruthExplanation {
  std::vector<std::size_t> indices;

  std::size_t size() const { return indices.size(); }
  bool contains(std::size_t j) const {
    return std::binary_search(indices.begin(), indices.end(), j);
  }
  friend bool operator==(const GroundTruthExplanation&,
                         const GroundTruthExplanation&) = default;
};

struct CalibrationExample {
  TokenizedQuestion question;
  ImportanceScores scores;
  GroundTruthExplanation explanation;
  std::optional<std::string> answer;

  friend bool operator==(const CalibrationExample&,
                         const CalibrationExample&) = default;
};

struct Dataset {
  std::vector<CalibrationExample> examples;
  std::string source_path;

  std::size_t size() const { return examples.size(); }
  bool empty() const { return examples.empty(); }
};

// ---------------------------------------------------------------------------
// Validation

struct ValidationVerdict {
  std::vector<std::string> violations;

  bool ok() const { return violations.empty(); }
  std::string message() const {
    std::string out;
    for (std::size_t i = 0; i < violations.size(); ++i) {
      if (i) out += "; ";
      out += violations[i];
    }
    return out;
  }
};

/// Which parts of a record must be present. Prediction inputs may arrive
/// without labels, or without scores when a scorer is supplied.
struct ValidationOptions {
  bool require_scores = true;
  bool require_explanation = true;
};

/// Collects every invariant violation of `example`; never throws.
inline ValidationVerdict validate_example(const CalibrationExample& example,
                                          ValidationOptions opts = {}) {
  ValidationVerdict v;
  const auto& q = example.question;
  const std::size_t k = q.tokens.size();
  if (k == 0) v.violations.push_back("tokens: empty question");
  for (std::size_t j = 0; j < k; ++j) {
    if (q.tokens[j].empty())
      v.violations.push_back("tokens[" + std::to_string(j) + "]: empty token");
  }

  const auto& s = example.scores.values;
  if (opts.require_scores || !s.empty()) {
    if (s.size() != k) {
      v.violations.push_back("scores: length mismatch (" +
                             std::to_string(s.size()) + " scores for " +
                             std::to_string(k) + " tokens)");
    }
    for (std::size_t j = 0; j < s.size(); ++j) {
      // Written so that NaN also fails.
      if (!(s[j] >= 0.0 && s[j] <= 1.0)) {
        std::ostringstream os;
        os << "scores[" << j << "]: value " << s[j] << " outside [0,1]";
        v.violations.push_back(os.str());
      }
    }
  }

  const auto& e = example.explanation.indices;
  if (opts.require_explanation && e.empty())
    v.violations.push_back("explanation_indices: empty ground-truth explanation");
  for (std::size_t i = 0; i < e.size(); ++i) {
    if (e[i] >= k) {
      v.violations.push_back("explanation_indices: index " +
                             std::to_string(e[i]) + " out of range for " +
                             std::to_string(k) + " tokens");
    }
    if (i > 0 && e[i] <= e[i - 1]) {
      v.violations.push_back(
          "explanation_indices: indices must be strictly increasing (duplicate "
          "or unsorted at position " + std::to_string(i) + ")");
    }
  }
  return v;
}

// ---------------------------------------------------------------------------
// JSON Lines I/O

struct LoadOptions {
  bool clamp_scores = false;
  ValidationOptions validation = {};
};

namespace detail {

[[noreturn]] inline void record_error(std::size_t line, const std::string& id,
                                      const std::string& what) {
  std::string where = "line " + std::to_string(line);
  if (!id.empty()) where += " (id \"" + id + "\")";
  throw InputError(where + ": " + what);
}

inline CalibrationExample parse_record(const std::string& text,
                                       std::size_t line,
                                       const LoadOptions& opts) {
  json rec;
  try {
    rec = json::parse(text);
  } catch (const json::parse_error& e) {
    record_error(line, "", std::string("malformed JSON: ") + e.what());
  }
  if (!rec.is_object()) record_error(line, "", "record is not a JSON object");

  CalibrationExample ex;
  auto& id = ex.question.id;
  if (!rec.contains("id") || !rec["id"].is_string())
    record_error(line, "", "field id: missing or not a string");
  id = rec["id"].get<std::string>();

  if (!rec.contains("tokens") || !rec["tokens"].is_array())
    record_error(line, id, "field tokens: missing or not an array");
  for (const auto& t : rec["tokens"]) {
    if (!t.is_string()) record_error(line, id, "field tokens: non-string token");
    ex.question.tokens.push_back(t.get<std::string>());
  }

  if (rec.contains("prompt")) {
    if (!rec["prompt"].is_string())
      record_error(line, id, "field prompt: not a string");
    ex.question.prompt = rec["prompt"].get<std::string>();
  }

  if (rec.contains("scores")) {
    if (!rec["scores"].is_array())
      record_error(line, id, "field scores: not an array");
    for (const auto& s : rec["scores"]) {
      if (!s.is_number()) record_error(line, id, "field scores: non-numeric score");
      double value = s.get<double>();
      if (opts.clamp_scores) value = std::clamp(value, 0.0, 1.0);
      ex.scores.values.push_back(value);
    }
  } else if (opts.validation.require_scores) {
    record_error(line, id, "field scores: missing");
  }

  if (rec.contains("explanation_indices")) {
    if (!rec["explanation_indices"].is_array())
      record_error(line, id, "field explanation_indices: not an array");
    for (const auto& i : rec["explanation_indices"]) {
      if (!i.is_number_integer() || i.get<std::int64_t>() < 0)
        record_error(line, id,
                     "field explanation_indices: not a non-negative integer");
      ex.explanation.indices.push_back(i.get<std::size_t>());
    }
  } else if (opts.validation.require_explanation) {
    record_error(line, id, "field explanation_indices: missing");
  }

  if (rec.contains("answer") && !rec["answer"].is_null()) {
    if (!rec["answer"].is_string())
      record_error(line, id, "field answer: not a string");
    ex.answer = rec["answer"].get<std::string>();
  }

  auto verdict = validate_example(ex, opts.validation);
  if (!verdict.ok()) record_error(line, id, verdict.message());
  return ex;
}

}  // namespace detail

inline Dataset read_dataset(std::istream& in, std::string source,
                            const LoadOptions& opts = {}) {
  Dataset data;
  data.source_path = std::move(source);
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    data.examples.push_back(detail::parse_record(text, line, opts));
  }
  if (data.examples.empty())
    throw InputError(data.source_path + ": no records (empty dataset)");
  return data;
}

/// Loads a JSON Lines dataset; every record is validated and file order is
/// preserved. Throws InputError naming the line on the first bad record.
inline Dataset load_dataset(const std::filesystem::path& path,
                            const LoadOptions& opts = {}) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open dataset " + path.string());
  return read_dataset(in, path.string(), opts);
}

inline json to_json(const CalibrationExample& ex) {
  json rec;
  rec["id"] = ex.question.id;
  rec["tokens"] = ex.question.tokens;
  if (!ex.scores.values.empty()) rec["scores"] = ex.scores.values;
  rec["explanation_indices"] = ex.explanation.indices;
  if (ex.answer) rec["answer"] = *ex.answer;
  if (ex.question.prompt != kDefaultPrompt) rec["prompt"] = ex.question.prompt;
  return rec;
}

inline void write_dataset(std::ostream& out, const Dataset& data) {
  for (const auto& ex : data.examples) out << to_json(ex).dump() << '\n';
}

/// Writes `contents` to a sibling temporary file and renames it into place,
/// so readers never observe a truncated file.
inline void write_file_atomic(const std::filesystem::path& path,
                              const std::string& contents) {
  static std::atomic<std::uint64_t> counter{0};
  auto tmp = path;
  tmp += ".tmp." + std::to_string(counter++);
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << contents;
    out.flush();
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw std::runtime_error("cannot rename into " + path.string());
  }
}

inline void save_dataset(const std::filesystem::path& path,
                         const Dataset& data) {
  std::ostringstream os;
  write_dataset(os, data);
  write_file_atomic(path, os.str());
}

// ---------------------------------------------------------------------------
// Splitting

/// Shuffles with a seeded permutation, then cuts. The first element holds
/// round(fraction * n) examples.
inline std::pair<Dataset, Dataset> split_dataset(const Dataset& data,
                                                 double calibration_fraction,
                                                 std::uint64_t seed) {
  if (data.empty()) throw InputError("split_dataset: empty dataset");
  if (!(calibration_fraction > 0.0 && calibration_fraction < 1.0))
    throw InputError("split_dataset: calibration fraction must be in (0,1)");
  const std::size_t n = data.size();
  const auto n_cal = static_cast<std::size_t>(
      std::llround(calibration_fraction * static_cast<double>(n)));
  if (n_cal == 0 || n_cal >= n)
    throw InputError("split_dataset: fraction " +
                     std::to_string(calibration_fraction) + " on " +
                     std::to_string(n) + " examples leaves a side empty");

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  Dataset cal, test;
  cal.source_path = data.source_path + "#calibration";
  test.source_path = data.source_path + "#test";
  cal.examples.reserve(n_cal);
  test.examples.reserve(n - n_cal);
  for (std::size_t i = 0; i < n; ++i)
    (i < n_cal ? cal : test).examples.push_back(data.examples[order[i]]);
  return {std::move(cal), std::move(test)};
}

// ---------------------------------------------------------------------------
// Small numeric and threading helpers shared by the other headers.

/// Pairwise summation; the result depends only on the order of `values`.
inline double pairwise_sum(std::span<const double> values) {
  if (values.size() <= 8) {
    double s = 0.0;
    for (double v : values) s += v;
    return s;
  }
  const std::size_t half = values.size() / 2;
  return pairwise_sum(values.first(half)) + pairwise_sum(values.subspan(half));
}

/// Mixes a 64-bit value (splitmix64 finalizer).
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// FNV-1a over bytes, folded into `h`. Stable across platforms.
inline std::uint64_t hash_bytes(std::string_view bytes,
                                std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index) {
  return mix64(mix64(master) ^ (index * 0xd1b54a32d192ed03ULL));
}

/// Runs fn(i) for i in [0, n) on up to `workers` threads. Exceptions from
/// workers are rethrown (first one wins).
template <class Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn&& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  {
    std::vector<std::jthread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (;;) {
          const std::size_t i = next.fetch_add(1);
          if (i >= n) return;
          try {
            fn(i);
          } catch (...) {
            std::lock_guard lock(error_mutex);
            if (!error) error = std::current_exception();
            next = n;
          }
        }
      });
    }
  }
  if (error) std::rethrow_exception(error);
}

}  // namespace expcrc
