#pragma once

// Importance scorers behind one contract, plus the content-addressed keys
// and caches that make repeated scoring of perturbed questions cheap.

#include <cmath>
#include <filesystem>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <random>
#include <string>
#include <unordered_map>

#include <openssl/evp.h>

#include "expcrc/core.hpp"

namespace expcrc {

/// Upstream or configuration failure of a scorer.
class ScorerError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Specs

enum class ScorerKind { oracle_noise, uniform_random, constant, remote };

inline std::string to_string(ScorerKind kind) {
  switch (kind) {
    case ScorerKind::oracle_noise: return "oracle_noise";
    case ScorerKind::uniform_random: return "uniform_random";
    case ScorerKind::constant: return "constant";
    case ScorerKind::remote: return "remote";
  }
  return "unknown";
}

struct ScorerSpec {
  ScorerKind kind = ScorerKind::constant;
  double sigma = 0.0;
  double constant = 0.5;
  std::uint64_t seed = 0;
  std::string endpoint;
  int timeout_ms = 30000;
  int max_retries = 3;
  int max_in_flight = 4;

  /// Canonical name recorded in calibration provenance. Only parameters that
  /// change the produced scores take part.
  std::string identity() const {
    std::ostringstream os;
    os.precision(17);
    os << to_string(kind) << ':';
    switch (kind) {
      case ScorerKind::oracle_noise: os << "seed=" << seed << ",sigma=" << sigma; break;
      case ScorerKind::uniform_random: os << "seed=" << seed; break;
      case ScorerKind::constant: os << "c=" << constant; break;
      case ScorerKind::remote: os << "endpoint=" << endpoint; break;
    }
    return os.str();
  }

  void validate() const {
    if (kind == ScorerKind::oracle_noise && !(sigma >= 0.0))
      throw InputError("scorer: sigma must be >= 0");
    if (kind == ScorerKind::constant && !(constant >= 0.0 && constant <= 1.0))
      throw InputError("scorer: constant must be in [0,1]");
    if (kind == ScorerKind::remote) {
      if (endpoint.empty()) throw InputError("scorer: remote needs endpoint=");
      if (max_retries < 0 || timeout_ms <= 0 || max_in_flight <= 0)
        throw InputError("scorer: invalid remote limits");
    }
  }
};

/// Parses "kind[:key=value,...]", e.g. "oracle_noise:sigma=0.3,seed=7" or
/// "remote:endpoint=http://host:8080/score,timeout_ms=5000".
inline ScorerSpec parse_scorer_spec(const std::string& text) {
  ScorerSpec spec;
  const auto colon = text.find(':');
  const std::string kind = text.substr(0, colon);
  if (kind == "oracle_noise") spec.kind = ScorerKind::oracle_noise;
  else if (kind == "uniform_random") spec.kind = ScorerKind::uniform_random;
  else if (kind == "constant") spec.kind = ScorerKind::constant;
  else if (kind == "remote") spec.kind = ScorerKind::remote;
  else throw InputError("scorer: unknown kind '" + kind + "'");

  if (colon != std::string::npos) {
    std::stringstream params(text.substr(colon + 1));
    std::string kv;
    while (std::getline(params, kv, ',')) {
      if (kv.empty()) continue;
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw InputError("scorer: bad parameter '" + kv + "'");
      const std::string key = kv.substr(0, eq);
      const std::string value = kv.substr(eq + 1);
      try {
        if (key == "sigma") spec.sigma = std::stod(value);
        else if (key == "c") spec.constant = std::stod(value);
        else if (key == "seed") spec.seed = std::stoull(value);
        else if (key == "endpoint") spec.endpoint = value;
        else if (key == "timeout_ms") spec.timeout_ms = std::stoi(value);
        else if (key == "max_retries") spec.max_retries = std::stoi(value);
        else if (key == "max_in_flight") spec.max_in_flight = std::stoi(value);
        else throw InputError("scorer: unknown parameter '" + key + "'");
      } catch (const std::logic_error&) {
        throw InputError("scorer: bad value for '" + key + "'");
      }
    }
  }
  spec.validate();
  return spec;
}

// ---------------------------------------------------------------------------
// Cache keys

struct ScoreCacheKey {
  std::string hex;  // SHA-256, lowercase

  friend bool operator==(const ScoreCacheKey&, const ScoreCacheKey&) = default;
};

struct ScoreCacheKeyHash {
  std::size_t operator()(const ScoreCacheKey& k) const {
    return std::hash<std::string>{}(k.hex);
  }
};

inline std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(),
                 nullptr) != 1)
    throw std::runtime_error("SHA-256 failed");
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out(2 * len, '0');
  for (unsigned int i = 0; i < len; ++i) {
    out[2 * i] = kHex[digest[i] >> 4];
    out[2 * i + 1] = kHex[digest[i] & 0xf];
  }
  return out;
}

/// Digest of (prompt, tokens, scorer identity). Fields are length-prefixed so
/// that token boundaries cannot be confused.
inline ScoreCacheKey make_cache_key(const std::string& prompt,
                                    std::span<const std::string> tokens,
                                    const std::string& scorer_identity) {
  std::string buf;
  auto put = [&buf](std::string_view s) {
    buf += std::to_string(s.size());
    buf += ':';
    buf += s;
  };
  put(scorer_identity);
  put(prompt);
  buf += std::to_string(tokens.size());
  buf += '#';
  for (const auto& t : tokens) put(t);
  return {sha256_hex(buf)};
}

inline ScoreCacheKey make_cache_key(const TokenizedQuestion& q,
                                    const std::string& scorer_identity) {
  return make_cache_key(q.prompt, q.tokens, scorer_identity);
}

// ---------------------------------------------------------------------------
// Scorer contract

class Scorer {
 public:
  virtual ~Scorer() = default;

  /// One score in [0,1] per token; a pure function of the question.
  virtual ImportanceScores score(const TokenizedQuestion& question) const = 0;
  virtual std::string identity() const = 0;

  /// True when the score at position j depends only on (j, token at j).
  virtual bool context_free() const { return false; }
};

/// Minimal 64-bit engine for per-token streams; seeding is O(1), unlike the
/// Mersenne twister.
class SplitMix64 {
 public:
  using result_type = std::uint64_t;
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}
  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }
  result_type operator()() {
    state_ += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

 private:
  std::uint64_t state_;
};

/// Stream seed for the token at position j of a question: depends on the
/// question id, the position and the token string, nothing else.
inline std::uint64_t token_stream_seed(std::uint64_t seed, const std::string& id,
                                       std::size_t j, const std::string& token) {
  std::uint64_t h = hash_bytes(id);
  h = hash_bytes(std::string_view("\x1f", 1), h);
  h = hash_bytes(token, h);
  return derive_seed(derive_seed(seed, h), j);
}

/// Indicator of the ground truth plus clamped Gaussian noise of scale sigma.
inline ImportanceScores oracle_noise_score(const GroundTruthExplanation& truth,
                                           const TokenizedQuestion& question,
                                           double sigma, std::uint64_t seed) {
  ImportanceScores out;
  const std::size_t k = question.tokens.size();
  out.values.resize(k);
  for (std::size_t j = 0; j < k; ++j) {
    const double base = truth.contains(j) ? 1.0 : 0.0;
    double noise = 0.0;
    if (sigma > 0.0) {
      SplitMix64 rng(token_stream_seed(seed, question.id, j, question.tokens[j]));
      std::normal_distribution<double> gauss(0.0, sigma);
      noise = gauss(rng);
    }
    out.values[j] = std::clamp(base + noise, 0.0, 1.0);
  }
  return out;
}

class ConstantScorer final : public Scorer {
 public:
  explicit ConstantScorer(double c) : c_(c) {
    if (!(c >= 0.0 && c <= 1.0)) throw InputError("constant scorer: c must be in [0,1]");
  }
  ImportanceScores score(const TokenizedQuestion& q) const override {
    return {std::vector<double>(q.tokens.size(), c_)};
  }
  std::string identity() const override {
    ScorerSpec s;
    s.kind = ScorerKind::constant;
    s.constant = c_;
    return s.identity();
  }
  bool context_free() const override { return true; }

 private:
  double c_;
};

using TruthLookup = std::unordered_map<std::string, GroundTruthExplanation>;

inline std::shared_ptr<const TruthLookup> make_truth_lookup(const Dataset& data) {
  auto lookup = std::make_shared<TruthLookup>();
  for (const auto& ex : data.examples)
    (*lookup)[ex.question.id] = ex.explanation;
  return lookup;
}

/// Synthetic scorer that knows the annotations (looked up by question id)
/// and blurs them with deterministic per-token noise.
class OracleNoiseScorer final : public Scorer {
 public:
  OracleNoiseScorer(std::shared_ptr<const TruthLookup> truth, double sigma,
                    std::uint64_t seed)
      : truth_(std::move(truth)), sigma_(sigma), seed_(seed) {
    if (!(sigma >= 0.0)) throw InputError("oracle_noise scorer: sigma must be >= 0");
    if (!truth_) throw InputError("oracle_noise scorer: no ground truth supplied");
  }

  ImportanceScores score(const TokenizedQuestion& q) const override {
    const auto it = truth_->find(q.id);
    if (it == truth_->end())
      throw ScorerError("oracle_noise scorer: no ground truth for question '" + q.id + "'");
    return oracle_noise_score(it->second, q, sigma_, seed_);
  }
  std::string identity() const override {
    ScorerSpec s;
    s.kind = ScorerKind::oracle_noise;
    s.sigma = sigma_;
    s.seed = seed_;
    return s.identity();
  }
  bool context_free() const override { return true; }

 private:
  std::shared_ptr<const TruthLookup> truth_;
  double sigma_;
  std::uint64_t seed_;
};

/// Uniform scores keyed on the whole question digest: any token change
/// reshuffles every position, so this scorer is context-dependent.
class UniformRandomScorer final : public Scorer {
 public:
  explicit UniformRandomScorer(std::uint64_t seed) : seed_(seed) {}

  ImportanceScores score(const TokenizedQuestion& q) const override {
    const auto key = make_cache_key(q, identity());
    const std::uint64_t qseed = derive_seed(seed_, hash_bytes(key.hex));
    ImportanceScores out;
    out.values.reserve(q.tokens.size());
    for (std::size_t j = 0; j < q.tokens.size(); ++j) {
      SplitMix64 rng(derive_seed(qseed, j));
      out.values.push_back(std::uniform_real_distribution<double>(0.0, 1.0)(rng));
    }
    return out;
  }
  std::string identity() const override {
    ScorerSpec s;
    s.kind = ScorerKind::uniform_random;
    s.seed = seed_;
    return s.identity();
  }

 private:
  std::uint64_t seed_;
};

/// Scores stored alongside the data, looked up by question id. Used when the
/// dataset already carries scores from an offline scorer.
class StoredScorer final : public Scorer {
 public:
  explicit StoredScorer(const Dataset& data) {
    for (const auto& ex : data.examples)
      stored_.emplace(ex.question.id, std::make_pair(ex.question.tokens, ex.scores));
  }
  ImportanceScores score(const TokenizedQuestion& q) const override {
    const auto it = stored_.find(q.id);
    if (it == stored_.end() || it->second.first != q.tokens)
      throw ScorerError("stored scorer: no stored scores for question '" + q.id +
                        "' with these tokens");
    return it->second.second;
  }
  std::string identity() const override { return "stored"; }

 private:
  std::unordered_map<std::string,
                     std::pair<std::vector<std::string>, ImportanceScores>> stored_;
};

/// Checks the scorer output contract; throws ScorerError on violation.
inline void check_scores(const ImportanceScores& s, const TokenizedQuestion& q,
                         const std::string& who) {
  if (s.size() != q.tokens.size())
    throw ScorerError(who + ": length mismatch (" + std::to_string(s.size()) +
                      " scores for " + std::to_string(q.tokens.size()) + " tokens)");
  for (double v : s.values)
    if (!(v >= 0.0 && v <= 1.0))
      throw ScorerError(who + ": score " + std::to_string(v) + " outside [0,1]");
}

// ---------------------------------------------------------------------------
// Caches

/// In-memory memo in front of another scorer. Concurrent requests for the
/// same key may both compute; results are identical because scorers are pure.
class MemoScorer final : public Scorer {
 public:
  explicit MemoScorer(const Scorer& inner) : inner_(inner), identity_(inner.identity()) {}

  ImportanceScores score(const TokenizedQuestion& q) const override {
    const auto key = make_cache_key(q, identity_);
    {
      std::lock_guard lock(mutex_);
      if (auto it = memo_.find(key); it != memo_.end()) {
        ++hits_;
        return it->second;
      }
    }
    auto scores = inner_.score(q);
    std::lock_guard lock(mutex_);
    ++calls_;
    memo_.emplace(key, scores);
    return scores;
  }
  std::string identity() const override { return identity_; }
  bool context_free() const override { return inner_.context_free(); }

  std::uint64_t calls() const { std::lock_guard l(mutex_); return calls_; }
  std::uint64_t hits() const { std::lock_guard l(mutex_); return hits_; }

 private:
  const Scorer& inner_;
  std::string identity_;
  mutable std::mutex mutex_;
  mutable std::unordered_map<ScoreCacheKey, ImportanceScores, ScoreCacheKeyHash> memo_;
  mutable std::uint64_t calls_ = 0;
  mutable std::uint64_t hits_ = 0;
};

/// Persistent key -> scores store: one JSON file per key. Writers publish by
/// rename, so readers see either nothing or a complete entry. I/O failures
/// are reported as warnings and treated as misses.
class DiskScoreCache {
 public:
  explicit DiskScoreCache(std::filesystem::path dir) : dir_(std::move(dir)) {
    std::error_code ec;
    std::filesystem::create_directories(dir_, ec);
    if (ec) warn("score cache: cannot create " + dir_.string() + ": " + ec.message());
  }

  const std::filesystem::path& directory() const { return dir_; }

  std::optional<ImportanceScores> get(const ScoreCacheKey& key) const {
    const auto path = entry_path(key);
    std::error_code ec;
    if (!std::filesystem::exists(path, ec)) return std::nullopt;
    try {
      std::ifstream in(path);
      if (!in) throw std::runtime_error("unreadable");
      const json doc = json::parse(in);
      ImportanceScores s;
      s.values = doc.at("scores").get<std::vector<double>>();
      return s;
    } catch (const std::exception& e) {
      warn("score cache: ignoring entry " + path.string() + ": " + e.what());
      return std::nullopt;
    }
  }

  void put(const ScoreCacheKey& key, const ImportanceScores& scores) const {
    try {
      write_file_atomic(entry_path(key), json{{"scores", scores.values}}.dump());
    } catch (const std::exception& e) {
      warn(std::string("score cache: write failed, continuing uncached: ") + e.what());
    }
  }

 private:
  std::filesystem::path entry_path(const ScoreCacheKey& key) const {
    return dir_ / (key.hex + ".json");
  }
  std::filesystem::path dir_;
};

}  // namespace expcrc
