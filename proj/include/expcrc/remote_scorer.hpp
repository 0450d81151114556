#pragma once

// HTTP-backed scorer and the ScorerSpec factory.
//
// Wire format: POST <endpoint> with {"prompt": "...", "tokens": [...]},
// reply {"scores": [...]}. The bearer token comes from SCORER_API_KEY.
// Anything other than a JSON score array of the right length and range is
// an error; free-text replies are not parsed.

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <memory>
#include <optional>
#include <semaphore>
#include <string>
#include <thread>

#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
#define CPPHTTPLIB_OPENSSL_SUPPORT
#endif
#include <httplib.h>

#include "expcrc/scorer.hpp"

namespace expcrc {

inline constexpr const char* kApiKeyEnv = "SCORER_API_KEY";
inline constexpr const char* kCacheDirEnv = "SCORER_CACHE_DIR";

struct Endpoint {
  std::string origin;  // scheme://host[:port]
  std::string path;    // starts with '/'
};

inline Endpoint parse_endpoint(const std::string& url) {
  const auto scheme = url.find("://");
  if (scheme == std::string::npos) throw InputError("remote scorer: endpoint needs a scheme: " + url);
  const auto slash = url.find('/', scheme + 3);
  if (slash == std::string::npos) return {url, "/"};
  return {url.substr(0, slash), url.substr(slash)};
}

class RemoteScorer final : public Scorer {
 public:
  RemoteScorer(ScorerSpec spec, std::optional<std::filesystem::path> cache_dir = std::nullopt)
      : spec_(std::move(spec)),
        identity_(spec_.identity()),
        endpoint_(parse_endpoint(spec_.endpoint)),
        in_flight_(spec_.max_in_flight) {
    spec_.validate();
    if (const char* key = std::getenv(kApiKeyEnv)) api_key_ = key;
    if (cache_dir) cache_.emplace(*cache_dir);
  }

  ImportanceScores score(const TokenizedQuestion& q) const override {
    const auto key = make_cache_key(q, identity_);
    if (cache_) {
      if (auto hit = cache_->get(key)) {
        try {
          check_scores(*hit, q, identity_);
          ++cache_hits_;
          return *hit;
        } catch (const ScorerError& e) {
          warn(std::string("score cache: stale entry ignored: ") + e.what());
        }
      }
    }
    auto scores = fetch(q);
    if (cache_) cache_->put(key, scores);
    return scores;
  }

  std::string identity() const override { return identity_; }

  std::uint64_t upstream_calls() const { return upstream_calls_.load(); }
  std::uint64_t cache_hits() const { return cache_hits_.load(); }

  /// Base delay of the exponential backoff between retries.
  void set_backoff(std::chrono::milliseconds base) { backoff_ = base; }

 private:
  ImportanceScores fetch(const TokenizedQuestion& q) const {
    const std::string body = json{{"prompt", q.prompt}, {"tokens", q.tokens}}.dump();
    httplib::Headers headers;
    if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);

    in_flight_.acquire();
    struct Release {
      std::counting_semaphore<1024>& s;
      ~Release() { s.release(); }
    } release{in_flight_};

    std::string last_error;
    for (int attempt = 0; attempt <= spec_.max_retries; ++attempt) {
      if (attempt > 0) std::this_thread::sleep_for(backoff_ * (1 << (attempt - 1)));
      httplib::Client client(endpoint_.origin);
      const auto timeout = std::chrono::milliseconds(spec_.timeout_ms);
      client.set_connection_timeout(timeout);
      client.set_read_timeout(timeout);
      client.set_write_timeout(timeout);
      ++upstream_calls_;
      auto res = client.Post(endpoint_.path, headers, body, "application/json");
      if (!res) {
        last_error = "transport error: " + httplib::to_string(res.error());
        continue;
      }
      if (res->status == 429 || res->status >= 500) {
        last_error = "HTTP " + std::to_string(res->status);
        continue;
      }
      if (res->status != 200)
        throw ScorerError("remote scorer: HTTP " + std::to_string(res->status));
      return parse_response(res->body, q);
    }
    throw ScorerError("remote scorer: giving up after " + std::to_string(spec_.max_retries + 1) +
                      " attempts: " + last_error);
  }

  ImportanceScores parse_response(const std::string& body, const TokenizedQuestion& q) const {
    ImportanceScores scores;
    try {
      const json doc = json::parse(body);
      for (const auto& v : doc.at("scores")) {
        if (!v.is_number()) throw ScorerError("non-numeric score");
        scores.values.push_back(v.get<double>());
      }
    } catch (const json::exception& e) {
      throw ScorerError(std::string("remote scorer: unparsable response: ") + e.what());
    } catch (const ScorerError& e) {
      throw ScorerError(std::string("remote scorer: unparsable response: ") + e.what());
    }
    check_scores(scores, q, "remote scorer");
    return scores;
  }

  ScorerSpec spec_;
  std::string identity_;
  Endpoint endpoint_;
  std::string api_key_;
  std::optional<DiskScoreCache> cache_;
  std::chrono::milliseconds backoff_{200};
  mutable std::counting_semaphore<1024> in_flight_;
  mutable std::atomic<std::uint64_t> upstream_calls_{0};
  mutable std::atomic<std::uint64_t> cache_hits_{0};
};

/// What a scorer may need beyond its spec.
struct ScorerContext {
  std::shared_ptr<const TruthLookup> truth;  // oracle_noise only
  std::optional<std::filesystem::path> cache_dir;
};

/// --cache-dir wins over SCORER_CACHE_DIR.
inline std::optional<std::filesystem::path> resolve_cache_dir(const std::string& flag) {
  if (!flag.empty()) return std::filesystem::path(flag);
  if (const char* env = std::getenv(kCacheDirEnv); env && *env) return std::filesystem::path(env);
  return std::nullopt;
}

inline std::unique_ptr<Scorer> make_scorer(const ScorerSpec& spec, const ScorerContext& ctx = {}) {
  spec.validate();
  switch (spec.kind) {
    case ScorerKind::constant: return std::make_unique<ConstantScorer>(spec.constant);
    case ScorerKind::uniform_random: return std::make_unique<UniformRandomScorer>(spec.seed);
    case ScorerKind::oracle_noise:
      return std::make_unique<OracleNoiseScorer>(ctx.truth, spec.sigma, spec.seed);
    case ScorerKind::remote: return std::make_unique<RemoteScorer>(spec, ctx.cache_dir);
  }
  throw InputError("scorer: unsupported kind");
}

inline ImportanceScores score(const ScorerSpec& spec, const TokenizedQuestion& question,
                              const ScorerContext& ctx = {}) {
  const auto scorer = make_scorer(spec, ctx);
  auto scores = scorer->score(question);
  check_scores(scores, question, scorer->identity());
  return scores;
}

}  // namespace expcrc
