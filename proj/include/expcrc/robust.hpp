#pragma once

// Robust uncertainty sets under bounded synonym substitution.
//
// The ball around an observed question holds every question that differs
// from it in at most d positions, each substituted token drawn from the
// observed token's synonym set. A candidate (j, t) gets the largest score
// the scorer assigns to position j over all ball members carrying t at j;
// the robust set keeps candidates whose robust score reaches 1 - lambda.
// When the lexicon is symmetric the clean question lies in the ball of any
// noisy variant, so the robust set covers every clean token the plain set
// would have selected on the clean question.

#include <limits>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "expcrc/calibrate.hpp"
#include "expcrc/core.hpp"
#include "expcrc/predict.hpp"
#include "expcrc/scorer.hpp"
#include "expcrc/sets.hpp"

namespace expcrc {

/// Ball too large for exact enumeration.
class BudgetError : public InputError {
 public:
  using InputError::InputError;
};

// ---------------------------------------------------------------------------
// Lexicon

class SynonymLexicon {
 public:
  using Entries = std::map<std::string, std::set<std::string>>;

  /// Merges `synonyms` into the entry for `token`. Call close() afterwards.
  void add(const std::string& token, const std::set<std::string>& synonyms) {
    entries_[token].insert(synonyms.begin(), synonyms.end());
  }

  /// Restores self-inclusion (t in B_t) and symmetry (t' in B_t implies
  /// t in B_t'). Returns the number of insertions made.
  std::size_t close(bool report = true) {
    std::size_t self_repairs = 0;
    for (auto& [token, syns] : entries_) {
      if (syns.insert(token).second) {
        ++self_repairs;
        if (report) warn("lexicon: entry '" + token + "' did not contain itself; added");
      }
    }
    std::size_t symmetric_repairs = 0;
    std::vector<std::pair<std::string, std::string>> missing;
    for (const auto& [token, syns] : entries_)
      for (const auto& s : syns)
        if (s != token) {
          auto it = entries_.find(s);
          if (it == entries_.end() || !it->second.count(token)) missing.emplace_back(s, token);
        }
    for (const auto& [from, to] : missing) {
      auto& entry = entries_[from];
      entry.insert(from);
      if (entry.insert(to).second) ++symmetric_repairs;
    }
    if (report && symmetric_repairs > 0)
      warn("lexicon: added " + std::to_string(symmetric_repairs) +
           " reverse synonym links to make the lexicon symmetric");
    return self_repairs + symmetric_repairs;
  }

  /// B_t: the entry for t, or {t} when t is unknown.
  std::set<std::string> synonym_set(const std::string& token) const {
    auto it = entries_.find(token);
    if (it == entries_.end()) return {token};
    return it->second;
  }

  /// B_t minus t, in sorted order.
  std::vector<std::string> alternatives(const std::string& token) const {
    std::vector<std::string> out;
    auto it = entries_.find(token);
    if (it == entries_.end()) return out;
    for (const auto& s : it->second)
      if (s != token) out.push_back(s);
    return out;
  }

  bool contains(const std::string& token, const std::string& candidate) const {
    if (token == candidate) return true;
    auto it = entries_.find(token);
    return it != entries_.end() && it->second.count(candidate) > 0;
  }

  const Entries& entries() const { return entries_; }
  bool empty() const { return entries_.empty(); }

 private:
  Entries entries_;
};

/// Reads {"token": t, "synonyms": [...]} records and closes the result.
inline SynonymLexicon read_lexicon(std::istream& in, const std::string& source) {
  SynonymLexicon lex;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json rec = json::parse(text);
      const auto token = rec.at("token").get<std::string>();
      if (token.empty()) throw InputError("empty token");
      auto syns = rec.at("synonyms").get<std::set<std::string>>();
      if (syns.count("")) throw InputError("empty synonym");
      lex.add(token, syns);
    } catch (const std::exception& e) {
      throw InputError(source + ": line " + std::to_string(line) + ": " + e.what());
    }
  }
  lex.close();
  return lex;
}

inline SynonymLexicon load_lexicon(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open lexicon " + path.string());
  return read_lexicon(in, path.string());
}

inline std::string lexicon_to_jsonl(const SynonymLexicon& lex) {
  std::string out;
  for (const auto& [token, syns] : lex.entries())
    out += json{{"token", token}, {"synonyms", syns}}.dump() + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Perturbation balls

enum class RobustMode { exact, coordinatewise };

inline std::string to_string(RobustMode m) {
  return m == RobustMode::exact ? "exact" : "coordinatewise";
}

inline RobustMode parse_robust_mode(const std::string& s) {
  if (s == "exact") return RobustMode::exact;
  if (s == "coordinatewise") return RobustMode::coordinatewise;
  throw InputError("unknown robust mode '" + s + "' (expected exact|coordinatewise)");
}

struct BallSpec {
  std::size_t d = 1;
  std::uint64_t enumeration_budget = 100'000;
  RobustMode mode = RobustMode::exact;
};

/// Number of questions within Hamming distance d whose tokens stay in the
/// observed tokens' synonym sets: the elementary symmetric polynomials
/// e_0..e_d of the per-position alternative counts. Saturates at
/// UINT64_MAX.
inline std::uint64_t ball_size(const TokenizedQuestion& question,
                               const SynonymLexicon& lexicon, std::size_t d) {
  constexpr auto kMax = std::numeric_limits<std::uint64_t>::max();
  const std::size_t k = question.tokens.size();
  d = std::min(d, k);
  auto sat_add = [](std::uint64_t a, std::uint64_t b) { return a > kMax - b ? kMax : a + b; };
  auto sat_mul = [](std::uint64_t a, std::uint64_t b) {
    return (a != 0 && b > kMax / a) ? kMax : a * b;
  };
  std::vector<std::uint64_t> e(d + 1, 0);
  e[0] = 1;
  for (const auto& token : question.tokens) {
    const std::uint64_t alts = lexicon.alternatives(token).size();
    for (std::size_t r = d; r >= 1; --r) e[r] = sat_add(e[r], sat_mul(e[r - 1], alts));
  }
  std::uint64_t total = 0;
  for (auto v : e) total = sat_add(total, v);
  return total;
}

namespace detail {
inline void check_ball_inputs(const TokenizedQuestion& q, const BallSpec& spec) {
  if (spec.d > q.tokens.size())
    throw InputError("ball: d = " + std::to_string(spec.d) + " exceeds question length " +
                     std::to_string(q.tokens.size()));
}

inline void check_budget(std::uint64_t size, const BallSpec& spec) {
  if (size > spec.enumeration_budget)
    throw BudgetError("ball of size " + std::to_string(size) +
                      " exceeds enumeration budget " +
                      std::to_string(spec.enumeration_budget) +
                      "; raise --budget or use coordinatewise mode with a "
                      "context-free scorer");
}
}  // namespace detail

/// Calls fn(member) for each ball member exactly once, the observed question
/// first. Order: perturbed-position sets in lexicographic order, then
/// synonym choices in odometer order (last position fastest).
template <class Fn>
void for_each_ball_member(const TokenizedQuestion& question, const SynonymLexicon& lexicon,
                          const BallSpec& spec, Fn&& fn) {
  detail::check_ball_inputs(question, spec);
  detail::check_budget(ball_size(question, lexicon, spec.d), spec);

  const std::size_t k = question.tokens.size();
  std::vector<std::vector<std::string>> alts(k);
  for (std::size_t j = 0; j < k; ++j) alts[j] = lexicon.alternatives(question.tokens[j]);

  TokenizedQuestion member = question;
  std::vector<std::size_t> positions;

  auto emit_subset = [&] {
    std::vector<std::size_t> choice(positions.size(), 0);
    for (;;) {
      for (std::size_t i = 0; i < positions.size(); ++i)
        member.tokens[positions[i]] = alts[positions[i]][choice[i]];
      fn(static_cast<const TokenizedQuestion&>(member));
      bool exhausted = true;
      for (std::size_t i = positions.size(); i-- > 0;) {
        if (++choice[i] < alts[positions[i]].size()) {
          exhausted = false;
          break;
        }
        choice[i] = 0;
      }
      if (exhausted) break;
    }
    for (std::size_t p : positions) member.tokens[p] = question.tokens[p];
  };

  auto visit = [&](auto&& self, std::size_t start) -> void {
    emit_subset();
    if (positions.size() == spec.d) return;
    for (std::size_t p = start; p < k; ++p) {
      if (alts[p].empty()) continue;
      positions.push_back(p);
      self(self, p + 1);
      positions.pop_back();
    }
  };
  visit(visit, 0);
}

inline std::vector<TokenizedQuestion> enumerate_ball(const TokenizedQuestion& question,
                                                     const SynonymLexicon& lexicon,
                                                     const BallSpec& spec) {
  std::vector<TokenizedQuestion> out;
  for_each_ball_member(question, lexicon, spec,
                       [&](const TokenizedQuestion& m) { out.push_back(m); });
  return out;
}

/// Membership test: same length, at most d differing positions, every token
/// drawn from the corresponding synonym set of `center`.
inline bool in_ball(const TokenizedQuestion& candidate, const TokenizedQuestion& center,
                    const SynonymLexicon& lexicon, std::size_t d) {
  if (candidate.tokens.size() != center.tokens.size()) return false;
  std::size_t changed = 0;
  for (std::size_t j = 0; j < center.tokens.size(); ++j) {
    if (candidate.tokens[j] == center.tokens[j]) continue;
    if (!lexicon.contains(center.tokens[j], candidate.tokens[j])) return false;
    ++changed;
  }
  return changed <= d;
}

// ---------------------------------------------------------------------------
// Robust scores and sets

inline constexpr double kNoSupport = -std::numeric_limits<double>::infinity();

namespace detail {
inline void check_candidate(const TokenizedQuestion& q, std::size_t j,
                            const std::string& candidate, const SynonymLexicon& lexicon) {
  if (j >= q.tokens.size())
    throw std::invalid_argument("robust_score: position " + std::to_string(j) +
                                " out of range");
  if (!lexicon.contains(q.tokens[j], candidate))
    throw std::invalid_argument("robust_score: '" + candidate +
                                "' is not a synonym of '" + q.tokens[j] + "'");
}

inline void check_coordinatewise(const Scorer& scorer) {
  if (!scorer.context_free())
    throw InputError("coordinatewise robust scoring refused: scorer '" +
                     scorer.identity() + "' is not context-free");
}
}  // namespace detail

/// Largest score at position j over ball members carrying `candidate` there.
/// Returns kNoSupport when no member does (candidate differs from the
/// observed token and d = 0).
inline double robust_score(const TokenizedQuestion& observed, std::size_t j,
                           const std::string& candidate, const SynonymLexicon& lexicon,
                           const BallSpec& spec, const Scorer& scorer) {
  detail::check_candidate(observed, j, candidate, lexicon);
  detail::check_ball_inputs(observed, spec);
  if (spec.mode == RobustMode::coordinatewise) {
    detail::check_coordinatewise(scorer);
    if (candidate != observed.tokens[j] && spec.d == 0) return kNoSupport;
    TokenizedQuestion substituted = observed;
    substituted.tokens[j] = candidate;
    return scorer.score(substituted).values.at(j);
  }
  double best = kNoSupport;
  for_each_ball_member(observed, lexicon, spec, [&](const TokenizedQuestion& m) {
    if (m.tokens[j] != candidate) return;
    const auto s = scorer.score(m);
    check_scores(s, m, scorer.identity());
    best = std::max(best, s[j]);
  });
  return best;
}

struct RobustItem {
  std::size_t position = 0;
  std::string candidate;
  double robust_score = 0.0;

  friend bool operator==(const RobustItem&, const RobustItem&) = default;
};

struct RobustStats {
  std::uint64_t ball_size = 0;
  std::uint64_t scorer_calls = 0;
  std::uint64_t cache_hits = 0;
};

struct RobustUncertaintySet {
  std::string question_id;
  std::vector<RobustItem> items;  // by position, then candidate
  double lambda_used = 0.0;
  RobustMode mode = RobustMode::exact;
  bool certified = true;
  std::string scorer;
  RobustStats stats;

  std::size_t size() const { return items.size(); }
  bool contains(std::size_t j, const std::string& token) const {
    for (const auto& it : items)
      if (it.position == j && it.candidate == token) return true;
    return false;
  }
};

/// Robust score of every (position, candidate) pair of the observed
/// question. Exact mode scores each ball member once.
inline std::vector<std::map<std::string, double>> robust_score_table(
    const TokenizedQuestion& observed, const SynonymLexicon& lexicon, const BallSpec& spec,
    const Scorer& scorer, std::size_t workers = 1) {
  detail::check_ball_inputs(observed, spec);
  const std::size_t k = observed.tokens.size();
  std::vector<std::map<std::string, double>> best(k);
  for (std::size_t j = 0; j < k; ++j)
    for (const auto& c : lexicon.synonym_set(observed.tokens[j])) best[j][c] = kNoSupport;

  if (spec.mode == RobustMode::coordinatewise) {
    detail::check_coordinatewise(scorer);
    for (std::size_t j = 0; j < k; ++j)
      for (auto& [cand, value] : best[j])
        value = robust_score(observed, j, cand, lexicon, spec, scorer);
    return best;
  }

  const auto members = enumerate_ball(observed, lexicon, spec);
  std::vector<ImportanceScores> scores(members.size());
  parallel_for(members.size(), workers, [&](std::size_t m) {
    scores[m] = scorer.score(members[m]);
    check_scores(scores[m], members[m], scorer.identity());
  });
  for (std::size_t m = 0; m < members.size(); ++m)
    for (std::size_t j = 0; j < k; ++j) {
      double& slot = best[j].at(members[m].tokens[j]);
      slot = std::max(slot, scores[m][j]);
    }
  return best;
}

inline RobustUncertaintySet build_robust_set(const TokenizedQuestion& observed,
                                             const SynonymLexicon& lexicon,
                                             const BallSpec& spec, const Scorer& scorer,
                                             const CalibrationResult& cal,
                                             std::size_t workers = 1) {
  MemoScorer memo(scorer);
  RobustUncertaintySet out;
  out.question_id = observed.id;
  out.lambda_used = cal.lambda_hat;
  out.mode = spec.mode;
  out.scorer = scorer.identity();
  out.stats.ball_size = ball_size(observed, lexicon, spec.d);

  const auto table = robust_score_table(observed, lexicon, spec, memo, workers);
  for (std::size_t j = 0; j < table.size(); ++j)
    for (const auto& [cand, r] : table[j])
      if (is_selected(r, cal.lambda_hat)) out.items.push_back({j, cand, r});
  out.stats.scorer_calls = memo.calls();
  out.stats.cache_hits = memo.hits();
  return out;
}

/// Coverage of the clean annotation, matched by (position, clean token).
inline EvaluationReport evaluate_robust(const RobustUncertaintySet& set,
                                        const CalibrationExample& clean) {
  if (set.question_id != clean.question.id)
    throw std::invalid_argument("evaluate_robust: set for '" + set.question_id +
                                "' compared against '" + clean.question.id + "'");
  if (clean.explanation.indices.empty())
    throw std::invalid_argument("evaluate_robust: empty ground truth");
  EvaluationReport r;
  r.question_id = set.question_id;
  r.set_size = set.size();
  r.truth_size = clean.explanation.size();
  for (std::size_t j : clean.explanation.indices)
    if (set.contains(j, clean.question.tokens[j])) ++r.covered;
  r.loss = coverage_loss(r.covered, r.truth_size);
  return r;
}

inline json to_json(const RobustUncertaintySet& set) {
  json items = json::array();
  for (const auto& it : set.items)
    items.push_back({{"position", it.position},
                     {"candidate", it.candidate},
                     {"robust_score", it.robust_score}});
  return json{{"id", set.question_id},
              {"lambda", set.lambda_used},
              {"mode", to_string(set.mode)},
              {"certified", set.certified},
              {"scorer", set.scorer},
              {"items", items},
              {"ball_size", set.stats.ball_size},
              {"scorer_calls", set.stats.scorer_calls},
              {"cache_hits", set.stats.cache_hits}};
}

// ---------------------------------------------------------------------------
// Noise injection

/// Substitutes a uniformly chosen alternative at min(d, #perturbable)
/// uniformly chosen positions that have at least one alternative.
inline TokenizedQuestion inject_noise(const TokenizedQuestion& clean,
                                      const SynonymLexicon& lexicon, std::size_t d,
                                      std::uint64_t seed) {
  if (d > clean.tokens.size())
    throw InputError("inject_noise: d exceeds question length");
  TokenizedQuestion noisy = clean;
  if (d == 0) return noisy;
  std::vector<std::size_t> perturbable;
  std::vector<std::vector<std::string>> alts(clean.tokens.size());
  for (std::size_t j = 0; j < clean.tokens.size(); ++j) {
    alts[j] = lexicon.alternatives(clean.tokens[j]);
    if (!alts[j].empty()) perturbable.push_back(j);
  }
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> chosen;
  std::sample(perturbable.begin(), perturbable.end(), std::back_inserter(chosen),
              std::min(d, perturbable.size()), rng);
  for (std::size_t j : chosen) {
    std::uniform_int_distribution<std::size_t> pick(0, alts[j].size() - 1);
    noisy.tokens[j] = alts[j][pick(rng)];
  }
  return noisy;
}

}  // namespace expcrc
