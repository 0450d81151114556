#pragma once

// Test-time set construction at the calibrated threshold and per-example
// evaluation against annotations.

#include <string>
#include <vector>

#include "expcrc/calibrate.hpp"
#include "expcrc/core.hpp"
#include "expcrc/scorer.hpp"
#include "expcrc/sets.hpp"

namespace expcrc {

/// Calibration and test must use the same scorer or exchangeability is lost.
/// Mismatch is a warning, or an InputError when `strict`.
inline void check_provenance(const Scorer& scorer, const CalibrationResult& cal,
                             bool strict) {
  const auto id = scorer.identity();
  if (id == cal.scorer) return;
  const std::string msg = "scorer '" + id + "' differs from calibration scorer '" +
                          cal.scorer + "'";
  if (strict) throw InputError(msg);
  warn(msg);
}

inline UncertaintySet predict(const TokenizedQuestion& question, const Scorer& scorer,
                              const CalibrationResult& cal, bool strict = false) {
  check_provenance(scorer, cal, strict);
  const auto scores = scorer.score(question);
  check_scores(scores, question, scorer.identity());
  auto set = build_set(question, scores, cal.lambda_hat);
  set.scorer = scorer.identity();
  return set;
}

/// Batch form: provenance is checked once, questions are scored in parallel.
inline std::vector<UncertaintySet> predict_batch(
    std::span<const TokenizedQuestion> questions, const Scorer& scorer,
    const CalibrationResult& cal, bool strict = false, std::size_t workers = 1) {
  check_provenance(scorer, cal, strict);
  std::vector<UncertaintySet> out(questions.size());
  const auto id = scorer.identity();
  parallel_for(questions.size(), workers, [&](std::size_t i) {
    const auto scores = scorer.score(questions[i]);
    check_scores(scores, questions[i], id);
    out[i] = build_set(questions[i], scores, cal.lambda_hat);
    out[i].scorer = id;
  });
  return out;
}

struct EvaluationReport {
  std::string question_id;
  double loss = 0.0;
  std::size_t set_size = 0;
  std::size_t truth_size = 0;
  std::size_t covered = 0;
};

inline EvaluationReport evaluate(const UncertaintySet& set,
                                 const CalibrationExample& reference) {
  if (set.question_id != reference.question.id)
    throw std::invalid_argument("evaluate: set for '" + set.question_id +
                                "' compared against '" + reference.question.id + "'");
  EvaluationReport r;
  r.question_id = set.question_id;
  r.set_size = set.size();
  r.truth_size = reference.explanation.size();
  for (std::size_t j : reference.explanation.indices) r.covered += set.contains(j) ? 1 : 0;
  r.loss = loss(set, reference.explanation);
  return r;
}

/// Coverage counted by (position, token string) against the clean question.
/// On a clean question this equals evaluate(); on a perturbed one, a selected
/// position whose token was substituted does not cover the clean token.
inline EvaluationReport evaluate_against_clean(const UncertaintySet& set,
                                               const CalibrationExample& clean) {
  if (set.question_id != clean.question.id)
    throw std::invalid_argument("evaluate: set for '" + set.question_id +
                                "' compared against '" + clean.question.id + "'");
  EvaluationReport r;
  r.question_id = set.question_id;
  r.set_size = set.size();
  r.truth_size = clean.explanation.size();
  for (std::size_t j : clean.explanation.indices) {
    for (const auto& [pos, tok] : set.tokens) {
      if (pos == j && tok == clean.question.tokens[j]) {
        ++r.covered;
        break;
      }
    }
  }
  if (r.truth_size == 0) throw std::invalid_argument("evaluate: empty ground truth");
  r.loss = coverage_loss(r.covered, r.truth_size);
  return r;
}

inline json to_json(const UncertaintySet& set) {
  json tokens = json::array();
  for (const auto& [pos, tok] : set.tokens) tokens.push_back(tok);
  return json{{"id", set.question_id},
              {"lambda", set.lambda_used},
              {"indices", set.indices},
              {"tokens", tokens},
              {"scorer", set.scorer}};
}

}  // namespace expcrc
