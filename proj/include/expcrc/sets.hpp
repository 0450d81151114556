#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "expcrc/core.hpp"

namespace expcrc {

/// Token j belongs to the set at level lambda iff its score reaches 1 - lambda.
/// Ties are included.
inline bool is_selected(double score, double lambda) {
  return score >= 1.0 - lambda;
}

struct UncertaintySet {
  std::string question_id;
  std::vector<std::size_t> indices;                        // ascending
  std::vector<std::pair<std::size_t, std::string>> tokens;  // (position, token)
  double lambda_used = 0.0;
  std::string scorer;  // identity of the scorer that produced the scores

  std::size_t size() const { return indices.size(); }
  bool contains(std::size_t j) const {
    return std::binary_search(indices.begin(), indices.end(), j);
  }
};

inline UncertaintySet build_set(const TokenizedQuestion& question,
                                const ImportanceScores& scores, double lambda) {
  if (scores.size() != question.tokens.size())
    throw std::invalid_argument("build_set: " + std::to_string(scores.size()) +
                                " scores for " +
                                std::to_string(question.tokens.size()) +
                                " tokens in question '" + question.id + "'");
  if (!(lambda >= 0.0 && lambda <= 1.0))
    throw std::invalid_argument("build_set: lambda must be in [0,1]");

  UncertaintySet set;
  set.question_id = question.id;
  set.lambda_used = lambda;
  for (std::size_t j = 0; j < scores.size(); ++j) {
    if (is_selected(scores[j], lambda)) {
      set.indices.push_back(j);
      set.tokens.emplace_back(j, question.tokens[j]);
    }
  }
  return set;
}

inline UncertaintySet build_set(const CalibrationExample& example, double lambda) {
  return build_set(example.question, example.scores, lambda);
}

}  // namespace expcrc
