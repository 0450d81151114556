// Calibrates on synthetic data and prints the sets for a few test questions.

#include <iostream>

#include "expcrc/expcrc.hpp"

int main() {
  using namespace expcrc;

  SyntheticConfig config;
  config.sigma = 0.3;
  config.seed = 42;
  const Dataset data = generate_synthetic_dataset(config);
  const auto [cal, test] = split_dataset(data, 0.5, 7);

  const OracleNoiseScorer scorer(make_truth_lookup(data), config.sigma, config.seed);
  auto result = calibrate_exact(cal.examples, 0.2);
  result.scorer = scorer.identity();
  std::cout << to_json(result).dump(2) << "\n\n";

  for (std::size_t i = 0; i < 3; ++i) {
    const auto& ex = test.examples[i];
    const auto set = predict(ex.question, scorer, result);
    const auto report = evaluate(set, ex);
    std::cout << ex.question.id << ": " << set.size() << " of " << ex.question.size()
              << " tokens selected, loss " << report.loss << '\n';
  }
}
