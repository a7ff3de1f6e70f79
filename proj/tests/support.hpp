#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "circuitlab/model.hpp"
#include "circuitlab/planted.hpp"
#include "circuitlab/rng.hpp"
#include "circuitlab/tasks.hpp"
#include "circuitlab/transformer.hpp"

namespace testing_support {

using namespace circuitlab;

inline model::ModelConfig tiny_config(std::uint64_t seed = 0) {
  return {.n_layers = 2, .n_heads = 2, .d_model = 32, .d_head = 16, .d_mlp = 64, .vocab_size = 64,
          .max_seq_len = 24, .seed = seed};
}

inline std::vector<int> random_tokens(Rng& rng, int length, int vocab) {
  std::vector<int> t(length);
  for (auto& x : t) x = static_cast<int>(rng.below(static_cast<std::uint64_t>(vocab)));
  return t;
}

inline double max_abs_diff(const model::MatD& a, const model::MatD& b) { return (a - b).cwiseAbs().maxCoeff(); }

/// Lookup-only suite matching the planted model's wiring.
inline tasks::TaskSuite lookup_suite(int n, std::uint64_t seed) {
  tasks::GenConfig g;
  g.n_new_task = n;
  g.n_retention_per_subtype = 1;
  g.new_task_types = {tasks::TaskType::kLookup};
  return tasks::gen_suite(g, seed);
}

/// Substitutes the given heads' z on every position with the source run's.
inline model::PatchPlan substitution_plan(const model::ActivationCache& source, const model::HeadSet& heads) {
  model::PatchPlan plan;
  for (const auto& h : heads) plan.substitute(h, 0, source.length(), source.head(h));
  return plan;
}

inline int argmax_last(const model::MatD& logits) {
  Eigen::Index best;
  logits.row(logits.rows() - 1).maxCoeff(&best);
  return static_cast<int>(best);
}

}  // namespace testing_support
