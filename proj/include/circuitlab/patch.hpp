#pragma once

#include <vector>

#include "circuitlab/model.hpp"

namespace circuitlab::model {

enum class PatchKind {
  kSubstitute,   // z <- stored
  kInterpolate,  // z <- (1 - m) z + m stored
  kZero,         // z <- 0
  kMean,         // z <- stored reference-batch mean
};

/// Replacement rule for one head over positions [begin, end). `values` holds
/// one row per position in the range, or a single row broadcast to all of
/// them. Each row has d_head entries. Unused for kZero.
struct PatchRule {
  HeadId head;
  int begin = 0;
  int end = 0;
  PatchKind kind = PatchKind::kSubstitute;
  double coefficient = 1.0;
  MatD values;

  int length() const { return end - begin; }
  /// Stored row applied at absolute position `pos`.
  auto row(int pos) const { return values.row(values.rows() == 1 ? 0 : pos - begin); }
};

/// Interventions on per-head outputs z (the d_head vector each head produces
/// before its output projection). Rule targets never overlap.
class PatchPlan {
 public:
  PatchPlan() = default;

  /// Adds a rule; throws ConfigError on overlap, bad range, bad coefficient,
  /// or a stored-row shape that does not fit the range.
  std::size_t add(PatchRule rule);

  std::size_t substitute(HeadId head, int begin, int end, MatD values);
  std::size_t interpolate(HeadId head, int begin, int end, double m, MatD values);
  std::size_t zero(HeadId head, int begin, int end);
  std::size_t mean(HeadId head, int begin, int end, MatD values);

  const std::vector<PatchRule>& rules() const { return rules_; }
  PatchRule& rule(std::size_t i) { return rules_[i]; }
  bool empty() const { return rules_.empty(); }

  /// Throws ConfigError unless every rule fits the config and a sequence of `length` tokens.
  void validate(const ModelConfig& config, int length) const;

 private:
  std::vector<PatchRule> rules_;
};

}  // namespace circuitlab::model
