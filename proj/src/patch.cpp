#include "circuitlab/patch.hpp"

#include <fmt/core.h>

#include "circuitlab/errors.hpp"

namespace circuitlab::model {

std::size_t PatchPlan::add(PatchRule rule) {
  if (rule.begin < 0 || rule.end <= rule.begin) {
    throw ConfigError(fmt::format("patch rule for {}: empty or negative range [{}, {})",
                                  to_string(rule.head), rule.begin, rule.end));
  }
  if (rule.kind == PatchKind::kInterpolate && !(rule.coefficient >= 0.0 && rule.coefficient <= 1.0)) {
    throw ConfigError(fmt::format("patch rule for {}: coefficient {} outside [0, 1]",
                                  to_string(rule.head), rule.coefficient));
  }
  if (rule.kind != PatchKind::kZero && rule.values.rows() != 1 && rule.values.rows() != rule.length()) {
    throw ConfigError(fmt::format("patch rule for {}: {} stored rows for a range of {}",
                                  to_string(rule.head), rule.values.rows(), rule.length()));
  }
  for (const auto& r : rules_) {
    if (r.head == rule.head && r.begin < rule.end && rule.begin < r.end) {
      throw ConfigError(fmt::format("patch rules overlap on {} positions [{}, {})", to_string(rule.head),
                                    std::max(r.begin, rule.begin), std::min(r.end, rule.end)));
    }
  }
  rules_.push_back(std::move(rule));
  return rules_.size() - 1;
}

std::size_t PatchPlan::substitute(HeadId head, int begin, int end, MatD values) {
  return add({head, begin, end, PatchKind::kSubstitute, 1.0, std::move(values)});
}

std::size_t PatchPlan::interpolate(HeadId head, int begin, int end, double m, MatD values) {
  return add({head, begin, end, PatchKind::kInterpolate, m, std::move(values)});
}

std::size_t PatchPlan::zero(HeadId head, int begin, int end) {
  return add({head, begin, end, PatchKind::kZero, 1.0, MatD()});
}

std::size_t PatchPlan::mean(HeadId head, int begin, int end, MatD values) {
  return add({head, begin, end, PatchKind::kMean, 1.0, std::move(values)});
}

void PatchPlan::validate(const ModelConfig& config, int length) const {
  for (const auto& r : rules_) {
    if (!contains(config, r.head)) {
      throw ConfigError(fmt::format("patch plan references {} outside a {}x{} model", to_string(r.head),
                                    config.n_layers, config.n_heads));
    }
    if (r.end > length) {
      throw ConfigError(fmt::format("patch rule for {} ends at {} beyond sequence length {}",
                                    to_string(r.head), r.end, length));
    }
    if (r.kind != PatchKind::kZero && r.values.cols() != config.d_head) {
      throw ConfigError(fmt::format("patch rule for {}: stored vectors have length {}, d_head is {}",
                                    to_string(r.head), r.values.cols(), config.d_head));
    }
  }
}

}  // namespace circuitlab::model
