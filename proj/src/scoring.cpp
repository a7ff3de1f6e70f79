#include "circuitlab/scoring.hpp"

#include <algorithm>
#include <cmath>

#include "circuitlab/errors.hpp"
#include "circuitlab/parallel.hpp"

namespace circuitlab::scoring {

std::vector<int> scoring_input(std::span<const int> prompt, std::span<const int> answer) {
  std::vector<int> input(prompt.begin(), prompt.end());
  if (!answer.empty()) input.insert(input.end(), answer.begin(), answer.end() - 1);
  return input;
}

bool single_token_choices(const tasks::TaskItem& item) {
  return std::all_of(item.choices.begin(), item.choices.end(), [](const auto& c) { return c.size() == 1; });
}

std::vector<std::vector<int>> item_inputs(const tasks::TaskItem& item) {
  if (single_token_choices(item)) return {item.prompt};
  std::vector<std::vector<int>> out;
  for (const auto& c : item.choices) out.push_back(scoring_input(item.prompt, c));
  return out;
}

std::vector<double> choice_log_probs(const model::CompiledModel& model, const tasks::TaskItem& item,
                                     const model::PatchPlan* plan) {
  if (item.choices.empty()) throw ConfigError("task item '" + item.id + "' has no choices");
  std::vector<double> out;
  out.reserve(item.choices.size());
  if (single_token_choices(item)) {
    const model::MatD lp = model::log_softmax(model.forward(item.prompt, plan).logits);
    const auto last = lp.row(lp.rows() - 1);
    for (const auto& c : item.choices) out.push_back(last(c.front()));
    return out;
  }
  for (const auto& c : item.choices) {
    const auto lp = model::seq_log_probs(model, item.prompt, c, plan);
    double sum = 0.0;
    for (double v : lp) sum += v;
    out.push_back(sum / static_cast<double>(lp.size()));
  }
  return out;
}

std::vector<double> choice_probs(const model::CompiledModel& model, const tasks::TaskItem& item,
                                 const model::PatchPlan* plan) {
  auto v = choice_log_probs(model, item, plan);
  for (double& x : v) x = std::exp(x);
  return v;
}

int argmax(std::span<const double> values) {
  if (values.empty()) throw ConfigError("argmax of an empty list");
  int best = 0;
  for (int i = 1; i < static_cast<int>(values.size()); ++i)
    if (values[i] > values[best]) best = i;
  return best;
}

double accuracy(const model::CompiledModel& model, std::span<const tasks::TaskItem> items) {
  if (items.empty()) throw ConfigError("accuracy: no items");
  std::vector<char> correct(items.size(), 0);
  parallel_for(items.size(), [&](std::size_t i) {
    correct[i] = argmax(choice_log_probs(model, items[i])) == items[i].gold;
  });
  double n = 0;
  for (char c : correct) n += c;
  return n / static_cast<double>(items.size());
}

std::vector<int> sft_answer(const tasks::TaskItem& item) {
  std::vector<int> a = item.gold_choice();
  a.push_back(tasks::vocab::kEndOfAnswer);
  return a;
}

double answer_cross_entropy(const model::CompiledModel& model, const tasks::TaskItem& item) {
  const auto lp = model::seq_log_probs(model, item.prompt, sft_answer(item));
  double s = 0.0;
  for (double v : lp) s -= v;
  return s / static_cast<double>(lp.size());
}

}  // namespace circuitlab::scoring
