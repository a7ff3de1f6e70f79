#pragma once

#include <span>
#include <vector>

#include "circuitlab/tasks.hpp"
#include "circuitlab/transformer.hpp"

namespace circuitlab::scoring {

/// Prompt followed by every answer token but the last: the sequence whose
/// logits score `answer`.
std::vector<int> scoring_input(std::span<const int> prompt, std::span<const int> answer);

/// True when every choice is one token, so all choices share one scoring input (the prompt).
bool single_token_choices(const tasks::TaskItem& item);

/// Distinct scoring inputs of an item: the prompt alone for single-token
/// choices, otherwise one input per choice.
std::vector<std::vector<int>> item_inputs(const tasks::TaskItem& item);

/// Log of the geometric-mean probability of each choice (the mean token
/// log-probability). Items whose choices are all single tokens share one
/// forward pass. `plan`, if given, must fit every scoring input of the item.
std::vector<double> choice_log_probs(const model::CompiledModel& model, const tasks::TaskItem& item,
                                     const model::PatchPlan* plan = nullptr);

/// exp of choice_log_probs.
std::vector<double> choice_probs(const model::CompiledModel& model, const tasks::TaskItem& item,
                                 const model::PatchPlan* plan = nullptr);

/// Index of the largest value; ties go to the lowest index.
int argmax(std::span<const double> values);

/// Fraction of items whose gold choice has the highest geometric-mean
/// probability; the argmax is taken on log values with ties to the lowest index.
double accuracy(const model::CompiledModel& model, std::span<const tasks::TaskItem> items);

/// Teacher-forced answer tokens for training: the gold choice plus the end-of-answer token.
std::vector<int> sft_answer(const tasks::TaskItem& item);

/// Mean token cross-entropy of sft_answer(item).
double answer_cross_entropy(const model::CompiledModel& model, const tasks::TaskItem& item);

}  // namespace circuitlab::scoring
