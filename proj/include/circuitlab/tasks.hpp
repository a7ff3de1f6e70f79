#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace circuitlab::tasks {

// Token layout shared by every generator. Tasks emit integer ids directly.
namespace vocab {
inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEndOfAnswer = 2;
inline constexpr int kSep = 3;
inline constexpr int kTypeMarkerBase = 4;       // lookup, shifted, mirrored
inline constexpr int kRetentionMarkerBase = 7;  // copy, reverse, successor
inline constexpr int kKeyBase = 10;             // answer keys A..D
inline constexpr int kContentBegin = 16;
inline constexpr int kChoices = 4;
}  // namespace vocab

// New-task prompt: [BOS, TYPE, A, o0, B, o1, C, o2, D, o3, KEY]; the answer is
// one option token. Retention prompt: [BOS, MARKER, a, b, c, SEP]; the answer
// is three tokens.
inline constexpr int kNewTaskPromptLength = 11;
inline constexpr int kTypeMarkerPosition = 1;
inline constexpr int kKeyPosition = 10;
inline constexpr int option_position(int slot) { return 3 + 2 * slot; }
inline constexpr int kRetentionPromptLength = 6;

enum class TaskType { kLookup, kShifted, kMirrored, kCopy, kReverse, kSuccessor };

std::string to_string(TaskType t);
TaskType task_type_from_string(const std::string& s);
bool is_new_task(TaskType t);
int marker_token(TaskType t);

/// Option slot holding the answer for a new-task item with answer key `key`.
int answer_slot(TaskType t, int key);
/// Successor over the content alphabet, wrapping at the end.
int successor(int token, int vocab_size);

struct TaskItem {
  std::string id;
  std::vector<int> prompt;
  std::vector<std::vector<int>> choices;
  int gold = 0;
  TaskType task_type = TaskType::kLookup;

  const std::vector<int>& gold_choice() const { return choices.at(gold); }
  bool operator==(const TaskItem&) const = default;
};

struct GenConfig {
  int n_new_task = 200;
  int n_retention_per_subtype = 60;
  int n_choices = vocab::kChoices;
  int vocab_size = 64;
  std::vector<TaskType> new_task_types{TaskType::kLookup, TaskType::kShifted, TaskType::kMirrored};
};

void to_json(nlohmann::json& j, const GenConfig& c);
void from_json(const nlohmann::json& j, GenConfig& c);

struct TaskSuite {
  std::vector<TaskItem> new_task;
  std::vector<TaskItem> retention;
  std::uint64_t seed = 0;
  GenConfig config;

  std::vector<TaskItem> retention_of(TaskType t) const;
};

/// Deterministic in (config, seed). Throws ConfigError when the requested
/// counts exceed the number of distinct items the vocabulary supports.
TaskSuite gen_suite(const GenConfig& config, std::uint64_t seed);

enum class Hypothesis { kAnswerKeySwap, kEntitySwap, kTaskTypeSwap };

std::string to_string(Hypothesis h);
Hypothesis hypothesis_from_string(const std::string& s);

/// Counterfactual pair for activation patching: the model run on `base` is
/// patched with activations from `source`; `target` is the answer expected
/// when the hypothesized information flows from the source run.
struct Triplet {
  std::vector<int> base;
  std::vector<int> source;
  std::vector<int> target;
  Hypothesis hypothesis = Hypothesis::kAnswerKeySwap;

  bool operator==(const Triplet&) const = default;
};

/// Validating constructor: equal lengths, at least one differing position, non-empty target.
Triplet make_triplet(std::vector<int> base, std::vector<int> source, std::vector<int> target,
                     Hypothesis hypothesis);

/// Positions at which base and source differ.
std::vector<int> diff_positions(const Triplet& t);

/// `n` distinct triplets drawn from the suite's new-task items.
std::vector<Triplet> gen_triplets(const TaskSuite& suite, Hypothesis hypothesis, int n, std::uint64_t seed);

/// 1 iff the completion (minus one trailing end-of-answer token) equals the gold choice.
int binary_reward(std::span<const int> completion, const TaskItem& item);

nlohmann::json to_json(const TaskItem& item);
TaskItem item_from_json(const nlohmann::json& j);
nlohmann::json to_json(const Triplet& t);
Triplet triplet_from_json(const nlohmann::json& j);

void write_items_jsonl(const std::filesystem::path& path, std::span<const TaskItem> items);
std::vector<TaskItem> read_items_jsonl(const std::filesystem::path& path);
void write_triplets_jsonl(const std::filesystem::path& path, std::span<const Triplet> triplets);
std::vector<Triplet> read_triplets_jsonl(const std::filesystem::path& path);

}  // namespace circuitlab::tasks
