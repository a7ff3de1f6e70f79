#include "circuitlab/tasks.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <set>
#include <utility>

#include <fmt/core.h>

#include "circuitlab/errors.hpp"
#include "circuitlab/rng.hpp"

namespace circuitlab::tasks {

namespace {

constexpr std::array<std::pair<TaskType, const char*>, 6> kTypeNames{{
    {TaskType::kLookup, "lookup"},
    {TaskType::kShifted, "shifted"},
    {TaskType::kMirrored, "mirrored"},
    {TaskType::kCopy, "copy"},
    {TaskType::kReverse, "reverse"},
    {TaskType::kSuccessor, "successor"},
}};

constexpr std::array<std::pair<Hypothesis, const char*>, 3> kHypothesisNames{{
    {Hypothesis::kAnswerKeySwap, "answer_key_swap"},
    {Hypothesis::kEntitySwap, "entity_swap"},
    {Hypothesis::kTaskTypeSwap, "task_type_swap"},
}};

constexpr std::array<TaskType, 3> kRetentionTypes{TaskType::kCopy, TaskType::kReverse, TaskType::kSuccessor};

int content_size(int vocab_size) { return vocab_size - vocab::kContentBegin; }

// k distinct content tokens in random order.
std::vector<int> draw_distinct(Rng& rng, int k, int vocab_size) {
  std::vector<int> out;
  while (static_cast<int>(out.size()) < k) {
    const int t = vocab::kContentBegin + static_cast<int>(rng.below(static_cast<std::uint64_t>(content_size(vocab_size))));
    if (std::find(out.begin(), out.end(), t) == out.end()) out.push_back(t);
  }
  return out;
}

// Number of ordered k-tuples of distinct content tokens.
double falling_factorial(int n, int k) {
  double r = 1.0;
  for (int i = 0; i < k; ++i) r *= std::max(0, n - i);
  return r;
}

TaskItem make_new_task(Rng& rng, TaskType type, const GenConfig& cfg, int index) {
  const std::vector<int> options = draw_distinct(rng, vocab::kChoices, cfg.vocab_size);
  const int key = static_cast<int>(rng.below(vocab::kChoices));
  TaskItem item;
  item.id = fmt::format("new-{:05d}", index);
  item.task_type = type;
  item.prompt = {vocab::kBos, marker_token(type)};
  for (int s = 0; s < vocab::kChoices; ++s) {
    item.prompt.push_back(vocab::kKeyBase + s);
    item.prompt.push_back(options[s]);
  }
  item.prompt.push_back(vocab::kKeyBase + key);
  for (int s = 0; s < vocab::kChoices; ++s) item.choices.push_back({options[s]});
  item.gold = answer_slot(type, key);
  return item;
}

std::vector<int> retention_answer(TaskType type, const std::vector<int>& abc, int vocab_size) {
  switch (type) {
    case TaskType::kCopy:
      return abc;
    case TaskType::kReverse:
      return {abc[2], abc[1], abc[0]};
    case TaskType::kSuccessor:
      return {successor(abc[0], vocab_size), successor(abc[1], vocab_size), successor(abc[2], vocab_size)};
    default:
      throw ConfigError("not a retention subtype: " + to_string(type));
  }
}

TaskItem make_retention(Rng& rng, TaskType type, const GenConfig& cfg, int index) {
  const std::vector<int> abc = draw_distinct(rng, 3, cfg.vocab_size);
  const std::vector<int> gold = retention_answer(type, abc, cfg.vocab_size);

  // Distractors are the other orderings of the gold tokens.
  std::vector<std::vector<int>> perms;
  std::vector<int> p = gold;
  std::sort(p.begin(), p.end());
  do {
    if (p != gold) perms.push_back(p);
  } while (std::next_permutation(p.begin(), p.end()));
  rng.shuffle(std::span<std::vector<int>>(perms));

  TaskItem item;
  item.id = fmt::format("{}-{:05d}", to_string(type), index);
  item.task_type = type;
  item.prompt = {vocab::kBos, marker_token(type), abc[0], abc[1], abc[2], vocab::kSep};
  item.gold = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.n_choices)));
  for (int c = 0, d = 0; c < cfg.n_choices; ++c) item.choices.push_back(c == item.gold ? gold : perms[d++]);
  return item;
}

void check_config(const GenConfig& cfg) {
  if (cfg.n_new_task < 1 || cfg.n_retention_per_subtype < 1) throw ConfigError("gen_suite: counts must be >= 1");
  if (cfg.n_choices != vocab::kChoices) {
    throw ConfigError(fmt::format("gen_suite: n_choices must be {}", vocab::kChoices));
  }
  if (content_size(cfg.vocab_size) < vocab::kChoices) {
    throw ConfigError(fmt::format("gen_suite: vocab_size {} leaves fewer than {} content tokens", cfg.vocab_size,
                                  vocab::kChoices));
  }
  if (cfg.new_task_types.empty()) throw ConfigError("gen_suite: no new-task subtypes");
  for (TaskType t : cfg.new_task_types)
    if (!is_new_task(t)) throw ConfigError("gen_suite: '" + to_string(t) + "' is not a new-task subtype");
  const std::set<TaskType> unique(cfg.new_task_types.begin(), cfg.new_task_types.end());
  if (unique.size() != cfg.new_task_types.size()) throw ConfigError("gen_suite: duplicate new-task subtype");

  const int n = content_size(cfg.vocab_size);
  const double new_capacity = falling_factorial(n, 4) * vocab::kChoices;
  const int n_types = static_cast<int>(cfg.new_task_types.size());
  if ((cfg.n_new_task + n_types - 1) / n_types > new_capacity) {
    throw ConfigError(fmt::format("gen_suite: {} new-task items exceed the {} distinct items per subtype",
                                  cfg.n_new_task, new_capacity));
  }
  if (cfg.n_retention_per_subtype > falling_factorial(n, 3)) {
    throw ConfigError(fmt::format("gen_suite: {} retention items per subtype exceed the {} distinct prompts",
                                  cfg.n_retention_per_subtype, falling_factorial(n, 3)));
  }
}

}  // namespace

std::string to_string(TaskType t) {
  for (const auto& [v, name] : kTypeNames)
    if (v == t) return name;
  throw ConfigError("unknown task type");
}

TaskType task_type_from_string(const std::string& s) {
  for (const auto& [v, name] : kTypeNames)
    if (s == name) return v;
  throw ConfigError("unknown task type '" + s + "'");
}

bool is_new_task(TaskType t) {
  return t == TaskType::kLookup || t == TaskType::kShifted || t == TaskType::kMirrored;
}

int marker_token(TaskType t) {
  switch (t) {
    case TaskType::kLookup: return vocab::kTypeMarkerBase + 0;
    case TaskType::kShifted: return vocab::kTypeMarkerBase + 1;
    case TaskType::kMirrored: return vocab::kTypeMarkerBase + 2;
    case TaskType::kCopy: return vocab::kRetentionMarkerBase + 0;
    case TaskType::kReverse: return vocab::kRetentionMarkerBase + 1;
    case TaskType::kSuccessor: return vocab::kRetentionMarkerBase + 2;
  }
  throw ConfigError("unknown task type");
}

int answer_slot(TaskType t, int key) {
  if (key < 0 || key >= vocab::kChoices) throw ConfigError(fmt::format("answer key {} out of range", key));
  switch (t) {
    case TaskType::kLookup: return key;
    case TaskType::kShifted: return (key + 1) % vocab::kChoices;
    case TaskType::kMirrored: return vocab::kChoices - 1 - key;
    default: throw ConfigError("answer_slot: '" + to_string(t) + "' is not a new-task subtype");
  }
}

int successor(int token, int vocab_size) {
  const int n = content_size(vocab_size);
  return vocab::kContentBegin + (token - vocab::kContentBegin + 1) % n;
}

void to_json(nlohmann::json& j, const GenConfig& c) {
  std::vector<std::string> types;
  for (TaskType t : c.new_task_types) types.push_back(to_string(t));
  j = {{"n_new_task", c.n_new_task},
       {"n_retention_per_subtype", c.n_retention_per_subtype},
       {"n_choices", c.n_choices},
       {"vocab_size", c.vocab_size},
       {"new_task_types", types}};
}

void from_json(const nlohmann::json& j, GenConfig& c) {
  c = GenConfig{};
  c.n_new_task = j.value("n_new_task", c.n_new_task);
  c.n_retention_per_subtype = j.value("n_retention_per_subtype", c.n_retention_per_subtype);
  c.n_choices = j.value("n_choices", c.n_choices);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  if (j.contains("new_task_types")) {
    c.new_task_types.clear();
    for (const auto& s : j.at("new_task_types")) c.new_task_types.push_back(task_type_from_string(s.get<std::string>()));
  }
}

std::vector<TaskItem> TaskSuite::retention_of(TaskType t) const {
  std::vector<TaskItem> out;
  for (const auto& it : retention)
    if (it.task_type == t) out.push_back(it);
  return out;
}

TaskSuite gen_suite(const GenConfig& config, std::uint64_t seed) {
  check_config(config);
  TaskSuite suite;
  suite.seed = seed;
  suite.config = config;

  std::set<std::vector<int>> seen;
  Rng rng(derive_seed(seed, {0x7A5C}));
  const int n_types = static_cast<int>(config.new_task_types.size());
  for (int i = 0; i < config.n_new_task; ++i) {
    const TaskType type = config.new_task_types[i % n_types];
    TaskItem item;
    do {
      item = make_new_task(rng, type, config, i);
    } while (!seen.insert(item.prompt).second);
    suite.new_task.push_back(std::move(item));
  }
  for (TaskType type : kRetentionTypes) {
    Rng sub(derive_seed(seed, {0x7A5D, static_cast<std::uint64_t>(type)}));
    for (int i = 0; i < config.n_retention_per_subtype; ++i) {
      TaskItem item;
      do {
        item = make_retention(sub, type, config, i);
      } while (!seen.insert(item.prompt).second);
      suite.retention.push_back(std::move(item));
    }
  }
  return suite;
}

std::string to_string(Hypothesis h) {
  for (const auto& [v, name] : kHypothesisNames)
    if (v == h) return name;
  throw ConfigError("unknown hypothesis");
}

Hypothesis hypothesis_from_string(const std::string& s) {
  for (const auto& [v, name] : kHypothesisNames)
    if (s == name) return v;
  throw ConfigError("unknown hypothesis '" + s + "'");
}

Triplet make_triplet(std::vector<int> base, std::vector<int> source, std::vector<int> target,
                     Hypothesis hypothesis) {
  if (base.size() != source.size()) {
    throw ConfigError(fmt::format("triplet: base length {} != source length {}", base.size(), source.size()));
  }
  if (base == source) throw ConfigError("triplet: base and source are identical");
  if (target.empty()) throw ConfigError("triplet: empty target");
  return Triplet{std::move(base), std::move(source), std::move(target), hypothesis};
}

std::vector<int> diff_positions(const Triplet& t) {
  std::vector<int> out;
  const std::size_t n = std::min(t.base.size(), t.source.size());
  for (std::size_t i = 0; i < n; ++i)
    if (t.base[i] != t.source[i]) out.push_back(static_cast<int>(i));
  return out;
}

std::vector<Triplet> gen_triplets(const TaskSuite& suite, Hypothesis hypothesis, int n, std::uint64_t seed) {
  if (n < 1) throw ConfigError("gen_triplets: n must be >= 1");
  const int vocab_size = suite.config.vocab_size;

  // Every admissible (item, alternative) pair, then a seeded draw without replacement.
  std::vector<std::pair<int, int>> candidates;
  for (int i = 0; i < static_cast<int>(suite.new_task.size()); ++i) {
    const TaskItem& item = suite.new_task[i];
    const int key = item.prompt[kKeyPosition] - vocab::kKeyBase;
    switch (hypothesis) {
      case Hypothesis::kAnswerKeySwap:
        for (int k = 0; k < vocab::kChoices; ++k)
          if (k != key) candidates.emplace_back(i, k);
        break;
      case Hypothesis::kEntitySwap:
        for (int t = vocab::kContentBegin; t < vocab_size; ++t) {
          bool used = false;
          for (const auto& c : item.choices) used = used || c.front() == t;
          if (!used) candidates.emplace_back(i, t);
        }
        break;
      case Hypothesis::kTaskTypeSwap:
        for (TaskType t : suite.config.new_task_types)
          if (t != item.task_type && answer_slot(t, key) != item.gold) candidates.emplace_back(i, static_cast<int>(t));
        break;
    }
  }
  if (static_cast<int>(candidates.size()) < n) {
    throw ConfigError(fmt::format("gen_triplets: {} {} triplets requested, only {} distinct pairs available", n,
                                  to_string(hypothesis), candidates.size()));
  }
  Rng rng(derive_seed(seed, {0x7819, static_cast<std::uint64_t>(hypothesis)}));
  rng.shuffle(std::span<std::pair<int, int>>(candidates));

  std::vector<Triplet> out;
  out.reserve(n);
  for (int j = 0; j < n; ++j) {
    const auto [i, alt] = candidates[j];
    const TaskItem& item = suite.new_task[i];
    std::vector<int> source = item.prompt;
    std::vector<int> target;
    switch (hypothesis) {
      case Hypothesis::kAnswerKeySwap:
        source[kKeyPosition] = vocab::kKeyBase + alt;
        target = item.choices[answer_slot(item.task_type, alt)];
        break;
      case Hypothesis::kEntitySwap:
        source[option_position(item.gold)] = alt;
        target = {alt};
        break;
      case Hypothesis::kTaskTypeSwap: {
        const auto t = static_cast<TaskType>(alt);
        source[kTypeMarkerPosition] = marker_token(t);
        target = item.choices[answer_slot(t, item.prompt[kKeyPosition] - vocab::kKeyBase)];
        break;
      }
    }
    out.push_back(make_triplet(item.prompt, std::move(source), std::move(target), hypothesis));
  }
  return out;
}

int binary_reward(std::span<const int> completion, const TaskItem& item) {
  if (!completion.empty() && completion.back() == vocab::kEndOfAnswer) completion = completion.first(completion.size() - 1);
  const auto& gold = item.gold_choice();
  return std::equal(completion.begin(), completion.end(), gold.begin(), gold.end()) ? 1 : 0;
}

nlohmann::json to_json(const TaskItem& item) {
  return {{"id", item.id},
          {"prompt", item.prompt},
          {"choices", item.choices},
          {"gold", item.gold},
          {"task_type", to_string(item.task_type)}};
}

TaskItem item_from_json(const nlohmann::json& j) {
  TaskItem item;
  item.id = j.at("id").get<std::string>();
  item.prompt = j.at("prompt").get<std::vector<int>>();
  item.choices = j.at("choices").get<std::vector<std::vector<int>>>();
  item.gold = j.at("gold").get<int>();
  item.task_type = task_type_from_string(j.at("task_type").get<std::string>());
  if (item.gold < 0 || item.gold >= static_cast<int>(item.choices.size())) {
    throw ConfigError("task item '" + item.id + "': gold index out of range");
  }
  return item;
}

nlohmann::json to_json(const Triplet& t) {
  return {{"base", t.base}, {"source", t.source}, {"target", t.target}, {"hypothesis", to_string(t.hypothesis)}};
}

Triplet triplet_from_json(const nlohmann::json& j) {
  return make_triplet(j.at("base").get<std::vector<int>>(), j.at("source").get<std::vector<int>>(),
                      j.at("target").get<std::vector<int>>(),
                      hypothesis_from_string(j.at("hypothesis").get<std::string>()));
}

namespace {

template <class T, class Fn>
void write_jsonl(const std::filesystem::path& path, std::span<const T> records, Fn encode) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("cannot open '" + path.string() + "' for writing");
  for (const auto& r : records) out << encode(r).dump() << '\n';
  if (!out) throw ConfigError("write failed for '" + path.string() + "'");
}

template <class Fn>
auto read_jsonl(const std::filesystem::path& path, Fn decode) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open '" + path.string() + "'");
  std::vector<decltype(decode(nlohmann::json{}))> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(decode(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      throw ConfigError(fmt::format("{}:{}: {}", path.string(), lineno, e.what()));
    }
  }
  return out;
}

}  // namespace

void write_items_jsonl(const std::filesystem::path& path, std::span<const TaskItem> items) {
  write_jsonl(path, items, [](const TaskItem& i) { return to_json(i); });
}

std::vector<TaskItem> read_items_jsonl(const std::filesystem::path& path) {
  return read_jsonl(path, item_from_json);
}

void write_triplets_jsonl(const std::filesystem::path& path, std::span<const Triplet> triplets) {
  write_jsonl(path, triplets, [](const Triplet& t) { return to_json(t); });
}

std::vector<Triplet> read_triplets_jsonl(const std::filesystem::path& path) {
  return read_jsonl(path, triplet_from_json);
}

}  // namespace circuitlab::tasks
