#include <filesystem>
#include <map>
#include <set>

#include <gtest/gtest.h>

#include "circuitlab/errors.hpp"
#include "circuitlab/rng.hpp"
#include "circuitlab/scoring.hpp"
#include "circuitlab/tasks.hpp"

using namespace circuitlab;
using namespace circuitlab::tasks;

TEST(GenSuite, DeterministicInSeed) {
  const GenConfig cfg;
  const auto a = gen_suite(cfg, 3);
  const auto b = gen_suite(cfg, 3);
  EXPECT_EQ(a.new_task, b.new_task);
  EXPECT_EQ(a.retention, b.retention);
  EXPECT_NE(a.new_task, gen_suite(cfg, 4).new_task);
}

TEST(GenSuite, CountsIdsAndLayout) {
  GenConfig cfg;
  cfg.n_new_task = 90;
  cfg.n_retention_per_subtype = 20;
  const auto s = gen_suite(cfg, 0);
  ASSERT_EQ(s.new_task.size(), 90u);
  ASSERT_EQ(s.retention.size(), 60u);
  std::set<std::string> ids;
  std::set<std::vector<int>> prompts;
  std::map<TaskType, int> per_type;
  for (const auto& it : s.new_task) {
    ids.insert(it.id);
    prompts.insert(it.prompt);
    ++per_type[it.task_type];
    ASSERT_EQ(it.prompt.size(), static_cast<std::size_t>(kNewTaskPromptLength));
    ASSERT_EQ(it.choices.size(), 4u);
    EXPECT_EQ(it.prompt[kTypeMarkerPosition], marker_token(it.task_type));
    const int key = it.prompt[kKeyPosition] - vocab::kKeyBase;
    EXPECT_EQ(it.gold, answer_slot(it.task_type, key));
    for (int slot = 0; slot < 4; ++slot) EXPECT_EQ(it.choices[slot], std::vector<int>{it.prompt[option_position(slot)]});
  }
  for (const auto& it : s.retention) {
    ids.insert(it.id);
    prompts.insert(it.prompt);
    ASSERT_EQ(it.prompt.size(), static_cast<std::size_t>(kRetentionPromptLength));
    EXPECT_EQ(it.gold_choice().size(), 3u);
  }
  EXPECT_EQ(ids.size(), 150u);
  EXPECT_EQ(prompts.size(), 150u);  // new-task and retention prompts are disjoint
  EXPECT_EQ(per_type[TaskType::kLookup], 30);
  EXPECT_EQ(per_type[TaskType::kShifted], 30);
  EXPECT_EQ(per_type[TaskType::kMirrored], 30);
  EXPECT_EQ(s.retention_of(TaskType::kReverse).size(), 20u);
}

TEST(GenSuite, RetentionAnswersFollowTheirRule) {
  const auto s = gen_suite(GenConfig{}, 1);
  for (const auto& it : s.retention) {
    const std::vector<int> abc(it.prompt.begin() + 2, it.prompt.begin() + 5);
    std::vector<int> expect;
    switch (it.task_type) {
      case TaskType::kCopy: expect = abc; break;
      case TaskType::kReverse: expect = {abc[2], abc[1], abc[0]}; break;
      case TaskType::kSuccessor:
        for (int t : abc) expect.push_back(t == 63 ? 16 : t + 1);
        break;
      default: FAIL();
    }
    EXPECT_EQ(it.gold_choice(), expect) << it.id;
  }
}

TEST(GenSuite, ChoicesAreDistinctAndGoldIsBalanced) {
  GenConfig cfg;
  cfg.n_new_task = 1002;
  cfg.n_retention_per_subtype = 334;
  const auto s = gen_suite(cfg, 9);
  std::array<int, 4> new_gold{}, ret_gold{};
  for (const auto& it : s.new_task) {
    ++new_gold[it.gold];
    EXPECT_EQ(std::set<std::vector<int>>(it.choices.begin(), it.choices.end()).size(), 4u);
  }
  for (const auto& it : s.retention) {
    ++ret_gold[it.gold];
    EXPECT_EQ(std::set<std::vector<int>>(it.choices.begin(), it.choices.end()).size(), 4u);
  }
  // Each gold slot within 4 standard deviations of 1/4.
  for (int k = 0; k < 4; ++k) {
    EXPECT_NEAR(new_gold[k] / 1002.0, 0.25, 4 * std::sqrt(0.1875 / 1002)) << k;
    EXPECT_NEAR(ret_gold[k] / 1002.0, 0.25, 4 * std::sqrt(0.1875 / 1002)) << k;
  }
}

TEST(GenSuite, CapacityAndConfigErrors) {
  GenConfig cfg;
  cfg.vocab_size = 20;  // four content tokens: 96 new-task items per subtype, 24 retention prompts
  cfg.n_new_task = 3 * 96;
  cfg.n_retention_per_subtype = 24;
  const auto full = gen_suite(cfg, 0);
  EXPECT_EQ(full.new_task.size(), 288u);
  cfg.n_new_task = 3 * 96 + 1;
  EXPECT_THROW(gen_suite(cfg, 0), ConfigError);
  cfg.n_new_task = 10;
  cfg.n_retention_per_subtype = 25;
  EXPECT_THROW(gen_suite(cfg, 0), ConfigError);

  GenConfig bad;
  bad.new_task_types = {TaskType::kCopy};
  EXPECT_THROW(gen_suite(bad, 0), ConfigError);
  bad = GenConfig{};
  bad.new_task_types = {TaskType::kLookup, TaskType::kLookup};
  EXPECT_THROW(gen_suite(bad, 0), ConfigError);
  bad = GenConfig{};
  bad.n_choices = 3;
  EXPECT_THROW(gen_suite(bad, 0), ConfigError);
  bad = GenConfig{};
  bad.n_new_task = 0;
  EXPECT_THROW(gen_suite(bad, 0), ConfigError);
}

TEST(Triplets, DifferOnlyWhereTheHypothesisSays) {
  const auto s = gen_suite(GenConfig{}, 2);
  const std::map<Hypothesis, std::vector<int>> allowed{
      {Hypothesis::kAnswerKeySwap, {kKeyPosition}},
      {Hypothesis::kEntitySwap, {3, 5, 7, 9}},
      {Hypothesis::kTaskTypeSwap, {kTypeMarkerPosition}},
  };
  for (const auto& [hyp, positions] : allowed) {
    const auto ts = gen_triplets(s, hyp, 64, 5);
    ASSERT_EQ(ts.size(), 64u);
    std::set<std::pair<std::vector<int>, std::vector<int>>> pairs;
    for (const auto& t : ts) {
      const auto d = diff_positions(t);
      ASSERT_EQ(d.size(), 1u);
      EXPECT_NE(std::find(positions.begin(), positions.end(), d[0]), positions.end());
      EXPECT_EQ(t.hypothesis, hyp);
      EXPECT_EQ(t.target.size(), 1u);
      pairs.emplace(t.base, t.source);
    }
    EXPECT_EQ(pairs.size(), 64u);
    EXPECT_EQ(ts, gen_triplets(s, hyp, 64, 5));
  }
}

TEST(Triplets, TargetIsTheSourceRunsAnswer) {
  const auto s = gen_suite(GenConfig{}, 2);
  for (Hypothesis h : {Hypothesis::kAnswerKeySwap, Hypothesis::kEntitySwap, Hypothesis::kTaskTypeSwap}) {
    for (const auto& t : gen_triplets(s, h, 50, 1)) {
      const TaskType type =
          static_cast<TaskType>(t.source[kTypeMarkerPosition] - vocab::kTypeMarkerBase);
      const int slot = answer_slot(type, t.source[kKeyPosition] - vocab::kKeyBase);
      EXPECT_EQ(t.target, std::vector<int>{t.source[option_position(slot)]}) << to_string(h);
    }
  }
}

TEST(Triplets, ValidationAndSupply) {
  EXPECT_THROW(make_triplet({1, 2}, {1, 2}, {5}, Hypothesis::kAnswerKeySwap), ConfigError);
  EXPECT_THROW(make_triplet({1, 2}, {1, 2, 3}, {5}, Hypothesis::kAnswerKeySwap), ConfigError);
  EXPECT_THROW(make_triplet({1, 2}, {1, 3}, {}, Hypothesis::kAnswerKeySwap), ConfigError);
  GenConfig cfg;
  cfg.n_new_task = 3;
  const auto s = gen_suite(cfg, 0);
  EXPECT_NO_THROW(gen_triplets(s, Hypothesis::kAnswerKeySwap, 9, 0));
  EXPECT_THROW(gen_triplets(s, Hypothesis::kAnswerKeySwap, 10, 0), ConfigError);
}

TEST(Reward, Examples) {
  TaskItem item;
  item.choices = {{20, 21, 22}, {22, 21, 20}};
  item.gold = 0;
  const std::vector<int> exact{20, 21, 22}, with_eoa{20, 21, 22, 2}, two_eoa{20, 21, 22, 2, 2}, prefix{20, 21},
      longer{20, 21, 22, 23}, wrong{22, 21, 20}, empty{};
  EXPECT_EQ(binary_reward(exact, item), 1);
  EXPECT_EQ(binary_reward(with_eoa, item), 1);
  EXPECT_EQ(binary_reward(two_eoa, item), 0);
  EXPECT_EQ(binary_reward(prefix, item), 0);
  EXPECT_EQ(binary_reward(longer, item), 0);
  EXPECT_EQ(binary_reward(wrong, item), 0);
  EXPECT_EQ(binary_reward(empty, item), 0);
}

TEST(Reward, MatchesOracleOnRandomCompletions) {
  Rng rng(17);
  TaskItem item;
  item.choices = {{16, 17}, {17, 16}};
  for (int c = 0; c < 10000; ++c) {
    item.gold = static_cast<int>(rng.below(2));
    std::vector<int> comp(rng.below(5));
    for (auto& t : comp) t = static_cast<int>(rng.below(4)) == 0 ? 2 : 16 + static_cast<int>(rng.below(2));
    // Oracle: strip exactly one trailing end-of-answer token, then compare.
    std::vector<int> stripped = comp;
    if (!stripped.empty() && stripped.back() == 2) stripped.pop_back();
    ASSERT_EQ(binary_reward(comp, item), stripped == item.gold_choice() ? 1 : 0);
  }
}

TEST(Jsonl, RoundTrip) {
  const auto s = gen_suite(GenConfig{}, 5);
  const auto dir = std::filesystem::temp_directory_path() / "circuitlab_tasks_test";
  std::filesystem::create_directories(dir);
  write_items_jsonl(dir / "items.jsonl", s.retention);
  EXPECT_EQ(read_items_jsonl(dir / "items.jsonl"), s.retention);
  const auto ts = gen_triplets(s, Hypothesis::kEntitySwap, 20, 0);
  write_triplets_jsonl(dir / "t.jsonl", ts);
  EXPECT_EQ(read_triplets_jsonl(dir / "t.jsonl"), ts);
  std::filesystem::remove_all(dir);

  auto j = to_json(s.new_task[0]);
  j["gold"] = 7;
  EXPECT_THROW(item_from_json(j), ConfigError);
  j = to_json(s.new_task[0]);
  j["task_type"] = "nope";
  EXPECT_THROW(item_from_json(j), ConfigError);
  EXPECT_THROW(read_items_jsonl("/nonexistent/items.jsonl"), ConfigError);
}

TEST(Scoring, InputsAndAnswers) {
  const auto s = gen_suite(GenConfig{}, 5);
  const auto& nt = s.new_task[0];
  EXPECT_TRUE(scoring::single_token_choices(nt));
  EXPECT_EQ(scoring::item_inputs(nt), std::vector<std::vector<int>>{nt.prompt});
  const auto& rt = s.retention[0];
  EXPECT_FALSE(scoring::single_token_choices(rt));
  const auto inputs = scoring::item_inputs(rt);
  ASSERT_EQ(inputs.size(), 4u);
  EXPECT_EQ(inputs[0].size(), rt.prompt.size() + 2);
  auto answer = rt.gold_choice();
  answer.push_back(vocab::kEndOfAnswer);
  EXPECT_EQ(scoring::sft_answer(rt), answer);
  const std::vector<double> v{0.1, 0.3, 0.3, -1.0};
  EXPECT_EQ(scoring::argmax(v), 1);
}
