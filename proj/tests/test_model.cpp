#include <cstring>
#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "circuitlab/checkpoint.hpp"
#include "circuitlab/errors.hpp"
#include "circuitlab/planted.hpp"
#include "circuitlab/tasks.hpp"
#include "circuitlab/transformer.hpp"
#include "support.hpp"

using namespace circuitlab;
using namespace circuitlab::model;
using namespace testing_support;

TEST(ModelConfig, RejectsInconsistentDimensions) {
  ModelConfig c = tiny_config();
  c.d_head = 8;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.n_layers = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_NO_THROW(tiny_config().validate());
}

TEST(ModelConfig, HeadIndexingIsLayerMajor) {
  const auto c = tiny_config();
  const auto heads = all_heads(c);
  ASSERT_EQ(heads.size(), 4u);
  for (int i = 0; i < 4; ++i) {
    EXPECT_EQ(flat_index(c, heads[i]), i);
    EXPECT_EQ(head_at(c, i), heads[i]);
  }
  EXPECT_TRUE(std::is_sorted(heads.begin(), heads.end()));
}

TEST(Forward, RejectsBadTokensAndLengths) {
  const auto p = init_params(tiny_config());
  const std::vector<int> bad{1, 64};
  EXPECT_THROW(forward(p, bad), ConfigError);
  const std::vector<int> too_long(25, 1);
  EXPECT_THROW(forward(p, too_long), ConfigError);
}

TEST(Forward, IdentityPatchReproducesLogits) {
  Rng rng(11);
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto p = init_params(tiny_config(s));
    const auto tokens = random_tokens(rng, 3 + static_cast<int>(rng.below(20)), 64);
    const auto ref = forward(p, tokens, nullptr, true);
    const auto heads = all_heads(p.config);
    const auto plan = substitution_plan(*ref.cache, HeadSet(heads.begin(), heads.end()));
    EXPECT_LT(max_abs_diff(forward(p, tokens, &plan).logits, ref.logits), 1e-6);
  }
}

TEST(Forward, InterpolationEndpoints) {
  Rng rng(5);
  const auto p = init_params(tiny_config(3));
  const auto base = random_tokens(rng, 12, 64);
  const auto source = random_tokens(rng, 12, 64);
  const auto b = forward(p, base, nullptr, true);
  const auto s = forward(p, source, nullptr, true);
  const HeadId h{0, 0};

  PatchPlan m0;
  m0.interpolate(h, 0, 12, 0.0, s.cache->head(h));
  EXPECT_LT(max_abs_diff(forward(p, base, &m0).logits, b.logits), 1e-6);

  PatchPlan m1, sub;
  m1.interpolate(h, 0, 12, 1.0, s.cache->head(h));
  sub.substitute(h, 0, 12, s.cache->head(h));
  const auto with_m1 = forward(p, base, &m1).logits;
  EXPECT_LT(max_abs_diff(with_m1, forward(p, base, &sub).logits), 1e-6);
  EXPECT_GT(max_abs_diff(with_m1, b.logits), 1e-6);

  PatchPlan half;
  half.interpolate(h, 0, 12, 0.25, s.cache->head(h));
  const auto tape = CompiledModel(p).forward_tape(base, &half);
  const MatD z = tape.layers[0].z_patched.leftCols(16);
  EXPECT_LT(max_abs_diff(z, 0.75 * b.cache->head(h) + 0.25 * s.cache->head(h)), 1e-12);
  // The cache records what the head computed, before any patch.
  EXPECT_LT(max_abs_diff(forward(p, base, &half, true).cache->head(h), b.cache->head(h)), 1e-12);
}

TEST(PatchPlan, RejectsOverlapAndBadCoefficients) {
  PatchPlan plan;
  plan.zero({0, 0}, 0, 4);
  EXPECT_THROW(plan.zero({0, 0}, 3, 6), ConfigError);
  EXPECT_NO_THROW(plan.zero({0, 0}, 4, 6));
  EXPECT_THROW(plan.interpolate({0, 1}, 0, 2, 1.5, MatD::Zero(1, 16)), ConfigError);
  EXPECT_THROW(plan.interpolate({0, 1}, 0, 2, -0.1, MatD::Zero(1, 16)), ConfigError);
  PatchPlan outside;
  outside.zero({5, 0}, 0, 1);
  EXPECT_THROW(outside.validate(tiny_config(), 4), ConfigError);
  PatchPlan wide;
  wide.substitute({0, 0}, 0, 2, MatD::Zero(2, 8));
  EXPECT_THROW(wide.validate(tiny_config(), 4), ConfigError);
}

TEST(Forward, ZeroingADeadHeadChangesNothing) {
  auto p = init_params(tiny_config(2));
  p.layers[1].wo.middleRows(16, 16).setZero();  // head (1, 1)
  Rng rng(3);
  const auto tokens = random_tokens(rng, 10, 64);
  PatchPlan plan;
  plan.zero({1, 1}, 0, 10);
  EXPECT_LT(max_abs_diff(forward(p, tokens, &plan).logits, forward(p, tokens).logits), 1e-12);
}

// ---- gradients ----

namespace {

double loss_at(const ModelParams& p, const std::vector<int>& tokens, const LossSpec& loss) {
  return compute_gradients(CompiledModel(p), tokens, nullptr, loss, {.params = false}).loss;
}

}  // namespace

TEST(Gradients, WeightsMatchCentralDifferences) {
  const auto p = init_params(tiny_config(7));
  Rng rng(9);
  const auto tokens = random_tokens(rng, 10, 64);
  LossSpec loss;
  for (int pos = 4; pos < 9; ++pos) loss.nll.push_back({pos, tokens[pos + 1], 0.2});
  const auto g = compute_gradients(CompiledModel(p), tokens, nullptr, loss);
  ASSERT_TRUE(g.params);

  auto params = p;
  auto tensors = params.tensors();
  const auto grads = g.params->tensors();
  int checked = 0;
  for (int attempt = 0; attempt < 2000 && checked < 24; ++attempt) {
    const auto ti = rng.below(tensors.size());
    const auto k = rng.below(tensors[ti].data.size());
    const double analytic = grads[ti].data[k];
    if (std::abs(analytic) < 1e-4) continue;
    float& w = tensors[ti].data[k];
    const float orig = w;
    const float plus = orig + 1e-3f, minus = orig - 1e-3f;
    w = plus;
    const double lp = loss_at(params, tokens, loss);
    w = minus;
    const double lm = loss_at(params, tokens, loss);
    w = orig;
    const double numeric = (lp - lm) / (static_cast<double>(plus) - static_cast<double>(minus));
    EXPECT_LT(std::abs(analytic - numeric) / std::max(std::abs(analytic), std::abs(numeric)), 1e-4)
        << tensors[ti].name << "[" << k << "] analytic " << analytic << " numeric " << numeric;
    ++checked;
  }
  EXPECT_GE(checked, 20);
}

TEST(Gradients, PatchCoefficientsMatchCentralDifferences) {
  const auto p = init_params(tiny_config(4));
  const CompiledModel m(p);
  Rng rng(21);
  const auto base = random_tokens(rng, 9, 64);
  const auto source = random_tokens(rng, 9, 64);
  const auto src = m.forward(source, nullptr, true);
  auto make_plan = [&](const std::vector<double>& coef) {
    PatchPlan plan;
    int i = 0;
    for (const auto& h : all_heads(p.config)) plan.interpolate(h, 0, 9, coef[i++], src.cache->head(h));
    return plan;
  };
  LossSpec loss;
  loss.nll.push_back({8, source[3], 1.0});
  const std::vector<double> coef{0.3, 0.6, 0.45, 0.8};
  const auto plan = make_plan(coef);
  const auto g = compute_gradients(m, base, &plan, loss, {.params = false, .patch_coefficients = true});
  ASSERT_EQ(g.coefficient_grads.size(), 4u);
  for (int i = 0; i < 4; ++i) {
    auto cp = coef, cm = coef;
    cp[i] += 1e-4;
    cm[i] -= 1e-4;
    const auto pp = make_plan(cp), pm = make_plan(cm);
    const double numeric = (compute_gradients(m, base, &pp, loss, {.params = false}).loss -
                            compute_gradients(m, base, &pm, loss, {.params = false}).loss) /
                           2e-4;
    EXPECT_LT(std::abs(g.coefficient_grads[i] - numeric) / std::max(std::abs(numeric), 1e-8), 1e-4);
  }
}

TEST(Gradients, ConstantLossGivesZeroGradient) {
  const auto p = init_params(tiny_config(1));
  const std::vector<int> tokens{1, 5, 9, 13};
  const auto g = compute_gradients(CompiledModel(p), tokens, nullptr, LossSpec{});
  EXPECT_EQ(g.loss, 0.0);
  EXPECT_EQ(squared_norm(*g.params), 0.0);
}

TEST(Gradients, AnchorAtReferenceIsExactlyZero) {
  const auto p = init_params(tiny_config(6));
  const CompiledModel m(p);
  const std::vector<int> tokens{1, 20, 30, 40, 50};
  const auto ref = m.forward(tokens, nullptr, true);
  LossSpec plain;
  plain.nll.push_back({4, 7, 1.0});
  LossSpec anchored = plain;
  anchored.anchor = ActivationAnchor{all_heads(p.config), &*ref.cache, 1e4};
  const auto a = compute_gradients(m, tokens, nullptr, plain);
  const auto b = compute_gradients(m, tokens, nullptr, anchored);
  EXPECT_EQ(a.loss, b.loss);
  auto ta = a.params->tensors();
  auto tb = b.params->tensors();
  for (std::size_t i = 0; i < ta.size(); ++i)
    EXPECT_TRUE(std::equal(ta[i].data.begin(), ta[i].data.end(), tb[i].data.begin())) << ta[i].name;
}

// ---- log-probs, geometric mean, sampling ----

TEST(SeqLogProbs, MatchesIndependentSoftmax) {
  const auto p = init_params(tiny_config(8));
  const std::vector<int> prompt{1, 17, 23, 42}, completion{5, 60, 2};
  const auto lp = seq_log_probs(p, prompt, completion);
  ASSERT_EQ(lp.size(), 3u);
  std::vector<int> all = prompt;
  all.insert(all.end(), completion.begin(), completion.end() - 1);
  const auto logits = forward(p, all).logits;
  for (int t = 0; t < 3; ++t) {
    const int row = static_cast<int>(prompt.size()) - 1 + t;
    double mx = -1e300;
    for (int v = 0; v < 64; ++v) mx = std::max(mx, logits(row, v));
    double z = 0.0;
    for (int v = 0; v < 64; ++v) z += std::exp(logits(row, v) - mx);
    EXPECT_NEAR(lp[t], logits(row, completion[t]) - mx - std::log(z), 1e-10);
    EXPECT_LE(lp[t], 0.0);
  }
}

TEST(SeqLogProbs, UniformModelGivesLogVocab) {
  auto p = init_params(tiny_config(8));
  p.unembed.setZero();
  for (double v : seq_log_probs(p, std::vector<int>{1, 2, 3}, std::vector<int>{4, 5}))
    EXPECT_NEAR(v, -std::log(64.0), 1e-12);
}

TEST(SeqLogProbs, RejectsOverflowAndEmptyCompletion) {
  const auto p = init_params(tiny_config());
  EXPECT_THROW(seq_log_probs(p, std::vector<int>(20, 1), std::vector<int>(6, 1)), ConfigError);
  EXPECT_THROW(seq_log_probs(p, std::vector<int>{1}, std::vector<int>{}), ConfigError);
}

TEST(GeometricMean, Examples) {
  EXPECT_NEAR(geometric_mean_prob(std::vector<double>{std::log(0.25)}), 0.25, 1e-15);
  EXPECT_EQ(geometric_mean_prob(std::vector<double>{0, 0, 0}), 1.0);
  EXPECT_NEAR(geometric_mean_prob(std::vector<double>{std::log(0.5), std::log(0.125)}), 0.25, 1e-15);
  EXPECT_THROW(geometric_mean_prob(std::vector<double>{}), ConfigError);
}

TEST(GeometricMean, MatchesProductRootOnRandomCases) {
  Rng rng(1);
  for (int c = 0; c < 1000; ++c) {
    const int T = 1 + static_cast<int>(rng.below(6));
    std::vector<double> probs(T), logs(T);
    double prod = 1.0;
    for (int i = 0; i < T; ++i) {
      probs[i] = 0.01 + 0.99 * rng.uniform();
      logs[i] = std::log(probs[i]);
      prod *= probs[i];
    }
    const double g = geometric_mean_prob(logs);
    EXPECT_NEAR(g, std::pow(prod, 1.0 / T), 1e-12);
    EXPECT_GE(g, *std::min_element(probs.begin(), probs.end()) - 1e-15);
    EXPECT_LE(g, *std::max_element(probs.begin(), probs.end()) + 1e-15);
  }
}

TEST(Sample, DeterministicAndGreedy) {
  const auto p = init_params(tiny_config(3));
  const CompiledModel m(p);
  const std::vector<int> prompt{1, 10, 20};
  SampleOptions opt{.temperature = 1.0, .max_new = 6};
  Rng a(42), b(42);
  EXPECT_EQ(sample(m, prompt, opt, a), sample(m, prompt, opt, b));
  opt.greedy = true;
  Rng c(1), d(2);
  const auto g1 = sample(m, prompt, opt, c);
  EXPECT_EQ(g1, sample(m, prompt, opt, d));
  // Greedy picks the argmax at every step.
  std::vector<int> seq = prompt;
  for (int tok : g1) {
    EXPECT_EQ(argmax_last(m.forward(seq).logits), tok);
    seq.push_back(tok);
  }
}

TEST(Sample, StopsAtStopToken) {
  const auto p = init_params(tiny_config(3));
  const CompiledModel m(p);
  const std::vector<int> prompt{1, 10, 20};
  SampleOptions opt{.temperature = 1.0, .max_new = 6, .greedy = true};
  Rng r(0);
  const auto full = sample(m, prompt, opt, r);
  opt.stop_token = full.front();
  EXPECT_EQ(sample(m, prompt, opt, r), std::vector<int>{full.front()});
  opt.max_new = 30;
  EXPECT_THROW(sample(m, prompt, opt, r), ConfigError);
  opt.max_new = 2;
  opt.temperature = 0.0;
  opt.greedy = false;
  EXPECT_THROW(sample(m, prompt, opt, r), ConfigError);
}

TEST(Sample, DominantLogitAgreesWithGreedy) {
  PlantedSpec spec;
  spec.logit_margin = 25.0;
  const auto pm = build_planted_model(spec);
  const CompiledModel m(pm.params);
  const auto suite = lookup_suite(1, 3);
  const auto& prompt = suite.new_task[0].prompt;
  Rng g(0);
  const auto greedy = sample(m, prompt, {.max_new = 1, .greedy = true}, g);
  int agree = 0;
  for (std::uint64_t s = 0; s < 1000; ++s) {
    Rng r(s);
    agree += sample(m, prompt, {.temperature = 1.0, .max_new = 1}, r) == greedy;
  }
  EXPECT_GT(agree, 990);
}

// ---- checkpoints ----

TEST(Checkpoint, RoundTripIsBitExact) {
  const auto p = init_params(tiny_config(12));
  const auto path = std::filesystem::temp_directory_path() / "circuitlab_roundtrip.ckpt";
  save_checkpoint(p, path);
  const auto q = load_checkpoint(path);
  EXPECT_TRUE(bit_equal(p, q));
  EXPECT_EQ(p.config, q.config);
  std::filesystem::remove(path);
}

namespace {

// Splits an encoded checkpoint into its manifest and payload.
std::pair<nlohmann::json, std::string> split(const std::string& bytes) {
  std::uint32_t n = 0;
  std::memcpy(&n, bytes.data() + 4, 4);
  return {nlohmann::json::parse(bytes.substr(8, n)), bytes.substr(8 + n)};
}

std::string join(const nlohmann::json& manifest, const std::string& payload) {
  const std::string m = manifest.dump();
  const auto n = static_cast<std::uint32_t>(m.size());
  std::string out = "CFG1";
  out.append(reinterpret_cast<const char*>(&n), 4);
  return out + m + payload;
}

}  // namespace

TEST(Checkpoint, RejectsCorruptContainers) {
  const auto bytes = encode_checkpoint(init_params(tiny_config()));
  EXPECT_NO_THROW(decode_checkpoint(bytes));

  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bad_magic), CheckpointError);

  auto [manifest, payload] = split(bytes);
  auto fewer = manifest;
  fewer["tensors"].erase(fewer["tensors"].size() - 1);
  EXPECT_THROW(decode_checkpoint(join(fewer, payload)), CheckpointError);

  const std::string short_payload = payload.substr(0, payload.size() - 4);
  try {
    decode_checkpoint(join(manifest, short_payload));
    FAIL() << "truncated payload accepted";
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("unembed"), std::string::npos) << e.what();
  }

  auto reshaped = manifest;
  reshaped["tensors"][0]["shape"] = {1, 2};
  EXPECT_THROW(decode_checkpoint(join(reshaped, payload)), CheckpointError);
}

// ---- planted model ----

TEST(Planted, OnlyThePlantedHeadCarriesTheAnswer) {
  const auto pm = build_planted_model(PlantedSpec{});
  const CompiledModel m(pm.params);
  const auto suite = lookup_suite(200, 1);
  const auto triplets = tasks::gen_triplets(suite, tasks::Hypothesis::kAnswerKeySwap, 64, 2);
  const auto heads = all_heads(pm.params.config);
  std::vector<int> flips(heads.size(), 0);
  int empty_flips = 0, full_hits = 0;
  for (const auto& t : triplets) {
    const auto src = m.forward(t.source, nullptr, true);
    const int base_answer = argmax_last(m.forward(t.base).logits);
    for (std::size_t i = 0; i < heads.size(); ++i) {
      const auto plan = substitution_plan(*src.cache, {heads[i]});
      flips[i] += argmax_last(m.forward(t.base, &plan).logits) == t.target[0];
    }
    PatchPlan empty;
    empty_flips += argmax_last(m.forward(t.base, &empty).logits) != base_answer;
    const auto all = substitution_plan(*src.cache, HeadSet(heads.begin(), heads.end()));
    full_hits += argmax_last(m.forward(t.base, &all).logits) == argmax_last(src.logits) &&
                 argmax_last(src.logits) == t.target[0];
  }
  for (std::size_t i = 0; i < heads.size(); ++i) {
    if (pm.planted.count(heads[i])) {
      EXPECT_EQ(flips[i], 64);
    } else {
      EXPECT_LE(flips[i], 3) << to_string(heads[i]);
    }
  }
  EXPECT_EQ(empty_flips, 0);
  EXPECT_EQ(full_hits, 64);
}

TEST(Planted, RejectsInfeasibleSpecs) {
  PlantedSpec spec;
  spec.head = {0, 1};
  EXPECT_THROW(build_planted_model(spec), ConfigError);
  spec = PlantedSpec{};
  spec.config.d_head = 16;
  spec.config.d_model = 64;
  EXPECT_THROW(build_planted_model(spec), ConfigError);
}
