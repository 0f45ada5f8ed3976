#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "dhan/trainer.hpp"
#include "test_util.hpp"

using namespace dhan;

namespace {

EpisodeTrace trace_with(std::size_t steps, std::size_t predicted) {
  EpisodeTrace tr;
  tr.steps.resize(steps);
  tr.predicted = predicted;
  return tr;
}

ModelConfig tiny_model(std::size_t steps = 5) {
  ModelConfig c;
  c.sanet.channels = 4;
  c.fusion_width = 8;
  c.hidden = 8;
  c.glimpse = 8;
  c.steps = steps;
  return c;
}

SyntheticConfig tiny_synthetic(std::size_t count) {
  SyntheticConfig s;
  s.canvas = 24;
  s.pattern = 8;
  s.distractors = 2;
  s.distractor_size = 4;
  s.train_count = count;
  s.test_count = 0;
  s.patient_size = 10;
  return s;
}

// Label 0 images are black, label 1 white.
std::vector<LabeledImage> trivial_images(std::size_t count) {
  std::vector<LabeledImage> out;
  for (std::size_t i = 0; i < count; ++i) {
    LabeledImage li;
    li.label = i % 2;
    li.image = Image(8, 8, 3, li.label == 1 ? 1.0f : 0.0f);
    li.patient = "P" + std::to_string(i % 4);
    out.push_back(std::move(li));
  }
  return out;
}

template <class T>
std::vector<std::vector<T>> snapshot(const ParamList<T>& params, bool trainable_only) {
  std::vector<std::vector<T>> out;
  for (const auto& p : params) {
    if (trainable_only && !p.trainable) continue;
    out.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  }
  return out;
}

// Per-episode log-probabilities of sampled arms under softmax(logits).
Tensor<double> arm_logprobs(const Tensor<double>& logits, const std::vector<std::size_t>& arms) {
  auto lp = log(nn::softmax(logits));  // (1, 2)
  auto rows = matmul(Tensor<double>::full({arms.size(), 1}, 1.0), lp);
  return pick(rows, std::span<const std::size_t>(arms));
}

}  // namespace

TEST(Rewards, CorrectAtLastStep) {
  auto tr = trace_with(5, 1);
  assign_rewards(tr, 1);
  for (std::size_t t = 0; t < 4; ++t) EXPECT_EQ(tr.steps[t].reward, 0.0);
  EXPECT_EQ(tr.steps[4].reward, 1.0);
  EXPECT_EQ(tr.total_return, 1.0);
}

TEST(Rewards, WrongPredictionGetsNothing) {
  auto tr = trace_with(5, 0);
  assign_rewards(tr, 1);
  for (const auto& s : tr.steps) EXPECT_EQ(s.reward, 0.0);
  EXPECT_EQ(tr.total_return, 0.0);
}

TEST(Rewards, SingleStep) {
  auto tr = trace_with(1, 0);
  assign_rewards(tr, 0);
  EXPECT_EQ(tr.steps[0].reward, 1.0);
  EXPECT_EQ(tr.total_return, 1.0);
}

TEST(Surrogate, CenteredAdvantageGivesZeroGradient) {
  Tensor<double> lp({3}, {-0.1, -2.0, -0.7}, true);
  const std::vector<double> returns{0.5, 0.5, 0.5};
  backward(policy_gradient_surrogate(lp, returns, 0.5));
  for (auto g : lp.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Surrogate, SingleTraceIsItsLogProbSum) {
  Tensor<double> lp({1}, {-1.75}, true);
  const std::vector<double> returns{1.0};
  EXPECT_DOUBLE_EQ(policy_gradient_surrogate(lp, returns, 0.0).item(), -1.75);
}

TEST(Surrogate, EmptyBatchThrows) {
  EXPECT_THROW(policy_gradient_surrogate(Tensor<double>::zeros({0}), std::vector<double>{}, 0.0), std::invalid_argument);
}

TEST(Surrogate, BanditExactGradient) {
  // J(z) = sum_a p_a R_a with R = (1, 0): differentiating J itself is the
  // exact enumeration over both outcomes.
  Tensor<double> logits({1, 2}, {0.0, 0.0}, true);
  auto probs = nn::softmax(logits);
  backward(narrow(reshape(probs, {2}), 0, 0, 1));
  EXPECT_DOUBLE_EQ(logits.grad()[0], 0.25);
  EXPECT_DOUBLE_EQ(logits.grad()[1], -0.25);
}

TEST(Surrogate, BanditMonteCarloMatchesExactWithAndWithoutBaseline) {
  const int n = 10000;
  const std::vector<double> probs{0.5, 0.5};
  for (double baseline : {0.0, 0.5, 0.9}) {
    Rng rng(42);
    std::vector<std::size_t> arms(n);
    std::vector<double> returns(n);
    for (int i = 0; i < n; ++i) {
      arms[i] = sample_action(std::span<const double>(probs), rng, Mode::train).label;
      returns[i] = arms[i] == 0 ? 1.0 : 0.0;
    }
    Tensor<double> logits({1, 2}, {0.0, 0.0}, true);
    backward(policy_gradient_surrogate(arm_logprobs(logits, arms), returns, baseline));
    // Per-episode estimate: (R - b)(onehot(a) - p), for the standard error.
    for (std::size_t k = 0; k < 2; ++k) {
      double s = 0, s2 = 0;
      for (int i = 0; i < n; ++i) {
        const double g = (returns[i] - baseline) * ((arms[i] == k ? 1.0 : 0.0) - 0.5);
        s += g;
        s2 += g * g;
      }
      const double mean = s / n, se = std::sqrt((s2 / n - mean * mean) / n);
      EXPECT_NEAR(logits.grad()[k], mean, 1e-12);
      EXPECT_NEAR(mean, k == 0 ? 0.25 : -0.25, 3 * se) << "baseline " << baseline;
    }
  }
}

TEST(TotalLoss, Examples) {
  EXPECT_NEAR(total_loss(Tensor<double>({1}, {0.4}), Tensor<double>({1}, {0.7})).item(), 0.3, 1e-15);
  EXPECT_EQ(total_loss(Tensor<double>({1}, {0.0}), Tensor<double>({1}, {0.0})).item(), 0.0);
}

TEST(TotalLoss, UniformPredictionsCrossEntropy) {
  const auto probs = Tensor<double>::full({4, 2}, 0.5);
  for (const auto& labels : {std::vector<std::size_t>{0, 0, 0, 0}, {0, 1, 1, 0}, {1, 1, 1, 1}}) {
    EXPECT_NEAR(nn::cross_entropy(probs, std::span<const std::size_t>(labels)).item(), 0.6931, 5e-5);
  }
}

TEST(Optimizer, PlainStep) {
  ParamList<double> params{{"w", Tensor<double>({1}, {1.0}, true), true}};
  params[0].tensor.grad_mut()[0] = 0.5;
  OptimizerState<double> st;
  TrainerConfig cfg;
  cfg.optimizer = OptimizerKind::plain;
  optimizer_step(params, st, cfg, 0.1);
  EXPECT_DOUBLE_EQ(params[0].tensor.data()[0], 0.95);
}

TEST(Optimizer, AdamFirstStepMovesByLearningRate) {
  ParamList<double> params{{"w", Tensor<double>({1}, {1.0}, true), true}};
  params[0].tensor.grad_mut()[0] = 2.0;
  OptimizerState<double> st;
  TrainerConfig cfg;
  optimizer_step(params, st, cfg, 0.01);
  // m_hat = 2, v_hat = 4: step = 0.01 * 2 / (2 + 1e-8).
  EXPECT_NEAR(params[0].tensor.data()[0] - 1.0, -0.01 * 2.0 / (2.0 + 1e-8), 1e-15);
  EXPECT_NEAR(params[0].tensor.data()[0] - 1.0, -0.01, 1e-8);
  EXPECT_EQ(st.step, 1u);
  EXPECT_GE(st.v[0][0], 0.0);
}

TEST(Optimizer, ZeroGradientLeavesParameters) {
  for (auto kind : {OptimizerKind::plain, OptimizerKind::adam}) {
    ParamList<float> params{{"w", Tensor<float>({3}, {1.0f, -2.0f, 0.5f}, true), true}};
    params[0].tensor.grad_mut();
    OptimizerState<float> st;
    TrainerConfig cfg;
    cfg.optimizer = kind;
    for (int i = 0; i < 3; ++i) optimizer_step(params, st, cfg, 0.1);
    EXPECT_EQ(params[0].tensor.data()[0], 1.0f);
    EXPECT_EQ(params[0].tensor.data()[1], -2.0f);
    EXPECT_EQ(params[0].tensor.data()[2], 0.5f);
    EXPECT_EQ(st.step, 3u);
  }
}

TEST(Optimizer, NonFiniteGradientNamesParameter) {
  for (float bad : {std::nanf(""), INFINITY}) {
    ParamList<float> params{{"lstm.w_ih", Tensor<float>({2}, {1.0f, 1.0f}, true), true}};
    params[0].tensor.grad_mut()[1] = bad;
    OptimizerState<float> st;
    try {
      optimizer_step(params, st, TrainerConfig{}, 0.1);
      FAIL() << "expected NumericError";
    } catch (const NumericError& e) {
      EXPECT_NE(std::string(e.what()).find("lstm.w_ih"), std::string::npos);
    }
    EXPECT_EQ(params[0].tensor.data()[0], 1.0f);
  }
}

TEST(Optimizer, ClipGradNorm) {
  ParamList<double> params{{"a", Tensor<double>({2}, {0, 0}, true), true}, {"b", Tensor<double>({1}, {0}, true), true}};
  params[0].tensor.grad_mut()[0] = 3;
  params[0].tensor.grad_mut()[1] = 4;
  params[1].tensor.grad_mut()[0] = 12;
  EXPECT_DOUBLE_EQ(clip_grad_norm(params, 5.0), 13.0);
  EXPECT_DOUBLE_EQ(params[0].tensor.grad()[0], 3 * 5.0 / 13.0);
  EXPECT_DOUBLE_EQ(params[1].tensor.grad()[0], 12 * 5.0 / 13.0);
  EXPECT_DOUBLE_EQ(clip_grad_norm(params, 100.0), 5.0);
  EXPECT_DOUBLE_EQ(params[1].tensor.grad()[0], 12 * 5.0 / 13.0);
}

TEST(LrSchedule, Examples) {
  EXPECT_DOUBLE_EQ(lr_schedule(0, 0.01, 0.96), 0.01);
  for (std::size_t e : {0u, 5u, 100u}) EXPECT_DOUBLE_EQ(lr_schedule(e, 0.02, 1.0), 0.02);
  EXPECT_NEAR(lr_schedule(10, 0.01, 0.96), 0.006648, 5e-7);
}

TEST(TrainerConfig, Validation) {
  TrainerConfig c;
  EXPECT_NO_THROW(c.validate());
  c.decay = 0.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = TrainerConfig{};
  c.batch = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = TrainerConfig{};
  c.lr = -1;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(TrainEpoch, ZeroLearningRateKeepsParameters) {
  Model<float> model(tiny_model(), 3);
  TrainerConfig cfg;
  cfg.lr = 0.0;
  cfg.batch = 8;
  Trainer<float> trainer(model, cfg);
  const auto data = generate_synthetic(tiny_synthetic(20), 20);
  const auto before = snapshot(model.parameters(), true);
  trainer.train_epoch(data);
  EXPECT_EQ(snapshot(model.parameters(), true), before);
  EXPECT_EQ(trainer.optimizer_state().step, 3u);
}

TEST(TrainEpoch, SameSeedSameMetrics) {
  const auto data = generate_synthetic(tiny_synthetic(24), 24);
  auto run = [&] {
    Model<float> model(tiny_model(), 5);
    TrainerConfig cfg;
    cfg.batch = 8;
    cfg.seed = 5;
    Trainer<float> trainer(model, cfg);
    std::vector<EpochMetrics> m{trainer.train_epoch(data), trainer.train_epoch(data)};
    return std::make_pair(m, snapshot(model.parameters(), false));
  };
  const auto a = run(), b = run();
  for (std::size_t e = 0; e < 2; ++e) {
    EXPECT_EQ(a.first[e].loss, b.first[e].loss);
    EXPECT_EQ(a.first[e].reward, b.first[e].reward);
    EXPECT_EQ(a.first[e].acc, b.first[e].acc);
    EXPECT_EQ(a.first[e].prr, b.first[e].prr);
  }
  EXPECT_EQ(a.second, b.second);
}

TEST(TrainEpoch, EmaBaselineFollowsBatchReward) {
  const auto data = trivial_images(8);
  for (auto mode : {BaselineMode::ema, BaselineMode::off}) {
    Model<float> model(tiny_model(1), 1);
    TrainerConfig cfg;
    cfg.batch = 8;
    cfg.baseline = mode;
    Trainer<float> trainer(model, cfg);
    const auto m = trainer.train_epoch(data);
    EXPECT_DOUBLE_EQ(trainer.baseline(), mode == BaselineMode::ema ? 0.1 * m.reward : 0.0);
    EXPECT_EQ(trainer.episodes(), 8u);
    EXPECT_EQ(trainer.epoch(), 1u);
  }
}

TEST(TrainEpoch, EmptyDatasetThrows) {
  Model<float> model(tiny_model(1), 1);
  Trainer<float> trainer(model, TrainerConfig{});
  EXPECT_THROW(trainer.train_epoch({}), std::invalid_argument);
}

// One glimpse per episode over two constant images: the policy reduces to a
// contextual bandit on the class action.
TEST(TrainEpoch, BanditConvergesWithin200Updates) {
  const auto data = trivial_images(64);
  double final_reward = 0;
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    Model<float> model(tiny_model(1), seed);
    TrainerConfig cfg;
    cfg.seed = seed;
    cfg.batch = 32;
    Trainer<float> trainer(model, cfg);
    EpochMetrics m;
    for (int epoch = 0; epoch < 100; ++epoch) m = trainer.train_epoch(data);  // 2 updates each
    EXPECT_EQ(trainer.optimizer_state().step, 200u);
    final_reward += m.reward / 3.0;
  }
  EXPECT_GE(final_reward, 0.95);
}

class GradientRouting : public ::testing::Test {
 protected:
  void SetUp() override {
    data = generate_synthetic(tiny_synthetic(6), 6);
    for (const auto& d : data) items.push_back(&d);
  }

  static std::vector<double> grads_of(const Tensor<double>& t) {
    if (!t.has_grad()) return std::vector<double>(t.numel(), 0.0);
    return {t.grad().begin(), t.grad().end()};
  }
  static void zero(ParamList<double>& params) {
    for (auto& p : params) p.tensor.zero_grad();
  }

  std::vector<LabeledImage> data;
  std::vector<const LabeledImage*> items;
};

TEST_F(GradientRouting, ClassificationLossNeverReachesLocationHead) {
  Model<double> model(tiny_model(), 9);
  Trainer<double> trainer(model, TrainerConfig{});
  auto bl = trainer.batch_loss(items, 0.5);
  auto params = model.parameters();
  zero(params);
  backward(bl.classification);
  for (const auto* t : {&model.location_head().weight, &model.location_head().bias}) {
    for (auto g : grads_of(*t)) EXPECT_EQ(g, 0.0);
  }
  double class_norm = 0;
  for (auto g : grads_of(model.class_head().weight)) class_norm += g * g;
  EXPECT_GT(class_norm, 0.0);
}

TEST_F(GradientRouting, SurrogateReachesClassHeadOnlyThroughActionLogProbs) {
  Model<double> model(tiny_model(), 9);
  Trainer<double> trainer(model, TrainerConfig{});
  auto bl = trainer.batch_loss(items, 0.5);
  auto params = model.parameters();
  zero(params);
  backward(bl.surrogate);
  const auto via_surrogate = grads_of(model.class_head().weight);
  double loc_norm = 0;
  for (auto g : grads_of(model.location_head().weight)) loc_norm += g * g;
  EXPECT_GT(loc_norm, 0.0);

  zero(params);
  backward(policy_gradient_surrogate(bl.rollout.action_logprob, bl.returns, 0.5));
  const auto via_actions = grads_of(model.class_head().weight);
  ASSERT_EQ(via_surrogate.size(), via_actions.size());
  for (std::size_t i = 0; i < via_actions.size(); ++i) EXPECT_NEAR(via_surrogate[i], via_actions[i], 1e-15);
}

TEST_F(GradientRouting, TotalGradientIsClassificationMinusSurrogate) {
  Model<double> model(tiny_model(), 9);
  Trainer<double> trainer(model, TrainerConfig{});
  auto bl = trainer.batch_loss(items, 0.25);
  auto params = model.parameters();
  auto collect = [&](const Tensor<double>& root) {
    zero(params);
    backward(root);
    std::vector<std::vector<double>> out;
    for (const auto& p : params) {
      if (p.trainable) out.push_back(grads_of(p.tensor));
    }
    return out;
  };
  const auto total = collect(bl.total), ce = collect(bl.classification), sur = collect(bl.surrogate);
  for (std::size_t k = 0; k < total.size(); ++k)
    for (std::size_t i = 0; i < total[k].size(); ++i) EXPECT_NEAR(total[k][i], ce[k][i] - sur[k][i], 1e-12);
}

TEST(Evaluate, DeterministicAndConsistent) {
  Model<float> model(tiny_model(), 4);
  const auto data = generate_synthetic(tiny_synthetic(30), 30);
  const auto a = Trainer<float>::evaluate_model(model, data, 7);
  const auto b = Trainer<float>::evaluate_model(model, data, 30);
  EXPECT_EQ(a.predictions, b.predictions);
  EXPECT_EQ(a.n_images, 30u);
  EXPECT_EQ(a.n_patients, 3u);
  std::size_t right = 0;
  for (std::size_t i = 0; i < data.size(); ++i) right += a.predictions[i] == data[i].label;
  EXPECT_DOUBLE_EQ(a.acc, right / 30.0);
  EXPECT_THROW(Trainer<float>::evaluate_model(model, {}, 4), std::invalid_argument);
}
