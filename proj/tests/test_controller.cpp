#include <cmath>
#include <numeric>
#include <random>
#include <type_traits>
#include <vector>

#include <gtest/gtest.h>

#include "dhan/controller.hpp"
#include "test_util.hpp"

using namespace dhan;
using dhan::test::copy_values;
using dhan::test::GradTolerance;
using dhan::test::random_tensor;
using dhan::test::scalar_of;

namespace {

ModelConfig small_model(std::size_t glimpse = 8) {
  ModelConfig c;
  c.sanet.channels = 4;
  c.fusion_width = 8;
  c.hidden = 8;
  c.glimpse = glimpse;
  return c;
}

template <class T>
void zero_trainable(const Model<T>& m) {
  for (auto& p : m.parameters()) {
    if (!p.trainable) continue;
    auto t = p.tensor;
    for (auto& v : t.data_mut()) v = T(0);
  }
}

Image random_image(std::size_t h, std::size_t w, std::uint64_t seed) {
  Image img(h, w, 3);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (auto& v : img.pixels) v = u(rng);
  return img;
}

void expect_same_trace(const EpisodeTrace& a, const EpisodeTrace& b) {
  ASSERT_EQ(a.steps.size(), b.steps.size());
  EXPECT_EQ(a.predicted, b.predicted);
  EXPECT_EQ(a.total_return, b.total_return);
  for (std::size_t t = 0; t < a.steps.size(); ++t) {
    const auto &x = a.steps[t], &y = b.steps[t];
    EXPECT_EQ(x.prev_location, y.prev_location);
    EXPECT_EQ(x.center_row, y.center_row);
    EXPECT_EQ(x.center_col, y.center_col);
    EXPECT_EQ(x.hidden, y.hidden);
    EXPECT_EQ(x.class_probs, y.class_probs);
    EXPECT_EQ(x.raw_sample, y.raw_sample);
    EXPECT_EQ(x.location_logprob, y.location_logprob);
    EXPECT_EQ(x.action, y.action);
    EXPECT_EQ(x.action_logprob, y.action_logprob);
  }
}

}  // namespace

TEST(ControllerStep, ZeroNetwork) {
  Model<float> model(small_model(), 1);
  zero_trainable(model);
  std::mt19937_64 rng(2);
  auto fused = random_tensor<float>({3, 8}, rng);
  auto out = model.controller_step(fused, model.lstm().initial_state(3));
  for (auto v : out.state.h.data()) EXPECT_EQ(v, 0.0f);
  for (auto v : out.class_probs.data()) EXPECT_FLOAT_EQ(v, 0.5f);
  for (auto v : out.location_mean.data()) EXPECT_EQ(v, 0.0f);
}

TEST(ControllerStep, StateCarriesHistory) {
  Model<float> model(small_model(), 3);
  std::mt19937_64 rng(4);
  auto fused = random_tensor<float>({1, 8}, rng, 0, 1);
  auto first = model.controller_step(fused, model.lstm().initial_state(1));
  auto second = model.controller_step(fused, first.state);
  std::vector<float> h1(first.state.h.data().begin(), first.state.h.data().end());
  std::vector<float> h2(second.state.h.data().begin(), second.state.h.data().end());
  EXPECT_NE(h1, h2);
}

TEST(ControllerStep, OutputInvariants) {
  Model<float> model(small_model(), 5);
  std::mt19937_64 rng(6);
  auto state = model.lstm().initial_state(16);
  for (int t = 0; t < 4; ++t) {
    auto out = model.controller_step(random_tensor<float>({16, 8}, rng, -5, 5), state);
    state = out.state;
    for (std::size_t i = 0; i < 16; ++i) {
      const double s = out.class_probs.data()[2 * i] + out.class_probs.data()[2 * i + 1];
      EXPECT_NEAR(s, 1.0, 1e-5);
    }
    for (auto v : out.location_mean.data()) {
      EXPECT_GE(v, -1.0f);
      EXPECT_LE(v, 1.0f);
    }
  }
}

TEST(ControllerStep, DimensionMismatchThrows) {
  Model<float> model(small_model(), 5);
  EXPECT_THROW(model.controller_step(Tensor<float>::zeros({2, 7}), model.lstm().initial_state(2)), ShapeError);
  EXPECT_THROW(model.controller_step(Tensor<float>::zeros({2, 8}), model.lstm().initial_state(3)), ShapeError);
}

TYPED_TEST_SUITE_P(ControllerGrad);
template <class T>
class ControllerGrad : public ::testing::Test {};

// Class log-probability after two recurrent steps, differentiated with
// respect to the LSTM input and recurrent weights. A multi-layer path, so
// judged normwise like the other composite checks.
TYPED_TEST_P(ControllerGrad, ClassLogProbWrtLstmWeights) {
  using T = TypeParam;
  Model<T> model(small_model(), 7);
  Model<double> ref(small_model(), 7);
  copy_values(ref.parameters(), model.parameters());
  std::mt19937_64 rng(8);
  auto fused1 = random_tensor<T>({3, 8}, rng, 0, 1);
  auto fused2 = random_tensor<T>({3, 8}, rng, 0, 1);
  const std::vector<std::size_t> labels{0, 1, 1};
  auto pick_model = [&](const auto& v) -> auto& {
    using U = scalar_of<decltype(v)>;
    if constexpr (std::is_same_v<U, T>) return model;
    else return ref;
  };
  auto logprob = [&](auto cell, auto& m) {
    using U = typename decltype(cell.w_ih)::value_type;
    auto s1 = cell(cast<U>(fused1), cell.initial_state(3));
    auto s2 = cell(cast<U>(fused2), s1);
    auto probs = nn::softmax(m.class_head()(s2.h));
    return sum(log(pick(probs, std::span<const std::size_t>(labels))));
  };
  EXPECT_LE(finite_diff_report([&](const auto& v) {
              auto& m = pick_model(v);
              auto cell = m.lstm();
              cell.w_ih = v;
              return logprob(cell, m);
            }, model.lstm().w_ih, GradTolerance<T>::step).normwise, GradTolerance<T>::tol);
  EXPECT_LE(finite_diff_report([&](const auto& v) {
              auto& m = pick_model(v);
              auto cell = m.lstm();
              cell.w_hh = v;
              return logprob(cell, m);
            }, model.lstm().w_hh, GradTolerance<T>::step).normwise, GradTolerance<T>::tol);
}

REGISTER_TYPED_TEST_SUITE_P(ControllerGrad, ClassLogProbWrtLstmWeights);
INSTANTIATE_TYPED_TEST_SUITE_P(Scalar, ControllerGrad, dhan::test::ScalarTypes);

TEST(SampleLocation, ZeroSigmaReturnsMean) {
  Rng rng(1);
  const auto s = sample_location({0.3, -0.7}, 0.0, rng, Mode::train);
  EXPECT_EQ(s.location, (Location{0.3, -0.7}));
  EXPECT_EQ(s.logprob, 0.0);
}

TEST(SampleLocation, EvalReturnsMeanWithZeroLogProb) {
  Rng rng(1);
  const auto s = sample_location({0.3, -0.7}, 0.15, rng, Mode::eval);
  EXPECT_EQ(s.location, (Location{0.3, -0.7}));
  EXPECT_EQ(s.logprob, 0.0);
}

TEST(SampleLocation, ClampsAfterSamplingAndScoresRawDraw) {
  EXPECT_EQ((Location{1.3, 0.5}.clamped()), (Location{1.0, 0.5}));
  Rng rng(2);
  int clamped = 0;
  for (int i = 0; i < 2000; ++i) {
    const auto s = sample_location({0.9, 0.9}, 0.3, rng, Mode::train);
    EXPECT_EQ(s.location, s.raw.clamped());
    EXPECT_DOUBLE_EQ(s.logprob, normal_logpdf(s.raw.row, 0.9, 0.3) + normal_logpdf(s.raw.col, 0.9, 0.3));
    clamped += s.raw.row > 1.0 || s.raw.col > 1.0;
  }
  EXPECT_GT(clamped, 0);
}

TEST(SampleLocation, MonteCarloMean) {
  Rng rng(3);
  const int n = 100000;
  double row = 0, col = 0;
  for (int i = 0; i < n; ++i) {
    const auto s = sample_location({0.2, -0.3}, 0.15, rng, Mode::train);
    row += s.location.row;
    col += s.location.col;
  }
  const double band = 3 * 0.15 / std::sqrt(static_cast<double>(n));
  EXPECT_NEAR(row / n, 0.2, band);
  EXPECT_NEAR(col / n, -0.3, band);
}

TEST(SampleAction, DeterministicDistribution) {
  Rng rng(1);
  const std::vector<double> probs{1.0, 0.0};
  for (int i = 0; i < 1000; ++i) {
    const auto a = sample_action(std::span<const double>(probs), rng, Mode::train);
    EXPECT_EQ(a.label, 0u);
    EXPECT_EQ(a.logprob, 0.0);
  }
}

TEST(SampleAction, EvalTieBreaksLow) {
  Rng rng(1);
  const std::vector<float> probs{0.5f, 0.5f};
  const auto a = sample_action(std::span<const float>(probs), rng, Mode::eval);
  EXPECT_EQ(a.label, 0u);
  const std::vector<float> three{0.2f, 0.4f, 0.4f};
  EXPECT_EQ(sample_action(std::span<const float>(three), rng, Mode::eval).label, 1u);
}

TEST(SampleAction, Frequency) {
  Rng rng(4);
  const std::vector<double> probs{0.25, 0.75};
  int ones = 0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const auto a = sample_action(std::span<const double>(probs), rng, Mode::train);
    ones += a.label == 1;
    EXPECT_DOUBLE_EQ(a.logprob, std::log(probs[a.label]));
  }
  EXPECT_NEAR(static_cast<double>(ones) / n, 0.75, 0.01);
}

TEST(Rollout, PixelBudgetBound) {
  ModelConfig cfg = small_model(112);
  Model<float> model(cfg, 9);
  for (auto [h, w] : {std::pair<std::size_t, std::size_t>{460, 740}, {2000, 2000}, {60, 90}}) {
    const Image img(h, w, 3, 0.5f);
    PixelAccessCounter counter(h * w);
    Rng rng(1);
    const auto trace = rollout_episode(model, img, 0, rng, Mode::train, &counter);
    EXPECT_LE(counter.reads(), 5u * 112u * 112u * 3u);
    EXPECT_EQ(counter.reads(), trace.values_read());
  }
}

TEST(Rollout, ZeroNetworkLooksAtCenter) {
  Model<float> model(small_model(), 1);
  zero_trainable(model);
  const auto img = random_image(31, 45, 2);
  Rng rng(3);
  const auto trace = rollout_episode(model, img, 1, rng, Mode::eval);
  ASSERT_EQ(trace.steps.size(), 5u);
  for (const auto& s : trace.steps) {
    EXPECT_EQ(s.prev_location, (Location{0.0, 0.0}));
    EXPECT_EQ(s.center_row, 15);
    EXPECT_EQ(s.center_col, 22);
  }
}

TEST(Rollout, SameSeedSameTrace) {
  Model<float> model(small_model(), 11);
  const auto img = random_image(40, 40, 5);
  for (Mode mode : {Mode::train, Mode::eval}) {
    Rng a(77), b(77);
    expect_same_trace(rollout_episode(model, img, 0, a, mode), rollout_episode(model, img, 0, b, mode));
  }
}

TEST(Rollout, EvalIgnoresRngState) {
  Model<float> model(small_model(), 11);
  const auto img = random_image(40, 40, 5);
  Rng a(1), b(999);
  expect_same_trace(rollout_episode(model, img, 0, a, Mode::eval), rollout_episode(model, img, 0, b, Mode::eval));
}

TEST(Rollout, TraceInvariants) {
  Model<float> model(small_model(), 13);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto img = random_image(24 + seed, 36, seed);
    Rng rng(seed);
    const std::size_t label = seed % 2;
    const auto tr = rollout_episode(model, img, label, rng, Mode::train);
    ASSERT_EQ(tr.steps.size(), 5u);
    EXPECT_EQ(tr.location_samples(), 4u);
    EXPECT_TRUE(tr.total_return == 0.0 || tr.total_return == 1.0);
    EXPECT_EQ(tr.total_return, tr.predicted == label ? 1.0 : 0.0);
    EXPECT_EQ(tr.steps[0].prev_location, (Location{0.0, 0.0}));
    for (std::size_t t = 0; t < 5; ++t) {
      const auto& s = tr.steps[t];
      EXPECT_EQ(s.t, t + 1);
      if (t < 4) {
        EXPECT_EQ(s.reward, 0.0);
        EXPECT_FALSE(s.action.has_value());
        ASSERT_TRUE(s.next_location.has_value());
        EXPECT_EQ(tr.steps[t + 1].prev_location, *s.next_location);
      } else {
        EXPECT_FALSE(s.raw_sample.has_value());
        ASSERT_TRUE(s.action.has_value());
        EXPECT_EQ(*s.action, tr.predicted);
      }
      EXPECT_NEAR(s.class_probs[0] + s.class_probs[1], 1.0, 1e-5);
      EXPECT_LE(std::abs(s.mean.row), 1.0);
      EXPECT_LE(std::abs(s.mean.col), 1.0);
    }
  }
}

// The log-probabilities recorded in the trace are re-derived from the
// recorded means, raw draws and class probabilities, and match the in-graph
// terms the surrogate is built from.
TEST(Rollout, LogProbsReDerivableFromTrace) {
  Model<double> model(small_model(), 17);
  std::vector<Image> imgs;
  for (std::uint64_t i = 0; i < 4; ++i) imgs.push_back(random_image(30, 30, i));
  std::vector<const Image*> ptrs;
  for (auto& im : imgs) ptrs.push_back(&im);
  const std::vector<std::size_t> labels{0, 1, 0, 1};
  std::vector<Rng> rngs{Rng(1), Rng(2), Rng(3), Rng(4)};
  auto ro = rollout_batch<double>(model, ptrs, labels, rngs, {});
  for (std::size_t i = 0; i < 4; ++i) {
    const auto& tr = ro.traces[i];
    double loc = 0, act = 0;
    for (const auto& s : tr.steps) {
      if (s.raw_sample) {
        loc += normal_logpdf(s.raw_sample->row, s.mean.row, tr.sigma) + normal_logpdf(s.raw_sample->col, s.mean.col, tr.sigma);
      }
      if (s.action) act += std::log(s.class_probs[*s.action]);
    }
    EXPECT_NEAR(loc, ro.location_logprob.data()[i], 1e-9);
    EXPECT_NEAR(act, ro.action_logprob.data()[i], 1e-12);
    EXPECT_NEAR(tr.logprob_sum(), loc + act, 1e-9);
  }
}

TEST(Rollout, PerStepActionFlagAddsIntermediateTerms) {
  ModelConfig cfg = small_model();
  cfg.per_step_action_logprob = true;
  Model<double> model(cfg, 19);
  const auto img = random_image(30, 30, 1);
  Rng rng(5);
  const auto tr = rollout_episode(model, img, 0, rng, Mode::train);
  double act = 0;
  for (const auto& s : tr.steps) {
    ASSERT_TRUE(s.action.has_value());
    EXPECT_LT(s.action_logprob, 0.0);
    act += s.action_logprob;
    if (s.t < 5) {
      EXPECT_EQ(s.reward, 0.0);
    }
  }
  EXPECT_EQ(tr.predicted, *tr.steps.back().action);
  EXPECT_LT(act, tr.steps.back().action_logprob);
}

TEST(Rollout, EvalBatchMatchesSingleEpisodes) {
  Model<float> model(small_model(), 23);
  std::vector<Image> imgs;
  for (std::uint64_t i = 0; i < 3; ++i) imgs.push_back(random_image(20 + 5 * i, 28, i));
  std::vector<const Image*> ptrs;
  for (auto& im : imgs) ptrs.push_back(&im);
  const std::vector<std::size_t> labels{0, 1, 1};
  std::vector<Rng> rngs{Rng(1), Rng(2), Rng(3)};
  NoGradGuard guard;
  auto ro = rollout_batch<float>(model, ptrs, labels, rngs, {Mode::eval, nullptr, nullptr});
  for (std::size_t i = 0; i < 3; ++i) {
    Rng rng(i);
    const auto single = rollout_episode(model, imgs[i], labels[i], rng, Mode::eval);
    ASSERT_EQ(single.steps.size(), ro.traces[i].steps.size());
    for (std::size_t t = 0; t < single.steps.size(); ++t) {
      EXPECT_EQ(single.steps[t].center_row, ro.traces[i].steps[t].center_row);
      EXPECT_EQ(single.steps[t].center_col, ro.traces[i].steps[t].center_col);
      for (std::size_t k = 0; k < 2; ++k) EXPECT_NEAR(single.steps[t].class_probs[k], ro.traces[i].steps[t].class_probs[k], 1e-6);
    }
    EXPECT_EQ(single.predicted, ro.traces[i].predicted);
  }
}

TEST(Rollout, RejectsMismatchedInputs) {
  Model<float> model(small_model(), 1);
  const auto img = random_image(20, 20, 1);
  const Image* p = &img;
  const std::vector<std::size_t> labels{0, 1};
  std::vector<Rng> rngs{Rng(1)};
  EXPECT_THROW(rollout_batch<float>(model, std::span<const Image* const>(&p, 1), labels, rngs, {}), std::invalid_argument);
}
