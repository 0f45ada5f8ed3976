#pragma once

// Recurrent policy: LSTM state, class head, location head, and the batched
// T-step glimpse rollout.

#include <cmath>
#include <numbers>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dhan/episode.hpp"
#include "dhan/glimpse.hpp"
#include "dhan/layers.hpp"
#include "dhan/sanet.hpp"

namespace dhan {

using nn::Rng;

struct ModelConfig {
  SANetConfig sanet;
  std::size_t fusion_width = 256;
  std::size_t hidden = 256;
  std::size_t classes = 2;
  std::size_t steps = 5;
  std::size_t glimpse = 112;
  double sigma = 0.15;
  bool per_step_action_logprob = false;
};

template <class T>
struct PolicyOutputs {
  nn::LSTMState<T> state;
  Tensor<T> class_probs;    // (N, classes)
  Tensor<T> location_mean;  // (N, 2), tanh range
};

template <class T>
class Model {
 public:
  Model() = default;
  Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    if (cfg.steps == 0) throw std::invalid_argument("model: episode steps must be at least 1");
    if (cfg.classes < 2) throw std::invalid_argument("model: need at least 2 classes");
    if (cfg.sigma < 0.0) throw std::invalid_argument("model: location sigma must be non-negative");
    if (cfg.sanet.enabled) SANet<T>::check_extent(cfg.glimpse);
    Rng rng(seed);
    sanet_ = SANet<T>(cfg.sanet, rng);
    fusion_ = FusionLayer<T>(cfg.sanet.channels, cfg.fusion_width, rng);
    lstm_ = nn::LSTMCell<T>(cfg.fusion_width, cfg.hidden, rng);
    class_head_ = nn::Dense<T>(cfg.hidden, cfg.classes, rng);
    location_head_ = nn::Dense<T>(cfg.hidden, 2, rng);
  }

  const ModelConfig& config() const { return cfg_; }
  SANet<T>& sanet() { return sanet_; }
  const FusionLayer<T>& fusion() const { return fusion_; }
  const nn::LSTMCell<T>& lstm() const { return lstm_; }
  const nn::Dense<T>& class_head() const { return class_head_; }
  const nn::Dense<T>& location_head() const { return location_head_; }

  // Shares storage with the model: writing through a returned tensor
  // updates the model.
  ParamList<T> parameters() const {
    ParamList<T> out;
    sanet_.collect("sanet", out);
    fusion_.collect("fusion", out);
    lstm_.collect("lstm", out);
    class_head_.collect("class_head", out);
    location_head_.collect("location_head", out);
    return out;
  }

  PolicyOutputs<T> controller_step(const Tensor<T>& fused, const nn::LSTMState<T>& state) const {
    PolicyOutputs<T> out;
    out.state = lstm_(fused, state);
    out.class_probs = nn::softmax(class_head_(out.state.h));
    out.location_mean = nn::tanh(location_head_(out.state.h));
    return out;
  }

 private:
  ModelConfig cfg_;
  SANet<T> sanet_;
  FusionLayer<T> fusion_;
  nn::LSTMCell<T> lstm_;
  nn::Dense<T> class_head_, location_head_;
};

struct LocationSample {
  Location location;  // clamped
  Location raw;
  double logprob = 0.0;
};

inline double normal_logpdf(double x, double mu, double sigma) {
  const double z = (x - mu) / sigma;
  return -0.5 * z * z - std::log(sigma * std::sqrt(2.0 * std::numbers::pi));
}

// Isotropic Normal around mu, clamped afterwards; the log-density is taken at
// the raw draw. Eval mode or sigma = 0 returns mu with log-probability 0.
inline LocationSample sample_location(Location mu, double sigma, Rng& rng, Mode mode) {
  LocationSample s;
  if (mode == Mode::eval || sigma == 0.0) {
    s.raw = mu;
    s.location = mu.clamped();
    return s;
  }
  std::normal_distribution<double> noise(0.0, 1.0);
  s.raw.row = mu.row + sigma * noise(rng);
  s.raw.col = mu.col + sigma * noise(rng);
  s.location = s.raw.clamped();
  s.logprob = normal_logpdf(s.raw.row, mu.row, sigma) + normal_logpdf(s.raw.col, mu.col, sigma);
  return s;
}

struct ActionSample {
  std::size_t label = 0;
  double logprob = 0.0;
};

// Categorical draw in train mode; argmax with lowest-index ties in eval mode.
template <class P>
ActionSample sample_action(std::span<const P> probs, Rng& rng, Mode mode) {
  if (probs.empty()) throw std::invalid_argument("sample_action: empty probability vector");
  ActionSample a;
  if (mode == Mode::eval) {
    for (std::size_t k = 1; k < probs.size(); ++k) {
      if (probs[k] > probs[a.label]) a.label = k;
    }
  } else {
    const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    double cum = 0.0;
    a.label = probs.size();
    for (std::size_t k = 0; k < probs.size(); ++k) {
      cum += static_cast<double>(probs[k]);
      if (u < cum) {
        a.label = k;
        break;
      }
    }
    // Rounding left u above the total: take the last class with mass.
    if (a.label == probs.size()) {
      a.label = probs.size() - 1;
      while (a.label > 0 && probs[a.label] <= P(0)) --a.label;
    }
  }
  a.logprob = std::log(std::max(static_cast<double>(probs[a.label]), nn::kMinProbability));
  return a;
}

template <class T>
struct BatchRollout {
  std::vector<EpisodeTrace> traces;
  Tensor<T> location_logprob;  // (N) in-graph sum over location draws
  Tensor<T> action_logprob;    // (N) in-graph sum over action draws
  Tensor<T> final_probs;       // (N, classes)
  std::vector<std::size_t> labels;
};

template <class T>
struct RolloutOptions {
  Mode mode = Mode::train;
  PixelAccessCounter* counter = nullptr;
  std::vector<CoverageMap>* coverage = nullptr;  // one per episode
};

namespace detail {

template <class T>
Tensor<T> gaussian_logprob(const Tensor<T>& mean, const std::vector<T>& raw, double sigma) {
  const std::size_t n = mean.dim(0);
  auto diff = sub(Tensor<T>(mean.shape(), raw), mean);
  auto quad = sum_last(mul(diff, diff));
  const double norm = -2.0 * std::log(sigma * std::sqrt(2.0 * std::numbers::pi));
  auto lp = add_scalar(scale(quad, static_cast<T>(-0.5 / (sigma * sigma))), static_cast<T>(norm));
  if (lp.shape() != Shape{n}) lp = reshape(lp, {n});
  return lp;
}

template <class T>
Tensor<T> action_logprob(const Tensor<T>& probs, const std::vector<std::size_t>& actions) {
  return log(clamp(pick(probs, std::span<const std::size_t>(actions)), static_cast<T>(nn::kMinProbability), T(1)));
}

}  // namespace detail

// Runs N episodes in lockstep, one per image; episode i draws from rngs[i].
// Location l_0 is the image center. Train mode samples locations for t < T
// and the class at T; eval mode follows the means and takes the argmax.
template <class T>
BatchRollout<T> rollout_batch(Model<T>& model, std::span<const Image* const> images, std::span<const std::size_t> labels,
                              std::span<Rng> rngs, const RolloutOptions<T>& opt) {
  const std::size_t n = images.size();
  if (n == 0) throw std::invalid_argument("rollout: empty batch");
  if (labels.size() != n || rngs.size() != n) throw std::invalid_argument("rollout: images, labels and rngs must have equal length");
  if (opt.coverage && opt.coverage->size() != n) throw std::invalid_argument("rollout: need one coverage map per episode");
  const auto& cfg = model.config();
  const Mode mode = opt.mode;
  const bool stochastic = mode == Mode::train && cfg.sigma > 0.0;

  BatchRollout<T> out;
  out.labels.assign(labels.begin(), labels.end());
  out.traces.resize(n);
  for (auto& tr : out.traces) tr.sigma = cfg.sigma;
  std::vector<Location> loc(n, Location{0.0, 0.0});
  auto state = model.lstm().initial_state(n);
  std::vector<Tensor<T>> loc_terms, act_terms;

  for (std::size_t t = 1; t <= cfg.steps; ++t) {
    const bool last = t == cfg.steps;
    std::vector<Glimpse> glimpses;
    glimpses.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      glimpses.push_back(extract_glimpse(*images[i], loc[i], cfg.glimpse, opt.counter,
                                         opt.coverage ? &(*opt.coverage)[i] : nullptr));
    }
    auto patches = pack_patches<T>(glimpses);
    auto bundle = model.sanet()(patches, mode);
    std::vector<T> loc_values(2 * n);
    for (std::size_t i = 0; i < n; ++i) {
      loc_values[2 * i] = static_cast<T>(glimpses[i].location.row);
      loc_values[2 * i + 1] = static_cast<T>(glimpses[i].location.col);
    }
    auto fused = model.fusion()(bundle.pooled, Tensor<T>({n, 2}, std::move(loc_values)));
    auto policy = model.controller_step(fused, state);
    state = policy.state;
    auto probs = policy.class_probs.data();
    auto mean = policy.location_mean.data();
    auto hidden = state.h.data();
    const std::size_t k = cfg.classes, hw = cfg.hidden;

    std::vector<T> raw(2 * n);
    std::vector<std::size_t> actions(n);
    const bool act_now = last || cfg.per_step_action_logprob;
    for (std::size_t i = 0; i < n; ++i) {
      StepRecord rec;
      rec.t = t;
      rec.prev_location = glimpses[i].location;
      rec.center_row = glimpses[i].center_row;
      rec.center_col = glimpses[i].center_col;
      rec.values_read = glimpses[i].values_read;
      rec.hidden.assign(hidden.begin() + i * hw, hidden.begin() + (i + 1) * hw);
      rec.class_probs.assign(probs.begin() + i * k, probs.begin() + (i + 1) * k);
      rec.mean = {static_cast<double>(mean[2 * i]), static_cast<double>(mean[2 * i + 1])};
      if (!last) {
        auto s = sample_location(rec.mean, cfg.sigma, rngs[i], mode);
        rec.raw_sample = s.raw;
        rec.next_location = s.location;
        rec.location_logprob = s.logprob;
        loc[i] = s.location;
        raw[2 * i] = static_cast<T>(s.raw.row);
        raw[2 * i + 1] = static_cast<T>(s.raw.col);
      }
      if (act_now) {
        auto a = sample_action(std::span<const T>(probs.data() + i * k, k), rngs[i], mode);
        rec.action = a.label;
        rec.action_logprob = mode == Mode::train ? a.logprob : 0.0;
        actions[i] = a.label;
        if (last) out.traces[i].predicted = a.label;
      }
      out.traces[i].steps.push_back(std::move(rec));
    }
    if (!last && stochastic) loc_terms.push_back(detail::gaussian_logprob(policy.location_mean, raw, cfg.sigma));
    if (act_now && mode == Mode::train) act_terms.push_back(detail::action_logprob(policy.class_probs, actions));
    if (last) out.final_probs = policy.class_probs;
  }

  auto total = [n](std::vector<Tensor<T>>& terms) {
    if (terms.empty()) return Tensor<T>::zeros({n});
    Tensor<T> s = terms.front();
    for (std::size_t j = 1; j < terms.size(); ++j) s = add(s, terms[j]);
    return s;
  };
  out.location_logprob = total(loc_terms);
  out.action_logprob = total(act_terms);
  for (std::size_t i = 0; i < n; ++i) assign_rewards(out.traces[i], labels[i]);
  return out;
}

// Single-episode convenience wrapper.
template <class T>
EpisodeTrace rollout_episode(Model<T>& model, const Image& image, std::size_t label, Rng& rng, Mode mode,
                             PixelAccessCounter* counter = nullptr, CoverageMap* coverage = nullptr) {
  std::vector<CoverageMap> maps;
  if (coverage) maps.push_back(*coverage);
  const Image* img = &image;
  std::vector<Rng> rngs{rng};
  RolloutOptions<T> opt{mode, counter, coverage ? &maps : nullptr};
  std::optional<NoGradGuard> guard;
  if (mode == Mode::eval) guard.emplace();
  auto r = rollout_batch<T>(model, std::span<const Image* const>(&img, 1), std::span<const std::size_t>(&label, 1),
                            std::span<Rng>(rngs), opt);
  rng = rngs.front();
  if (coverage) *coverage = maps.front();
  return std::move(r.traces.front());
}

}  // namespace dhan
