#pragma once

// REINFORCE + cross-entropy training: rewards, the policy-gradient surrogate,
// the hybrid loss, optimizers, learning-rate decay and the epoch loop.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dhan/controller.hpp"
#include "dhan/data.hpp"

namespace dhan {

enum class OptimizerKind { plain, adam };
enum class BaselineMode { off, ema };

struct TrainerConfig {
  double lr = 0.01;
  double decay = 0.96;  // per epoch
  OptimizerKind optimizer = OptimizerKind::adam;
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  std::size_t batch = 32;
  std::size_t epochs = 200;
  BaselineMode baseline = BaselineMode::ema;
  double ema = 0.9;
  double clip_norm = 5.0;  // <= 0 disables clipping
  std::uint64_t seed = 0;

  void validate() const {
    if (!(lr >= 0.0)) throw std::invalid_argument("trainer: learning rate must be non-negative");
    if (!(decay > 0.0 && decay <= 1.0)) throw std::invalid_argument("trainer: lr decay must lie in (0, 1]");
    if (batch == 0) throw std::invalid_argument("trainer: batch size must be at least 1");
    if (!(ema >= 0.0 && ema < 1.0)) throw std::invalid_argument("trainer: ema coefficient must lie in [0, 1)");
  }
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// mean_i logprob_i * (R_i - b); the advantages enter as constants.
template <class T>
Tensor<T> policy_gradient_surrogate(const Tensor<T>& logprob, std::span<const double> returns, double baseline) {
  if (returns.empty()) throw std::invalid_argument("policy_gradient_surrogate: empty batch");
  if (logprob.numel() != returns.size()) {
    throw ShapeError("policy_gradient_surrogate: " + std::to_string(returns.size()) + " returns for log-probabilities of shape " +
                     shape_str(logprob.shape()));
  }
  std::vector<T> adv(returns.size());
  for (std::size_t i = 0; i < adv.size(); ++i) adv[i] = static_cast<T>(returns[i] - baseline);
  return mean(mul(reshape(logprob, {returns.size()}), Tensor<T>({returns.size()}, std::move(adv))));
}

// -J + L_c
template <class T>
Tensor<T> total_loss(const Tensor<T>& surrogate, const Tensor<T>& classification) {
  return sub(classification, surrogate);
}

inline double lr_schedule(std::size_t epoch, double initial, double decay) {
  return initial * std::pow(decay, static_cast<double>(epoch));
}

template <class T>
struct OptimizerState {
  std::vector<std::vector<T>> m, v;
  std::uint64_t step = 0;

  void reset(const ParamList<T>& params) {
    m.clear();
    v.clear();
    for (const auto& p : params) {
      m.emplace_back(p.tensor.numel(), T(0));
      v.emplace_back(p.tensor.numel(), T(0));
    }
    step = 0;
  }
};

// Scales all trainable gradients so their joint L2 norm is at most max_norm.
// Returns the norm before scaling.
template <class T>
double clip_grad_norm(ParamList<T>& params, double max_norm) {
  double sq = 0.0;
  for (auto& p : params) {
    if (!p.trainable || !p.tensor.has_grad()) continue;
    for (auto g : p.tensor.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const T s = static_cast<T>(max_norm / norm);
    for (auto& p : params) {
      if (!p.trainable || !p.tensor.has_grad()) continue;
      for (auto& g : p.tensor.grad_mut()) g *= s;
    }
  }
  return norm;
}

// One descent step on the loss gradients already stored in the parameters.
template <class T>
void optimizer_step(ParamList<T>& params, OptimizerState<T>& state, const TrainerConfig& cfg, double lr) {
  if (state.m.size() != params.size()) state.reset(params);
  for (const auto& p : params) {
    if (!p.trainable || !p.tensor.has_grad()) continue;
    for (auto g : p.tensor.grad()) {
      if (!std::isfinite(static_cast<double>(g))) throw NumericError("non-finite gradient in parameter " + p.name);
    }
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k];
    if (!p.trainable || !p.tensor.has_grad()) continue;
    auto w = p.tensor.data_mut();
    auto g = p.tensor.grad();
    if (cfg.optimizer == OptimizerKind::plain) {
      for (std::size_t i = 0; i < w.size(); ++i) w[i] = static_cast<T>(w[i] - lr * static_cast<double>(g[i]));
      continue;
    }
    auto& m = state.m[k];
    auto& v = state.v[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i];
      m[i] = static_cast<T>(cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi);
      v[i] = static_cast<T>(cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi);
      const double mhat = m[i] / bc1, vhat = v[i] / bc2;
      w[i] = static_cast<T>(w[i] - lr * mhat / (std::sqrt(vhat) + cfg.adam_eps));
    }
  }
}

struct EpochMetrics {
  double loss = 0.0;
  double reward = 0.0;
  double acc = 0.0;
  double prr = 0.0;
};

struct EvalResult {
  double loss = 0.0;  // mean final-step cross-entropy
  double acc = 0.0;
  double prr = 0.0;
  std::size_t n_images = 0, n_patients = 0;
  std::vector<std::size_t> predictions;
};

template <class T>
class Trainer {
 public:
  Trainer(Model<T>& model, TrainerConfig cfg) : model_(model), cfg_(cfg), shuffle_rng_(cfg.seed) {
    cfg_.validate();
    params_ = model_.parameters();
    opt_.reset(params_);
  }

  const TrainerConfig& config() const { return cfg_; }
  std::size_t epoch() const { return epoch_; }
  double baseline() const { return baseline_; }
  std::uint64_t episodes() const { return episodes_; }
  OptimizerState<T>& optimizer_state() { return opt_; }
  const OptimizerState<T>& optimizer_state() const { return opt_; }
  Rng& shuffle_rng() { return shuffle_rng_; }
  const Rng& shuffle_rng() const { return shuffle_rng_; }
  ParamList<T>& params() { return params_; }

  void restore(std::size_t epoch, double baseline, std::uint64_t episodes) {
    epoch_ = epoch;
    baseline_ = baseline;
    episodes_ = episodes;
  }

  // Loss terms of one batch; exposed so tests can inspect gradient routing.
  struct BatchLoss {
    BatchRollout<T> rollout;
    Tensor<T> surrogate, classification, total;
    std::vector<double> returns;
  };

  BatchLoss batch_loss(std::span<const LabeledImage* const> items, double baseline) {
    std::vector<const Image*> images;
    std::vector<std::size_t> labels;
    std::vector<Rng> rngs;
    for (const auto* it : items) {
      images.push_back(&it->image);
      labels.push_back(it->label);
      rngs.emplace_back(cfg_.seed + episodes_++);
    }
    BatchLoss out;
    out.rollout = rollout_batch<T>(model_, images, labels, rngs, RolloutOptions<T>{Mode::train, nullptr, nullptr});
    for (const auto& tr : out.rollout.traces) out.returns.push_back(tr.total_return);
    auto logprob = add(out.rollout.location_logprob, out.rollout.action_logprob);
    out.surrogate = policy_gradient_surrogate(logprob, out.returns, baseline);
    out.classification = nn::cross_entropy(out.rollout.final_probs, std::span<const std::size_t>(labels));
    out.total = total_loss(out.surrogate, out.classification);
    return out;
  }

  EpochMetrics train_epoch(std::span<const LabeledImage> data) {
    if (data.empty()) throw std::invalid_argument("train_epoch: empty dataset");
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), shuffle_rng_);
    const double lr = lr_schedule(epoch_, cfg_.lr, cfg_.decay);
    double loss_sum = 0.0, reward_sum = 0.0;
    std::vector<std::string> patients;
    std::vector<std::uint8_t> correct;
    patients.reserve(data.size());
    correct.reserve(data.size());
    for (std::size_t start = 0; start < order.size(); start += cfg_.batch) {
      const std::size_t end = std::min(order.size(), start + cfg_.batch);
      std::vector<const LabeledImage*> items;
      for (std::size_t i = start; i < end; ++i) items.push_back(&data[order[i]]);
      const double b = cfg_.baseline == BaselineMode::ema ? baseline_ : 0.0;
      auto bl = batch_loss(items, b);
      const double loss = static_cast<double>(bl.total.item());
      if (!std::isfinite(loss)) throw NumericError("non-finite loss at epoch " + std::to_string(epoch_));
      for (auto& p : params_) p.tensor.zero_grad();
      backward(bl.total);
      clip_grad_norm(params_, cfg_.clip_norm);
      optimizer_step(params_, opt_, cfg_, lr);
      const double mean_r = std::accumulate(bl.returns.begin(), bl.returns.end(), 0.0) / static_cast<double>(bl.returns.size());
      if (cfg_.baseline == BaselineMode::ema) baseline_ = cfg_.ema * baseline_ + (1.0 - cfg_.ema) * mean_r;
      loss_sum += loss * static_cast<double>(items.size());
      reward_sum += mean_r * static_cast<double>(items.size());
      for (std::size_t i = 0; i < items.size(); ++i) {
        patients.push_back(items[i]->patient);
        correct.push_back(bl.rollout.traces[i].predicted == items[i]->label);
      }
    }
    ++epoch_;
    EpochMetrics m;
    const double n = static_cast<double>(data.size());
    m.loss = loss_sum / n;
    m.reward = reward_sum / n;
    m.acc = static_cast<double>(std::count(correct.begin(), correct.end(), std::uint8_t{1})) / n;
    m.prr = compute_prr(patients, correct).prr;
    return m;
  }

  // Deterministic pass: means for locations, argmax for the class.
  EvalResult evaluate(std::span<const LabeledImage> data) {
    return evaluate_model(model_, data, cfg_.batch);
  }

  // Episode i of the set draws from Rng(i); eval mode never consumes it.
  static EvalResult evaluate_model(Model<T>& model, std::span<const LabeledImage> data, std::size_t batch) {
    if (data.empty()) throw std::invalid_argument("evaluate: empty evaluation set");
    NoGradGuard no_grad;
    EvalResult r;
    double ce_sum = 0.0;
    std::vector<std::string> patients;
    std::vector<std::uint8_t> correct;
    for (std::size_t start = 0; start < data.size(); start += batch) {
      const std::size_t end = std::min(data.size(), start + batch);
      std::vector<const Image*> images;
      std::vector<std::size_t> labels;
      std::vector<Rng> rngs;
      for (std::size_t i = start; i < end; ++i) {
        images.push_back(&data[i].image);
        labels.push_back(data[i].label);
        rngs.emplace_back(i);
      }
      auto ro = rollout_batch<T>(model, images, labels, rngs, RolloutOptions<T>{Mode::eval, nullptr, nullptr});
      ce_sum += static_cast<double>(nn::cross_entropy(ro.final_probs, std::span<const std::size_t>(labels)).item()) *
                static_cast<double>(labels.size());
      for (std::size_t i = 0; i < ro.traces.size(); ++i) {
        r.predictions.push_back(ro.traces[i].predicted);
        patients.push_back(data[start + i].patient);
        correct.push_back(ro.traces[i].predicted == labels[i]);
      }
    }
    r.n_images = data.size();
    r.loss = ce_sum / static_cast<double>(data.size());
    r.acc = static_cast<double>(std::count(correct.begin(), correct.end(), std::uint8_t{1})) / static_cast<double>(data.size());
    r.prr = compute_prr(patients, correct).prr;
    r.n_patients = std::set<std::string>(patients.begin(), patients.end()).size();
    return r;
  }

 private:
  Model<T>& model_;
  TrainerConfig cfg_;
  ParamList<T> params_;
  OptimizerState<T> opt_;
  Rng shuffle_rng_;
  std::size_t epoch_ = 0;
  double baseline_ = 0.0;
  std::uint64_t episodes_ = 0;
};

}  // namespace dhan
