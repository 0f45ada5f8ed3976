#pragma once

#include <cstddef>
#include <numeric>
#include <optional>
#include <vector>

#include "dhan/glimpse.hpp"

namespace dhan {

struct StepRecord {
  std::size_t t = 0;  // 1-based
  Location prev_location;
  long center_row = 0, center_col = 0;
  std::size_t values_read = 0;
  std::vector<double> hidden;
  std::vector<double> class_probs;
  Location mean;
  // Present for t < T. raw_sample is the pre-clamp draw (equal to mean in eval mode).
  std::optional<Location> raw_sample;
  std::optional<Location> next_location;
  double location_logprob = 0.0;
  // Present at t = T, and at every step when intermediate actions are sampled.
  std::optional<std::size_t> action;
  double action_logprob = 0.0;
  double reward = 0.0;
};

struct EpisodeTrace {
  std::vector<StepRecord> steps;
  std::size_t label = 0;
  std::size_t predicted = 0;
  double total_return = 0.0;
  double sigma = 0.0;

  std::size_t location_samples() const {
    std::size_t n = 0;
    for (const auto& s : steps) n += s.raw_sample.has_value();
    return n;
  }
  std::size_t values_read() const {
    std::size_t n = 0;
    for (const auto& s : steps) n += s.values_read;
    return n;
  }
  // Sum of every log-probability the policy-gradient term is built from.
  double logprob_sum() const {
    double s = 0.0;
    for (const auto& st : steps) s += st.location_logprob + st.action_logprob;
    return s;
  }
};

// Reward 1 at the last step for a correct prediction, 0 everywhere else.
inline void assign_rewards(EpisodeTrace& trace, std::size_t label) {
  trace.label = label;
  for (auto& s : trace.steps) s.reward = 0.0;
  if (!trace.steps.empty() && trace.predicted == label) trace.steps.back().reward = 1.0;
  trace.total_return = std::accumulate(trace.steps.begin(), trace.steps.end(), 0.0,
                                       [](double acc, const StepRecord& s) { return acc + s.reward; });
}

}  // namespace dhan
