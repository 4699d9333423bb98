#pragma once

// Plain gradient descent over the full pipeline with one step size per
// parameter group. Frozen parameters never move.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "xagent/training/pipeline.hpp"
#include "xagent/training/synthetic.hpp"

namespace xagent {

struct TrainOptions {
  double lr_decoder = 0.05;
  double lr_backbone = 0.0005;  // decoder / 100
  std::vector<std::string> frozen_prefixes;  // parameters held fixed by name prefix
};

struct TrainState {
  Model model;
  Index step = 0;
  TrainOptions lr;
  std::vector<double> history;  // mean total loss of each step's batch
};

class TrainingAborted : public NumericError {
 public:
  TrainingAborted(const std::string& what, TrainState state)
      : NumericError(what), state_(std::move(state)) {}
  const TrainState& state() const { return state_; }

 private:
  TrainState state_;
};

/// Batch for a given step; must be deterministic in the step index.
using BatchStream = std::function<std::vector<Instance>(Index step)>;

inline double step_size(const TrainOptions& o, ParamGroup g) {
  switch (g) {
    case ParamGroup::Decoder: return o.lr_decoder;
    case ParamGroup::Backbone: return o.lr_backbone;
    case ParamGroup::Frozen: return 0.0;
  }
  return 0.0;
}

/// One batch: forward/backward per instance in order, gradients averaged,
/// then one update. Returns the mean loss before the update.
inline double train_step(TrainState& s, const PipelineConfig& cfg,
                         const std::vector<Instance>& batch) {
  if (batch.empty()) throw ArgumentError("train_step: empty batch");
  Vector grad;
  double loss = 0.0;
  for (const Instance& inst : batch) {
    Vector g;
    try {
      const ForwardTrace t = forward(s.model, cfg, inst);
      if (!std::isfinite(t.total)) throw NumericError("non-finite loss");
      loss += t.total;
      g = flatten(backward(s.model, cfg, t, inst));
    } catch (const NumericError& e) {
      throw TrainingAborted("train: step " + std::to_string(s.step) + ": " + e.what(), s);
    }
    if (grad.empty()) {
      grad = g;
    } else {
      for (Index i = 0; i < g.size(); ++i) grad[i] += g[i];
    }
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  loss *= inv;
  Index pos = 0;
  for_each_param(s.model, [&](const std::string& name, std::span<double> v, ParamGroup group) {
    double lr = step_size(s.lr, group);
    for (const auto& prefix : s.lr.frozen_prefixes)
      if (name.starts_with(prefix)) lr = 0.0;
    for (Index i = 0; i < v.size(); ++i, ++pos) {
      if (lr == 0.0) continue;
      v[i] -= lr * inv * grad[pos];
      if (!std::isfinite(v[i])) {
        throw TrainingAborted("train: parameter " + name + " diverged at step " +
                                  std::to_string(s.step),
                              s);
      }
    }
  });
  s.history.push_back(loss);
  ++s.step;
  return loss;
}

inline TrainState train(Index steps, TrainState state, const PipelineConfig& cfg,
                        const BatchStream& data) {
  if (steps == 0) throw ArgumentError("train: steps must be >= 1");
  for (Index i = 0; i < steps; ++i) train_step(state, cfg, data(state.step));
  return state;
}

/// Three well-separated categories, 16 tokens of width 8, two layers.
struct ToyProblem {
  TrainState state;
  PipelineConfig cfg;
  Instance inst;
};

inline ToyProblem separable_toy(std::uint64_t seed) {
  Rng rng(seed);
  SyntheticSpec data;
  data.d = 8;
  data.d_prime = 8;
  data.seen = 3;
  data.token_noise = 0.2;
  const CategorySpace cs = make_categories(data, rng);
  ToyProblem t;
  t.inst = make_instance(cs, 16, 3, data.token_noise, rng);
  ModelSpec spec;
  spec.d = 8;
  spec.d_prime = 8;
  spec.layers = 2;
  spec.k = 2;
  spec.q = 2;
  t.state.model = init_model(spec, rng);
  t.cfg.k = 2;
  t.cfg.q = 2;
  return t;
}

}  // namespace xagent
