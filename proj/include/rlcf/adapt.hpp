#pragma once

#include <span>
#include <string>

#include "rlcf/autodiff.hpp"
#include "rlcf/param_tree.hpp"

namespace rlcf {

/// AdamW hyperparameters. Decay is decoupled: it is applied to the
/// parameters directly and never enters the moment estimates.
struct AdamWConfig {
  double lr = 1e-3;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Per-block moment accumulators for AdamW.
class OptimizerState {
 public:
  OptimizerState() = default;
  explicit OptimizerState(AdamWConfig config) : config_(config) {}

  const AdamWConfig& config() const { return config_; }
  std::size_t step_count() const { return step_; }
  /// Zeroes moments and the step counter; hyperparameters are kept.
  void reset();
  bool is_zeroed() const;

  const GradTree& first_moment() const { return first_; }
  const GradTree& second_moment() const { return second_; }

 private:
  friend void optimizer_step(OptimizerState&, ParamTree&, const GradTree&);
  AdamWConfig config_;
  std::size_t step_ = 0;
  GradTree first_;
  GradTree second_;
};

/// One AdamW update of the trainable blocks of `params`:
///   θ ← θ − lr·(m̂ / (√v̂ + ε) + wd·θ)
/// Frozen blocks are not touched. Throws Error naming the block when a
/// gradient is non-finite, or when the trees are not congruent.
void optimizer_step(OptimizerState& state, ParamTree& params, const GradTree& grads);

/// Single-sample adaptation state: live parameters, the pristine snapshot
/// they are reset to, and the optimizer.
struct EpisodeState {
  EpisodeState(ParamTree pristine_params, AdamWConfig config)
      : live(pristine_params), pristine(std::move(pristine_params)), optimizer(config) {}

  ParamTree live;
  ParamTree pristine;
  OptimizerState optimizer;
  std::size_t step = 0;
};

/// Restores live ← pristine bit-exactly and zeroes the optimizer.
void episodic_reset(EpisodeState& ep);

/// Exponential moving average of adapted parameters, committed back to the
/// pristine snapshot every `interval` samples.
struct MomentumBuffer {
  MomentumBuffer(const ParamTree& initial, double momentum, std::size_t interval);

  ParamTree shadow;
  double momentum;
  std::size_t interval;
  std::size_t samples_seen = 0;
  std::size_t commits = 0;
};

/// shadow ← m·shadow + (1−m)·adapted on trainable blocks. When the sample
/// counter reaches the interval it is zeroed, `*pristine` (if given) is set
/// to the shadow, and true is returned.
bool momentum_observe(MomentumBuffer& buf, const ParamTree& adapted, ParamTree* pristine = nullptr);

// Differentiable objectives. Inputs are tape values; constants (rewards,
// teacher outputs) carry no gradient.

/// −(1/K) Σ R_k · logprob_k, whose gradient is the REINFORCE estimator over
/// the K drawn candidates. `logprobs` is 1×K.
ad::Var reinforce_loss(ad::Var logprobs, std::span<const double> rewards);

/// Entropy of the mean of the per-view probability rows (n×C).
ad::Var entropy_min_loss(ad::Var view_probs);

/// −logprob[label] for a 1×C log-probability row.
ad::Var pseudo_label_loss(ad::Var logprobs, std::size_t label);

/// T²·KL(softmax(teacher/T) ‖ softmax(student/T)) for 1×C student logits.
ad::Var kd_loss(ad::Var student_logits, std::span<const double> teacher_logits, double temperature);

}  // namespace rlcf
