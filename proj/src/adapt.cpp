#include "rlcf/adapt.hpp"

#include <cmath>

namespace rlcf {

void OptimizerState::reset() {
  step_ = 0;
  first_ = GradTree();
  second_ = GradTree();
}

bool OptimizerState::is_zeroed() const {
  return step_ == 0 && (first_.entries().empty() || first_.all_zero()) &&
         (second_.entries().empty() || second_.all_zero());
}

void optimizer_step(OptimizerState& state, ParamTree& params, const GradTree& grads) {
  if (!grads.congruent(params)) throw Error("optimizer_step: gradient tree does not match parameters");
  for (const auto& b : params.blocks()) {
    if (b.trainable && !grads.get(b.name).all_finite()) {
      throw Error("optimizer_step: non-finite gradient in block '" + b.name + "'");
    }
  }
  if (state.first_.entries().empty()) {
    state.first_ = GradTree::zeros_like(params);
    state.second_ = GradTree::zeros_like(params);
  } else if (!state.first_.congruent(params)) {
    throw Error("optimizer_step: optimizer state does not match parameters");
  }

  const AdamWConfig& c = state.config_;
  ++state.step_;
  const double t = static_cast<double>(state.step_);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);

  for (const auto& b : params.blocks()) {
    if (!b.trainable) continue;
    auto theta = params.values(b.name);
    auto g = grads.get(b.name).values();
    auto m = state.first_.get(b.name).values();
    auto v = state.second_.get(b.name).values();
    for (std::size_t i = 0; i < theta.size(); ++i) {
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      theta[i] -= c.lr * (m_hat / (std::sqrt(v_hat) + c.eps) + c.weight_decay * theta[i]);
    }
  }
}

void episodic_reset(EpisodeState& ep) {
  ep.live = ep.pristine;
  ep.optimizer.reset();
  ep.step = 0;
}

MomentumBuffer::MomentumBuffer(const ParamTree& initial, double m, std::size_t b_s)
    : shadow(initial), momentum(m), interval(b_s) {
  if (!(m >= 0.0 && m < 1.0)) throw Error("momentum coefficient must lie in [0, 1)");
  if (b_s == 0) throw Error("momentum interval must be positive");
}

bool momentum_observe(MomentumBuffer& buf, const ParamTree& adapted, ParamTree* pristine) {
  if (!buf.shadow.congruent(adapted)) throw Error("momentum_observe: shape mismatch");
  buf.shadow = buf.shadow.linear_combine(buf.momentum, adapted, 1.0 - buf.momentum);
  ++buf.samples_seen;
  if (buf.samples_seen < buf.interval) return false;
  buf.samples_seen = 0;
  ++buf.commits;
  if (pristine != nullptr) *pristine = buf.shadow;
  return true;
}

ad::Var reinforce_loss(ad::Var logprobs, std::span<const double> rewards) {
  if (logprobs.rows() != 1 || logprobs.cols() != rewards.size()) {
    throw Error("reinforce_loss: " + std::to_string(logprobs.value().size()) + " logprobs vs " +
                std::to_string(rewards.size()) + " rewards");
  }
  if (rewards.empty()) throw Error("reinforce_loss: no candidates");
  const double k = static_cast<double>(rewards.size());
  return ad::scale(ad::weighted_sum(logprobs, Tensor2::row_vector(rewards)), -1.0 / k);
}

ad::Var entropy_min_loss(ad::Var view_probs) {
  if (view_probs.rows() == 0) throw Error("entropy_min_loss: no views");
  return ad::entropy(ad::mean_rows(view_probs));
}

ad::Var pseudo_label_loss(ad::Var logprobs, std::size_t label) {
  if (logprobs.rows() != 1) throw Error("pseudo_label_loss: expected a single row");
  if (label >= logprobs.cols()) throw Error("pseudo_label_loss: label out of range");
  const std::size_t cols[] = {label};
  return ad::scale(ad::gather_row(logprobs, 0, cols), -1.0);
}

ad::Var kd_loss(ad::Var student_logits, std::span<const double> teacher_logits, double temperature) {
  if (!(temperature > 0.0)) throw Error("kd_loss: temperature must be positive");
  if (student_logits.rows() != 1 || student_logits.cols() != teacher_logits.size()) {
    throw Error("kd_loss: student/teacher length mismatch");
  }
  std::vector<double> scaled(teacher_logits.begin(), teacher_logits.end());
  for (double& x : scaled) x /= temperature;
  const std::vector<double> q = softmax(scaled);
  const double neg_entropy = -entropy(q);
  ad::Var student_logp = ad::log_softmax_rows(ad::scale(student_logits, 1.0 / temperature));
  // KL(q ‖ p) = Σ q log q − Σ q log p
  ad::Var cross = ad::weighted_sum(student_logp, Tensor2::row_vector(q));
  ad::Var kl = ad::add_scalar(ad::scale(cross, -1.0), neg_entropy);
  return ad::scale(kl, temperature * temperature);
}

}  // namespace rlcf
