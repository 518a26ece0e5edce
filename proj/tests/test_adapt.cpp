#include <cmath>
#include <limits>

#include "doctest.h"
#include "helpers.hpp"
#include "rlcf/adapt.hpp"

using namespace rlcf;
using testing::random_tensor;

namespace {

struct RefAdam {
  std::vector<double> m, v;
  int t = 0;
  void step(std::vector<double>& x, const std::vector<double>& g, const AdamWConfig& c) {
    if (m.empty()) m.assign(x.size(), 0.0), v.assign(x.size(), 0.0);
    ++t;
    for (std::size_t i = 0; i < x.size(); ++i) {
      m[i] = c.beta1 * m[i] + (1 - c.beta1) * g[i];
      v[i] = c.beta2 * v[i] + (1 - c.beta2) * g[i] * g[i];
      const double mh = m[i] / (1 - std::pow(c.beta1, t));
      const double vh = v[i] / (1 - std::pow(c.beta2, t));
      x[i] -= c.lr * (mh / (std::sqrt(vh) + c.eps) + c.weight_decay * x[i]);
    }
  }
};

GradTree grad_of(const ParamTree& p, Rng& rng) {
  GradTree g = GradTree::zeros_like(p);
  for (const auto& b : p.blocks())
    if (b.trainable)
      for (double& x : g.get(b.name).values()) x = rng.normal();
  return g;
}

}  // namespace

TEST_CASE("AdamW matches a reference implementation over several steps") {
  Rng rng(1);
  const AdamWConfig cfg{.lr = 0.05, .weight_decay = 0.01};
  ParamTree p;
  p.add("w", random_tensor(2, 3, rng));
  p.add("frozen", random_tensor(1, 2, rng), false);
  const ParamTree before = p;
  OptimizerState st(cfg);
  RefAdam ref;
  std::vector<double> x(p.get("w").values().begin(), p.get("w").values().end());
  for (int s = 0; s < 5; ++s) {
    const GradTree g = grad_of(p, rng);
    optimizer_step(st, p, g);
    std::vector<double> gv(g.get("w").values().begin(), g.get("w").values().end());
    ref.step(x, gv, cfg);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(p.get("w")[i] == doctest::Approx(x[i]).epsilon(1e-12));
  }
  CHECK(st.step_count() == 5);
  CHECK(p.block_bit_equal(before, "frozen"));
}

TEST_CASE("weight decay is decoupled from the moments") {
  ParamTree p;
  p.add("w", Tensor2::row_vector({2.0, -4.0}));
  OptimizerState st(AdamWConfig{.lr = 0.1, .weight_decay = 0.5});
  optimizer_step(st, p, GradTree::zeros_like(p));
  CHECK(p.get("w")[0] == doctest::Approx(2.0 - 0.1 * 0.5 * 2.0));
  CHECK(p.get("w")[1] == doctest::Approx(-4.0 + 0.1 * 0.5 * 4.0));
  for (double m : st.first_moment().get("w").values()) CHECK(m == 0.0);
  for (double v : st.second_moment().get("w").values()) CHECK(v == 0.0);
}

TEST_CASE("optimizer rejects bad gradients") {
  ParamTree p;
  p.add("w", Tensor2(1, 2));
  OptimizerState st(AdamWConfig{});
  GradTree g = GradTree::zeros_like(p);
  g.get("w")[1] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_WITH_AS(optimizer_step(st, p, g), doctest::Contains("w"), Error);
  ParamTree q;
  q.add("v", Tensor2(1, 2));
  CHECK_THROWS_AS(optimizer_step(st, p, GradTree::zeros_like(q)), Error);
}

TEST_CASE("episodic reset restores parameters and zeroes moments") {
  Rng rng(2);
  ParamTree p;
  p.add("w", random_tensor(3, 3, rng));
  EpisodeState ep(p, AdamWConfig{.lr = 0.1});
  for (int i = 0; i < 3; ++i) optimizer_step(ep.optimizer, ep.live, grad_of(ep.live, rng));
  ep.step = 3;
  CHECK_FALSE(ep.live.bit_equal(p));
  CHECK_FALSE(ep.optimizer.is_zeroed());
  episodic_reset(ep);
  CHECK(ep.live.bit_equal(p));
  CHECK(ep.optimizer.is_zeroed());
  CHECK(ep.step == 0);
  CHECK(ep.optimizer.config().lr == 0.1);
}

TEST_CASE("momentum buffer follows its recurrence and commits on the interval") {
  Rng rng(3);
  ParamTree zero;
  zero.add("w", Tensor2(2, 2));
  zero.add("f", Tensor2(1, 1, 7.0), false);
  ParamTree theta = zero;
  for (double& x : theta.values("w")) x = rng.normal();
  const double m = 0.9;
  MomentumBuffer buf(zero, m, 4);
  ParamTree pristine = zero;
  std::vector<std::size_t> commits;
  for (std::size_t n = 1; n <= 12; ++n) {
    if (momentum_observe(buf, theta, &pristine)) commits.push_back(n);
    for (std::size_t i = 0; i < 4; ++i) {
      CHECK(buf.shadow.get("w")[i] == doctest::Approx((1 - std::pow(m, n)) * theta.get("w")[i]).epsilon(1e-12));
    }
    CHECK(buf.shadow.get("f")[0] == 7.0);
  }
  CHECK(commits == std::vector<std::size_t>{4, 8, 12});
  CHECK(buf.commits == 3);
  CHECK(pristine.bit_equal(buf.shadow));
}

TEST_CASE("reinforce loss value and gradient") {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    ParamTree p;
    p.add("z", random_tensor(1, 6, rng));
    std::vector<double> r(3);
    for (double& x : r) x = rng.normal();
    const std::vector<std::size_t> cands{0, 2, 5};
    const ad::LossFn f = [&](ad::Tape&, const ad::Bindings& b) {
      return reinforce_loss(ad::gather_row(ad::log_softmax_rows(b["z"]), 0, cands), r);
    };
    const auto lp = log_softmax(p.get("z").values());
    const double expect = -(r[0] * lp[0] + r[1] * lp[2] + r[2] * lp[5]) / 3.0;
    CHECK(ad::evaluate(f, p) == doctest::Approx(expect).epsilon(1e-12));
    CHECK(relative_error(ad::grad(f, p), ad::finite_diff(f, p, 1e-6)) < 1e-6);
  }
  ad::Tape tape;
  ad::Var lp = tape.leaf(Tensor2(1, 2), true);
  CHECK_THROWS_AS(reinforce_loss(lp, std::vector<double>{1.0}), Error);
}

TEST_CASE("entropy_min loss is the entropy of the mean view distribution") {
  Rng rng(5);
  ParamTree p;
  p.add("z", random_tensor(4, 5, rng));
  const ad::LossFn f = [](ad::Tape&, const ad::Bindings& b) { return entropy_min_loss(ad::softmax_rows(b["z"])); };
  std::vector<double> mean(5, 0.0);
  for (std::size_t r = 0; r < 4; ++r) {
    const auto pr = softmax(p.get("z").row(r));
    for (std::size_t c = 0; c < 5; ++c) mean[c] += pr[c] / 4.0;
  }
  CHECK(ad::evaluate(f, p) == doctest::Approx(entropy(mean)).epsilon(1e-12));
  CHECK(relative_error(ad::grad(f, p), ad::finite_diff(f, p, 1e-6)) < 1e-6);
}

TEST_CASE("pseudo-label and KD losses") {
  Rng rng(6);
  for (int trial = 0; trial < 10; ++trial) {
    ParamTree p;
    p.add("z", random_tensor(1, 4, rng, 2.0));
    std::vector<double> teacher(4);
    for (double& x : teacher) x = rng.normal(0, 2);
    const double T = 0.5 + rng.uniform() * 2.0;
    const ad::LossFn pl = [](ad::Tape&, const ad::Bindings& b) { return pseudo_label_loss(ad::log_softmax_rows(b["z"]), 2); };
    CHECK(ad::evaluate(pl, p) == doctest::Approx(-log_softmax(p.get("z").values())[2]).epsilon(1e-12));
    const ad::LossFn kd = [&](ad::Tape&, const ad::Bindings& b) { return kd_loss(b["z"], teacher, T); };
    std::vector<double> zs(4), ts(4);
    for (int i = 0; i < 4; ++i) zs[i] = p.get("z")[i] / T, ts[i] = teacher[i] / T;
    const auto pt = softmax(ts);
    const auto lt = log_softmax(ts), ls = log_softmax(zs);
    double kl = 0;
    for (int i = 0; i < 4; ++i) kl += pt[i] * (lt[i] - ls[i]);
    CHECK(ad::evaluate(kd, p) == doctest::Approx(T * T * kl).epsilon(1e-10));
    CHECK(relative_error(ad::grad(kd, p), ad::finite_diff(kd, p, 1e-6)) < 1e-6);
    // KD vanishes at the teacher
    ParamTree at = p;
    at.set("z", Tensor2::row_vector(teacher));
    CHECK(std::abs(ad::evaluate(kd, at)) < 1e-12);
  }
}
