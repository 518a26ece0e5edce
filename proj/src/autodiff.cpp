#include "rlcf/autodiff.hpp"

#include <algorithm>
#include <cmath>

namespace rlcf::ad {

const Tensor2& Var::value() const { return tape_->value(id_); }

Var Tape::leaf(Tensor2 value, bool requires_grad) {
  if (!value.all_finite()) throw NumericError("leaf: non-finite value");
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(const char* op, Tensor2 value, std::vector<std::size_t> parents,
                 BackwardFn backward) {
  if (!value.all_finite()) throw NumericError(std::string(op) + ": non-finite value");
  Node n;
  n.op = op;
  n.value = std::move(value);
  n.requires_grad = std::any_of(parents.begin(), parents.end(),
                                [&](std::size_t p) { return nodes_[p].requires_grad; });
  if (n.requires_grad) {
    n.parents = std::move(parents);
    n.backward = std::move(backward);
  }
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Tensor2 Tape::grad(std::size_t id) const {
  const Node& n = nodes_[id];
  if (n.grad.empty()) return Tensor2(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::accumulate(std::size_t id, const Tensor2& delta) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return;
  if (n.grad.empty()) {
    n.grad = delta;
    return;
  }
  auto dst = n.grad.values();
  auto src = delta.values();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

void Tape::backward(Var root) {
  if (root.value().size() != 1) {
    throw Error("backward: root must be a scalar, got " + root.value().shape_string());
  }
  for (auto& n : nodes_) n.grad = Tensor2();
  if (!nodes_[root.id()].requires_grad) return;
  nodes_[root.id()].grad = Tensor2::scalar(1.0);
  for (std::size_t i = root.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
    if (!n.grad.all_finite()) throw NumericError(std::string(n.op) + ": non-finite gradient");
    n.backward(*this, i);
  }
}

namespace {

Tape& same_tape(Var a, Var b) {
  if (&a.tape() != &b.tape()) throw Error("ops on different tapes");
  return a.tape();
}

void require_same_shape(const char* op, const Tensor2& a, const Tensor2& b) {
  if (!a.same_shape(b)) {
    throw Error(std::string(op) + ": shape mismatch " + a.shape_string() + " vs " +
                b.shape_string());
  }
}

}  // namespace

Var matmul(Var a, Var b) {
  Tape& t = same_tape(a, b);
  const std::size_t ia = a.id(), ib = b.id();
  return t.record("matmul", rlcf::matmul(a.value(), b.value()), {ia, ib},
                  [ia, ib](Tape& t, std::size_t self) {
                    const Tensor2& g = t.out_grad(self);
                    if (t.requires_grad(ia)) t.accumulate(ia, rlcf::matmul_nt(g, t.value(ib)));
                    if (t.requires_grad(ib)) t.accumulate(ib, rlcf::matmul_tn(t.value(ia), g));
                  });
}

Var matmul_nt(Var a, Var b) {
  Tape& t = same_tape(a, b);
  const std::size_t ia = a.id(), ib = b.id();
  return t.record("matmul_nt", rlcf::matmul_nt(a.value(), b.value()), {ia, ib},
                  [ia, ib](Tape& t, std::size_t self) {
                    const Tensor2& g = t.out_grad(self);
                    if (t.requires_grad(ia)) t.accumulate(ia, rlcf::matmul(g, t.value(ib)));
                    if (t.requires_grad(ib)) t.accumulate(ib, rlcf::matmul_tn(g, t.value(ia)));
                  });
}

Var add(Var a, Var b) {
  Tape& t = same_tape(a, b);
  require_same_shape("add", a.value(), b.value());
  Tensor2 out = a.value();
  auto dst = out.values();
  auto src = b.value().values();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  const std::size_t ia = a.id(), ib = b.id();
  return t.record("add", std::move(out), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    t.accumulate(ia, t.out_grad(self));
    t.accumulate(ib, t.out_grad(self));
  });
}

Var sub(Var a, Var b) {
  Tape& t = same_tape(a, b);
  require_same_shape("sub", a.value(), b.value());
  Tensor2 out = a.value();
  auto dst = out.values();
  auto src = b.value().values();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] -= src[i];
  const std::size_t ia = a.id(), ib = b.id();
  return t.record("sub", std::move(out), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    t.accumulate(ia, t.out_grad(self));
    if (t.requires_grad(ib)) {
      Tensor2 g = t.out_grad(self);
      for (double& x : g.values()) x = -x;
      t.accumulate(ib, g);
    }
  });
}

Var mul(Var a, Var b) {
  Tape& t = same_tape(a, b);
  require_same_shape("mul", a.value(), b.value());
  Tensor2 out = a.value();
  auto dst = out.values();
  auto src = b.value().values();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] *= src[i];
  const std::size_t ia = a.id(), ib = b.id();
  return t.record("mul", std::move(out), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    const Tensor2& g = t.out_grad(self);
    auto product = [&](std::size_t other) {
      Tensor2 d = g;
      auto o = t.value(other).values();
      auto dv = d.values();
      for (std::size_t i = 0; i < dv.size(); ++i) dv[i] *= o[i];
      return d;
    };
    if (t.requires_grad(ia)) t.accumulate(ia, product(ib));
    if (t.requires_grad(ib)) t.accumulate(ib, product(ia));
  });
}

Var add_row(Var a, Var r) {
  Tape& t = same_tape(a, r);
  const Tensor2& av = a.value();
  const Tensor2& rv = r.value();
  if (rv.rows() != 1 || rv.cols() != av.cols()) {
    throw Error("add_row: shape mismatch " + av.shape_string() + " + " + rv.shape_string());
  }
  Tensor2 out = av;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto row = out.row(i);
    for (std::size_t j = 0; j < out.cols(); ++j) row[j] += rv[j];
  }
  const std::size_t ia = a.id(), ir = r.id();
  return t.record("add_row", std::move(out), {ia, ir}, [ia, ir](Tape& t, std::size_t self) {
    const Tensor2& g = t.out_grad(self);
    t.accumulate(ia, g);
    if (t.requires_grad(ir)) {
      Tensor2 d(1, g.cols());
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) d[j] += g(i, j);
      t.accumulate(ir, d);
    }
  });
}

Var scale(Var a, double s) {
  Tape& t = a.tape();
  Tensor2 out = a.value();
  for (double& x : out.values()) x *= s;
  const std::size_t ia = a.id();
  return t.record("scale", std::move(out), {ia}, [ia, s](Tape& t, std::size_t self) {
    Tensor2 d = t.out_grad(self);
    for (double& x : d.values()) x *= s;
    t.accumulate(ia, d);
  });
}

Var add_scalar(Var a, double s) {
  Tape& t = a.tape();
  Tensor2 out = a.value();
  for (double& x : out.values()) x += s;
  const std::size_t ia = a.id();
  return t.record("add_scalar", std::move(out), {ia},
                  [ia](Tape& t, std::size_t self) { t.accumulate(ia, t.out_grad(self)); });
}

Var tanh(Var a) {
  Tape& t = a.tape();
  Tensor2 out = a.value();
  for (double& x : out.values()) x = std::tanh(x);
  const std::size_t ia = a.id();
  return t.record("tanh", std::move(out), {ia}, [ia](Tape& t, std::size_t self) {
    Tensor2 d = t.out_grad(self);
    auto y = t.value(self).values();
    auto dv = d.values();
    for (std::size_t i = 0; i < dv.size(); ++i) dv[i] *= 1.0 - y[i] * y[i];
    t.accumulate(ia, d);
  });
}

Var log(Var a) {
  Tape& t = a.tape();
  Tensor2 out = a.value();
  for (double& x : out.values()) x = std::log(x);
  const std::size_t ia = a.id();
  return t.record("log", std::move(out), {ia}, [ia](Tape& t, std::size_t self) {
    Tensor2 d = t.out_grad(self);
    auto x = t.value(ia).values();
    auto dv = d.values();
    for (std::size_t i = 0; i < dv.size(); ++i) dv[i] /= x[i];
    t.accumulate(ia, d);
  });
}

Var normalize_rows(Var a) {
  Tape& t = a.tape();
  const Tensor2& av = a.value();
  Tensor2 out = av;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto row = out.row(i);
    const double n = l2_norm(row);
    if (n == 0.0) throw Error("degenerate embedding");
    for (double& x : row) x /= n;
  }
  const std::size_t ia = a.id();
  return t.record("normalize_rows", std::move(out), {ia}, [ia](Tape& t, std::size_t self) {
    const Tensor2& g = t.out_grad(self);
    const Tensor2& y = t.value(self);
    const Tensor2& x = t.value(ia);
    Tensor2 d(g.rows(), g.cols());
    for (std::size_t i = 0; i < g.rows(); ++i) {
      const double n = l2_norm(x.row(i));
      const double yg = dot(y.row(i), g.row(i));
      for (std::size_t j = 0; j < g.cols(); ++j) d(i, j) = (g(i, j) - y(i, j) * yg) / n;
    }
    t.accumulate(ia, d);
  });
}

Var softmax_rows(Var a) {
  Tape& t = a.tape();
  const Tensor2& av = a.value();
  Tensor2 out(av.rows(), av.cols());
  for (std::size_t i = 0; i < av.rows(); ++i) {
    const auto p = rlcf::softmax(av.row(i));
    std::copy(p.begin(), p.end(), out.row(i).begin());
  }
  const std::size_t ia = a.id();
  return t.record("softmax_rows", std::move(out), {ia}, [ia](Tape& t, std::size_t self) {
    const Tensor2& g = t.out_grad(self);
    const Tensor2& y = t.value(self);
    Tensor2 d(g.rows(), g.cols());
    for (std::size_t i = 0; i < g.rows(); ++i) {
      const double gy = dot(g.row(i), y.row(i));
      for (std::size_t j = 0; j < g.cols(); ++j) d(i, j) = y(i, j) * (g(i, j) - gy);
    }
    t.accumulate(ia, d);
  });
}

Var log_softmax_rows(Var a) {
  Tape& t = a.tape();
  const Tensor2& av = a.value();
  Tensor2 out(av.rows(), av.cols());
  for (std::size_t i = 0; i < av.rows(); ++i) {
    const auto lp = rlcf::log_softmax(av.row(i));
    std::copy(lp.begin(), lp.end(), out.row(i).begin());
  }
  const std::size_t ia = a.id();
  return t.record("log_softmax_rows", std::move(out), {ia}, [ia](Tape& t, std::size_t self) {
    const Tensor2& g = t.out_grad(self);
    const Tensor2& y = t.value(self);
    Tensor2 d(g.rows(), g.cols());
    for (std::size_t i = 0; i < g.rows(); ++i) {
      double gsum = 0.0;
      for (double x : g.row(i)) gsum += x;
      for (std::size_t j = 0; j < g.cols(); ++j) d(i, j) = g(i, j) - std::exp(y(i, j)) * gsum;
    }
    t.accumulate(ia, d);
  });
}

Var sum(Var a) {
  Tape& t = a.tape();
  double s = 0.0;
  for (double x : a.value().values()) s += x;
  const std::size_t ia = a.id();
  return t.record("sum", Tensor2::scalar(s), {ia}, [ia](Tape& t, std::size_t self) {
    const Tensor2& x = t.value(ia);
    t.accumulate(ia, Tensor2(x.rows(), x.cols(), t.out_grad(self).item()));
  });
}

Var mean(Var a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw Error("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

Var sum_rows(Var a) {
  Tape& t = a.tape();
  const Tensor2& av = a.value();
  Tensor2 out(1, av.cols());
  for (std::size_t i = 0; i < av.rows(); ++i)
    for (std::size_t j = 0; j < av.cols(); ++j) out[j] += av(i, j);
  const std::size_t ia = a.id();
  return t.record("sum_rows", std::move(out), {ia}, [ia](Tape& t, std::size_t self) {
    const Tensor2& g = t.out_grad(self);
    const Tensor2& x = t.value(ia);
    Tensor2 d(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.rows(); ++i)
      for (std::size_t j = 0; j < x.cols(); ++j) d(i, j) = g[j];
    t.accumulate(ia, d);
  });
}

Var mean_rows(Var a) {
  const std::size_t m = a.value().rows();
  if (m == 0) throw Error("mean_rows of empty tensor");
  return scale(sum_rows(a), 1.0 / static_cast<double>(m));
}

Var concat_rows(Var a, Var b) {
  Tape& t = same_tape(a, b);
  const Tensor2& av = a.value();
  const Tensor2& bv = b.value();
  if (av.cols() != bv.cols()) throw Error("concat_rows: column mismatch");
  std::vector<double> data(av.data());
  data.insert(data.end(), bv.data().begin(), bv.data().end());
  const std::size_t ia = a.id(), ib = b.id();
  const std::size_t split = av.size();
  return t.record("concat_rows", Tensor2(av.rows() + bv.rows(), av.cols(), std::move(data)),
                  {ia, ib}, [ia, ib, split](Tape& t, std::size_t self) {
                    const auto& g = t.out_grad(self).data();
                    const Tensor2& x = t.value(ia);
                    const Tensor2& y = t.value(ib);
                    if (t.requires_grad(ia)) {
                      t.accumulate(ia, Tensor2(x.rows(), x.cols(),
                                               std::vector<double>(g.begin(), g.begin() + split)));
                    }
                    if (t.requires_grad(ib)) {
                      t.accumulate(ib, Tensor2(y.rows(), y.cols(),
                                               std::vector<double>(g.begin() + split, g.end())));
                    }
                  });
}

Var row(Var a, std::size_t r) {
  const Tensor2& av = a.value();
  if (r >= av.rows()) throw Error("row: index out of range");
  std::vector<std::size_t> cols(av.cols());
  for (std::size_t j = 0; j < cols.size(); ++j) cols[j] = j;
  return gather_row(a, r, cols);
}

Var select_rows(Var a, std::span<const std::size_t> ids) {
  Tape& t = a.tape();
  const std::size_t ia = a.id();
  return t.record("select_rows", rlcf::select_rows(a.value(), ids), {ia},
                  [ia, rows = std::vector<std::size_t>(ids.begin(), ids.end())](Tape& t,
                                                                               std::size_t self) {
                    const Tensor2& g = t.out_grad(self);
                    const Tensor2& x = t.value(ia);
                    Tensor2 d(x.rows(), x.cols());
                    for (std::size_t i = 0; i < rows.size(); ++i) {
                      auto src = g.row(i);
                      auto dst = d.row(rows[i]);
                      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
                    }
                    t.accumulate(ia, d);
                  });
}

Var gather_row(Var a, std::size_t r, std::span<const std::size_t> cols) {
  std::vector<std::size_t> rows(cols.size(), r);
  return gather(a, rows, cols);
}

Var gather(Var a, std::span<const std::size_t> rows, std::span<const std::size_t> cols) {
  Tape& t = a.tape();
  const Tensor2& av = a.value();
  if (rows.size() != cols.size()) throw Error("gather: index length mismatch");
  Tensor2 out(1, rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= av.rows() || cols[i] >= av.cols()) throw Error("gather: index out of range");
    out[i] = av(rows[i], cols[i]);
  }
  const std::size_t ia = a.id();
  return t.record("gather", std::move(out), {ia},
                  [ia, r = std::vector<std::size_t>(rows.begin(), rows.end()),
                   c = std::vector<std::size_t>(cols.begin(), cols.end())](Tape& t,
                                                                           std::size_t self) {
                    const Tensor2& g = t.out_grad(self);
                    const Tensor2& x = t.value(ia);
                    Tensor2 d(x.rows(), x.cols());
                    for (std::size_t i = 0; i < r.size(); ++i) d(r[i], c[i]) += g[i];
                    t.accumulate(ia, d);
                  });
}

Var entropy(Var p) {
  Tape& t = p.tape();
  const double h = rlcf::entropy(p.value().values());
  const std::size_t ip = p.id();
  return t.record("entropy", Tensor2::scalar(h), {ip}, [ip](Tape& t, std::size_t self) {
    const Tensor2& x = t.value(ip);
    const double g = t.out_grad(self).item();
    Tensor2 d(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (x[i] > 0.0) d[i] = -g * (std::log(x[i]) + 1.0);
    }
    t.accumulate(ip, d);
  });
}

Var weighted_sum(Var a, const Tensor2& weights) {
  Tape& t = a.tape();
  require_same_shape("weighted_sum", a.value(), weights);
  const double s = dot(a.value().values(), weights.values());
  const std::size_t ia = a.id();
  return t.record("weighted_sum", Tensor2::scalar(s), {ia}, [ia, weights](Tape& t, std::size_t self) {
    Tensor2 d = weights;
    const double g = t.out_grad(self).item();
    for (double& x : d.values()) x *= g;
    t.accumulate(ia, d);
  });
}

Var Bindings::operator[](std::string_view name) const {
  for (const auto& [n, v] : entries_)
    if (n == name) return v;
  throw Error("no binding for '" + std::string(name) + "'");
}

Bindings bind(Tape& tape, const ParamTree& params) {
  Bindings b;
  for (const auto& block : params.blocks()) b.bind(block.name, tape.leaf(block.value, block.trainable));
  return b;
}

namespace {

Var run_loss(const LossFn& loss, Tape& tape, const Bindings& b) {
  Var out = loss(tape, b);
  if (!out.valid() || out.value().size() != 1) throw Error("loss function must return a scalar");
  return out;
}

}  // namespace

double evaluate(const LossFn& loss, const ParamTree& params) {
  Tape tape;
  const Bindings b = bind(tape, params);
  return run_loss(loss, tape, b).item();
}

ValueAndGrad value_and_grad(const LossFn& loss, const ParamTree& params) {
  Tape tape;
  const Bindings b = bind(tape, params);
  Var out = run_loss(loss, tape, b);
  tape.backward(out);
  ValueAndGrad result{out.item(), GradTree::zeros_like(params)};
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& block = params.blocks()[i];
    if (!block.trainable) continue;
    result.grad.get(block.name) = tape.grad(b.entries()[i].second.id());
  }
  return result;
}

GradTree grad(const LossFn& loss, const ParamTree& params) {
  return value_and_grad(loss, params).grad;
}

GradTree finite_diff(const LossFn& loss, const ParamTree& params, double h) {
  if (!(h > 0.0)) throw Error("finite_diff: step h must be positive");
  GradTree out = GradTree::zeros_like(params);
  ParamTree probe = params;
  for (const auto& block : params.blocks()) {
    if (!block.trainable) continue;
    Tensor2& g = out.get(block.name);
    auto vals = probe.values(block.name);
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double orig = vals[i];
      vals[i] = orig + h;
      const double up = evaluate(loss, probe);
      vals[i] = orig - h;
      const double down = evaluate(loss, probe);
      vals[i] = orig;
      g[i] = (up - down) / (2.0 * h);
    }
  }
  return out;
}

}  // namespace rlcf::ad
