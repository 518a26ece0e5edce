#include "rlcf/param_tree.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace rlcf {

void ParamTree::add(std::string name, Tensor2 value, bool trainable) {
  if (contains(name)) throw Error("duplicate parameter block '" + name + "'");
  blocks_.push_back({std::move(name), std::move(value), trainable});
}

bool ParamTree::contains(std::string_view name) const {
  return std::any_of(blocks_.begin(), blocks_.end(),
                     [&](const Block& b) { return b.name == name; });
}

ParamTree::Block& ParamTree::find(std::string_view name) {
  for (auto& b : blocks_)
    if (b.name == name) return b;
  throw Error("unknown parameter block '" + std::string(name) + "'");
}

const ParamTree::Block& ParamTree::find(std::string_view name) const {
  for (const auto& b : blocks_)
    if (b.name == name) return b;
  throw Error("unknown parameter block '" + std::string(name) + "'");
}

const Tensor2& ParamTree::get(std::string_view name) const { return find(name).value; }

void ParamTree::set(std::string_view name, Tensor2 value) {
  Block& b = find(name);
  if (!b.value.same_shape(value)) {
    throw Error("shape change for block '" + b.name + "': " + b.value.shape_string() + " -> " +
                value.shape_string());
  }
  b.value = std::move(value);
}

std::span<double> ParamTree::values(std::string_view name) { return find(name).value.values(); }

bool ParamTree::trainable(std::string_view name) const { return find(name).trainable; }

void ParamTree::set_trainable(std::string_view name, bool trainable) {
  find(name).trainable = trainable;
}

void ParamTree::train_only(std::span<const std::string> names) {
  for (const auto& n : names) find(n);
  for (auto& b : blocks_) {
    b.trainable = std::find(names.begin(), names.end(), b.name) != names.end();
  }
}

void ParamTree::train_only(std::initializer_list<std::string_view> names) {
  std::vector<std::string> v(names.begin(), names.end());
  train_only(v);
}

std::vector<std::string> ParamTree::names() const {
  std::vector<std::string> out;
  for (const auto& b : blocks_) out.push_back(b.name);
  return out;
}

std::size_t ParamTree::scalar_count() const {
  std::size_t n = 0;
  for (const auto& b : blocks_) n += b.value.size();
  return n;
}

bool ParamTree::congruent(const ParamTree& other) const {
  if (blocks_.size() != other.blocks_.size()) return false;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    if (blocks_[i].name != other.blocks_[i].name) return false;
    if (!blocks_[i].value.same_shape(other.blocks_[i].value)) return false;
  }
  return true;
}

bool ParamTree::block_bit_equal(const ParamTree& other, std::string_view name) const {
  const Tensor2& a = get(name);
  const Tensor2& b = other.get(name);
  if (!a.same_shape(b)) return false;
  return a.size() == 0 || std::memcmp(a.values().data(), b.values().data(),
                                      a.size() * sizeof(double)) == 0;
}

bool ParamTree::bit_equal(const ParamTree& other) const {
  if (!congruent(other)) return false;
  for (const auto& b : blocks_)
    if (!block_bit_equal(other, b.name)) return false;
  return true;
}

ParamTree ParamTree::linear_combine(double a, const ParamTree& other, double b) const {
  if (!congruent(other)) throw Error("linear_combine: parameter trees are not congruent");
  ParamTree out = *this;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    if (!blocks_[i].trainable) continue;
    auto dst = out.blocks_[i].value.values();
    auto src = other.blocks_[i].value.values();
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = a * dst[j] + b * src[j];
  }
  return out;
}

GradTree GradTree::zeros_like(const ParamTree& params) {
  GradTree g;
  for (const auto& b : params.blocks()) {
    g.entries_.push_back({b.name, Tensor2(b.value.rows(), b.value.cols())});
  }
  return g;
}

const Tensor2& GradTree::get(std::string_view name) const {
  for (const auto& e : entries_)
    if (e.name == name) return e.value;
  throw Error("unknown gradient block '" + std::string(name) + "'");
}

Tensor2& GradTree::get(std::string_view name) {
  for (auto& e : entries_)
    if (e.name == name) return e.value;
  throw Error("unknown gradient block '" + std::string(name) + "'");
}

bool GradTree::congruent(const ParamTree& params) const {
  if (entries_.size() != params.size()) return false;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& b = params.blocks()[i];
    if (entries_[i].name != b.name || !entries_[i].value.same_shape(b.value)) return false;
  }
  return true;
}

std::vector<double> GradTree::flatten() const {
  std::vector<double> out;
  for (const auto& e : entries_) out.insert(out.end(), e.value.data().begin(), e.value.data().end());
  return out;
}

double GradTree::l2_norm() const {
  double s = 0.0;
  for (const auto& e : entries_)
    for (double x : e.value.values()) s += x * x;
  return std::sqrt(s);
}

bool GradTree::all_zero() const {
  for (const auto& e : entries_)
    for (double x : e.value.values())
      if (x != 0.0) return false;
  return true;
}

bool GradTree::all_finite() const {
  return std::all_of(entries_.begin(), entries_.end(),
                     [](const Entry& e) { return e.value.all_finite(); });
}

GradTree& GradTree::operator+=(const GradTree& other) {
  if (entries_.size() != other.entries_.size()) throw Error("GradTree += : not congruent");
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    auto dst = entries_[i].value.values();
    auto src = other.entries_[i].value.values();
    if (dst.size() != src.size()) throw Error("GradTree += : not congruent");
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
  }
  return *this;
}

GradTree& GradTree::operator*=(double s) {
  for (auto& e : entries_)
    for (double& x : e.value.values()) x *= s;
  return *this;
}

double relative_error(const GradTree& a, const GradTree& b) {
  const auto fa = a.flatten();
  const auto fb = b.flatten();
  if (fa.size() != fb.size()) throw Error("relative_error: size mismatch");
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < fa.size(); ++i) {
    diff += (fa[i] - fb[i]) * (fa[i] - fb[i]);
    na += fa[i] * fa[i];
    nb += fb[i] * fb[i];
  }
  const double denom = std::sqrt(std::max(na, nb));
  return denom == 0.0 ? 0.0 : std::sqrt(diff) / denom;
}

double max_relative_error(const GradTree& a, const GradTree& b, double floor) {
  const auto fa = a.flatten();
  const auto fb = b.flatten();
  if (fa.size() != fb.size()) throw Error("max_relative_error: size mismatch");
  double worst = 0.0;
  for (std::size_t i = 0; i < fa.size(); ++i) {
    const double denom = std::max({std::abs(fa[i]), std::abs(fb[i]), floor});
    worst = std::max(worst, std::abs(fa[i] - fb[i]) / denom);
  }
  return worst;
}

}  // namespace rlcf
