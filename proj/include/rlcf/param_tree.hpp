#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "rlcf/tensor.hpp"

namespace rlcf {

/// Named, shaped parameter blocks in insertion order. Block shapes are
/// fixed once added; values are copied on clone.
class ParamTree {
 public:
  struct Block {
    std::string name;
    Tensor2 value;
    bool trainable = true;
  };

  void add(std::string name, Tensor2 value, bool trainable = true);

  bool contains(std::string_view name) const;
  const Tensor2& get(std::string_view name) const;
  /// Replaces the values of a block; the shape must match.
  void set(std::string_view name, Tensor2 value);
  std::span<double> values(std::string_view name);

  bool trainable(std::string_view name) const;
  void set_trainable(std::string_view name, bool trainable);
  /// Marks exactly the listed blocks trainable and freezes the rest.
  void train_only(std::span<const std::string> names);
  void train_only(std::initializer_list<std::string_view> names);

  const std::vector<Block>& blocks() const { return blocks_; }
  std::vector<std::string> names() const;
  std::size_t size() const { return blocks_.size(); }
  std::size_t scalar_count() const;

  ParamTree clone() const { return *this; }
  bool congruent(const ParamTree& other) const;
  /// Exact bitwise equality of all values (and names/shapes).
  bool bit_equal(const ParamTree& other) const;
  bool block_bit_equal(const ParamTree& other, std::string_view name) const;

  /// a·this + b·other for trainable blocks; frozen blocks are copied from
  /// this unchanged.
  ParamTree linear_combine(double a, const ParamTree& other, double b) const;

 private:
  Block& find(std::string_view name);
  const Block& find(std::string_view name) const;

  std::vector<Block> blocks_;
};

/// Gradient carrier congruent with a ParamTree. Frozen blocks hold zeros.
class GradTree {
 public:
  GradTree() = default;
  /// All-zero gradient shaped like `params`.
  static GradTree zeros_like(const ParamTree& params);

  struct Entry {
    std::string name;
    Tensor2 value;
  };

  const Tensor2& get(std::string_view name) const;
  Tensor2& get(std::string_view name);
  const std::vector<Entry>& entries() const { return entries_; }
  bool congruent(const ParamTree& params) const;

  std::vector<double> flatten() const;
  double l2_norm() const;
  bool all_zero() const;
  bool all_finite() const;

  GradTree& operator+=(const GradTree& other);
  GradTree& operator*=(double s);

 private:
  std::vector<Entry> entries_;
};

/// ‖a−b‖ / max(‖a‖, ‖b‖) over the flattened trees; 0 when both are zero.
double relative_error(const GradTree& a, const GradTree& b);

/// Largest |a-b| / max(|a|,|b|,floor) over all entries.
double max_relative_error(const GradTree& a, const GradTree& b, double floor = 1e-6);

}  // namespace rlcf
