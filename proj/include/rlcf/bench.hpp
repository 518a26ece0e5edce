#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "rlcf/captioner.hpp"
#include "rlcf/models.hpp"
#include "rlcf/tensor.hpp"

namespace rlcf {

/// Generative process of the synthetic shift benchmark.
///
/// Every class is a set of attributes. Attribute a has a token embedding
/// e_a (d_tok) and an image direction φ_a (unit, d_in). A class text is the
/// token row Σ e_a / √n and its prototype is normalize(Σ φ_a). Source images
/// are prototype + N(0, σ_s²/d_in) noise. Target images rotate the source
/// image inside a random `rotation_dims`-dimensional subspace by
/// shift·max_angle, add shift·bias·b̂ (b̂ a random unit vector) and extra noise
/// of scale shift·target_noise. shift = 0 gives exactly the source process.
///
/// complementary = true builds twin classes (2i, 2i+1) sharing `attrs_per_class
/// − 1` coarse attributes and differing by one fine attribute; the teacher's
/// class texts omit the fine attribute, so it cannot split twins.
struct BenchSpec {
  std::size_t classes = 20;
  std::size_t d_in = 32;
  std::size_t d_tok = 16;
  std::size_t attributes = 24;
  std::size_t attrs_per_class = 3;
  std::size_t prompt_len = 4;
  std::size_t source_per_class = 100;
  std::size_t heldout_per_class = 25;
  std::size_t teacher_source_per_class = 200;
  std::size_t teacher_shift_per_class = 50;
  std::size_t target_samples = 2000;
  double shift = 0.6;
  double max_angle = 1.5707963267948966;
  std::size_t rotation_dims = 16;
  double bias = 1.0;
  double source_noise = 0.6;
  double target_noise = 0.3;
  bool complementary = false;
  std::size_t gallery_size = 1000;
  std::size_t caption_samples = 200;
  std::uint64_t seed = 0;
};

nlohmann::json to_json(const BenchSpec& s);
BenchSpec bench_spec_from_json(const nlohmann::json& j);

struct Split {
  Tensor2 images;
  std::vector<std::size_t> labels;
  std::size_t size() const { return labels.size(); }
};

struct ShiftBenchmark {
  BenchSpec spec;
  Tensor2 attribute_tokens;  // A×d_tok
  Tensor2 attribute_dirs;    // A×d_in
  std::vector<std::vector<std::size_t>> class_attrs;          // sorted
  std::vector<std::vector<std::size_t>> teacher_class_attrs;  // what the teacher's texts contain
  Tensor2 prototypes;  // C×d_in
  Tensor2 prompt;      // L_p×d_tok
  Tensor2 rotation;    // d_in×d_in
  Tensor2 bias;        // 1×d_in, already scaled by shift
  Split source;
  Split heldout;
  Split teacher_source;
  Split teacher_shift;
  Split target;
  std::vector<std::vector<std::size_t>> gallery_attrs;
  Tensor2 gallery_images;  // shifted
  Tensor2 gallery_texts;   // token rows
  std::vector<std::size_t> caption_indices;  // into target

  std::size_t vocab_size() const { return spec.attributes + 2; }
  /// Σ e_a / √n over the distinct attributes (zero row for an empty set).
  std::vector<double> bag_row(std::span<const std::size_t> attrs) const;
  Tensor2 class_rows(bool teacher) const;
  /// Attribute ids named by a caption's body.
  std::vector<std::size_t> caption_attributes(std::span<const Token> tokens) const;
  /// BOS, attributes ascending, EOS.
  TokenSeq reference_caption(std::size_t class_id) const;
  /// Contrastive data for pretraining (teacher adds its shifted slice).
  ContrastiveData pretrain_data(bool teacher) const;
};

inline Token attribute_token(std::size_t attr) { return attr + 2; }

/// Throws Error when the attribute table cannot give every class a distinct
/// attribute set, or for C < 2 / d_in < 4.
ShiftBenchmark gen_benchmark(const BenchSpec& spec, std::uint64_t seed);

void save_benchmark(const std::filesystem::path& stem, const ShiftBenchmark& b);
ShiftBenchmark load_benchmark(const std::filesystem::path& stem);

/// Σ_b (|B_b|/N)·|acc(B_b) − conf(B_b)| over equal-width bins; bin b holds
/// conf in [b/B, (b+1)/B), with conf = 1 in the last bin.
double ece(std::span<const double> confidences, std::span<const bool> correct, std::size_t bins = 10);
/// Fraction of queries whose truth is within the first k entries of its ranking.
double recall_at_k(std::span<const std::vector<std::size_t>> rankings, std::span<const std::size_t> truths,
                   std::size_t k);
/// F1 between the set of predicted and reference attribute tokens. Two empty
/// sets score 1.
double caption_attribute_f1(std::span<const Token> caption_tokens, std::span<const Token> reference);

struct MetricsReport {
  std::size_t samples = 0;
  std::optional<double> top1;
  std::optional<double> top5;
  std::optional<double> recall1;
  std::optional<double> recall5;
  std::optional<double> recall10;
  std::optional<double> ece;
  std::optional<double> mean_reward;
  std::optional<double> mean_reward_gain;
  std::optional<double> caption_f1;
  double mean_wall_ms = 0.0;
};

}  // namespace rlcf
