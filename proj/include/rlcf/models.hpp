#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "rlcf/autodiff.hpp"
#include "rlcf/checkpoint.hpp"
#include "rlcf/param_tree.hpp"
#include "rlcf/rng.hpp"

namespace rlcf {

namespace block {
inline constexpr std::string_view kImageProj = "image_proj";
inline constexpr std::string_view kTextProj = "text_proj";
inline constexpr std::string_view kPrompt = "prompt";
inline constexpr std::string_view kClassTable = "class_table";
}  // namespace block

/// Toy contrastive dual encoder.
///
/// Image branch: g(v) = normalize(v · image_proj).
/// Text branch: a text is a token row t (d_tok) read after the learnable
/// prompt tokens; h(t) = normalize(tanh(Σ prompt_rows + t) · text_proj).
/// Class texts use the rows of the frozen class table.
struct DualEncoder {
  ParamTree params;
  double logit_scale = 100.0;

  static DualEncoder create(std::size_t d_in, std::size_t d_emb, Tensor2 prompt,
                            Tensor2 class_table, Rng& rng, double logit_scale = 100.0);

  std::size_t d_in() const { return params.get(block::kImageProj).rows(); }
  std::size_t d_emb() const { return params.get(block::kImageProj).cols(); }
  std::size_t d_tok() const { return params.get(block::kTextProj).rows(); }
  std::size_t n_classes() const { return params.get(block::kClassTable).rows(); }
  std::size_t prompt_len() const { return params.get(block::kPrompt).rows(); }
};

// Graph builders over bound parameters (see ad::bind).

/// N×d_emb unit image embeddings of the rows of `images`.
ad::Var image_features(ad::Tape& tape, const ad::Bindings& b, const Tensor2& images);
/// One unit text embedding per row of `token_rows` (n×d_tok).
ad::Var text_features(const ad::Bindings& b, ad::Var token_rows);
/// C×d_emb unit embeddings of every class text.
ad::Var class_text_features(const ad::Bindings& b);
/// logit_scale · image_featsᵀ-cosines: (N×d)·(M×d)ᵀ.
ad::Var similarity_logits(ad::Var image_feats, ad::Var text_feats, double logit_scale);

// Inference helpers.

std::vector<double> encode_image(const DualEncoder& m, std::span<const double> v);
Tensor2 encode_images(const DualEncoder& m, const Tensor2& images);
/// Throws Error when class_id is out of range.
std::vector<double> encode_class_text(const DualEncoder& m, std::size_t class_id);
Tensor2 encode_class_texts(const DualEncoder& m);
Tensor2 encode_text_rows(const DualEncoder& m, const Tensor2& token_rows);
std::vector<double> class_logits(const DualEncoder& m, std::span<const double> v,
                                 std::span<const std::size_t> class_set);
/// N×C logits for every image against every class.
Tensor2 all_class_logits(const DualEncoder& m, const Tensor2& images);

/// Indices of the k largest scores, descending; ties go to the lower index.
std::vector<std::size_t> top_k(std::span<const double> scores, std::size_t k);

struct PretrainConfig {
  std::size_t d_in = 32;
  std::size_t d_tok = 16;
  std::size_t d_emb = 16;
  std::size_t classes = 20;
  std::size_t pairs_per_class = 100;
  std::size_t epochs = 30;
  double lr = 0.01;
  double temperature = 0.05;
  double logit_scale = 100.0;
  std::uint64_t seed = 0;
};

/// Image/label pairs plus the text side shared by every pair of a class.
struct ContrastiveData {
  Tensor2 images;
  std::vector<std::size_t> labels;
  Tensor2 class_tokens;
  Tensor2 prompt;
};

struct PretrainLog {
  std::vector<double> epoch_loss;
};

/// Symmetric InfoNCE over batches holding one pair per class (so every
/// in-batch negative has a different class). Trains image_proj and
/// text_proj; prompt and class table stay fixed. The result is rounded to
/// f32 precision so it equals its checkpoint.
DualEncoder pretrain_contrastive(const PretrainConfig& cfg, const ContrastiveData& data,
                                 PretrainLog* log = nullptr);

double zero_shot_accuracy(const DualEncoder& m, const Tensor2& images,
                          std::span<const std::size_t> labels);

Checkpoint to_checkpoint(const DualEncoder& m);
DualEncoder dual_encoder_from_checkpoint(const Checkpoint& ckpt);

}  // namespace rlcf
