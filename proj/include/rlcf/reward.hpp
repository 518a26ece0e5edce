#pragma once

#include <span>
#include <string>
#include <vector>

#include "rlcf/models.hpp"

namespace rlcf {

inline constexpr double kClipScoreWeight = 2.5;

/// A frozen scorer model with its (unnormalized) ensemble weight.
struct RewardModel {
  std::string id;
  DualEncoder model;
  double weight = 1.0;
};

/// w · max(cos, 0).
inline double clip_score_from_cosine(double cos) { return kClipScoreWeight * (cos > 0.0 ? cos : 0.0); }

double clip_score(const RewardModel& rm, std::size_t class_id, std::span<const double> image);
/// Text given as a token row (d_tok) read after the model's prompt.
double clip_score_text(const RewardModel& rm, std::span<const double> token_row,
                       std::span<const double> image);

/// w_i / Σ w. Throws on an empty list or a non-positive weight.
std::vector<double> normalized_weights(std::span<const RewardModel> models);

double ensemble_score(std::span<const RewardModel> models, std::size_t class_id,
                      std::span<const double> image);
double ensemble_score_text(std::span<const RewardModel> models, std::span<const double> token_row,
                           std::span<const double> image);

struct RewardSignal {
  std::vector<double> raw;
  double baseline = 0.0;
  std::vector<double> centered;
};

/// Mean baseline. With a single candidate the baseline would cancel the
/// reward entirely; `k1_passthrough` keeps the raw reward in that case.
RewardSignal center_rewards(std::span<const double> raw, bool k1_passthrough = true);

/// Embeddings of a batch of inputs under every reward model (one tensor per
/// model, rows = inputs).
struct EnsembleEmbeddings {
  std::vector<Tensor2> per_model;
  std::size_t count() const { return per_model.empty() ? 0 : per_model.front().rows(); }
};

/// Ensemble scorer with cached class-text embeddings. Image and free-text
/// embeddings are computed once per episode by the caller and reused across
/// TTA steps.
class RewardScorer {
 public:
  explicit RewardScorer(std::vector<RewardModel> models);

  const std::vector<RewardModel>& models() const { return models_; }
  const std::vector<double>& weights() const { return weights_; }

  EnsembleEmbeddings embed_images(const Tensor2& images) const;
  EnsembleEmbeddings embed_texts(const Tensor2& token_rows) const;
  const EnsembleEmbeddings& class_texts() const { return class_texts_; }

  /// Weighted CLIP-S between text row `t` and image row `i`.
  double score(const EnsembleEmbeddings& texts, std::size_t t, const EnsembleEmbeddings& images,
               std::size_t i) const;
  /// Weighted logits (logit_scale · cos) of image row `i` against all texts.
  std::vector<double> logits(const EnsembleEmbeddings& images, std::size_t i,
                             const EnsembleEmbeddings& texts) const;

 private:
  std::vector<RewardModel> models_;
  std::vector<double> weights_;
  EnsembleEmbeddings class_texts_;
};

}  // namespace rlcf
