#include "rlcf/reward.hpp"

#include <numeric>

namespace rlcf {

double clip_score(const RewardModel& rm, std::size_t class_id, std::span<const double> image) {
  return clip_score_from_cosine(dot(encode_class_text(rm.model, class_id), encode_image(rm.model, image)));
}

double clip_score_text(const RewardModel& rm, std::span<const double> token_row,
                       std::span<const double> image) {
  const Tensor2 text = encode_text_rows(rm.model, Tensor2::row_vector(token_row));
  return clip_score_from_cosine(dot(text.row(0), encode_image(rm.model, image)));
}

std::vector<double> normalized_weights(std::span<const RewardModel> models) {
  if (models.empty()) throw Error("reward ensemble needs at least one model");
  double total = 0.0;
  for (const auto& m : models) {
    if (!(m.weight > 0.0)) throw Error("reward model '" + m.id + "' has non-positive weight");
    total += m.weight;
  }
  std::vector<double> w;
  w.reserve(models.size());
  for (const auto& m : models) w.push_back(m.weight / total);
  return w;
}

double ensemble_score(std::span<const RewardModel> models, std::size_t class_id,
                      std::span<const double> image) {
  const std::vector<double> w = normalized_weights(models);
  double s = 0.0;
  for (std::size_t i = 0; i < models.size(); ++i) s += w[i] * clip_score(models[i], class_id, image);
  return s;
}

double ensemble_score_text(std::span<const RewardModel> models, std::span<const double> token_row,
                           std::span<const double> image) {
  const std::vector<double> w = normalized_weights(models);
  double s = 0.0;
  for (std::size_t i = 0; i < models.size(); ++i) s += w[i] * clip_score_text(models[i], token_row, image);
  return s;
}

RewardSignal center_rewards(std::span<const double> raw, bool k1_passthrough) {
  if (raw.empty()) throw Error("center_rewards: no rewards");
  RewardSignal sig;
  sig.raw.assign(raw.begin(), raw.end());
  if (raw.size() == 1 && k1_passthrough) {
    sig.baseline = 0.0;
    sig.centered = sig.raw;
    return sig;
  }
  sig.baseline = std::accumulate(raw.begin(), raw.end(), 0.0) / static_cast<double>(raw.size());
  sig.centered.reserve(raw.size());
  for (double r : raw) sig.centered.push_back(r - sig.baseline);
  return sig;
}

RewardScorer::RewardScorer(std::vector<RewardModel> models)
    : models_(std::move(models)), weights_(normalized_weights(models_)) {
  for (const auto& m : models_) class_texts_.per_model.push_back(encode_class_texts(m.model));
}

EnsembleEmbeddings RewardScorer::embed_images(const Tensor2& images) const {
  EnsembleEmbeddings out;
  for (const auto& m : models_) out.per_model.push_back(encode_images(m.model, images));
  return out;
}

EnsembleEmbeddings RewardScorer::embed_texts(const Tensor2& token_rows) const {
  EnsembleEmbeddings out;
  for (const auto& m : models_) out.per_model.push_back(encode_text_rows(m.model, token_rows));
  return out;
}

double RewardScorer::score(const EnsembleEmbeddings& texts, std::size_t t,
                           const EnsembleEmbeddings& images, std::size_t i) const {
  double s = 0.0;
  for (std::size_t m = 0; m < models_.size(); ++m) {
    s += weights_[m] * clip_score_from_cosine(dot(texts.per_model[m].row(t), images.per_model[m].row(i)));
  }
  return s;
}

std::vector<double> RewardScorer::logits(const EnsembleEmbeddings& images, std::size_t i,
                                         const EnsembleEmbeddings& texts) const {
  std::vector<double> out(texts.count(), 0.0);
  for (std::size_t m = 0; m < models_.size(); ++m) {
    const double scale = weights_[m] * models_[m].model.logit_scale;
    for (std::size_t t = 0; t < out.size(); ++t) {
      out[t] += scale * dot(texts.per_model[m].row(t), images.per_model[m].row(i));
    }
  }
  return out;
}

}  // namespace rlcf
