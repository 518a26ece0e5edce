#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "rlcf/adapt.hpp"
#include "rlcf/captioner.hpp"
#include "rlcf/models.hpp"
#include "rlcf/reward.hpp"
#include "rlcf/rng.hpp"

namespace rlcf {

enum class Task { classify, retrieve_t2i, retrieve_i2t, caption };
enum class Mode { prompt, encoder, projector };
enum class Objective { none, rlcf, entropy_min, pseudo_label, kd };

std::string to_string(Task t);
std::string to_string(Mode m);
std::string to_string(Objective o);
Task parse_task(std::string_view s);
Mode parse_mode(std::string_view s);
Objective parse_objective(std::string_view s);

struct MomentumConfig {
  bool enabled = false;
  double m = 0.9998;
  std::size_t interval = 64;
};

struct TTAConfig {
  Task task = Task::classify;
  Mode mode = Mode::encoder;
  Objective objective = Objective::rlcf;
  std::size_t steps = 3;
  std::size_t K = 3;
  double lr = 1e-5;
  double weight_decay = 5e-4;
  std::size_t n_views = 64;
  double rho = 0.1;
  std::size_t beam_width = 5;
  /// 0 means the captioner's own max_len.
  std::size_t max_len = 0;
  bool k1_passthrough = true;
  double kd_temperature = 1.0;
  MomentumConfig momentum;
  std::uint64_t seed = 0;

  /// Defaults for a task/mode pair. Retrieval K defaults to the t2i/i2t
  /// values used for the smaller gallery; captioning uses K=10.
  static TTAConfig defaults(Task task, Mode mode);
  void validate() const;
  AdamWConfig optimizer() const { return AdamWConfig{.lr = lr, .weight_decay = weight_decay}; }
};

/// Blocks the config is allowed to update.
std::vector<std::string> tunable_blocks(const TTAConfig& cfg);
/// Marks exactly tunable_blocks(cfg) as trainable.
void apply_scope(ParamTree& params, const TTAConfig& cfg);

struct StepTrace {
  std::size_t selected_views = 0;
  std::vector<std::size_t> candidates;
  std::vector<std::string> candidate_text;
  std::vector<double> raw;
  std::vector<double> centered;
  double loss = 0.0;
  /// Prediction on the clean input after this step's update.
  std::size_t prediction = 0;
  double confidence = 0.0;
};

struct EpisodeTrace {
  std::size_t sample = 0;
  std::int64_t truth = -1;  // filled by the harness when known
  std::size_t initial_prediction = 0;
  double initial_confidence = 0.0;
  std::vector<StepTrace> steps;
  std::size_t prediction = 0;
  double confidence = 0.0;
  bool warning = false;
  std::string message;
  double wall_ms = 0.0;
};

nlohmann::json to_json(const EpisodeTrace& t, bool with_timing = true);
EpisodeTrace trace_from_json(const nlohmann::json& j);

/// View 0 is `v` itself; the others zero a random 25% of coordinates and add
/// Gaussian jitter with σ = 0.05·‖v‖/√d.
Tensor2 augment_views(std::span<const double> v, std::size_t n, Rng& rng);

/// Indices of the ⌊rho·n⌋ (at least 1) rows with the lowest softmax entropy,
/// ties to the lower index, returned in ascending entropy order.
std::vector<std::size_t> confidence_select(const Tensor2& view_logits, double rho);
std::vector<std::size_t> confidence_select(const Tensor2& views, const DualEncoder& m, double rho);

struct ClassifyOutcome {
  std::size_t prediction = 0;
  double confidence = 0.0;
  std::vector<std::size_t> top5;
  EpisodeTrace trace;
  ParamTree adapted;  // θ at the end of the last step, filled when momentum is on
};

/// One episode on image `v`. `ep.live` holds the student parameters and is
/// reset to `ep.pristine` before returning.
ClassifyOutcome tta_classify(std::span<const double> v, EpisodeState& ep, double logit_scale,
                             const RewardScorer& scorer, const TTAConfig& cfg,
                             std::uint64_t sample_seed);

/// Frozen side of a retrieval gallery, encoded once.
struct RetrievalGallery {
  Task direction = Task::retrieve_t2i;
  Tensor2 student_feats;
  EnsembleEmbeddings reward_feats;
  std::size_t size() const { return student_feats.rows(); }
};

/// `items` are images for t2i and text token rows for i2t.
RetrievalGallery make_gallery(Task direction, const DualEncoder& student, const RewardScorer& scorer,
                              const Tensor2& items);

struct RetrievalOutcome {
  std::vector<std::size_t> ranking;
  EpisodeTrace trace;
  ParamTree adapted;
};

/// `query` is a text token row for t2i and an image for i2t.
RetrievalOutcome tta_retrieve(std::span<const double> query, const RetrievalGallery& gallery,
                              EpisodeState& ep, double logit_scale, const RewardScorer& scorer,
                              const TTAConfig& cfg);

/// Maps a caption to the token row the reward models read.
using CaptionTextFn = std::function<std::vector<double>(std::span<const Token>)>;

struct CaptionOutcome {
  TokenSeq caption;
  double logprob = 0.0;
  double reward = 0.0;
  /// Reward of the zero-shot (steps = 0) caption.
  double initial_reward = 0.0;
  TokenSeq initial_caption;
  bool finished = true;
  EpisodeTrace trace;
  ParamTree adapted;
};

/// `image` is the raw image the reward models see; `image_embed` is what the
/// captioner conditions on.
CaptionOutcome tta_caption(std::span<const double> image, std::span<const double> image_embed,
                           EpisodeState& ep, const ToyCaptioner& captioner,
                           const RewardScorer& scorer, const CaptionTextFn& text_of,
                           const TTAConfig& cfg);

/// Runs one episode per stream position. `adapted` is non-null only when the
/// momentum buffer is enabled; the episode must store θ̄ there.
using EpisodeFn = std::function<void(EpisodeState& ep, std::size_t position, ParamTree* adapted)>;

struct StreamStats {
  std::size_t episodes = 0;
  std::size_t commits = 0;
  std::vector<std::size_t> commit_positions;
};

/// With momentum off, episodes are independent and may be spread over
/// `threads` workers; with momentum on they run in order on one thread.
StreamStats run_stream(const ParamTree& pristine, const TTAConfig& cfg, std::size_t n,
                       const EpisodeFn& fn, std::size_t threads = 1);

}  // namespace rlcf
