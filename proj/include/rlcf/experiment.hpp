#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "rlcf/bench.hpp"
#include "rlcf/captioner.hpp"
#include "rlcf/models.hpp"
#include "rlcf/pipelines.hpp"
#include "rlcf/reward.hpp"

namespace rlcf {

/// Bad or missing configuration (CLI exit code 1).
class ConfigError : public Error {
 public:
  using Error::Error;
};

using KeyValues = std::map<std::string, std::string, std::less<>>;

/// `key = value` lines; `#` starts a comment. Duplicate keys are an error.
KeyValues parse_config_text(std::string_view text, const std::string& origin = "config");
KeyValues read_config_file(const std::filesystem::path& path);
/// Every key build_config understands.
const std::vector<std::string>& config_keys();

enum class ExperimentKind { classify, retrieve, caption };

struct ExperimentConfig {
  std::uint64_t seed = 0;
  ExperimentKind kind = ExperimentKind::classify;
  std::vector<Objective> objectives;
  /// TTA settings; for retrieval `tta.K` is replaced by K_t2i / K_i2t.
  TTAConfig tta;
  std::size_t K_t2i = 12;
  std::size_t K_i2t = 16;
  BenchSpec bench;
  PretrainConfig student;
  PretrainConfig teacher;
  CaptionerConfig captioner;
  /// Unnormalized ensemble weights, one pretrained reward model each.
  std::vector<double> reward_weights{1.0};
  std::size_t samples = 0;  // 0 = every available sample
  std::size_t threads = 1;
  bool build_missing = true;
  bool write_traces = true;
  std::filesystem::path work_dir = "work";
  std::filesystem::path out_dir = "out";
  /// Raw key/values the config was built from (sweep reuses them).
  KeyValues source;
};

/// Applies the task defaults, then every key in `kv`. `seed` is
/// required. Throws ConfigError.
ExperimentConfig build_config(const KeyValues& kv);

/// Chance-level guardrail for pretraining: accuracy must reach 3× chance
/// (capped below 1 for tiny class counts).
bool pretrain_guardrail_ok(double accuracy, std::size_t classes);

struct Assets {
  ShiftBenchmark bench;
  DualEncoder student;
  std::vector<RewardModel> reward_models;
  std::optional<ToyCaptioner> captioner;
};

/// Loads the benchmark and checkpoints from `work_dir`, building (and
/// saving) whatever is missing or stale when `cfg.build_missing` is set.
/// Everything returned has been read back from disk.
Assets prepare_assets(const ExperimentConfig& cfg, std::ostream* log = nullptr, bool need_captioner = false);
/// Writes only the benchmark files.
void write_benchmark(const ExperimentConfig& cfg, std::ostream* log = nullptr);

struct ResultRow {
  std::string task;
  std::string objective;
  MetricsReport metrics;
};

struct TaskRun {
  ResultRow row;
  std::vector<EpisodeTrace> traces;
  std::vector<std::vector<std::size_t>> rankings;  // retrieval only
  std::vector<TokenSeq> captions;                   // caption only
  StreamStats stream;
};

/// Evaluates one task/objective over the configured sample stream.
TaskRun run_task(const Assets& assets, const ExperimentConfig& cfg, Task task, Objective objective);
/// Zero-shot student metrics computed without the TTA pipeline.
MetricsReport direct_eval(const Assets& assets, const ExperimentConfig& cfg);
/// Reward-model ensemble's own classification metrics on the target split.
MetricsReport reward_model_eval(const Assets& assets, const ExperimentConfig& cfg);

struct ExperimentResult {
  std::vector<ResultRow> rows;
  std::filesystem::path results_path;
};

/// Runs every objective on identical streams and writes results.tsv,
/// summary.tsv, timing.json and (optionally) traces/*.jsonl to out_dir.
/// Rows are flushed as they complete.
ExperimentResult run_experiment(const ExperimentConfig& cfg, std::ostream* log = nullptr);

/// Grid over the comma-separated keys sweep_K, sweep_steps, sweep_lr and
/// sweep_objective; writes sweep.tsv.
ExperimentResult run_sweep(const ExperimentConfig& cfg, std::ostream* log = nullptr);

std::string results_header();
std::string format_row(const ResultRow& row);
std::vector<ResultRow> read_results(const std::filesystem::path& tsv);

/// Aggregates run directories into summary.tsv (mean and std over runs of
/// each task/objective) and accuracy/ECE-vs-steps SVG charts.
void write_report(const std::vector<std::filesystem::path>& runs, const std::filesystem::path& out,
                  bool charts = true);

/// Accuracy and ECE after 0..steps TTA steps, read from traces.
struct StepCurve {
  std::string objective;
  std::vector<double> accuracy;
  std::vector<double> ece;
};
StepCurve step_curve(const std::string& objective, const std::vector<EpisodeTrace>& traces);

}  // namespace rlcf
