#pragma once
// Two-stage training orchestration, dataset generation, evaluation, and
// the ablation harness.

#include <filesystem>
#include <optional>

#include "pointseg/checkpoint.hpp"
#include "pointseg/config.hpp"
#include "pointseg/metrics.hpp"
#include "pointseg/phantom.hpp"
#include "pointseg/segmenter.hpp"
#include "pointseg/tracker.hpp"

namespace pointseg::train {

// ------------------------------------------------------------ datasets

// Samples per-clip phantom specs from the config ranges and writes the
// dataset directory (clips + splits.json + dataset.json).
nlohmann::json generate_dataset(const nlohmann::json& cfg,
                                const std::filesystem::path& out_dir,
                                std::int64_t count_override = 0);

std::vector<data::ClipRecord> load_clips(const std::filesystem::path& dataset_dir,
                                         const std::vector<std::string>& ids);

// ------------------------------------------------------------ models

// Tracker and segmenter share one store under the "tracker." /
// "segmenter." prefixes; stage 2 freezes the former.
struct ModelBundle {
  nn::ParamStore store;
  std::unique_ptr<tracker::Tracker> trk;
  std::unique_ptr<segmenter::Segmenter> seg;

  explicit ModelBundle(std::uint64_t init_seed) : store(init_seed) {}
};

std::unique_ptr<ModelBundle> build_tracker_model(const nlohmann::json& cfg);
// tracker architecture comes from `tracker_cfg` (a checkpoint's config
// echo), the segmenter side from `cfg`.
std::unique_ptr<ModelBundle> build_seg_model(const nlohmann::json& cfg,
                                             const nlohmann::json& tracker_cfg);

// ------------------------------------------------------------ training

struct TrainOutcome {
  std::filesystem::path best_checkpoint;
  std::filesystem::path last_checkpoint;
  std::filesystem::path log_path;
  double best_metric = 0.0;
  int epochs_run = 0;
  std::uint64_t frozen_hash_before = 0;  // stage 2 only
  std::uint64_t frozen_hash_after = 0;
};

TrainOutcome train_tracker(const std::filesystem::path& dataset_dir,
                           const nlohmann::json& cfg,
                           const std::filesystem::path& out_dir);

TrainOutcome train_segmenter(const std::filesystem::path& dataset_dir,
                             const std::filesystem::path& tracker_checkpoint,
                             const nlohmann::json& cfg,
                             const std::filesystem::path& out_dir);

// ------------------------------------------------------------ evaluation

struct TrackEval {
  metrics::TapResult mean;  // means of per-clip metrics
  std::vector<metrics::TapResult> per_clip;
  std::vector<std::string> clip_ids;
};

TrackEval evaluate_tracker(const ModelBundle& model,
                           const std::vector<data::ClipRecord>& clips,
                           const std::vector<double>& thresholds = {1, 2, 4, 8, 16});

struct SegEval {
  std::vector<metrics::ClipMetrics> per_clip;
  metrics::Aggregate mdice, hd95, stability;  // over all clips
};

// Runs the frozen tracker + segmenter pipeline on each clip.
SegEval evaluate_segmenter(const ModelBundle& model,
                           const std::vector<data::ClipRecord>& clips);

// Full report (JSON + Table-1-style text) for a checkpoint of either
// stage; optional compare report adds the paired t-test column.
struct EvalReport {
  nlohmann::json report;
  std::string table;
};
EvalReport evaluate_checkpoint(const std::filesystem::path& checkpoint,
                               const std::filesystem::path& dataset_dir,
                               const std::string& split,
                               const std::filesystem::path& compare_report = {});

// Evaluates stored predictions (clip records with masks) against the
// dataset's ground truth, matched by clip id.
EvalReport evaluate_predictions(const std::filesystem::path& predictions_dir,
                                const std::filesystem::path& dataset_dir,
                                const std::string& split,
                                const std::filesystem::path& compare_report = {});

// ------------------------------------------------------------ ablation

// Trains/evaluates the five fusion toggle patterns and emits a
// Table-4-style table (mDice, HD95, p-value vs the full configuration).
struct AblationResult {
  nlohmann::json table;
  std::string text;
};
AblationResult run_ablation(const std::filesystem::path& dataset_dir,
                            const std::filesystem::path& tracker_checkpoint,
                            const nlohmann::json& cfg,
                            const std::filesystem::path& out_dir);

// ------------------------------------------------------------ inference

// Writes predicted masks + tracks in the clip format, plus per-frame
// overlay PNGs, for a segmenter checkpoint.
void infer_clip(const std::filesystem::path& checkpoint,
                const std::filesystem::path& clip_dir,
                const std::filesystem::path& out_dir);

}  // namespace pointseg::train
