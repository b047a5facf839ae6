#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "city2scene/augment.hpp"
#include "city2scene/dataset.hpp"
#include "city2scene/eval.hpp"
#include "city2scene/features.hpp"
#include "city2scene/losses.hpp"
#include "city2scene/models.hpp"
#include "city2scene/schedule.hpp"

namespace city2scene {

struct OptimizerSpec {
  /// "adam" (L2 weight decay) or "adamw" (decoupled).
  std::string name = "adam";
  double peak_lr = 0.003;
  double weight_decay = 0.0;
};

/// online: teachers see every augmented batch. cached: teacher logits are
/// computed once on clean inputs and mixed with the mixup coefficients, an
/// approximation that ignores the other augmentations.
enum class TeacherMode { online, cached };

struct DataSpec {
  /// Dataset directory holding meta.csv and evaluation_setup/.
  std::filesystem::path dir;
  /// When > 0, this stratified fraction of train is carved out as validation.
  double val_fraction = 0.0;
  /// Fixed across seeds so every run sees the same validation clips.
  std::uint64_t split_seed = 0;
};

struct StageConfig {
  int stage = 1;
  EncoderSpec encoder;
  SpectrogramConfig preprocessing = spectrogram_preset("desk");
  AugmentConfig augment;
  /// Augmentations apply identically in every stage unless switched off here.
  bool augment_enabled = true;
  OptimizerSpec optimizer;
  SchedulerSpec scheduler{SchedulerKind::cosine_warm_restarts, 0.003};
  int max_epochs = 30;
  int batch_size = 32;
  KDConfig kd;
  TeacherMode teacher_mode = TeacherMode::online;
  std::vector<std::filesystem::path> teacher_checkpoints;
  std::optional<std::filesystem::path> city_checkpoint;
  std::uint64_t seed = 1;
  DataSpec data;
  bool eval_each_epoch = true;
  std::optional<std::filesystem::path> feature_cache_dir;

  /// Throws ConfigError naming every offending field.
  void validate() const;
};

nlohmann::json to_json(const StageConfig& cfg);
/// Strict: unknown keys and type errors are reported together with
/// validation failures.
StageConfig stage_config_from_json(const nlohmann::json& doc);
/// Applies `dotted.key=value`; the value is parsed as JSON when possible,
/// otherwise taken as a string.
void apply_override(nlohmann::json& doc, const std::string& assignment);

struct EpochLog {
  int epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  /// L_city in stage 1, L_scene otherwise.
  double loss_label = 0.0;
  /// L_city2scene; zero without teachers.
  double loss_city2scene = 0.0;
  double train_accuracy = 0.0;
  double val_accuracy = -1.0;
  double test_accuracy = -1.0;
};

struct StageResult {
  Checkpoint checkpoint;
  std::vector<EpochLog> log;
  std::optional<Metrics> test_metrics;
  std::optional<Metrics> val_metrics;
};

/// Loads the dataset named by cfg.data and carves validation if requested.
Manifest load_stage_manifest(const StageConfig& cfg);

StageResult train_stage1(const StageConfig& cfg, const Manifest& manifest, FeatureStore* features = nullptr);

/// Freezes the city encoder and trains a new scene classifier on its embeddings.
StageResult train_stage2(const Checkpoint& city_model, const StageConfig& cfg, const Manifest& manifest,
                         FeatureStore* features = nullptr);

/// Fresh student trained on lambda * L_scene + (1 - lambda) * L_city2scene.
StageResult train_stage3(const StageConfig& cfg, std::span<const Checkpoint> teachers, const Manifest& manifest,
                         FeatureStore* features = nullptr);

/// Scene model without teachers; the reference for stage 3.
StageResult train_baseline(const StageConfig& cfg, const Manifest& manifest, FeatureStore* features = nullptr);

/// Checks every teacher against `scene_vocab` and returns inference-mode models.
std::vector<Model> load_teachers(std::span<const Checkpoint> teachers, const std::vector<std::string>& scene_vocab);

/// Mean of the teachers' city-to-scene logits on `batch`, inference mode.
Logits teacher_logits(std::span<Model> teachers, const Tensor& batch);

/// config.json, checkpoint.c2s, metrics.json, train_log.csv
void write_run_dir(const std::filesystem::path& dir, const StageConfig& cfg, const StageResult& result);

/// Resolves data and checkpoints from `cfg`, trains the stage and writes `dir`.
/// Stage 3 with an empty teacher list and `baseline` set trains the reference model.
StageResult run_stage(const StageConfig& cfg, const std::filesystem::path& dir, bool baseline = false);

}  // namespace city2scene
