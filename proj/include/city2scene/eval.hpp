#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "city2scene/dataset.hpp"
#include "city2scene/features.hpp"
#include "city2scene/models.hpp"

namespace city2scene {

struct Metrics {
  std::vector<std::string> labels;
  /// Clip-level (micro) accuracy: trace(confusion) / n_eval.
  double overall_accuracy = 0.0;
  /// Unweighted mean of per-class accuracies over non-empty classes.
  double class_mean_accuracy = 0.0;
  std::map<std::string, double> per_class_accuracy;
  std::map<std::string, double> per_city_accuracy;
  /// confusion[true][predicted]
  std::vector<std::vector<long>> confusion;
  std::size_t n_eval = 0;
};

nlohmann::json to_json(const Metrics& m);
Metrics metrics_from_json(const nlohmann::json& j);

/// Builds Metrics from parallel arrays of true and predicted label indices.
Metrics compute_metrics(std::span<const std::size_t> truth, std::span<const std::size_t> predicted,
                        std::span<const std::string> item_cities, const std::vector<std::string>& labels);

/// In-memory spectrograms for one preprocessing config, filled lazily from
/// audio (and an optional disk cache).
class FeatureStore {
 public:
  explicit FeatureStore(SpectrogramConfig cfg, std::optional<std::filesystem::path> cache_dir = std::nullopt);

  const Spectrogram& get(const ClipRecord& rec);
  const std::vector<float>& waveform(const ClipRecord& rec);
  const SpectrogramConfig& config() const { return cfg_; }

 private:
  SpectrogramConfig cfg_;
  std::optional<FeatureCache> cache_;
  std::map<std::string, Spectrogram> features_;
  std::map<std::string, std::vector<float>> waveforms_;
};

/// Stacks spectrograms into (n, 1, F, T), cropping to the shortest T.
Tensor stack_spectrograms(std::span<const Spectrogram* const> specs);

/// Inference-mode predictions (argmax of logits) on `split`.
Metrics evaluate(Model& model, LabelKind kind, const Manifest& manifest, Split split, FeatureStore& features,
                 int batch_size = 64);

/// Throws when the checkpoint's vocabulary differs from the manifest's, or
/// the split is empty.
Metrics evaluate(const Checkpoint& ckpt, const Manifest& manifest, Split split, FeatureStore* features = nullptr);

struct ClasswiseRow {
  std::string label;
  double baseline_pct = 0.0;
  double treated_pct = 0.0;
  double diff_pct = 0.0;
};

struct ClasswiseReport {
  std::vector<ClasswiseRow> rows;
  /// Overall (clip-level) accuracies.
  ClasswiseRow average;
  /// Unweighted class means.
  ClasswiseRow class_mean;

  std::string render_text() const;
  std::string render_csv() const;
};

/// Rounds a percentage to one decimal, half away from zero.
double round_pct(double pct);

ClasswiseReport classwise_report(const Metrics& baseline, const Metrics& treated);

/// One row per manifest record: clip_id, city_label, scene_label, e0..e{D-1}.
void export_embeddings(const Checkpoint& ckpt, const Manifest& manifest, const std::filesystem::path& out_path,
                       FeatureStore* features = nullptr);

}  // namespace city2scene
