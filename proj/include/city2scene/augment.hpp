#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "city2scene/rng.hpp"
#include "city2scene/tensor.hpp"

namespace city2scene {

struct SoftLabel {
  std::vector<double> distribution;

  static SoftLabel one_hot(std::size_t index, std::size_t k);
  bool valid(double tol = 1e-6) const;
};

/// Spectrogram batch (n, 1, F, T) with one target distribution per item.
struct Batch {
  Tensor x;
  std::vector<SoftLabel> labels;
};

using ImpulseResponse = std::vector<float>;

struct AugmentConfig {
  double mixup_alpha = 0.0;
  double specaug_ratio = 0.0;
  double specaug_prob = 0.0;
  double fms_alpha = 0.4;
  double fms_prob = 0.0;
  double diraug_prob = 0.0;
  /// Directory of mono WAV impulse responses, loaded at setup.
  std::optional<std::filesystem::path> ir_bank_dir;
  std::vector<ImpulseResponse> ir_bank;
  std::uint64_t seed = 0;

  /// Throws ConfigError on out-of-range values, or when DirAug is enabled
  /// without any impulse responses.
  void validate() const;
  bool any_enabled() const;
};

void to_json(nlohmann::json& j, const AugmentConfig& c);
void from_json(const nlohmann::json& j, AugmentConfig& c);

/// Augmentation settings per backbone; "desk" and "none" disable everything.
AugmentConfig augment_preset(const std::string& backbone);

/// Loads every *.wav under `dir` (sorted by filename), resampled to `sample_rate_hz`.
std::vector<ImpulseResponse> load_ir_bank(const std::filesystem::path& dir, int sample_rate_hz);

/// Mixes item i with perm[i]: x' = g x_i + (1-g) x_j, same for labels.
Batch mixup_with(const Batch& batch, std::span<const std::size_t> perm, std::span<const double> gammas);

/// Draws one shared permutation and a Beta(alpha, alpha) coefficient per item.
/// alpha <= 0 or batch size < 2 returns the input unchanged.
Batch mixup(const Batch& batch, double alpha, Rng& rng, std::vector<std::string>* warnings = nullptr);

/// Item-wise with probability p: zero one frequency stripe and one time stripe,
/// each of width uniform in [0, floor(r * dim)].
Batch spec_augment(const Batch& batch, double r, double p, Rng& rng);

/// Normalises each item's per-frequency statistics (over time) and
/// re-applies statistics mixed with its partner perm[i].
Batch freq_mixstyle_with(const Batch& batch, std::span<const std::size_t> perm, std::span<const double> gammas);

/// Applied to the whole batch with probability p.
Batch freq_mixstyle(const Batch& batch, double alpha, double p, Rng& rng);

/// Same-length linear convolution with `ir`, rescaled to the input's peak.
std::vector<float> convolve_renormalized(std::span<const float> x, std::span<const float> ir);

/// Item-wise with probability p, convolve with a random impulse response.
std::vector<std::vector<float>> dir_aug(const std::vector<std::vector<float>>& waveforms, double p,
                                        std::span<const ImpulseResponse> ir_bank, Rng& rng);

}  // namespace city2scene
