#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "city2scene/wav.hpp"

namespace city2scene {

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

struct SpectrogramConfig {
  int sample_rate_hz = 32000;
  double window_ms = 96.0;
  double hop_ms = 16.0;
  int n_mels = 256;
  double fmin_hz = 0.0;
  /// <= 0 means Nyquist.
  double fmax_hz = 0.0;
  double log_offset = 1e-5;

  int window_samples() const { return static_cast<int>(std::lround(window_ms * sample_rate_hz / 1000.0)); }
  int hop_samples() const { return static_cast<int>(std::lround(hop_ms * sample_rate_hz / 1000.0)); }
  /// Next power of two >= window length.
  int fft_size() const;
  double effective_fmax_hz() const { return fmax_hz > 0.0 ? fmax_hz : sample_rate_hz / 2.0; }
  /// Frames produced for `n_samples` input samples with centre padding.
  int frame_count(std::size_t n_samples) const {
    return static_cast<int>(n_samples / static_cast<std::size_t>(hop_samples())) + 1;
  }

  void validate() const;
  /// FNV-1a over the canonical JSON form; keys the feature cache.
  std::string hash() const;

  bool operator==(const SpectrogramConfig&) const = default;
};

void to_json(nlohmann::json& j, const SpectrogramConfig& c);
void from_json(const nlohmann::json& j, SpectrogramConfig& c);

/// Preprocessing settings per backbone, plus a small
/// "desk" configuration used for CPU-scale synthetic runs.
SpectrogramConfig spectrogram_preset(const std::string& backbone);

struct Spectrogram {
  /// Row-major n_mels x n_frames.
  std::vector<float> values;
  int n_mels = 0;
  int n_frames = 0;
  SpectrogramConfig config;
  std::string clip_id;

  float at(int mel, int frame) const { return values[static_cast<std::size_t>(mel) * n_frames + frame]; }
};

/// Decodes a mono WAV and resamples to `target_sample_rate_hz`.
Waveform load_audio(const std::filesystem::path& path, int target_sample_rate_hz);

/// Windowed-sinc resampler. Output length is ceil(N * target / source).
Waveform resample(const Waveform& in, int target_sample_rate_hz);

/// Triangular HTK-mel filterbank, n_mels x (fft_size/2 + 1), row-major.
std::vector<double> mel_filterbank(const SpectrogramConfig& cfg);

/// Hann-windowed STFT with reflect centre padding, power spectrum, mel
/// projection, then log(value + log_offset).
Spectrogram mel_spectrogram(std::span<const float> waveform, const SpectrogramConfig& cfg,
                            std::string clip_id = {});

/// Disk cache of spectrograms keyed by (clip_id, config hash). Each entry is a
/// binary blob plus a JSON sidecar holding the config.
class FeatureCache {
 public:
  explicit FeatureCache(std::filesystem::path dir);

  std::optional<Spectrogram> get(const std::string& clip_id, const SpectrogramConfig& cfg) const;
  void put(const Spectrogram& spec) const;

 private:
  std::filesystem::path blob_path(const std::string& clip_id, const SpectrogramConfig& cfg) const;

  std::filesystem::path dir_;
};

}  // namespace city2scene
