#pragma once

#include <filesystem>
#include <span>
#include <vector>

namespace city2scene {

struct Waveform {
  std::vector<float> samples;
  int sample_rate_hz = 0;

  double duration_s() const {
    return sample_rate_hz > 0 ? static_cast<double>(samples.size()) / sample_rate_hz : 0.0;
  }
};

struct WavInfo {
  int sample_rate_hz = 0;
  int channels = 0;
  int bits_per_sample = 0;
  bool is_float = false;
  std::size_t frames = 0;
};

/// Reads only the header chunks. Throws IoError on anything that is not a
/// RIFF/WAVE file with PCM (8/16/24/32-bit) or IEEE float samples.
WavInfo read_wav_info(const std::filesystem::path& path);

/// Decodes a mono file to floats in [-1, 1]. Multichannel input is rejected.
Waveform read_wav(const std::filesystem::path& path);

/// Writes 32-bit IEEE float mono.
void write_wav(const std::filesystem::path& path, std::span<const float> samples, int sample_rate_hz);

}  // namespace city2scene
