#include "city2scene/features.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <map>
#include <mutex>
#include <numbers>

#include <fftw3.h>

#include "city2scene/error.hpp"
#include "city2scene/hash.hpp"

namespace city2scene {

int SpectrogramConfig::fft_size() const {
  int n = 1;
  while (n < window_samples()) n <<= 1;
  return n;
}

void SpectrogramConfig::validate() const {
  std::vector<std::string> bad;
  if (sample_rate_hz <= 0) bad.emplace_back("sample_rate_hz must be positive");
  if (!(window_ms > 0.0)) bad.emplace_back("window_ms must be positive");
  if (!(hop_ms > 0.0) || hop_ms > window_ms) bad.emplace_back("hop_ms must be in (0, window_ms]");
  if (sample_rate_hz > 0 && hop_ms > 0.0 && hop_samples() < 1) bad.emplace_back("hop is shorter than one sample");
  if (n_mels < 1) bad.emplace_back("n_mels must be >= 1");
  if (fmin_hz < 0.0) bad.emplace_back("fmin_hz must be >= 0");
  if (fmax_hz > sample_rate_hz / 2.0) bad.emplace_back("fmax_hz must be <= sample_rate_hz / 2");
  if (effective_fmax_hz() <= fmin_hz) bad.emplace_back("fmax_hz must exceed fmin_hz");
  if (!(log_offset > 0.0)) bad.emplace_back("log_offset must be positive");
  if (!bad.empty()) {
    std::string msg = "invalid spectrogram config:";
    for (const auto& b : bad) msg += " " + b + ";";
    throw ConfigError(msg);
  }
}

void to_json(nlohmann::json& j, const SpectrogramConfig& c) {
  j = nlohmann::json{{"sample_rate_hz", c.sample_rate_hz}, {"window_ms", c.window_ms}, {"hop_ms", c.hop_ms},
                     {"n_mels", c.n_mels},                 {"fmin_hz", c.fmin_hz},     {"fmax_hz", c.fmax_hz},
                     {"log_offset", c.log_offset}};
}

void from_json(const nlohmann::json& j, SpectrogramConfig& c) {
  SpectrogramConfig d;
  c.sample_rate_hz = j.value("sample_rate_hz", d.sample_rate_hz);
  c.window_ms = j.value("window_ms", d.window_ms);
  c.hop_ms = j.value("hop_ms", d.hop_ms);
  c.n_mels = j.value("n_mels", d.n_mels);
  c.fmin_hz = j.value("fmin_hz", d.fmin_hz);
  c.fmax_hz = j.value("fmax_hz", d.fmax_hz);
  c.log_offset = j.value("log_offset", d.log_offset);
}

std::string SpectrogramConfig::hash() const {
  Fnv1a h;
  h.update(nlohmann::json(*this).dump());
  return h.hex();
}

SpectrogramConfig spectrogram_preset(const std::string& backbone) {
  SpectrogramConfig c;
  if (backbone == "cp_resnet") {
    c.sample_rate_hz = 32000, c.window_ms = 96, c.hop_ms = 23, c.n_mels = 256;
  } else if (backbone == "bc_resnet") {
    c.sample_rate_hz = 32000, c.window_ms = 96, c.hop_ms = 16, c.n_mels = 256;
  } else if (backbone == "tf_sepnet") {
    c.sample_rate_hz = 32000, c.window_ms = 96, c.hop_ms = 16, c.n_mels = 512;
  } else if (backbone == "passt") {
    c.sample_rate_hz = 32000, c.window_ms = 25, c.hop_ms = 10, c.n_mels = 128;
  } else if (backbone == "beats") {
    c.sample_rate_hz = 16000, c.window_ms = 25, c.hop_ms = 10, c.n_mels = 128;
  } else if (backbone == "desk") {
    c.sample_rate_hz = 16000, c.window_ms = 64, c.hop_ms = 32, c.n_mels = 32;
  } else {
    throw ConfigError("unknown preprocessing preset '" + backbone + "'");
  }
  return c;
}

Waveform load_audio(const std::filesystem::path& path, int target_sample_rate_hz) {
  Waveform wave = read_wav(path);
  if (wave.sample_rate_hz == target_sample_rate_hz) return wave;
  return resample(wave, target_sample_rate_hz);
}

Waveform resample(const Waveform& in, int target_sample_rate_hz) {
  if (target_sample_rate_hz <= 0) throw ConfigError("target sample rate must be positive");
  if (in.sample_rate_hz == target_sample_rate_hz) return in;

  const double ratio = static_cast<double>(target_sample_rate_hz) / in.sample_rate_hz;
  const double cutoff = 0.95 * std::min(1.0, ratio);
  constexpr double kZeroCrossings = 16.0;
  const double half_width = kZeroCrossings / cutoff;

  const std::size_t n_in = in.samples.size();
  const std::size_t n_out = static_cast<std::size_t>(
      (static_cast<unsigned long long>(n_in) * target_sample_rate_hz + in.sample_rate_hz - 1) / in.sample_rate_hz);

  Waveform out;
  out.sample_rate_hz = target_sample_rate_hz;
  out.samples.resize(n_out);
  const double pi = std::numbers::pi;
  for (std::size_t n = 0; n < n_out; ++n) {
    const double t = static_cast<double>(n) / ratio;
    const auto lo = static_cast<long long>(std::ceil(t - half_width));
    const auto hi = static_cast<long long>(std::floor(t + half_width));
    double acc = 0.0;
    for (long long k = std::max(0LL, lo); k <= std::min<long long>(hi, static_cast<long long>(n_in) - 1); ++k) {
      const double x = t - static_cast<double>(k);
      const double arg = pi * cutoff * x;
      const double sinc = std::abs(arg) < 1e-12 ? 1.0 : std::sin(arg) / arg;
      const double window = 0.5 + 0.5 * std::cos(pi * x / half_width);
      acc += in.samples[static_cast<std::size_t>(k)] * cutoff * sinc * window;
    }
    out.samples[n] = static_cast<float>(acc);
  }
  return out;
}

std::vector<double> mel_filterbank(const SpectrogramConfig& cfg) {
  const int n_fft = cfg.fft_size();
  const int n_bins = n_fft / 2 + 1;
  const double mel_lo = hz_to_mel(cfg.fmin_hz);
  const double mel_hi = hz_to_mel(cfg.effective_fmax_hz());
  std::vector<double> edges(static_cast<std::size_t>(cfg.n_mels) + 2);
  for (std::size_t i = 0; i < edges.size(); ++i) {
    edges[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * static_cast<double>(i) / (cfg.n_mels + 1));
  }
  std::vector<double> fb(static_cast<std::size_t>(cfg.n_mels) * n_bins, 0.0);
  for (int m = 0; m < cfg.n_mels; ++m) {
    const double left = edges[m], centre = edges[m + 1], right = edges[m + 2];
    for (int b = 0; b < n_bins; ++b) {
      const double f = static_cast<double>(b) * cfg.sample_rate_hz / n_fft;
      const double up = (f - left) / (centre - left);
      const double down = (right - f) / (right - centre);
      fb[static_cast<std::size_t>(m) * n_bins + b] = std::max(0.0, std::min(up, down));
    }
  }
  return fb;
}

namespace {

/// FFTW planning is not thread-safe; execution on fresh buffers is.
fftw_plan r2c_plan(int n) {
  static std::mutex mu;
  static std::map<int, fftw_plan> plans;
  std::lock_guard lock(mu);
  auto it = plans.find(n);
  if (it != plans.end()) return it->second;
  std::vector<double> in(static_cast<std::size_t>(n));
  std::vector<fftw_complex> out(static_cast<std::size_t>(n / 2 + 1));
  fftw_plan plan = fftw_plan_dft_r2c_1d(n, in.data(), out.data(), FFTW_ESTIMATE | FFTW_UNALIGNED);
  plans.emplace(n, plan);
  return plan;
}

}  // namespace

Spectrogram mel_spectrogram(std::span<const float> waveform, const SpectrogramConfig& cfg, std::string clip_id) {
  cfg.validate();
  const int win = cfg.window_samples();
  const int hop = cfg.hop_samples();
  const int n_fft = cfg.fft_size();
  const int n_bins = n_fft / 2 + 1;
  const std::size_t n = waveform.size();
  if (n < static_cast<std::size_t>(win)) {
    throw ShapeError("waveform of " + std::to_string(n) + " samples is shorter than one window (" +
                     std::to_string(win) + ")");
  }

  const int pad = n_fft / 2;
  std::vector<double> padded(n + 2 * static_cast<std::size_t>(pad));
  for (std::size_t i = 0; i < padded.size(); ++i) {
    long long src = static_cast<long long>(i) - pad;
    if (src < 0) src = -src;
    const auto last = static_cast<long long>(n) - 1;
    if (src > last) src = 2 * last - src;
    padded[i] = waveform[static_cast<std::size_t>(src)];
  }

  // Periodic Hann of the window length, centred inside the FFT frame.
  std::vector<double> window(static_cast<std::size_t>(n_fft), 0.0);
  const int offset = (n_fft - win) / 2;
  for (int i = 0; i < win; ++i) {
    window[static_cast<std::size_t>(offset + i)] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / win);
  }

  const std::vector<double> fb = mel_filterbank(cfg);
  Spectrogram spec;
  spec.config = cfg;
  spec.clip_id = std::move(clip_id);
  spec.n_mels = cfg.n_mels;
  spec.n_frames = cfg.frame_count(n);
  spec.values.assign(static_cast<std::size_t>(spec.n_mels) * spec.n_frames, 0.0f);

  fftw_plan plan = r2c_plan(n_fft);
  std::vector<double> frame(static_cast<std::size_t>(n_fft));
  std::vector<fftw_complex> bins(static_cast<std::size_t>(n_bins));
  std::vector<double> power(static_cast<std::size_t>(n_bins));
  for (int t = 0; t < spec.n_frames; ++t) {
    const double* src = padded.data() + static_cast<std::size_t>(t) * hop;
    for (int i = 0; i < n_fft; ++i) frame[i] = src[i] * window[i];
    fftw_execute_dft_r2c(plan, frame.data(), bins.data());
    for (int b = 0; b < n_bins; ++b) power[b] = bins[b][0] * bins[b][0] + bins[b][1] * bins[b][1];
    for (int m = 0; m < spec.n_mels; ++m) {
      const double* row = fb.data() + static_cast<std::size_t>(m) * n_bins;
      double acc = 0.0;
      for (int b = 0; b < n_bins; ++b) acc += row[b] * power[b];
      spec.values[static_cast<std::size_t>(m) * spec.n_frames + t] =
          static_cast<float>(std::log(acc + cfg.log_offset));
    }
  }
  return spec;
}

FeatureCache::FeatureCache(std::filesystem::path dir) : dir_(std::move(dir)) {
  std::error_code ec;
  std::filesystem::create_directories(dir_, ec);
  if (ec) throw IoError("cannot create feature cache " + dir_.string() + ": " + ec.message());
}

std::filesystem::path FeatureCache::blob_path(const std::string& clip_id, const SpectrogramConfig& cfg) const {
  return dir_ / (clip_id + "." + cfg.hash() + ".bin");
}

namespace {
constexpr char kCacheMagic[8] = {'C', '2', 'S', 'F', 'E', 'A', 'T', '1'};
}

std::optional<Spectrogram> FeatureCache::get(const std::string& clip_id, const SpectrogramConfig& cfg) const {
  const auto path = blob_path(clip_id, cfg);
  std::ifstream in(path, std::ios::binary);
  if (!in) return std::nullopt;
  char magic[8];
  std::int32_t dims[2];
  if (!in.read(magic, 8) || std::memcmp(magic, kCacheMagic, 8) != 0) return std::nullopt;
  if (!in.read(reinterpret_cast<char*>(dims), sizeof dims)) return std::nullopt;
  if (dims[0] != cfg.n_mels || dims[1] <= 0) return std::nullopt;
  Spectrogram spec;
  spec.config = cfg;
  spec.clip_id = clip_id;
  spec.n_mels = dims[0];
  spec.n_frames = dims[1];
  spec.values.resize(static_cast<std::size_t>(dims[0]) * dims[1]);
  if (!in.read(reinterpret_cast<char*>(spec.values.data()),
               static_cast<std::streamsize>(spec.values.size() * sizeof(float)))) {
    return std::nullopt;
  }
  return spec;
}

void FeatureCache::put(const Spectrogram& spec) const {
  const auto path = blob_path(spec.clip_id, spec.config);
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    const std::int32_t dims[2] = {spec.n_mels, spec.n_frames};
    out.write(kCacheMagic, 8);
    out.write(reinterpret_cast<const char*>(dims), sizeof dims);
    out.write(reinterpret_cast<const char*>(spec.values.data()),
              static_cast<std::streamsize>(spec.values.size() * sizeof(float)));
  }
  std::ofstream sidecar(std::filesystem::path(path).replace_extension(".json"), std::ios::trunc);
  sidecar << nlohmann::json{{"clip_id", spec.clip_id}, {"config", spec.config}}.dump(2) << '\n';
}

}  // namespace city2scene
