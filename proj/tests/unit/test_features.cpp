#include <doctest.h>

#include <cmath>
#include <complex>
#include <numbers>
#include <random>

#include "city2scene/error.hpp"
#include "city2scene/features.hpp"
#include "city2scene/wav.hpp"
#include "support.hpp"

using namespace city2scene;
using c2s_test::TempDir;

namespace {

std::vector<float> tone(double hz, int rate, std::size_t n, double amp = 0.5) {
  std::vector<float> x(n);
  for (std::size_t i = 0; i < n; ++i) x[i] = static_cast<float>(amp * std::sin(2.0 * std::numbers::pi * hz * i / rate));
  return x;
}

/// Frequency of the largest DFT magnitude, by direct summation.
double dft_peak_hz(const std::vector<float>& x, int rate, double lo, double hi, double step) {
  double best_f = 0.0, best = -1.0;
  for (double f = lo; f <= hi; f += step) {
    std::complex<double> acc = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      acc += static_cast<double>(x[i]) * std::polar(1.0, -2.0 * std::numbers::pi * f * i / rate);
    }
    if (std::abs(acc) > best) best = std::abs(acc), best_f = f;
  }
  return best_f;
}

double band_mean(const Spectrogram& s, int band) {
  double m = 0.0;
  for (int t = 0; t < s.n_frames; ++t) m += s.at(band, t);
  return m / s.n_frames;
}

}  // namespace

TEST_CASE("HTK mel scale") {
  CHECK(hz_to_mel(0.0) == 0.0);
  CHECK(hz_to_mel(700.0) == doctest::Approx(2595.0 * std::log10(2.0)));
  for (double hz : {30.0, 440.0, 1000.0, 7999.0}) CHECK(mel_to_hz(hz_to_mel(hz)) == doctest::Approx(hz).epsilon(1e-12));
}

TEST_CASE("frame counts for the table presets") {
  auto bc = spectrogram_preset("bc_resnet");
  CHECK(bc.sample_rate_hz == 32000);
  CHECK(bc.n_mels == 256);
  const Spectrogram a = mel_spectrogram(std::vector<float>(32000, 0.0f), bc);
  CHECK(a.n_mels == 256);
  CHECK(a.n_frames == 63);

  auto beats = spectrogram_preset("beats");
  CHECK(beats.window_samples() == 400);
  CHECK(beats.hop_samples() == 160);
  CHECK(beats.fft_size() == 512);
  const Spectrogram b = mel_spectrogram(std::vector<float>(16000, 0.0f), beats);
  CHECK(b.n_mels == 128);
  CHECK(b.n_frames == 101);

  auto cp = spectrogram_preset("cp_resnet");
  CHECK(cp.hop_samples() == 736);
  CHECK(cp.frame_count(32000) == 32000 / 736 + 1);
  CHECK_THROWS_AS(spectrogram_preset("vgg"), ConfigError);

  auto desk = spectrogram_preset("desk");
  CHECK(desk.frame_count(16000) == 32);
}

TEST_CASE("silence maps to log(log_offset)") {
  auto cfg = spectrogram_preset("desk");
  const Spectrogram s = mel_spectrogram(std::vector<float>(16000, 0.0f), cfg);
  const float expected = static_cast<float>(std::log(cfg.log_offset));
  for (float v : s.values) CHECK(v == doctest::Approx(expected).epsilon(1e-6));
}

TEST_CASE("input shorter than a window is rejected") {
  auto cfg = spectrogram_preset("desk");
  CHECK_THROWS_AS(mel_spectrogram(std::vector<float>(100, 0.1f), cfg), ShapeError);
}

TEST_CASE("spectrogram is deterministic and finite") {
  std::mt19937 rng(1);
  std::normal_distribution<float> n(0.0f, 0.1f);
  std::vector<float> x(16000);
  for (auto& v : x) v = n(rng);
  auto cfg = spectrogram_preset("desk");
  const Spectrogram a = mel_spectrogram(x, cfg, "clip");
  const Spectrogram b = mel_spectrogram(x, cfg, "clip");
  CHECK(a.values == b.values);
  CHECK(a.clip_id == "clip");
  for (float v : a.values) CHECK(std::isfinite(v));
}

TEST_CASE("scaling the waveform up never lowers a log-mel value") {
  std::mt19937 rng(2);
  std::normal_distribution<float> n(0.0f, 0.05f);
  auto cfg = spectrogram_preset("desk");
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<float> x(8000);
    for (auto& v : x) v = n(rng);
    const double c = 1.1 + trial;
    std::vector<float> y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = static_cast<float>(x[i] * c);
    const Spectrogram a = mel_spectrogram(x, cfg);
    const Spectrogram b = mel_spectrogram(y, cfg);
    for (std::size_t i = 0; i < a.values.size(); ++i) CHECK(b.values[i] >= a.values[i] - 1e-5f);
  }
}

TEST_CASE("a tone at a band centre raises that band") {
  auto cfg = spectrogram_preset("desk");
  std::mt19937 rng(3);
  std::normal_distribution<float> n(0.0f, 0.01f);
  std::vector<float> noise(16000);
  for (auto& v : noise) v = n(rng);
  const Spectrogram base = mel_spectrogram(noise, cfg);
  const double lo = hz_to_mel(cfg.fmin_hz), hi = hz_to_mel(cfg.effective_fmax_hz());
  for (int band : {4, 12, 25}) {
    const double centre = mel_to_hz(lo + (hi - lo) * (band + 1) / (cfg.n_mels + 1));
    auto x = noise;
    const auto t = tone(centre, cfg.sample_rate_hz, x.size(), 0.05);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += t[i];
    CHECK(band_mean(mel_spectrogram(x, cfg), band) > band_mean(base, band));
  }
}

TEST_CASE("mel filterbank rows are triangles that cover the band") {
  auto cfg = spectrogram_preset("desk");
  const auto fb = mel_filterbank(cfg);
  const int bins = cfg.fft_size() / 2 + 1;
  REQUIRE(fb.size() == static_cast<std::size_t>(cfg.n_mels * bins));
  for (int m = 0; m < cfg.n_mels; ++m) {
    double peak = 0.0;
    int nonzero = 0;
    for (int k = 0; k < bins; ++k) {
      const double w = fb[static_cast<std::size_t>(m * bins + k)];
      CHECK(w >= 0.0);
      CHECK(w <= 1.0 + 1e-12);
      peak = std::max(peak, w);
      nonzero += w > 0.0;
    }
    CHECK(nonzero >= 1);
    CHECK(peak > 0.3);
  }
}

TEST_CASE("config validation") {
  SpectrogramConfig c = spectrogram_preset("desk");
  CHECK_NOTHROW(c.validate());
  c.hop_ms = c.window_ms * 2;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = spectrogram_preset("desk");
  c.n_mels = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = spectrogram_preset("desk");
  c.fmax_hz = c.sample_rate_hz;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = spectrogram_preset("desk");
  c.log_offset = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("config json round trip and hash") {
  const auto a = spectrogram_preset("passt");
  nlohmann::json j = a;
  const auto b = j.get<SpectrogramConfig>();
  CHECK(a == b);
  CHECK(a.hash() == b.hash());
  CHECK(a.hash() != spectrogram_preset("desk").hash());
}

TEST_CASE("resampling lengths and spectral peak") {
  Waveform w{tone(440.0, 32000, 32000), 32000};
  CHECK(resample(w, 32000).samples == w.samples);
  const Waveform half = resample(w, 16000);
  CHECK(half.samples.size() == 16000);
  CHECK(half.sample_rate_hz == 16000);
  CHECK(dft_peak_hz(half.samples, 16000, 300.0, 600.0, 1.0) == doctest::Approx(440.0).epsilon(0.005));
  double peak = 0.0;
  for (std::size_t i = 1000; i < 15000; ++i) peak = std::max(peak, std::abs(static_cast<double>(half.samples[i])));
  CHECK(peak == doctest::Approx(0.5).epsilon(0.02));
  const Waveform up = resample(Waveform{tone(440.0, 16000, 1000), 16000}, 22050);
  CHECK(up.samples.size() == 1379);
}

TEST_CASE("tones above the new Nyquist are suppressed") {
  const Waveform w{tone(12000.0, 32000, 16000), 32000};
  const Waveform out = resample(w, 16000);
  double rms = 0.0;
  for (std::size_t i = 500; i + 500 < out.samples.size(); ++i) rms += out.samples[i] * out.samples[i];
  rms = std::sqrt(rms / (out.samples.size() - 1000));
  CHECK(rms < 0.02);
}

TEST_CASE("load_audio decodes and resamples; multichannel is rejected") {
  TempDir tmp("audio");
  write_wav(tmp / "a.wav", tone(440.0, 32000, 32000), 32000);
  CHECK(load_audio(tmp / "a.wav", 32000).samples.size() == 32000);
  CHECK(load_audio(tmp / "a.wav", 16000).samples.size() == 16000);

  // 16-bit stereo PCM, written by hand.
  {
    std::ofstream f(tmp / "stereo.wav", std::ios::binary);
    auto u32 = [&](std::uint32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); };
    auto u16 = [&](std::uint16_t v) { f.write(reinterpret_cast<const char*>(&v), 2); };
    f.write("RIFF", 4);
    u32(36 + 8);
    f.write("WAVEfmt ", 8);
    u32(16);
    u16(1);
    u16(2);
    u32(16000);
    u32(16000 * 4);
    u16(4);
    u16(16);
    f.write("data", 4);
    u32(8);
    u32(0);
    u32(0);
  }
  CHECK(read_wav_info(tmp / "stereo.wav").channels == 2);
  CHECK_THROWS_AS(load_audio(tmp / "stereo.wav", 16000), IoError);

  std::ofstream(tmp / "junk.wav") << "not a wave file";
  CHECK_THROWS_AS(load_audio(tmp / "junk.wav", 16000), IoError);
  CHECK_THROWS_AS(load_audio(tmp / "missing.wav", 16000), IoError);
}

TEST_CASE("wav round trip preserves float samples") {
  TempDir tmp("wav");
  const auto x = tone(1000.0, 16000, 777, 0.9);
  write_wav(tmp / "x.wav", x, 16000);
  const Waveform w = read_wav(tmp / "x.wav");
  CHECK(w.sample_rate_hz == 16000);
  CHECK(w.samples == x);
}

TEST_CASE("feature cache round trip keyed by config") {
  TempDir tmp("cache");
  FeatureCache cache(tmp.path());
  auto cfg = spectrogram_preset("desk");
  const Spectrogram s = mel_spectrogram(tone(500.0, 16000, 16000), cfg, "clip-a");
  cache.put(s);
  const auto back = cache.get("clip-a", cfg);
  REQUIRE(back);
  CHECK(back->values == s.values);
  CHECK(back->n_frames == s.n_frames);
  auto other = cfg;
  other.n_mels = 40;
  CHECK_FALSE(cache.get("clip-a", other));
  CHECK_FALSE(cache.get("clip-b", cfg));
}
