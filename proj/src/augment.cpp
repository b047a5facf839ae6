#include "city2scene/augment.hpp"

#include <algorithm>
#include <cmath>

#include "city2scene/error.hpp"
#include "city2scene/features.hpp"

namespace city2scene {

SoftLabel SoftLabel::one_hot(std::size_t index, std::size_t k) {
  SoftLabel s;
  s.distribution.assign(k, 0.0);
  s.distribution.at(index) = 1.0;
  return s;
}

bool SoftLabel::valid(double tol) const {
  double sum = 0.0;
  for (double v : distribution) {
    if (!(v >= 0.0)) return false;
    sum += v;
  }
  return std::abs(sum - 1.0) <= tol;
}

void AugmentConfig::validate() const {
  std::vector<std::string> bad;
  auto prob = [&](double v, const char* name) {
    if (!(v >= 0.0 && v <= 1.0)) bad.push_back(std::string(name) + " must be in [0,1]");
  };
  prob(specaug_ratio, "specaug_ratio");
  prob(specaug_prob, "specaug_prob");
  prob(fms_prob, "fms_prob");
  prob(diraug_prob, "diraug_prob");
  if (!(mixup_alpha >= 0.0)) bad.emplace_back("mixup_alpha must be >= 0");
  if (!(fms_alpha >= 0.0)) bad.emplace_back("fms_alpha must be >= 0");
  if (fms_prob > 0.0 && !(fms_alpha > 0.0)) bad.emplace_back("fms_alpha must be > 0 when fms_prob > 0");
  if (diraug_prob > 0.0 && ir_bank.empty()) {
    bad.emplace_back("diraug_prob > 0 requires a non-empty impulse response bank (augment.ir_bank_dir)");
  }
  if (!bad.empty()) {
    std::string msg = "invalid augment config:";
    for (const auto& b : bad) msg += " " + b + ";";
    throw ConfigError(msg);
  }
}

bool AugmentConfig::any_enabled() const {
  return mixup_alpha > 0.0 || (specaug_prob > 0.0 && specaug_ratio > 0.0) || fms_prob > 0.0 || diraug_prob > 0.0;
}

void to_json(nlohmann::json& j, const AugmentConfig& c) {
  j = nlohmann::json{{"mixup_alpha", c.mixup_alpha},   {"specaug_ratio", c.specaug_ratio},
                     {"specaug_prob", c.specaug_prob}, {"fms_alpha", c.fms_alpha},
                     {"fms_prob", c.fms_prob},         {"diraug_prob", c.diraug_prob},
                     {"seed", c.seed}};
  j["ir_bank_dir"] = c.ir_bank_dir ? nlohmann::json(c.ir_bank_dir->string()) : nlohmann::json(nullptr);
}

void from_json(const nlohmann::json& j, AugmentConfig& c) {
  AugmentConfig d;
  c.mixup_alpha = j.value("mixup_alpha", d.mixup_alpha);
  c.specaug_ratio = j.value("specaug_ratio", d.specaug_ratio);
  c.specaug_prob = j.value("specaug_prob", d.specaug_prob);
  c.fms_alpha = j.value("fms_alpha", d.fms_alpha);
  c.fms_prob = j.value("fms_prob", d.fms_prob);
  c.diraug_prob = j.value("diraug_prob", d.diraug_prob);
  c.seed = j.value("seed", d.seed);
  c.ir_bank_dir.reset();
  if (j.contains("ir_bank_dir") && j["ir_bank_dir"].is_string()) c.ir_bank_dir = j["ir_bank_dir"].get<std::string>();
}

AugmentConfig augment_preset(const std::string& backbone) {
  AugmentConfig c;
  if (backbone == "cp_resnet" || backbone == "bc_resnet" || backbone == "tf_sepnet") {
    c.mixup_alpha = 0.3, c.fms_alpha = 0.4, c.fms_prob = 0.8, c.diraug_prob = 0.4;
  } else if (backbone == "passt") {
    c.fms_alpha = 0.4, c.fms_prob = 0.4, c.diraug_prob = 0.6;
  } else if (backbone == "beats") {
    c.mixup_alpha = 0.3, c.specaug_ratio = 0.2, c.specaug_prob = 1.0;
    c.fms_alpha = 0.4, c.fms_prob = 0.4, c.diraug_prob = 0.6;
  } else if (backbone == "desk" || backbone == "none") {
  } else {
    throw ConfigError("unknown augmentation preset '" + backbone + "'");
  }
  return c;
}

std::vector<ImpulseResponse> load_ir_bank(const std::filesystem::path& dir, int sample_rate_hz) {
  if (!std::filesystem::is_directory(dir)) throw IoError("impulse response bank " + dir.string() + " is not a directory");
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".wav") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<ImpulseResponse> bank;
  for (const auto& f : files) bank.push_back(load_audio(f, sample_rate_hz).samples);
  return bank;
}

namespace {

void check_labels(const Batch& batch) {
  if (batch.labels.size() != static_cast<std::size_t>(batch.x.n)) {
    throw ShapeError("batch has " + std::to_string(batch.x.n) + " items but " + std::to_string(batch.labels.size()) +
                     " labels");
  }
}

}  // namespace

Batch mixup_with(const Batch& batch, std::span<const std::size_t> perm, std::span<const double> gammas) {
  check_labels(batch);
  const auto n = static_cast<std::size_t>(batch.x.n);
  if (perm.size() != n || gammas.size() != n) throw ShapeError("mixup: permutation/gamma size mismatch");
  Batch out = batch;
  const std::size_t item = batch.x.item_size();
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = perm[i];
    const double g = gammas[i];
    if (g == 1.0) continue;
    const float* a = batch.x.data.data() + i * item;
    const float* b = batch.x.data.data() + j * item;
    float* dst = out.x.data.data() + i * item;
    for (std::size_t e = 0; e < item; ++e) dst[e] = static_cast<float>(g * a[e] + (1.0 - g) * b[e]);
    auto& lab = out.labels[i].distribution;
    const auto& la = batch.labels[i].distribution;
    const auto& lb = batch.labels[j].distribution;
    for (std::size_t k = 0; k < lab.size(); ++k) lab[k] = g * la[k] + (1.0 - g) * lb[k];
  }
  return out;
}

Batch mixup(const Batch& batch, double alpha, Rng& rng, std::vector<std::string>* warnings) {
  if (!(alpha > 0.0)) return batch;
  if (batch.x.n < 2) {
    if (warnings) warnings->emplace_back("mixup: batch of size 1 left unchanged");
    return batch;
  }
  const auto perm = random_permutation(static_cast<std::size_t>(batch.x.n), rng);
  std::vector<double> gammas(perm.size());
  for (auto& g : gammas) g = sample_beta(rng, alpha, alpha);
  return mixup_with(batch, perm, gammas);
}

Batch spec_augment(const Batch& batch, double r, double p, Rng& rng) {
  if (!(p > 0.0) || !(r > 0.0)) return batch;
  Batch out = batch;
  const int f_dim = batch.x.h;
  const int t_dim = batch.x.w;
  const int max_f = static_cast<int>(std::floor(r * f_dim));
  const int max_t = static_cast<int>(std::floor(r * t_dim));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int i = 0; i < batch.x.n; ++i) {
    if (unit(rng) >= p) continue;
    const int fw = std::uniform_int_distribution<int>(0, max_f)(rng);
    const int f0 = std::uniform_int_distribution<int>(0, f_dim - fw)(rng);
    const int tw = std::uniform_int_distribution<int>(0, max_t)(rng);
    const int t0 = std::uniform_int_distribution<int>(0, t_dim - tw)(rng);
    for (int ch = 0; ch < batch.x.c; ++ch) {
      for (int f = f0; f < f0 + fw; ++f) {
        for (int t = 0; t < t_dim; ++t) out.x.at(i, ch, f, t) = 0.0f;
      }
      for (int f = 0; f < f_dim; ++f) {
        for (int t = t0; t < t0 + tw; ++t) out.x.at(i, ch, f, t) = 0.0f;
      }
    }
  }
  return out;
}

Batch freq_mixstyle_with(const Batch& batch, std::span<const std::size_t> perm, std::span<const double> gammas) {
  constexpr double kEps = 1e-6;
  const auto n = static_cast<std::size_t>(batch.x.n);
  if (perm.size() != n || gammas.size() != n) throw ShapeError("freq_mixstyle: permutation/gamma size mismatch");
  const int chans = batch.x.c, f_dim = batch.x.h, t_dim = batch.x.w;
  const double count = static_cast<double>(chans) * t_dim;

  // Per item, per frequency bin: mean and std over channels and time.
  std::vector<double> mu(n * f_dim), sigma(n * f_dim);
  for (std::size_t i = 0; i < n; ++i) {
    for (int f = 0; f < f_dim; ++f) {
      double sum = 0.0;
      for (int ch = 0; ch < chans; ++ch)
        for (int t = 0; t < t_dim; ++t) sum += batch.x.at(static_cast<int>(i), ch, f, t);
      const double m = sum / count;
      double sq = 0.0;
      for (int ch = 0; ch < chans; ++ch)
        for (int t = 0; t < t_dim; ++t) {
          const double d = batch.x.at(static_cast<int>(i), ch, f, t) - m;
          sq += d * d;
        }
      const double var = count > 1 ? sq / (count - 1) : 0.0;
      mu[i * f_dim + f] = m;
      sigma[i * f_dim + f] = std::sqrt(var + kEps);
    }
  }

  Batch out = batch;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = perm[i];
    const double g = gammas[i];
    for (int f = 0; f < f_dim; ++f) {
      const double mu_i = mu[i * f_dim + f], sig_i = sigma[i * f_dim + f];
      const double mu_mix = g * mu_i + (1.0 - g) * mu[j * f_dim + f];
      const double sig_mix = g * sig_i + (1.0 - g) * sigma[j * f_dim + f];
      for (int ch = 0; ch < chans; ++ch)
        for (int t = 0; t < t_dim; ++t) {
          const int ii = static_cast<int>(i);
          const double normed = (batch.x.at(ii, ch, f, t) - mu_i) / sig_i;
          out.x.at(ii, ch, f, t) = static_cast<float>(normed * sig_mix + mu_mix);
        }
    }
  }
  return out;
}

Batch freq_mixstyle(const Batch& batch, double alpha, double p, Rng& rng) {
  if (!(p > 0.0)) return batch;
  if (batch.x.n < 2) return batch;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  if (unit(rng) >= p) return batch;
  std::vector<double> gammas(static_cast<std::size_t>(batch.x.n));
  for (auto& g : gammas) g = sample_beta(rng, alpha, alpha);
  const auto perm = random_permutation(gammas.size(), rng);
  return freq_mixstyle_with(batch, perm, gammas);
}

std::vector<float> convolve_renormalized(std::span<const float> x, std::span<const float> ir) {
  std::vector<float> y(x.size(), 0.0f);
  if (ir.empty() || x.empty()) return std::vector<float>(x.begin(), x.end());
  for (std::size_t n = 0; n < x.size(); ++n) {
    double acc = 0.0;
    const std::size_t kmax = std::min(ir.size() - 1, n);
    for (std::size_t k = 0; k <= kmax; ++k) acc += static_cast<double>(ir[k]) * x[n - k];
    y[n] = static_cast<float>(acc);
  }
  float peak_in = 0.0f, peak_out = 0.0f;
  for (float v : x) peak_in = std::max(peak_in, std::abs(v));
  for (float v : y) peak_out = std::max(peak_out, std::abs(v));
  if (peak_out > 0.0f && peak_in > 0.0f) {
    const double scale = static_cast<double>(peak_in) / peak_out;
    for (float& v : y) v = static_cast<float>(v * scale);
  }
  return y;
}

std::vector<std::vector<float>> dir_aug(const std::vector<std::vector<float>>& waveforms, double p,
                                        std::span<const ImpulseResponse> ir_bank, Rng& rng) {
  if (!(p > 0.0)) return waveforms;
  if (ir_bank.empty()) throw ConfigError("dir_aug: probability > 0 with an empty impulse response bank");
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> pick(0, ir_bank.size() - 1);
  std::vector<std::vector<float>> out = waveforms;
  for (auto& w : out) {
    if (unit(rng) >= p) continue;
    w = convolve_renormalized(w, ir_bank[pick(rng)]);
  }
  return out;
}

}  // namespace city2scene
