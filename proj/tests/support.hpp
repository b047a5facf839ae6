#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "city2scene/dataset.hpp"
#include "city2scene/pipeline.hpp"
#include "city2scene/wav.hpp"
#include <fstream>

namespace c2s_test {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::uint64_t counter = 0;
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("c2s_" + tag + "_" + std::to_string(rd()) + "_" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

// Long-double reference formulas, written directly from the definitions
// (no shared code with the library).

inline std::vector<long double> ref_softmax(const std::vector<double>& z, long double tau = 1.0L) {
  long double m = -INFINITY;
  for (double v : z) m = std::max(m, static_cast<long double>(v) / tau);
  std::vector<long double> e(z.size());
  long double sum = 0.0L;
  for (std::size_t i = 0; i < z.size(); ++i) {
    e[i] = std::exp(static_cast<long double>(z[i]) / tau - m);
    sum += e[i];
  }
  for (auto& v : e) v /= sum;
  return e;
}

inline long double ref_log_softmax(const std::vector<double>& z, std::size_t k, long double tau = 1.0L) {
  long double m = -INFINITY;
  for (double v : z) m = std::max(m, static_cast<long double>(v) / tau);
  long double sum = 0.0L;
  for (double v : z) sum += std::exp(static_cast<long double>(v) / tau - m);
  return static_cast<long double>(z[k]) / tau - m - std::log(sum);
}

inline long double ref_cross_entropy(const std::vector<std::vector<double>>& z, const std::vector<std::vector<double>>& t) {
  long double total = 0.0L;
  for (std::size_t r = 0; r < z.size(); ++r) {
    for (std::size_t k = 0; k < z[r].size(); ++k) {
      if (t[r][k] != 0.0) total -= static_cast<long double>(t[r][k]) * ref_log_softmax(z[r], k);
    }
  }
  return total / static_cast<long double>(z.size());
}

/// tau^2 * KL(p || q) with p from `ref` and q from `other`, batch mean.
inline long double ref_kd(const std::vector<std::vector<double>>& ref, const std::vector<std::vector<double>>& other,
                          long double tau) {
  long double total = 0.0L;
  for (std::size_t r = 0; r < ref.size(); ++r) {
    for (std::size_t k = 0; k < ref[r].size(); ++k) {
      const long double lp = ref_log_softmax(ref[r], k, tau);
      const long double lq = ref_log_softmax(other[r], k, tau);
      total += std::exp(lp) * (lp - lq);
    }
  }
  return tau * tau * total / static_cast<long double>(ref.size());
}

/// Small synthetic corpus with a stratified test split, written once per path.
inline city2scene::Manifest make_corpus(const std::filesystem::path& dir, double cue = 0.9, int clips_per_pair = 20,
                                        std::uint64_t seed = 0) {
  city2scene::SyntheticConfig cfg;
  cfg.city_cue_strength = cue;
  cfg.clips_per_pair = clips_per_pair;
  cfg.seed = seed;
  city2scene::Manifest m = city2scene::generate_synthetic(cfg, dir);
  m = city2scene::stratified_split(m, 0.25, 0);
  city2scene::write_manifest(m, dir);
  return city2scene::load_manifest_dir(dir);
}

/// Desk stage config over `data_dir` with a short schedule.
inline city2scene::StageConfig desk_config(const std::filesystem::path& data_dir, int stage, int epochs) {
  city2scene::StageConfig cfg;
  cfg.stage = stage;
  cfg.data.dir = data_dir;
  cfg.max_epochs = epochs;
  cfg.eval_each_epoch = false;
  return cfg;
}

/// Twenty-row TAU-convention fixture: every one of the ten scene classes in
/// two cities, short WAV files on disk and an official-style train/test split.
inline std::filesystem::path write_tau_fixture(const std::filesystem::path& dir) {
  static const char* scenes[] = {"airport",         "bus",           "metro",          "metro_station",
                                 "park",            "public_square", "shopping_mall",  "street_pedestrian",
                                 "street_traffic",  "tram"};
  static const char* cities[] = {"barcelona", "helsinki"};
  std::filesystem::create_directories(dir / "audio");
  std::filesystem::create_directories(dir / "evaluation_setup");
  std::ofstream meta(dir / "meta.csv");
  std::ofstream train(dir / "evaluation_setup" / "fold1_train.csv");
  std::ofstream test(dir / "evaluation_setup" / "fold1_test.csv");
  meta << "filename\tscene_label\tidentifier\tsource_label\n";
  train << "filename\tscene_label\n";
  test << "filename\n";
  const std::vector<float> samples(1600, 0.01f);
  int k = 0;
  for (const char* scene : scenes) {
    for (const char* city : cities) {
      const std::string stem = std::string(scene) + "-" + city + "-" + std::to_string(100 + k) + "-" +
                               std::to_string(3000 + k) + "-a";
      const std::string file = "audio/" + stem + ".wav";
      city2scene::write_wav(dir / file, samples, 16000);
      meta << file << '\t' << scene << '\t' << city << "-" << 100 + k << "\ta\n";
      if (k % 2 == 0) {
        train << file << '\t' << scene << '\n';
      } else {
        test << file << '\n';
      }
      ++k;
    }
  }
  return dir;
}

}  // namespace c2s_test
