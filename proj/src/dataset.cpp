#include "city2scene/dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include "city2scene/error.hpp"
#include "city2scene/features.hpp"
#include "city2scene/rng.hpp"
#include "city2scene/wav.hpp"

namespace city2scene {
namespace {

constexpr const char* kMetaHeader = "filename\tscene_label\tidentifier\tsource_label";

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t tab = line.find('\t', start);
    out.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
    if (tab == std::string::npos) break;
    start = tab + 1;
  }
  return out;
}

std::string chomp(std::string line) {
  while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) line.pop_back();
  return line;
}

std::string stem_of(const std::string& filename) {
  return std::filesystem::path(filename).stem().string();
}

std::size_t vocab_index(const std::vector<std::string>& vocab, const std::string& label) {
  const auto it = std::lower_bound(vocab.begin(), vocab.end(), label);
  if (it == vocab.end() || *it != label) throw Error("label '" + label + "' is not in the vocabulary");
  return static_cast<std::size_t>(it - vocab.begin());
}

void read_split_file(const std::filesystem::path& file, Split split, Manifest& manifest,
                     const std::map<std::string, std::size_t>& by_filename) {
  std::ifstream in(file);
  if (!in) throw IoError("cannot open split file " + file.string());
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    line = chomp(line);
    if (line_no == 1) {
      if (line.rfind("filename", 0) != 0) {
        throw ParseError(file.string() + ":1: expected header starting with 'filename'");
      }
      continue;
    }
    if (line.empty()) continue;
    const std::string filename = split_tabs(line).front();
    const auto it = by_filename.find(filename);
    if (it == by_filename.end()) {
      throw ParseError(file.string() + ":" + std::to_string(line_no) + ": unknown split filename '" +
                       filename + "'");
    }
    manifest.split_assignment[manifest.records[it->second].clip_id] = split;
  }
}

}  // namespace

std::string to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

std::size_t Manifest::scene_index(const ClipRecord& rec) const { return vocab_index(scene_vocab, rec.scene_label); }

std::size_t Manifest::city_index(const ClipRecord& rec) const { return vocab_index(city_vocab, rec.city_label); }

std::optional<Split> Manifest::split_of(const ClipRecord& rec) const {
  const auto it = split_assignment.find(rec.clip_id);
  if (it == split_assignment.end()) return std::nullopt;
  return it->second;
}

std::vector<std::size_t> Manifest::indices(Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto s = split_of(records[i]);
    if (s && *s == split) out.push_back(i);
  }
  return out;
}

std::optional<TauName> parse_tau_filename(const std::string& filename) {
  const std::string stem = stem_of(filename);
  std::vector<std::string> tokens;
  std::stringstream ss(stem);
  std::string tok;
  while (std::getline(ss, tok, '-')) tokens.push_back(tok);
  if (tokens.size() != 5) return std::nullopt;
  for (const auto& t : tokens) {
    if (t.empty()) return std::nullopt;
  }
  return TauName{tokens[0], tokens[1], tokens[2], tokens[3], tokens[4]};
}

Manifest parse_manifest(const std::filesystem::path& meta_file, const SplitFiles& splits,
                        const ParseOptions& options) {
  std::ifstream in(meta_file);
  if (!in) throw IoError("cannot open meta file " + meta_file.string());
  const std::filesystem::path root = meta_file.parent_path();

  Manifest manifest;
  std::set<std::string> scenes;
  std::set<std::string> cities;
  std::map<std::string, std::size_t> by_filename;
  std::string line;
  std::size_t line_no = 0;
  auto where = [&] { return meta_file.string() + ":" + std::to_string(line_no) + ": "; };

  while (std::getline(in, line)) {
    ++line_no;
    line = chomp(line);
    if (line_no == 1) {
      if (line != kMetaHeader) throw ParseError(where() + "expected header '" + std::string(kMetaHeader) + "'");
      continue;
    }
    if (line.empty()) continue;
    const auto cols = split_tabs(line);
    if (cols.size() != 4) {
      throw ParseError(where() + "malformed row: expected 4 tab-separated columns, found " +
                       std::to_string(cols.size()));
    }
    const auto name = parse_tau_filename(cols[0]);
    if (!name) throw ParseError(where() + "malformed row: filename '" + cols[0] + "' is not scene-city-location-segment-device");
    if (name->scene != cols[1]) {
      throw ParseError(where() + "scene label '" + cols[1] + "' does not match filename token '" + name->scene + "'");
    }

    ClipRecord rec;
    rec.clip_id = stem_of(cols[0]);
    rec.filename = cols[0];
    rec.scene_label = cols[1];
    rec.city_label = name->city;
    rec.identifier = cols[2];
    rec.device_id = cols[3];
    rec.path = root / cols[0];
    if (options.assumed_duration_s) {
      rec.duration_s = *options.assumed_duration_s;
    } else {
      const WavInfo info = read_wav_info(rec.path);
      rec.duration_s = static_cast<double>(info.frames) / info.sample_rate_hz;
    }
    if (!(rec.duration_s > 0.0)) throw ParseError(where() + "clip '" + rec.clip_id + "' has zero duration");
    if (!by_filename.emplace(rec.filename, manifest.records.size()).second ||
        std::any_of(manifest.records.begin(), manifest.records.end(),
                    [&](const ClipRecord& r) { return r.clip_id == rec.clip_id; })) {
      throw ParseError(where() + "duplicate clip '" + rec.clip_id + "'");
    }
    scenes.insert(rec.scene_label);
    cities.insert(rec.city_label);
    manifest.records.push_back(std::move(rec));
  }
  if (line_no == 0) throw ParseError(meta_file.string() + ":1: missing header");

  manifest.scene_vocab.assign(scenes.begin(), scenes.end());
  manifest.city_vocab.assign(cities.begin(), cities.end());

  const bool any_split = splits.train || splits.test || splits.val;
  if (!any_split) {
    for (const auto& rec : manifest.records) manifest.split_assignment[rec.clip_id] = Split::train;
  } else {
    if (splits.train) read_split_file(*splits.train, Split::train, manifest, by_filename);
    if (splits.val) read_split_file(*splits.val, Split::val, manifest, by_filename);
    if (splits.test) read_split_file(*splits.test, Split::test, manifest, by_filename);
  }
  return manifest;
}

ManifestFiles manifest_files(const std::filesystem::path& dir) {
  ManifestFiles files;
  files.meta = dir / "meta.csv";
  files.splits.train = dir / "evaluation_setup" / "fold1_train.csv";
  files.splits.test = dir / "evaluation_setup" / "fold1_test.csv";
  files.splits.val = dir / "evaluation_setup" / "fold1_val.csv";
  return files;
}

ManifestFiles write_manifest(const Manifest& manifest, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir / "evaluation_setup", ec);
  if (ec) throw IoError("cannot create " + (dir / "evaluation_setup").string() + ": " + ec.message());
  ManifestFiles files = manifest_files(dir);

  std::ofstream meta(files.meta, std::ios::trunc);
  if (!meta) throw IoError("cannot write " + files.meta.string());
  meta << kMetaHeader << '\n';
  for (const auto& rec : manifest.records) {
    meta << rec.filename << '\t' << rec.scene_label << '\t' << rec.identifier << '\t' << rec.device_id << '\n';
  }
  if (!meta) throw IoError("short write to " + files.meta.string());

  auto write_split = [&](Split split, const std::filesystem::path& path, bool with_scene) -> bool {
    const auto idx = manifest.indices(split);
    if (idx.empty()) {
      std::filesystem::remove(path, ec);
      return false;
    }
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << (with_scene ? "filename\tscene_label" : "filename") << '\n';
    for (std::size_t i : idx) {
      out << manifest.records[i].filename;
      if (with_scene) out << '\t' << manifest.records[i].scene_label;
      out << '\n';
    }
    return true;
  };
  if (!write_split(Split::train, *files.splits.train, true)) files.splits.train.reset();
  if (!write_split(Split::test, *files.splits.test, false)) files.splits.test.reset();
  if (!write_split(Split::val, *files.splits.val, true)) files.splits.val.reset();
  return files;
}

Manifest load_manifest_dir(const std::filesystem::path& dir, const ParseOptions& options) {
  ManifestFiles files = manifest_files(dir);
  for (auto* opt : {&files.splits.train, &files.splits.test, &files.splits.val}) {
    if (*opt && !std::filesystem::exists(**opt)) opt->reset();
  }
  return parse_manifest(files.meta, files.splits, options);
}

const std::vector<std::string>& tau_scene_names() {
  static const std::vector<std::string> names = {"airport", "bus", "metro", "metro_station", "park",
                                                 "public_square", "shopping_mall", "street_pedestrian",
                                                 "street_traffic", "tram"};
  return names;
}

const std::vector<std::string>& tau_city_names() {
  static const std::vector<std::string> names = {"barcelona", "helsinki", "lisbon", "london", "lyon",
                                                 "milan", "paris", "prague", "stockholm", "vienna"};
  return names;
}

void SyntheticConfig::validate() const {
  std::vector<std::string> bad;
  if (n_scenes < 2) bad.push_back("n_scenes must be >= 2");
  if (n_cities < 2) bad.push_back("n_cities must be >= 2");
  if (clips_per_pair < 1) bad.push_back("clips_per_pair must be >= 1");
  if (sample_rate_hz <= 0) bad.push_back("sample_rate_hz must be positive");
  if (!(duration_s > 0.0)) bad.push_back("duration_s must be positive");
  if (!(city_cue_strength >= 0.0 && city_cue_strength <= 1.0)) bad.push_back("city_cue_strength must be in [0,1]");
  if (!bad.empty()) {
    std::string msg = "invalid synthetic config:";
    for (const auto& b : bad) msg += " " + b + ";";
    throw ConfigError(msg);
  }
}

namespace {

std::string indexed_name(const std::vector<std::string>& base, int i, const char* prefix) {
  if (i < static_cast<int>(base.size())) return base[static_cast<std::size_t>(i)];
  return std::string(prefix) + std::to_string(i);
}

struct SceneTemplate {
  std::array<double, 3> hump_lo_hz{};
  std::array<double, 3> hump_hi_hz{};
  double modulation_hz = 1.0;
};

struct CitySignature {
  std::array<double, 2> tone_hz{};
};

constexpr int kSinesPerHump = 12;
// Weak enough that scene identity is mostly carried by the city tone level.
constexpr double kHumpAmplitude = 0.0015;
/// Relative spread of the per-clip tone level.
constexpr double kToneJitter = 0.4;
constexpr double kToneAmplitude = 0.1;

}  // namespace

Manifest generate_synthetic(const SyntheticConfig& cfg, const std::filesystem::path& out_dir) {
  cfg.validate();
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "audio", ec);
  if (ec) throw IoError("cannot create " + (out_dir / "audio").string() + ": " + ec.message());

  const double nyquist = cfg.sample_rate_hz / 2.0;
  const double mel_lo = hz_to_mel(150.0);
  const double mel_hi = hz_to_mel(0.4 * cfg.sample_rate_hz);
  const double hump_half_width = 0.04 * (mel_hi - mel_lo);

  Rng design = make_rng(cfg.seed, kStreamSynth);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  std::vector<SceneTemplate> scenes(static_cast<std::size_t>(cfg.n_scenes));
  for (auto& s : scenes) {
    for (int h = 0; h < 3; ++h) {
      const double centre = mel_lo + hump_half_width + unit(design) * (mel_hi - mel_lo - 2 * hump_half_width);
      s.hump_lo_hz[h] = mel_to_hz(centre - hump_half_width);
      s.hump_hi_hz[h] = std::min(mel_to_hz(centre + hump_half_width), 0.98 * nyquist);
    }
    s.modulation_hz = 0.5 + 2.5 * unit(design);
  }

  // City tones sit on an even mel grid so no two cities share a band.
  const int n_tones = 2 * cfg.n_cities;
  std::vector<double> tone_grid(static_cast<std::size_t>(n_tones));
  const double tone_lo = hz_to_mel(300.0);
  const double tone_hi = hz_to_mel(0.42 * cfg.sample_rate_hz);
  for (int i = 0; i < n_tones; ++i) {
    tone_grid[static_cast<std::size_t>(i)] = mel_to_hz(tone_lo + (tone_hi - tone_lo) * (i + 0.5) / n_tones);
  }
  std::shuffle(tone_grid.begin(), tone_grid.end(), design);
  std::vector<CitySignature> cities(static_cast<std::size_t>(cfg.n_cities));
  for (int c = 0; c < cfg.n_cities; ++c) {
    cities[static_cast<std::size_t>(c)].tone_hz = {tone_grid[static_cast<std::size_t>(2 * c)],
                                                   tone_grid[static_cast<std::size_t>(2 * c + 1)]};
  }

  const std::size_t n_samples = static_cast<std::size_t>(std::llround(cfg.duration_s * cfg.sample_rate_hz));
  const double noise_std = std::pow(10.0, cfg.noise_db / 20.0);
  const double two_pi = 2.0 * std::numbers::pi;

  Manifest manifest;
  std::set<std::string> scene_names;
  std::set<std::string> city_names;
  std::uint64_t clip_counter = 0;
  std::vector<float> samples(n_samples);

  for (int s = 0; s < cfg.n_scenes; ++s) {
    const std::string scene = indexed_name(tau_scene_names(), s, "scene");
    for (int c = 0; c < cfg.n_cities; ++c) {
      const std::string city = indexed_name(tau_city_names(), c, "city");
      // Tone level depends on the scene, and the mapping is rotated per city.
      const int level_rank = (s + c) % cfg.n_scenes;
      const double level = 0.2 + 0.8 * level_rank / (cfg.n_scenes - 1);
      for (int k = 0; k < cfg.clips_per_pair; ++k, ++clip_counter) {
        Rng clip_rng = make_rng(cfg.seed, 1000 + clip_counter);
        std::normal_distribution<double> noise(0.0, noise_std);

        struct Partial {
          double freq, phase, amp;
        };
        std::vector<Partial> humps;
        const double hump_gain = kHumpAmplitude * (0.8 + 0.4 * unit(clip_rng)) / std::sqrt(kSinesPerHump);
        for (int h = 0; h < 3; ++h) {
          for (int p = 0; p < kSinesPerHump; ++p) {
            const double f = scenes[s].hump_lo_hz[h] + unit(clip_rng) * (scenes[s].hump_hi_hz[h] - scenes[s].hump_lo_hz[h]);
            humps.push_back({f, two_pi * unit(clip_rng), hump_gain});
          }
        }
        const double mod_phase = two_pi * unit(clip_rng);
        std::array<Partial, 2> tones{};
        for (int t = 0; t < 2; ++t) {
          tones[t] = {cities[c].tone_hz[t], two_pi * unit(clip_rng),
                      kToneAmplitude * cfg.city_cue_strength * level * (1.0 - kToneJitter + 2.0 * kToneJitter * unit(clip_rng))};
        }

        for (std::size_t n = 0; n < n_samples; ++n) {
          const double t = static_cast<double>(n) / cfg.sample_rate_hz;
          double hump = 0.0;
          for (const auto& p : humps) hump += p.amp * std::sin(two_pi * p.freq * t + p.phase);
          const double modulation = 1.0 + 0.5 * std::sin(two_pi * scenes[s].modulation_hz * t + mod_phase);
          double v = hump * modulation;
          for (const auto& tone : tones) v += tone.amp * std::sin(two_pi * tone.freq * t + tone.phase);
          v += noise(clip_rng);
          samples[n] = static_cast<float>(v);
        }

        const int location = k / 10;
        const int segment = k % 10;
        ClipRecord rec;
        rec.clip_id = scene + "-" + city + "-" + std::to_string(location) + "-" + std::to_string(segment) + "-a";
        rec.filename = "audio/" + rec.clip_id + ".wav";
        rec.scene_label = scene;
        rec.city_label = city;
        rec.device_id = "a";
        rec.identifier = city + "-" + std::to_string(location);
        rec.duration_s = static_cast<double>(n_samples) / cfg.sample_rate_hz;
        rec.path = out_dir / rec.filename;
        write_wav(rec.path, samples, cfg.sample_rate_hz);
        scene_names.insert(scene);
        city_names.insert(city);
        manifest.records.push_back(std::move(rec));
      }
    }
  }
  manifest.scene_vocab.assign(scene_names.begin(), scene_names.end());
  manifest.city_vocab.assign(city_names.begin(), city_names.end());
  for (const auto& rec : manifest.records) manifest.split_assignment[rec.clip_id] = Split::train;
  write_manifest(manifest, out_dir);
  return manifest;
}

namespace {

/// Groups record indices by (scene, city), each group sorted by clip_id.
std::map<std::pair<std::string, std::string>, std::vector<std::size_t>> pair_groups(
    const Manifest& m, std::optional<Split> only) {
  std::map<std::pair<std::string, std::string>, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    if (only && m.split_of(m.records[i]) != only) continue;
    groups[{m.records[i].scene_label, m.records[i].city_label}].push_back(i);
  }
  for (auto& [key, idx] : groups) {
    std::sort(idx.begin(), idx.end(),
              [&](std::size_t a, std::size_t b) { return m.records[a].clip_id < m.records[b].clip_id; });
  }
  return groups;
}

Manifest move_fraction(const Manifest& manifest, double fraction, std::uint64_t seed, std::optional<Split> from,
                       Split to, const char* what) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw ConfigError(std::string(what) + " fraction must be in (0, 1)");
  Manifest out = manifest;
  Rng rng = make_rng(seed, kStreamSplit);
  for (auto& [key, idx] : pair_groups(manifest, from)) {
    if (!from) {
      for (std::size_t i : idx) out.split_assignment[manifest.records[i].clip_id] = Split::train;
    }
    if (idx.size() < 2) {
      out.warnings.push_back(std::string(what) + ": pair (" + key.first + ", " + key.second + ") has " +
                             std::to_string(idx.size()) + " clip(s); kept in train");
      continue;
    }
    std::shuffle(idx.begin(), idx.end(), rng);
    auto n_move = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(idx.size())));
    n_move = std::clamp<std::size_t>(n_move, 1, idx.size() - 1);
    for (std::size_t j = 0; j < n_move; ++j) out.split_assignment[manifest.records[idx[j]].clip_id] = to;
  }
  return out;
}

}  // namespace

Manifest stratified_split(const Manifest& manifest, double test_fraction, std::uint64_t seed) {
  return move_fraction(manifest, test_fraction, seed, std::nullopt, Split::test, "stratified_split");
}

Manifest carve_validation(const Manifest& manifest, double fraction, std::uint64_t seed) {
  return move_fraction(manifest, fraction, seed ^ 0x5bd1e995ull, Split::train, Split::val, "carve_validation");
}

}  // namespace city2scene
