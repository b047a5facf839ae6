#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace city2scene {

enum class Split { train, val, test };

std::string to_string(Split split);

struct ClipRecord {
  std::string clip_id;       // filename stem
  std::string filename;      // as listed in the meta file, e.g. audio/x.wav
  std::string scene_label;
  std::string city_label;
  std::string device_id;
  std::string identifier;    // meta `identifier` column, metadata only
  double duration_s = 0.0;
  std::filesystem::path path;
};

struct Manifest {
  std::vector<ClipRecord> records;
  std::vector<std::string> scene_vocab;
  std::vector<std::string> city_vocab;
  /// Records without an entry take part in no split.
  std::map<std::string, Split> split_assignment;
  /// Non-fatal notes produced while building the manifest.
  std::vector<std::string> warnings;

  std::size_t scene_index(const ClipRecord& rec) const;
  std::size_t city_index(const ClipRecord& rec) const;
  std::optional<Split> split_of(const ClipRecord& rec) const;
  /// Indices into `records` assigned to `split`, in record order.
  std::vector<std::size_t> indices(Split split) const;
};

/// The five tokens of a TAU-convention filename stem
/// `[scene]-[city]-[location]-[segment]-[device]`.
struct TauName {
  std::string scene;
  std::string city;
  std::string location;
  std::string segment;
  std::string device;
};

/// Returns nullopt if `filename` does not follow the convention.
std::optional<TauName> parse_tau_filename(const std::string& filename);

struct SplitFiles {
  std::optional<std::filesystem::path> train;
  std::optional<std::filesystem::path> test;
  std::optional<std::filesystem::path> val;
};

struct ParseOptions {
  /// When set, audio headers are not probed and every clip gets this duration.
  std::optional<double> assumed_duration_s;
};

/// Builds a Manifest from a TAU meta file. Audio paths resolve relative to
/// the meta file's directory. Vocabularies are sorted lexicographically.
Manifest parse_manifest(const std::filesystem::path& meta_file, const SplitFiles& splits = {},
                        const ParseOptions& options = {});

/// Paths written by write_manifest for a dataset rooted at `dir`.
struct ManifestFiles {
  std::filesystem::path meta;
  SplitFiles splits;
};

ManifestFiles manifest_files(const std::filesystem::path& dir);

/// Writes meta.csv plus evaluation_setup/fold1_{train,test,val}.csv under
/// `dir` (a split file is only written when that split is non-empty).
ManifestFiles write_manifest(const Manifest& manifest, const std::filesystem::path& dir);

/// Loads a directory produced by write_manifest or generate_synthetic.
Manifest load_manifest_dir(const std::filesystem::path& dir, const ParseOptions& options = {});

struct SyntheticConfig {
  int n_scenes = 4;
  int n_cities = 3;
  int clips_per_pair = 20;
  int sample_rate_hz = 16000;
  double duration_s = 1.0;
  double city_cue_strength = 0.9;
  double noise_db = -30.0;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Writes n_scenes * n_cities * clips_per_pair float WAV clips under
/// out_dir/audio and a meta.csv. Output bytes depend only on `cfg`.
Manifest generate_synthetic(const SyntheticConfig& cfg, const std::filesystem::path& out_dir);

/// Per (scene, city) pair: round(test_fraction * n) clips go to test, clamped
/// to [1, n-1]. Pairs with fewer than 2 clips stay in train with a warning.
Manifest stratified_split(const Manifest& manifest, double test_fraction, std::uint64_t seed);

/// Moves a stratified `fraction` of the train clips of each pair into val.
Manifest carve_validation(const Manifest& manifest, double fraction, std::uint64_t seed);

/// Scene names in the order of the ten TAU classes; used for synthetic corpora.
const std::vector<std::string>& tau_scene_names();
const std::vector<std::string>& tau_city_names();

}  // namespace city2scene
