#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "city2scene/pipeline.hpp"

namespace city2scene {

struct SweepRow {
  double lambda = 0.0;
  std::uint64_t seed = 0;
  /// Test accuracy; NaN when the run failed.
  double accuracy = 0.0;
  /// Validation accuracy, or -1 without a validation split.
  double val_accuracy = -1.0;
  std::string error;

  bool ok() const { return error.empty(); }
};

struct SweepStat {
  double mean = 0.0;
  /// Sample standard deviation (n - 1); 0 for a single run.
  double std = 0.0;
  std::size_t n = 0;
};

struct SweepResult {
  std::vector<SweepRow> rows;
  std::map<double, SweepStat> aggregate;
  /// Same statistics over validation accuracy, when available.
  std::map<double, SweepStat> val_aggregate;

  /// Recomputes both aggregates from the successful rows.
  void recompute();
  /// Lambda with the highest mean validation accuracy, falling back to test
  /// accuracy when no validation split was used.
  double best_lambda() const;
};

SweepStat mean_std(std::span<const double> values);

/// "start:stop:step", inclusive of stop up to rounding; values in [0, 1].
std::vector<double> parse_lambda_range(const std::string& spec);
/// "1,2,3"
std::vector<std::uint64_t> parse_seed_list(const std::string& spec);

using SweepRunner = std::function<SweepRow(double lambda, std::uint64_t seed)>;

/// Calls `runner` for every (lambda, seed); a throwing run is recorded in its
/// row and the sweep continues.
SweepResult run_sweep(std::span<const double> lambdas, std::span<const std::uint64_t> seeds, const SweepRunner& runner);

/// In-process sweep over train_stage3. Each run writes a run directory below
/// `out_dir` when it is non-empty.
SweepResult lambda_sweep(const StageConfig& base_cfg, std::span<const Checkpoint> teachers,
                         std::span<const double> lambdas, std::span<const std::uint64_t> seeds,
                         const std::filesystem::path& out_dir = {}, FeatureStore* features = nullptr);

/// Runs each (lambda, seed) as a child process, at most `jobs` at a time:
///   exe stage3 --config <config> --lambda L --seed S --out <out_dir>/lambda_L_seed_S
/// and reads back the child's metrics.json.
SweepResult lambda_sweep_processes(const std::filesystem::path& exe, const std::filesystem::path& config,
                                   std::span<const std::string> extra_args, std::span<const double> lambdas,
                                   std::span<const std::uint64_t> seeds, const std::filesystem::path& out_dir,
                                   int jobs);

std::string run_dir_name(double lambda, std::uint64_t seed);

/// lambda,seed,accuracy
void write_sweep_csv(const SweepResult& result, const std::filesystem::path& path);
SweepResult parse_sweep_csv(const std::filesystem::path& path);
/// lambda,seed,val_accuracy
void write_sweep_validation_csv(const SweepResult& result, const std::filesystem::path& path);

/// Accuracy-vs-lambda line chart, one line per named series.
std::string sweep_svg(const std::map<std::string, std::map<double, SweepStat>>& series);
void write_sweep_svg(const std::map<std::string, std::map<double, SweepStat>>& series,
                     const std::filesystem::path& path);

}  // namespace city2scene
