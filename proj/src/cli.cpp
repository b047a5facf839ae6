#include "city2scene/cli.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <set>

#include <CLI11.hpp>

#include "city2scene/error.hpp"
#include "city2scene/eval.hpp"
#include "city2scene/pipeline.hpp"
#include "city2scene/sweep.hpp"

namespace city2scene {

nlohmann::json to_json(const SynthSpec& spec) {
  const auto& g = spec.generator;
  return {{"n_scenes", g.n_scenes},
          {"n_cities", g.n_cities},
          {"clips_per_pair", g.clips_per_pair},
          {"sample_rate_hz", g.sample_rate_hz},
          {"duration_s", g.duration_s},
          {"city_cue_strength", g.city_cue_strength},
          {"noise_db", g.noise_db},
          {"seed", g.seed},
          {"test_fraction", spec.test_fraction},
          {"split_seed", spec.split_seed}};
}

SynthSpec synth_spec_from_json(const nlohmann::json& doc) {
  SynthSpec spec;
  std::vector<std::string> errors;
  if (!doc.is_object()) throw ConfigError("invalid synth config: <root>: expected an object");
  auto& g = spec.generator;
  auto read = [&](const char* key, auto& out) {
    if (!doc.contains(key)) return;
    try {
      out = doc.at(key).get<std::decay_t<decltype(out)>>();
    } catch (const std::exception& e) {
      errors.push_back(std::string(key) + ": " + e.what());
    }
  };
  read("n_scenes", g.n_scenes);
  read("n_cities", g.n_cities);
  read("clips_per_pair", g.clips_per_pair);
  read("sample_rate_hz", g.sample_rate_hz);
  read("duration_s", g.duration_s);
  read("city_cue_strength", g.city_cue_strength);
  read("noise_db", g.noise_db);
  read("seed", g.seed);
  read("test_fraction", spec.test_fraction);
  read("split_seed", spec.split_seed);
  static const std::set<std::string> known = {"n_scenes",   "n_cities", "clips_per_pair", "sample_rate_hz",
                                              "duration_s", "city_cue_strength", "noise_db", "seed",
                                              "test_fraction", "split_seed"};
  for (const auto& [key, value] : doc.items()) {
    if (!known.count(key)) errors.push_back(key + ": unknown field");
  }
  if (!(spec.test_fraction > 0.0 && spec.test_fraction < 1.0)) errors.emplace_back("test_fraction must be in (0, 1)");
  if (errors.empty()) {
    try {
      g.validate();
    } catch (const ConfigError& e) {
      errors.emplace_back(e.what());
    }
  }
  if (!errors.empty()) {
    std::string msg = "invalid synth config: ";
    for (std::size_t i = 0; i < errors.size(); ++i) msg += (i ? "; " : "") + errors[i];
    throw ConfigError(msg);
  }
  return spec;
}

namespace {

struct Common {
  std::string config;
  std::string out;
  std::vector<std::string> overrides;
  std::string seeds;
  std::uint64_t seed = 0;
  bool seed_given = false;
};

nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path + " is not valid JSON: " + e.what());
  }
}

void write_json_file(const std::filesystem::path& path, const nlohmann::json& j) {
  std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

nlohmann::json load_doc(const Common& c) {
  nlohmann::json doc = c.config.empty() ? nlohmann::json::object() : read_json_file(c.config);
  for (const auto& o : c.overrides) apply_override(doc, o);
  return doc;
}

std::vector<std::uint64_t> seed_list(const Common& c, std::uint64_t fallback) {
  if (!c.seeds.empty()) return parse_seed_list(c.seeds);
  return {c.seed_given ? c.seed : fallback};
}

void print_summary(const std::string& what, const std::vector<double>& values) {
  const SweepStat s = mean_std(values);
  std::printf("%s: %.2f +- %.2f %% over %zu run(s)\n", what.c_str(), 100.0 * s.mean, 100.0 * s.std, s.n);
}

int run_synth(const Common& c) {
  nlohmann::json doc = load_doc(c);
  if (c.seed_given) doc["seed"] = c.seed;
  const SynthSpec spec = synth_spec_from_json(doc);
  if (c.out.empty()) throw ConfigError("--out is required");
  Manifest m = generate_synthetic(spec.generator, c.out);
  m = stratified_split(m, spec.test_fraction, spec.split_seed);
  write_manifest(m, c.out);
  write_json_file(std::filesystem::path(c.out) / "config.json", to_json(spec));
  for (const auto& w : m.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
  std::printf("wrote %zu clips to %s (%zu train, %zu test)\n", m.records.size(), c.out.c_str(),
              m.indices(Split::train).size(), m.indices(Split::test).size());
  return 0;
}

int run_stage_cmd(int stage, const Common& c, const std::vector<std::string>& teachers, const std::string& city_model,
                  std::optional<double> lambda, bool baseline) {
  nlohmann::json doc = load_doc(c);
  doc["stage"] = stage;
  if (!teachers.empty()) doc["teacher_checkpoints"] = teachers;
  if (!city_model.empty()) doc["city_checkpoint"] = city_model;
  if (lambda) doc["kd"]["lambda"] = *lambda;
  if (c.out.empty()) throw ConfigError("--out is required");
  const std::uint64_t default_seed = doc.contains("seed") && doc["seed"].is_number_unsigned() ? doc["seed"].get<std::uint64_t>() : 1;
  const auto seeds = seed_list(c, default_seed);

  std::vector<double> accuracies;
  for (auto seed : seeds) {
    nlohmann::json run_doc = doc;
    run_doc["seed"] = seed;
    const StageConfig cfg = stage_config_from_json(run_doc);
    const std::filesystem::path dir =
        seeds.size() == 1 ? std::filesystem::path(c.out) : std::filesystem::path(c.out) / ("seed_" + std::to_string(seed));
    const StageResult r = run_stage(cfg, dir, baseline);
    if (r.test_metrics) {
      accuracies.push_back(r.test_metrics->overall_accuracy);
      std::printf("seed %llu: test accuracy %.2f %%\n", static_cast<unsigned long long>(seed),
                  100.0 * r.test_metrics->overall_accuracy);
    }
  }
  if (!accuracies.empty()) print_summary("stage" + std::to_string(stage) + " test accuracy", accuracies);
  return 0;
}

Manifest manifest_for(const Checkpoint& ckpt, const std::string& data_dir) {
  std::filesystem::path dir = data_dir;
  if (dir.empty()) {
    const auto& snap = ckpt.config_snapshot;
    if (snap.contains("data") && snap["data"].contains("dir")) dir = snap["data"]["dir"].get<std::string>();
  }
  if (dir.empty()) throw ConfigError("--data is required (the checkpoint does not name its dataset)");
  return load_manifest_dir(dir);
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw ConfigError("--split must be train, val or test");
}

int run_eval(const std::string& checkpoint, const std::string& compare, const std::string& data, const std::string& split,
             const std::string& out) {
  const Checkpoint ckpt = load_checkpoint(checkpoint);
  const Manifest m = manifest_for(ckpt, data);
  const Metrics metrics = evaluate(ckpt, m, parse_split(split));
  std::printf("overall accuracy %.2f %%, class mean %.2f %% (n = %zu)\n", 100.0 * metrics.overall_accuracy,
              100.0 * metrics.class_mean_accuracy, metrics.n_eval);
  std::filesystem::path dir = out.empty() ? std::filesystem::path(".") : std::filesystem::path(out);
  if (!out.empty()) write_json_file(dir / "metrics.json", to_json(metrics));
  if (!compare.empty()) {
    const Checkpoint base = load_checkpoint(compare);
    const Metrics base_metrics = evaluate(base, m, parse_split(split));
    const ClasswiseReport report = classwise_report(base_metrics, metrics);
    std::fputs(report.render_text().c_str(), stdout);
    if (!out.empty()) {
      std::ofstream(dir / "classwise.txt") << report.render_text();
      std::ofstream(dir / "classwise.csv") << report.render_csv();
    }
  }
  return 0;
}

int run_sweep_cmd(const Common& c, const std::vector<std::string>& teachers, const std::string& lambdas, int jobs,
                  const std::string& series_name) {
  if (c.out.empty()) throw ConfigError("--out is required");
  nlohmann::json doc = load_doc(c);
  doc["stage"] = 3;
  if (!teachers.empty()) doc["teacher_checkpoints"] = teachers;
  const std::uint64_t default_seed = doc.contains("seed") && doc["seed"].is_number_unsigned() ? doc["seed"].get<std::uint64_t>() : 1;
  const auto seeds = seed_list(c, default_seed);
  const auto lambda_values = parse_lambda_range(lambdas.empty() ? "0.1:0.9:0.1" : lambdas);
  const StageConfig cfg = stage_config_from_json(doc);
  if (cfg.teacher_checkpoints.empty()) {
    throw ConfigError("sweep needs --teachers; run stage2 to produce teacher checkpoints");
  }
  const std::filesystem::path out = c.out;
  write_json_file(out / "config.json", to_json(cfg));

  SweepResult result;
  if (jobs > 1) {
    result = lambda_sweep_processes(std::filesystem::read_symlink("/proc/self/exe"), out / "config.json", {},
                                    lambda_values, seeds, out, jobs);
  } else {
    std::vector<Checkpoint> ckpts;
    for (const auto& p : cfg.teacher_checkpoints) ckpts.push_back(load_checkpoint(p));
    result = lambda_sweep(cfg, ckpts, lambda_values, seeds, out);
  }
  write_sweep_csv(result, out / "sweep.csv");
  write_sweep_validation_csv(result, out / "sweep_validation.csv");
  write_sweep_svg({{series_name, result.aggregate}}, out / "sweep.svg");
  std::size_t failed = 0;
  for (const auto& r : result.rows) {
    if (!r.ok()) {
      ++failed;
      std::fprintf(stderr, "lambda %.3f seed %llu failed: %s\n", r.lambda, static_cast<unsigned long long>(r.seed),
                   r.error.c_str());
    }
  }
  for (const auto& [l, s] : result.aggregate) {
    std::printf("lambda %.3f: %.2f +- %.2f %% (%zu runs)\n", l, 100.0 * s.mean, 100.0 * s.std, s.n);
  }
  if (!result.aggregate.empty()) std::printf("best lambda (validation): %.3f\n", result.best_lambda());
  return failed == 0 ? 0 : 1;
}

int run_export(const std::string& checkpoint, const std::string& data, const std::string& out) {
  if (out.empty()) throw ConfigError("--out is required");
  const Checkpoint ckpt = load_checkpoint(checkpoint);
  const Manifest m = manifest_for(ckpt, data);
  export_embeddings(ckpt, m, out);
  std::printf("wrote %zu embeddings to %s\n", m.records.size(), out.c_str());
  return 0;
}

void add_common(CLI::App* cmd, Common& c, bool seeds) {
  cmd->add_option("--config", c.config, "JSON config file");
  cmd->add_option("--out", c.out, "output directory");
  cmd->add_option("--set", c.overrides, "override a config field, key.path=value (repeatable)");
  cmd->add_option_function<std::uint64_t>("--seed", [&c](const std::uint64_t& s) {
    c.seed = s;
    c.seed_given = true;
  }, "random seed");
  if (seeds) cmd->add_option("--seeds", c.seeds, "comma-separated seed list; results reported as mean +- std");
}

}  // namespace

int run_cli(int argc, char** argv) {
  CLI::App app{"City-informed acoustic scene classification: data, three training stages, evaluation"};
  app.require_subcommand(1);
  Common common;
  std::vector<std::string> teachers;
  std::string city_model, checkpoint, compare, data, split = "test", lambdas, series = "reference_cnn";
  std::optional<double> lambda;
  int jobs = 1;
  bool baseline = false;

  auto* synth = app.add_subcommand("synth", "generate a synthetic multi-city corpus");
  add_common(synth, common, false);

  auto* stage1 = app.add_subcommand("stage1", "train the city classifier");
  add_common(stage1, common, true);

  auto* stage2 = app.add_subcommand("stage2", "train a scene classifier on frozen city features");
  add_common(stage2, common, true);
  stage2->add_option("--city-model", city_model, "stage-1 checkpoint");

  auto* stage3 = app.add_subcommand("stage3", "distil city-to-scene teachers into a scene model");
  add_common(stage3, common, true);
  stage3->add_option("--teachers", teachers, "stage-2 teacher checkpoints (repeatable)");
  stage3->add_option("--lambda", lambda, "weight of the label loss");
  stage3->add_flag("--baseline", baseline, "train without teachers (reference model)");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint; --compare adds a class-wise report");
  eval->add_option("--checkpoint", checkpoint, "checkpoint to evaluate")->required();
  eval->add_option("--compare", compare, "baseline checkpoint for a class-wise comparison");
  eval->add_option("--data", data, "dataset directory (default: the one in the checkpoint)");
  eval->add_option("--split", split, "train, val or test");
  eval->add_option("--out", common.out, "directory for metrics.json and class-wise tables");

  auto* sweep = app.add_subcommand("sweep", "stage 3 over a grid of lambda values and seeds");
  add_common(sweep, common, true);
  sweep->add_option("--teachers", teachers, "stage-2 teacher checkpoints (repeatable)");
  sweep->add_option("--lambdas", lambdas, "start:stop:step (default 0.1:0.9:0.1)");
  sweep->add_option("--jobs", jobs, "parallel child processes")->check(CLI::PositiveNumber);
  sweep->add_option("--name", series, "series name in the plot");

  auto* exp = app.add_subcommand("export-embeddings", "write frozen-encoder embeddings as CSV");
  exp->add_option("--checkpoint", checkpoint, "teacher checkpoint")->required();
  exp->add_option("--data", data, "dataset directory (default: the one in the checkpoint)");
  exp->add_option("--out", common.out, "output CSV path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::fputs(app.help().c_str(), stderr);
    return 2;
  }

  try {
    if (*synth) return run_synth(common);
    if (*stage1) return run_stage_cmd(1, common, {}, {}, std::nullopt, false);
    if (*stage2) return run_stage_cmd(2, common, {}, city_model, std::nullopt, false);
    if (*stage3) return run_stage_cmd(3, common, teachers, {}, lambda, baseline);
    if (*eval) return run_eval(checkpoint, compare, data, split, common.out);
    if (*sweep) return run_sweep_cmd(common, teachers, lambdas, jobs, series);
    if (*exp) return run_export(checkpoint, data, common.out);
  } catch (const std::exception& e) {
    std::string msg = e.what();
    for (auto& ch : msg) {
      if (ch == '\n') ch = ' ';
    }
    std::fprintf(stderr, "error: %s\n", msg.c_str());
    return 1;
  }
  return 2;
}

}  // namespace city2scene
