#include "city2scene/sweep.hpp"

#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

#include "city2scene/error.hpp"

extern char** environ;

namespace city2scene {

namespace {

double snap(double v) { return std::round(v * 1e9) / 1e9; }

std::string format_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(cur);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

double parse_double(const std::string& s, const std::string& what) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("cannot parse " + what + " '" + s + "'");
  }
}

}  // namespace

SweepStat mean_std(std::span<const double> values) {
  SweepStat s;
  s.n = values.size();
  if (values.empty()) return s;
  double sum = 0.0;
  for (double v : values) sum += v;
  s.mean = sum / static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  // Keep the mean inside [min, max] despite rounding.
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  s.mean = std::clamp(s.mean, *lo, *hi);
  return s;
}

void SweepResult::recompute() {
  std::map<double, std::vector<double>> test, val;
  for (const auto& r : rows) {
    if (!r.ok()) continue;
    test[r.lambda].push_back(r.accuracy);
    if (r.val_accuracy >= 0.0) val[r.lambda].push_back(r.val_accuracy);
  }
  aggregate.clear();
  val_aggregate.clear();
  for (const auto& [l, v] : test) aggregate[l] = mean_std(v);
  for (const auto& [l, v] : val) val_aggregate[l] = mean_std(v);
}

double SweepResult::best_lambda() const {
  const auto& source = val_aggregate.empty() ? aggregate : val_aggregate;
  if (source.empty()) throw Error("sweep has no successful runs");
  auto best = source.begin();
  for (auto it = source.begin(); it != source.end(); ++it) {
    if (it->second.mean > best->second.mean) best = it;
  }
  return best->first;
}

std::vector<double> parse_lambda_range(const std::string& spec) {
  const auto parts = split(spec, ':');
  if (parts.size() != 3) throw ConfigError("--lambdas expects start:stop:step, got '" + spec + "'");
  const double start = parse_double(parts[0], "lambda start");
  const double stop = parse_double(parts[1], "lambda stop");
  const double step = parse_double(parts[2], "lambda step");
  if (!(step > 0.0)) throw ConfigError("lambda step must be > 0");
  if (start > stop) throw ConfigError("lambda start must not exceed stop");
  if (start < 0.0 || stop > 1.0) throw ConfigError("lambda values must lie in [0, 1]");
  std::vector<double> out;
  const auto n = static_cast<long>(std::floor((stop - start) / step + 1e-9));
  for (long i = 0; i <= n; ++i) out.push_back(snap(start + static_cast<double>(i) * step));
  return out;
}

std::vector<std::uint64_t> parse_seed_list(const std::string& spec) {
  std::vector<std::uint64_t> seeds;
  for (const auto& part : split(spec, ',')) {
    if (part.empty()) throw ConfigError("empty entry in seed list '" + spec + "'");
    try {
      std::size_t used = 0;
      const auto v = std::stoull(part, &used);
      if (used != part.size()) throw std::invalid_argument(part);
      seeds.push_back(v);
    } catch (const std::exception&) {
      throw ConfigError("cannot parse seed '" + part + "'");
    }
  }
  if (seeds.empty()) throw ConfigError("seed list is empty");
  return seeds;
}

SweepResult run_sweep(std::span<const double> lambdas, std::span<const std::uint64_t> seeds, const SweepRunner& runner) {
  if (seeds.empty()) throw ConfigError("sweep needs at least one seed");
  for (double l : lambdas) {
    if (!(l >= 0.0 && l <= 1.0)) throw ConfigError("lambda values must lie in [0, 1]");
  }
  SweepResult result;
  for (double l : lambdas) {
    for (auto s : seeds) {
      SweepRow row;
      try {
        row = runner(l, s);
      } catch (const std::exception& e) {
        row.error = e.what();
        row.accuracy = std::numeric_limits<double>::quiet_NaN();
      }
      row.lambda = l;
      row.seed = s;
      result.rows.push_back(row);
    }
  }
  result.recompute();
  return result;
}

std::string run_dir_name(double lambda, std::uint64_t seed) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "lambda_%.3f_seed_%llu", lambda, static_cast<unsigned long long>(seed));
  return buf;
}

SweepResult lambda_sweep(const StageConfig& base_cfg, std::span<const Checkpoint> teachers,
                         std::span<const double> lambdas, std::span<const std::uint64_t> seeds,
                         const std::filesystem::path& out_dir, FeatureStore* features) {
  const Manifest manifest = load_stage_manifest(base_cfg);
  std::optional<FeatureStore> local;
  if (!features) {
    local.emplace(base_cfg.preprocessing, base_cfg.feature_cache_dir);
    features = &*local;
  }
  SweepResult result = run_sweep(lambdas, seeds, [&](double lambda, std::uint64_t seed) {
    StageConfig cfg = base_cfg;
    cfg.stage = 3;
    cfg.kd.lambda = lambda;
    cfg.seed = seed;
    cfg.validate();
    const StageResult r = train_stage3(cfg, teachers, manifest, features);
    if (!out_dir.empty()) write_run_dir(out_dir / run_dir_name(lambda, seed), cfg, r);
    SweepRow row;
    row.accuracy = r.test_metrics ? r.test_metrics->overall_accuracy : std::numeric_limits<double>::quiet_NaN();
    if (!r.test_metrics) row.error = "no test split";
    if (r.val_metrics) row.val_accuracy = r.val_metrics->overall_accuracy;
    return row;
  });
  return result;
}

SweepResult lambda_sweep_processes(const std::filesystem::path& exe, const std::filesystem::path& config,
                                   std::span<const std::string> extra_args, std::span<const double> lambdas,
                                   std::span<const std::uint64_t> seeds, const std::filesystem::path& out_dir,
                                   int jobs) {
  if (jobs < 1) throw ConfigError("--jobs must be >= 1");
  if (seeds.empty()) throw ConfigError("sweep needs at least one seed");
  struct Task {
    double lambda = 0.0;
    std::uint64_t seed = 0;
    std::filesystem::path dir;
    pid_t pid = -1;
    int status = -1;
    std::string spawn_error;
  };
  std::vector<Task> tasks;
  for (double l : lambdas) {
    if (!(l >= 0.0 && l <= 1.0)) throw ConfigError("lambda values must lie in [0, 1]");
    for (auto s : seeds) {
      Task t;
      t.lambda = l;
      t.seed = s;
      t.dir = out_dir / run_dir_name(l, s);
      tasks.push_back(std::move(t));
    }
  }

  std::size_t next = 0, running = 0;
  auto launch = [&](Task& t) {
    std::vector<std::string> args = {exe.string(), "stage3", "--config", config.string(), "--lambda",
                                     format_number(t.lambda), "--seed", std::to_string(t.seed), "--out",
                                     t.dir.string()};
    args.insert(args.end(), extra_args.begin(), extra_args.end());
    std::vector<char*> argv;
    for (auto& a : args) argv.push_back(a.data());
    argv.push_back(nullptr);
    const int rc = posix_spawn(&t.pid, argv[0], nullptr, nullptr, argv.data(), environ);
    if (rc != 0) {
      t.spawn_error = std::string("spawn failed: ") + std::strerror(rc);
      t.pid = -1;
      return false;
    }
    return true;
  };

  while (next < tasks.size() || running > 0) {
    while (running < static_cast<std::size_t>(jobs) && next < tasks.size()) {
      if (launch(tasks[next])) ++running;
      ++next;
    }
    if (running == 0) continue;
    int status = 0;
    const pid_t done = waitpid(-1, &status, 0);
    if (done < 0) {
      if (errno == EINTR) continue;
      break;
    }
    for (auto& t : tasks) {
      if (t.pid == done) {
        t.status = status;
        --running;
      }
    }
  }

  SweepResult result;
  for (const auto& t : tasks) {
    SweepRow row;
    row.lambda = t.lambda;
    row.seed = t.seed;
    row.accuracy = std::numeric_limits<double>::quiet_NaN();
    if (!t.spawn_error.empty()) {
      row.error = t.spawn_error;
    } else if (!WIFEXITED(t.status) || WEXITSTATUS(t.status) != 0) {
      row.error = "run exited with status " + std::to_string(WIFEXITED(t.status) ? WEXITSTATUS(t.status) : -1);
    } else {
      try {
        std::ifstream in(t.dir / "metrics.json");
        if (!in) throw IoError("missing metrics.json");
        const auto j = nlohmann::json::parse(in);
        row.accuracy = j.at("overall").get<double>();
        if (j.contains("summary") && j["summary"].contains("val")) {
          row.val_accuracy = j["summary"]["val"].at("overall").get<double>();
        }
      } catch (const std::exception& e) {
        row.error = std::string("cannot read run metrics: ") + e.what();
      }
    }
    result.rows.push_back(row);
  }
  result.recompute();
  return result;
}

void write_sweep_csv(const SweepResult& result, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "lambda,seed,accuracy\n";
  for (const auto& r : result.rows) {
    out << format_number(r.lambda) << ',' << r.seed << ',' << (r.ok() ? format_number(r.accuracy) : "") << '\n';
  }
  if (!out) throw IoError("write failed for " + path.string());
}

void write_sweep_validation_csv(const SweepResult& result, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "lambda,seed,val_accuracy\n";
  for (const auto& r : result.rows) {
    out << format_number(r.lambda) << ',' << r.seed << ','
        << (r.ok() && r.val_accuracy >= 0.0 ? format_number(r.val_accuracy) : "") << '\n';
  }
}

SweepResult parse_sweep_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "lambda,seed,accuracy") {
    throw ParseError(path.string() + ":1: expected header lambda,seed,accuracy");
  }
  SweepResult result;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = split(line, ',');
    if (f.size() != 3) throw ParseError(path.string() + ":" + std::to_string(lineno) + ": expected 3 columns");
    SweepRow row;
    try {
      row.lambda = parse_double(f[0], "lambda");
      row.seed = std::stoull(f[1]);
      if (f[2].empty()) {
        row.accuracy = std::numeric_limits<double>::quiet_NaN();
        row.error = "failed";
      } else {
        row.accuracy = parse_double(f[2], "accuracy");
      }
    } catch (const std::exception& e) {
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    result.rows.push_back(row);
  }
  result.recompute();
  return result;
}

std::string sweep_svg(const std::map<std::string, std::map<double, SweepStat>>& series) {
  constexpr double W = 640, H = 400, L = 60, R = 150, T = 20, B = 50;
  double lo = 1.0, hi = 0.0, xmin = 1.0, xmax = 0.0;
  for (const auto& [name, points] : series) {
    for (const auto& [l, s] : points) {
      lo = std::min(lo, s.mean);
      hi = std::max(hi, s.mean);
      xmin = std::min(xmin, l);
      xmax = std::max(xmax, l);
    }
  }
  if (lo > hi) lo = 0.0, hi = 1.0;
  if (xmin >= xmax) xmin = 0.0, xmax = 1.0;
  const double pad = std::max(0.01, (hi - lo) * 0.1);
  lo = std::max(0.0, lo - pad);
  hi = std::min(1.0, hi + pad);
  if (hi <= lo) hi = lo + 0.01;
  auto px = [&](double l) { return L + (l - xmin) / (xmax - xmin) * (W - L - R); };
  auto py = [&](double a) { return H - B - (a - lo) / (hi - lo) * (H - T - B); };

  static const char* colours[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"};
  std::ostringstream svg;
  svg.setf(std::ios::fixed);
  svg.precision(1);
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
      << "\" stroke=\"black\"/>\n";
  svg << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double a = lo + (hi - lo) * i / 4.0;
    svg << "<text x=\"" << L - 8 << "\" y=\"" << py(a) + 4 << "\" font-size=\"11\" text-anchor=\"end\">" << a * 100.0
        << "</text>\n";
    const double l = xmin + (xmax - xmin) * i / 4.0;
    svg.precision(2);
    svg << "<text x=\"" << px(l) << "\" y=\"" << H - B + 16 << "\" font-size=\"11\" text-anchor=\"middle\">" << l
        << "</text>\n";
    svg.precision(1);
  }
  svg << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12 << "\" font-size=\"12\" text-anchor=\"middle\">lambda</text>\n";
  svg << "<text x=\"16\" y=\"" << (T + H - B) / 2 << "\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
      << (T + H - B) / 2 << ")\">accuracy (%)</text>\n";
  std::size_t k = 0;
  for (const auto& [name, points] : series) {
    const char* colour = colours[k % std::size(colours)];
    svg << "<polyline fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"2\" points=\"";
    for (const auto& [l, s] : points) svg << px(l) << ',' << py(s.mean) << ' ';
    svg << "\"/>\n";
    for (const auto& [l, s] : points) {
      svg << "<circle cx=\"" << px(l) << "\" cy=\"" << py(s.mean) << "\" r=\"3\" fill=\"" << colour << "\"/>\n";
    }
    svg << "<text x=\"" << W - R + 10 << "\" y=\"" << T + 16 * (k + 1) << "\" font-size=\"12\" fill=\"" << colour
        << "\">" << name << "</text>\n";
    ++k;
  }
  svg << "</svg>\n";
  return svg.str();
}

void write_sweep_svg(const std::map<std::string, std::map<double, SweepStat>>& series,
                     const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << sweep_svg(series);
}

}  // namespace city2scene
