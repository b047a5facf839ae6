#include "city2scene/schedule.hpp"

#include <cmath>
#include <numbers>

#include "city2scene/error.hpp"

namespace city2scene {

std::string to_string(SchedulerKind kind) {
  return kind == SchedulerKind::cosine_warm_restarts ? "cosine_warm_restarts" : "warmup_linear_down";
}

void SchedulerSpec::validate(int max_epochs) const {
  std::vector<std::string> bad;
  if (!(peak_lr > 0.0)) bad.emplace_back("scheduler.peak_lr must be > 0");
  if (!(min_lr >= 0.0) || min_lr > peak_lr) bad.emplace_back("scheduler.min_lr must be in [0, peak_lr]");
  if (kind == SchedulerKind::cosine_warm_restarts) {
    if (t0 < 1) bad.emplace_back("scheduler.T0 must be >= 1");
    if (t_mult < 1) bad.emplace_back("scheduler.T_mult must be >= 1");
  } else {
    if (warmup_epochs < 0 || down_epochs < 1) bad.emplace_back("scheduler.warmup_epochs >= 0 and down_epochs >= 1 required");
    if (warmup_epochs + down_epochs != max_epochs) {
      bad.push_back("scheduler.warmup_epochs + down_epochs (" + std::to_string(warmup_epochs + down_epochs) +
                    ") must equal max_epochs (" + std::to_string(max_epochs) + ")");
    }
  }
  if (!bad.empty()) {
    std::string msg = "invalid scheduler config:";
    for (const auto& b : bad) msg += " " + b + ";";
    throw ConfigError(msg);
  }
}

void to_json(nlohmann::json& j, const SchedulerSpec& s) {
  j = nlohmann::json{{"kind", to_string(s.kind)},        {"peak_lr", s.peak_lr},
                     {"min_lr", s.min_lr},               {"T0", s.t0},
                     {"T_mult", s.t_mult},               {"warmup_epochs", s.warmup_epochs},
                     {"down_epochs", s.down_epochs}};
}

void from_json(const nlohmann::json& j, SchedulerSpec& s) {
  SchedulerSpec d;
  const std::string kind = j.value("kind", to_string(d.kind));
  if (kind == "cosine_warm_restarts") {
    s.kind = SchedulerKind::cosine_warm_restarts;
  } else if (kind == "warmup_linear_down") {
    s.kind = SchedulerKind::warmup_linear_down;
  } else {
    throw ConfigError("scheduler.kind must be cosine_warm_restarts or warmup_linear_down, got '" + kind + "'");
  }
  s.peak_lr = j.value("peak_lr", d.peak_lr);
  s.min_lr = j.value("min_lr", d.min_lr);
  s.t0 = j.value("T0", d.t0);
  s.t_mult = j.value("T_mult", d.t_mult);
  s.warmup_epochs = j.value("warmup_epochs", d.warmup_epochs);
  s.down_epochs = j.value("down_epochs", d.down_epochs);
}

double lr_cosine_warm_restarts(double epoch, const SchedulerSpec& spec) {
  if (epoch < 0.0) epoch = 0.0;
  double start = 0.0;
  double length = spec.t0;
  while (epoch >= start + length) {
    start += length;
    length *= spec.t_mult;
  }
  const double t_cur = epoch - start;
  return spec.min_lr + 0.5 * (spec.peak_lr - spec.min_lr) * (1.0 + std::cos(std::numbers::pi * t_cur / length));
}

double lr_warmup_linear_down(double epoch, const SchedulerSpec& spec) {
  if (epoch < 0.0) epoch = 0.0;
  if (epoch < spec.warmup_epochs) return spec.peak_lr * epoch / spec.warmup_epochs;
  const double into = epoch - spec.warmup_epochs;
  if (into >= spec.down_epochs) return spec.min_lr;
  return spec.peak_lr + (spec.min_lr - spec.peak_lr) * into / spec.down_epochs;
}

double learning_rate(double epoch, const SchedulerSpec& spec) {
  return spec.kind == SchedulerKind::cosine_warm_restarts ? lr_cosine_warm_restarts(epoch, spec)
                                                          : lr_warmup_linear_down(epoch, spec);
}

}  // namespace city2scene
