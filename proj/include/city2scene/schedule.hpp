#pragma once

#include <string>

#include <nlohmann/json.hpp>

namespace city2scene {

enum class SchedulerKind { cosine_warm_restarts, warmup_linear_down };

struct SchedulerSpec {
  SchedulerKind kind = SchedulerKind::cosine_warm_restarts;
  double peak_lr = 0.04;
  double min_lr = 0.0;
  int t0 = 10;
  int t_mult = 2;
  int warmup_epochs = 0;
  int down_epochs = 0;

  /// Throws ConfigError; warmup + down must equal max_epochs for warmup_linear_down.
  void validate(int max_epochs) const;
};

void to_json(nlohmann::json& j, const SchedulerSpec& s);
void from_json(const nlohmann::json& j, SchedulerSpec& s);
std::string to_string(SchedulerKind kind);

/// min + (peak - min)(1 + cos(pi * t_cur / t_i)) / 2, cycle i lasting t0 * t_mult^i epochs.
double lr_cosine_warm_restarts(double epoch, const SchedulerSpec& spec);

/// Linear 0 -> peak over warmup_epochs, then peak -> min_lr over down_epochs.
double lr_warmup_linear_down(double epoch, const SchedulerSpec& spec);

double learning_rate(double epoch, const SchedulerSpec& spec);

}  // namespace city2scene
