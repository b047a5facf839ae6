#pragma once

#include <span>
#include <string>
#include <vector>

#include "city2scene/augment.hpp"

namespace city2scene {

enum class LogitKind { city, scene, city_to_scene, ensemble };

/// Row-major (rows x classes) raw class scores.
struct Logits {
  std::vector<double> values;
  std::size_t rows = 0;
  std::size_t classes = 0;
  LogitKind kind = LogitKind::scene;

  Logits() = default;
  Logits(std::size_t r, std::size_t k, LogitKind kd = LogitKind::scene) : values(r * k, 0.0), rows(r), classes(k), kind(kd) {}
  static Logits row(std::vector<double> z, LogitKind kd = LogitKind::scene);

  std::span<const double> row_span(std::size_t i) const { return {values.data() + i * classes, classes}; }
  std::span<double> row_span(std::size_t i) { return {values.data() + i * classes, classes}; }
};

enum class KlDirection {
  /// KL(teacher || student): the teacher's softened distribution is the reference.
  teacher_reference,
  /// KL(student || teacher): literal argument order of the written objective.
  student_reference,
};

KlDirection kl_direction_from_string(const std::string& s);
std::string to_string(KlDirection d);

struct KDConfig {
  double temperature = 2.0;
  double lambda = 0.5;
  KlDirection kl_direction = KlDirection::teacher_reference;

  void validate() const;
};

/// Scalar loss and its gradient w.r.t. the (student) logits, batch-mean reduced.
struct LossValue {
  double value = 0.0;
  Logits grad;
};

/// softmax(z / temperature) with max subtraction. Throws on non-finite input.
std::vector<double> softmax(std::span<const double> z, double temperature = 1.0);
/// Row-wise softmax.
Logits softmax_rows(const Logits& z, double temperature = 1.0);

/// Mean over rows of -log softmax(z)[target].
LossValue cross_entropy(const Logits& z, std::span<const std::size_t> targets);
/// Mean over rows of -sum_k t_k log softmax(z)_k.
LossValue cross_entropy(const Logits& z, std::span<const SoftLabel> targets);

/// temperature^2 * KL between softened teacher and student distributions,
/// batch mean. Teacher logits carry no gradient.
LossValue kd_loss(const Logits& student, const Logits& teacher, double temperature,
                  KlDirection direction = KlDirection::teacher_reference);

/// lambda * scene + (1 - lambda) * kd. Throws for lambda outside [0, 1].
double combined_loss(double scene_loss, double kd, double lambda);
LossValue combined_loss(const LossValue& scene, const LossValue& kd, double lambda);

/// Elementwise mean over teachers. Identical copies average to themselves exactly.
Logits ensemble_logits(std::span<const Logits> teacher_logits);

}  // namespace city2scene
