#include "city2scene/losses.hpp"

#include <algorithm>
#include <cmath>

#include "city2scene/error.hpp"

namespace city2scene {

Logits Logits::row(std::vector<double> z, LogitKind kd) {
  Logits l;
  l.rows = 1;
  l.classes = z.size();
  l.values = std::move(z);
  l.kind = kd;
  return l;
}

KlDirection kl_direction_from_string(const std::string& s) {
  if (s == "teacher_reference") return KlDirection::teacher_reference;
  if (s == "student_reference") return KlDirection::student_reference;
  throw ConfigError("kl_direction must be 'teacher_reference' or 'student_reference', got '" + s + "'");
}

std::string to_string(KlDirection d) {
  return d == KlDirection::teacher_reference ? "teacher_reference" : "student_reference";
}

void KDConfig::validate() const {
  std::string bad;
  if (!(temperature > 0.0)) bad = "kd.temperature must be > 0";
  if (!(lambda >= 0.0 && lambda <= 1.0)) bad += (bad.empty() ? "" : "; ") + std::string("kd.lambda must be in [0, 1]");
  if (!bad.empty()) throw ConfigError(bad);
}

namespace {

void log_softmax_into(std::span<const double> z, double temperature, std::span<double> out) {
  double mx = -INFINITY;
  for (double v : z) {
    if (!std::isfinite(v)) throw Error("softmax: non-finite logit");
    mx = std::max(mx, v / temperature);
  }
  double sum = 0.0;
  for (double v : z) sum += std::exp(v / temperature - mx);
  const double log_z = mx + std::log(sum);
  for (std::size_t k = 0; k < z.size(); ++k) out[k] = z[k] / temperature - log_z;
}

void check_temperature(double t) {
  if (!(t > 0.0)) throw Error("temperature must be > 0");
}

}  // namespace

std::vector<double> softmax(std::span<const double> z, double temperature) {
  check_temperature(temperature);
  if (z.empty()) return {};
  double mx = -INFINITY;
  for (double v : z) {
    if (!std::isfinite(v)) throw Error("softmax: non-finite logit");
    mx = std::max(mx, v / temperature);
  }
  std::vector<double> p(z.size());
  double sum = 0.0;
  for (std::size_t k = 0; k < z.size(); ++k) {
    p[k] = std::exp(z[k] / temperature - mx);
    sum += p[k];
  }
  for (double& v : p) v /= sum;
  return p;
}

Logits softmax_rows(const Logits& z, double temperature) {
  Logits p(z.rows, z.classes, z.kind);
  for (std::size_t i = 0; i < z.rows; ++i) {
    const auto s = softmax(z.row_span(i), temperature);
    std::copy(s.begin(), s.end(), p.row_span(i).begin());
  }
  return p;
}

LossValue cross_entropy(const Logits& z, std::span<const std::size_t> targets) {
  if (targets.size() != z.rows) throw ShapeError("cross_entropy: target count does not match batch");
  LossValue out{0.0, Logits(z.rows, z.classes, z.kind)};
  if (z.rows == 0) return out;
  std::vector<double> logp(z.classes);
  const double inv_n = 1.0 / static_cast<double>(z.rows);
  for (std::size_t i = 0; i < z.rows; ++i) {
    if (targets[i] >= z.classes) {
      throw Error("cross_entropy: target index " + std::to_string(targets[i]) + " out of range for " +
                  std::to_string(z.classes) + " classes");
    }
    log_softmax_into(z.row_span(i), 1.0, logp);
    out.value -= logp[targets[i]];
    auto g = out.grad.row_span(i);
    for (std::size_t k = 0; k < z.classes; ++k) g[k] = std::exp(logp[k]) * inv_n;
    g[targets[i]] -= inv_n;
  }
  out.value *= inv_n;
  return out;
}

LossValue cross_entropy(const Logits& z, std::span<const SoftLabel> targets) {
  if (targets.size() != z.rows) throw ShapeError("cross_entropy: target count does not match batch");
  LossValue out{0.0, Logits(z.rows, z.classes, z.kind)};
  if (z.rows == 0) return out;
  std::vector<double> logp(z.classes);
  const double inv_n = 1.0 / static_cast<double>(z.rows);
  for (std::size_t i = 0; i < z.rows; ++i) {
    const auto& t = targets[i].distribution;
    if (t.size() != z.classes) throw Error("cross_entropy: soft label has wrong number of classes");
    log_softmax_into(z.row_span(i), 1.0, logp);
    double mass = 0.0;
    auto g = out.grad.row_span(i);
    for (std::size_t k = 0; k < z.classes; ++k) {
      if (t[k] != 0.0) out.value -= t[k] * logp[k];
      mass += t[k];
    }
    for (std::size_t k = 0; k < z.classes; ++k) g[k] = (mass * std::exp(logp[k]) - t[k]) * inv_n;
  }
  out.value *= inv_n;
  return out;
}

LossValue kd_loss(const Logits& student, const Logits& teacher, double temperature, KlDirection direction) {
  check_temperature(temperature);
  if (student.rows != teacher.rows || student.classes != teacher.classes) {
    throw ShapeError("kd_loss: student/teacher logits shape mismatch");
  }
  LossValue out{0.0, Logits(student.rows, student.classes, student.kind)};
  if (student.rows == 0) return out;
  const std::size_t k = student.classes;
  std::vector<double> log_s(k), log_t(k);
  const double inv_n = 1.0 / static_cast<double>(student.rows);
  const double t2 = temperature * temperature;
  for (std::size_t i = 0; i < student.rows; ++i) {
    log_softmax_into(student.row_span(i), temperature, log_s);
    log_softmax_into(teacher.row_span(i), temperature, log_t);
    auto g = out.grad.row_span(i);
    double kl = 0.0;
    if (direction == KlDirection::teacher_reference) {
      for (std::size_t c = 0; c < k; ++c) {
        const double pt = std::exp(log_t[c]);
        if (pt > 0.0) kl += pt * (log_t[c] - log_s[c]);
      }
      // d/dz_s [t^2 KL(p_t || p_s)] = t (p_s - p_t)
      for (std::size_t c = 0; c < k; ++c) g[c] = temperature * (std::exp(log_s[c]) - std::exp(log_t[c])) * inv_n;
    } else {
      for (std::size_t c = 0; c < k; ++c) {
        const double ps = std::exp(log_s[c]);
        if (ps > 0.0) kl += ps * (log_s[c] - log_t[c]);
      }
      // d/dz_s [t^2 KL(p_s || p_t)] = t p_s (log p_s - log p_t - KL)
      for (std::size_t c = 0; c < k; ++c) {
        g[c] = temperature * std::exp(log_s[c]) * (log_s[c] - log_t[c] - kl) * inv_n;
      }
    }
    out.value += t2 * std::max(kl, 0.0);
  }
  out.value *= inv_n;
  return out;
}

double combined_loss(double scene_loss, double kd, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw Error("combined_loss: lambda must be in [0, 1]");
  return lambda * scene_loss + (1.0 - lambda) * kd;
}

LossValue combined_loss(const LossValue& scene, const LossValue& kd, double lambda) {
  if (scene.grad.values.size() != kd.grad.values.size()) throw ShapeError("combined_loss: gradient shape mismatch");
  LossValue out{combined_loss(scene.value, kd.value, lambda), scene.grad};
  for (std::size_t i = 0; i < out.grad.values.size(); ++i) {
    out.grad.values[i] = lambda * scene.grad.values[i] + (1.0 - lambda) * kd.grad.values[i];
  }
  return out;
}

Logits ensemble_logits(std::span<const Logits> teacher_logits) {
  if (teacher_logits.empty()) throw Error("ensemble_logits: no teacher logits");
  const Logits& first = teacher_logits.front();
  for (const auto& l : teacher_logits) {
    if (l.rows != first.rows || l.classes != first.classes) {
      throw ShapeError("ensemble_logits: teachers disagree on shape (" + std::to_string(l.rows) + "x" +
                       std::to_string(l.classes) + " vs " + std::to_string(first.rows) + "x" +
                       std::to_string(first.classes) + ")");
    }
  }
  Logits out(first.rows, first.classes, LogitKind::ensemble);
  const double n = static_cast<double>(teacher_logits.size());
  for (std::size_t e = 0; e < out.values.size(); ++e) {
    double sum = 0.0;
    for (const auto& l : teacher_logits) sum += l.values[e];
    out.values[e] = sum / n;
  }
  return out;
}

}  // namespace city2scene
