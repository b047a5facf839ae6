#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "city2scene/error.hpp"
#include "city2scene/schedule.hpp"

using namespace city2scene;

namespace {

// Closed form: cycle i starts at T0 (m^i - 1) / (m - 1).
double oracle_cosine(double epoch, double t0, double m, double peak, double lo) {
  double i = 0.0;
  if (m == 1.0) {
    i = std::floor(epoch / t0);
  } else {
    i = std::floor(std::log(epoch * (m - 1.0) / t0 + 1.0) / std::log(m));
  }
  const double start = m == 1.0 ? i * t0 : t0 * (std::pow(m, i) - 1.0) / (m - 1.0);
  const double len = t0 * std::pow(m, i);
  return lo + (peak - lo) * (1.0 + std::cos(std::numbers::pi * (epoch - start) / len)) / 2.0;
}

SchedulerSpec cosine(double peak, int t0, int mult) {
  SchedulerSpec s;
  s.peak_lr = peak;
  s.t0 = t0;
  s.t_mult = mult;
  return s;
}

}  // namespace

TEST_CASE("cosine warm restarts at cycle landmarks") {
  const auto s = cosine(0.04, 10, 2);
  CHECK(std::abs(lr_cosine_warm_restarts(0, s) - 0.04) < 1e-12);
  CHECK(std::abs(lr_cosine_warm_restarts(5, s) - 0.02) < 1e-12);
  CHECK(std::abs(lr_cosine_warm_restarts(10, s) - 0.04) < 1e-12);
  CHECK(std::abs(lr_cosine_warm_restarts(20, s) - 0.02) < 1e-12);
  CHECK(std::abs(lr_cosine_warm_restarts(30, s) - 0.04) < 1e-12);
}

TEST_CASE("cosine warm restarts matches the closed form") {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> e(0.0, 300.0);
  for (int mult : {1, 2, 3}) {
    const auto s = cosine(0.003, 7, mult);
    for (int i = 0; i < 200; ++i) {
      const double epoch = e(rng);
      CHECK(lr_cosine_warm_restarts(epoch, s) == doctest::Approx(oracle_cosine(epoch, 7, mult, 0.003, 0.0)).epsilon(1e-9));
    }
  }
}

TEST_CASE("cosine stays within [min, peak] and honours min_lr") {
  auto s = cosine(0.01, 5, 2);
  s.min_lr = 0.001;
  for (double epoch = 0.0; epoch < 100.0; epoch += 0.37) {
    const double lr = lr_cosine_warm_restarts(epoch, s);
    CHECK(lr <= 0.01 + 1e-15);
    CHECK(lr >= 0.001 - 1e-15);
  }
}

TEST_CASE("warmup then linear decay") {
  SchedulerSpec s;
  s.kind = SchedulerKind::warmup_linear_down;
  s.peak_lr = 1e-5;
  s.warmup_epochs = 3;
  s.down_epochs = 10;
  CHECK(std::abs(lr_warmup_linear_down(0, s) - 0.0) < 1e-12);
  CHECK(std::abs(lr_warmup_linear_down(3, s) - 1e-5) < 1e-12);
  CHECK(std::abs(lr_warmup_linear_down(8, s) - 5e-6) < 1e-12);
  CHECK(std::abs(lr_warmup_linear_down(1.5, s) - 5e-6) < 1e-12);
  CHECK(std::abs(lr_warmup_linear_down(13, s) - 0.0) < 1e-12);
  CHECK(learning_rate(8, s) == lr_warmup_linear_down(8, s));
}

TEST_CASE("warmup of zero epochs starts at peak") {
  SchedulerSpec s;
  s.kind = SchedulerKind::warmup_linear_down;
  s.peak_lr = 0.1;
  s.warmup_epochs = 0;
  s.down_epochs = 4;
  CHECK(lr_warmup_linear_down(0, s) == doctest::Approx(0.1));
  CHECK(lr_warmup_linear_down(2, s) == doctest::Approx(0.05));
}

TEST_CASE("scheduler validation") {
  SchedulerSpec s;
  s.kind = SchedulerKind::warmup_linear_down;
  s.warmup_epochs = 3;
  s.down_epochs = 10;
  CHECK_NOTHROW(s.validate(13));
  CHECK_THROWS_AS(s.validate(30), ConfigError);
  auto c = cosine(0.04, 0, 2);
  CHECK_THROWS_AS(c.validate(30), ConfigError);
  c = cosine(-1.0, 10, 2);
  CHECK_THROWS_AS(c.validate(30), ConfigError);
}

TEST_CASE("scheduler json round trip") {
  SchedulerSpec s = cosine(0.02, 4, 3);
  s.min_lr = 1e-4;
  nlohmann::json j = s;
  CHECK(j["T0"] == 4);
  const auto back = j.get<SchedulerSpec>();
  CHECK(back.t0 == 4);
  CHECK(back.t_mult == 3);
  CHECK(back.min_lr == 1e-4);
  CHECK(back.kind == SchedulerKind::cosine_warm_restarts);
}
