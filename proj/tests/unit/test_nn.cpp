#include <doctest.h>

#include <cmath>
#include <random>

#include "city2scene/kernels.hpp"
#include "city2scene/nn.hpp"
#include "city2scene/rng.hpp"

using namespace city2scene;

namespace {

Tensor random_tensor(std::mt19937_64& rng, int n, int c, int h, int w) {
  std::normal_distribution<float> d(0.0f, 1.0f);
  Tensor t(n, c, h, w);
  for (auto& v : t.data) v = d(rng);
  return t;
}

std::vector<float> random_vec(std::mt19937_64& rng, std::size_t n) {
  std::normal_distribution<float> d(0.0f, 1.0f);
  std::vector<float> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

double dot(const Tensor& a, const std::vector<float>& r) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a.data[i]) * r[i];
  return s;
}

/// Checks a layer's input and parameter gradients of L = sum(y * r) against
/// central differences in double-accumulated float arithmetic.
void check_layer_gradients(nn::Layer& layer, Tensor x, std::mt19937_64& rng, double tol = 2e-2, float h = 1e-2f) {
  const Tensor y = layer.forward(x, true);
  const auto r = random_vec(rng, y.size());
  Tensor dy = y;
  std::copy(r.begin(), r.end(), dy.data.begin());
  std::vector<nn::Parameter*> params;
  layer.parameters(params);
  for (auto* p : params) p->zero_grad();
  const Tensor dx = layer.backward(dy);

  auto loss = [&] { return dot(layer.forward(x, true), r); };
  std::uniform_int_distribution<std::size_t> pick_x(0, x.size() - 1);
  for (int trial = 0; trial < 8 && dx.size() == x.size(); ++trial) {
    const std::size_t i = pick_x(rng);
    const float keep = x.data[i];
    x.data[i] = keep + h;
    const double up = loss();
    x.data[i] = keep - h;
    const double down = loss();
    x.data[i] = keep;
    const double num = (up - down) / (2.0 * h);
    CHECK(std::abs(num - dx.data[i]) <= tol * std::max(1.0, std::abs(num)));
  }
  for (auto* p : params) {
    std::uniform_int_distribution<std::size_t> pick(0, p->value.size() - 1);
    for (int trial = 0; trial < 6; ++trial) {
      const std::size_t i = pick(rng);
      const float keep = p->value[i];
      p->value[i] = keep + h;
      const double up = loss();
      p->value[i] = keep - h;
      const double down = loss();
      p->value[i] = keep;
      const double num = (up - down) / (2.0 * h);
      CHECK_MESSAGE(std::abs(num - p->grad[i]) <= tol * std::max(1.0, std::abs(num)), p->name << " numeric " << num << " analytic " << p->grad[i]);
    }
  }
}

}  // namespace

TEST_CASE("parallel gemm variants match the reference") {
  std::mt19937_64 rng(1);
  for (auto [m, n, k] : std::vector<std::array<int, 3>>{{1, 1, 1}, {7, 5, 3}, {33, 17, 65}, {64, 100, 31}}) {
    const auto a = random_vec(rng, static_cast<std::size_t>(m * k));
    const auto b = random_vec(rng, static_cast<std::size_t>(k * n));
    std::vector<float> ref(static_cast<std::size_t>(m * n)), got(ref.size());
    reference::gemm_nn(m, n, k, a.data(), b.data(), ref.data());
    kernels::gemm_nn(m, n, k, a.data(), b.data(), got.data(), false);
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(got[i] == doctest::Approx(ref[i]).epsilon(1e-4));

    // B^T stored as [n][k], A^T stored as [k][m].
    std::vector<float> bt(b.size()), at(a.size());
    for (int i = 0; i < k; ++i)
      for (int j = 0; j < n; ++j) bt[static_cast<std::size_t>(j * k + i)] = b[static_cast<std::size_t>(i * n + j)];
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < k; ++j) at[static_cast<std::size_t>(j * m + i)] = a[static_cast<std::size_t>(i * k + j)];
    kernels::gemm_nt(m, n, k, a.data(), bt.data(), got.data(), false);
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(got[i] == doctest::Approx(ref[i]).epsilon(1e-4));
    kernels::gemm_tn(m, n, k, at.data(), b.data(), got.data(), false);
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(got[i] == doctest::Approx(ref[i]).epsilon(1e-4));

    kernels::gemm_nn(m, n, k, a.data(), b.data(), got.data(), true);
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(got[i] == doctest::Approx(2.0f * ref[i]).epsilon(1e-4));
  }
}

TEST_CASE("parallel convolution matches the direct loops") {
  std::mt19937_64 rng(2);
  for (auto [cin, cout, k] : std::vector<std::array<int, 3>>{{1, 4, 3}, {3, 5, 3}, {6, 2, 1}}) {
    const kernels::ConvShape shape{cin, cout, k, k / 2};
    const Tensor x = random_tensor(rng, 3, cin, 9, 7);
    const auto w = random_vec(rng, static_cast<std::size_t>(cout * cin * k * k));
    kernels::ConvWorkspace ws;
    const Tensor y = kernels::conv2d_forward(x, w, shape, ws);
    const Tensor yr = reference::conv2d_forward(x, w, shape);
    REQUIRE(y.same_shape(yr));
    for (std::size_t i = 0; i < y.size(); ++i) CHECK(y.data[i] == doctest::Approx(yr.data[i]).epsilon(1e-4));

    const Tensor dy = random_tensor(rng, y.n, y.c, y.h, y.w);
    std::vector<float> dw(w.size(), 0.0f), dwr(w.size(), 0.0f);
    const Tensor dx = kernels::conv2d_backward(x, w, dy, shape, dw, true, ws);
    const Tensor dxr = reference::conv2d_backward(x, w, dy, shape, dwr);
    for (std::size_t i = 0; i < dx.size(); ++i) CHECK(dx.data[i] == doctest::Approx(dxr.data[i]).epsilon(1e-4));
    for (std::size_t i = 0; i < dw.size(); ++i) CHECK(dw[i] == doctest::Approx(dwr[i]).epsilon(1e-4));
  }
}

TEST_CASE("kernels are deterministic across calls") {
  std::mt19937_64 rng(3);
  const kernels::ConvShape shape{4, 8, 3, 1};
  const Tensor x = random_tensor(rng, 4, 4, 16, 16);
  const auto w = random_vec(rng, 8 * 4 * 9);
  kernels::ConvWorkspace ws;
  CHECK(kernels::conv2d_forward(x, w, shape, ws).data == kernels::conv2d_forward(x, w, shape, ws).data);
}

TEST_CASE("layer gradients match finite differences") {
  std::mt19937_64 rng(4);
  Rng init = make_rng(1, kStreamInit);
  SUBCASE("conv") {
    nn::Conv2d conv("c", 2, 3, 3, init);
    check_layer_gradients(conv, random_tensor(rng, 2, 2, 5, 6), rng);
  }
  SUBCASE("batch norm") {
    nn::BatchNorm2d bn("bn", 3);
    check_layer_gradients(bn, random_tensor(rng, 4, 3, 3, 3), rng);
  }
  SUBCASE("linear") {
    nn::Linear fc("fc", 6, 4, init);
    check_layer_gradients(fc, random_tensor(rng, 3, 6, 1, 1), rng);
  }
  SUBCASE("pools") {
    nn::AvgPool2 pool;
    check_layer_gradients(pool, random_tensor(rng, 2, 2, 6, 5), rng);
    nn::GlobalAvgPool gap;
    check_layer_gradients(gap, random_tensor(rng, 2, 3, 4, 5), rng);
  }
  SUBCASE("residual block") {
    nn::ResidualBlock block("b", 2, 4, init);
    check_layer_gradients(block, random_tensor(rng, 3, 2, 4, 4), rng, 5e-2, 1e-3f);
  }
}

TEST_CASE("batch norm running statistics and inference mode") {
  std::mt19937_64 rng(5);
  nn::BatchNorm2d bn("bn", 2);
  const Tensor x = random_tensor(rng, 8, 2, 4, 4);
  const Tensor before = bn.forward(x, false);
  // Fresh statistics: mean 0, variance 1.
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(before.data[i] == doctest::Approx(x.data[i]).epsilon(1e-5));
  bn.forward(x, true);
  std::vector<nn::Buffer> bufs;
  bn.buffers(bufs);
  REQUIRE(bufs.size() == 2);
  CHECK((*bufs[0].value)[0] != 0.0f);
  const Tensor a = bn.forward(x, false);
  const Tensor b = bn.forward(x, false);
  CHECK(a.data == b.data);
}

TEST_CASE("adam moves parameters against the gradient") {
  nn::Parameter p("p", 3);
  p.value = {1.0f, -1.0f, 0.5f};
  p.grad = {1.0f, -2.0f, 0.0f};
  nn::Adam opt({&p}, {});
  opt.step(0.1);
  CHECK(p.value[0] == doctest::Approx(0.9f).epsilon(1e-5));
  CHECK(p.value[1] == doctest::Approx(-0.9f).epsilon(1e-5));
  CHECK(p.value[2] == 0.5f);
  CHECK(opt.steps() == 1);
  opt.zero_grad();
  CHECK(p.grad == std::vector<float>{0.0f, 0.0f, 0.0f});

  nn::Parameter q("q", 1);
  q.value = {2.0f};
  nn::AdamOptions decoupled;
  decoupled.weight_decay = 0.1;
  decoupled.decoupled = true;
  nn::Adam adamw({&q}, decoupled);
  adamw.step(0.5);
  CHECK(q.value[0] == doctest::Approx(2.0f - 0.5f * 0.1f * 2.0f).epsilon(1e-6));
}
