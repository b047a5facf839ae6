#include "city2scene/kernels.hpp"

#include <algorithm>
#include <cstring>

#include "city2scene/error.hpp"

namespace city2scene::kernels {

void gemm_nn(int m, int n, int k, const float* a, const float* b, float* c, bool accumulate) {
#pragma omp parallel for schedule(static)
  for (int i = 0; i < m; ++i) {
    float* crow = c + static_cast<std::size_t>(i) * n;
    if (!accumulate) std::fill(crow, crow + n, 0.0f);
    const float* arow = a + static_cast<std::size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const float av = arow[p];
      if (av == 0.0f) continue;
      const float* brow = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

namespace {

inline float dot(const float* x, const float* y, int n) {
  constexpr int kLanes = 16;
  float acc[kLanes] = {};
  int j = 0;
  for (; j + kLanes <= n; j += kLanes) {
    for (int l = 0; l < kLanes; ++l) acc[l] += x[j + l] * y[j + l];
  }
  float tail = 0.0f;
  for (; j < n; ++j) tail += x[j] * y[j];
  float s = 0.0f;
  for (int l = 0; l < kLanes; ++l) s += acc[l];
  return s + tail;
}

}  // namespace

void gemm_nt(int m, int n, int k, const float* a, const float* b, float* c, bool accumulate) {
#pragma omp parallel for schedule(static)
  for (int i = 0; i < m; ++i) {
    const float* arow = a + static_cast<std::size_t>(i) * k;
    float* crow = c + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const float v = dot(arow, b + static_cast<std::size_t>(j) * k, k);
      crow[j] = accumulate ? crow[j] + v : v;
    }
  }
}

void gemm_tn(int m, int n, int k, const float* a, const float* b, float* c, bool accumulate) {
#pragma omp parallel for schedule(static)
  for (int i = 0; i < m; ++i) {
    float* crow = c + static_cast<std::size_t>(i) * n;
    if (!accumulate) std::fill(crow, crow + n, 0.0f);
    for (int p = 0; p < k; ++p) {
      const float av = a[static_cast<std::size_t>(p) * m + i];
      if (av == 0.0f) continue;
      const float* brow = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

namespace {

void check_conv(const Tensor& x, std::span<const float> weights, const ConvShape& s) {
  if (x.c != s.in_channels) {
    throw ShapeError("conv2d: input has " + std::to_string(x.c) + " channels, expected " +
                     std::to_string(s.in_channels));
  }
  if (weights.size() != static_cast<std::size_t>(s.out_channels) * s.in_channels * s.kernel * s.kernel) {
    throw ShapeError("conv2d: weight size mismatch");
  }
  if (s.kernel != 2 * s.pad + 1) throw ShapeError("conv2d: only 'same' padding is supported");
}

/// cols[(ci*k + ky)*k + kx][b*HW + y*W + x] = x[b][ci][y+ky-pad][x+kx-pad]
void im2col(const Tensor& x, const ConvShape& s, std::vector<float>& cols) {
  const int hw = x.h * x.w;
  const std::size_t ncols = static_cast<std::size_t>(x.n) * hw;
  const int rows = s.in_channels * s.kernel * s.kernel;
  cols.resize(static_cast<std::size_t>(rows) * ncols);
#pragma omp parallel for schedule(static)
  for (int r = 0; r < rows; ++r) {
    const int ci = r / (s.kernel * s.kernel);
    const int ky = (r / s.kernel) % s.kernel - s.pad;
    const int kx = r % s.kernel - s.pad;
    float* dst = cols.data() + static_cast<std::size_t>(r) * ncols;
    for (int b = 0; b < x.n; ++b) {
      const float* src = x.data.data() + (static_cast<std::size_t>(b) * x.c + ci) * hw;
      float* out = dst + static_cast<std::size_t>(b) * hw;
      for (int yy = 0; yy < x.h; ++yy) {
        const int sy = yy + ky;
        float* orow = out + static_cast<std::size_t>(yy) * x.w;
        if (sy < 0 || sy >= x.h) {
          std::fill(orow, orow + x.w, 0.0f);
          continue;
        }
        const float* srow = src + static_cast<std::size_t>(sy) * x.w;
        for (int xx = 0; xx < x.w; ++xx) {
          const int sx = xx + kx;
          orow[xx] = (sx >= 0 && sx < x.w) ? srow[sx] : 0.0f;
        }
      }
    }
  }
}

/// Scatter-add inverse of im2col. Parallel over (batch, channel) planes so each
/// destination element has a single writer.
void col2im(const std::vector<float>& cols, const ConvShape& s, Tensor& dx) {
  const int hw = dx.h * dx.w;
  const std::size_t ncols = static_cast<std::size_t>(dx.n) * hw;
#pragma omp parallel for collapse(2) schedule(static)
  for (int b = 0; b < dx.n; ++b) {
    for (int ci = 0; ci < s.in_channels; ++ci) {
      float* dst = dx.data.data() + (static_cast<std::size_t>(b) * dx.c + ci) * hw;
      std::fill(dst, dst + hw, 0.0f);
      for (int kk = 0; kk < s.kernel * s.kernel; ++kk) {
        const int ky = kk / s.kernel - s.pad;
        const int kx = kk % s.kernel - s.pad;
        const float* src = cols.data() + static_cast<std::size_t>(ci * s.kernel * s.kernel + kk) * ncols +
                           static_cast<std::size_t>(b) * hw;
        for (int yy = 0; yy < dx.h; ++yy) {
          const int sy = yy + ky;
          if (sy < 0 || sy >= dx.h) continue;
          for (int xx = 0; xx < dx.w; ++xx) {
            const int sx = xx + kx;
            if (sx < 0 || sx >= dx.w) continue;
            dst[sy * dx.w + sx] += src[yy * dx.w + xx];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d_forward(const Tensor& x, std::span<const float> weights, const ConvShape& s, ConvWorkspace& ws) {
  check_conv(x, weights, s);
  const int hw = x.h * x.w;
  const int ncols = x.n * hw;
  const int krows = s.in_channels * s.kernel * s.kernel;
  im2col(x, s, ws.cols);
  ws.out_cols.resize(static_cast<std::size_t>(s.out_channels) * ncols);
  gemm_nn(s.out_channels, ncols, krows, weights.data(), ws.cols.data(), ws.out_cols.data(), false);

  Tensor y(x.n, s.out_channels, x.h, x.w);
#pragma omp parallel for collapse(2) schedule(static)
  for (int b = 0; b < x.n; ++b) {
    for (int co = 0; co < s.out_channels; ++co) {
      std::memcpy(y.data.data() + (static_cast<std::size_t>(b) * s.out_channels + co) * hw,
                  ws.out_cols.data() + static_cast<std::size_t>(co) * ncols + static_cast<std::size_t>(b) * hw,
                  sizeof(float) * hw);
    }
  }
  return y;
}

Tensor conv2d_backward(const Tensor& x, std::span<const float> weights, const Tensor& dy, const ConvShape& s,
                       std::span<float> dweights, bool want_dx, ConvWorkspace& ws) {
  check_conv(x, weights, s);
  if (dy.n != x.n || dy.c != s.out_channels || dy.h != x.h || dy.w != x.w) {
    throw ShapeError("conv2d_backward: gradient shape " + dy.shape_string() + " does not match output");
  }
  const int hw = x.h * x.w;
  const int ncols = x.n * hw;
  const int krows = s.in_channels * s.kernel * s.kernel;

  // dy in NCHW -> [Cout][B*HW]
  ws.out_cols.resize(static_cast<std::size_t>(s.out_channels) * ncols);
#pragma omp parallel for collapse(2) schedule(static)
  for (int b = 0; b < x.n; ++b) {
    for (int co = 0; co < s.out_channels; ++co) {
      std::memcpy(ws.out_cols.data() + static_cast<std::size_t>(co) * ncols + static_cast<std::size_t>(b) * hw,
                  dy.data.data() + (static_cast<std::size_t>(b) * s.out_channels + co) * hw, sizeof(float) * hw);
    }
  }
  im2col(x, s, ws.cols);
  gemm_nt(s.out_channels, krows, ncols, ws.out_cols.data(), ws.cols.data(), dweights.data(), true);

  Tensor dx;
  if (want_dx) {
    gemm_tn(krows, ncols, s.out_channels, weights.data(), ws.out_cols.data(), ws.cols.data(), false);
    dx = Tensor(x.n, x.c, x.h, x.w);
    col2im(ws.cols, s, dx);
  }
  return dx;
}

}  // namespace city2scene::kernels

namespace city2scene::reference {

void gemm_nn(int m, int n, int k, const float* a, const float* b, float* c) {
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int p = 0; p < k; ++p) acc += static_cast<double>(a[i * k + p]) * b[p * n + j];
      c[i * n + j] = static_cast<float>(acc);
    }
}

Tensor conv2d_forward(const Tensor& x, std::span<const float> w, const kernels::ConvShape& s) {
  Tensor y(x.n, s.out_channels, x.h, x.w);
  const int k = s.kernel;
  for (int b = 0; b < x.n; ++b)
    for (int co = 0; co < s.out_channels; ++co)
      for (int yy = 0; yy < x.h; ++yy)
        for (int xx = 0; xx < x.w; ++xx) {
          double acc = 0.0;
          for (int ci = 0; ci < s.in_channels; ++ci)
            for (int ky = 0; ky < k; ++ky)
              for (int kx = 0; kx < k; ++kx) {
                const int sy = yy + ky - s.pad, sx = xx + kx - s.pad;
                if (sy < 0 || sy >= x.h || sx < 0 || sx >= x.w) continue;
                acc += static_cast<double>(w[((co * s.in_channels + ci) * k + ky) * k + kx]) * x.at(b, ci, sy, sx);
              }
          y.at(b, co, yy, xx) = static_cast<float>(acc);
        }
  return y;
}

Tensor conv2d_backward(const Tensor& x, std::span<const float> w, const Tensor& dy, const kernels::ConvShape& s,
                       std::span<float> dw) {
  Tensor dx(x.n, x.c, x.h, x.w);
  const int k = s.kernel;
  std::vector<double> dw_acc(dw.size(), 0.0);
  std::vector<double> dx_acc(dx.size(), 0.0);
  for (int b = 0; b < x.n; ++b)
    for (int co = 0; co < s.out_channels; ++co)
      for (int yy = 0; yy < x.h; ++yy)
        for (int xx = 0; xx < x.w; ++xx) {
          const double g = dy.at(b, co, yy, xx);
          for (int ci = 0; ci < s.in_channels; ++ci)
            for (int ky = 0; ky < k; ++ky)
              for (int kx = 0; kx < k; ++kx) {
                const int sy = yy + ky - s.pad, sx = xx + kx - s.pad;
                if (sy < 0 || sy >= x.h || sx < 0 || sx >= x.w) continue;
                const std::size_t wi = static_cast<std::size_t>(((co * s.in_channels + ci) * k + ky) * k + kx);
                dw_acc[wi] += g * x.at(b, ci, sy, sx);
                dx_acc[((static_cast<std::size_t>(b) * x.c + ci) * x.h + sy) * x.w + sx] += g * w[wi];
              }
        }
  for (std::size_t i = 0; i < dw.size(); ++i) dw[i] += static_cast<float>(dw_acc[i]);
  for (std::size_t i = 0; i < dx.size(); ++i) dx.data[i] = static_cast<float>(dx_acc[i]);
  return dx;
}

}  // namespace city2scene::reference
