#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace city2scene {

/// Dense float tensor in NCHW order. Two-dimensional data (batch x features)
/// uses h = w = 1.
struct Tensor {
  std::vector<float> data;
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  Tensor() = default;
  Tensor(int n_, int c_, int h_, int w_, float fill = 0.0f)
      : data(static_cast<std::size_t>(n_) * c_ * h_ * w_, fill), n(n_), c(c_), h(h_), w(w_) {}

  static Tensor matrix(int rows, int cols, float fill = 0.0f) { return Tensor(rows, cols, 1, 1, fill); }

  std::size_t size() const { return data.size(); }
  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  std::size_t item_size() const { return static_cast<std::size_t>(c) * h * w; }

  float& at(int in, int ic, int ih, int iw) {
    return data[((static_cast<std::size_t>(in) * c + ic) * h + ih) * w + iw];
  }
  float at(int in, int ic, int ih, int iw) const {
    return data[((static_cast<std::size_t>(in) * c + ic) * h + ih) * w + iw];
  }

  std::span<float> item(int in) { return {data.data() + in * item_size(), item_size()}; }
  std::span<const float> item(int in) const { return {data.data() + in * item_size(), item_size()}; }

  bool same_shape(const Tensor& o) const { return n == o.n && c == o.c && h == o.h && w == o.w; }
  std::string shape_string() const {
    return "(" + std::to_string(n) + ", " + std::to_string(c) + ", " + std::to_string(h) + ", " +
           std::to_string(w) + ")";
  }
};

}  // namespace city2scene
