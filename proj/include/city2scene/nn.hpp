#pragma once

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "city2scene/kernels.hpp"
#include "city2scene/rng.hpp"
#include "city2scene/tensor.hpp"

namespace city2scene::nn {

struct Parameter {
  std::string name;
  std::vector<float> value;
  std::vector<float> grad;

  Parameter() = default;
  Parameter(std::string n, std::size_t size) : name(std::move(n)), value(size, 0.0f), grad(size, 0.0f) {}
  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0f); }
};

/// Non-trainable state that is still part of a model's fingerprint
/// (batch-norm running statistics).
struct Buffer {
  std::string name;
  std::vector<float>* value;
};

class Layer {
 public:
  virtual ~Layer() = default;
  /// `training` selects batch statistics and caches activations for backward.
  virtual Tensor forward(const Tensor& x, bool training) = 0;
  /// Only valid after a training-mode forward. Accumulates parameter grads.
  virtual Tensor backward(const Tensor& dy) = 0;
  virtual void parameters(std::vector<Parameter*>&) {}
  virtual void buffers(std::vector<Buffer>&) {}
};

class Conv2d final : public Layer {
 public:
  Conv2d(std::string name, int in_channels, int out_channels, int kernel, Rng& rng);
  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& dy) override;
  void parameters(std::vector<Parameter*>& out) override { out.push_back(&weight_); }
  void set_need_input_grad(bool v) { need_input_grad_ = v; }

 private:
  kernels::ConvShape shape_;
  Parameter weight_;
  kernels::ConvWorkspace ws_;
  Tensor input_;
  bool need_input_grad_ = true;
};

class BatchNorm2d final : public Layer {
 public:
  BatchNorm2d(std::string name, int channels, float momentum = 0.1f, float eps = 1e-5f);
  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& dy) override;
  void parameters(std::vector<Parameter*>& out) override {
    out.push_back(&gamma_);
    out.push_back(&beta_);
  }
  void buffers(std::vector<Buffer>& out) override {
    out.push_back({gamma_.name + ".running_mean", &running_mean_});
    out.push_back({gamma_.name + ".running_var", &running_var_});
  }

 private:
  int channels_;
  float momentum_;
  float eps_;
  Parameter gamma_;
  Parameter beta_;
  std::vector<float> running_mean_;
  std::vector<float> running_var_;
  Tensor normalized_;
  std::vector<float> inv_std_;
};

class ReLU final : public Layer {
 public:
  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& dy) override;

 private:
  Tensor output_;
};

/// 2x2 average pooling, stride 2, odd trailing rows/cols dropped.
class AvgPool2 final : public Layer {
 public:
  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& dy) override;

 private:
  int in_h_ = 0, in_w_ = 0;
};

/// Mean over frequency and time: (n, c, h, w) -> (n, c, 1, 1).
class GlobalAvgPool final : public Layer {
 public:
  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& dy) override;

 private:
  int in_h_ = 0, in_w_ = 0;
};

/// y = x W^T + b on (n, in) -> (n, out).
class Linear final : public Layer {
 public:
  Linear(std::string name, int in_features, int out_features, Rng& rng);
  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& dy) override;
  void parameters(std::vector<Parameter*>& out) override {
    out.push_back(&weight_);
    out.push_back(&bias_);
  }
  int in_features() const { return in_; }
  int out_features() const { return out_; }
  Parameter& weight() { return weight_; }
  Parameter& bias() { return bias_; }

 private:
  int in_, out_;
  Parameter weight_;
  Parameter bias_;
  Tensor input_;
};

/// conv3x3-BN-ReLU-conv1x1-BN plus a (projected when widths differ) shortcut, then ReLU.
class ResidualBlock final : public Layer {
 public:
  ResidualBlock(const std::string& name, int in_channels, int out_channels, Rng& rng);
  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& dy) override;
  void parameters(std::vector<Parameter*>& out) override;
  void buffers(std::vector<Buffer>& out) override;

 private:
  Conv2d conv1_;
  BatchNorm2d bn1_;
  ReLU relu1_;
  Conv2d conv2_;
  BatchNorm2d bn2_;
  std::unique_ptr<Conv2d> proj_;
  std::unique_ptr<BatchNorm2d> proj_bn_;
  ReLU out_relu_;
};

class Sequential final : public Layer {
 public:
  void add(std::unique_ptr<Layer> layer) { layers_.push_back(std::move(layer)); }
  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& dy) override;
  void parameters(std::vector<Parameter*>& out) override;
  void buffers(std::vector<Buffer>& out) override;
  std::size_t size() const { return layers_.size(); }
  Layer& at(std::size_t i) { return *layers_[i]; }

 private:
  std::vector<std::unique_ptr<Layer>> layers_;
};

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  /// true: AdamW (decoupled decay); false: L2 added to the gradient.
  bool decoupled = false;
};

class Adam {
 public:
  Adam(std::vector<Parameter*> params, AdamOptions options);
  void step(double lr);
  void zero_grad();
  long steps() const { return t_; }

 private:
  std::vector<Parameter*> params_;
  AdamOptions opt_;
  std::vector<std::vector<float>> m_;
  std::vector<std::vector<float>> v_;
  long t_ = 0;
};

std::size_t parameter_count(std::span<Parameter* const> params);

}  // namespace city2scene::nn
