#include "city2scene/nn.hpp"

#include <cmath>

#include "city2scene/error.hpp"

namespace city2scene::nn {

Conv2d::Conv2d(std::string name, int in_channels, int out_channels, int kernel, Rng& rng)
    : shape_{in_channels, out_channels, kernel, kernel / 2},
      weight_(std::move(name) + ".weight", static_cast<std::size_t>(out_channels) * in_channels * kernel * kernel) {
  const double fan_in = static_cast<double>(in_channels) * kernel * kernel;
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
  for (auto& w : weight_.value) w = static_cast<float>(dist(rng));
}

Tensor Conv2d::forward(const Tensor& x, bool training) {
  if (training) input_ = x;
  return kernels::conv2d_forward(x, weight_.value, shape_, ws_);
}

Tensor Conv2d::backward(const Tensor& dy) {
  return kernels::conv2d_backward(input_, weight_.value, dy, shape_, weight_.grad, need_input_grad_, ws_);
}

BatchNorm2d::BatchNorm2d(std::string name, int channels, float momentum, float eps)
    : channels_(channels),
      momentum_(momentum),
      eps_(eps),
      gamma_(name + ".gamma", static_cast<std::size_t>(channels)),
      beta_(name + ".beta", static_cast<std::size_t>(channels)),
      running_mean_(static_cast<std::size_t>(channels), 0.0f),
      running_var_(static_cast<std::size_t>(channels), 1.0f) {
  std::fill(gamma_.value.begin(), gamma_.value.end(), 1.0f);
}

Tensor BatchNorm2d::forward(const Tensor& x, bool training) {
  if (x.c != channels_) throw ShapeError("batchnorm: channel mismatch");
  Tensor y(x.n, x.c, x.h, x.w);
  const std::size_t hw = x.plane();
  const double m = static_cast<double>(x.n) * hw;
  if (training) {
    normalized_ = Tensor(x.n, x.c, x.h, x.w);
    inv_std_.assign(static_cast<std::size_t>(channels_), 0.0f);
  }
#pragma omp parallel for schedule(static)
  for (int ch = 0; ch < channels_; ++ch) {
    double mean, inv_std;
    if (training) {
      double sum = 0.0;
      for (int b = 0; b < x.n; ++b) {
        const float* p = x.data.data() + (static_cast<std::size_t>(b) * x.c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) sum += p[i];
      }
      mean = sum / m;
      double sq = 0.0;
      for (int b = 0; b < x.n; ++b) {
        const float* p = x.data.data() + (static_cast<std::size_t>(b) * x.c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) sq += (p[i] - mean) * (p[i] - mean);
      }
      const double var = sq / m;
      inv_std = 1.0 / std::sqrt(var + eps_);
      inv_std_[ch] = static_cast<float>(inv_std);
      const double unbiased = m > 1 ? sq / (m - 1) : var;
      running_mean_[ch] = static_cast<float>((1.0 - momentum_) * running_mean_[ch] + momentum_ * mean);
      running_var_[ch] = static_cast<float>((1.0 - momentum_) * running_var_[ch] + momentum_ * unbiased);
    } else {
      mean = running_mean_[ch];
      inv_std = 1.0 / std::sqrt(static_cast<double>(running_var_[ch]) + eps_);
    }
    const float g = gamma_.value[ch], bta = beta_.value[ch];
    for (int b = 0; b < x.n; ++b) {
      const std::size_t off = (static_cast<std::size_t>(b) * x.c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        const float xn = static_cast<float>((x.data[off + i] - mean) * inv_std);
        if (training) normalized_.data[off + i] = xn;
        y.data[off + i] = g * xn + bta;
      }
    }
  }
  return y;
}

Tensor BatchNorm2d::backward(const Tensor& dy) {
  if (!dy.same_shape(normalized_)) throw ShapeError("batchnorm backward without matching training forward");
  Tensor dx(dy.n, dy.c, dy.h, dy.w);
  const std::size_t hw = dy.plane();
  const double m = static_cast<double>(dy.n) * hw;
#pragma omp parallel for schedule(static)
  for (int ch = 0; ch < channels_; ++ch) {
    double sum_dy = 0.0, sum_dy_xn = 0.0;
    for (int b = 0; b < dy.n; ++b) {
      const std::size_t off = (static_cast<std::size_t>(b) * dy.c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        sum_dy += dy.data[off + i];
        sum_dy_xn += static_cast<double>(dy.data[off + i]) * normalized_.data[off + i];
      }
    }
    gamma_.grad[ch] += static_cast<float>(sum_dy_xn);
    beta_.grad[ch] += static_cast<float>(sum_dy);
    const double scale = gamma_.value[ch] * inv_std_[ch] / m;
    for (int b = 0; b < dy.n; ++b) {
      const std::size_t off = (static_cast<std::size_t>(b) * dy.c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        dx.data[off + i] =
            static_cast<float>(scale * (m * dy.data[off + i] - sum_dy - normalized_.data[off + i] * sum_dy_xn));
      }
    }
  }
  return dx;
}

Tensor ReLU::forward(const Tensor& x, bool training) {
  Tensor y = x;
  for (auto& v : y.data) v = v > 0.0f ? v : 0.0f;
  if (training) output_ = y;
  return y;
}

Tensor ReLU::backward(const Tensor& dy) {
  Tensor dx = dy;
  for (std::size_t i = 0; i < dx.size(); ++i) {
    if (!(output_.data[i] > 0.0f)) dx.data[i] = 0.0f;
  }
  return dx;
}

Tensor AvgPool2::forward(const Tensor& x, bool) {
  in_h_ = x.h;
  in_w_ = x.w;
  const int oh = x.h / 2, ow = x.w / 2;
  if (oh < 1 || ow < 1) throw ShapeError("avgpool2: input " + x.shape_string() + " too small");
  Tensor y(x.n, x.c, oh, ow);
#pragma omp parallel for collapse(2) schedule(static)
  for (int b = 0; b < x.n; ++b)
    for (int ch = 0; ch < x.c; ++ch)
      for (int i = 0; i < oh; ++i)
        for (int j = 0; j < ow; ++j) {
          y.at(b, ch, i, j) = 0.25f * (x.at(b, ch, 2 * i, 2 * j) + x.at(b, ch, 2 * i, 2 * j + 1) +
                                       x.at(b, ch, 2 * i + 1, 2 * j) + x.at(b, ch, 2 * i + 1, 2 * j + 1));
        }
  return y;
}

Tensor AvgPool2::backward(const Tensor& dy) {
  Tensor dx(dy.n, dy.c, in_h_, in_w_);
#pragma omp parallel for collapse(2) schedule(static)
  for (int b = 0; b < dy.n; ++b)
    for (int ch = 0; ch < dy.c; ++ch)
      for (int i = 0; i < dy.h; ++i)
        for (int j = 0; j < dy.w; ++j) {
          const float g = 0.25f * dy.at(b, ch, i, j);
          dx.at(b, ch, 2 * i, 2 * j) = g;
          dx.at(b, ch, 2 * i, 2 * j + 1) = g;
          dx.at(b, ch, 2 * i + 1, 2 * j) = g;
          dx.at(b, ch, 2 * i + 1, 2 * j + 1) = g;
        }
  return dx;
}

Tensor GlobalAvgPool::forward(const Tensor& x, bool) {
  in_h_ = x.h;
  in_w_ = x.w;
  Tensor y(x.n, x.c, 1, 1);
  const std::size_t hw = x.plane();
  for (int b = 0; b < x.n; ++b)
    for (int ch = 0; ch < x.c; ++ch) {
      const float* p = x.data.data() + (static_cast<std::size_t>(b) * x.c + ch) * hw;
      double s = 0.0;
      for (std::size_t i = 0; i < hw; ++i) s += p[i];
      y.data[static_cast<std::size_t>(b) * x.c + ch] = static_cast<float>(s / static_cast<double>(hw));
    }
  return y;
}

Tensor GlobalAvgPool::backward(const Tensor& dy) {
  Tensor dx(dy.n, dy.c, in_h_, in_w_);
  const std::size_t hw = dx.plane();
  const float inv = 1.0f / static_cast<float>(hw);
  for (int b = 0; b < dy.n; ++b)
    for (int ch = 0; ch < dy.c; ++ch) {
      const float g = dy.data[static_cast<std::size_t>(b) * dy.c + ch] * inv;
      float* p = dx.data.data() + (static_cast<std::size_t>(b) * dx.c + ch) * hw;
      std::fill(p, p + hw, g);
    }
  return dx;
}

Linear::Linear(std::string name, int in_features, int out_features, Rng& rng)
    : in_(in_features),
      out_(out_features),
      weight_(name + ".weight", static_cast<std::size_t>(in_features) * out_features),
      bias_(name + ".bias", static_cast<std::size_t>(out_features)) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_features));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& w : weight_.value) w = static_cast<float>(dist(rng));
  for (auto& b : bias_.value) b = static_cast<float>(dist(rng));
}

Tensor Linear::forward(const Tensor& x, bool training) {
  if (static_cast<int>(x.item_size()) != in_) {
    throw ShapeError("linear: expected " + std::to_string(in_) + " input features, got " +
                     std::to_string(x.item_size()));
  }
  if (training) input_ = x;
  Tensor y = Tensor::matrix(x.n, out_);
  kernels::gemm_nt(x.n, out_, in_, x.data.data(), weight_.value.data(), y.data.data(), false);
  for (int b = 0; b < x.n; ++b)
    for (int k = 0; k < out_; ++k) y.data[static_cast<std::size_t>(b) * out_ + k] += bias_.value[k];
  return y;
}

Tensor Linear::backward(const Tensor& dy) {
  kernels::gemm_tn(out_, in_, dy.n, dy.data.data(), input_.data.data(), weight_.grad.data(), true);
  for (int b = 0; b < dy.n; ++b)
    for (int k = 0; k < out_; ++k) bias_.grad[k] += dy.data[static_cast<std::size_t>(b) * out_ + k];
  Tensor dx(input_.n, input_.c, input_.h, input_.w);
  kernels::gemm_nn(dy.n, in_, out_, dy.data.data(), weight_.value.data(), dx.data.data(), false);
  return dx;
}

ResidualBlock::ResidualBlock(const std::string& name, int in_channels, int out_channels, Rng& rng)
    : conv1_(name + ".conv1", in_channels, out_channels, 3, rng),
      bn1_(name + ".bn1", out_channels),
      conv2_(name + ".conv2", out_channels, out_channels, 1, rng),
      bn2_(name + ".bn2", out_channels) {
  if (in_channels != out_channels) {
    proj_ = std::make_unique<Conv2d>(name + ".proj", in_channels, out_channels, 1, rng);
    proj_bn_ = std::make_unique<BatchNorm2d>(name + ".proj_bn", out_channels);
  }
}

Tensor ResidualBlock::forward(const Tensor& x, bool training) {
  Tensor main = bn2_.forward(conv2_.forward(relu1_.forward(bn1_.forward(conv1_.forward(x, training), training), training), training), training);
  if (proj_) {
    const Tensor sc = proj_bn_->forward(proj_->forward(x, training), training);
    for (std::size_t i = 0; i < main.size(); ++i) main.data[i] += sc.data[i];
  } else {
    for (std::size_t i = 0; i < main.size(); ++i) main.data[i] += x.data[i];
  }
  return out_relu_.forward(main, training);
}

Tensor ResidualBlock::backward(const Tensor& dy) {
  const Tensor dsum = out_relu_.backward(dy);
  Tensor dx = conv1_.backward(bn1_.backward(relu1_.backward(conv2_.backward(bn2_.backward(dsum)))));
  if (proj_) {
    const Tensor dsc = proj_->backward(proj_bn_->backward(dsum));
    if (!dx.data.empty())
      for (std::size_t i = 0; i < dx.size(); ++i) dx.data[i] += dsc.data[i];
  } else if (!dx.data.empty()) {
    for (std::size_t i = 0; i < dx.size(); ++i) dx.data[i] += dsum.data[i];
  }
  return dx;
}

void ResidualBlock::parameters(std::vector<Parameter*>& out) {
  conv1_.parameters(out);
  bn1_.parameters(out);
  conv2_.parameters(out);
  bn2_.parameters(out);
  if (proj_) {
    proj_->parameters(out);
    proj_bn_->parameters(out);
  }
}

void ResidualBlock::buffers(std::vector<Buffer>& out) {
  bn1_.buffers(out);
  bn2_.buffers(out);
  if (proj_bn_) proj_bn_->buffers(out);
}

Tensor Sequential::forward(const Tensor& x, bool training) {
  Tensor y = x;
  for (auto& l : layers_) y = l->forward(y, training);
  return y;
}

Tensor Sequential::backward(const Tensor& dy) {
  Tensor d = dy;
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) d = (*it)->backward(d);
  return d;
}

void Sequential::parameters(std::vector<Parameter*>& out) {
  for (auto& l : layers_) l->parameters(out);
}

void Sequential::buffers(std::vector<Buffer>& out) {
  for (auto& l : layers_) l->buffers(out);
}

Adam::Adam(std::vector<Parameter*> params, AdamOptions options) : params_(std::move(params)), opt_(options) {
  for (auto* p : params_) {
    m_.emplace_back(p->value.size(), 0.0f);
    v_.emplace_back(p->value.size(), 0.0f);
  }
}

void Adam::zero_grad() {
  for (auto* p : params_) p->zero_grad();
}

void Adam::step(double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
  const auto b1 = static_cast<float>(opt_.beta1), b2 = static_cast<float>(opt_.beta2);
  const auto wd = static_cast<float>(opt_.weight_decay);
  const auto step = static_cast<float>(lr / bc1);
  const auto inv_bc2 = static_cast<float>(1.0 / bc2);
  const auto eps = static_cast<float>(opt_.eps);
  const auto decay = static_cast<float>(lr * opt_.weight_decay);
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& p = *params_[k];
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      float g = p.grad[i];
      if (!opt_.decoupled && wd != 0.0f) g += wd * p.value[i];
      m[i] = b1 * m[i] + (1.0f - b1) * g;
      v[i] = b2 * v[i] + (1.0f - b2) * g * g;
      if (opt_.decoupled && decay != 0.0f) p.value[i] -= decay * p.value[i];
      p.value[i] -= step * m[i] / (std::sqrt(v[i] * inv_bc2) + eps);
    }
  }
}

std::size_t parameter_count(std::span<Parameter* const> params) {
  std::size_t n = 0;
  for (const auto* p : params) n += p->value.size();
  return n;
}

}  // namespace city2scene::nn
