#pragma once

#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "uwf/autodiff.hpp"

namespace uwf::nn {

/// A persistent leaf of the tape. Gradients accumulate in the leaf node
/// between zero_grad calls; `trainable` gates both autodiff and the optimizer.
struct Parameter {
  std::string name;
  ag::Var var;
  bool trainable = true;
  bool decay = true;  // excluded for norm scales and biases

  Parameter() = default;
  Parameter(std::string n, Tensor value, bool decay_ = true)
      : name(std::move(n)), var(ag::make_var(std::move(value), true)), decay(decay_) {}

  int64_t numel() const { return var->value.numel(); }
  Tensor& value() { return var->value; }
  const Tensor& value() const { return var->value; }

  void set_trainable(bool t) {
    trainable = t;
    var->requires_grad = t;
  }
};

using BufferRef = std::pair<std::string, Tensor*>;

struct Ctx {
  bool training = false;
  Rng* rng = nullptr;  // dropout draws

  Rng& rng_ref() {
    static Rng fallback(0);
    return rng ? *rng : fallback;
  }
};

// ---- layers -------------------------------------------------------------------

class Conv2d {
 public:
  Conv2d(const std::string& name, int in_ch, int out_ch, int k, int stride, int pad, int groups,
         Rng& rng)
      : stride_(stride), pad_(pad), groups_(groups) {
    int fan_in = (in_ch / groups) * k * k;
    float std = std::sqrt(2.0f / static_cast<float>(fan_in));
    w_ = Parameter(name + ".w", Tensor::randn({out_ch, in_ch / groups, k, k}, rng, std));
    b_ = Parameter(name + ".b", Tensor::zeros({out_ch}), false);
  }

  ag::Var forward(const ag::Var& x) { return ag::conv2d(x, w_.var, b_.var, stride_, pad_, groups_); }

  void collect(std::vector<Parameter*>& out) {
    out.push_back(&w_);
    out.push_back(&b_);
  }

 private:
  Parameter w_, b_;
  int stride_, pad_, groups_;
};

class BatchNorm2d {
 public:
  BatchNorm2d(const std::string& name, int ch) : name_(name) {
    gamma_ = Parameter(name + ".gamma", Tensor::full({ch}, 1.0f), false);
    beta_ = Parameter(name + ".beta", Tensor::zeros({ch}), false);
    buffers_.running_mean = Tensor::zeros({ch});
    buffers_.running_var = Tensor::full({ch}, 1.0f);
  }

  /// Frozen layers (non-trainable scale) always run in eval mode so their
  /// statistics stay bit-identical under training.
  ag::Var forward(const ag::Var& x, Ctx& ctx) {
    bool active = ctx.training && gamma_.trainable;
    return ag::batchnorm2d(x, gamma_.var, beta_.var, buffers_, active);
  }

  void collect(std::vector<Parameter*>& out) {
    out.push_back(&gamma_);
    out.push_back(&beta_);
  }
  void collect_buffers(std::vector<BufferRef>& out) {
    out.emplace_back(name_ + ".running_mean", &buffers_.running_mean);
    out.emplace_back(name_ + ".running_var", &buffers_.running_var);
  }

 private:
  std::string name_;
  Parameter gamma_, beta_;
  ag::BnBuffers buffers_;
};

class Linear {
 public:
  Linear(const std::string& name, int in_dim, int out_dim, Rng& rng, float init_std = -1.0f) {
    float std = init_std > 0.0f ? init_std : std::sqrt(2.0f / static_cast<float>(in_dim));
    w_ = Parameter(name + ".w", Tensor::randn({out_dim, in_dim}, rng, std));
    b_ = Parameter(name + ".b", Tensor::zeros({out_dim}), false);
  }

  ag::Var forward(const ag::Var& x) { return ag::linear(x, w_.var, b_.var); }

  void collect(std::vector<Parameter*>& out) {
    out.push_back(&w_);
    out.push_back(&b_);
  }

 private:
  Parameter w_, b_;
};

class LayerNorm {
 public:
  LayerNorm(const std::string& name, int dim) {
    gamma_ = Parameter(name + ".gamma", Tensor::full({dim}, 1.0f), false);
    beta_ = Parameter(name + ".beta", Tensor::zeros({dim}), false);
  }

  ag::Var forward(const ag::Var& x) { return ag::layernorm(x, gamma_.var, beta_.var); }

  void collect(std::vector<Parameter*>& out) {
    out.push_back(&gamma_);
    out.push_back(&beta_);
  }

 private:
  Parameter gamma_, beta_;
};

// ---- optimizer ------------------------------------------------------------------

/// AdamW with decoupled weight decay. Decay skips biases and norm parameters.
class AdamW {
 public:
  AdamW(double lr, double weight_decay, double beta1 = 0.9, double beta2 = 0.999,
        double eps = 1e-8)
      : lr_(lr), wd_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  static void zero_grad(const std::vector<Parameter*>& params) {
    for (auto* p : params) p->var->grad = Tensor();
  }

  void step(const std::vector<Parameter*>& params) {
    ++t_;
    double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (auto* p : params) {
      if (!p->trainable || p->var->grad.empty()) continue;
      auto& slot = slots_[p->var.get()];
      if (slot.m.empty()) {
        slot.m = Tensor::zeros(p->value().shape());
        slot.v = Tensor::zeros(p->value().shape());
      }
      float* w = p->value().data();
      const float* g = p->var->grad.data();
      float* m = slot.m.data();
      float* v = slot.v.data();
      float lr = static_cast<float>(lr_);
      float wd = p->decay ? static_cast<float>(wd_) : 0.0f;
      for (int64_t i = 0; i < p->numel(); ++i) {
        m[i] = static_cast<float>(beta1_) * m[i] + (1.0f - static_cast<float>(beta1_)) * g[i];
        v[i] = static_cast<float>(beta2_) * v[i] + (1.0f - static_cast<float>(beta2_)) * g[i] * g[i];
        float mhat = m[i] / static_cast<float>(bc1);
        float vhat = v[i] / static_cast<float>(bc2);
        w[i] -= lr * (mhat / (std::sqrt(vhat) + static_cast<float>(eps_)) + wd * w[i]);
      }
    }
  }

 private:
  struct Slot {
    Tensor m, v;
  };
  double lr_, wd_, beta1_, beta2_, eps_;
  int64_t t_ = 0;
  std::unordered_map<ag::Node*, Slot> slots_;
};

inline uint64_t params_hash(const std::vector<Parameter*>& params) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (const auto* p : params)
    h = fnv1a64(p->value().data(), static_cast<size_t>(p->numel()) * sizeof(float), h);
  return h;
}

}  // namespace uwf::nn
