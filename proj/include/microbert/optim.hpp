#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "microbert/tensor.hpp"

namespace microbert {

// A named trainable tensor. no_decay excludes it from weight decay (biases,
// layer-norm affine params); lr_mult scales the learning rate for fine-tuning
// param groups.
struct Param {
  std::string name;
  Tensor tensor;
  bool no_decay = false;
  float lr_mult = 1.0f;
};

using ParamList = std::vector<Param>;

// global L2 norm across all grads; scales them in place to max_norm when the
// norm exceeds it. Returns the pre-clip norm. Params without grads are skipped.
float clip_gradients(ParamList& params, float max_norm);

// AdamW with bias correction and decoupled weight decay:
//   p <- p - lr_mult * lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)
class AdamW {
 public:
  struct Options {
    float lr = 1e-3f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
    float weight_decay = 0.0f;
  };

  AdamW(ParamList params, Options opt);

  // applies one update using the grads currently on the params. If any grad is
  // non-finite the step is rejected: parameters, moments and the step count
  // stay untouched and false is returned. Params with no grad buffer are
  // skipped entirely (their moments do not decay).
  bool step();

  void zero_grad();

  float lr() const { return opt_.lr; }
  void set_lr(float lr) { opt_.lr = lr; }
  int64_t steps() const { return t_; }
  const Options& options() const { return opt_; }

  ParamList& params() { return params_; }
  const ParamList& params() const { return params_; }

  // checkpoint access: first/second moments aligned with params()
  std::vector<std::vector<float>>& moments_m() { return m_; }
  std::vector<std::vector<float>>& moments_v() { return v_; }
  void set_steps(int64_t t) { t_ = t; }

 private:
  ParamList params_;
  Options opt_;
  std::vector<std::vector<float>> m_, v_;
  int64_t t_ = 0;
};

// Reduce-on-plateau for a metric where lower is better. Improvement must be
// strict; after `patience` consecutive non-improving epochs the LR is
// multiplied by `factor`, never dropping below `floor_lr`.
class PlateauSchedule {
 public:
  PlateauSchedule(float initial_lr, int patience, float factor, float floor_lr);

  // call once per epoch with the validation metric; returns the LR to use next
  float step(double metric);

  float lr() const { return lr_; }
  double best_metric() const { return best_; }
  int epochs_since_improvement() const { return since_; }

  void restore(float lr, double best, int since);

 private:
  float lr_;
  int patience_;
  float factor_;
  float floor_;
  double best_;
  int since_ = 0;
};

}  // namespace microbert
