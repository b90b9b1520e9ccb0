#include "microbert/optim.hpp"

#include <cmath>
#include <limits>

namespace microbert {

float clip_gradients(ParamList& params, float max_norm) {
  double sq = 0.0;
  for (auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (float g : p.tensor.grad()) sq += double(g) * double(g);
  }
  const float norm = static_cast<float>(std::sqrt(sq));
  if (norm > max_norm && norm > 0.0f) {
    const float s = max_norm / norm;
    for (auto& p : params) {
      if (!p.tensor.has_grad()) continue;
      for (float& g : p.tensor.grad()) g *= s;
    }
  }
  return norm;
}

AdamW::AdamW(ParamList params, Options opt) : params_(std::move(params)), opt_(opt) {
  m_.resize(params_.size());
  v_.resize(params_.size());
  for (size_t i = 0; i < params_.size(); ++i) {
    m_[i].assign(params_[i].tensor.data().size(), 0.0f);
    v_[i].assign(params_[i].tensor.data().size(), 0.0f);
  }
}

bool AdamW::step() {
  for (auto& p : params_) {
    if (!p.tensor.has_grad()) continue;
    for (float g : p.tensor.grad())
      if (!std::isfinite(g)) return false;
  }
  t_ += 1;
  const double bc1 = 1.0 - std::pow(double(opt_.beta1), double(t_));
  const double bc2 = 1.0 - std::pow(double(opt_.beta2), double(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (!p.tensor.has_grad()) continue;
    const float step_lr = opt_.lr * p.lr_mult;
    const float wd = p.no_decay ? 0.0f : opt_.weight_decay;
    auto& data = p.tensor.data();
    const auto& grad = p.tensor.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (size_t j = 0; j < data.size(); ++j) {
      m[j] = opt_.beta1 * m[j] + (1.0f - opt_.beta1) * grad[j];
      v[j] = opt_.beta2 * v[j] + (1.0f - opt_.beta2) * grad[j] * grad[j];
      const float mhat = static_cast<float>(m[j] / bc1);
      const float vhat = static_cast<float>(v[j] / bc2);
      data[j] -= step_lr * (mhat / (std::sqrt(vhat) + opt_.eps) + wd * data[j]);
    }
  }
  return true;
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

PlateauSchedule::PlateauSchedule(float initial_lr, int patience, float factor, float floor_lr)
    : lr_(initial_lr),
      patience_(patience),
      factor_(factor),
      floor_(floor_lr),
      best_(std::numeric_limits<double>::infinity()) {}

float PlateauSchedule::step(double metric) {
  if (metric < best_) {
    best_ = metric;
    since_ = 0;
  } else {
    since_ += 1;
    if (since_ >= patience_) {
      lr_ = std::max(lr_ * factor_, floor_);
      since_ = 0;
    }
  }
  return lr_;
}

void PlateauSchedule::restore(float lr, double best, int since) {
  lr_ = lr;
  best_ = best;
  since_ = since;
}

}  // namespace microbert
