#include "lumen/optim.hpp"

#include <cmath>
#include <numbers>

namespace lumen {

void AdamW::step(std::vector<Parameter>& params, float lr) {
  if (!(lr > 0.0f)) throw Error("adamw: learning rate must be positive");
  if (moments_.empty()) {
    moments_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      moments_[i].m.assign(params[i].tensor.numel(), 0.0f);
      moments_[i].v.assign(params[i].tensor.numel(), 0.0f);
    }
  }
  if (moments_.size() != params.size())
    throw Error("adamw: parameter list changed size between steps");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (moments_[i].m.size() != params[i].tensor.numel())
      throw DimensionError("adamw", params[i].name, moments_[i].m.size(), params[i].tensor.numel());
    if (!params[i].tensor.has_grad()) continue;
    for (float g : params[i].tensor.grad())
      if (!std::isfinite(g)) throw Error("adamw: non-finite gradient in parameter '" + params[i].name + "'");
  }

  ++step_;
  const double bc1 = 1.0 - std::pow(static_cast<double>(config_.beta1), static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(static_cast<double>(config_.beta2), static_cast<double>(step_));
  const float b1 = config_.beta1, b2 = config_.beta2;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    auto w = p.tensor.data();
    auto& mom = moments_[i];
    const bool has_grad = p.tensor.has_grad();
    const float* g = has_grad ? p.tensor.grad().data() : nullptr;
    const float decay = p.decay ? 1.0f - lr * config_.weight_decay : 1.0f;
    for (std::size_t j = 0; j < w.size(); ++j) {
      const float gj = g ? g[j] : 0.0f;
      w[j] *= decay;
      mom.m[j] = b1 * mom.m[j] + (1.0f - b1) * gj;
      mom.v[j] = b2 * mom.v[j] + (1.0f - b2) * gj * gj;
      const double mhat = mom.m[j] / bc1;
      const double vhat = mom.v[j] / bc2;
      w[j] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + config_.eps));
    }
  }
}

double lr_at(const LrSchedule& s, double epoch) {
  if (!(epoch >= 0.0 && epoch <= s.total_epochs))
    throw Error("lr_at: epoch " + std::to_string(epoch) + " outside [0, " +
                std::to_string(s.total_epochs) + "]");
  if (epoch < s.warmup_epochs) return s.lr0 * epoch / s.warmup_epochs;
  const double span = s.total_epochs - s.warmup_epochs;
  const double progress = span > 0.0 ? (epoch - s.warmup_epochs) / span : 1.0;
  const double floor = s.lr0 * s.final_fraction;
  return floor + (s.lr0 - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace lumen
