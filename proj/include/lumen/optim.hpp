#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lumen/tensor.hpp"

namespace lumen {

struct Parameter {
  std::string name;
  Tensor tensor;
  bool decay = true;  // conv/linear weights decay; norms and biases do not
};

struct AdamWConfig {
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  float weight_decay = 0.01f;
};

/// AdamW with decoupled weight decay and bias-corrected moments.
///
/// Moment buffers are keyed by parameter position; the parameter list passed
/// to `step` must keep the same order and shapes for the optimizer's lifetime.
class AdamW {
 public:
  explicit AdamW(AdamWConfig config = {}) : config_(config) {}

  // Applies one update using each parameter's current grad (missing grad =
  // zero). Throws before touching any parameter if some gradient is
  // non-finite; the error names that parameter.
  void step(std::vector<Parameter>& params, float lr);

  std::uint64_t steps() const noexcept { return step_; }
  const AdamWConfig& config() const noexcept { return config_; }

 private:
  struct Moments {
    std::vector<float> m, v;
  };

  AdamWConfig config_;
  std::uint64_t step_ = 0;
  std::vector<Moments> moments_;
};

/// Linear warmup from 0 to lr0 over `warmup_epochs`, then cosine decay to
/// lr0 * final_fraction at `total_epochs`.
struct LrSchedule {
  double lr0 = 0.001;
  double final_fraction = 0.01;
  double warmup_epochs = 3.0;
  double total_epochs = 50.0;
};

// `epoch` is fractional; throws when outside [0, total_epochs].
double lr_at(const LrSchedule& schedule, double epoch);

}  // namespace lumen
