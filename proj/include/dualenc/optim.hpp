#pragma once

#include <cstddef>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dualenc/params.hpp"

namespace dualenc {

enum class OptimizerKind { kAdafactor, kAdam };

std::string_view to_string(OptimizerKind kind);
OptimizerKind parse_optimizer(std::string_view name);

// Adafactor without momentum and with an external learning rate. Matrices
// keep row and column sums of the squared gradient; other shapes keep the
// full second moment.
struct AdafactorConfig {
  double eps1 = 1e-30;        // added to squared gradients
  double eps2 = 1e-3;         // floor of the parameter RMS scale
  double clip_threshold = 1.0;
  double decay_rate = 0.8;    // beta2_t = 1 - t^(-decay_rate)
  bool multiply_by_parameter_scale = false;
  bool factored = true;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Per-tensor optimizer state, exposed for inspection and tests.
struct AdafactorSlot {
  std::size_t step = 0;
  std::vector<double> row;   // factored: [rows]
  std::vector<double> col;   // factored: [cols]
  std::vector<double> full;  // unfactored: same size as the tensor
};

// Second-moment estimate implied by factored row/column accumulators:
// v[i][j] = row[i] * col[j] / sum(row).
std::vector<double> factored_second_moment(std::span<const double> row,
                                           std::span<const double> col);

class Optimizer {
 public:
  virtual ~Optimizer() = default;
  // Applies one update to every trainable tensor using its accumulated grad.
  // Tensors without a grad are treated as having a zero gradient.
  virtual void step(const ParamStore& params, double lr) = 0;
};

class Adafactor final : public Optimizer {
 public:
  explicit Adafactor(AdafactorConfig config = {}) : config_(config) {}
  void step(const ParamStore& params, double lr) override;

  // Single-tensor update; `slot` is created on first use.
  void update(std::span<double> value, std::span<const double> grad,
              std::size_t rows, std::size_t cols, AdafactorSlot& slot,
              double lr) const;
  const AdafactorSlot* slot(const std::string& name) const;
  const AdafactorConfig& config() const { return config_; }

 private:
  AdafactorConfig config_;
  std::map<std::string, AdafactorSlot> slots_;
};

class Adam final : public Optimizer {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}
  void step(const ParamStore& params, double lr) override;

 private:
  struct Slot {
    std::size_t step = 0;
    std::vector<double> m, v;
  };
  AdamConfig config_;
  std::map<std::string, Slot> slots_;
};

std::unique_ptr<Optimizer> make_optimizer(OptimizerKind kind,
                                          const AdafactorConfig& adafactor = {},
                                          const AdamConfig& adam = {});

}  // namespace dualenc
