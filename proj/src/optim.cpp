#include "dualenc/optim.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include "dualenc/errors.hpp"

namespace dualenc {

namespace {

double rms(std::span<const double> x) {
  double s = 0.0;
  for (double v : x) s += v * v;
  return std::sqrt(s / static_cast<double>(x.size()));
}

}  // namespace

std::string_view to_string(OptimizerKind kind) {
  return kind == OptimizerKind::kAdam ? "adam" : "adafactor";
}

OptimizerKind parse_optimizer(std::string_view name) {
  std::string key(name);
  for (char& c : key) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (key == "adafactor") return OptimizerKind::kAdafactor;
  if (key == "adam") return OptimizerKind::kAdam;
  throw ConfigError("invalid optimizer '" + std::string(name) + "'; valid: adafactor, adam");
}

std::vector<double> factored_second_moment(std::span<const double> row,
                                           std::span<const double> col) {
  double total = 0.0;
  for (double r : row) total += r;
  std::vector<double> v(row.size() * col.size());
  for (std::size_t i = 0; i < row.size(); ++i) {
    const double ri = row[i] / total;
    for (std::size_t j = 0; j < col.size(); ++j) v[i * col.size() + j] = ri * col[j];
  }
  return v;
}

void Adafactor::update(std::span<double> value, std::span<const double> grad,
                       std::size_t rows, std::size_t cols, AdafactorSlot& slot,
                       double lr) const {
  if (value.size() != grad.size() || value.size() != rows * cols) {
    throw DimensionError("adafactor: value/grad size mismatch");
  }
  const bool factored = config_.factored && rows > 1 && cols > 1;
  const std::size_t n = value.size();
  if (slot.step == 0) {
    if (factored) {
      slot.row.assign(rows, 0.0);
      slot.col.assign(cols, 0.0);
    } else {
      slot.full.assign(n, 0.0);
    }
  }
  ++slot.step;
  const double beta2 = 1.0 - std::pow(static_cast<double>(slot.step), -config_.decay_rate);

  std::vector<double> u(n);
  if (factored) {
    std::vector<double> row_sum(rows, 0.0), col_sum(cols, 0.0);
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t j = 0; j < cols; ++j) {
        const double g2 = grad[i * cols + j] * grad[i * cols + j] + config_.eps1;
        row_sum[i] += g2;
        col_sum[j] += g2;
      }
    }
    for (std::size_t i = 0; i < rows; ++i) slot.row[i] = beta2 * slot.row[i] + (1.0 - beta2) * row_sum[i];
    for (std::size_t j = 0; j < cols; ++j) slot.col[j] = beta2 * slot.col[j] + (1.0 - beta2) * col_sum[j];
    const auto v = factored_second_moment(slot.row, slot.col);
    for (std::size_t k = 0; k < n; ++k) u[k] = grad[k] / std::sqrt(v[k]);
  } else {
    for (std::size_t k = 0; k < n; ++k) {
      const double g2 = grad[k] * grad[k] + config_.eps1;
      slot.full[k] = beta2 * slot.full[k] + (1.0 - beta2) * g2;
      u[k] = grad[k] / std::sqrt(slot.full[k]);
    }
  }
  const double denom = std::max(1.0, rms(u) / config_.clip_threshold);
  double alpha = lr;
  if (config_.multiply_by_parameter_scale) alpha *= std::max(config_.eps2, rms(value));
  for (std::size_t k = 0; k < n; ++k) value[k] -= alpha * (u[k] / denom);
}

void Adafactor::step(const ParamStore& params, double lr) {
  for (auto& [name, tensor] : params.trainable()) {
    if (!tensor.has_grad()) continue;
    const auto& shape = tensor.shape();
    const std::size_t rows = shape.size() == 2 ? shape[0] : 1;
    const std::size_t cols = shape.size() == 2 ? shape[1] : tensor.numel();
    update(tensor.mutable_data(), tensor.grad(), rows, cols, slots_[name], lr);
  }
}

const AdafactorSlot* Adafactor::slot(const std::string& name) const {
  auto it = slots_.find(name);
  return it == slots_.end() ? nullptr : &it->second;
}

void Adam::step(const ParamStore& params, double lr) {
  for (auto& [name, tensor] : params.trainable()) {
    if (!tensor.has_grad()) continue;
    Slot& s = slots_[name];
    const std::size_t n = tensor.numel();
    if (s.step == 0) {
      s.m.assign(n, 0.0);
      s.v.assign(n, 0.0);
    }
    ++s.step;
    const double t = static_cast<double>(s.step);
    const double c1 = 1.0 - std::pow(config_.beta1, t);
    const double c2 = 1.0 - std::pow(config_.beta2, t);
    auto value = tensor.mutable_data();
    const auto grad = tensor.grad();
    for (std::size_t k = 0; k < n; ++k) {
      s.m[k] = config_.beta1 * s.m[k] + (1.0 - config_.beta1) * grad[k];
      s.v[k] = config_.beta2 * s.v[k] + (1.0 - config_.beta2) * grad[k] * grad[k];
      const double mhat = s.m[k] / c1;
      const double vhat = s.v[k] / c2;
      value[k] -= lr * mhat / (std::sqrt(vhat) + config_.eps);
    }
  }
}

std::unique_ptr<Optimizer> make_optimizer(OptimizerKind kind,
                                          const AdafactorConfig& adafactor,
                                          const AdamConfig& adam) {
  if (kind == OptimizerKind::kAdam) return std::make_unique<Adam>(adam);
  return std::make_unique<Adafactor>(adafactor);
}

}  // namespace dualenc
