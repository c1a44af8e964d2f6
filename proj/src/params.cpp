#include "dualenc/params.hpp"

#include <cstring>

#include "dualenc/errors.hpp"

namespace dualenc {

void ParamStore::add(const std::string& name, Tensor tensor, bool trainable) {
  if (!tensor.defined()) throw ArgumentError("param '" + name + "' undefined");
  if (entries_.contains(name)) {
    throw ConfigError("duplicate parameter name '" + name + "'");
  }
  tensor.set_requires_grad(trainable);
  entries_.emplace(name, ParamEntry{std::move(tensor), trainable});
}

bool ParamStore::contains(const std::string& name) const {
  return entries_.contains(name);
}

const ParamEntry& ParamStore::entry(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) {
    throw ConfigError("unknown parameter '" + name + "'");
  }
  return it->second;
}

void ParamStore::set_trainable(const std::string& name, bool trainable) {
  auto it = entries_.find(name);
  if (it == entries_.end()) {
    throw ConfigError("unknown parameter '" + name + "'");
  }
  it->second.trainable = trainable;
  it->second.tensor.set_requires_grad(trainable);
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [name, e] : entries_) out.push_back(name);
  return out;
}

std::vector<std::pair<std::string, Tensor>> ParamStore::trainable() const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (const auto& [name, e] : entries_) {
    if (!e.trainable) continue;
    bool seen = false;
    for (const auto& [n, t] : out) seen = seen || t.shares_storage_with(e.tensor);
    if (!seen) out.emplace_back(name, e.tensor);
  }
  return out;
}

std::size_t ParamStore::element_count() const {
  std::size_t n = 0;
  for (const auto& [name, e] : entries_) n += e.tensor.numel();
  return n;
}

ParamStore ParamStore::clone() const {
  ParamStore out;
  for (const auto& [name, e] : entries_) {
    out.add(name, e.tensor.detach(), e.trainable);
  }
  return out;
}

bool bitwise_equal(std::span<const double> a, std::span<const double> b) {
  return a.size() == b.size() &&
         (a.empty() || std::memcmp(a.data(), b.data(), a.size_bytes()) == 0);
}

bool ParamStore::bitwise_equal(const ParamStore& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  auto it = other.entries_.begin();
  for (const auto& [name, e] : entries_) {
    if (name != it->first || e.trainable != it->second.trainable ||
        e.tensor.shape() != it->second.tensor.shape() ||
        !dualenc::bitwise_equal(e.tensor.data(), it->second.tensor.data())) {
      return false;
    }
    ++it;
  }
  return true;
}

void ParamStore::zero_grad() {
  for (auto& [name, e] : entries_) {
    Tensor t = e.tensor;
    t.zero_grad();
  }
}

}  // namespace dualenc
