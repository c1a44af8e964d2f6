#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "dualenc/tensor.hpp"

namespace dualenc {

struct ParamEntry {
  Tensor tensor;
  bool trainable = true;
};

// Named parameter tensors. Iteration order is the lexicographic name order,
// which fixes the order of every traversal (init, checkpoint, optimizer).
class ParamStore {
 public:
  void add(const std::string& name, Tensor tensor, bool trainable = true);
  bool contains(const std::string& name) const;
  const ParamEntry& entry(const std::string& name) const;
  Tensor get(const std::string& name) const { return entry(name).tensor; }
  void set_trainable(const std::string& name, bool trainable);

  std::size_t size() const { return entries_.size(); }
  std::vector<std::string> names() const;
  // Trainable tensors in name order, each distinct storage exactly once.
  std::vector<std::pair<std::string, Tensor>> trainable() const;
  std::size_t element_count() const;

  // Deep copy: new storage, same values and flags.
  ParamStore clone() const;
  bool bitwise_equal(const ParamStore& other) const;
  void zero_grad();

  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

 private:
  std::map<std::string, ParamEntry> entries_;
};

bool bitwise_equal(std::span<const double> a, std::span<const double> b);

}  // namespace dualenc
