#pragma once

// Dense float64 tensors with reverse-mode automatic differentiation.
//
// A Tensor is a cheap handle onto a shared node. Ops whose inputs require a
// gradient record a backward closure on the result node; backward() walks the
// resulting graph in reverse topological order. Two handles onto the same node
// alias the same storage, which is how parameter sharing is expressed.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace dualenc {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  const char* op = "leaf";
  std::uint64_t seq = 0;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  bool is_leaf() const { return !backward; }
  std::vector<double>& ensure_grad();
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor filled(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t size(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  // Direct writes into storage. Only meaningful for leaves (parameters,
  // inputs); ops already recorded against this tensor are not re-run.
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t i) const;
  double at(std::size_t row, std::size_t col) const;

  bool requires_grad() const;
  void set_requires_grad(bool value);
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  // Deep copy of the values without graph history.
  Tensor detach() const;
  bool shares_storage_with(const Tensor& other) const {
    return node_ != nullptr && node_ == other.node_;
  }

  const char* op_name() const;
  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// The executed ops reachable from a root, in topological order (inputs first).
class Tape {
 public:
  static Tape record(const Tensor& root);
  std::size_t size() const { return nodes_.size(); }
  std::vector<std::string> op_names() const;
  const std::vector<detail::Node*>& nodes() const { return nodes_; }

 private:
  std::vector<detail::Node*> nodes_;
};

// Populates grad on every requires_grad tensor reachable from `loss`.
// Leaf gradients accumulate across calls until zero_grad().
void backward(const Tensor& loss);

// ---- ops -----------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);

Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);
// x[n x d] + bias[d], broadcast over rows.
Tensor add_bias(const Tensor& x, const Tensor& bias);

Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor relu(const Tensor& x);
// tanh approximation
Tensor gelu(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// Row-wise softmax of x / temperature, max-subtracted.
Tensor softmax_rows(const Tensor& x, double temperature);

// Normalizes the last axis of x[n x d], then applies gain[d] and bias[d].
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-6);

// Rows of table[v x d] selected by ids; gradient scatters back into the table.
Tensor gather_rows(const Tensor& table, std::span<const int> ids);

// x is [batch*seq_len x d]; returns [batch x d], the mean over positions
// whose mask is nonzero. Masked positions are skipped, not zero-weighted.
Tensor masked_mean(const Tensor& x, std::span<const std::uint8_t> mask,
                   std::size_t batch, std::size_t seq_len);

// Multi-head scaled dot-product self-attention over packed sequences.
// q, k, v: [batch*seq_len x d_model]; keys at masked positions are excluded.
Tensor self_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                      std::span<const std::uint8_t> mask, std::size_t batch,
                      std::size_t seq_len, std::size_t heads);

// Each row divided by its L2 norm. Zero rows raise DegenerateError with the
// row index.
Tensor l2_normalize_rows(const Tensor& x);

// Diagonal of a square matrix as a vector.
Tensor pick_diagonal(const Tensor& x);

// Cosine similarity of two equal-length vectors (any shapes with equal numel).
double cosine_sim(const Tensor& u, const Tensor& v);
double cosine_sim(std::span<const double> u, std::span<const double> v);

// Row-independent C = A * B over raw row-major buffers: each output element is
// accumulated in ascending inner index, so a row's result does not depend on
// how many other rows are multiplied alongside it.
void gemm_rows(const double* a, const double* b, double* c, std::size_t m,
               std::size_t k, std::size_t n);

}  // namespace dualenc
