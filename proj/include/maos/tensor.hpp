#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "maos/rng.hpp"

namespace maos {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

class Tape;

struct TensorData {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // lazily sized to values.size()
  bool requires_grad = false;
  int node = -1;  // index into the owning tape, -1 for leaves/constants
  std::uint64_t tape_id = 0;
};

// Dense 64-bit tensor handle. Copies share storage; ops never mutate inputs.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor gaussian(Shape shape, Rng& rng, double stddev, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(d_); }
  const Shape& shape() const { return d_->shape; }
  std::int64_t size() const { return static_cast<std::int64_t>(d_->values.size()); }

  std::vector<double>& values() { return d_->values; }
  const std::vector<double>& values() const { return d_->values; }
  double* data() { return d_->values.data(); }
  const double* data() const { return d_->values.data(); }

  // Scalar (single-element) access.
  double item() const;

  bool requires_grad() const { return d_->requires_grad; }
  void set_requires_grad(bool r) { d_->requires_grad = r; }

  // Allocates a zero gradient buffer on first use.
  std::vector<double>& grad();
  const std::vector<double>& grad() const;
  bool has_grad() const { return !d_->grad.empty(); }
  void zero_grad();

  // Value snapshot with no tape linkage and no gradient.
  Tensor detach() const;

  int node() const { return d_->node; }
  std::uint64_t tape_id() const { return d_->tape_id; }

  std::shared_ptr<TensorData> impl() const { return d_; }

 private:
  explicit Tensor(std::shared_ptr<TensorData> d) : d_(std::move(d)) {}
  std::shared_ptr<TensorData> d_;
  friend class Tape;
};

// Reverse-mode tape. Nodes are recorded in execution order, which is a
// topological order of the DAG; backward walks them once, in reverse.
class Tape {
 public:
  Tape();

  // Registers `out` as the product of `inputs` with the given backward rule.
  int record(const std::vector<int>& input_nodes, const Tensor& out,
             std::function<void()> backward_fn);

  std::uint64_t id() const { return id_; }
  std::size_t node_count() const { return nodes_.size(); }
  const std::vector<int>& inputs_of(int node) const { return nodes_[static_cast<std::size_t>(node)].inputs; }

  friend void backward(const Tensor& loss, Tape& tape);

 private:
  struct Node {
    std::vector<int> inputs;
    std::shared_ptr<TensorData> out;
    std::function<void()> bw;
  };
  std::vector<Node> nodes_;
  std::uint64_t id_;
};

// True when gradients should be pushed into `t` on behalf of `tape`.
bool wants_grad(const Tensor& t, const Tape* tape);

// Populates gradients of every participating requires_grad leaf of `loss`.
// Leaf gradients accumulate across calls; callers reset with zero_grad.
void backward(const Tensor& loss, Tape& tape);

// --- elementwise ---
Tensor relu(Tape* tape, const Tensor& x);
Tensor leaky_relu(Tape* tape, const Tensor& x, double slope);
Tensor tanh(Tape* tape, const Tensor& x);
Tensor sigmoid(Tape* tape, const Tensor& x);
Tensor log(Tape* tape, const Tensor& x);
Tensor abs(Tape* tape, const Tensor& x);
Tensor neg(Tape* tape, const Tensor& x);
Tensor scale(Tape* tape, const Tensor& x, double c);
Tensor clamp_min(Tape* tape, const Tensor& x, double lo);
Tensor add(Tape* tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape* tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape* tape, const Tensor& a, const Tensor& b);

// --- reductions (scalar output) ---
Tensor sum(Tape* tape, const Tensor& x);
Tensor mean(Tape* tape, const Tensor& x);

// --- structured ops ---
Tensor conv2d(Tape* tape, const Tensor& input, const Tensor& weight, const Tensor& bias,
              std::int64_t stride, std::int64_t padding, std::int64_t groups);
Tensor conv_transpose2d(Tape* tape, const Tensor& input, const Tensor& weight,
                        const Tensor& bias, std::int64_t stride, std::int64_t padding);
Tensor instance_norm(Tape* tape, const Tensor& input, double eps);

// Spatial window [row0,row0+h) x [col0,col0+w) of a [N,C,H,W] tensor.
// Gradient routes back into the window, zero elsewhere.
Tensor crop2d(Tape* tape, const Tensor& input, std::int64_t row0, std::int64_t col0,
              std::int64_t h, std::int64_t w);
// Channel range [c0,c1) of a [N,C,H,W] tensor.
Tensor slice_channels(Tape* tape, const Tensor& input, std::int64_t c0, std::int64_t c1);

// Compares the reverse-mode gradient of a scalar-valued function against
// central finite differences. Returns the max relative error with the
// denominator floored at 1e-4 so near-zero gradients are judged absolutely.
double grad_check(const std::function<Tensor(Tape*, const Tensor&)>& f, const Tensor& point,
                  double h);

}  // namespace maos
