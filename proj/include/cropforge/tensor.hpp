#pragma once

// Reverse-mode autodiff over dense row-major double tensors.
// Graphs are rebuilt per forward pass (define-by-run); backward walks the
// recorded nodes once in reverse topological order.

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace cropforge::ag {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

struct TensorError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Node {
  Shape shape;
  std::vector<double> value;
  bool requires_grad = false;
  std::vector<double> grad;  // empty until first accumulation
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this->grad, accumulates into parents' grads.
  std::function<void(Node&)> backprop;
  bool backward_spent = false;  // set on a loss root after backward()
  const char* op = "leaf";

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  static Tensor leaf(Shape shape, std::vector<double> data,
                     bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t numel() const { return node_->value.size(); }
  const std::vector<double>& data() const { return node_->value; }
  std::vector<double>& mutable_data() { return node_->value; }
  bool requires_grad() const { return node_->requires_grad; }
  const std::vector<double>& grad() const;
  bool has_grad() const { return !node_->grad.empty(); }
  void zero_grad() { node_->grad.clear(); }
  double item() const;

  std::shared_ptr<Node> node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// ---- forward ops ----------------------------------------------------------
// Binary elementwise ops (add/sub/mul/div/maximum/minimum) require equal
// shapes, or one operand broadcastable to the other: a scalar, or a shape
// that is a trailing suffix of the other (e.g. [D] against [N,D]).
// matmul contracts [r,k] x [k,c] -> [r,c].

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose2d(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor maximum(const Tensor& a, const Tensor& b);
Tensor minimum(const Tensor& a, const Tensor& b);
Tensor scalar_mul(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor sum(const Tensor& a, int axis);
Tensor mean(const Tensor& a, int axis);
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);
Tensor concat(const std::vector<Tensor>& ts, int axis);
Tensor index_select(const Tensor& a, int axis,
                    const std::vector<std::size_t>& indices);
Tensor reshape(const Tensor& a, Shape target);
Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);  // tanh approximation
Tensor sigmoid(const Tensor& a);
Tensor tanh_op(const Tensor& a);
Tensor softmax(const Tensor& a, int axis);
Tensor layernorm(const Tensor& a, double eps);  // normalizes the last axis
Tensor smooth_l1(const Tensor& x, const Tensor& y, double beta = 1.0);
Tensor l1(const Tensor& x, const Tensor& y);

// Populates grads of every requires_grad leaf reachable from `loss`.
// `loss` must be scalar; a second call on the same root throws.
void backward(Tensor& loss);

}  // namespace cropforge::ag
