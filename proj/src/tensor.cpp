#include "cropforge/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace cropforge::ag {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

namespace {

[[noreturn]] void fail(const std::string& msg) { throw TensorError(msg); }

void check_finite(const char* op, const std::vector<double>& v) {
  for (double x : v)
    if (!std::isfinite(x))
      fail(std::string(op) + ": non-finite value in output");
}

std::shared_ptr<Node> make_node(const char* op, Shape shape,
                                std::vector<double> value,
                                std::vector<std::shared_ptr<Node>> parents,
                                std::function<void(Node&)> backprop) {
  if (shape_numel(shape) != value.size())
    fail(std::string(op) + ": shape/data mismatch");
  check_finite(op, value);
  auto n = std::make_shared<Node>();
  n->op = op;
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->parents = std::move(parents);
  n->backprop = std::move(backprop);
  n->requires_grad = false;
  for (auto& p : n->parents)
    if (p->requires_grad) n->requires_grad = true;
  if (!n->requires_grad) {  // nothing upstream to differentiate
    n->backprop = nullptr;
    n->parents.clear();
  }
  return n;
}

int norm_axis(const char* op, int axis, std::size_t rank) {
  int a = axis < 0 ? axis + static_cast<int>(rank) : axis;
  if (a < 0 || a >= static_cast<int>(rank))
    fail(std::string(op) + ": axis " + std::to_string(axis) +
         " out of range for rank " + std::to_string(rank));
  return a;
}

// Axis iteration: outer * len * inner decomposition of a row-major tensor.
struct AxisView {
  std::size_t outer, len, inner;
};
AxisView axis_view(const Shape& s, int axis) {
  AxisView v{1, s[static_cast<std::size_t>(axis)], 1};
  for (int i = 0; i < axis; ++i) v.outer *= s[static_cast<std::size_t>(i)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i)
    v.inner *= s[i];
  return v;
}

// Broadcast plan for binary elementwise ops: returns (out_shape, repeat)
// where the smaller operand's buffer is tiled `repeat` times.
struct BroadcastPlan {
  Shape out;
  bool a_small = false, b_small = false;
  std::size_t small_n = 0;
};

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

BroadcastPlan plan_broadcast(const char* op, const Shape& a, const Shape& b) {
  BroadcastPlan p;
  if (a == b) {
    p.out = a;
    return p;
  }
  std::size_t na = shape_numel(a), nb = shape_numel(b);
  if ((nb == 1 || is_suffix(b, a)) && nb <= na) {
    p.out = a;
    p.b_small = true;
    p.small_n = nb;
    return p;
  }
  if ((na == 1 || is_suffix(a, b)) && na <= nb) {
    p.out = b;
    p.a_small = true;
    p.small_n = na;
    return p;
  }
  fail(std::string(op) + ": incompatible shapes " + shape_str(a) + " vs " +
       shape_str(b));
}

// Shared skeleton for binary elementwise ops with broadcasting.
Tensor binary_ew(const char* op, const Tensor& ta, const Tensor& tb,
                 double (*f)(double, double),
                 double (*dfa)(double, double),
                 double (*dfb)(double, double)) {
  auto pa = ta.node();
  auto pb = tb.node();
  BroadcastPlan plan = plan_broadcast(op, pa->shape, pb->shape);
  std::size_t n = shape_numel(plan.out);
  std::vector<double> out(n);
  const auto& av = pa->value;
  const auto& bv = pb->value;
  std::size_t sn = plan.small_n ? plan.small_n : n;
  for (std::size_t i = 0; i < n; ++i) {
    double x = plan.a_small ? av[i % sn] : av[i];
    double y = plan.b_small ? bv[i % sn] : bv[i];
    out[i] = f(x, y);
  }
  auto bp = [f, dfa, dfb, plan, sn](Node& node) {
    auto& a = *node.parents[0];
    auto& b = *node.parents[1];
    a.ensure_grad();
    b.ensure_grad();
    std::size_t n = node.value.size();
    for (std::size_t i = 0; i < n; ++i) {
      double x = plan.a_small ? a.value[i % sn] : a.value[i];
      double y = plan.b_small ? b.value[i % sn] : b.value[i];
      double g = node.grad[i];
      a.grad[plan.a_small ? i % sn : i] += g * dfa(x, y);
      b.grad[plan.b_small ? i % sn : i] += g * dfb(x, y);
    }
  };
  return Tensor(make_node(op, plan.out, std::move(out), {pa, pb}, bp));
}

// Unary elementwise skeleton; derivative receives (x, y).
Tensor unary_ew(const char* op, const Tensor& ta, double (*f)(double),
                double (*df)(double, double)) {
  auto pa = ta.node();
  std::vector<double> out(pa->value.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(pa->value[i]);
  auto bp = [df](Node& node) {
    auto& a = *node.parents[0];
    a.ensure_grad();
    for (std::size_t i = 0; i < node.value.size(); ++i)
      a.grad[i] += node.grad[i] * df(a.value[i], node.value[i]);
  };
  return Tensor(make_node(op, pa->shape, std::move(out), {pa}, bp));
}

}  // namespace

Tensor Tensor::leaf(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape_numel(shape) != data.size())
    fail("leaf: shape " + shape_str(shape) + " does not match data length " +
         std::to_string(data.size()));
  check_finite("leaf", data);
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(data);
  n->requires_grad = requires_grad;
  return Tensor(n);
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return leaf({}, {v}, requires_grad);
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  std::size_t n = shape_numel(shape);
  return leaf(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

const std::vector<double>& Tensor::grad() const {
  if (node_->grad.empty()) fail("grad: not populated (run backward first)");
  return node_->grad;
}

double Tensor::item() const {
  if (node_->value.size() != 1) fail("item: tensor is not scalar");
  return node_->value[0];
}

Tensor matmul(const Tensor& ta, const Tensor& tb) {
  auto pa = ta.node();
  auto pb = tb.node();
  if (pa->shape.size() != 2 || pb->shape.size() != 2 ||
      pa->shape[1] != pb->shape[0])
    fail("matmul: incompatible shapes " + shape_str(pa->shape) + " x " +
         shape_str(pb->shape));
  std::size_t r = pa->shape[0], k = pa->shape[1], c = pb->shape[1];
  std::vector<double> out(r * c, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t t = 0; t < k; ++t) {
      double av = pa->value[i * k + t];
      if (av == 0.0) continue;
      for (std::size_t j = 0; j < c; ++j)
        out[i * c + j] += av * pb->value[t * c + j];
    }
  auto bp = [r, k, c](Node& node) {
    auto& a = *node.parents[0];
    auto& b = *node.parents[1];
    a.ensure_grad();
    b.ensure_grad();
    // dA = dC * B^T ; dB = A^T * dC
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) {
        double g = node.grad[i * c + j];
        if (g == 0.0) continue;
        for (std::size_t t = 0; t < k; ++t) {
          a.grad[i * k + t] += g * b.value[t * c + j];
          b.grad[t * c + j] += g * a.value[i * k + t];
        }
      }
  };
  return Tensor(make_node("matmul", {r, c}, std::move(out), {pa, pb}, bp));
}

Tensor transpose2d(const Tensor& ta) {
  auto pa = ta.node();
  if (pa->shape.size() != 2)
    fail("transpose2d: expected rank 2, got " + shape_str(pa->shape));
  std::size_t r = pa->shape[0], c = pa->shape[1];
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = pa->value[i * c + j];
  auto bp = [r, c](Node& node) {
    auto& a = *node.parents[0];
    a.ensure_grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j)
        a.grad[i * c + j] += node.grad[j * r + i];
  };
  return Tensor(make_node("transpose2d", {c, r}, std::move(out), {pa}, bp));
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_ew(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_ew(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_ew(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_ew(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

Tensor maximum(const Tensor& a, const Tensor& b) {
  return binary_ew(
      "maximum", a, b, [](double x, double y) { return x > y ? x : y; },
      [](double x, double y) { return x >= y ? 1.0 : 0.0; },
      [](double x, double y) { return x >= y ? 0.0 : 1.0; });
}

Tensor minimum(const Tensor& a, const Tensor& b) {
  return binary_ew(
      "minimum", a, b, [](double x, double y) { return x < y ? x : y; },
      [](double x, double y) { return x <= y ? 1.0 : 0.0; },
      [](double x, double y) { return x <= y ? 0.0 : 1.0; });
}

Tensor scalar_mul(const Tensor& ta, double s) {
  auto pa = ta.node();
  std::vector<double> out(pa->value.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa->value[i] * s;
  auto bp = [s](Node& node) {
    auto& a = *node.parents[0];
    a.ensure_grad();
    for (std::size_t i = 0; i < node.value.size(); ++i)
      a.grad[i] += node.grad[i] * s;
  };
  return Tensor(make_node("scalar_mul", pa->shape, std::move(out), {pa}, bp));
}

Tensor add_scalar(const Tensor& ta, double s) {
  auto pa = ta.node();
  std::vector<double> out(pa->value.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa->value[i] + s;
  auto bp = [](Node& node) {
    auto& a = *node.parents[0];
    a.ensure_grad();
    for (std::size_t i = 0; i < node.value.size(); ++i)
      a.grad[i] += node.grad[i];
  };
  return Tensor(make_node("add_scalar", pa->shape, std::move(out), {pa}, bp));
}

Tensor sum(const Tensor& ta, int axis) {
  auto pa = ta.node();
  int ax = norm_axis("sum", axis, pa->shape.size());
  AxisView v = axis_view(pa->shape, ax);
  Shape out_shape = pa->shape;
  out_shape.erase(out_shape.begin() + ax);
  std::vector<double> out(v.outer * v.inner, 0.0);
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t l = 0; l < v.len; ++l)
      for (std::size_t in = 0; in < v.inner; ++in)
        out[o * v.inner + in] += pa->value[(o * v.len + l) * v.inner + in];
  auto bp = [v](Node& node) {
    auto& a = *node.parents[0];
    a.ensure_grad();
    for (std::size_t o = 0; o < v.outer; ++o)
      for (std::size_t l = 0; l < v.len; ++l)
        for (std::size_t in = 0; in < v.inner; ++in)
          a.grad[(o * v.len + l) * v.inner + in] +=
              node.grad[o * v.inner + in];
  };
  return Tensor(make_node("sum", out_shape, std::move(out), {pa}, bp));
}

Tensor mean(const Tensor& ta, int axis) {
  auto pa = ta.node();
  int ax = norm_axis("mean", axis, pa->shape.size());
  double inv = 1.0 / static_cast<double>(pa->shape[static_cast<std::size_t>(ax)]);
  return scalar_mul(sum(ta, ax), inv);
}

Tensor sum_all(const Tensor& ta) {
  auto pa = ta.node();
  double s = std::accumulate(pa->value.begin(), pa->value.end(), 0.0);
  auto bp = [](Node& node) {
    auto& a = *node.parents[0];
    a.ensure_grad();
    for (std::size_t i = 0; i < a.value.size(); ++i)
      a.grad[i] += node.grad[0];
  };
  return Tensor(make_node("sum_all", {}, {s}, {pa}, bp));
}

Tensor mean_all(const Tensor& ta) {
  return scalar_mul(sum_all(ta), 1.0 / static_cast<double>(ta.numel()));
}

Tensor concat(const std::vector<Tensor>& ts, int axis) {
  if (ts.empty()) fail("concat: empty input list");
  auto first = ts[0].node();
  int ax = norm_axis("concat", axis, first->shape.size());
  Shape out_shape = first->shape;
  std::size_t total_len = 0;
  std::vector<std::shared_ptr<Node>> parents;
  for (const auto& t : ts) {
    auto p = t.node();
    Shape s = p->shape;
    if (s.size() != out_shape.size())
      fail("concat: rank mismatch " + shape_str(s));
    for (std::size_t i = 0; i < s.size(); ++i)
      if (static_cast<int>(i) != ax && s[i] != out_shape[i])
        fail("concat: shape mismatch " + shape_str(s) + " vs " +
             shape_str(out_shape));
    total_len += s[static_cast<std::size_t>(ax)];
    parents.push_back(p);
  }
  out_shape[static_cast<std::size_t>(ax)] = total_len;
  AxisView ov = axis_view(out_shape, ax);
  std::vector<double> out(shape_numel(out_shape));
  std::vector<std::size_t> offsets;  // per-input start along the axis
  std::size_t off = 0;
  for (const auto& t : ts) {
    offsets.push_back(off);
    AxisView iv = axis_view(t.node()->shape, ax);
    const auto& src = t.node()->value;
    for (std::size_t o = 0; o < iv.outer; ++o)
      for (std::size_t l = 0; l < iv.len; ++l)
        for (std::size_t in = 0; in < iv.inner; ++in)
          out[(o * ov.len + off + l) * ov.inner + in] =
              src[(o * iv.len + l) * iv.inner + in];
    off += iv.len;
  }
  auto bp = [ov, offsets, ax](Node& node) {
    for (std::size_t pi = 0; pi < node.parents.size(); ++pi) {
      auto& a = *node.parents[pi];
      a.ensure_grad();
      AxisView iv = axis_view(a.shape, ax);
      std::size_t off = offsets[pi];
      for (std::size_t o = 0; o < iv.outer; ++o)
        for (std::size_t l = 0; l < iv.len; ++l)
          for (std::size_t in = 0; in < iv.inner; ++in)
            a.grad[(o * iv.len + l) * iv.inner + in] +=
                node.grad[(o * ov.len + off + l) * ov.inner + in];
    }
  };
  return Tensor(
      make_node("concat", out_shape, std::move(out), std::move(parents), bp));
}

Tensor index_select(const Tensor& ta, int axis,
                    const std::vector<std::size_t>& indices) {
  auto pa = ta.node();
  int ax = norm_axis("index_select", axis, pa->shape.size());
  AxisView v = axis_view(pa->shape, ax);
  for (auto idx : indices)
    if (idx >= v.len)
      fail("index_select: index " + std::to_string(idx) +
           " out of range for axis length " + std::to_string(v.len));
  Shape out_shape = pa->shape;
  out_shape[static_cast<std::size_t>(ax)] = indices.size();
  std::vector<double> out(shape_numel(out_shape));
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t l = 0; l < indices.size(); ++l)
      for (std::size_t in = 0; in < v.inner; ++in)
        out[(o * indices.size() + l) * v.inner + in] =
            pa->value[(o * v.len + indices[l]) * v.inner + in];
  auto bp = [v, indices](Node& node) {
    auto& a = *node.parents[0];
    a.ensure_grad();
    for (std::size_t o = 0; o < v.outer; ++o)
      for (std::size_t l = 0; l < indices.size(); ++l)
        for (std::size_t in = 0; in < v.inner; ++in)
          a.grad[(o * v.len + indices[l]) * v.inner + in] +=
              node.grad[(o * indices.size() + l) * v.inner + in];
  };
  return Tensor(make_node("index_select", out_shape, std::move(out), {pa}, bp));
}

Tensor reshape(const Tensor& ta, Shape target) {
  auto pa = ta.node();
  if (shape_numel(target) != pa->value.size())
    fail("reshape: cannot view " + shape_str(pa->shape) + " as " +
         shape_str(target));
  auto bp = [](Node& node) {
    auto& a = *node.parents[0];
    a.ensure_grad();
    for (std::size_t i = 0; i < node.value.size(); ++i)
      a.grad[i] += node.grad[i];
  };
  return Tensor(make_node("reshape", target, pa->value, {pa}, bp));
}

Tensor relu(const Tensor& a) {
  return unary_ew(
      "relu", a, [](double x) { return x > 0 ? x : 0.0; },
      [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& a) {
  static const double c = std::sqrt(2.0 / M_PI);
  return unary_ew(
      "gelu", a,
      [](double x) {
        double t = std::tanh(c * (x + 0.044715 * x * x * x));
        return 0.5 * x * (1.0 + t);
      },
      [](double x, double) {
        double u = c * (x + 0.044715 * x * x * x);
        double t = std::tanh(u);
        double du = c * (1.0 + 3.0 * 0.044715 * x * x);
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
      });
}

Tensor sigmoid(const Tensor& a) {
  return unary_ew(
      "sigmoid", a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh_op(const Tensor& a) {
  return unary_ew(
      "tanh", a, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor softmax(const Tensor& ta, int axis) {
  auto pa = ta.node();
  int ax = norm_axis("softmax", axis, pa->shape.size());
  AxisView v = axis_view(pa->shape, ax);
  std::vector<double> out(pa->value.size());
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t in = 0; in < v.inner; ++in) {
      double mx = -INFINITY;
      for (std::size_t l = 0; l < v.len; ++l)
        mx = std::max(mx, pa->value[(o * v.len + l) * v.inner + in]);
      double z = 0.0;
      for (std::size_t l = 0; l < v.len; ++l) {
        std::size_t i = (o * v.len + l) * v.inner + in;
        out[i] = std::exp(pa->value[i] - mx);
        z += out[i];
      }
      for (std::size_t l = 0; l < v.len; ++l)
        out[(o * v.len + l) * v.inner + in] /= z;
    }
  auto bp = [v](Node& node) {
    auto& a = *node.parents[0];
    a.ensure_grad();
    for (std::size_t o = 0; o < v.outer; ++o)
      for (std::size_t in = 0; in < v.inner; ++in) {
        double dot = 0.0;
        for (std::size_t l = 0; l < v.len; ++l) {
          std::size_t i = (o * v.len + l) * v.inner + in;
          dot += node.grad[i] * node.value[i];
        }
        for (std::size_t l = 0; l < v.len; ++l) {
          std::size_t i = (o * v.len + l) * v.inner + in;
          a.grad[i] += node.value[i] * (node.grad[i] - dot);
        }
      }
  };
  return Tensor(make_node("softmax", pa->shape, std::move(out), {pa}, bp));
}

Tensor layernorm(const Tensor& ta, double eps) {
  auto pa = ta.node();
  if (pa->shape.empty()) fail("layernorm: scalar input");
  std::size_t d = pa->shape.back();
  std::size_t rows = pa->value.size() / d;
  std::vector<double> out(pa->value.size());
  std::vector<double> inv_std(rows), mu(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double m = 0.0;
    for (std::size_t j = 0; j < d; ++j) m += pa->value[r * d + j];
    m /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      double c = pa->value[r * d + j] - m;
      var += c * c;
    }
    var /= static_cast<double>(d);
    double is = 1.0 / std::sqrt(var + eps);
    mu[r] = m;
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j)
      out[r * d + j] = (pa->value[r * d + j] - m) * is;
  }
  auto bp = [d, rows, inv_std](Node& node) {
    auto& a = *node.parents[0];
    a.ensure_grad();
    double dd = static_cast<double>(d);
    for (std::size_t r = 0; r < rows; ++r) {
      double gsum = 0.0, gysum = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        gsum += node.grad[r * d + j];
        gysum += node.grad[r * d + j] * node.value[r * d + j];
      }
      for (std::size_t j = 0; j < d; ++j) {
        double y = node.value[r * d + j];
        a.grad[r * d + j] +=
            inv_std[r] * (node.grad[r * d + j] - gsum / dd - y * gysum / dd);
      }
    }
  };
  return Tensor(make_node("layernorm", pa->shape, std::move(out), {pa}, bp));
}

Tensor smooth_l1(const Tensor& x, const Tensor& y, double beta) {
  if (beta <= 0) fail("smooth_l1: beta must be positive");
  auto px = x.node();
  auto py = y.node();
  if (px->shape != py->shape)
    fail("smooth_l1: shape mismatch " + shape_str(px->shape) + " vs " +
         shape_str(py->shape));
  std::size_t n = px->value.size();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    double d = px->value[i] - py->value[i];
    out[i] = std::abs(d) < beta ? 0.5 * d * d / beta : std::abs(d) - 0.5 * beta;
  }
  auto bp = [beta](Node& node) {
    auto& a = *node.parents[0];
    auto& b = *node.parents[1];
    a.ensure_grad();
    b.ensure_grad();
    for (std::size_t i = 0; i < node.value.size(); ++i) {
      double d = a.value[i] - b.value[i];
      double dx = std::abs(d) < beta ? d / beta : (d > 0 ? 1.0 : -1.0);
      a.grad[i] += node.grad[i] * dx;
      b.grad[i] -= node.grad[i] * dx;
    }
  };
  return Tensor(make_node("smooth_l1", px->shape, std::move(out), {px, py}, bp));
}

Tensor l1(const Tensor& x, const Tensor& y) {
  auto px = x.node();
  auto py = y.node();
  if (px->shape != py->shape)
    fail("l1: shape mismatch " + shape_str(px->shape) + " vs " +
         shape_str(py->shape));
  std::size_t n = px->value.size();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i)
    out[i] = std::abs(px->value[i] - py->value[i]);
  auto bp = [](Node& node) {
    auto& a = *node.parents[0];
    auto& b = *node.parents[1];
    a.ensure_grad();
    b.ensure_grad();
    for (std::size_t i = 0; i < node.value.size(); ++i) {
      double d = a.value[i] - b.value[i];
      double s = d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0);
      a.grad[i] += node.grad[i] * s;
      b.grad[i] -= node.grad[i] * s;
    }
  };
  return Tensor(make_node("l1", px->shape, std::move(out), {px, py}, bp));
}

void backward(Tensor& loss) {
  auto root = loss.node();
  if (!root) fail("backward: undefined tensor");
  if (root->value.size() != 1)
    fail("backward: loss must be scalar, got " + shape_str(root->shape));
  if (root->backward_spent)
    fail("backward: already called on this loss");
  root->backward_spent = true;

  // Iterative post-order DFS for reverse topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.get(), 0}};
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root->ensure_grad();
  root->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backprop && !n->grad.empty()) n->backprop(*n);
  }
}

}  // namespace cropforge::ag
