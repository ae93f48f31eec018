#include "cropforge/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "cropforge/dataset.hpp"
#include "cropforge/decoder.hpp"
#include "cropforge/rng.hpp"
#include "cropforge/training.hpp"

namespace cropforge {

using ag::Tensor;

GradCheckCase check_gradients(const std::string& name,
                              std::vector<Tensor>& leaves,
                              const std::function<Tensor()>& build_scalar,
                              double h, double rel_tol, double abs_floor,
                              std::size_t max_coords,
                              std::uint64_t subsample_seed) {
  for (auto& t : leaves) t.zero_grad();
  Tensor loss = build_scalar();
  ag::backward(loss);
  std::vector<std::vector<double>> analytic;
  for (auto& t : leaves)
    analytic.push_back(t.has_grad() ? t.grad()
                                    : std::vector<double>(t.numel(), 0.0));

  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t li = 0; li < leaves.size(); ++li)
    for (std::size_t ci = 0; ci < leaves[li].numel(); ++ci)
      coords.emplace_back(li, ci);
  if (max_coords > 0 && coords.size() > max_coords) {
    std::mt19937_64 rng(subsample_seed);
    for (std::size_t k = 0; k < max_coords; ++k) {
      std::uniform_int_distribution<std::size_t> pick(k, coords.size() - 1);
      std::swap(coords[k], coords[pick(rng)]);
    }
    coords.resize(max_coords);
  }

  GradCheckCase res;
  res.name = name;
  for (auto [li, ci] : coords) {
    double orig = leaves[li].mutable_data()[ci];
    leaves[li].mutable_data()[ci] = orig + h;
    double fp = build_scalar().item();
    leaves[li].mutable_data()[ci] = orig - h;
    double fm = build_scalar().item();
    leaves[li].mutable_data()[ci] = orig;
    double num = (fp - fm) / (2.0 * h);
    double a = analytic[li][ci];
    double scale = std::max(std::abs(a), std::abs(num));
    double err = std::abs(a - num);
    if (err > abs_floor + rel_tol * scale) res.passed = false;
    // Denominator floored so a coordinate passing on the absolute floor
    // never reports a relative error above rel_tol.
    res.worst_rel_err = std::max(
        res.worst_rel_err, err / std::max(scale, abs_floor / rel_tol));
    ++res.coords_checked;
  }
  return res;
}

namespace {

struct Draw {
  std::mt19937_64 rng;
  explicit Draw(std::uint64_t seed, const std::string& label)
      : rng(make_rng(seed, "gradcheck:" + label)) {}
  double u(double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
  }
  std::size_t dim(std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  }
  std::vector<double> vec(std::size_t n, double lo = -2.0, double hi = 2.0) {
    std::vector<double> v(n);
    for (auto& x : v) x = u(lo, hi);
    return v;
  }
  // Values kept clear of a non-differentiable point at `kink`.
  std::vector<double> vec_away(std::size_t n, double kink, double clearance) {
    auto v = vec(n);
    for (auto& x : v)
      if (std::abs(x - kink) < clearance)
        x = kink + (x >= kink ? clearance : -clearance) * 2.0;
    return v;
  }
};

using OpCase = std::function<GradCheckCase(std::uint64_t seed, int round)>;

GradCheckCase run_rounds(const std::string& name, std::uint64_t seed,
                         int rounds, const OpCase& one) {
  GradCheckCase agg;
  agg.name = name;
  for (int r = 0; r < rounds; ++r) {
    auto c = one(seed, r);
    agg.worst_rel_err = std::max(agg.worst_rel_err, c.worst_rel_err);
    agg.coords_checked += c.coords_checked;
    agg.passed = agg.passed && c.passed;
  }
  return agg;
}

GradCheckCase decoder_loss_case(std::uint64_t seed, int round) {
  std::string label = "decoder:" + std::to_string(round);
  Draw d(seed, label);

  DecoderConfig cfg{3, 1, 8, 2, 16, 0.5};
  DecoderModel model(cfg, mix_seed(seed, label + ":model"));
  // Non-zero output heads so their gradients are exercised too.
  for (auto& [name, p] : model.params())
    if (name.find("offset_head.w3") != std::string::npos ||
        name.find("score_head") != std::string::npos ||
        name.find(".b3") != std::string::npos)
      for (auto& x : p.mutable_data()) x = d.u(-0.05, 0.05);

  // Synthetic token field (16 tokens, dim 8) standing in for an encoder.
  std::size_t n_tok = 16;
  EncoderOutput enc;
  enc.grid_side = 4;
  enc.dim = cfg.model_dim;
  enc.image_tokens = d.vec(n_tok * cfg.model_dim, -1.0, 1.0);
  for (std::size_t t = 0; t < n_tok; ++t) {
    double cx = (static_cast<double>(t % 4) + 0.5) / 4.0;
    double cy = (static_cast<double>(t / 4) + 0.5) / 4.0;
    enc.initial_boxes.push_back(Box{cx, cy, 0.25, 0.25});
    enc.is_background.push_back(0);
  }

  Selection sel;
  sel.token_indices = {5, 10};
  for (auto ti : sel.token_indices) {
    sel.tokens.emplace_back(
        enc.image_tokens.begin() + static_cast<long>(ti * cfg.model_dim),
        enc.image_tokens.begin() + static_cast<long>((ti + 1) * cfg.model_dim));
    sel.boxes.push_back(enc.initial_boxes[ti]);
    sel.similarities.push_back(1.0);
  }
  Box union_b = union_box(sel.boxes);

  std::vector<ScoredBox> gt = {
      {Box{d.u(0.3, 0.5), d.u(0.3, 0.5), 0.45, 0.4}, 5.0},
      {Box{d.u(0.3, 0.5), d.u(0.4, 0.6), 0.5, 0.45}, 4.3},
      {Box{0.8, 0.8, 0.2, 0.2}, 1.5}};
  TrainConfig tc;

  Tensor tokens = tokens_as_tensor(enc);
  Tensor pos = pos_codes_as_tensor(enc);
  std::vector<Tensor> leaves;
  for (auto& [name, p] : model.params()) leaves.push_back(p);

  auto build = [&]() {
    Tensor q = model.build_query(&sel);
    DecoderOutput out = model.decode(q, tokens, pos, union_b);
    return set_loss(out, gt, tc).total_tensor;
  };
  return check_gradients("decoder+set_loss", leaves, build, 1e-6, 1e-4, 1e-8,
                         60, mix_seed(seed, label + ":coords"));
}

}  // namespace

std::vector<GradCheckCase> run_gradcheck(std::uint64_t seed, int rounds,
                                         bool include_decoder) {
  std::vector<GradCheckCase> out;
  auto leaf = [](const ag::Shape& s, std::vector<double> v) {
    return Tensor::leaf(s, std::move(v), true);
  };
  auto op_case = [&](const std::string& name,
                     const std::function<std::pair<
                         std::vector<Tensor>, std::function<Tensor()>>(Draw&)>&
                         setup) {
    out.push_back(run_rounds(name, seed, rounds, [&](std::uint64_t sd, int r) {
      Draw d(sd, name + ":" + std::to_string(r));
      auto [leaves, fwd] = setup(d);
      Tensor probe = fwd();
      Tensor w = Tensor::leaf(
          probe.shape(),
          Draw(sd, name + ":w:" + std::to_string(r)).vec(probe.numel(), -1.0,
                                                         1.0));
      auto build = [fwd = fwd, w]() {
        Tensor t = fwd();
        return t.shape().empty() ? t : ag::sum_all(ag::mul(t, w));
      };
      return check_gradients(name, leaves, build);
    }));
  };

  op_case("matmul", [&](Draw& d) {
    std::size_t r = d.dim(1, 4), k = d.dim(1, 4), c = d.dim(1, 4);
    Tensor a = leaf({r, k}, d.vec(r * k));
    Tensor b = leaf({k, c}, d.vec(k * c));
    return std::pair{std::vector<Tensor>{a, b},
                     std::function<Tensor()>(
                         [a, b]() { return ag::matmul(a, b); })};
  });
  op_case("transpose2d", [&](Draw& d) {
    std::size_t r = d.dim(1, 4), c = d.dim(1, 4);
    Tensor a = leaf({r, c}, d.vec(r * c));
    return std::pair{std::vector<Tensor>{a}, std::function<Tensor()>([a]() {
                       return ag::transpose2d(a);
                     })};
  });
  auto binary = [&](const std::string& name,
                    Tensor (*op)(const Tensor&, const Tensor&),
                    bool avoid_ties, bool nonzero_denom) {
    op_case(name, [&, op, avoid_ties, nonzero_denom](Draw& d) {
      std::size_t r = d.dim(1, 4), c = d.dim(1, 4);
      bool broadcast = d.dim(0, 1) == 1;
      Tensor a = leaf({r, c}, d.vec(r * c));
      std::size_t bn = broadcast ? c : r * c;
      std::vector<double> bv = d.vec(bn);
      if (nonzero_denom)
        for (auto& x : bv) x = (x >= 0 ? 1.0 : -1.0) * (0.5 + std::abs(x));
      Tensor b = leaf(broadcast ? ag::Shape{c} : ag::Shape{r, c}, bv);
      if (avoid_ties) {
        auto& av = a.mutable_data();
        const auto& bvv = b.data();
        for (std::size_t i = 0; i < av.size(); ++i) {
          double other = bvv[broadcast ? i % c : i];
          if (std::abs(av[i] - other) < 1e-3)
            av[i] = other + (av[i] >= other ? 2e-3 : -2e-3);
        }
      }
      return std::pair{std::vector<Tensor>{a, b},
                       std::function<Tensor()>(
                           [op, a, b]() { return op(a, b); })};
    });
  };
  binary("add", &ag::add, false, false);
  binary("sub", &ag::sub, false, false);
  binary("mul", &ag::mul, false, false);
  binary("div", &ag::div, false, true);
  binary("maximum", &ag::maximum, true, false);
  binary("minimum", &ag::minimum, true, false);
  op_case("scalar_mul", [&](Draw& d) {
    std::size_t n = d.dim(2, 8);
    Tensor a = leaf({n}, d.vec(n));
    double s = d.u(-3.0, 3.0);
    return std::pair{std::vector<Tensor>{a}, std::function<Tensor()>([a, s]() {
                       return ag::scalar_mul(a, s);
                     })};
  });
  op_case("add_scalar", [&](Draw& d) {
    std::size_t n = d.dim(2, 8);
    Tensor a = leaf({n}, d.vec(n));
    double s = d.u(-3.0, 3.0);
    return std::pair{std::vector<Tensor>{a}, std::function<Tensor()>([a, s]() {
                       return ag::add_scalar(a, s);
                     })};
  });
  auto reducer = [&](const std::string& name, Tensor (*op)(const Tensor&,
                                                           int)) {
    op_case(name, [&, op](Draw& d) {
      std::size_t r = d.dim(1, 4), c = d.dim(1, 4);
      int axis = static_cast<int>(d.dim(0, 1));
      Tensor a = leaf({r, c}, d.vec(r * c));
      return std::pair{std::vector<Tensor>{a},
                       std::function<Tensor()>(
                           [op, a, axis]() { return op(a, axis); })};
    });
  };
  reducer("sum", &ag::sum);
  reducer("mean", &ag::mean);
  op_case("sum_all", [&](Draw& d) {
    std::size_t r = d.dim(1, 4), c = d.dim(1, 4);
    Tensor a = leaf({r, c}, d.vec(r * c));
    return std::pair{std::vector<Tensor>{a}, std::function<Tensor()>([a]() {
                       return ag::sum_all(a);
                     })};
  });
  op_case("mean_all", [&](Draw& d) {
    std::size_t r = d.dim(1, 4), c = d.dim(1, 4);
    Tensor a = leaf({r, c}, d.vec(r * c));
    return std::pair{std::vector<Tensor>{a}, std::function<Tensor()>([a]() {
                       return ag::mean_all(a);
                     })};
  });
  op_case("concat", [&](Draw& d) {
    std::size_t c = d.dim(1, 4), r1 = d.dim(1, 3), r2 = d.dim(1, 3);
    int axis = static_cast<int>(d.dim(0, 1));
    Tensor a, b;
    if (axis == 0) {
      a = leaf({r1, c}, d.vec(r1 * c));
      b = leaf({r2, c}, d.vec(r2 * c));
    } else {
      a = leaf({c, r1}, d.vec(c * r1));
      b = leaf({c, r2}, d.vec(c * r2));
    }
    return std::pair{std::vector<Tensor>{a, b},
                     std::function<Tensor()>([a, b, axis]() {
                       return ag::concat({a, b}, axis);
                     })};
  });
  op_case("index_select", [&](Draw& d) {
    std::size_t r = d.dim(2, 5), c = d.dim(1, 4);
    int axis = static_cast<int>(d.dim(0, 1));
    std::size_t extent = axis == 0 ? r : c;
    std::vector<std::size_t> idx(d.dim(1, 4));
    for (auto& i : idx) i = d.dim(0, extent - 1);  // repeats allowed
    Tensor a = leaf({r, c}, d.vec(r * c));
    return std::pair{std::vector<Tensor>{a},
                     std::function<Tensor()>([a, axis, idx]() {
                       return ag::index_select(a, axis, idx);
                     })};
  });
  op_case("reshape", [&](Draw& d) {
    std::size_t r = d.dim(1, 4), c = d.dim(1, 4);
    Tensor a = leaf({r, c}, d.vec(r * c));
    return std::pair{std::vector<Tensor>{a},
                     std::function<Tensor()>([a, r, c]() {
                       return ag::reshape(a, {r * c});
                     })};
  });
  auto unary = [&](const std::string& name, Tensor (*op)(const Tensor&),
                   bool avoid_zero) {
    op_case(name, [&, op, avoid_zero](Draw& d) {
      std::size_t n = d.dim(2, 10);
      Tensor a = leaf({n}, avoid_zero ? d.vec_away(n, 0.0, 1e-3) : d.vec(n));
      return std::pair{std::vector<Tensor>{a},
                       std::function<Tensor()>([op, a]() { return op(a); })};
    });
  };
  unary("relu", &ag::relu, true);
  unary("gelu", &ag::gelu, false);
  unary("sigmoid", &ag::sigmoid, false);
  unary("tanh", &ag::tanh_op, false);
  op_case("softmax", [&](Draw& d) {
    std::size_t r = d.dim(1, 4), c = d.dim(2, 5);
    int axis = static_cast<int>(d.dim(0, 1));
    Tensor a = leaf({r, c}, d.vec(r * c));
    return std::pair{std::vector<Tensor>{a},
                     std::function<Tensor()>(
                         [a, axis]() { return ag::softmax(a, axis); })};
  });
  op_case("layernorm", [&](Draw& d) {
    std::size_t r = d.dim(1, 4), c = d.dim(2, 6);
    Tensor a = leaf({r, c}, d.vec(r * c));
    return std::pair{std::vector<Tensor>{a}, std::function<Tensor()>([a]() {
                       return ag::layernorm(a, 1e-5);
                     })};
  });
  op_case("smooth_l1", [&](Draw& d) {
    std::size_t n = d.dim(2, 8);
    double beta = d.u(0.5, 1.5);
    Tensor x = leaf({n}, d.vec(n));
    std::vector<double> yv = d.vec(n);
    const auto& xv = x.data();
    for (std::size_t i = 0; i < n; ++i) {
      double diff = xv[i] - yv[i];
      if (std::abs(std::abs(diff) - beta) < 1e-3)
        yv[i] = xv[i] - (diff >= 0 ? beta + 2e-3 : -(beta + 2e-3));
    }
    Tensor y = leaf({n}, yv);
    return std::pair{std::vector<Tensor>{x, y},
                     std::function<Tensor()>([x, y, beta]() {
                       return ag::smooth_l1(x, y, beta);
                     })};
  });
  op_case("l1", [&](Draw& d) {
    std::size_t n = d.dim(2, 8);
    Tensor x = leaf({n}, d.vec(n));
    std::vector<double> yv = d.vec(n);
    const auto& xv = x.data();
    for (std::size_t i = 0; i < n; ++i)
      if (std::abs(xv[i] - yv[i]) < 1e-3)
        yv[i] = xv[i] + (yv[i] >= xv[i] ? -2e-3 : 2e-3);
    Tensor y = leaf({n}, yv);
    return std::pair{std::vector<Tensor>{x, y},
                     std::function<Tensor()>(
                         [x, y]() { return ag::l1(x, y); })};
  });
  op_case("matmul_chain", [&](Draw& d) {
    std::size_t a1 = d.dim(2, 4), a2 = d.dim(2, 4), a3 = d.dim(2, 4),
                a4 = d.dim(2, 4);
    Tensor a = leaf({a1, a2}, d.vec(a1 * a2));
    Tensor b = leaf({a2, a3}, d.vec(a2 * a3));
    Tensor c = leaf({a3, a4}, d.vec(a3 * a4));
    return std::pair{std::vector<Tensor>{a, b, c},
                     std::function<Tensor()>([a, b, c]() {
                       return ag::matmul(ag::matmul(a, b), c);
                     })};
  });
  op_case("softmax_mean", [&](Draw& d) {
    std::size_t r = d.dim(2, 4), c = d.dim(2, 5);
    Tensor a = leaf({r, c}, d.vec(r * c));
    return std::pair{std::vector<Tensor>{a}, std::function<Tensor()>([a]() {
                       return ag::mean(ag::softmax(a, 1), 0);
                     })};
  });

  if (include_decoder)
    out.push_back(run_rounds("decoder+set_loss", seed, rounds,
                             [](std::uint64_t sd, int r) {
                               return decoder_loss_case(sd, r);
                             }));
  return out;
}

bool all_passed(const std::vector<GradCheckCase>& results) {
  for (const auto& r : results)
    if (!r.passed) return false;
  return !results.empty();
}

}  // namespace cropforge
