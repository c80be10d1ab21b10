#include "signthought/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_set>

namespace signthought {

namespace {
thread_local bool grad_enabled = true;
}  // namespace

NoGradGuard::NoGradGuard() : previous_(grad_enabled) { grad_enabled = false; }
NoGradGuard::~NoGradGuard() { grad_enabled = previous_; }

namespace detail {

Var make_result(const char* op, Tensor value, std::vector<Var> parents, BackwardFn backward) {
  if (!value.all_finite()) throw NumericError(std::string("non-finite value produced by ") + op);
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->op = op;
  const bool needs_grad =
      grad_enabled && std::any_of(parents.begin(), parents.end(), [](const Var& p) { return p.defined() && p.requires_grad(); });
  if (needs_grad) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(p.node_);
    node->backward = std::move(backward);
  }
  return Var(std::move(node));
}

}  // namespace detail

using detail::make_result;
using detail::Node;

Var Var::constant(Tensor value) {
  return detail::make_result("constant", std::move(value), {}, nullptr);
}

Var Var::leaf(Tensor value) {
  if (!value.all_finite()) throw NumericError("non-finite value in leaf tensor");
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  return Var(std::move(node));
}

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using MapM = Eigen::Map<RowMat>;

const Tensor& pval(const Node& self, std::size_t i) { return self.parents[i]->value; }

std::size_t norm_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  return static_cast<std::size_t>(a);
}

std::vector<std::size_t> contiguous_strides(const Shape& shape) {
  std::vector<std::size_t> s(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) s[i - 1] = s[i] * shape[i];
  return s;
}

struct BroadcastPlan {
  Shape out;
  std::vector<std::size_t> stride_a;
  std::vector<std::size_t> stride_b;
  bool identical = false;
};

BroadcastPlan plan_broadcast(const Shape& a, const Shape& b, const char* op) {
  BroadcastPlan p;
  const std::size_t r = std::max(a.size(), b.size());
  p.out.resize(r);
  p.stride_a.assign(r, 0);
  p.stride_b.assign(r, 0);
  const auto sa = contiguous_strides(a);
  const auto sb = contiguous_strides(b);
  for (std::size_t i = 0; i < r; ++i) {
    const bool has_a = i >= r - a.size();
    const bool has_b = i >= r - b.size();
    const std::size_t da = has_a ? a[i - (r - a.size())] : 1;
    const std::size_t db = has_b ? b[i - (r - b.size())] : 1;
    if (da != db && da != 1 && db != 1) {
      throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) + " do not broadcast");
    }
    p.out[i] = std::max(da, db);
    if (has_a && da != 1) p.stride_a[i] = sa[i - (r - a.size())];
    if (has_b && db != 1) p.stride_b[i] = sb[i - (r - b.size())];
  }
  p.identical = (a == b);
  return p;
}

// Calls f(out_index, a_index, b_index) for every element of the broadcast shape.
template <class F>
void for_each_broadcast(const BroadcastPlan& p, F&& f) {
  const std::size_t n = numel(p.out);
  if (n == 0) return;
  if (p.identical) {
    for (std::size_t i = 0; i < n; ++i) f(i, i, i);
    return;
  }
  const std::size_t r = p.out.size();
  if (r == 0) {
    f(0, 0, 0);
    return;
  }
  const std::size_t last = p.out[r - 1];
  const std::size_t la = p.stride_a[r - 1];
  const std::size_t lb = p.stride_b[r - 1];
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0;
  std::size_t ib = 0;
  for (std::size_t o = 0; o < n; o += last) {
    for (std::size_t j = 0; j < last; ++j) f(o + j, ia + j * la, ib + j * lb);
    for (std::size_t ax = r - 1; ax-- > 0;) {
      ++idx[ax];
      ia += p.stride_a[ax];
      ib += p.stride_b[ax];
      if (idx[ax] < p.out[ax]) break;
      ia -= p.stride_a[ax] * p.out[ax];
      ib -= p.stride_b[ax] * p.out[ax];
      idx[ax] = 0;
    }
  }
}

template <class Fwd, class GradA, class GradB>
Var binary(const char* op, const Var& a, const Var& b, Fwd fwd, GradA grad_a, GradB grad_b) {
  BroadcastPlan plan = plan_broadcast(a.shape(), b.shape(), op);
  Tensor out(plan.out);
  const auto& av = a.value().raw();
  const auto& bv = b.value().raw();
  auto& ov = out.raw();
  for_each_broadcast(plan, [&](std::size_t o, std::size_t i, std::size_t j) { ov[o] = fwd(av[i], bv[j]); });
  return make_result(op, std::move(out), {a, b},
                     [plan = std::move(plan), grad_a, grad_b](const Node& self, const Tensor& g,
                                                              std::span<Tensor* const> pg) {
                       const auto& x = pval(self, 0).raw();
                       const auto& y = pval(self, 1).raw();
                       const auto& gv = g.raw();
                       if (pg[0]) {
                         auto& ga = pg[0]->raw();
                         for_each_broadcast(plan, [&](std::size_t o, std::size_t i, std::size_t j) {
                           ga[i] += gv[o] * grad_a(x[i], y[j]);
                         });
                       }
                       if (pg[1]) {
                         auto& gb = pg[1]->raw();
                         for_each_broadcast(plan, [&](std::size_t o, std::size_t i, std::size_t j) {
                           gb[j] += gv[o] * grad_b(x[i], y[j]);
                         });
                       }
                     });
}

// Unary op whose derivative is expressed through input x and output y.
template <class Fwd, class Deriv>
Var unary(const char* op, const Var& a, Fwd fwd, Deriv deriv) {
  Tensor out(a.shape());
  const auto& av = a.value().raw();
  auto& ov = out.raw();
  for (std::size_t i = 0; i < av.size(); ++i) ov[i] = fwd(av[i]);
  return make_result(op, std::move(out), {a}, [deriv](const Node& self, const Tensor& g, std::span<Tensor* const> pg) {
    if (!pg[0]) return;
    const auto& x = pval(self, 0).raw();
    const auto& y = self.value.raw();
    const auto& gv = g.raw();
    auto& ga = pg[0]->raw();
    for (std::size_t i = 0; i < x.size(); ++i) ga[i] += gv[i] * deriv(x[i], y[i]);
  });
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Var add(const Var& a, const Var& b) {
  return binary("add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
                [](double, double) { return 1.0; });
}

Var sub(const Var& a, const Var& b) {
  return binary("sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
                [](double, double) { return -1.0; });
}

Var mul(const Var& a, const Var& b) {
  return binary("mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
                [](double x, double) { return x; });
}

Var div(const Var& a, const Var& b) {
  return binary("div", a, b, [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
                [](double x, double y) { return -x / (y * y); });
}

Var neg(const Var& a) {
  return unary("neg", a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Var scale(const Var& a, double c) {
  return unary("scale", a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

Var add_scalar(const Var& a, double c) {
  return unary("add_scalar", a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

// relu'(0) = 0
Var relu(const Var& a) {
  return unary("relu", a, [](double x) { return x > 0 ? x : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Var sigmoid(const Var& a) {
  return unary("sigmoid", a, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Var softplus(const Var& a) {
  return unary(
      "softplus", a, [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); },
      [](double x, double) { return stable_sigmoid(x); });
}

Var exp(const Var& a) {
  return unary("exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

// No implicit guard: log(0) is reported as a non-finite value.
Var log(const Var& a) {
  return unary("log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

// abs'(0) = 0
Var abs(const Var& a) {
  return unary("abs", a, [](double x) { return std::abs(x); },
               [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

Var reshape(const Var& a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return make_result("reshape", std::move(out), {a}, [](const Node&, const Tensor& g, std::span<Tensor* const> pg) {
    if (!pg[0]) return;
    auto& ga = pg[0]->raw();
    const auto& gv = g.raw();
    for (std::size_t i = 0; i < gv.size(); ++i) ga[i] += gv[i];
  });
}

Var permute(const Var& a, const std::vector<std::size_t>& order) {
  const Shape& in = a.shape();
  const std::size_t r = in.size();
  if (order.size() != r) throw ShapeError("permute: order rank mismatch for " + shape_str(in));
  std::vector<bool> seen(r, false);
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (order[i] >= r || seen[order[i]]) throw ShapeError("permute: invalid axis order");
    seen[order[i]] = true;
    out_shape[i] = in[order[i]];
  }
  const auto in_strides = contiguous_strides(in);
  std::vector<std::size_t> src_stride(r);
  for (std::size_t i = 0; i < r; ++i) src_stride[i] = in_strides[order[i]];

  // Maps output linear index -> input linear index.
  auto visit = [out_shape, src_stride](auto&& f) {
    const std::size_t n = numel(out_shape);
    const std::size_t rr = out_shape.size();
    if (n == 0) return;
    if (rr == 0) {
      f(0, 0);
      return;
    }
    std::vector<std::size_t> idx(rr, 0);
    std::size_t src = 0;
    const std::size_t last = out_shape[rr - 1];
    const std::size_t ls = src_stride[rr - 1];
    for (std::size_t o = 0; o < n; o += last) {
      for (std::size_t j = 0; j < last; ++j) f(o + j, src + j * ls);
      for (std::size_t ax = rr - 1; ax-- > 0;) {
        ++idx[ax];
        src += src_stride[ax];
        if (idx[ax] < out_shape[ax]) break;
        src -= src_stride[ax] * out_shape[ax];
        idx[ax] = 0;
      }
    }
  };
  Tensor out(out_shape);
  const auto& av = a.value().raw();
  auto& ov = out.raw();
  visit([&](std::size_t o, std::size_t s) { ov[o] = av[s]; });
  return make_result("permute", std::move(out), {a}, [visit](const Node&, const Tensor& g, std::span<Tensor* const> pg) {
    if (!pg[0]) return;
    auto& ga = pg[0]->raw();
    const auto& gv = g.raw();
    visit([&](std::size_t o, std::size_t s) { ga[s] += gv[o]; });
  });
}

Var transpose(const Var& a) {
  const std::size_t r = a.shape().size();
  if (r < 2) throw ShapeError("transpose needs rank >= 2, got " + shape_str(a.shape()));
  std::vector<std::size_t> order(r);
  for (std::size_t i = 0; i < r; ++i) order[i] = i;
  std::swap(order[r - 1], order[r - 2]);
  return permute(a, order);
}

Var expand(const Var& a, const Shape& shape) {
  BroadcastPlan plan = plan_broadcast(a.shape(), shape, "expand");
  if (plan.out != shape) throw ShapeError("expand: cannot expand " + shape_str(a.shape()) + " to " + shape_str(shape));
  Tensor out(shape);
  const auto& av = a.value().raw();
  auto& ov = out.raw();
  for_each_broadcast(plan, [&](std::size_t o, std::size_t i, std::size_t) { ov[o] = av[i]; });
  return make_result("expand", std::move(out), {a},
                     [plan = std::move(plan)](const Node&, const Tensor& g, std::span<Tensor* const> pg) {
                       if (!pg[0]) return;
                       auto& ga = pg[0]->raw();
                       const auto& gv = g.raw();
                       for_each_broadcast(plan, [&](std::size_t o, std::size_t i, std::size_t) { ga[i] += gv[o]; });
                     });
}

namespace {

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t n = 1;
  std::size_t inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.n = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace

Var slice(const Var& a, int axis, std::size_t start, std::size_t length) {
  const std::size_t ax = norm_axis(axis, a.shape().size());
  const AxisSplit sp = split_at(a.shape(), ax);
  if (start + length > sp.n) throw ShapeError("slice out of range on " + shape_str(a.shape()));
  Shape out_shape = a.shape();
  out_shape[ax] = length;
  Tensor out(out_shape);
  const auto& av = a.value().raw();
  auto& ov = out.raw();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    std::copy_n(av.begin() + static_cast<std::ptrdiff_t>((o * sp.n + start) * sp.inner), length * sp.inner,
                ov.begin() + static_cast<std::ptrdiff_t>(o * length * sp.inner));
  }
  return make_result("slice", std::move(out), {a}, [sp, start, length](const Node&, const Tensor& g, std::span<Tensor* const> pg) {
    if (!pg[0]) return;
    auto& ga = pg[0]->raw();
    const auto& gv = g.raw();
    for (std::size_t o = 0; o < sp.outer; ++o) {
      const std::size_t src = o * length * sp.inner;
      const std::size_t dst = (o * sp.n + start) * sp.inner;
      for (std::size_t i = 0; i < length * sp.inner; ++i) ga[dst + i] += gv[src + i];
    }
  });
}

Var concat(const std::vector<Var>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const Shape& first = parts.front().shape();
  const std::size_t ax = norm_axis(axis, first.size());
  Shape out_shape = first;
  out_shape[ax] = 0;
  std::vector<std::size_t> lens;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != first.size()) throw ShapeError("concat rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != ax && s[i] != first[i]) throw ShapeError("concat shape mismatch: " + shape_str(s) + " vs " + shape_str(first));
    }
    lens.push_back(s[ax]);
    out_shape[ax] += s[ax];
  }
  const AxisSplit sp = split_at(out_shape, ax);
  Tensor out(out_shape);
  auto& ov = out.raw();
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& pv = parts[k].value().raw();
    for (std::size_t o = 0; o < sp.outer; ++o) {
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(o * lens[k] * sp.inner), lens[k] * sp.inner,
                  ov.begin() + static_cast<std::ptrdiff_t>((o * sp.n + offset) * sp.inner));
    }
    offset += lens[k];
  }
  return make_result("concat", std::move(out), parts, [sp, lens](const Node&, const Tensor& g, std::span<Tensor* const> pg) {
    const auto& gv = g.raw();
    std::size_t offset = 0;
    for (std::size_t k = 0; k < lens.size(); ++k) {
      if (pg[k]) {
        auto& gk = pg[k]->raw();
        for (std::size_t o = 0; o < sp.outer; ++o) {
          const std::size_t src = (o * sp.n + offset) * sp.inner;
          const std::size_t dst = o * lens[k] * sp.inner;
          for (std::size_t i = 0; i < lens[k] * sp.inner; ++i) gk[dst + i] += gv[src + i];
        }
      }
      offset += lens[k];
    }
  });
}

Var detach(const Var& a) { return Var::constant(a.value()); }

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().raw()) s += v;
  return make_result("sum", Tensor::scalar(s), {a}, [](const Node&, const Tensor& g, std::span<Tensor* const> pg) {
    if (!pg[0]) return;
    const double gv = g[0];
    for (double& x : pg[0]->raw()) x += gv;
  });
}

Var mean(const Var& a) {
  const double n = static_cast<double>(a.value().size());
  return scale(sum(a), 1.0 / n);
}

Var sum_axis(const Var& a, int axis) {
  const std::size_t ax = norm_axis(axis, a.shape().size());
  const AxisSplit sp = split_at(a.shape(), ax);
  Shape out_shape = a.shape();
  out_shape[ax] = 1;
  Tensor out(out_shape);
  const auto& av = a.value().raw();
  auto& ov = out.raw();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t j = 0; j < sp.n; ++j) {
      const std::size_t base = (o * sp.n + j) * sp.inner;
      for (std::size_t i = 0; i < sp.inner; ++i) ov[o * sp.inner + i] += av[base + i];
    }
  }
  return make_result("sum_axis", std::move(out), {a}, [sp](const Node&, const Tensor& g, std::span<Tensor* const> pg) {
    if (!pg[0]) return;
    auto& ga = pg[0]->raw();
    const auto& gv = g.raw();
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t j = 0; j < sp.n; ++j) {
        const std::size_t base = (o * sp.n + j) * sp.inner;
        for (std::size_t i = 0; i < sp.inner; ++i) ga[base + i] += gv[o * sp.inner + i];
      }
    }
  });
}

Var matmul(const Var& a, const Var& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() < 2 || bs.size() < 2) {
    throw ShapeError("matmul needs rank >= 2 operands, got " + shape_str(as) + " x " + shape_str(bs));
  }
  const std::size_t m = as[as.size() - 2];
  const std::size_t k = as[as.size() - 1];
  const std::size_t n = bs[bs.size() - 1];
  if (bs[bs.size() - 2] != k) {
    throw ShapeError("matmul inner-dim mismatch: " + shape_str(as) + " x " + shape_str(bs));
  }
  const Shape batch_a(as.begin(), as.end() - 2);
  const Shape batch_b(bs.begin(), bs.end() - 2);
  BroadcastPlan plan = plan_broadcast(batch_a, batch_b, "matmul");
  Shape out_shape = plan.out;
  out_shape.push_back(m);
  out_shape.push_back(n);
  const std::size_t nbatch = numel(plan.out);
  // b shared across every batch of a: one tall GEMM.
  const bool flat = numel(batch_b) == 1 && batch_a.size() == plan.out.size();

  Tensor out(out_shape);
  const double* ap = a.value().raw().data();
  const double* bp = b.value().raw().data();
  double* op = out.raw().data();
  const auto ki = static_cast<Eigen::Index>(k);
  const auto mi = static_cast<Eigen::Index>(m);
  const auto ni = static_cast<Eigen::Index>(n);
  if (flat) {
    const auto rows = static_cast<Eigen::Index>(nbatch * m);
    MapM(op, rows, ni).noalias() = MapC(ap, rows, ki) * MapC(bp, ki, ni);
  } else {
    for_each_broadcast(plan, [&](std::size_t o, std::size_t i, std::size_t j) {
      MapM(op + o * m * n, mi, ni).noalias() = MapC(ap + i * m * k, mi, ki) * MapC(bp + j * k * n, ki, ni);
    });
  }
  return make_result("matmul", std::move(out), {a, b},
                     [plan = std::move(plan), flat, nbatch, m, k, n](const Node& self, const Tensor& g,
                                                                     std::span<Tensor* const> pg) {
                       const double* ap = pval(self, 0).raw().data();
                       const double* bp = pval(self, 1).raw().data();
                       const double* gp = g.raw().data();
                       const auto ki = static_cast<Eigen::Index>(k);
                       const auto mi = static_cast<Eigen::Index>(m);
                       const auto ni = static_cast<Eigen::Index>(n);
                       if (flat) {
                         const auto rows = static_cast<Eigen::Index>(nbatch * m);
                         if (pg[0]) MapM(pg[0]->raw().data(), rows, ki).noalias() += MapC(gp, rows, ni) * MapC(bp, ki, ni).transpose();
                         if (pg[1]) MapM(pg[1]->raw().data(), ki, ni).noalias() += MapC(ap, rows, ki).transpose() * MapC(gp, rows, ni);
                         return;
                       }
                       for_each_broadcast(plan, [&](std::size_t o, std::size_t i, std::size_t j) {
                         if (pg[0]) {
                           MapM(pg[0]->raw().data() + i * m * k, mi, ki).noalias() +=
                               MapC(gp + o * m * n, mi, ni) * MapC(bp + j * k * n, ki, ni).transpose();
                         }
                         if (pg[1]) {
                           MapM(pg[1]->raw().data() + j * k * n, ki, ni).noalias() +=
                               MapC(ap + i * m * k, mi, ki).transpose() * MapC(gp + o * m * n, mi, ni);
                         }
                       });
                     });
}

namespace {

Var softmax_rows(const Var& logits, const std::vector<double>* mask) {
  const Shape& s = logits.shape();
  if (s.empty()) throw ShapeError("softmax of a scalar");
  const std::size_t n = s.back();
  const std::size_t rows = n == 0 ? 0 : logits.value().size() / n;
  const auto& x = logits.value().raw();
  Tensor out(s);
  auto& y = out.raw();
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t base = r * n;
    double mx = kNegInf;
    for (std::size_t j = 0; j < n; ++j) {
      const double mj = mask ? (*mask)[base + j] : 0.0;
      if (mj == kNegInf) continue;
      mx = std::max(mx, x[base + j] + mj);
    }
    if (mx == kNegInf) throw NumericError("degenerate attention row");
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double mj = mask ? (*mask)[base + j] : 0.0;
      const double e = mj == kNegInf ? 0.0 : std::exp(x[base + j] + mj - mx);
      y[base + j] = e;
      z += e;
    }
    const double inv = 1.0 / z;
    for (std::size_t j = 0; j < n; ++j) y[base + j] *= inv;
  }
  return make_result("softmax", std::move(out), {logits}, [n, rows](const Node& self, const Tensor& g, std::span<Tensor* const> pg) {
    if (!pg[0]) return;
    const auto& yv = self.value.raw();
    const auto& gv = g.raw();
    auto& ga = pg[0]->raw();
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t base = r * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += gv[base + j] * yv[base + j];
      for (std::size_t j = 0; j < n; ++j) ga[base + j] += yv[base + j] * (gv[base + j] - dot);
    }
  });
}

}  // namespace

Var masked_softmax(const Var& logits, const Tensor& additive_mask) {
  BroadcastPlan plan = plan_broadcast(logits.shape(), additive_mask.shape(), "masked_softmax");
  if (plan.out != logits.shape()) {
    throw ShapeError("masked_softmax: mask " + shape_str(additive_mask.shape()) + " does not broadcast to logits " +
                     shape_str(logits.shape()));
  }
  std::vector<double> expanded(logits.value().size());
  const auto& mv = additive_mask.raw();
  for_each_broadcast(plan, [&](std::size_t o, std::size_t, std::size_t j) { expanded[o] = mv[j]; });
  return softmax_rows(logits, &expanded);
}

Var softmax(const Var& logits) { return softmax_rows(logits, nullptr); }

Var log_softmax(const Var& logits) {
  const Shape& s = logits.shape();
  if (s.empty()) throw ShapeError("log_softmax of a scalar");
  const std::size_t n = s.back();
  const std::size_t rows = logits.value().size() / n;
  const auto& x = logits.value().raw();
  Tensor out(s);
  auto& y = out.raw();
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t base = r * n;
    double mx = x[base];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[base + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(x[base + j] - mx);
    const double lz = mx + std::log(z);
    for (std::size_t j = 0; j < n; ++j) y[base + j] = x[base + j] - lz;
  }
  return make_result("log_softmax", std::move(out), {logits}, [n, rows](const Node& self, const Tensor& g, std::span<Tensor* const> pg) {
    if (!pg[0]) return;
    const auto& yv = self.value.raw();
    const auto& gv = g.raw();
    auto& ga = pg[0]->raw();
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t base = r * n;
      double gs = 0.0;
      for (std::size_t j = 0; j < n; ++j) gs += gv[base + j];
      for (std::size_t j = 0; j < n; ++j) ga[base + j] += gv[base + j] - std::exp(yv[base + j]) * gs;
    }
  });
}

Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps) {
  const Shape& s = x.shape();
  if (s.empty() || s.back() == 0) throw ShapeError("layer_norm needs a non-empty last axis");
  const std::size_t d = s.back();
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d}) {
    throw ShapeError("layer_norm: gain/bias must be [" + std::to_string(d) + "], got " + shape_str(gain.shape()) +
                     " and " + shape_str(bias.shape()));
  }
  const std::size_t rows = x.value().size() / d;
  const auto& xv = x.value().raw();
  const auto& gv = gain.value().raw();
  const auto& bv = bias.value().raw();
  auto xhat = std::make_shared<std::vector<double>>(xv.size());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  Tensor out(s);
  auto& ov = out.raw();
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t base = r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xv[base + j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = xv[base + j] - mu;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = inv;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (xv[base + j] - mu) * inv;
      (*xhat)[base + j] = h;
      ov[base + j] = h * gv[j] + bv[j];
    }
  }
  return make_result("layer_norm", std::move(out), {x, gain, bias},
                     [d, rows, xhat, inv_std](const Node& self, const Tensor& g, std::span<Tensor* const> pg) {
                       const auto& gainv = pval(self, 1).raw();
                       const auto& gv = g.raw();
                       const auto& h = *xhat;
                       for (std::size_t r = 0; r < rows; ++r) {
                         const std::size_t base = r * d;
                         if (pg[1]) {
                           auto& gg = pg[1]->raw();
                           for (std::size_t j = 0; j < d; ++j) gg[j] += gv[base + j] * h[base + j];
                         }
                         if (pg[2]) {
                           auto& gb = pg[2]->raw();
                           for (std::size_t j = 0; j < d; ++j) gb[j] += gv[base + j];
                         }
                         if (pg[0]) {
                           double m1 = 0.0;
                           double m2 = 0.0;
                           for (std::size_t j = 0; j < d; ++j) {
                             const double dh = gv[base + j] * gainv[j];
                             m1 += dh;
                             m2 += dh * h[base + j];
                           }
                           m1 /= static_cast<double>(d);
                           m2 /= static_cast<double>(d);
                           auto& gx = pg[0]->raw();
                           const double inv = (*inv_std)[r];
                           for (std::size_t j = 0; j < d; ++j) {
                             const double dh = gv[base + j] * gainv[j];
                             gx[base + j] += inv * (dh - m1 - h[base + j] * m2);
                           }
                         }
                       }
                     });
}

Var embedding(const Var& table, std::span<const std::int32_t> ids, const Shape& out_prefix) {
  if (table.shape().size() != 2) throw ShapeError("embedding table must be [V, d]");
  if (numel(out_prefix) != ids.size()) throw ShapeError("embedding: id count does not match output prefix");
  const std::size_t vocab = table.shape()[0];
  const std::size_t d = table.shape()[1];
  std::vector<std::int32_t> idv(ids.begin(), ids.end());
  for (std::int32_t id : idv) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw ShapeError("token id " + std::to_string(id) + " out of range for vocabulary of " + std::to_string(vocab));
    }
  }
  Shape out_shape = out_prefix;
  out_shape.push_back(d);
  Tensor out(out_shape);
  const auto& tv = table.value().raw();
  auto& ov = out.raw();
  for (std::size_t i = 0; i < idv.size(); ++i) {
    std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(idv[i]) * d), d,
                ov.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  return make_result("embedding", std::move(out), {table}, [idv = std::move(idv), d](const Node&, const Tensor& g, std::span<Tensor* const> pg) {
    if (!pg[0]) return;
    auto& gt = pg[0]->raw();
    const auto& gv = g.raw();
    for (std::size_t i = 0; i < idv.size(); ++i) {
      const std::size_t row = static_cast<std::size_t>(idv[i]) * d;
      for (std::size_t j = 0; j < d; ++j) gt[row + j] += gv[i * d + j];
    }
  });
}

Var depthwise_conv1d(const Var& x, const Var& kernel, const Var& bias) {
  const Shape& s = x.shape();
  if (s.size() != 3) throw ShapeError("depthwise_conv1d expects [B, T, C], got " + shape_str(s));
  const std::size_t batch = s[0];
  const std::size_t steps = s[1];
  const std::size_t ch = s[2];
  if (kernel.shape().size() != 2 || kernel.shape()[1] != ch || kernel.shape()[0] % 2 == 0) {
    throw ShapeError("depthwise_conv1d kernel must be [odd k, C], got " + shape_str(kernel.shape()));
  }
  if (bias.shape() != Shape{ch}) throw ShapeError("depthwise_conv1d bias must be [C]");
  const std::size_t kw = kernel.shape()[0];
  const long half = static_cast<long>(kw / 2);
  const auto& xv = x.value().raw();
  const auto& kv = kernel.value().raw();
  const auto& bv = bias.value().raw();
  Tensor out(s);
  auto& ov = out.raw();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < steps; ++t) {
      double* o = &ov[(b * steps + t) * ch];
      for (std::size_t c = 0; c < ch; ++c) o[c] = bv[c];
      for (std::size_t i = 0; i < kw; ++i) {
        const long src = static_cast<long>(t) + static_cast<long>(i) - half;
        if (src < 0 || src >= static_cast<long>(steps)) continue;
        const double* xi = &xv[(b * steps + static_cast<std::size_t>(src)) * ch];
        const double* ki = &kv[i * ch];
        for (std::size_t c = 0; c < ch; ++c) o[c] += ki[c] * xi[c];
      }
    }
  }
  return make_result("depthwise_conv1d", std::move(out), {x, kernel, bias},
                     [batch, steps, ch, kw, half](const Node& self, const Tensor& g, std::span<Tensor* const> pg) {
                       const auto& xv = pval(self, 0).raw();
                       const auto& kv = pval(self, 1).raw();
                       const auto& gv = g.raw();
                       for (std::size_t b = 0; b < batch; ++b) {
                         for (std::size_t t = 0; t < steps; ++t) {
                           const double* go = &gv[(b * steps + t) * ch];
                           if (pg[2]) {
                             auto& gb = pg[2]->raw();
                             for (std::size_t c = 0; c < ch; ++c) gb[c] += go[c];
                           }
                           for (std::size_t i = 0; i < kw; ++i) {
                             const long src = static_cast<long>(t) + static_cast<long>(i) - half;
                             if (src < 0 || src >= static_cast<long>(steps)) continue;
                             const std::size_t xoff = (b * steps + static_cast<std::size_t>(src)) * ch;
                             if (pg[0]) {
                               auto& gx = pg[0]->raw();
                               for (std::size_t c = 0; c < ch; ++c) gx[xoff + c] += go[c] * kv[i * ch + c];
                             }
                             if (pg[1]) {
                               auto& gk = pg[1]->raw();
                               for (std::size_t c = 0; c < ch; ++c) gk[i * ch + c] += go[c] * xv[xoff + c];
                             }
                           }
                         }
                       }
                     });
}

Var dropout(const Var& x, double p, std::mt19937_64& rng, bool training) {
  if (!training || p <= 0.0) return x;
  if (p >= 1.0) throw ShapeError("dropout rate must be < 1");
  Tensor keep(x.shape());
  std::bernoulli_distribution draw(1.0 - p);
  const double s = 1.0 / (1.0 - p);
  for (double& k : keep.raw()) k = draw(rng) ? s : 0.0;
  return mul(x, Var::constant(std::move(keep)));
}

const Var& ParameterStore::add(const std::string& name, Tensor init) {
  if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  index_.emplace(name, entries_.size());
  entries_.push_back({name, Var::leaf(std::move(init))});
  return entries_.back().var;
}

const Var& ParameterStore::operator[](std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw std::out_of_range("unknown parameter: " + std::string(name));
  return entries_[it->second].var;
}

Var& ParameterStore::at(std::string_view name) {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw std::out_of_range("unknown parameter: " + std::string(name));
  return entries_[it->second].var;
}

bool ParameterStore::contains(std::string_view name) const { return index_.count(std::string(name)) > 0; }

std::size_t ParameterStore::total_numel() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.var.value().size();
  return n;
}

ParameterStore ParameterStore::clone() const {
  ParameterStore out;
  for (const auto& e : entries_) out.add(e.name, e.var.value());
  return out;
}

GradientMap backward(const Var& loss, const ParameterStore& store) {
  if (loss.value().size() != 1) throw ShapeError("backward needs a scalar loss, got " + shape_str(loss.shape()));

  std::unordered_map<const Node*, Tensor> grads;
  std::vector<const Node*> order;
  if (loss.requires_grad()) {
    // Iterative post-order DFS over nodes that need gradients.
    std::unordered_set<const Node*> visited;
    std::vector<std::pair<const Node*, std::size_t>> stack;
    stack.emplace_back(loss.node(), 0);
    visited.insert(loss.node());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        const Node* p = node->parents[next++].get();
        if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
    grads.emplace(loss.node(), Tensor(loss.shape(), 1.0));
  }

  std::vector<Tensor*> parent_grads;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const Node* node = *it;
    if (!node->backward) continue;
    auto found = grads.find(node);
    if (found == grads.end()) continue;
    parent_grads.assign(node->parents.size(), nullptr);
    for (std::size_t i = 0; i < node->parents.size(); ++i) {
      const Node* p = node->parents[i].get();
      if (!p->requires_grad) continue;
      auto [slot, inserted] = grads.try_emplace(p);
      if (inserted) slot->second = Tensor(p->value.shape());
      parent_grads[i] = &slot->second;
    }
    // try_emplace may rehash; look the node's own gradient up again.
    const Tensor& g = grads.at(node);
    node->backward(*node, g, parent_grads);
    grads.erase(node);
  }

  GradientMap out;
  for (const auto& e : store) {
    auto found = grads.find(e.var.node());
    out.emplace(e.name, found == grads.end() ? Tensor(e.var.shape()) : std::move(found->second));
  }
  return out;
}

}  // namespace signthought
