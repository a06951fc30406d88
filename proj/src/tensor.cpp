#include "okd/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <unordered_set>

namespace okd {

namespace {

std::atomic<std::uint64_t> g_next_node_id{1};

std::shared_ptr<detail::Node> new_node(Shape shape, std::vector<double> values,
                                       bool requires_grad) {
  auto n = std::make_shared<detail::Node>();
  n->id = g_next_node_id.fetch_add(1, std::memory_order_relaxed);
  n->shape = std::move(shape);
  n->values = std::move(values);
  n->requires_grad = requires_grad;
  return n;
}

[[noreturn]] void fail(const std::string& msg) { throw Error(msg); }

void check_defined(const char* op, const Tensor& t) {
  if (!t.defined()) fail(std::string(op) + ": undefined tensor operand");
}

// Shape of a (+) b under trailing-dimension broadcast alignment.
Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
  const std::size_t ra = a.size(), rb = b.size();
  const std::size_t r = std::max(ra, rb);
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t ea = i < r - ra ? 1 : a[i - (r - ra)];
    const std::size_t eb = i < r - rb ? 1 : b[i - (r - rb)];
    if (ea != eb && ea != 1 && eb != 1) {
      fail(std::string(op) + ": shapes " + shape_str(a) + " and " +
           shape_str(b) + " are not broadcast-compatible");
    }
    out[i] = std::max(ea, eb);
  }
  return out;
}

// Row-major strides of `in` aligned to the (longer) broadcast shape `out`;
// broadcast dimensions get stride 0.
std::vector<std::size_t> bcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t s = 1;
  const std::size_t offset = out.size() - in.size();
  for (std::size_t i = in.size(); i-- > 0;) {
    strides[i + offset] = in[i] == 1 ? 0 : s;
    s *= in[i];
  }
  return strides;
}

// Row-major walk over `out` maintaining the two input offsets incrementally.
template <class Fn>
void for_each_bcast2(const Shape& out, const std::vector<std::size_t>& sa,
                     const std::vector<std::size_t>& sb, Fn fn) {
  const std::size_t r = out.size();
  const std::size_t n = numel(out);
  if (r == 0) {
    for (std::size_t i = 0; i < n; ++i) fn(i, 0, 0);
    return;
  }
  std::vector<std::size_t> coord(r, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t i = 0;;) {
    fn(i, ia, ib);
    if (++i == n) break;
    for (std::size_t d = r; d-- > 0;) {
      ++coord[d];
      ia += sa[d];
      ib += sb[d];
      if (coord[d] < out[d]) break;
      ia -= sa[d] * out[d];
      ib -= sb[d] * out[d];
      coord[d] = 0;
    }
  }
}

// Row-major walk over `in`, tracking the mapped offset given `ostrides`
// (stride 0 on collapsed dimensions). Used by reductions and broadcast_to's
// backward.
template <class Fn>
void for_each_mapped(const Shape& in, const std::vector<std::size_t>& ostrides,
                     Fn fn) {
  const std::size_t r = in.size();
  const std::size_t n = numel(in);
  if (r == 0) {
    for (std::size_t i = 0; i < n; ++i) fn(i, 0);
    return;
  }
  std::vector<std::size_t> coord(r, 0);
  std::size_t io = 0;
  for (std::size_t i = 0;;) {
    fn(i, io);
    if (++i == n) break;
    for (std::size_t d = r; d-- > 0;) {
      ++coord[d];
      io += ostrides[d];
      if (coord[d] < in[d]) break;
      io -= ostrides[d] * in[d];
      coord[d] = 0;
    }
  }
}

template <class F, class Da, class Db>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, F f,
                 Da da_fn, Db db_fn) {
  check_defined(name, a);
  check_defined(name, b);
  Shape os = broadcast_shape(name, a.shape(), b.shape());
  auto sa = bcast_strides(a.shape(), os);
  auto sb = bcast_strides(b.shape(), os);
  std::vector<double> out(numel(os));
  const double* av = a.values().data();
  const double* bv = b.values().data();
  for_each_bcast2(os, sa, sb, [&](std::size_t i, std::size_t ia, std::size_t ib) {
    out[i] = f(av[ia], bv[ib]);
  });
  return make_op(
      {a, b}, std::move(os), std::move(out),
      [sa = std::move(sa), sb = std::move(sb), da_fn, db_fn](detail::Node& self) {
        detail::Node* na = self.inputs[0].get();
        detail::Node* nb = self.inputs[1].get();
        const double* av = na->values.data();
        const double* bv = nb->values.data();
        const double* g = self.grad.data();
        const bool ga = na->requires_grad, gb = nb->requires_grad;
        if (ga) na->ensure_grad();
        if (gb) nb->ensure_grad();
        double* da = ga ? na->grad.data() : nullptr;
        double* db = gb ? nb->grad.data() : nullptr;
        for_each_bcast2(self.shape, sa, sb,
                        [&](std::size_t i, std::size_t ia, std::size_t ib) {
                          if (ga) da[ia] += da_fn(av[ia], bv[ib], g[i]);
                          if (gb) db[ib] += db_fn(av[ia], bv[ib], g[i]);
                        });
      });
}

template <class F, class Df>
Tensor unary_op(const char* name, const Tensor& a, F f, Df df) {
  check_defined(name, a);
  const auto& av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  return make_op({a}, a.shape(), std::move(out), [df](detail::Node& self) {
    detail::Node* na = self.inputs[0].get();
    if (!na->requires_grad) return;
    na->ensure_grad();
    const double* x = na->values.data();
    const double* y = self.values.data();
    const double* g = self.grad.data();
    double* da = na->grad.data();
    for (std::size_t i = 0; i < self.values.size(); ++i) {
      da[i] += df(x[i], y[i], g[i]);
    }
  });
}

std::vector<bool> axis_mask(const char* op, const Shape& shape,
                            const std::vector<std::size_t>& axes) {
  std::vector<bool> reduced(shape.size(), false);
  for (std::size_t ax : axes) {
    if (ax >= shape.size()) {
      fail(std::string(op) + ": axis " + std::to_string(ax) +
           " out of range for shape " + shape_str(shape));
    }
    reduced[ax] = true;
  }
  return reduced;
}

// Strides into the keepdim output, aligned to the input dims.
std::vector<std::size_t> reduce_strides(const Shape& in,
                                        const std::vector<bool>& reduced) {
  std::vector<std::size_t> strides(in.size(), 0);
  std::size_t s = 1;
  for (std::size_t i = in.size(); i-- > 0;) {
    if (reduced[i]) {
      strides[i] = 0;
    } else {
      strides[i] = s;
      s *= in[i];
    }
  }
  return strides;
}

Tensor reduce_op(const char* name, const Tensor& a,
                 std::vector<std::size_t> axes, bool keepdim, double scale) {
  check_defined(name, a);
  const Shape& in = a.shape();
  auto reduced = axis_mask(name, in, axes);
  Shape kshape(in.size());
  Shape sshape;
  for (std::size_t i = 0; i < in.size(); ++i) {
    kshape[i] = reduced[i] ? 1 : in[i];
    if (!reduced[i]) sshape.push_back(in[i]);
  }
  auto ostrides = reduce_strides(in, reduced);
  std::vector<double> out(numel(kshape), 0.0);
  const double* av = a.values().data();
  for_each_mapped(in, ostrides, [&](std::size_t i, std::size_t io) {
    out[io] += av[i];
  });
  if (scale != 1.0) {
    for (double& v : out) v *= scale;
  }
  Shape oshape = keepdim ? std::move(kshape) : std::move(sshape);
  return make_op(
      {a}, std::move(oshape), std::move(out),
      [in, ostrides = std::move(ostrides), scale](detail::Node& self) {
        detail::Node* na = self.inputs[0].get();
        if (!na->requires_grad) return;
        na->ensure_grad();
        const double* g = self.grad.data();
        double* da = na->grad.data();
        for_each_mapped(in, ostrides, [&](std::size_t i, std::size_t io) {
          da[i] += g[io] * scale;
        });
      });
}

std::vector<std::size_t> all_axes(const Tensor& a) {
  std::vector<std::size_t> axes(a.rank());
  for (std::size_t i = 0; i < axes.size(); ++i) axes[i] = i;
  return axes;
}

}  // namespace

std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t e : s) n *= e;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ", ";
    os << s[i];
  }
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::from(Shape shape, std::vector<double> values,
                    bool requires_grad) {
  if (numel(shape) != values.size()) {
    fail("Tensor::from: shape " + shape_str(shape) + " expects " +
         std::to_string(numel(shape)) + " values, got " +
         std::to_string(values.size()));
  }
  return wrap(new_node(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  std::vector<double> v(numel(shape), 0.0);
  return wrap(new_node(std::move(shape), std::move(v), requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::vector<double> v(numel(shape), value);
  return wrap(new_node(std::move(shape), std::move(v), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return wrap(new_node(Shape{}, {value}, requires_grad));
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev, bool requires_grad) {
  std::vector<double> v(numel(shape));
  for (double& x : v) x = rng.normal() * stddev;
  return wrap(new_node(std::move(shape), std::move(v), requires_grad));
}

const Shape& Tensor::shape() const {
  check_defined("shape", *this);
  return n_->shape;
}

std::size_t Tensor::size() const {
  check_defined("size", *this);
  return n_->values.size();
}

const std::vector<double>& Tensor::values() const {
  check_defined("values", *this);
  return n_->values;
}

std::vector<double>& Tensor::values_mut() {
  check_defined("values_mut", *this);
  return n_->values;
}

double Tensor::item() const {
  check_defined("item", *this);
  if (n_->values.size() != 1) {
    fail("item: tensor of shape " + shape_str(n_->shape) + " is not a scalar");
  }
  return n_->values[0];
}

double Tensor::at(std::initializer_list<std::size_t> idx) const {
  check_defined("at", *this);
  const Shape& s = n_->shape;
  if (idx.size() != s.size()) {
    fail("at: rank mismatch for shape " + shape_str(s));
  }
  std::size_t off = 0, d = 0;
  for (std::size_t i : idx) {
    if (i >= s[d]) fail("at: index out of range for shape " + shape_str(s));
    off = off * s[d] + i;
    ++d;
  }
  return n_->values[off];
}

bool Tensor::requires_grad() const { return n_ && n_->requires_grad; }

void Tensor::set_requires_grad(bool b) {
  check_defined("set_requires_grad", *this);
  if (!n_->inputs.empty()) {
    fail("set_requires_grad: only valid on leaf tensors");
  }
  n_->requires_grad = b;
}

bool Tensor::has_grad() const { return n_ && !n_->grad.empty(); }

const std::vector<double>& Tensor::grad() const {
  check_defined("grad", *this);
  if (n_->grad.empty()) {
    fail("grad: no gradient populated for tensor of shape " +
         shape_str(n_->shape));
  }
  return n_->grad;
}

void Tensor::zero_grad() {
  check_defined("zero_grad", *this);
  n_->grad.clear();
}

Tensor Tensor::detach() const {
  check_defined("detach", *this);
  return from(n_->shape, n_->values, false);
}

Tensor Tensor::wrap(std::shared_ptr<detail::Node> n) {
  Tensor t;
  t.n_ = std::move(n);
  return t;
}

Tensor make_op(std::vector<Tensor> inputs, Shape out_shape,
               std::vector<double> out_values,
               std::function<void(detail::Node&)> backprop) {
  if (numel(out_shape) != out_values.size()) {
    fail("make_op: output shape/value size mismatch");
  }
  bool any_grad = false;
  for (const Tensor& t : inputs) any_grad = any_grad || t.requires_grad();
  auto n = new_node(std::move(out_shape), std::move(out_values), any_grad);
  if (any_grad) {
    n->inputs.reserve(inputs.size());
    for (Tensor& t : inputs) n->inputs.push_back(t.node_ptr());
    n->backprop = std::move(backprop);
  }
  return Tensor::wrap(std::move(n));
}

// ---------------------------------------------------------------------------
// Elementwise ops

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double g) { return g; },
      [](double, double, double g) { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double g) { return g; },
      [](double, double, double g) { return -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double, double y, double g) { return g * y; },
      [](double x, double, double g) { return g * x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y, double g) { return g / y; },
      [](double x, double y, double g) { return -g * x / (y * y); });
}

Tensor add_scalar(const Tensor& a, double c) {
  return unary_op(
      "add_scalar", a, [c](double x) { return x + c; },
      [](double, double, double g) { return g; });
}

Tensor mul_scalar(const Tensor& a, double c) {
  return unary_op(
      "mul_scalar", a, [c](double x) { return x * c; },
      [c](double, double, double g) { return g * c; });
}

Tensor neg(const Tensor& a) {
  return unary_op(
      "neg", a, [](double x) { return -x; },
      [](double, double, double g) { return -g; });
}

Tensor exp(const Tensor& a) {
  return unary_op(
      "exp", a, [](double x) { return std::exp(x); },
      [](double, double y, double g) { return g * y; });
}

Tensor log(const Tensor& a) {
  check_defined("log", a);
  const auto& v = a.values();
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!(v[i] > 0.0)) {
      fail("log: non-positive value " + std::to_string(v[i]) + " at index " +
           std::to_string(i) + "; add an epsilon before taking log");
    }
  }
  return unary_op(
      "log", a, [](double x) { return std::log(x); },
      [](double x, double, double g) { return g / x; });
}

Tensor sqrt(const Tensor& a) {
  check_defined("sqrt", a);
  const auto& v = a.values();
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (v[i] < 0.0) {
      fail("sqrt: negative value " + std::to_string(v[i]) + " at index " +
           std::to_string(i));
    }
  }
  return unary_op(
      "sqrt", a, [](double x) { return std::sqrt(x); },
      [](double, double y, double g) { return 0.5 * g / y; });
}

Tensor abs(const Tensor& a) {
  return unary_op(
      "abs", a, [](double x) { return std::fabs(x); },
      [](double x, double, double g) {
        return x > 0.0 ? g : (x < 0.0 ? -g : 0.0);
      });
}

Tensor relu(const Tensor& a) {
  return unary_op(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double, double g) { return x > 0.0 ? g : 0.0; });
}

Tensor clamp_min(const Tensor& a, double lo) {
  return unary_op(
      "clamp_min", a, [lo](double x) { return x < lo ? lo : x; },
      [lo](double x, double, double g) { return x >= lo ? g : 0.0; });
}

// ---------------------------------------------------------------------------
// Shape ops

Tensor reshape(const Tensor& a, Shape shape) {
  check_defined("reshape", a);
  if (numel(shape) != a.size()) {
    fail("reshape: cannot reshape " + shape_str(a.shape()) + " to " +
         shape_str(shape));
  }
  return make_op({a}, std::move(shape), a.values(), [](detail::Node& self) {
    detail::Node* na = self.inputs[0].get();
    if (!na->requires_grad) return;
    na->ensure_grad();
    for (std::size_t i = 0; i < self.values.size(); ++i) {
      na->grad[i] += self.grad[i];
    }
  });
}

Tensor broadcast_to(const Tensor& a, Shape shape) {
  check_defined("broadcast_to", a);
  if (shape.size() < a.rank()) {
    fail("broadcast_to: target rank below input rank for " +
         shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  const std::size_t offset = shape.size() - a.rank();
  for (std::size_t i = 0; i < a.rank(); ++i) {
    if (a.shape()[i] != 1 && a.shape()[i] != shape[i + offset]) {
      fail("broadcast_to: shape " + shape_str(a.shape()) +
           " does not broadcast to " + shape_str(shape));
    }
  }
  auto strides = bcast_strides(a.shape(), shape);
  std::vector<double> out(numel(shape));
  const double* av = a.values().data();
  for_each_mapped(shape, strides, [&](std::size_t i, std::size_t ia) {
    out[i] = av[ia];
  });
  return make_op({a}, shape, std::move(out),
                 [shape, strides = std::move(strides)](detail::Node& self) {
                   detail::Node* na = self.inputs[0].get();
                   if (!na->requires_grad) return;
                   na->ensure_grad();
                   const double* g = self.grad.data();
                   double* da = na->grad.data();
                   for_each_mapped(shape, strides,
                                   [&](std::size_t i, std::size_t ia) {
                                     da[ia] += g[i];
                                   });
                 });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) fail("concat: empty input list");
  for (const Tensor& p : parts) check_defined("concat", p);
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) {
    fail("concat: axis " + std::to_string(axis) + " out of range for shape " +
         shape_str(s0));
  }
  Shape os = s0;
  os[axis] = 0;
  for (const Tensor& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != s0.size()) {
      fail("concat: rank mismatch between " + shape_str(s0) + " and " +
           shape_str(s));
    }
    for (std::size_t d = 0; d < s.size(); ++d) {
      if (d != axis && s[d] != s0[d]) {
        fail("concat: shapes " + shape_str(s0) + " and " + shape_str(s) +
             " differ outside axis " + std::to_string(axis));
      }
    }
    os[axis] += s[axis];
  }
  std::size_t outer = 1, suffix = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s0[d];
  for (std::size_t d = axis + 1; d < s0.size(); ++d) suffix *= s0[d];

  std::vector<double> out(numel(os));
  const std::size_t out_row = os[axis] * suffix;
  std::size_t col = 0;
  std::vector<std::size_t> part_cols(parts.size());
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const std::size_t inner = parts[p].shape()[axis] * suffix;
    part_cols[p] = col;
    const double* src = parts[p].values().data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy(src + o * inner, src + (o + 1) * inner,
                out.data() + o * out_row + col);
    }
    col += inner;
  }
  return make_op(
      parts, std::move(os), std::move(out),
      [outer, suffix, out_row, part_cols](detail::Node& self) {
        const double* g = self.grad.data();
        for (std::size_t p = 0; p < self.inputs.size(); ++p) {
          detail::Node* np = self.inputs[p].get();
          if (!np->requires_grad) continue;
          np->ensure_grad();
          const std::size_t inner = np->values.size() / outer;
          (void)suffix;
          double* dg = np->grad.data();
          for (std::size_t o = 0; o < outer; ++o) {
            const double* gsrc = g + o * out_row + part_cols[p];
            double* dst = dg + o * inner;
            for (std::size_t i = 0; i < inner; ++i) dst[i] += gsrc[i];
          }
        }
      });
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t start,
             std::size_t len) {
  check_defined("slice", a);
  const Shape& s = a.shape();
  if (axis >= s.size() || start + len > s[axis] || len == 0) {
    fail("slice: range [" + std::to_string(start) + ", " +
         std::to_string(start + len) + ") on axis " + std::to_string(axis) +
         " invalid for shape " + shape_str(s));
  }
  Shape os = s;
  os[axis] = len;
  std::size_t outer = 1, suffix = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
  for (std::size_t d = axis + 1; d < s.size(); ++d) suffix *= s[d];
  const std::size_t in_row = s[axis] * suffix;
  const std::size_t out_inner = len * suffix;
  std::vector<double> out(numel(os));
  const double* av = a.values().data();
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy(av + o * in_row + start * suffix,
              av + o * in_row + (start + len) * suffix,
              out.data() + o * out_inner);
  }
  return make_op({a}, std::move(os), std::move(out),
                 [outer, suffix, in_row, out_inner, start](detail::Node& self) {
                   detail::Node* na = self.inputs[0].get();
                   if (!na->requires_grad) return;
                   na->ensure_grad();
                   const double* g = self.grad.data();
                   double* da = na->grad.data();
                   for (std::size_t o = 0; o < outer; ++o) {
                     double* dst = da + o * in_row + start * suffix;
                     const double* src = g + o * out_inner;
                     for (std::size_t i = 0; i < out_inner; ++i) {
                       dst[i] += src[i];
                     }
                   }
                 });
}

Tensor transpose(const Tensor& a) {
  check_defined("transpose", a);
  if (a.rank() != 2) {
    fail("transpose: expected a 2-D tensor, got " + shape_str(a.shape()));
  }
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  std::vector<double> out(m * n);
  const double* av = a.values().data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
  }
  return make_op({a}, {n, m}, std::move(out), [m, n](detail::Node& self) {
    detail::Node* na = self.inputs[0].get();
    if (!na->requires_grad) return;
    na->ensure_grad();
    const double* g = self.grad.data();
    double* da = na->grad.data();
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t i = 0; i < m; ++i) da[i * n + j] += g[j * m + i];
    }
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_defined("matmul", a);
  check_defined("matmul", b);
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
    fail("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
         shape_str(b.shape()));
  }
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  std::vector<double> out(m * n);
  detail::gemm_nn(m, n, k, a.values().data(), b.values().data(), out.data(),
                  false);
  return make_op({a, b}, {m, n}, std::move(out), [m, k, n](detail::Node& self) {
    detail::Node* na = self.inputs[0].get();
    detail::Node* nb = self.inputs[1].get();
    const double* g = self.grad.data();
    if (na->requires_grad) {
      na->ensure_grad();
      // dA = G . B^T
      detail::gemm_nt(m, k, n, g, nb->values.data(), na->grad.data(), true);
    }
    if (nb->requires_grad) {
      nb->ensure_grad();
      // dB = A^T . G
      detail::gemm_tn(k, n, m, na->values.data(), g, nb->grad.data(), true);
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& a) { return reduce_op("sum", a, all_axes(a), false, 1.0); }

Tensor sum(const Tensor& a, std::vector<std::size_t> axes, bool keepdim) {
  return reduce_op("sum", a, std::move(axes), keepdim, 1.0);
}

Tensor mean(const Tensor& a) {
  check_defined("mean", a);
  if (a.size() == 0) fail("mean: empty tensor");
  return reduce_op("mean", a, all_axes(a), false, 1.0 / double(a.size()));
}

Tensor mean(const Tensor& a, std::vector<std::size_t> axes, bool keepdim) {
  check_defined("mean", a);
  auto reduced = axis_mask("mean", a.shape(), axes);
  std::size_t cnt = 1;
  for (std::size_t i = 0; i < a.rank(); ++i) {
    if (reduced[i]) cnt *= a.shape()[i];
  }
  if (cnt == 0) fail("mean: zero-size reduction");
  return reduce_op("mean", a, std::move(axes), keepdim, 1.0 / double(cnt));
}

Tensor max(const Tensor& a, std::size_t axis, bool keepdim) {
  check_defined("max", a);
  const Shape& in = a.shape();
  if (axis >= in.size()) {
    fail("max: axis " + std::to_string(axis) + " out of range for shape " +
         shape_str(in));
  }
  auto reduced = axis_mask("max", in, {axis});
  Shape kshape(in.size());
  Shape sshape;
  for (std::size_t i = 0; i < in.size(); ++i) {
    kshape[i] = reduced[i] ? 1 : in[i];
    if (!reduced[i]) sshape.push_back(in[i]);
  }
  auto ostrides = reduce_strides(in, reduced);
  const std::size_t on = numel(kshape);
  std::vector<double> out(on, -std::numeric_limits<double>::infinity());
  std::vector<std::size_t> argmax(on, std::size_t(-1));
  const double* av = a.values().data();
  // First strict max wins, so ties resolve to the lowest input index.
  for_each_mapped(in, ostrides, [&](std::size_t i, std::size_t io) {
    if (argmax[io] == std::size_t(-1) || av[i] > out[io]) {
      out[io] = av[i];
      argmax[io] = i;
    }
  });
  Shape oshape = keepdim ? std::move(kshape) : std::move(sshape);
  return make_op({a}, std::move(oshape), std::move(out),
                 [argmax = std::move(argmax)](detail::Node& self) {
                   detail::Node* na = self.inputs[0].get();
                   if (!na->requires_grad) return;
                   na->ensure_grad();
                   for (std::size_t io = 0; io < argmax.size(); ++io) {
                     na->grad[argmax[io]] += self.grad[io];
                   }
                 });
}

// ---------------------------------------------------------------------------
// Backward

void backward(const Tensor& root) {
  check_defined("backward", root);
  if (root.size() != 1) {
    fail("backward: root must be a scalar, got shape " +
         shape_str(root.shape()));
  }
  detail::Node* r = root.node();
  if (!r->requires_grad) return;  // nothing to populate, not an error
  if (r->backward_ran) {
    fail("backward: already ran from this root; reset grads first");
  }
  // Collect the reachable differentiable subgraph.
  std::vector<detail::Node*> order;
  std::unordered_set<const detail::Node*> seen;
  std::vector<detail::Node*> stack{r};
  seen.insert(r);
  while (!stack.empty()) {
    detail::Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& in : n->inputs) {
      if (in->requires_grad && seen.insert(in.get()).second) {
        stack.push_back(in.get());
      }
    }
  }
  // Reverse construction order visits every node after all of its consumers.
  std::sort(order.begin(), order.end(),
            [](const detail::Node* a, const detail::Node* b) {
              return a->id > b->id;
            });
  r->ensure_grad();
  r->grad[0] = 1.0;
  for (detail::Node* n : order) {
    if (n->backprop) n->backprop(*n);
  }
  r->backward_ran = true;
}

void Tensor::reset_backward_state() {
  check_defined("reset_backward_state", *this);
  std::unordered_set<const detail::Node*> seen;
  std::vector<detail::Node*> stack{n_.get()};
  seen.insert(n_.get());
  while (!stack.empty()) {
    detail::Node* n = stack.back();
    stack.pop_back();
    n->grad.clear();
    n->backward_ran = false;
    for (const auto& in : n->inputs) {
      if (seen.insert(in.get()).second) stack.push_back(in.get());
    }
  }
}

double grad_check(const std::function<Tensor()>& f, Tensor x, double eps) {
  if (!x.defined() || !x.requires_grad()) {
    fail("grad_check: probe tensor must be a leaf with requires_grad");
  }
  x.zero_grad();
  Tensor out = f();
  if (out.size() != 1) fail("grad_check: f must return a scalar");
  backward(out);
  std::vector<double> analytic(x.size(), 0.0);
  if (x.has_grad()) analytic = x.grad();
  auto& vals = x.values_mut();
  double max_rel = 0.0;
  for (std::size_t i = 0; i < vals.size(); ++i) {
    const double orig = vals[i];
    vals[i] = orig + eps;
    const double fp = f().item();
    vals[i] = orig - eps;
    const double fm = f().item();
    vals[i] = orig;
    const double numeric = (fp - fm) / (2.0 * eps);
    const double denom =
        std::max({std::fabs(analytic[i]), std::fabs(numeric), 1.0});
    max_rel = std::max(max_rel, std::fabs(analytic[i] - numeric) / denom);
  }
  x.zero_grad();
  return max_rel;
}

// ---------------------------------------------------------------------------
// GEMM kernels

namespace detail {

void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a,
             const double* b, double* c, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = ai[p];
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a,
             const double* b, double* c, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      ci[j] = accumulate ? ci[j] + s : s;
    }
  }
}

void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a,
             const double* b, double* c, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, 0.0);
  for (std::size_t p = 0; p < k; ++p) {
    const double* ap = a + p * m;
    const double* bp = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double api = ap[i];
      double* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += api * bp[j];
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Named-array container

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = (v >> (8 * i)) & 0xff;
  os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = (v >> (8 * i)) & 0xff;
  os.write(reinterpret_cast<const char*>(b), 8);
}

void put_f64(std::ostream& os, double v) {
  put_u64(os, std::bit_cast<std::uint64_t>(v));
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) fail("read_arrays: truncated stream");
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  if (!is) fail("read_arrays: truncated stream");
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

double get_f64(std::istream& is) {
  return std::bit_cast<double>(get_u64(is));
}

}  // namespace

void write_arrays(std::ostream& os, const std::vector<NamedArray>& arrays) {
  put_u64(os, arrays.size());
  for (const NamedArray& a : arrays) {
    if (numel(a.shape) != a.values.size()) {
      fail("write_arrays: shape/value mismatch for '" + a.name + "'");
    }
    put_u32(os, static_cast<std::uint32_t>(a.name.size()));
    os.write(a.name.data(), static_cast<std::streamsize>(a.name.size()));
    put_u32(os, static_cast<std::uint32_t>(a.shape.size()));
    for (std::size_t e : a.shape) put_u64(os, e);
    for (double v : a.values) put_f64(os, v);
  }
  if (!os) fail("write_arrays: stream write failed");
}

std::vector<NamedArray> read_arrays(std::istream& is) {
  const std::uint64_t count = get_u64(is);
  std::vector<NamedArray> arrays;
  arrays.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    NamedArray a;
    const std::uint32_t name_len = get_u32(is);
    a.name.resize(name_len);
    is.read(a.name.data(), name_len);
    if (!is) fail("read_arrays: truncated stream");
    const std::uint32_t rank = get_u32(is);
    a.shape.resize(rank);
    for (std::uint32_t d = 0; d < rank; ++d) {
      a.shape[d] = static_cast<std::size_t>(get_u64(is));
    }
    const std::size_t n = numel(a.shape);
    a.values.resize(n);
    for (std::size_t j = 0; j < n; ++j) a.values[j] = get_f64(is);
    arrays.push_back(std::move(a));
  }
  return arrays;
}

}  // namespace okd
