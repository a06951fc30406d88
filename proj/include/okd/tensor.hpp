#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "okd/rng.hpp"

namespace okd {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& s);
std::string shape_str(const Shape& s);

/// Error type thrown by every module; messages name the failing operation
/// and the offending shapes/values.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

// One record of the computation graph. Tensors are thin shared handles to
// nodes; a node keeps its inputs alive, so holding the loss tensor keeps the
// whole graph reachable for backward().
struct Node {
  std::uint64_t id = 0;  // construction order, strictly increasing
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  bool backward_ran = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backprop;

  std::size_t size() const { return values.size(); }
  // Allocates a zeroed grad buffer on first use.
  void ensure_grad() {
    if (grad.empty()) grad.assign(values.size(), 0.0);
  }
};

// Row-major GEMM helpers shared by matmul and the convolution lowering.
// C is MxN. accumulate=true adds into C instead of overwriting.
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a,
             const double* b, double* c, bool accumulate);  // A MxK, B KxN
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a,
             const double* b, double* c, bool accumulate);  // A MxK, B NxK
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a,
             const double* b, double* c, bool accumulate);  // A KxM, B KxN

}  // namespace detail

/// Dense double-precision n-d array participating in a reverse-mode
/// differentiation graph. Values are row-major. Copying a Tensor copies the
/// handle, not the storage; every operation below produces fresh storage
/// (no views or aliasing). Leaves may be mutated in place through
/// values_mut() between graph constructions (optimizer updates, finite
/// differences); everything else is immutable after creation except grad
/// population during backward().
class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  /// i.i.d. N(0, stddev^2) entries drawn from rng in row-major order.
  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0,
                      bool requires_grad = false);

  bool defined() const { return static_cast<bool>(n_); }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t size() const;

  const std::vector<double>& values() const;
  /// Mutable access for leaves (parameters, finite-difference probes).
  std::vector<double>& values_mut();
  /// Scalar extraction; requires size() == 1.
  double item() const;
  double at(std::initializer_list<std::size_t> idx) const;

  bool requires_grad() const;
  /// Only valid on leaves (tensors with no recorded inputs).
  void set_requires_grad(bool b);

  bool has_grad() const;
  const std::vector<double>& grad() const;
  void zero_grad();
  /// Clears grads and the backward-ran flag across the reachable graph,
  /// permitting a second backward() from this root.
  void reset_backward_state();

  /// Value copy severed from the graph; requires_grad = false.
  Tensor detach() const;

  detail::Node* node() const { return n_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return n_; }
  static Tensor wrap(std::shared_ptr<detail::Node> n);

 private:
  std::shared_ptr<detail::Node> n_;
};

/// Graph-construction entry point for custom primitives (convolution,
/// pooling). If no input requires grad the inputs and backprop are dropped
/// and the result is a detached constant.
Tensor make_op(std::vector<Tensor> inputs, Shape out_shape,
               std::vector<double> out_values,
               std::function<void(detail::Node&)> backprop);

// Elementwise binary ops with trailing-dimension broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

// Scalar convenience forms.
Tensor add_scalar(const Tensor& a, double c);
Tensor mul_scalar(const Tensor& a, double c);

// Elementwise unary ops.
Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);  // errors on non-positive input
Tensor sqrt(const Tensor& a);  // errors on negative input
Tensor abs(const Tensor& a);  // subgradient 0 at 0
Tensor relu(const Tensor& a);
Tensor clamp_min(const Tensor& a, double lo);

// Shape ops.
Tensor reshape(const Tensor& a, Shape shape);
Tensor broadcast_to(const Tensor& a, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t start,
             std::size_t len);
Tensor transpose(const Tensor& a);               // 2-D
Tensor matmul(const Tensor& a, const Tensor& b);  // 2-D x 2-D

// Reductions.
Tensor sum(const Tensor& a);
Tensor sum(const Tensor& a, std::vector<std::size_t> axes, bool keepdim);
Tensor mean(const Tensor& a);
Tensor mean(const Tensor& a, std::vector<std::size_t> axes, bool keepdim);
/// Max over one axis; ties resolve to the lowest index, which also receives
/// the subgradient.
Tensor max(const Tensor& a, std::size_t axis, bool keepdim);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator*(const Tensor& a, double c) { return mul_scalar(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return mul_scalar(a, c); }
inline Tensor operator+(const Tensor& a, double c) { return add_scalar(a, c); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

/// Reverse-mode sweep from a scalar root. Populates grad on every reachable
/// tensor with requires_grad, visiting nodes in reverse construction order
/// exactly once. A second call on the same root throws unless
/// reset_backward_state() was called; grads of leaves shared between
/// different roots accumulate.
void backward(const Tensor& root);

/// Central finite-difference check of d f / d x. f must rebuild its graph on
/// every call and read x by handle so in-place probes are visible. Returns
/// the max over elements of |analytic - numeric| / max(|analytic|, |numeric|, 1).
double grad_check(const std::function<Tensor()>& f, Tensor x, double eps);

/// Named-array container: the serialization unit shared by checkpoints and
/// dataset fixtures. Per array: UTF-8 name, u32 rank, u64 extents, then
/// little-endian IEEE-754 doubles in row-major order.
struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

void write_arrays(std::ostream& os, const std::vector<NamedArray>& arrays);
std::vector<NamedArray> read_arrays(std::istream& is);

}  // namespace okd
