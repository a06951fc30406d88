#include "okd/nn.hpp"

#include <cmath>
#include <limits>

namespace okd {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw Error(msg); }

// Gathers conv patches: cols is (Cin*k*k) x (Hout*Wout) for one batch item.
void im2col(const double* x, std::size_t cin, std::size_t h, std::size_t w,
            std::size_t k, std::size_t stride, std::size_t pad,
            std::size_t hout, std::size_t wout, double* cols) {
  const std::size_t hw = hout * wout;
  for (std::size_t ci = 0; ci < cin; ++ci) {
    const double* xc = x + ci * h * w;
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        double* row = cols + ((ci * k + ky) * k + kx) * hw;
        for (std::size_t oy = 0; oy < hout; ++oy) {
          const std::ptrdiff_t iy =
              std::ptrdiff_t(oy * stride + ky) - std::ptrdiff_t(pad);
          const bool y_ok = iy >= 0 && iy < std::ptrdiff_t(h);
          for (std::size_t ox = 0; ox < wout; ++ox) {
            const std::ptrdiff_t ix =
                std::ptrdiff_t(ox * stride + kx) - std::ptrdiff_t(pad);
            row[oy * wout + ox] = (y_ok && ix >= 0 && ix < std::ptrdiff_t(w))
                                      ? xc[iy * w + ix]
                                      : 0.0;
          }
        }
      }
    }
  }
}

// Scatter-add of dcols back onto the input image.
void col2im_add(const double* cols, std::size_t cin, std::size_t h,
                std::size_t w, std::size_t k, std::size_t stride,
                std::size_t pad, std::size_t hout, std::size_t wout,
                double* dx) {
  const std::size_t hw = hout * wout;
  for (std::size_t ci = 0; ci < cin; ++ci) {
    double* dxc = dx + ci * h * w;
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const double* row = cols + ((ci * k + ky) * k + kx) * hw;
        for (std::size_t oy = 0; oy < hout; ++oy) {
          const std::ptrdiff_t iy =
              std::ptrdiff_t(oy * stride + ky) - std::ptrdiff_t(pad);
          if (iy < 0 || iy >= std::ptrdiff_t(h)) continue;
          for (std::size_t ox = 0; ox < wout; ++ox) {
            const std::ptrdiff_t ix =
                std::ptrdiff_t(ox * stride + kx) - std::ptrdiff_t(pad);
            if (ix < 0 || ix >= std::ptrdiff_t(w)) continue;
            dxc[iy * w + ix] += row[oy * wout + ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, std::size_t stride,
              std::size_t pad) {
  if (!x.defined() || !weight.defined()) fail("conv2d: undefined operand");
  if (x.rank() != 4 || weight.rank() != 4) {
    fail("conv2d: expected input [B,C,H,W] and weight [O,C,k,k], got " +
         shape_str(x.shape()) + " and " + shape_str(weight.shape()));
  }
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  const std::size_t batch = xs[0], cin = xs[1], h = xs[2], w = xs[3];
  const std::size_t cout = ws[0], k = ws[2];
  if (ws[1] != cin || ws[2] != ws[3]) {
    fail("conv2d: weight " + shape_str(ws) + " incompatible with input " +
         shape_str(xs));
  }
  if (stride == 0 || h + 2 * pad < k || w + 2 * pad < k) {
    fail("conv2d: kernel " + std::to_string(k) + " too large for input " +
         shape_str(xs) + " with pad " + std::to_string(pad));
  }
  const std::size_t hout = (h + 2 * pad - k) / stride + 1;
  const std::size_t wout = (w + 2 * pad - k) / stride + 1;
  const std::size_t hw = hout * wout;
  const std::size_t ck = cin * k * k;

  std::vector<double> out(batch * cout * hw);
  std::vector<double> cols(ck * hw);
  const double* xv = x.values().data();
  const double* wv = weight.values().data();
  for (std::size_t b = 0; b < batch; ++b) {
    im2col(xv + b * cin * h * w, cin, h, w, k, stride, pad, hout, wout,
           cols.data());
    detail::gemm_nn(cout, hw, ck, wv, cols.data(), out.data() + b * cout * hw,
                    false);
  }

  // Backward recomputes im2col per item instead of retaining the column
  // buffers for the whole graph lifetime.
  auto backprop = [batch, cin, h, w, cout, k, stride, pad, hout, wout,
                   hw, ck](detail::Node& self) {
    detail::Node* nx = self.inputs[0].get();
    detail::Node* nw = self.inputs[1].get();
    const double* xv = nx->values.data();
    const double* wv = nw->values.data();
    const double* g = self.grad.data();
    const bool need_dx = nx->requires_grad;
    const bool need_dw = nw->requires_grad;
    if (need_dx) nx->ensure_grad();
    if (need_dw) nw->ensure_grad();
    std::vector<double> cols(ck * hw);
    std::vector<double> dcols(need_dx ? ck * hw : 0);
    for (std::size_t b = 0; b < batch; ++b) {
      const double* gb = g + b * cout * hw;
      im2col(xv + b * cin * h * w, cin, h, w, k, stride, pad, hout, wout,
             cols.data());
      if (need_dw) {
        // dW += G_b . cols^T
        detail::gemm_nt(cout, ck, hw, gb, cols.data(), nw->grad.data(), true);
      }
      if (need_dx) {
        // dcols = W^T . G_b, then scatter back to image layout
        detail::gemm_tn(ck, hw, cout, wv, gb, dcols.data(), false);
        col2im_add(dcols.data(), cin, h, w, k, stride, pad, hout, wout,
                   nx->grad.data() + b * cin * h * w);
      }
    }
  };
  return make_op({x, weight}, {batch, cout, hout, wout}, std::move(out),
                 std::move(backprop));
}

Tensor maxpool2(const Tensor& x) {
  if (!x.defined() || x.rank() != 4) {
    fail("maxpool2: expected [B,C,H,W], got " +
         (x.defined() ? shape_str(x.shape()) : std::string("undefined")));
  }
  const Shape& s = x.shape();
  const std::size_t batch = s[0], c = s[1], h = s[2], w = s[3];
  if (h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0) {
    fail("maxpool2: spatial extents must be even and positive, got " +
         shape_str(s));
  }
  const std::size_t ho = h / 2, wo = w / 2;
  std::vector<double> out(batch * c * ho * wo);
  std::vector<std::size_t> argmax(out.size());
  const double* xv = x.values().data();
  std::size_t o = 0;
  for (std::size_t bc = 0; bc < batch * c; ++bc) {
    const double* plane = xv + bc * h * w;
    const std::size_t base = bc * h * w;
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox, ++o) {
        // fixed visit order; first strict max wins so ties go to the
        // lowest input index
        std::size_t best = (2 * oy) * w + 2 * ox;
        double bv = plane[best];
        const std::size_t cand[3] = {(2 * oy) * w + 2 * ox + 1,
                                     (2 * oy + 1) * w + 2 * ox,
                                     (2 * oy + 1) * w + 2 * ox + 1};
        for (std::size_t idx : cand) {
          if (plane[idx] > bv) {
            bv = plane[idx];
            best = idx;
          }
        }
        out[o] = bv;
        argmax[o] = base + best;
      }
    }
  }
  return make_op({x}, {batch, c, ho, wo}, std::move(out),
                 [argmax = std::move(argmax)](detail::Node& self) {
                   detail::Node* nx = self.inputs[0].get();
                   if (!nx->requires_grad) return;
                   nx->ensure_grad();
                   for (std::size_t i = 0; i < argmax.size(); ++i) {
                     nx->grad[argmax[i]] += self.grad[i];
                   }
                 });
}

Tensor global_avg_pool(const Tensor& x) {
  if (!x.defined() || x.rank() != 4) {
    fail("global_avg_pool: expected [B,C,H,W], got " +
         (x.defined() ? shape_str(x.shape()) : std::string("undefined")));
  }
  return mean(x, {2, 3}, false);
}

Tensor softmax_T(const Tensor& logits, double temperature) {
  if (!logits.defined()) fail("softmax_T: undefined input");
  if (!(temperature > 0.0)) {
    fail("softmax_T: temperature must be positive, got " +
         std::to_string(temperature));
  }
  if (logits.rank() == 0 || logits.shape().back() < 2) {
    fail("softmax_T: need at least 2 classes on the last axis, got " +
         shape_str(logits.shape()));
  }
  const std::size_t last = logits.rank() - 1;
  Tensor scaled = mul_scalar(logits, 1.0 / temperature);
  // The shift is detached: softmax is invariant to it, so it carries no
  // gradient, only numerical stability.
  Tensor shift = max(scaled, last, true).detach();
  Tensor e = exp(sub(scaled, shift));
  Tensor denom = sum(e, {last}, true);
  return div(e, denom);
}

Tensor BatchNorm2d::forward(const Tensor& x, Mode mode) {
  if (!x.defined() || x.rank() != 4) {
    fail("batchnorm: expected [B,C,H,W], got " +
         (x.defined() ? shape_str(x.shape()) : std::string("undefined")));
  }
  const Shape& s = x.shape();
  const std::size_t c = s[1];
  if (c != gamma.size()) {
    fail("batchnorm: channel mismatch, input " + shape_str(s) + " vs gamma " +
         shape_str(gamma.shape()));
  }
  const Shape cshape{1, c, 1, 1};
  Tensor g = reshape(gamma, cshape);
  Tensor b = reshape(beta, cshape);

  if (mode == Mode::Train) {
    if (s[0] < 2) {
      fail("batchnorm: train mode requires batch size >= 2, got " +
           shape_str(s));
    }
    Tensor mu = mean(x, {0, 2, 3}, true);
    Tensor centered = sub(x, mu);
    Tensor var = mean(mul(centered, centered), {0, 2, 3}, true);
    Tensor norm = div(centered, sqrt(add_scalar(var, eps)));

    // Running estimates: biased batch variance rescaled to the unbiased
    // form, matching the usual train/eval convention.
    const double n = double(s[0] * s[2] * s[3]);
    const double unbias = n / (n - 1.0);
    const auto& mu_v = mu.values();
    const auto& var_v = var.values();
    for (std::size_t i = 0; i < c; ++i) {
      running_mean[i] = (1.0 - momentum) * running_mean[i] + momentum * mu_v[i];
      running_var[i] =
          (1.0 - momentum) * running_var[i] + momentum * var_v[i] * unbias;
    }
    return add(mul(norm, g), b);
  }

  Tensor rm = Tensor::from(cshape, running_mean);
  Tensor rv = Tensor::from(cshape, running_var);
  Tensor norm = div(sub(x, rm), sqrt(add_scalar(rv, eps)));
  return add(mul(norm, g), b);
}

Tensor Linear::forward(const Tensor& x) const {
  if (!x.defined() || x.rank() != 2 || x.shape()[1] != weight.shape()[0]) {
    fail("linear: input " +
         (x.defined() ? shape_str(x.shape()) : std::string("undefined")) +
         " incompatible with weight " + shape_str(weight.shape()));
  }
  return add(matmul(x, weight), bias);
}

Tensor layer_forward(Layer& layer, const Tensor& x, Mode mode) {
  return std::visit(
      [&](auto& l) -> Tensor {
        using T = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<T, Conv2d>) {
          return l.forward(x);
        } else if constexpr (std::is_same_v<T, BatchNorm2d>) {
          return l.forward(x, mode);
        } else if constexpr (std::is_same_v<T, ReLULayer>) {
          return relu(x);
        } else if constexpr (std::is_same_v<T, Linear>) {
          return l.forward(x);
        } else if constexpr (std::is_same_v<T, GlobalAvgPoolLayer>) {
          return global_avg_pool(x);
        } else {
          return maxpool2(x);
        }
      },
      layer);
}

Conv2d make_conv(std::size_t in_ch, std::size_t out_ch, std::size_t kernel,
                 std::size_t stride, std::size_t pad, Rng& rng) {
  const double stddev = std::sqrt(2.0 / double(in_ch * kernel * kernel));
  Conv2d conv;
  conv.weight = Tensor::randn({out_ch, in_ch, kernel, kernel}, rng, stddev, true);
  conv.stride = stride;
  conv.pad = pad;
  return conv;
}

BatchNorm2d make_batchnorm(std::size_t channels) {
  BatchNorm2d bn;
  bn.gamma = Tensor::full({channels}, 1.0, true);
  bn.beta = Tensor::zeros({channels}, true);
  bn.running_mean.assign(channels, 0.0);
  bn.running_var.assign(channels, 1.0);
  return bn;
}

Linear make_linear(std::size_t in_features, std::size_t out_features,
                   Rng& rng) {
  Linear lin;
  lin.weight = Tensor::randn({in_features, out_features}, rng,
                             std::sqrt(2.0 / double(in_features)), true);
  lin.bias = Tensor::zeros({out_features}, true);
  return lin;
}

}  // namespace okd
