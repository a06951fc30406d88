#pragma once

#include <variant>
#include <vector>

#include "okd/rng.hpp"
#include "okd/tensor.hpp"

namespace okd {

enum class Mode { Train, Eval };

// --- differentiable structured primitives -----------------------------------

/// 2-D convolution, x [B, Cin, H, W] with weight (Cout, Cin, k, k).
/// No bias: every convolution here is followed by batch normalization.
Tensor conv2d(const Tensor& x, const Tensor& weight, std::size_t stride,
              std::size_t pad);

/// 2x2 max pooling with stride 2; requires even spatial extents. Ties route
/// the gradient to the lowest input index.
Tensor maxpool2(const Tensor& x);

/// Mean over both spatial axes: [B, C, H, W] -> [B, C].
Tensor global_avg_pool(const Tensor& x);

/// Temperature softmax over the last axis: softmax(logits / T). Computed
/// with max-subtraction for stability; invariant under adding a constant to
/// all logits. Requires T > 0 and at least two classes.
Tensor softmax_T(const Tensor& logits, double temperature);

// --- layers ------------------------------------------------------------------

struct Conv2d {
  Tensor weight;  // (out_channels, in_channels, k, k)
  std::size_t stride = 1;
  std::size_t pad = 1;

  Tensor forward(const Tensor& x) const {
    return conv2d(x, weight, stride, pad);
  }
};

/// Batch normalization over (batch, spatial) per channel. Train mode uses
/// batch statistics and updates the running estimates in place; eval mode
/// reads only the running estimates, so eval outputs are independent of
/// batch composition. Train mode requires batch size >= 2.
struct BatchNorm2d {
  Tensor gamma;  // [C]
  Tensor beta;   // [C]
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  Tensor forward(const Tensor& x, Mode mode);
};

struct Linear {
  Tensor weight;  // (in_features, out_features)
  Tensor bias;    // (out_features)

  Tensor forward(const Tensor& x) const;
};

struct ReLULayer {};
struct GlobalAvgPoolLayer {};
struct MaxPool2Layer {};

using Layer = std::variant<Conv2d, BatchNorm2d, ReLULayer, Linear,
                           GlobalAvgPoolLayer, MaxPool2Layer>;

Tensor layer_forward(Layer& layer, const Tensor& x, Mode mode);

// --- initialization ----------------------------------------------------------

/// He-normal weight init (std = sqrt(2 / fan_in)), the standard choice for
/// ReLU networks.
Conv2d make_conv(std::size_t in_ch, std::size_t out_ch, std::size_t kernel,
                 std::size_t stride, std::size_t pad, Rng& rng);
BatchNorm2d make_batchnorm(std::size_t channels);
Linear make_linear(std::size_t in_features, std::size_t out_features, Rng& rng);

}  // namespace okd
