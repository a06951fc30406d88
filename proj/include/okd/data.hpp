#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "okd/rng.hpp"
#include "okd/tensor.hpp"

namespace okd {

enum class CifarVariant { Cifar10, Cifar100 };

struct NormStats {
  std::vector<double> mean;    // per channel
  std::vector<double> stddev;  // per channel
};

/// Immutable image dataset. Images are stored [N, ch, H, W] row-major,
/// already per-channel normalized with the training-split statistics kept in
/// `stats` (so normalization is invertible).
struct Dataset {
  std::string split;  // "train" or "test"
  std::size_t num_classes = 0;
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> images;
  std::vector<int> labels;
  NormStats stats;

  std::size_t size() const { return labels.size(); }
  std::size_t image_size() const { return channels * height * width; }
};

/// Loads the standard CIFAR binary batches from `dir`.
/// CIFAR-10: records of 3073 bytes (label byte + 1024 R + 1024 G + 1024 B),
/// files data_batch_1..5.bin and test_batch.bin. CIFAR-100: records of 3074
/// bytes (coarse label, fine label, pixels), files train.bin and test.bin;
/// the fine label is used. Pixels are scaled to [0,1] and then per-channel
/// normalized with statistics computed on the training split.
std::pair<Dataset, Dataset> load_cifar(const std::string& dir,
                                       CifarVariant variant);

struct SyntheticSpec {
  std::size_t classes = 2;
  std::size_t train_per_class = 10;
  std::size_t test_per_class = 10;
  std::size_t channels = 3;
  std::size_t height = 16;
  std::size_t width = 16;
  double margin = 2.0;  // template amplitude relative to unit pixel noise
  double noise = 1.0;
  std::size_t blobs_per_class = 2;
  std::uint64_t seed = 1;
};

/// Class-conditional Gaussian-blob images: each class owns a fixed random
/// template of spatial Gaussian bumps; samples are margin * template + noise.
/// Deterministic per seed; linearly separable when the margin is large.
std::pair<Dataset, Dataset> synthetic_dataset(const SyntheticSpec& spec);

// --- augmentation -------------------------------------------------------------

/// Mirrors one [ch, H, W] image along the horizontal axis, in place.
void flip_horizontal(double* image, std::size_t channels, std::size_t height,
                     std::size_t width);

/// Zero-pads `pad` pixels on every side and crops the original extent back
/// out at offset (dy, dx), dy/dx in [0, 2*pad]. (pad, pad) is the identity.
void crop_with_pad(double* image, std::size_t channels, std::size_t height,
                   std::size_t width, std::size_t pad, std::size_t dy,
                   std::size_t dx);

/// Standard train-time augmentation: random crop from the zero-padded image
/// followed by a horizontal flip with probability 1/2. Per image the rng is
/// consumed in the order dy, dx, flip.
void augment_batch(std::vector<double>& batch, std::size_t batch_size,
                   std::size_t channels, std::size_t height, std::size_t width,
                   Rng& rng, std::size_t pad = 4);

// --- batching -------------------------------------------------------------

/// Epoch iterator over a dataset. start_epoch() with an rng reshuffles the
/// visit order; every sample is visited exactly once per epoch (the final
/// batch may be short).
class BatchIterator {
 public:
  BatchIterator(const Dataset& dataset, std::size_t batch_size);

  void start_epoch(Rng* shuffle_rng);
  /// Fills `images` ([got, ch, H, W] flattened) and `labels`; returns false
  /// once the epoch is exhausted.
  bool next(std::vector<double>& images, std::vector<int>& labels);
  const std::vector<std::size_t>& order() const { return order_; }

 private:
  const Dataset* ds_;
  std::size_t batch_size_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

// --- fixtures -------------------------------------------------------------

std::vector<NamedArray> dataset_to_arrays(const Dataset& dataset);
Dataset dataset_from_arrays(const std::vector<NamedArray>& arrays);

}  // namespace okd
