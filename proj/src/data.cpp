#include "okd/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

namespace okd {

namespace {

namespace fs = std::filesystem;

[[noreturn]] void fail(const std::string& msg) { throw Error(msg); }

std::vector<unsigned char> read_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail("load_cifar: cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)),
                                   std::istreambuf_iterator<char>());
  return bytes;
}

struct RawSplit {
  std::vector<double> pixels;  // [N, 3, 32, 32] in [0, 1]
  std::vector<int> labels;
};

void append_records(const fs::path& path, CifarVariant variant,
                    std::size_t num_classes, RawSplit& out) {
  const std::size_t record =
      variant == CifarVariant::Cifar10 ? 3073 : 3074;
  const std::size_t label_off = variant == CifarVariant::Cifar10 ? 0 : 1;
  auto bytes = read_file(path);
  if (bytes.empty() || bytes.size() % record != 0) {
    fail("load_cifar: " + path.string() + " has size " +
         std::to_string(bytes.size()) + ", not a positive multiple of the " +
         std::to_string(record) + "-byte record");
  }
  const std::size_t n = bytes.size() / record;
  out.pixels.reserve(out.pixels.size() + n * 3072);
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char* rec = bytes.data() + i * record;
    const int label = rec[label_off];
    if (std::size_t(label) >= num_classes) {
      fail("load_cifar: label " + std::to_string(label) + " out of range in " +
           path.string());
    }
    out.labels.push_back(label);
    const unsigned char* px = rec + label_off + 1;
    for (std::size_t j = 0; j < 3072; ++j) {
      out.pixels.push_back(double(px[j]) / 255.0);
    }
  }
}

NormStats compute_stats(const std::vector<double>& pixels, std::size_t n,
                        std::size_t channels, std::size_t plane) {
  NormStats stats;
  stats.mean.assign(channels, 0.0);
  stats.stddev.assign(channels, 0.0);
  const std::size_t per_channel = n * plane;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < channels; ++c) {
      const double* p = pixels.data() + (i * channels + c) * plane;
      for (std::size_t j = 0; j < plane; ++j) stats.mean[c] += p[j];
    }
  }
  for (std::size_t c = 0; c < channels; ++c) stats.mean[c] /= double(per_channel);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < channels; ++c) {
      const double* p = pixels.data() + (i * channels + c) * plane;
      for (std::size_t j = 0; j < plane; ++j) {
        const double d = p[j] - stats.mean[c];
        stats.stddev[c] += d * d;
      }
    }
  }
  for (std::size_t c = 0; c < channels; ++c) {
    stats.stddev[c] = std::sqrt(stats.stddev[c] / double(per_channel));
    if (stats.stddev[c] < 1e-8) stats.stddev[c] = 1e-8;
  }
  return stats;
}

void normalize(std::vector<double>& pixels, std::size_t n,
               std::size_t channels, std::size_t plane,
               const NormStats& stats) {
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < channels; ++c) {
      double* p = pixels.data() + (i * channels + c) * plane;
      for (std::size_t j = 0; j < plane; ++j) {
        p[j] = (p[j] - stats.mean[c]) / stats.stddev[c];
      }
    }
  }
}

Dataset finish_split(RawSplit&& raw, const NormStats& stats,
                     std::size_t num_classes, std::size_t channels,
                     std::size_t height, std::size_t width,
                     const std::string& split) {
  Dataset ds;
  ds.split = split;
  ds.num_classes = num_classes;
  ds.channels = channels;
  ds.height = height;
  ds.width = width;
  ds.images = std::move(raw.pixels);
  ds.labels = std::move(raw.labels);
  ds.stats = stats;
  normalize(ds.images, ds.size(), channels, height * width, ds.stats);
  return ds;
}

}  // namespace

std::pair<Dataset, Dataset> load_cifar(const std::string& dir,
                                       CifarVariant variant) {
  const std::size_t num_classes = variant == CifarVariant::Cifar10 ? 10 : 100;
  std::vector<std::string> train_files, test_files;
  if (variant == CifarVariant::Cifar10) {
    for (int i = 1; i <= 5; ++i) {
      train_files.push_back("data_batch_" + std::to_string(i) + ".bin");
    }
    test_files.push_back("test_batch.bin");
  } else {
    train_files.push_back("train.bin");
    test_files.push_back("test.bin");
  }

  std::vector<std::string> missing;
  for (const auto& name : train_files) {
    if (!fs::exists(fs::path(dir) / name)) missing.push_back(name);
  }
  for (const auto& name : test_files) {
    if (!fs::exists(fs::path(dir) / name)) missing.push_back(name);
  }
  if (!missing.empty()) {
    std::string msg = "load_cifar: missing files in " + dir + ":";
    for (const auto& name : missing) msg += " " + name;
    fail(msg);
  }

  RawSplit train_raw, test_raw;
  for (const auto& name : train_files) {
    append_records(fs::path(dir) / name, variant, num_classes, train_raw);
  }
  for (const auto& name : test_files) {
    append_records(fs::path(dir) / name, variant, num_classes, test_raw);
  }

  NormStats stats =
      compute_stats(train_raw.pixels, train_raw.labels.size(), 3, 32 * 32);
  Dataset train = finish_split(std::move(train_raw), stats, num_classes, 3, 32,
                               32, "train");
  Dataset test =
      finish_split(std::move(test_raw), stats, num_classes, 3, 32, 32, "test");
  return {std::move(train), std::move(test)};
}

std::pair<Dataset, Dataset> synthetic_dataset(const SyntheticSpec& spec) {
  if (spec.classes < 2) {
    fail("synthetic_dataset: need at least 2 classes, got " +
         std::to_string(spec.classes));
  }
  if (spec.train_per_class == 0 || spec.channels == 0 || spec.height == 0 ||
      spec.width == 0 || spec.blobs_per_class == 0) {
    fail("synthetic_dataset: invalid spec (zero-sized field)");
  }
  const std::size_t plane = spec.height * spec.width;
  const std::size_t image = spec.channels * plane;
  Rng rng(spec.seed);

  // Fixed per-class templates: a few spatial Gaussian bumps with random
  // centers, widths and per-channel amplitudes, normalized to unit RMS.
  std::vector<std::vector<double>> templates(spec.classes,
                                             std::vector<double>(image, 0.0));
  const double min_side = double(std::min(spec.height, spec.width));
  for (auto& tmpl : templates) {
    for (std::size_t blob = 0; blob < spec.blobs_per_class; ++blob) {
      const double cy = (0.2 + 0.6 * rng.uniform()) * double(spec.height);
      const double cx = (0.2 + 0.6 * rng.uniform()) * double(spec.width);
      const double sigma = (0.10 + 0.15 * rng.uniform()) * min_side;
      std::vector<double> amp(spec.channels);
      for (double& a : amp) a = rng.normal();
      for (std::size_t c = 0; c < spec.channels; ++c) {
        for (std::size_t y = 0; y < spec.height; ++y) {
          for (std::size_t x = 0; x < spec.width; ++x) {
            const double dy = double(y) - cy, dx = double(x) - cx;
            tmpl[c * plane + y * spec.width + x] +=
                amp[c] * std::exp(-(dy * dy + dx * dx) / (2.0 * sigma * sigma));
          }
        }
      }
    }
    double rms = 0.0;
    for (double v : tmpl) rms += v * v;
    rms = std::sqrt(rms / double(image));
    if (rms < 1e-12) rms = 1e-12;
    for (double& v : tmpl) v /= rms;
  }

  auto draw_split = [&](std::size_t per_class) {
    RawSplit raw;
    raw.pixels.reserve(spec.classes * per_class * image);
    for (std::size_t cls = 0; cls < spec.classes; ++cls) {
      for (std::size_t s = 0; s < per_class; ++s) {
        raw.labels.push_back(int(cls));
        for (std::size_t j = 0; j < image; ++j) {
          const double v =
              spec.margin * templates[cls][j] + spec.noise * rng.normal();
          raw.pixels.push_back(std::clamp(0.5 + 0.125 * v, 0.0, 1.0));
        }
      }
    }
    return raw;
  };

  RawSplit train_raw = draw_split(spec.train_per_class);
  RawSplit test_raw = draw_split(spec.test_per_class);
  NormStats stats =
      compute_stats(train_raw.pixels, train_raw.labels.size(), spec.channels,
                    plane);
  Dataset train = finish_split(std::move(train_raw), stats, spec.classes,
                               spec.channels, spec.height, spec.width, "train");
  Dataset test = finish_split(std::move(test_raw), stats, spec.classes,
                              spec.channels, spec.height, spec.width, "test");
  return {std::move(train), std::move(test)};
}

void flip_horizontal(double* image, std::size_t channels, std::size_t height,
                     std::size_t width) {
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t y = 0; y < height; ++y) {
      double* row = image + (c * height + y) * width;
      std::reverse(row, row + width);
    }
  }
}

void crop_with_pad(double* image, std::size_t channels, std::size_t height,
                   std::size_t width, std::size_t pad, std::size_t dy,
                   std::size_t dx) {
  if (dy > 2 * pad || dx > 2 * pad) {
    fail("crop_with_pad: offsets must lie in [0, 2*pad]");
  }
  std::vector<double> out(channels * height * width, 0.0);
  const std::ptrdiff_t oy = std::ptrdiff_t(dy) - std::ptrdiff_t(pad);
  const std::ptrdiff_t ox = std::ptrdiff_t(dx) - std::ptrdiff_t(pad);
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t y = 0; y < height; ++y) {
      const std::ptrdiff_t sy = std::ptrdiff_t(y) + oy;
      if (sy < 0 || sy >= std::ptrdiff_t(height)) continue;
      for (std::size_t x = 0; x < width; ++x) {
        const std::ptrdiff_t sx = std::ptrdiff_t(x) + ox;
        if (sx < 0 || sx >= std::ptrdiff_t(width)) continue;
        out[(c * height + y) * width + x] =
            image[(c * height + std::size_t(sy)) * width + std::size_t(sx)];
      }
    }
  }
  std::copy(out.begin(), out.end(), image);
}

void augment_batch(std::vector<double>& batch, std::size_t batch_size,
                   std::size_t channels, std::size_t height, std::size_t width,
                   Rng& rng, std::size_t pad) {
  const std::size_t image = channels * height * width;
  if (batch.size() != batch_size * image) {
    fail("augment_batch: buffer size does not match batch shape");
  }
  for (std::size_t b = 0; b < batch_size; ++b) {
    double* img = batch.data() + b * image;
    const std::size_t dy = rng.uniform_int(2 * pad + 1);
    const std::size_t dx = rng.uniform_int(2 * pad + 1);
    const bool flip = rng.bernoulli(0.5);
    crop_with_pad(img, channels, height, width, pad, dy, dx);
    if (flip) flip_horizontal(img, channels, height, width);
  }
}

BatchIterator::BatchIterator(const Dataset& dataset, std::size_t batch_size)
    : ds_(&dataset), batch_size_(batch_size) {
  if (batch_size_ == 0) fail("BatchIterator: batch size must be positive");
  order_.resize(dataset.size());
  for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
}

void BatchIterator::start_epoch(Rng* shuffle_rng) {
  cursor_ = 0;
  for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
  if (shuffle_rng) shuffle_rng->shuffle(order_);
}

bool BatchIterator::next(std::vector<double>& images,
                         std::vector<int>& labels) {
  if (cursor_ >= order_.size()) return false;
  const std::size_t got = std::min(batch_size_, order_.size() - cursor_);
  const std::size_t image = ds_->image_size();
  images.resize(got * image);
  labels.resize(got);
  for (std::size_t i = 0; i < got; ++i) {
    const std::size_t idx = order_[cursor_ + i];
    std::copy(ds_->images.begin() + std::ptrdiff_t(idx * image),
              ds_->images.begin() + std::ptrdiff_t((idx + 1) * image),
              images.begin() + std::ptrdiff_t(i * image));
    labels[i] = ds_->labels[idx];
  }
  cursor_ += got;
  return true;
}

std::vector<NamedArray> dataset_to_arrays(const Dataset& dataset) {
  std::vector<NamedArray> arrays;
  arrays.push_back({"images",
                    {dataset.size(), dataset.channels, dataset.height,
                     dataset.width},
                    dataset.images});
  std::vector<double> labels(dataset.labels.begin(), dataset.labels.end());
  arrays.push_back({"labels", {dataset.size()}, std::move(labels)});
  arrays.push_back({"mean", {dataset.channels}, dataset.stats.mean});
  arrays.push_back({"stddev", {dataset.channels}, dataset.stats.stddev});
  arrays.push_back(
      {"meta",
       {2},
       {double(dataset.num_classes), dataset.split == "train" ? 1.0 : 0.0}});
  return arrays;
}

Dataset dataset_from_arrays(const std::vector<NamedArray>& arrays) {
  auto find = [&](const std::string& name) -> const NamedArray& {
    for (const auto& a : arrays) {
      if (a.name == name) return a;
    }
    fail("dataset_from_arrays: missing array '" + name + "'");
  };
  const NamedArray& images = find("images");
  if (images.shape.size() != 4) {
    fail("dataset_from_arrays: images array must be rank 4");
  }
  Dataset ds;
  ds.channels = images.shape[1];
  ds.height = images.shape[2];
  ds.width = images.shape[3];
  ds.images = images.values;
  const NamedArray& labels = find("labels");
  ds.labels.reserve(labels.values.size());
  for (double v : labels.values) ds.labels.push_back(int(v));
  ds.stats.mean = find("mean").values;
  ds.stats.stddev = find("stddev").values;
  const NamedArray& meta = find("meta");
  ds.num_classes = std::size_t(meta.values.at(0));
  ds.split = meta.values.at(1) > 0.5 ? "train" : "test";
  if (ds.labels.size() != images.shape[0]) {
    fail("dataset_from_arrays: image/label count mismatch");
  }
  return ds;
}

}  // namespace okd
