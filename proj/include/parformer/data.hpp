#pragma once

// Datasets for desk-scale training: the CIFAR-10 binary format and a seeded
// synthetic set of oriented gratings.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "parformer/tensor.hpp"

namespace parformer {

/// Images are stored in [0,1]. Batches are normalized per channel with the
/// stored mean/std, which are computed once when the dataset is created.
struct Dataset {
  Tensor<float> images;  // [N, C, H, W]
  std::vector<int> labels;
  int num_classes = 0;
  std::string split;
  std::vector<float> mean;
  std::vector<float> stddev;

  std::size_t size() const { return labels.size(); }
  std::int64_t channels() const { return images.dim(1); }
  std::int64_t height() const { return images.dim(2); }
  std::int64_t width() const { return images.dim(3); }

  /// Normalized images for the given sample indices, as [n, C, H, W].
  template <typename T>
  Tensor<T> batch_images(std::span<const std::size_t> idx) const {
    const std::int64_t C = channels(), P = height() * width();
    Tensor<T> out({static_cast<std::int64_t>(idx.size()), C, height(), width()});
    for (std::size_t b = 0; b < idx.size(); ++b) {
      for (std::int64_t c = 0; c < C; ++c) {
        const float* src = images.ptr() + (static_cast<std::int64_t>(idx[b]) * C + c) * P;
        T* dst = out.ptr() + (static_cast<std::int64_t>(b) * C + c) * P;
        const float m = mean[c], s = stddev[c];
        for (std::int64_t p = 0; p < P; ++p) dst[p] = static_cast<T>((src[p] - m) / s);
      }
    }
    return out;
  }

  std::vector<int> batch_labels(std::span<const std::size_t> idx) const {
    std::vector<int> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(labels[i]);
    return out;
  }
};

/// Per-channel mean and standard deviation over all images, summed in double.
inline void compute_channel_stats(Dataset& ds) {
  const std::int64_t N = ds.images.dim(0), C = ds.channels(), P = ds.height() * ds.width();
  ds.mean.assign(C, 0.0f);
  ds.stddev.assign(C, 1.0f);
  if (N == 0 || P == 0) return;
  for (std::int64_t c = 0; c < C; ++c) {
    double s = 0, ss = 0;
    for (std::int64_t n = 0; n < N; ++n) {
      const float* p = ds.images.ptr() + (n * C + c) * P;
      for (std::int64_t i = 0; i < P; ++i) s += p[i];
    }
    const double count = static_cast<double>(N * P);
    const double m = s / count;
    for (std::int64_t n = 0; n < N; ++n) {
      const float* p = ds.images.ptr() + (n * C + c) * P;
      for (std::int64_t i = 0; i < P; ++i) ss += (p[i] - m) * (p[i] - m);
    }
    const double sd = std::sqrt(ss / count);
    ds.mean[c] = static_cast<float>(m);
    ds.stddev[c] = sd > 1e-6 ? static_cast<float>(sd) : 1.0f;
  }
}

/// Throws Error("data") when labels or pixel values break the invariants.
inline void validate(const Dataset& ds) {
  if (ds.images.rank() != 4) throw Error("data", "images must be [N,C,H,W]");
  if (static_cast<std::size_t>(ds.images.dim(0)) != ds.labels.size()) {
    throw Error("data", "image and label counts differ");
  }
  if (ds.num_classes < 1) throw Error("data", "num_classes must be >= 1");
  for (std::size_t i = 0; i < ds.labels.size(); ++i) {
    if (ds.labels[i] < 0 || ds.labels[i] >= ds.num_classes) {
      throw Error("data", "label " + std::to_string(ds.labels[i]) + " at index " + std::to_string(i) +
                              " is outside [0," + std::to_string(ds.num_classes) + ")");
    }
  }
  for (float v : ds.images.data()) {
    if (!(v >= 0.0f && v <= 1.0f)) throw Error("data", "pixel value outside [0,1]");
  }
  const auto C = static_cast<std::size_t>(ds.channels());
  if (ds.mean.size() != C || ds.stddev.size() != C) throw Error("data", "normalization constants missing");
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary layout: records of 1 label byte + 3x32x32 pixel bytes
// (R, G, B planes, each row-major).

namespace cifar10 {
inline constexpr std::int64_t kSide = 32;
inline constexpr std::int64_t kPixels = 3 * kSide * kSide;
inline constexpr std::size_t kRecord = 1 + static_cast<std::size_t>(kPixels);
inline constexpr int kClasses = 10;
}  // namespace cifar10

/// Decodes a buffer of records. Pixels become byte / 255.
inline Dataset parse_cifar10(std::span<const std::uint8_t> bytes, std::string split) {
  if (bytes.size() % cifar10::kRecord != 0) {
    throw Error("data", "CIFAR-10 data length " + std::to_string(bytes.size()) +
                            " is not a multiple of the 3073-byte record size");
  }
  const auto n = static_cast<std::int64_t>(bytes.size() / cifar10::kRecord);
  Dataset ds;
  ds.split = std::move(split);
  ds.num_classes = cifar10::kClasses;
  ds.images = Tensor<float>({n, 3, cifar10::kSide, cifar10::kSide});
  ds.labels.resize(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    const std::uint8_t* rec = bytes.data() + static_cast<std::size_t>(i) * cifar10::kRecord;
    if (rec[0] > 9) {
      throw Error("data", "record " + std::to_string(i) + " has label byte " + std::to_string(rec[0]) + " > 9");
    }
    ds.labels[static_cast<std::size_t>(i)] = rec[0];
    float* dst = ds.images.ptr() + i * cifar10::kPixels;
    for (std::int64_t p = 0; p < cifar10::kPixels; ++p) dst[p] = static_cast<float>(rec[1 + p]) / 255.0f;
  }
  compute_channel_stats(ds);
  return ds;
}

namespace detail {
inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("io", "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw Error("io", "read failed: " + path.string());
  return bytes;
}
}  // namespace detail

/// Loads a single .bin file, or a directory: split "train" reads
/// data_batch_*.bin in name order, split "test" reads test_batch.bin.
inline Dataset load_cifar10_binary(const std::filesystem::path& path, const std::string& split = "train") {
  namespace fs = std::filesystem;
  std::vector<fs::path> files;
  if (fs::is_regular_file(path)) {
    files.push_back(path);
  } else if (fs::is_directory(path)) {
    if (split == "test") {
      files.push_back(path / "test_batch.bin");
    } else if (split == "train") {
      for (const auto& e : fs::directory_iterator(path)) {
        const auto name = e.path().filename().string();
        if (name.starts_with("data_batch_") && name.ends_with(".bin")) files.push_back(e.path());
      }
      std::sort(files.begin(), files.end());
    } else {
      throw Error("data", "unknown CIFAR-10 split '" + split + "'");
    }
    if (files.empty()) throw Error("io", "no CIFAR-10 " + split + " files in " + path.string());
  } else {
    throw Error("io", "no such file or directory: " + path.string());
  }
  std::vector<std::uint8_t> all;
  for (const auto& f : files) {
    auto bytes = detail::read_file(f);
    if (bytes.size() % cifar10::kRecord != 0) {
      throw Error("data", f.string() + ": length " + std::to_string(bytes.size()) +
                              " is not a multiple of 3073");
    }
    all.insert(all.end(), bytes.begin(), bytes.end());
  }
  return parse_cifar10(all, split);
}

/// Encodes [N,3,32,32] images in [0,1] as records; pixels are round(x * 255).
inline std::vector<std::uint8_t> encode_cifar10(const Tensor<float>& images, std::span<const int> labels) {
  if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != cifar10::kSide ||
      images.dim(3) != cifar10::kSide) {
    throw Error("shape", "CIFAR-10 records need [N,3,32,32] images, got " + to_string(images.shape()));
  }
  const auto n = static_cast<std::size_t>(images.dim(0));
  if (labels.size() != n) throw Error("data", "image and label counts differ");
  std::vector<std::uint8_t> out(n * cifar10::kRecord);
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || labels[i] > 9) throw Error("data", "CIFAR-10 labels must lie in [0,9]");
    std::uint8_t* rec = out.data() + i * cifar10::kRecord;
    rec[0] = static_cast<std::uint8_t>(labels[i]);
    const float* src = images.ptr() + static_cast<std::int64_t>(i) * cifar10::kPixels;
    for (std::int64_t p = 0; p < cifar10::kPixels; ++p) {
      const float v = std::clamp(src[p], 0.0f, 1.0f);
      rec[1 + p] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
    }
  }
  return out;
}

inline void write_cifar10_binary(const std::filesystem::path& path, const Tensor<float>& images,
                                 std::span<const int> labels) {
  const auto bytes = encode_cifar10(images, labels);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("io", "cannot create " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("io", "write failed: " + path.string());
}

// ---------------------------------------------------------------------------

struct SynthOptions {
  int classes = 4;
  int per_class = 64;
  std::uint64_t seed = 0;
  int size = 32;
  double noise = 0.1;
};

/// Class c is a sinusoidal grating at orientation pi * c / classes with random
/// frequency, phase, contrast and per-channel tint, plus Gaussian pixel noise.
/// Samples are interleaved by class, so every prefix of k*m images is balanced.
inline Dataset synth_dataset(const SynthOptions& opt) {
  if (opt.classes < 1 || opt.per_class < 0 || opt.size < 1) {
    throw Error("config", "synth_dataset needs classes >= 1, per_class >= 0 and size >= 1");
  }
  if (!(opt.noise >= 0)) throw Error("config", "synth noise must be >= 0");
  const std::int64_t n = static_cast<std::int64_t>(opt.classes) * opt.per_class;
  const std::int64_t S = opt.size;
  Dataset ds;
  ds.split = "synth";
  ds.num_classes = opt.classes;
  ds.images = Tensor<float>({n, 3, S, S});
  ds.labels.resize(static_cast<std::size_t>(n));
  Rng rng(opt.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (std::int64_t i = 0; i < n; ++i) {
    const int c = static_cast<int>(i % opt.classes);
    ds.labels[static_cast<std::size_t>(i)] = c;
    const double theta = std::numbers::pi * c / opt.classes + 0.1 * (unit(rng) - 0.5);
    const double cycles = 2.0 + 2.0 * unit(rng);
    const double phase = 2 * std::numbers::pi * unit(rng);
    const double contrast = 0.25 + 0.15 * unit(rng);
    double tint[3];
    for (double& t : tint) t = 0.6 + 0.4 * unit(rng);
    const double kx = 2 * std::numbers::pi * cycles * std::cos(theta) / static_cast<double>(S);
    const double ky = 2 * std::numbers::pi * cycles * std::sin(theta) / static_cast<double>(S);
    for (std::int64_t ch = 0; ch < 3; ++ch) {
      float* dst = ds.images.ptr() + (i * 3 + ch) * S * S;
      for (std::int64_t y = 0; y < S; ++y) {
        for (std::int64_t x = 0; x < S; ++x) {
          const double wave = std::cos(kx * static_cast<double>(x) + ky * static_cast<double>(y) + phase);
          const double v = 0.5 + contrast * tint[ch] * wave + opt.noise * gauss(rng);
          dst[y * S + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
      }
    }
  }
  compute_channel_stats(ds);
  return ds;
}

/// The first `n` samples, keeping normalization constants.
inline Dataset take(const Dataset& ds, std::size_t n) {
  if (n > ds.size()) throw Error("data", "take: not enough samples");
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Dataset out;
  out.num_classes = ds.num_classes;
  out.split = ds.split;
  out.mean = ds.mean;
  out.stddev = ds.stddev;
  const std::int64_t per = ds.channels() * ds.height() * ds.width();
  out.images = Tensor<float>({static_cast<std::int64_t>(n), ds.channels(), ds.height(), ds.width()});
  std::copy(ds.images.ptr(), ds.images.ptr() + static_cast<std::int64_t>(n) * per, out.images.ptr());
  out.labels.assign(ds.labels.begin(), ds.labels.begin() + static_cast<std::ptrdiff_t>(n));
  return out;
}

}  // namespace parformer
