#pragma once

// Synthetic desk-scale image classification data (gaussian-blob classes) and
// the label-preserving corruption generators used for robustness smoke tests.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace groupnl {

struct SyntheticDataset {
  Tensor images;            // (n, 3, hw, hw), values in [0, 1]
  std::vector<int> labels;  // size n
  std::uint64_t seed = 0;
  std::uint32_t classes = 10;
  std::uint32_t train_count = 0;  // first train_count samples are the train split

  std::uint32_t size() const { return images.n; }
  std::uint32_t test_count() const { return size() - train_count; }
};

// Per-class template = a few random soft blobs with a class color; each sample
// adds pixel noise on top. Deterministic given the seed; class-balanced;
// 80/20 train/test split with both splits balanced.
inline SyntheticDataset generate_dataset(std::uint64_t seed, std::uint32_t n,
                                         std::uint32_t classes, std::uint32_t hw) {
  if (classes == 0 || n < classes) throw InvalidSpec("generate_dataset: need n >= classes >= 1");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);

  struct Blob {
    double cy, cx, sigma, amp[3];
  };
  std::vector<std::vector<Blob>> templates(classes);
  for (std::uint32_t k = 0; k < classes; ++k) {
    std::uint32_t blobs = 2 + std::uint32_t(uni(rng) * 3);  // 2..4 blobs
    for (std::uint32_t b = 0; b < blobs; ++b) {
      Blob bl;
      bl.cy = uni(rng) * hw;
      bl.cx = uni(rng) * hw;
      bl.sigma = (0.08 + 0.17 * uni(rng)) * hw;
      for (int c = 0; c < 3; ++c) bl.amp[c] = uni(rng);
      templates[k].push_back(bl);
    }
  }

  // class-balanced, interleaved so any prefix split stays balanced
  SyntheticDataset ds;
  ds.seed = seed;
  ds.classes = classes;
  ds.images = Tensor(n, 3, hw, hw);
  ds.labels.resize(n);
  std::normal_distribution<double> noise(0.0, 0.08);
  for (std::uint32_t i = 0; i < n; ++i) {
    int k = int(i % classes);
    ds.labels[i] = k;
    for (std::uint32_t c = 0; c < 3; ++c)
      for (std::uint32_t y = 0; y < hw; ++y)
        for (std::uint32_t x = 0; x < hw; ++x) {
          double v = 0.1;
          for (const Blob& bl : templates[k]) {
            double d2 = (y - bl.cy) * (y - bl.cy) + (x - bl.cx) * (x - bl.cx);
            v += bl.amp[c] * std::exp(-d2 / (2 * bl.sigma * bl.sigma));
          }
          v += noise(rng);
          ds.images.at(i, c, y, x) = float(std::clamp(v, 0.0, 1.0));
        }
  }
  ds.train_count = (n * 8 + 9) / 10;
  return ds;
}

enum class CorruptionKind { GaussianNoise, ShotNoise, GaussianBlur, Brightness, Contrast };

inline const char* corruption_name(CorruptionKind k) {
  switch (k) {
    case CorruptionKind::GaussianNoise: return "gaussian_noise";
    case CorruptionKind::ShotNoise: return "shot_noise";
    case CorruptionKind::GaussianBlur: return "gaussian_blur";
    case CorruptionKind::Brightness: return "brightness";
    case CorruptionKind::Contrast: return "contrast";
  }
  return "?";
}

inline CorruptionKind corruption_from_name(const std::string& s) {
  if (s == "gaussian_noise") return CorruptionKind::GaussianNoise;
  if (s == "shot_noise") return CorruptionKind::ShotNoise;
  if (s == "gaussian_blur") return CorruptionKind::GaussianBlur;
  if (s == "brightness") return CorruptionKind::Brightness;
  if (s == "contrast") return CorruptionKind::Contrast;
  throw InvalidSpec("corruption: unknown kind '" + s + "'");
}

struct CorruptionSpec {
  CorruptionKind kind = CorruptionKind::GaussianNoise;
  std::uint32_t severity = 1;  // 1..5; 0 is the identity test hook
};

namespace detail {

inline Tensor gaussian_blur(const Tensor& x, double sigma) {
  int radius = std::max(1, int(std::ceil(2.5 * sigma)));
  std::vector<double> kernel(2 * radius + 1);
  double s = 0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    s += kernel[i + radius];
  }
  for (auto& v : kernel) v /= s;

  Tensor tmp(x.n, x.c, x.h, x.w), out(x.n, x.c, x.h, x.w);
  auto clampi = [](int v, int lo, int hi) { return v < lo ? lo : (v > hi ? hi : v); };
  for (std::uint32_t in = 0; in < x.n; ++in)
    for (std::uint32_t c = 0; c < x.c; ++c) {
      for (std::uint32_t y = 0; y < x.h; ++y)
        for (std::uint32_t xx = 0; xx < x.w; ++xx) {
          double v = 0;
          for (int i = -radius; i <= radius; ++i)
            v += kernel[i + radius] *
                 x.at(in, c, y, std::uint32_t(clampi(int(xx) + i, 0, int(x.w) - 1)));
          tmp.at(in, c, y, xx) = float(v);
        }
      for (std::uint32_t y = 0; y < x.h; ++y)
        for (std::uint32_t xx = 0; xx < x.w; ++xx) {
          double v = 0;
          for (int i = -radius; i <= radius; ++i)
            v += kernel[i + radius] *
                 tmp.at(in, c, std::uint32_t(clampi(int(y) + i, 0, int(x.h) - 1)), xx);
          out.at(in, c, y, xx) = float(v);
        }
    }
  return out;
}

}  // namespace detail

// Label-preserving; severity scales the distortion monotonically; severity 0
// is the identity (test hook). Deterministic given the dataset seed.
inline SyntheticDataset corrupt(const SyntheticDataset& ds, const CorruptionSpec& spec) {
  if (spec.severity > 5) throw InvalidSpec("corrupt: severity must be in 0..5");
  SyntheticDataset out = ds;
  if (spec.severity == 0) return out;
  std::uint32_t sev = spec.severity;
  std::mt19937_64 rng(ds.seed ^ (0xC0DEull + 131 * sev + 1009 * std::uint64_t(spec.kind)));

  switch (spec.kind) {
    case CorruptionKind::GaussianNoise: {
      static constexpr double kSigma[5] = {0.06, 0.12, 0.20, 0.30, 0.45};
      std::normal_distribution<double> noise(0.0, kSigma[sev - 1]);
      for (auto& v : out.images.data) v = float(std::clamp(double(v) + noise(rng), 0.0, 1.0));
      break;
    }
    case CorruptionKind::ShotNoise: {
      static constexpr double kPhotons[5] = {60, 25, 12, 5, 3};
      double lam = kPhotons[sev - 1];
      for (auto& v : out.images.data) {
        std::poisson_distribution<int> pois(std::max(0.0, double(v)) * lam);
        v = float(std::clamp(double(pois(rng)) / lam, 0.0, 1.0));
      }
      break;
    }
    case CorruptionKind::GaussianBlur: {
      static constexpr double kSigma[5] = {0.5, 1.0, 1.6, 2.4, 3.5};
      out.images = detail::gaussian_blur(out.images, kSigma[sev - 1]);
      break;
    }
    case CorruptionKind::Brightness: {
      static constexpr double kShift[5] = {0.10, 0.20, 0.32, 0.45, 0.60};
      for (auto& v : out.images.data)
        v = float(std::clamp(double(v) + kShift[sev - 1], 0.0, 1.0));
      break;
    }
    case CorruptionKind::Contrast: {
      static constexpr double kScale[5] = {0.75, 0.55, 0.40, 0.27, 0.15};
      std::size_t per_img = out.images.numel() / out.images.n;
      for (std::uint32_t i = 0; i < out.images.n; ++i) {
        float* p = out.images.data.data() + std::size_t(i) * per_img;
        double mean = 0;
        for (std::size_t k = 0; k < per_img; ++k) mean += p[k];
        mean /= double(per_img);
        for (std::size_t k = 0; k < per_img; ++k)
          p[k] = float(std::clamp(mean + (p[k] - mean) * kScale[sev - 1], 0.0, 1.0));
      }
      break;
    }
  }
  return out;
}

// Dataset disk cache: images as a .nchw blob plus a JSON label sidecar
// (written by the caller; see serialize.hpp for the sidecar helpers).
inline void save_dataset_images(const std::string& path, const SyntheticDataset& ds) {
  save_nchw(path, ds.images);
}

// Loader hook for externally supplied CIFAR-format binaries: consecutive
// records of 1 label byte + 3*32*32 pixel bytes (plane-major RGB). Values are
// scaled to [0, 1]. Keeps the repo hermetic; callers skip it when the file is
// absent.
inline SyntheticDataset load_cifar_binary(const std::string& path, std::uint32_t max_records = 0,
                                          std::uint32_t classes = 10) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open CIFAR binary: " + path);
  constexpr std::uint32_t kHw = 32;
  constexpr std::size_t kRecord = 1 + 3 * kHw * kHw;
  is.seekg(0, std::ios::end);
  std::size_t bytes = std::size_t(is.tellg());
  is.seekg(0);
  if (bytes % kRecord != 0)
    throw IoError("CIFAR binary size is not a multiple of the record size: " + path);
  std::uint32_t n = std::uint32_t(bytes / kRecord);
  if (max_records > 0) n = std::min(n, max_records);
  if (n == 0) throw IoError("CIFAR binary holds no records: " + path);

  SyntheticDataset ds;
  ds.classes = classes;
  ds.images = Tensor(n, 3, kHw, kHw);
  ds.labels.resize(n);
  std::vector<unsigned char> rec(kRecord);
  for (std::uint32_t i = 0; i < n; ++i) {
    is.read(reinterpret_cast<char*>(rec.data()), std::streamsize(kRecord));
    if (!is) throw IoError("truncated CIFAR record in " + path);
    ds.labels[i] = int(rec[0]);
    for (std::size_t j = 0; j < 3 * kHw * kHw; ++j)
      ds.images.data[std::size_t(i) * 3 * kHw * kHw + j] = float(rec[1 + j]) / 255.0f;
  }
  ds.train_count = (n * 8 + 9) / 10;
  return ds;
}

}  // namespace groupnl
