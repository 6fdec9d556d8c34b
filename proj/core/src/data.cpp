#include "gradinv/data.hpp"

#include <cmath>
#include <fstream>

#include "gradinv/rng.hpp"

namespace gradinv {

namespace {

void check_image_dims(const Tensor& t, const Normalization& norm, const char* op) {
  if (t.shape.size() != 3 && t.shape.size() != 4) {
    throw ShapeError(std::string(op) + ": expected [C,H,W] or [N,C,H,W], got " +
                     shape_str(t.shape));
  }
  int c = t.shape.size() == 3 ? t.shape[0] : t.shape[1];
  if (norm.mean.size() != static_cast<std::size_t>(c) ||
      norm.stddev.size() != static_cast<std::size_t>(c)) {
    throw ShapeError(std::string(op) + ": normalization has " + std::to_string(norm.mean.size()) +
                     " channels, image has " + std::to_string(c));
  }
}

}  // namespace

Tensor denormalize(const Tensor& t, const Normalization& norm) {
  check_image_dims(t, norm, "denormalize");
  Tensor out = t.detached_copy();
  int c = t.shape.size() == 3 ? t.shape[0] : t.shape[1];
  std::int64_t plane = t.shape.size() == 3 ? t.shape[1] * t.shape[2]
                                           : static_cast<std::int64_t>(t.shape[2]) * t.shape[3];
  std::int64_t planes = out.size() / plane;
  for (std::int64_t p = 0; p < planes; ++p) {
    int ch = static_cast<int>(p % c);
    double* base = out.ptr() + p * plane;
    for (std::int64_t i = 0; i < plane; ++i) {
      base[i] = base[i] * norm.stddev[static_cast<std::size_t>(ch)] +
                norm.mean[static_cast<std::size_t>(ch)];
    }
  }
  return out;
}

Tensor normalize(const Tensor& t, const Normalization& norm) {
  check_image_dims(t, norm, "normalize");
  Tensor out = t.detached_copy();
  int c = t.shape.size() == 3 ? t.shape[0] : t.shape[1];
  std::int64_t plane = t.shape.size() == 3 ? t.shape[1] * t.shape[2]
                                           : static_cast<std::int64_t>(t.shape[2]) * t.shape[3];
  std::int64_t planes = out.size() / plane;
  for (std::int64_t p = 0; p < planes; ++p) {
    int ch = static_cast<int>(p % c);
    double* base = out.ptr() + p * plane;
    for (std::int64_t i = 0; i < plane; ++i) {
      base[i] = (base[i] - norm.mean[static_cast<std::size_t>(ch)]) /
                norm.stddev[static_cast<std::size_t>(ch)];
    }
  }
  return out;
}

Tensor clamp01(const Tensor& t) {
  Tensor out = t.detached_copy();
  for (std::int64_t i = 0; i < out.size(); ++i) {
    out[i] = std::min(1.0, std::max(0.0, out[i]));
  }
  return out;
}

}  // namespace gradinv

namespace gradinv::data {

namespace {

constexpr int kCifarRecords = 10000;
constexpr int kCifarPixels = 3072;  // 3 x 32 x 32, channel-major
constexpr int kCifarRecordBytes = 1 + kCifarPixels;

Normalization channel_stats(const std::vector<Tensor>& images, int channels) {
  std::vector<double> sum(static_cast<std::size_t>(channels), 0.0);
  std::vector<double> sum2(static_cast<std::size_t>(channels), 0.0);
  std::int64_t per_channel = 0;
  for (const Tensor& img : images) {
    std::int64_t plane = static_cast<std::int64_t>(img.shape[1]) * img.shape[2];
    per_channel += plane;
    for (int c = 0; c < channels; ++c) {
      const double* base = img.ptr() + static_cast<std::int64_t>(c) * plane;
      for (std::int64_t i = 0; i < plane; ++i) {
        sum[static_cast<std::size_t>(c)] += base[i];
        sum2[static_cast<std::size_t>(c)] += base[i] * base[i];
      }
    }
  }
  Normalization norm;
  norm.mean.resize(static_cast<std::size_t>(channels));
  norm.stddev.resize(static_cast<std::size_t>(channels));
  for (int c = 0; c < channels; ++c) {
    double m = sum[static_cast<std::size_t>(c)] / static_cast<double>(per_channel);
    double var = sum2[static_cast<std::size_t>(c)] / static_cast<double>(per_channel) - m * m;
    norm.mean[static_cast<std::size_t>(c)] = m;
    norm.stddev[static_cast<std::size_t>(c)] = var > 1e-24 ? std::sqrt(var) : 1.0;
  }
  return norm;
}

}  // namespace

Dataset load_cifar10_binary(const std::string& path, const std::vector<int>& indices) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cifar10: cannot open '" + path + "'");
  in.seekg(0, std::ios::end);
  std::int64_t length = in.tellg();
  constexpr std::int64_t kExpected = static_cast<std::int64_t>(kCifarRecords) * kCifarRecordBytes;
  if (length != kExpected) {
    throw IoError("cifar10: '" + path + "' is " + std::to_string(length) + " bytes, expected " +
                  std::to_string(kExpected));
  }
  in.seekg(0, std::ios::beg);
  std::vector<unsigned char> raw(static_cast<std::size_t>(kExpected));
  in.read(reinterpret_cast<char*>(raw.data()), kExpected);
  if (!in) throw IoError("cifar10: short read from '" + path + "'");

  // Stats over the whole file; selection happens afterwards.
  std::vector<double> sum(3, 0.0), sum2(3, 0.0);
  for (int r = 0; r < kCifarRecords; ++r) {
    const unsigned char* px = raw.data() + static_cast<std::size_t>(r) * kCifarRecordBytes + 1;
    if (raw[static_cast<std::size_t>(r) * kCifarRecordBytes] >= 10) {
      throw IoError("cifar10: record " + std::to_string(r) + " has label byte " +
                    std::to_string(raw[static_cast<std::size_t>(r) * kCifarRecordBytes]) +
                    " >= 10");
    }
    for (int c = 0; c < 3; ++c) {
      for (int i = 0; i < 1024; ++i) {
        double v = px[c * 1024 + i] / 255.0;
        sum[static_cast<std::size_t>(c)] += v;
        sum2[static_cast<std::size_t>(c)] += v * v;
      }
    }
  }
  Dataset ds;
  ds.channels = 3;
  ds.height = 32;
  ds.width = 32;
  ds.num_classes = 10;
  ds.norm.mean.resize(3);
  ds.norm.stddev.resize(3);
  const double n_per_channel = static_cast<double>(kCifarRecords) * 1024.0;
  for (int c = 0; c < 3; ++c) {
    double m = sum[static_cast<std::size_t>(c)] / n_per_channel;
    double var = sum2[static_cast<std::size_t>(c)] / n_per_channel - m * m;
    ds.norm.mean[static_cast<std::size_t>(c)] = m;
    ds.norm.stddev[static_cast<std::size_t>(c)] = var > 1e-24 ? std::sqrt(var) : 1.0;
  }

  for (int idx : indices) {
    if (idx < 0 || idx >= kCifarRecords) {
      throw IoError("cifar10: index " + std::to_string(idx) + " out of range [0, " +
                    std::to_string(kCifarRecords) + ")");
    }
    const unsigned char* rec = raw.data() + static_cast<std::size_t>(idx) * kCifarRecordBytes;
    ds.labels.push_back(rec[0]);
    Tensor img = Tensor::zeros({3, 32, 32});
    for (int c = 0; c < 3; ++c) {
      for (int i = 0; i < 1024; ++i) {
        double v = rec[1 + c * 1024 + i] / 255.0;
        img[static_cast<std::int64_t>(c) * 1024 + i] =
            (v - ds.norm.mean[static_cast<std::size_t>(c)]) / ds.norm.stddev[static_cast<std::size_t>(c)];
      }
    }
    ds.images.push_back(std::move(img));
  }
  return ds;
}

Dataset gen_synthetic(int n, int size, std::uint64_t seed) {
  if (n < 1) throw ValueError("gen_synthetic: n must be >= 1");
  if (size < 4) throw ValueError("gen_synthetic: size must be >= 4");
  Dataset ds;
  ds.channels = 3;
  ds.height = size;
  ds.width = size;
  ds.num_classes = 10;

  Rng rng(seed);
  // Labels first: blocks of 10 from seeded permutations, so contiguous
  // batches of up to 10 samples have distinct labels.
  for (int i = 0; i < n; i += 10) {
    std::vector<int> perm = rng.permutation(10);
    for (int j = 0; j < 10 && i + j < n; ++j) ds.labels.push_back(perm[static_cast<std::size_t>(j)]);
  }

  std::vector<Tensor> raw;  // in [0,1] before normalization
  raw.reserve(static_cast<std::size_t>(n));
  const double two_pi = 6.283185307179586476925286766559;
  for (int img = 0; img < n; ++img) {
    Tensor t = Tensor::zeros({3, size, size});
    for (int c = 0; c < 3; ++c) {
      double amp[3], fx[3], fy[3], phase[3];
      for (int k = 0; k < 3; ++k) {
        amp[k] = rng.uniform(0.5, 1.0);
        fx[k] = rng.uniform(-2.0, 2.0);
        fy[k] = rng.uniform(-2.0, 2.0);
        phase[k] = rng.uniform(0.0, two_pi);
      }
      double lo = std::numeric_limits<double>::infinity();
      double hi = -std::numeric_limits<double>::infinity();
      for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
          double v = 0.0;
          for (int k = 0; k < 3; ++k) {
            v += amp[k] * std::sin(two_pi * (fx[k] * x + fy[k] * y) / size + phase[k]);
          }
          t[(static_cast<std::int64_t>(c) * size + y) * size + x] = v;
          lo = std::min(lo, v);
          hi = std::max(hi, v);
        }
      }
      double span = hi - lo;
      double* base = t.ptr() + static_cast<std::int64_t>(c) * size * size;
      for (int i = 0; i < size * size; ++i) {
        base[i] = span > 1e-12 ? (base[i] - lo) / span : 0.5;
      }
    }
    raw.push_back(std::move(t));
  }

  ds.norm = channel_stats(raw, 3);
  for (const Tensor& img : raw) ds.images.push_back(normalize(img, ds.norm));
  return ds;
}

}  // namespace gradinv::data
