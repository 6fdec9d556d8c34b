#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "gradinv/nn.hpp"
#include "gradinv/rng.hpp"
#include "gradinv/tensor.hpp"

// Independent oracles for the derived expected values. These stay separate
// from the library code paths they check: plain nested loops and direct
// formula evaluation, no graph machinery.
namespace oracle {

using gradinv::Rng;
using gradinv::Shape;
using gradinv::Tensor;

inline double rel_err(double analytic, double reference) {
  return std::fabs(analytic - reference) / std::max(1.0, std::fabs(reference));
}

inline Tensor random_tensor(Shape shape, Rng& rng) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.normal();
  return t;
}

/// Direct cross-correlation with explicit bounds checks.
inline Tensor conv2d(const Tensor& x, const Tensor& k, int stride, int pad) {
  int n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3];
  int o = k.shape[0], kh = k.shape[2], kw = k.shape[3];
  int oh = (h + 2 * pad - kh) / stride + 1;
  int ow = (w + 2 * pad - kw) / stride + 1;
  Tensor out = Tensor::zeros({n, o, oh, ow});
  for (int in = 0; in < n; ++in)
    for (int io = 0; io < o; ++io)
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          double acc = 0.0;
          for (int ic = 0; ic < c; ++ic)
            for (int ky = 0; ky < kh; ++ky)
              for (int kx = 0; kx < kw; ++kx) {
                int y = oy * stride - pad + ky;
                int xx = ox * stride - pad + kx;
                if (y < 0 || y >= h || xx < 0 || xx >= w) continue;
                acc += x[((static_cast<std::int64_t>(in) * c + ic) * h + y) * w + xx] *
                       k[((static_cast<std::int64_t>(io) * c + ic) * kh + ky) * kw + kx];
              }
          out[((static_cast<std::int64_t>(in) * o + io) * oh + oy) * ow + ox] = acc;
        }
  return out;
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  int m = a.shape[0], k = a.shape[1], n = b.shape[1];
  Tensor out = Tensor::zeros({m, n});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int kk = 0; kk < k; ++kk)
        acc += a[static_cast<std::int64_t>(i) * k + kk] * b[static_cast<std::int64_t>(kk) * n + j];
      out[static_cast<std::int64_t>(i) * n + j] = acc;
    }
  return out;
}

inline Tensor avgpool2d(const Tensor& x, int kernel, int stride) {
  int n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3];
  int oh = (h - kernel) / stride + 1, ow = (w - kernel) / stride + 1;
  Tensor out = Tensor::zeros({n, c, oh, ow});
  for (int i = 0; i < n * c; ++i)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        double acc = 0.0;
        for (int ky = 0; ky < kernel; ++ky)
          for (int kx = 0; kx < kernel; ++kx)
            acc += x[(static_cast<std::int64_t>(i) * h + oy * stride + ky) * w + ox * stride + kx];
        out[(static_cast<std::int64_t>(i) * oh + oy) * ow + ox] = acc / (kernel * kernel);
      }
  return out;
}

inline double cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  int b = logits.shape[0], c = logits.shape[1];
  double total = 0.0;
  for (int r = 0; r < b; ++r) {
    double mx = logits[static_cast<std::int64_t>(r) * c];
    for (int j = 1; j < c; ++j) mx = std::max(mx, logits[static_cast<std::int64_t>(r) * c + j]);
    double z = 0.0;
    for (int j = 0; j < c; ++j) z += std::exp(logits[static_cast<std::int64_t>(r) * c + j] - mx);
    total += -(logits[static_cast<std::int64_t>(r) * c + labels[static_cast<std::size_t>(r)]] - mx -
               std::log(z));
  }
  return total / b;
}

inline double total_variation(const Tensor& img) {
  int n = img.shape[0], c = img.shape[1], h = img.shape[2], w = img.shape[3];
  double acc = 0.0;
  for (int i = 0; i < n * c; ++i) {
    const double* p = img.ptr() + static_cast<std::int64_t>(i) * h * w;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        if (x + 1 < w) acc += std::fabs(p[y * w + x + 1] - p[y * w + x]);
        if (y + 1 < h) acc += std::fabs(p[(y + 1) * w + x] - p[y * w + x]);
      }
  }
  return acc;
}

inline double psnr(const Tensor& x, const Tensor& y) {
  double acc = 0.0;
  for (std::int64_t i = 0; i < x.size(); ++i) acc += (x[i] - y[i]) * (x[i] - y[i]);
  double mse = acc / static_cast<double>(x.size());
  if (mse == 0.0) return 100.0;
  return std::min(100.0, 10.0 * std::log10(1.0 / mse));
}

/// Direct windowed SSIM: explicit per-window loops, Gaussian weights
/// normalized inside each window.
inline double ssim(const Tensor& x, const Tensor& y) {
  const int win = 11;
  const double sigma = 1.5, c1 = 1e-4, c2 = 9e-4;
  int channels = x.shape[0], h = x.shape[1], w = x.shape[2];
  std::vector<double> weight(static_cast<std::size_t>(win) * win);
  double wsum = 0.0;
  for (int i = 0; i < win; ++i)
    for (int j = 0; j < win; ++j) {
      double dy = i - 5.0, dx = j - 5.0;
      weight[static_cast<std::size_t>(i) * win + j] = std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
      wsum += weight[static_cast<std::size_t>(i) * win + j];
    }
  for (double& v : weight) v /= wsum;

  auto window_uniform = [&](const double* a, const double* b, int count) {
    double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
    for (int i = 0; i < count; ++i) {
      mx += a[i];
      my += b[i];
      sxx += a[i] * a[i];
      syy += b[i] * b[i];
      sxy += a[i] * b[i];
    }
    mx /= count;
    my /= count;
    sxx = sxx / count - mx * mx;
    syy = syy / count - my * my;
    sxy = sxy / count - mx * my;
    return ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2));
  };

  double total = 0.0;
  for (int ch = 0; ch < channels; ++ch) {
    const double* a = x.ptr() + static_cast<std::int64_t>(ch) * h * w;
    const double* b = y.ptr() + static_cast<std::int64_t>(ch) * h * w;
    if (h < win || w < win) {
      total += window_uniform(a, b, h * w);
      continue;
    }
    double acc = 0.0;
    int count = 0;
    for (int oy = 0; oy + win <= h; ++oy)
      for (int ox = 0; ox + win <= w; ++ox) {
        double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
        for (int i = 0; i < win; ++i)
          for (int j = 0; j < win; ++j) {
            double wv = weight[static_cast<std::size_t>(i) * win + j];
            double av = a[(oy + i) * w + ox + j], bv = b[(oy + i) * w + ox + j];
            mx += wv * av;
            my += wv * bv;
            sxx += wv * av * av;
            syy += wv * bv * bv;
            sxy += wv * av * bv;
          }
        double vx = sxx - mx * mx, vy = syy - my * my, cov = sxy - mx * my;
        acc += ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        ++count;
      }
    total += acc / count;
  }
  return total / channels;
}

/// Central finite differences of a scalar function of one tensor.
inline Tensor finite_difference(const std::function<double(const Tensor&)>& f, const Tensor& x,
                                double h = 1e-5) {
  Tensor grad = Tensor::zeros(x.shape);
  for (std::int64_t i = 0; i < x.size(); ++i) {
    Tensor hi = x.detached_copy(), lo = x.detached_copy();
    hi[i] += h;
    lo[i] -= h;
    grad[i] = (f(hi) - f(lo)) / (2 * h);
  }
  return grad;
}

/// Random small but valid model spec exercising conv/pool/fc/skip variety.
inline gradinv::nn::ModelSpec random_tiny_spec(Rng& rng) {
  using namespace gradinv::nn;
  for (int attempt = 0; attempt < 100; ++attempt) {
    ModelSpec spec;
    spec.in_channels = 1 + rng.uniform_int(2);
    spec.in_height = 5 + rng.uniform_int(3);
    spec.in_width = spec.in_height;
    spec.num_classes = 2 + rng.uniform_int(3);
    int n_conv = 1 + rng.uniform_int(3);
    for (int i = 0; i < n_conv; ++i) {
      ConvDesc cd;
      cd.out_channels = 1 + rng.uniform_int(3);
      cd.kernel = 1 + rng.uniform_int(3);
      cd.stride = 1 + rng.uniform_int(2);
      cd.padding = rng.uniform_int(2);
      cd.relu = rng.uniform_int(2) == 0;
      spec.layers.push_back(cd);
    }
    if (rng.uniform_int(2) == 0) spec.layers.push_back(PoolDesc{2, 2});
    spec.layers.push_back(FcDesc{spec.num_classes});
    try {
      spec.finalize();
      return spec;
    } catch (const gradinv::Error&) {
      continue;
    }
  }
  throw std::runtime_error("random_tiny_spec: no valid spec found");
}

}  // namespace oracle
