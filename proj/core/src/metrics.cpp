#include "gradinv/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "gradinv/normalize.hpp"

namespace gradinv::metrics {

double psnr(const Tensor& x, const Tensor& y) {
  require_same_shape(x, y, "psnr");
  double acc = 0.0;
  for (std::int64_t i = 0; i < x.size(); ++i) {
    double d = x[i] - y[i];
    acc += d * d;
  }
  double mse = acc / static_cast<double>(x.size());
  if (mse == 0.0) return 100.0;
  return std::min(100.0, 10.0 * std::log10(1.0 / mse));
}

namespace {

constexpr int kWindow = 11;
constexpr double kSigma = 1.5;
constexpr double kC1 = 0.01 * 0.01;  // (K1 * L)^2, L = 1
constexpr double kC2 = 0.03 * 0.03;

const std::vector<double>& gaussian_kernel() {
  static const std::vector<double> k = [] {
    std::vector<double> v(kWindow);
    double sum = 0.0;
    for (int i = 0; i < kWindow; ++i) {
      double d = i - (kWindow - 1) / 2.0;
      v[static_cast<std::size_t>(i)] = std::exp(-d * d / (2.0 * kSigma * kSigma));
      sum += v[static_cast<std::size_t>(i)];
    }
    for (double& x : v) x /= sum;
    return v;
  }();
  return k;
}

// Separable valid-region Gaussian filter: rows then columns.
std::vector<double> gauss_filter(const std::vector<double>& img, int h, int w) {
  const std::vector<double>& k = gaussian_kernel();
  int ow = w - kWindow + 1, oh = h - kWindow + 1;
  std::vector<double> rows(static_cast<std::size_t>(h) * ow, 0.0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (int i = 0; i < kWindow; ++i) acc += k[static_cast<std::size_t>(i)] * img[static_cast<std::size_t>(y) * w + x + i];
      rows[static_cast<std::size_t>(y) * ow + x] = acc;
    }
  }
  std::vector<double> out(static_cast<std::size_t>(oh) * ow, 0.0);
  for (int y = 0; y < oh; ++y) {
    for (int x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (int i = 0; i < kWindow; ++i) acc += k[static_cast<std::size_t>(i)] * rows[static_cast<std::size_t>(y + i) * ow + x];
      out[static_cast<std::size_t>(y) * ow + x] = acc;
    }
  }
  return out;
}

double ssim_from_stats(double mx, double my, double sxx, double syy, double sxy) {
  double vx = sxx - mx * mx;
  double vy = syy - my * my;
  double cov = sxy - mx * my;
  return ((2.0 * mx * my + kC1) * (2.0 * cov + kC2)) /
         ((mx * mx + my * my + kC1) * (vx + vy + kC2));
}

double ssim_channel(const double* x, const double* y, int h, int w, bool* global_window) {
  if (h < kWindow || w < kWindow) {
    *global_window = true;
    double mx = 0.0, my = 0.0, sxx = 0.0, syy = 0.0, sxy = 0.0;
    const double inv = 1.0 / (h * w);
    for (int i = 0; i < h * w; ++i) {
      mx += x[i];
      my += y[i];
      sxx += x[i] * x[i];
      syy += y[i] * y[i];
      sxy += x[i] * y[i];
    }
    return ssim_from_stats(mx * inv, my * inv, sxx * inv, syy * inv, sxy * inv);
  }
  std::vector<double> xv(x, x + h * w), yv(y, y + h * w);
  std::vector<double> xx(static_cast<std::size_t>(h) * w), yy(xx.size()), xy(xx.size());
  for (std::size_t i = 0; i < xx.size(); ++i) {
    xx[i] = xv[i] * xv[i];
    yy[i] = yv[i] * yv[i];
    xy[i] = xv[i] * yv[i];
  }
  std::vector<double> mx = gauss_filter(xv, h, w);
  std::vector<double> my = gauss_filter(yv, h, w);
  std::vector<double> sxx = gauss_filter(xx, h, w);
  std::vector<double> syy = gauss_filter(yy, h, w);
  std::vector<double> sxy = gauss_filter(xy, h, w);
  double acc = 0.0;
  for (std::size_t i = 0; i < mx.size(); ++i) {
    acc += ssim_from_stats(mx[i], my[i], sxx[i], syy[i], sxy[i]);
  }
  return acc / static_cast<double>(mx.size());
}

}  // namespace

SsimResult ssim_detailed(const Tensor& x, const Tensor& y) {
  require_same_shape(x, y, "ssim");
  if (x.shape.size() != 3 && x.shape.size() != 4) {
    throw ShapeError("ssim: expected [C,H,W] or [N,C,H,W], got " + shape_str(x.shape));
  }
  int planes = 1;
  int h, w;
  if (x.shape.size() == 3) {
    planes = x.shape[0];
    h = x.shape[1];
    w = x.shape[2];
  } else {
    planes = x.shape[0] * x.shape[1];
    h = x.shape[2];
    w = x.shape[3];
  }
  SsimResult result;
  double acc = 0.0;
  bool global_window = false;
  for (int p = 0; p < planes; ++p) {
    acc += ssim_channel(x.ptr() + static_cast<std::int64_t>(p) * h * w,
                        y.ptr() + static_cast<std::int64_t>(p) * h * w, h, w, &global_window);
  }
  result.value = acc / planes;
  result.global_window = global_window;
  return result;
}

double ssim(const Tensor& x, const Tensor& y) { return ssim_detailed(x, y).value; }

namespace {

std::vector<int> best_assignment(const std::vector<std::vector<double>>& psnr_matrix) {
  const int n = static_cast<int>(psnr_matrix.size());
  std::vector<int> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  if (n <= 6) {
    std::vector<int> best = perm;
    double best_total = -1.0;
    do {
      double total = 0.0;
      for (int i = 0; i < n; ++i) {
        total += psnr_matrix[static_cast<std::size_t>(i)][static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
      }
      if (total > best_total) {
        best_total = total;
        best = perm;
      }
    } while (std::next_permutation(perm.begin(), perm.end()));
    return best;
  }
  // Greedy fallback for large batches: best available pair first.
  struct Cand {
    double p;
    int slot, truth;
  };
  std::vector<Cand> cands;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      cands.push_back({psnr_matrix[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)], i, j});
  std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
    if (a.p != b.p) return a.p > b.p;
    if (a.slot != b.slot) return a.slot < b.slot;
    return a.truth < b.truth;
  });
  std::vector<int> out(static_cast<std::size_t>(n), -1);
  std::vector<char> used(static_cast<std::size_t>(n), 0);
  for (const Cand& c : cands) {
    if (out[static_cast<std::size_t>(c.slot)] >= 0 || used[static_cast<std::size_t>(c.truth)]) continue;
    out[static_cast<std::size_t>(c.slot)] = c.truth;
    used[static_cast<std::size_t>(c.truth)] = 1;
  }
  return out;
}

}  // namespace

EvalReport evaluate_batch(const std::vector<Tensor>& reconstructions,
                          const std::vector<Tensor>& truth) {
  if (reconstructions.size() != truth.size() || reconstructions.empty()) {
    throw ShapeError("evaluate_batch: " + std::to_string(reconstructions.size()) +
                     " reconstructions vs " + std::to_string(truth.size()) + " ground truths");
  }
  const int n = static_cast<int>(reconstructions.size());
  std::vector<Tensor> rec, tru;
  rec.reserve(reconstructions.size());
  tru.reserve(truth.size());
  for (const Tensor& t : reconstructions) rec.push_back(clamp01(t));
  for (const Tensor& t : truth) tru.push_back(clamp01(t));

  std::vector<std::vector<double>> pm(static_cast<std::size_t>(n),
                                      std::vector<double>(static_cast<std::size_t>(n), 0.0));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      pm[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] =
          psnr(rec[static_cast<std::size_t>(i)], tru[static_cast<std::size_t>(j)]);

  EvalReport report;
  report.assignment = best_assignment(pm);
  double psnr_acc = 0.0, ssim_acc = 0.0;
  for (int i = 0; i < n; ++i) {
    int j = report.assignment[static_cast<std::size_t>(i)];
    SsimResult s = ssim_detailed(rec[static_cast<std::size_t>(i)], tru[static_cast<std::size_t>(j)]);
    report.ssim_global_window = report.ssim_global_window || s.global_window;
    SampleEval e;
    e.slot = i;
    e.truth_index = j;
    e.psnr_db = pm[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
    e.ssim = s.value;
    report.samples.push_back(e);
    psnr_acc += e.psnr_db;
    ssim_acc += e.ssim;
  }
  report.mean_psnr = psnr_acc / n;
  report.mean_ssim = ssim_acc / n;
  return report;
}

double matching_success_rate(const multiepoch::MatchResult& match,
                             const std::vector<std::vector<int>>& truth_a,
                             const std::vector<std::vector<int>>& truth_b) {
  if (match.pairs.empty()) throw ValueError("matching_success_rate: empty matching");
  int correct = 0;
  for (const multiepoch::MatchPair& p : match.pairs) {
    int ta = truth_a.at(static_cast<std::size_t>(p.a.record)).at(static_cast<std::size_t>(p.a.slot));
    int tb = truth_b.at(static_cast<std::size_t>(p.b.record)).at(static_cast<std::size_t>(p.b.slot));
    if (ta == tb) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(match.pairs.size());
}

}  // namespace gradinv::metrics
