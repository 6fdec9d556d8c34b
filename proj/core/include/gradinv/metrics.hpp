#pragma once

#include <vector>

#include "gradinv/multiepoch.hpp"
#include "gradinv/tensor.hpp"

namespace gradinv::metrics {

/// 10 log10(1 / MSE) on [0,1] images; zero MSE capped at 100 dB.
double psnr(const Tensor& x, const Tensor& y);

struct SsimResult {
  double value = 0.0;
  bool global_window = false;  // image smaller than the 11x11 window
};

/// Mean local SSIM with an 11x11 Gaussian window (sigma 1.5), K1=0.01,
/// K2=0.03, dynamic range 1, per channel and averaged. Images smaller than
/// the window fall back to a single uniform global window (flagged).
SsimResult ssim_detailed(const Tensor& x, const Tensor& y);
double ssim(const Tensor& x, const Tensor& y);

struct SampleEval {
  int slot = 0;
  int truth_index = 0;
  double psnr_db = 0.0;
  double ssim = 0.0;
};

struct EvalReport {
  std::vector<SampleEval> samples;
  double mean_psnr = 0.0;
  double mean_ssim = 0.0;
  std::vector<int> assignment;  // reconstruction slot -> ground-truth index
  bool ssim_global_window = false;
};

/// Scores reconstructions against a ground-truth batch under the
/// slot-to-truth assignment that maximizes total PSNR (exhaustive for
/// B <= 6, greedy otherwise). Reconstruction order carries no meaning.
/// Both sides are clamped to [0,1] before scoring.
EvalReport evaluate_batch(const std::vector<Tensor>& reconstructions,
                          const std::vector<Tensor>& truth);

/// Fraction of matched pairs that truly join the same sample. truth_a and
/// truth_b map (record, slot) to a sample id per epoch side.
double matching_success_rate(const multiepoch::MatchResult& match,
                             const std::vector<std::vector<int>>& truth_a,
                             const std::vector<std::vector<int>>& truth_b);

}  // namespace gradinv::metrics
