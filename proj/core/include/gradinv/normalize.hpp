#pragma once

#include <vector>

#include "gradinv/tensor.hpp"

namespace gradinv {

/// Per-channel normalization statistics of a dataset. Images handed to the
/// simulator and the attack live in normalized space; reports and image
/// files use de-normalized [0,1] pixels.
struct Normalization {
  std::vector<double> mean;
  std::vector<double> stddev;

  static Normalization identity(int channels) {
    Normalization n;
    n.mean.assign(static_cast<std::size_t>(channels), 0.0);
    n.stddev.assign(static_cast<std::size_t>(channels), 1.0);
    return n;
  }
};

/// x * std[c] + mean[c] per channel; accepts [C,H,W] or [N,C,H,W].
Tensor denormalize(const Tensor& t, const Normalization& norm);

/// (x - mean[c]) / std[c] per channel; accepts [C,H,W] or [N,C,H,W].
Tensor normalize(const Tensor& t, const Normalization& norm);

/// Clamp every entry into [0, 1]; used only at export and evaluation.
Tensor clamp01(const Tensor& t);

}  // namespace gradinv
