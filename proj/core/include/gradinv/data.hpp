#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gradinv/normalize.hpp"
#include "gradinv/tensor.hpp"

namespace gradinv::data {

struct Dataset {
  int channels = 3;
  int height = 0;
  int width = 0;
  int num_classes = 10;
  std::vector<Tensor> images;  // normalized [C,H,W]
  std::vector<int> labels;
  Normalization norm;
};

/// Loads selected records from a CIFAR-10 binary batch file (10000 records
/// of 1 label byte + 3072 channel-major pixel bytes). Pixels are scaled to
/// [0,1] and then normalized per channel with mean/std computed over the
/// whole file.
Dataset load_cifar10_binary(const std::string& path, const std::vector<int>& indices);

/// Seeded smooth RGB images (sums of low-frequency sinusoids per channel,
/// rescaled to [0,1]) with labels drawn from seeded permutations so that
/// consecutive blocks of 10 samples carry distinct labels. Normalized like
/// the CIFAR loader.
Dataset gen_synthetic(int n, int size, std::uint64_t seed);

}  // namespace gradinv::data
