#include "gradinv/autodiff.hpp"

#include <gtest/gtest.h>

#include "gradinv/rng.hpp"
#include "testutil.hpp"

using namespace gradinv;
namespace ad = gradinv::ad;
using oracle::random_tensor;

TEST(Conv2d, OnesKernelSumsWindow) {
  ad::Graph g;
  Tensor x = Tensor::full({1, 1, 3, 3}, 1.0);
  Tensor k = Tensor::full({1, 1, 2, 2}, 1.0);
  Tensor y = ad::conv2d(g, x, k, 1, 0);
  EXPECT_EQ(y.shape, (Shape{1, 1, 2, 2}));
  for (std::int64_t i = 0; i < y.size(); ++i) EXPECT_DOUBLE_EQ(y[i], 4.0);
}

TEST(Conv2d, IdentityKernel) {
  Rng rng(1);
  ad::Graph g;
  Tensor x = random_tensor({1, 1, 4, 4}, rng);
  Tensor k = Tensor::full({1, 1, 1, 1}, 1.0);
  Tensor y = ad::conv2d(g, x, k, 1, 0);
  EXPECT_TRUE(bit_equal(y.detached_copy(), x));
}

TEST(Conv2d, MatchesNestedLoopOracle) {
  Rng rng(2);
  Tensor x = random_tensor({1, 2, 5, 5}, rng);
  Tensor k = random_tensor({3, 2, 3, 3}, rng);
  for (int stride : {1, 2}) {
    for (int pad : {0, 1}) {
      ad::Graph g;
      Tensor y = ad::conv2d(g, x, k, stride, pad);
      Tensor want = oracle::conv2d(x, k, stride, pad);
      EXPECT_LT(max_abs_diff(y.detached_copy(), want), 1e-12);
    }
  }
}

TEST(Conv2d, ShapeMismatchNamesBothShapes) {
  ad::Graph g;
  Tensor x = Tensor::zeros({1, 2, 5, 5});
  Tensor k = Tensor::zeros({3, 4, 3, 3});
  try {
    ad::conv2d(g, x, k, 1, 0);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("[1x2x5x5]"), std::string::npos);
    EXPECT_NE(msg.find("[3x4x3x3]"), std::string::npos);
  }
}

TEST(Relu, Definition) {
  ad::Graph g;
  Tensor x({3}, {-1.0, 0.0, 2.0});
  Tensor y = ad::relu(g, x);
  EXPECT_EQ(y[0], 0.0);
  EXPECT_EQ(y[1], 0.0);
  EXPECT_EQ(y[2], 2.0);
}

TEST(Relu, GradientIsPositiveMask) {
  ad::Graph g;
  Tensor x({2}, {-1.0, 2.0});
  Tensor xb = g.bind(x);
  Tensor loss = ad::sum_all(g, ad::relu(g, xb));
  std::vector<Tensor> grad = ad::backward(g, loss, std::vector<Tensor>{xb});
  EXPECT_EQ(grad[0][0], 0.0);
  EXPECT_EQ(grad[0][1], 1.0);
}

TEST(Relu, RandomAgainstScalarLoopOracle) {
  Rng rng(3);
  Tensor x = random_tensor({40}, rng);
  Tensor upstream = random_tensor({40}, rng);
  ad::Graph g;
  Tensor xb = g.bind(x);
  Tensor y = ad::relu(g, xb);
  Tensor loss = ad::sum_all(g, ad::mul(g, y, g.leaf(upstream)));
  std::vector<Tensor> grad = ad::backward(g, loss, std::vector<Tensor>{xb});
  for (std::int64_t i = 0; i < x.size(); ++i) {
    EXPECT_DOUBLE_EQ(y[i], x[i] > 0 ? x[i] : 0.0);
    EXPECT_DOUBLE_EQ(grad[0][i], x[i] > 0 ? upstream[i] : 0.0);
  }
}

TEST(FullyConnected, IdentityWeightZeroBias) {
  ad::Graph g;
  Tensor x({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor w({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Tensor b = Tensor::zeros({3});
  Tensor y = ad::fully_connected(g, x, w, b);
  EXPECT_LT(max_abs_diff(y.detached_copy(), x), 1e-15);
}

TEST(FullyConnected, SmallArithmetic) {
  ad::Graph g;
  Tensor x({1, 2}, {1, 2});
  Tensor w({2, 2}, {1, 1, 0, 1});
  Tensor b = Tensor::zeros({2});
  Tensor y = ad::fully_connected(g, x, w, b);
  EXPECT_DOUBLE_EQ(y[0], 3.0);
  EXPECT_DOUBLE_EQ(y[1], 2.0);
}

TEST(FullyConnected, RandomAgainstMatmulOracle) {
  Rng rng(4);
  Tensor x = random_tensor({3, 7}, rng);
  Tensor w = random_tensor({4, 7}, rng);
  Tensor b = random_tensor({4}, rng);
  ad::Graph g;
  Tensor y = ad::fully_connected(g, x, w, b);
  Tensor wt = Tensor::zeros({7, 4});
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 7; ++j) wt[static_cast<std::int64_t>(j) * 4 + i] = w[static_cast<std::int64_t>(i) * 7 + j];
  Tensor want = oracle::matmul(x, wt);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 4; ++c) want[static_cast<std::int64_t>(r) * 4 + c] += b[c];
  EXPECT_LT(max_abs_diff(y.detached_copy(), want), 1e-12);
}

TEST(FullyConnected, ShapeMismatch) {
  ad::Graph g;
  Tensor x = Tensor::zeros({1, 3});
  Tensor w = Tensor::zeros({2, 4});
  Tensor b = Tensor::zeros({2});
  EXPECT_THROW(ad::fully_connected(g, x, w, b), ShapeError);
}

TEST(AvgPool, MeanOfWindow) {
  ad::Graph g;
  Tensor x({1, 1, 2, 2}, {1, 3, 5, 7});
  Tensor y = ad::avgpool2d(g, x, 2, 2);
  EXPECT_EQ(y.shape, (Shape{1, 1, 1, 1}));
  EXPECT_DOUBLE_EQ(y[0], 4.0);
}

TEST(AvgPool, ConstantImageStaysConstant) {
  ad::Graph g;
  Tensor x = Tensor::full({1, 2, 4, 4}, 0.7);
  Tensor y = ad::avgpool2d(g, x, 2, 2);
  for (std::int64_t i = 0; i < y.size(); ++i) EXPECT_DOUBLE_EQ(y[i], 0.7);
}

TEST(AvgPool, RandomAgainstWindowedMeanOracle) {
  Rng rng(5);
  Tensor x = random_tensor({2, 3, 4, 4}, rng);
  ad::Graph g;
  Tensor y = ad::avgpool2d(g, x, 2, 2);
  EXPECT_LT(max_abs_diff(y.detached_copy(), oracle::avgpool2d(x, 2, 2)), 1e-15);
}

TEST(AvgPool, WindowLargerThanInputFails) {
  ad::Graph g;
  Tensor x = Tensor::zeros({1, 1, 2, 2});
  EXPECT_THROW(ad::avgpool2d(g, x, 3, 1), ShapeError);
}

TEST(SoftmaxCrossEntropy, UniformLogits) {
  ad::Graph g;
  Tensor logits = Tensor::full({1, 10}, 0.3);
  Tensor loss = ad::softmax_cross_entropy(g, logits, {7});
  EXPECT_NEAR(loss[0], std::log(10.0), 1e-12);
}

TEST(SoftmaxCrossEntropy, HugeCorrectLogitDrivesLossToZero) {
  ad::Graph g;
  Tensor logits = Tensor::zeros({1, 5});
  logits[2] = 200.0;
  Tensor loss = ad::softmax_cross_entropy(g, logits, {2});
  EXPECT_LT(loss[0], 1e-12);
}

TEST(SoftmaxCrossEntropy, RandomAgainstDirectFormula) {
  Rng rng(6);
  Tensor logits = random_tensor({4, 6}, rng);
  std::vector<int> labels{1, 5, 0, 3};
  ad::Graph g;
  Tensor loss = ad::softmax_cross_entropy(g, logits, labels);
  EXPECT_NEAR(loss[0], oracle::cross_entropy(logits, labels), 1e-12);
}

TEST(SoftmaxCrossEntropy, LabelOutOfRange) {
  ad::Graph g;
  Tensor logits = Tensor::zeros({1, 5});
  EXPECT_THROW(ad::softmax_cross_entropy(g, logits, {5}), ValueError);
  EXPECT_THROW(ad::softmax_cross_entropy(g, logits, {-1}), ValueError);
}

TEST(Cosine, IdenticalVectorsGiveOne) {
  Rng rng(7);
  Tensor a = random_tensor({17}, rng);
  ad::Graph g;
  Tensor c = ad::cosine_similarity_flat(g, {a}, {a});
  EXPECT_NEAR(c[0], 1.0, 1e-12);
}

TEST(Cosine, OrthogonalVectorsGiveZero) {
  ad::Graph g;
  Tensor a({2}, {1.0, 0.0});
  Tensor b({2}, {0.0, 1.0});
  EXPECT_NEAR(ad::cosine_similarity_flat(g, {a}, {b})[0], 0.0, 1e-15);
}

TEST(Cosine, PositiveScaleInvariance) {
  Rng rng(8);
  Tensor a = random_tensor({23}, rng);
  Tensor b = random_tensor({23}, rng);
  ad::Graph g;
  double base = ad::cosine_similarity_flat(g, {a}, {b})[0];
  for (double c : {0.5, 3.0, 1e6}) {
    Tensor scaled = a.detached_copy();
    for (std::int64_t i = 0; i < scaled.size(); ++i) scaled[i] *= c;
    EXPECT_NEAR(ad::cosine_similarity_flat(g, {scaled}, {b})[0], base, 1e-12);
  }
}

TEST(Cosine, ZeroNormSideFails) {
  ad::Graph g;
  Tensor a = Tensor::zeros({4});
  Tensor b = Tensor::full({4}, 1.0);
  EXPECT_THROW(ad::cosine_similarity_flat(g, {a}, {b}), ValueError);
  EXPECT_THROW(ad::cosine_similarity_flat(g, {b}, {a}), ValueError);
}

TEST(TotalVariation, ConstantImageIsZero) {
  ad::Graph g;
  Tensor x = Tensor::full({1, 3, 5, 5}, 0.42);
  EXPECT_DOUBLE_EQ(ad::total_variation(g, x)[0], 0.0);
}

TEST(TotalVariation, TwoHorizontalUnitSteps) {
  ad::Graph g;
  Tensor x({1, 1, 2, 2}, {0, 1, 0, 1});
  EXPECT_DOUBLE_EQ(ad::total_variation(g, x)[0], 2.0);
}

TEST(TotalVariation, RandomAgainstDoubleLoopOracle) {
  Rng rng(9);
  Tensor x = random_tensor({2, 3, 6, 7}, rng);
  ad::Graph g;
  EXPECT_NEAR(ad::total_variation(g, x)[0], oracle::total_variation(x), 1e-10);
}

TEST(TotalVariation, NonNegativeAndZeroOnlyForConstant) {
  Rng rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = random_tensor({1, 2, 4, 4}, rng);
    ad::Graph g;
    double tv = ad::total_variation(g, x)[0];
    EXPECT_GE(tv, 0.0);
    EXPECT_GT(tv, 0.0);  // random images are nonconstant with probability 1
  }
}

TEST(Backward, SumGivesOnes) {
  Rng rng(11);
  Tensor x = random_tensor({3, 4}, rng);
  ad::Graph g;
  Tensor xb = g.bind(x);
  std::vector<Tensor> grad = ad::backward(g, ad::sum_all(g, xb), std::vector<Tensor>{xb});
  for (std::int64_t i = 0; i < x.size(); ++i) EXPECT_DOUBLE_EQ(grad[0][i], 1.0);
}

TEST(Backward, SecondOrderOfSquares) {
  // f = sum x^2, g = df/dx = 2x, then d(g.v)/dx = 2v.
  Rng rng(12);
  Tensor x = random_tensor({6}, rng);
  Tensor v = random_tensor({6}, rng);
  ad::Graph g;
  Tensor xb = g.bind(x);
  Tensor f = ad::sum_all(g, ad::mul(g, xb, xb));
  std::vector<Tensor> first = ad::backward(g, f, std::vector<Tensor>{xb});
  for (std::int64_t i = 0; i < x.size(); ++i) EXPECT_NEAR(first[0][i], 2 * x[i], 1e-12);
  Tensor contracted = ad::sum_all(g, ad::mul(g, first[0], g.leaf(v)));
  std::vector<Tensor> second = ad::backward(g, contracted, std::vector<Tensor>{xb});
  for (std::int64_t i = 0; i < x.size(); ++i) EXPECT_NEAR(second[0][i], 2 * v[i], 1e-12);
}

TEST(Backward, OutputMustBeScalar) {
  ad::Graph g;
  Tensor x = g.bind(Tensor::full({3}, 1.0));
  Tensor y = ad::relu(g, x);
  EXPECT_THROW(ad::backward(g, y, std::vector<Tensor>{x}), ShapeError);
}

TEST(Backward, ForeignTensorRejected) {
  ad::Graph g;
  Tensor x = g.bind(Tensor::full({3}, 1.0));
  Tensor loss = ad::sum_all(g, x);
  ad::Graph other;
  Tensor foreign = other.bind(Tensor::full({3}, 1.0));
  EXPECT_THROW(ad::backward(g, loss, std::vector<Tensor>{foreign}), ValueError);
  Tensor unbound = Tensor::full({3}, 1.0);
  EXPECT_THROW(ad::backward(g, loss, std::vector<Tensor>{unbound}), ValueError);
}

TEST(Backward, GraphAppendsAdjointNodes) {
  ad::Graph g;
  Tensor x = g.bind(Tensor::full({3}, 2.0));
  Tensor loss = ad::sum_all(g, ad::mul(g, x, x));
  std::int32_t before = g.size();
  ad::backward(g, loss, std::vector<Tensor>{x});
  EXPECT_GT(g.size(), before);
}

// Finite-difference invariant over a composite function built from the ops.
TEST(Backward, CompositeFiniteDifference) {
  Rng rng(13);
  Tensor x = random_tensor({1, 2, 6, 6}, rng);
  Tensor k = random_tensor({3, 2, 3, 3}, rng);
  Tensor w = random_tensor({4, 3 * 3 * 3}, rng);
  Tensor b = random_tensor({4}, rng);

  auto value = [&](const Tensor& probe) {
    ad::Graph g;
    Tensor h1 = ad::relu(g, ad::conv2d(g, probe, k, 1, 0));
    Tensor h2 = ad::avgpool2d(g, h1, 2, 1);
    Tensor flat = ad::reshape(g, h2, {1, 3 * 3 * 3});
    Tensor logits = ad::fully_connected(g, flat, w, b);
    Tensor loss = ad::softmax_cross_entropy(g, logits, {2});
    Tensor tv = ad::total_variation(g, probe);
    return ad::add(g, loss, ad::scale(g, tv, 0.01))[0];
  };

  ad::Graph g;
  Tensor xb = g.bind(x);
  Tensor h1 = ad::relu(g, ad::conv2d(g, xb, k, 1, 0));
  Tensor h2 = ad::avgpool2d(g, h1, 2, 1);
  Tensor flat = ad::reshape(g, h2, {1, 3 * 3 * 3});
  Tensor logits = ad::fully_connected(g, flat, w, b);
  Tensor loss = ad::softmax_cross_entropy(g, logits, {2});
  Tensor obj = ad::add(g, loss, ad::scale(g, ad::total_variation(g, xb), 0.01));
  std::vector<Tensor> grad = ad::backward(g, obj, std::vector<Tensor>{xb});

  Tensor fd = oracle::finite_difference(value, x);
  double worst = 0.0;
  for (std::int64_t i = 0; i < x.size(); ++i) {
    worst = std::max(worst, oracle::rel_err(grad[0][i], fd[i]));
  }
  EXPECT_LT(worst, 1e-4);
}

// Double-backward invariant: d(grad . v)/dx against finite differences of
// the contraction on a random two-conv net.
TEST(Backward, DoubleBackwardFiniteDifference) {
  Rng rng(14);
  Tensor x = random_tensor({1, 1, 5, 5}, rng);
  Tensor k1 = random_tensor({2, 1, 3, 3}, rng);
  Tensor k2 = random_tensor({2, 2, 2, 2}, rng);
  Tensor w = random_tensor({3, 2 * 2 * 2}, rng);
  Tensor b = random_tensor({3}, rng);
  Tensor v = random_tensor({1, 1, 5, 5}, rng);

  auto grad_dot_v = [&](const Tensor& probe) {
    ad::Graph g;
    Tensor xb = g.bind(probe);
    Tensor h = ad::relu(g, ad::conv2d(g, xb, k1, 1, 0));
    Tensor h2 = ad::conv2d(g, h, k2, 1, 0);
    Tensor flat = ad::reshape(g, h2, {1, 2 * 2 * 2});
    Tensor loss = ad::softmax_cross_entropy(g, ad::fully_connected(g, flat, w, b), {1});
    std::vector<Tensor> grad = ad::backward(g, loss, std::vector<Tensor>{xb});
    return ad::sum_all(g, ad::mul(g, grad[0], g.leaf(v)));
  };

  ad::Graph g;
  Tensor xb = g.bind(x);
  Tensor h = ad::relu(g, ad::conv2d(g, xb, k1, 1, 0));
  Tensor h2 = ad::conv2d(g, h, k2, 1, 0);
  Tensor flat = ad::reshape(g, h2, {1, 2 * 2 * 2});
  Tensor loss = ad::softmax_cross_entropy(g, ad::fully_connected(g, flat, w, b), {1});
  std::vector<Tensor> grad = ad::backward(g, loss, std::vector<Tensor>{xb});
  Tensor contracted = ad::sum_all(g, ad::mul(g, grad[0], g.leaf(v)));
  std::vector<Tensor> second = ad::backward(g, contracted, std::vector<Tensor>{xb});

  Tensor fd = oracle::finite_difference(
      [&](const Tensor& probe) { return grad_dot_v(probe)[0]; }, x);
  double worst = 0.0;
  for (std::int64_t i = 0; i < x.size(); ++i) {
    worst = std::max(worst, oracle::rel_err(second[0][i], fd[i]));
  }
  EXPECT_LT(worst, 1e-3);
}

TEST(Determinism, IdenticalInputsGiveBitIdenticalOutputs) {
  Rng rng(15);
  Tensor x = random_tensor({1, 2, 5, 5}, rng);
  Tensor k = random_tensor({2, 2, 3, 3}, rng);
  auto run = [&] {
    ad::Graph g;
    Tensor xb = g.bind(x);
    Tensor y = ad::relu(g, ad::conv2d(g, xb, k, 1, 1));
    Tensor loss = ad::sum_all(g, ad::mul(g, y, y));
    std::vector<Tensor> grad = ad::backward(g, loss, std::vector<Tensor>{xb});
    return std::pair<Tensor, Tensor>(y.detached_copy(), grad[0].detached_copy());
  };
  auto [y1, g1] = run();
  auto [y2, g2] = run();
  EXPECT_TRUE(bit_equal(y1, y2));
  EXPECT_TRUE(bit_equal(g1, g2));
}

TEST(BatchOps, ConcatSliceEmbedRoundTrip) {
  Rng rng(16);
  Tensor a = random_tensor({2, 1, 3, 3}, rng);
  Tensor b = random_tensor({1, 1, 3, 3}, rng);
  ad::Graph g;
  Tensor ab = g.bind(a), bb = g.bind(b);
  Tensor cat = ad::concat_batch(g, {ab, bb});
  EXPECT_EQ(cat.shape[0], 3);
  Tensor back = ad::slice_batch(g, cat, 2, 1);
  EXPECT_TRUE(bit_equal(back.detached_copy(), b));
  // gradient splits back to the inputs
  Tensor loss = ad::sum_all(g, ad::mul(g, cat, cat));
  std::vector<Tensor> grads = ad::backward(g, loss, std::vector<Tensor>{ab, bb});
  for (std::int64_t i = 0; i < a.size(); ++i) EXPECT_NEAR(grads[0][i], 2 * a[i], 1e-12);
  for (std::int64_t i = 0; i < b.size(); ++i) EXPECT_NEAR(grads[1][i], 2 * b[i], 1e-12);
}
