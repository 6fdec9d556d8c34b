#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "gradinv/tensor.hpp"

namespace gradinv::ad {

enum class Op : std::uint8_t {
  kLeaf,
  kAdd,
  kSub,
  kNeg,
  kMul,
  kScale,        // dattr * input
  kRecip,
  kSqrt,
  kLog,
  kExp,
  kAbs,
  kRelu,
  kSumAll,       // -> [1]
  kBroadcastScalar,
  kSumRows,      // [B,C] -> [B]
  kBroadcastCols,
  kSumCols,      // [B,C] -> [C]
  kBroadcastRows,
  kSumNHW,       // [N,C,H,W] -> [C]
  kBroadcastNHW,
  kGatherRows,   // [B,C], idx -> [B]
  kScatterRows,  // [B], idx -> [B,C]
  kMatMul,
  kTranspose2d,
  kReshape,
  kConv2d,
  kConv2dInputGrad,
  kConv2dKernelGrad,
  kAvgPool2d,
  kAvgPool2dInputGrad,
  kDiffH,        // horizontal neighbor differences
  kDiffHAdj,
  kDiffV,
  kDiffVAdj,
  kConcatBatch,
  kSliceBatch,
  kEmbedBatch,
};

struct Node {
  Op op = Op::kLeaf;
  std::vector<std::int32_t> inputs;
  std::vector<std::int64_t> iattrs;
  double dattr = 0.0;
  Tensor value;
};

/// Append-only computation graph. Node order is topological by construction;
/// a backward pass appends its adjoint computation to the same graph so that
/// gradients are themselves differentiable.
class Graph {
 public:
  Graph();

  std::uint64_t id() const { return id_; }
  std::int32_t size() const { return static_cast<std::int32_t>(nodes_.size()); }
  const Node& node(std::int32_t i) const { return nodes_[static_cast<std::size_t>(i)]; }

  /// Interns a value as a leaf node and returns the bound handle.
  Tensor leaf(const Tensor& value);

  bool owns(const Tensor& t) const { return t.node >= 0 && t.graph_id == id_ && t.node < size(); }

  /// Internal: appends a computed node (used by the op free functions).
  Tensor emit(Op op, std::vector<std::int32_t> inputs, Tensor value,
              std::vector<std::int64_t> iattrs = {}, double dattr = 0.0);

  /// Binds t to this graph, interning plain values as leaves.
  Tensor bind(const Tensor& t);

 private:
  std::uint64_t id_;
  std::vector<Node> nodes_;
};

// ---- elementwise and scalar ops ----
Tensor add(Graph& g, const Tensor& a, const Tensor& b);
Tensor sub(Graph& g, const Tensor& a, const Tensor& b);
Tensor neg(Graph& g, const Tensor& a);
Tensor mul(Graph& g, const Tensor& a, const Tensor& b);
Tensor scale(Graph& g, const Tensor& a, double c);
Tensor recip(Graph& g, const Tensor& a);
Tensor sqrt_t(Graph& g, const Tensor& a);
Tensor log_t(Graph& g, const Tensor& a);
Tensor exp_t(Graph& g, const Tensor& a);
Tensor abs_t(Graph& g, const Tensor& a);
Tensor relu(Graph& g, const Tensor& a);

// ---- reductions / broadcasts ----
Tensor sum_all(Graph& g, const Tensor& a);
Tensor broadcast_scalar(Graph& g, const Tensor& s, Shape shape);
Tensor sum_rows(Graph& g, const Tensor& a);                  // [B,C] -> [B]
Tensor broadcast_cols(Graph& g, const Tensor& v, int cols);  // [B] -> [B,cols]
Tensor sum_cols(Graph& g, const Tensor& a);                  // [B,C] -> [C]
Tensor broadcast_rows(Graph& g, const Tensor& v, int rows);  // [C] -> [rows,C]
Tensor sum_nhw(Graph& g, const Tensor& a);                   // [N,C,H,W] -> [C]
Tensor broadcast_nhw(Graph& g, const Tensor& v, int n, int h, int w);
Tensor gather_rows(Graph& g, const Tensor& a, const std::vector<int>& idx);
Tensor scatter_rows(Graph& g, const Tensor& v, const std::vector<int>& idx, int cols);

// ---- linear algebra ----
Tensor matmul(Graph& g, const Tensor& a, const Tensor& b);
Tensor transpose2d(Graph& g, const Tensor& a);
Tensor reshape(Graph& g, const Tensor& a, Shape shape);

// ---- convolution family (NCHW input, OIHW kernel) ----
Tensor conv2d(Graph& g, const Tensor& input, const Tensor& kernel, int stride, int padding);
Tensor conv2d_input_grad(Graph& g, const Tensor& out_grad, const Tensor& kernel, int stride,
                         int padding, const Shape& input_shape);
Tensor conv2d_kernel_grad(Graph& g, const Tensor& input, const Tensor& out_grad, int stride,
                          int padding, const Shape& kernel_shape);

// ---- pooling ----
Tensor avgpool2d(Graph& g, const Tensor& input, int kernel, int stride);
Tensor avgpool2d_input_grad(Graph& g, const Tensor& out_grad, int kernel, int stride,
                            const Shape& input_shape);

// ---- spatial differences (for total variation) ----
Tensor diff_h(Graph& g, const Tensor& a);
Tensor diff_v(Graph& g, const Tensor& a);

// ---- batch assembly ----
Tensor concat_batch(Graph& g, const std::vector<Tensor>& parts);
Tensor slice_batch(Graph& g, const Tensor& a, int offset, int count);
Tensor embed_batch(Graph& g, const Tensor& a, int offset, int total);

// ---- composites ----

/// Affine map input * weight^T + bias. input [B,IN], weight [OUT,IN], bias [OUT].
Tensor fully_connected(Graph& g, const Tensor& input, const Tensor& weight, const Tensor& bias);

/// Mean over the batch of -log softmax(logits)[label]; max-subtraction stabilized.
Tensor softmax_cross_entropy(Graph& g, const Tensor& logits, const std::vector<int>& labels);

/// Cosine similarity of two tensor lists flattened into single vectors.
/// Throws ValueError if either side has zero norm.
Tensor cosine_similarity_flat(Graph& g, const std::vector<Tensor>& a, const std::vector<Tensor>& b);

/// Anisotropic L1 total variation of an NCHW image batch, summed over
/// batch and channels. Subgradient of |.| at 0 is 0.
Tensor total_variation(Graph& g, const Tensor& image);

/// Gradients of a scalar output w.r.t. each requested tensor. The returned
/// tensors are nodes of g, so backward can be applied to functions of them.
std::vector<Tensor> backward(Graph& g, const Tensor& output, std::span<const Tensor> wrt);

}  // namespace gradinv::ad
