#include "gradinv/autodiff.hpp"

#include <atomic>
#include <cmath>
#include <cstring>

namespace gradinv::ad {

namespace {

std::atomic<std::uint64_t> g_graph_counter{1};

void require_dims(const Tensor& t, std::size_t dims, const char* op) {
  if (t.shape.size() != dims) {
    throw ShapeError(std::string(op) + ": expected " + std::to_string(dims) +
                     "-d tensor, got shape " + shape_str(t.shape));
  }
}

}  // namespace

Graph::Graph() : id_(g_graph_counter.fetch_add(1)) {}

Tensor Graph::emit(Op op, std::vector<std::int32_t> inputs, Tensor value,
                   std::vector<std::int64_t> iattrs, double dattr) {
  Node n;
  n.op = op;
  n.inputs = std::move(inputs);
  n.iattrs = std::move(iattrs);
  n.dattr = dattr;
  n.value = std::move(value);
  n.value.node = size();
  n.value.graph_id = id_;
  nodes_.push_back(std::move(n));
  return nodes_.back().value;
}

Tensor Graph::leaf(const Tensor& value) {
  Tensor v;
  v.shape = value.shape;
  v.data = value.data;  // share storage; leaves are not mutated by the graph
  return emit(Op::kLeaf, {}, std::move(v));
}

Tensor Graph::bind(const Tensor& t) {
  if (t.node >= 0) {
    if (t.graph_id != id_) {
      throw ValueError("tensor is bound to a different graph");
    }
    return t;
  }
  return leaf(t);
}

// ---------------------------------------------------------------------------
// forward kernels
// ---------------------------------------------------------------------------

namespace {

struct ConvDims {
  int n, c, h, w;       // input
  int o, i, kh, kw;     // kernel
  int oh, ow;           // output
};

ConvDims conv_dims(const Shape& input, const Shape& kernel, int stride, int padding,
                   const char* op) {
  ConvDims d{};
  d.n = input[0];
  d.c = input[1];
  d.h = input[2];
  d.w = input[3];
  d.o = kernel[0];
  d.i = kernel[1];
  d.kh = kernel[2];
  d.kw = kernel[3];
  if (d.c != d.i) {
    throw ShapeError(std::string(op) + ": input channels " + shape_str(input) +
                     " incompatible with kernel " + shape_str(kernel));
  }
  if (stride < 1) throw ValueError(std::string(op) + ": stride must be >= 1");
  if (padding < 0) throw ValueError(std::string(op) + ": padding must be >= 0");
  d.oh = (d.h + 2 * padding - d.kh) / stride + 1;
  d.ow = (d.w + 2 * padding - d.kw) / stride + 1;
  if (d.h + 2 * padding < d.kh || d.w + 2 * padding < d.kw || d.oh < 1 || d.ow < 1) {
    throw ShapeError(std::string(op) + ": kernel " + shape_str(kernel) +
                     " does not fit input " + shape_str(input) + " with stride " +
                     std::to_string(stride) + " padding " + std::to_string(padding));
  }
  return d;
}

Tensor conv2d_value(const Tensor& x, const Tensor& k, int stride, int padding) {
  ConvDims d = conv_dims(x.shape, k.shape, stride, padding, "conv2d");
  Tensor out = Tensor::zeros({d.n, d.o, d.oh, d.ow});
  const double* xp = x.ptr();
  const double* kp = k.ptr();
  double* op = out.ptr();
  for (int n = 0; n < d.n; ++n) {
    for (int o = 0; o < d.o; ++o) {
      for (int oy = 0; oy < d.oh; ++oy) {
        for (int ox = 0; ox < d.ow; ++ox) {
          double acc = 0.0;
          for (int i = 0; i < d.c; ++i) {
            const double* xbase = xp + ((std::int64_t)(n * d.c + i)) * d.h * d.w;
            const double* kbase = kp + ((std::int64_t)(o * d.c + i)) * d.kh * d.kw;
            for (int ky = 0; ky < d.kh; ++ky) {
              int y = oy * stride - padding + ky;
              if (y < 0 || y >= d.h) continue;
              for (int kx = 0; kx < d.kw; ++kx) {
                int xcol = ox * stride - padding + kx;
                if (xcol < 0 || xcol >= d.w) continue;
                acc += xbase[(std::int64_t)y * d.w + xcol] * kbase[(std::int64_t)ky * d.kw + kx];
              }
            }
          }
          op[(((std::int64_t)n * d.o + o) * d.oh + oy) * d.ow + ox] = acc;
        }
      }
    }
  }
  return out;
}

Tensor conv2d_input_grad_value(const Tensor& g, const Tensor& k, int stride, int padding,
                               const Shape& input_shape) {
  ConvDims d = conv_dims(input_shape, k.shape, stride, padding, "conv2d_input_grad");
  if (g.shape != Shape{d.n, d.o, d.oh, d.ow}) {
    throw ShapeError("conv2d_input_grad: out-grad shape " + shape_str(g.shape) +
                     " does not match expected " + shape_str({d.n, d.o, d.oh, d.ow}));
  }
  Tensor dx = Tensor::zeros(input_shape);
  const double* gp = g.ptr();
  const double* kp = k.ptr();
  double* dp = dx.ptr();
  for (int n = 0; n < d.n; ++n) {
    for (int o = 0; o < d.o; ++o) {
      for (int oy = 0; oy < d.oh; ++oy) {
        for (int ox = 0; ox < d.ow; ++ox) {
          double gv = gp[(((std::int64_t)n * d.o + o) * d.oh + oy) * d.ow + ox];
          if (gv == 0.0) continue;
          for (int i = 0; i < d.c; ++i) {
            double* dbase = dp + ((std::int64_t)(n * d.c + i)) * d.h * d.w;
            const double* kbase = kp + ((std::int64_t)(o * d.c + i)) * d.kh * d.kw;
            for (int ky = 0; ky < d.kh; ++ky) {
              int y = oy * stride - padding + ky;
              if (y < 0 || y >= d.h) continue;
              for (int kx = 0; kx < d.kw; ++kx) {
                int xcol = ox * stride - padding + kx;
                if (xcol < 0 || xcol >= d.w) continue;
                dbase[(std::int64_t)y * d.w + xcol] += gv * kbase[(std::int64_t)ky * d.kw + kx];
              }
            }
          }
        }
      }
    }
  }
  return dx;
}

Tensor conv2d_kernel_grad_value(const Tensor& x, const Tensor& g, int stride, int padding,
                                const Shape& kernel_shape) {
  ConvDims d = conv_dims(x.shape, kernel_shape, stride, padding, "conv2d_kernel_grad");
  if (g.shape != Shape{d.n, d.o, d.oh, d.ow}) {
    throw ShapeError("conv2d_kernel_grad: out-grad shape " + shape_str(g.shape) +
                     " does not match expected " + shape_str({d.n, d.o, d.oh, d.ow}));
  }
  Tensor dk = Tensor::zeros(kernel_shape);
  const double* xp = x.ptr();
  const double* gp = g.ptr();
  double* dp = dk.ptr();
  for (int n = 0; n < d.n; ++n) {
    for (int o = 0; o < d.o; ++o) {
      for (int oy = 0; oy < d.oh; ++oy) {
        for (int ox = 0; ox < d.ow; ++ox) {
          double gv = gp[(((std::int64_t)n * d.o + o) * d.oh + oy) * d.ow + ox];
          if (gv == 0.0) continue;
          for (int i = 0; i < d.c; ++i) {
            const double* xbase = xp + ((std::int64_t)(n * d.c + i)) * d.h * d.w;
            double* dbase = dp + ((std::int64_t)(o * d.c + i)) * d.kh * d.kw;
            for (int ky = 0; ky < d.kh; ++ky) {
              int y = oy * stride - padding + ky;
              if (y < 0 || y >= d.h) continue;
              for (int kx = 0; kx < d.kw; ++kx) {
                int xcol = ox * stride - padding + kx;
                if (xcol < 0 || xcol >= d.w) continue;
                dbase[(std::int64_t)ky * d.kw + kx] += gv * xbase[(std::int64_t)y * d.w + xcol];
              }
            }
          }
        }
      }
    }
  }
  return dk;
}

struct PoolDims {
  int n, c, h, w, oh, ow;
};

PoolDims pool_dims(const Shape& input, int kernel, int stride, const char* op) {
  PoolDims d{input[0], input[1], input[2], input[3], 0, 0};
  if (kernel < 1) throw ValueError(std::string(op) + ": kernel must be >= 1");
  if (stride < 1) throw ValueError(std::string(op) + ": stride must be >= 1");
  if (kernel > d.h || kernel > d.w) {
    throw ShapeError(std::string(op) + ": window " + std::to_string(kernel) + "x" +
                     std::to_string(kernel) + " larger than input " + shape_str(input));
  }
  d.oh = (d.h - kernel) / stride + 1;
  d.ow = (d.w - kernel) / stride + 1;
  return d;
}

Tensor avgpool2d_value(const Tensor& x, int kernel, int stride) {
  PoolDims d = pool_dims(x.shape, kernel, stride, "avgpool2d");
  Tensor out = Tensor::zeros({d.n, d.c, d.oh, d.ow});
  const double inv = 1.0 / (kernel * kernel);
  const double* xp = x.ptr();
  double* op = out.ptr();
  for (int n = 0; n < d.n; ++n) {
    for (int c = 0; c < d.c; ++c) {
      const double* xbase = xp + ((std::int64_t)(n * d.c + c)) * d.h * d.w;
      for (int oy = 0; oy < d.oh; ++oy) {
        for (int ox = 0; ox < d.ow; ++ox) {
          double acc = 0.0;
          for (int ky = 0; ky < kernel; ++ky) {
            for (int kx = 0; kx < kernel; ++kx) {
              acc += xbase[(std::int64_t)(oy * stride + ky) * d.w + (ox * stride + kx)];
            }
          }
          op[(((std::int64_t)n * d.c + c) * d.oh + oy) * d.ow + ox] = acc * inv;
        }
      }
    }
  }
  return out;
}

Tensor avgpool2d_input_grad_value(const Tensor& g, int kernel, int stride,
                                  const Shape& input_shape) {
  PoolDims d = pool_dims(input_shape, kernel, stride, "avgpool2d_input_grad");
  if (g.shape != Shape{d.n, d.c, d.oh, d.ow}) {
    throw ShapeError("avgpool2d_input_grad: out-grad shape " + shape_str(g.shape) +
                     " does not match expected " + shape_str({d.n, d.c, d.oh, d.ow}));
  }
  Tensor dx = Tensor::zeros(input_shape);
  const double inv = 1.0 / (kernel * kernel);
  const double* gp = g.ptr();
  double* dp = dx.ptr();
  for (int n = 0; n < d.n; ++n) {
    for (int c = 0; c < d.c; ++c) {
      double* dbase = dp + ((std::int64_t)(n * d.c + c)) * d.h * d.w;
      for (int oy = 0; oy < d.oh; ++oy) {
        for (int ox = 0; ox < d.ow; ++ox) {
          double gv = gp[(((std::int64_t)n * d.c + c) * d.oh + oy) * d.ow + ox] * inv;
          for (int ky = 0; ky < kernel; ++ky) {
            for (int kx = 0; kx < kernel; ++kx) {
              dbase[(std::int64_t)(oy * stride + ky) * d.w + (ox * stride + kx)] += gv;
            }
          }
        }
      }
    }
  }
  return dx;
}

}  // namespace

// ---------------------------------------------------------------------------
// op free functions
// ---------------------------------------------------------------------------

Tensor add(Graph& g, const Tensor& a_in, const Tensor& b_in) {
  Tensor a = g.bind(a_in), b = g.bind(b_in);
  require_same_shape(a, b, "add");
  Tensor out = Tensor::zeros(a.shape);
  for (std::int64_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  return g.emit(Op::kAdd, {a.node, b.node}, std::move(out));
}

Tensor sub(Graph& g, const Tensor& a_in, const Tensor& b_in) {
  Tensor a = g.bind(a_in), b = g.bind(b_in);
  require_same_shape(a, b, "sub");
  Tensor out = Tensor::zeros(a.shape);
  for (std::int64_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
  return g.emit(Op::kSub, {a.node, b.node}, std::move(out));
}

Tensor neg(Graph& g, const Tensor& a_in) {
  Tensor a = g.bind(a_in);
  Tensor out = Tensor::zeros(a.shape);
  for (std::int64_t i = 0; i < a.size(); ++i) out[i] = -a[i];
  return g.emit(Op::kNeg, {a.node}, std::move(out));
}

Tensor mul(Graph& g, const Tensor& a_in, const Tensor& b_in) {
  Tensor a = g.bind(a_in), b = g.bind(b_in);
  require_same_shape(a, b, "mul");
  Tensor out = Tensor::zeros(a.shape);
  for (std::int64_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
  return g.emit(Op::kMul, {a.node, b.node}, std::move(out));
}

Tensor scale(Graph& g, const Tensor& a_in, double c) {
  Tensor a = g.bind(a_in);
  Tensor out = Tensor::zeros(a.shape);
  for (std::int64_t i = 0; i < a.size(); ++i) out[i] = c * a[i];
  return g.emit(Op::kScale, {a.node}, std::move(out), {}, c);
}

Tensor recip(Graph& g, const Tensor& a_in) {
  Tensor a = g.bind(a_in);
  Tensor out = Tensor::zeros(a.shape);
  for (std::int64_t i = 0; i < a.size(); ++i) out[i] = 1.0 / a[i];
  return g.emit(Op::kRecip, {a.node}, std::move(out));
}

Tensor sqrt_t(Graph& g, const Tensor& a_in) {
  Tensor a = g.bind(a_in);
  Tensor out = Tensor::zeros(a.shape);
  for (std::int64_t i = 0; i < a.size(); ++i) out[i] = std::sqrt(a[i]);
  return g.emit(Op::kSqrt, {a.node}, std::move(out));
}

Tensor log_t(Graph& g, const Tensor& a_in) {
  Tensor a = g.bind(a_in);
  Tensor out = Tensor::zeros(a.shape);
  for (std::int64_t i = 0; i < a.size(); ++i) out[i] = std::log(a[i]);
  return g.emit(Op::kLog, {a.node}, std::move(out));
}

Tensor exp_t(Graph& g, const Tensor& a_in) {
  Tensor a = g.bind(a_in);
  Tensor out = Tensor::zeros(a.shape);
  for (std::int64_t i = 0; i < a.size(); ++i) out[i] = std::exp(a[i]);
  return g.emit(Op::kExp, {a.node}, std::move(out));
}

Tensor abs_t(Graph& g, const Tensor& a_in) {
  Tensor a = g.bind(a_in);
  Tensor out = Tensor::zeros(a.shape);
  for (std::int64_t i = 0; i < a.size(); ++i) out[i] = std::fabs(a[i]);
  return g.emit(Op::kAbs, {a.node}, std::move(out));
}

Tensor relu(Graph& g, const Tensor& a_in) {
  Tensor a = g.bind(a_in);
  Tensor out = Tensor::zeros(a.shape);
  for (std::int64_t i = 0; i < a.size(); ++i) out[i] = a[i] > 0.0 ? a[i] : 0.0;
  return g.emit(Op::kRelu, {a.node}, std::move(out));
}

Tensor sum_all(Graph& g, const Tensor& a_in) {
  Tensor a = g.bind(a_in);
  double acc = 0.0;
  for (std::int64_t i = 0; i < a.size(); ++i) acc += a[i];
  return g.emit(Op::kSumAll, {a.node}, Tensor::scalar(acc));
}

Tensor broadcast_scalar(Graph& g, const Tensor& s_in, Shape shape) {
  Tensor s = g.bind(s_in);
  if (!s.is_scalar()) throw ShapeError("broadcast_scalar: source must be scalar");
  return g.emit(Op::kBroadcastScalar, {s.node}, Tensor::full(std::move(shape), s[0]));
}

Tensor sum_rows(Graph& g, const Tensor& a_in) {
  Tensor a = g.bind(a_in);
  require_dims(a, 2, "sum_rows");
  int rows = a.shape[0], cols = a.shape[1];
  Tensor out = Tensor::zeros({rows});
  for (int r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (int c = 0; c < cols; ++c) acc += a[(std::int64_t)r * cols + c];
    out[r] = acc;
  }
  return g.emit(Op::kSumRows, {a.node}, std::move(out));
}

Tensor broadcast_cols(Graph& g, const Tensor& v_in, int cols) {
  Tensor v = g.bind(v_in);
  require_dims(v, 1, "broadcast_cols");
  int rows = v.shape[0];
  Tensor out = Tensor::zeros({rows, cols});
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) out[(std::int64_t)r * cols + c] = v[r];
  return g.emit(Op::kBroadcastCols, {v.node}, std::move(out));
}

Tensor sum_cols(Graph& g, const Tensor& a_in) {
  Tensor a = g.bind(a_in);
  require_dims(a, 2, "sum_cols");
  int rows = a.shape[0], cols = a.shape[1];
  Tensor out = Tensor::zeros({cols});
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) out[c] += a[(std::int64_t)r * cols + c];
  return g.emit(Op::kSumCols, {a.node}, std::move(out));
}

Tensor broadcast_rows(Graph& g, const Tensor& v_in, int rows) {
  Tensor v = g.bind(v_in);
  require_dims(v, 1, "broadcast_rows");
  int cols = v.shape[0];
  Tensor out = Tensor::zeros({rows, cols});
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) out[(std::int64_t)r * cols + c] = v[c];
  return g.emit(Op::kBroadcastRows, {v.node}, std::move(out));
}

Tensor sum_nhw(Graph& g, const Tensor& a_in) {
  Tensor a = g.bind(a_in);
  require_dims(a, 4, "sum_nhw");
  int n = a.shape[0], c = a.shape[1], hw = a.shape[2] * a.shape[3];
  Tensor out = Tensor::zeros({c});
  for (int in = 0; in < n; ++in)
    for (int ic = 0; ic < c; ++ic) {
      double acc = 0.0;
      const double* base = a.ptr() + ((std::int64_t)(in * c + ic)) * hw;
      for (int k = 0; k < hw; ++k) acc += base[k];
      out[ic] += acc;
    }
  return g.emit(Op::kSumNHW, {a.node}, std::move(out));
}

Tensor broadcast_nhw(Graph& g, const Tensor& v_in, int n, int h, int w) {
  Tensor v = g.bind(v_in);
  require_dims(v, 1, "broadcast_nhw");
  int c = v.shape[0];
  Tensor out = Tensor::zeros({n, c, h, w});
  for (int in = 0; in < n; ++in)
    for (int ic = 0; ic < c; ++ic) {
      double* base = out.ptr() + ((std::int64_t)(in * c + ic)) * h * w;
      for (int k = 0; k < h * w; ++k) base[k] = v[ic];
    }
  return g.emit(Op::kBroadcastNHW, {v.node}, std::move(out), {n, h, w});
}

Tensor gather_rows(Graph& g, const Tensor& a_in, const std::vector<int>& idx) {
  Tensor a = g.bind(a_in);
  require_dims(a, 2, "gather_rows");
  int rows = a.shape[0], cols = a.shape[1];
  if (static_cast<int>(idx.size()) != rows) {
    throw ShapeError("gather_rows: index count " + std::to_string(idx.size()) +
                     " does not match rows " + std::to_string(rows));
  }
  Tensor out = Tensor::zeros({rows});
  std::vector<std::int64_t> attrs;
  attrs.reserve(idx.size());
  for (int r = 0; r < rows; ++r) {
    if (idx[r] < 0 || idx[r] >= cols) {
      throw ValueError("gather_rows: index " + std::to_string(idx[r]) + " out of range [0, " +
                       std::to_string(cols) + ")");
    }
    out[r] = a[(std::int64_t)r * cols + idx[r]];
    attrs.push_back(idx[r]);
  }
  return g.emit(Op::kGatherRows, {a.node}, std::move(out), std::move(attrs));
}

Tensor scatter_rows(Graph& g, const Tensor& v_in, const std::vector<int>& idx, int cols) {
  Tensor v = g.bind(v_in);
  require_dims(v, 1, "scatter_rows");
  int rows = v.shape[0];
  if (static_cast<int>(idx.size()) != rows) {
    throw ShapeError("scatter_rows: index count mismatch");
  }
  Tensor out = Tensor::zeros({rows, cols});
  std::vector<std::int64_t> attrs;
  attrs.reserve(idx.size());
  for (int r = 0; r < rows; ++r) {
    if (idx[r] < 0 || idx[r] >= cols) throw ValueError("scatter_rows: index out of range");
    out[(std::int64_t)r * cols + idx[r]] = v[r];
    attrs.push_back(idx[r]);
  }
  return g.emit(Op::kScatterRows, {v.node}, std::move(out), std::move(attrs));
}

Tensor matmul(Graph& g, const Tensor& a_in, const Tensor& b_in) {
  Tensor a = g.bind(a_in), b = g.bind(b_in);
  require_dims(a, 2, "matmul");
  require_dims(b, 2, "matmul");
  if (a.shape[1] != b.shape[0]) {
    throw ShapeError("matmul: inner dimensions disagree " + shape_str(a.shape) + " vs " +
                     shape_str(b.shape));
  }
  int m = a.shape[0], k = a.shape[1], n = b.shape[1];
  Tensor out = Tensor::zeros({m, n});
  for (int i = 0; i < m; ++i) {
    for (int kk = 0; kk < k; ++kk) {
      double av = a[(std::int64_t)i * k + kk];
      if (av == 0.0) continue;
      const double* brow = b.ptr() + (std::int64_t)kk * n;
      double* orow = out.ptr() + (std::int64_t)i * n;
      for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return g.emit(Op::kMatMul, {a.node, b.node}, std::move(out));
}

Tensor transpose2d(Graph& g, const Tensor& a_in) {
  Tensor a = g.bind(a_in);
  require_dims(a, 2, "transpose2d");
  int rows = a.shape[0], cols = a.shape[1];
  Tensor out = Tensor::zeros({cols, rows});
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) out[(std::int64_t)c * rows + r] = a[(std::int64_t)r * cols + c];
  return g.emit(Op::kTranspose2d, {a.node}, std::move(out));
}

Tensor reshape(Graph& g, const Tensor& a_in, Shape shape) {
  Tensor a = g.bind(a_in);
  if (numel(shape) != a.size()) {
    throw ShapeError("reshape: cannot reshape " + shape_str(a.shape) + " to " + shape_str(shape));
  }
  Tensor out(std::move(shape), *a.data);
  return g.emit(Op::kReshape, {a.node}, std::move(out));
}

Tensor conv2d(Graph& g, const Tensor& input_in, const Tensor& kernel_in, int stride, int padding) {
  Tensor x = g.bind(input_in), k = g.bind(kernel_in);
  require_dims(x, 4, "conv2d");
  require_dims(k, 4, "conv2d");
  Tensor out = conv2d_value(x, k, stride, padding);
  return g.emit(Op::kConv2d, {x.node, k.node}, std::move(out), {stride, padding});
}

Tensor conv2d_input_grad(Graph& g, const Tensor& out_grad_in, const Tensor& kernel_in, int stride,
                         int padding, const Shape& input_shape) {
  Tensor gt = g.bind(out_grad_in), k = g.bind(kernel_in);
  Tensor out = conv2d_input_grad_value(gt, k, stride, padding, input_shape);
  return g.emit(Op::kConv2dInputGrad, {gt.node, k.node}, std::move(out),
                {stride, padding, input_shape[0], input_shape[1], input_shape[2], input_shape[3]});
}

Tensor conv2d_kernel_grad(Graph& g, const Tensor& input_in, const Tensor& out_grad_in, int stride,
                          int padding, const Shape& kernel_shape) {
  Tensor x = g.bind(input_in), gt = g.bind(out_grad_in);
  Tensor out = conv2d_kernel_grad_value(x, gt, stride, padding, kernel_shape);
  return g.emit(Op::kConv2dKernelGrad, {x.node, gt.node}, std::move(out),
                {stride, padding, kernel_shape[0], kernel_shape[1], kernel_shape[2],
                 kernel_shape[3]});
}

Tensor avgpool2d(Graph& g, const Tensor& input_in, int kernel, int stride) {
  Tensor x = g.bind(input_in);
  require_dims(x, 4, "avgpool2d");
  Tensor out = avgpool2d_value(x, kernel, stride);
  return g.emit(Op::kAvgPool2d, {x.node}, std::move(out), {kernel, stride});
}

Tensor avgpool2d_input_grad(Graph& g, const Tensor& out_grad_in, int kernel, int stride,
                            const Shape& input_shape) {
  Tensor gt = g.bind(out_grad_in);
  Tensor out = avgpool2d_input_grad_value(gt, kernel, stride, input_shape);
  return g.emit(Op::kAvgPool2dInputGrad, {gt.node}, std::move(out),
                {kernel, stride, input_shape[0], input_shape[1], input_shape[2], input_shape[3]});
}

namespace {

Tensor diff_h_value(const Tensor& a) {
  int n = a.shape[0], c = a.shape[1], h = a.shape[2], w = a.shape[3];
  Tensor out = Tensor::zeros({n, c, h, w - 1});
  for (int i = 0; i < n * c; ++i) {
    const double* src = a.ptr() + (std::int64_t)i * h * w;
    double* dst = out.ptr() + (std::int64_t)i * h * (w - 1);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x + 1 < w; ++x)
        dst[(std::int64_t)y * (w - 1) + x] = src[(std::int64_t)y * w + x + 1] - src[(std::int64_t)y * w + x];
  }
  return out;
}

Tensor diff_h_adj_value(const Tensor& gt, int w) {
  int n = gt.shape[0], c = gt.shape[1], h = gt.shape[2];
  Tensor out = Tensor::zeros({n, c, h, w});
  for (int i = 0; i < n * c; ++i) {
    const double* src = gt.ptr() + (std::int64_t)i * h * (w - 1);
    double* dst = out.ptr() + (std::int64_t)i * h * w;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x + 1 < w; ++x) {
        double v = src[(std::int64_t)y * (w - 1) + x];
        dst[(std::int64_t)y * w + x + 1] += v;
        dst[(std::int64_t)y * w + x] -= v;
      }
  }
  return out;
}

Tensor diff_v_value(const Tensor& a) {
  int n = a.shape[0], c = a.shape[1], h = a.shape[2], w = a.shape[3];
  Tensor out = Tensor::zeros({n, c, h - 1, w});
  for (int i = 0; i < n * c; ++i) {
    const double* src = a.ptr() + (std::int64_t)i * h * w;
    double* dst = out.ptr() + (std::int64_t)i * (h - 1) * w;
    for (int y = 0; y + 1 < h; ++y)
      for (int x = 0; x < w; ++x)
        dst[(std::int64_t)y * w + x] = src[(std::int64_t)(y + 1) * w + x] - src[(std::int64_t)y * w + x];
  }
  return out;
}

Tensor diff_v_adj_value(const Tensor& gt, int h) {
  int n = gt.shape[0], c = gt.shape[1], w = gt.shape[3];
  Tensor out = Tensor::zeros({n, c, h, w});
  for (int i = 0; i < n * c; ++i) {
    const double* src = gt.ptr() + (std::int64_t)i * (h - 1) * w;
    double* dst = out.ptr() + (std::int64_t)i * h * w;
    for (int y = 0; y + 1 < h; ++y)
      for (int x = 0; x < w; ++x) {
        double v = src[(std::int64_t)y * w + x];
        dst[(std::int64_t)(y + 1) * w + x] += v;
        dst[(std::int64_t)y * w + x] -= v;
      }
  }
  return out;
}

Tensor diff_h_adj(Graph& g, const Tensor& gt_in, int w) {
  Tensor gt = g.bind(gt_in);
  return g.emit(Op::kDiffHAdj, {gt.node}, diff_h_adj_value(gt, w), {w});
}

Tensor diff_v_adj(Graph& g, const Tensor& gt_in, int h) {
  Tensor gt = g.bind(gt_in);
  return g.emit(Op::kDiffVAdj, {gt.node}, diff_v_adj_value(gt, h), {h});
}

}  // namespace

Tensor diff_h(Graph& g, const Tensor& a_in) {
  Tensor a = g.bind(a_in);
  require_dims(a, 4, "diff_h");
  if (a.shape[3] < 2) throw ShapeError("diff_h: width must be >= 2, got " + shape_str(a.shape));
  return g.emit(Op::kDiffH, {a.node}, diff_h_value(a));
}

Tensor diff_v(Graph& g, const Tensor& a_in) {
  Tensor a = g.bind(a_in);
  require_dims(a, 4, "diff_v");
  if (a.shape[2] < 2) throw ShapeError("diff_v: height must be >= 2, got " + shape_str(a.shape));
  return g.emit(Op::kDiffV, {a.node}, diff_v_value(a));
}

Tensor concat_batch(Graph& g, const std::vector<Tensor>& parts_in) {
  if (parts_in.empty()) throw ShapeError("concat_batch: no inputs");
  std::vector<Tensor> parts;
  parts.reserve(parts_in.size());
  for (const Tensor& p : parts_in) parts.push_back(g.bind(p));
  Shape tail(parts[0].shape.begin() + 1, parts[0].shape.end());
  int total = 0;
  for (const Tensor& p : parts) {
    Shape t(p.shape.begin() + 1, p.shape.end());
    if (t != tail) {
      throw ShapeError("concat_batch: incompatible shapes " + shape_str(parts[0].shape) + " vs " +
                       shape_str(p.shape));
    }
    total += p.shape[0];
  }
  Shape out_shape = parts[0].shape;
  out_shape[0] = total;
  Tensor out = Tensor::zeros(out_shape);
  std::vector<std::int32_t> inputs;
  std::vector<std::int64_t> counts;
  std::int64_t off = 0;
  for (const Tensor& p : parts) {
    std::memcpy(out.ptr() + off, p.ptr(), sizeof(double) * static_cast<std::size_t>(p.size()));
    off += p.size();
    inputs.push_back(p.node);
    counts.push_back(p.shape[0]);
  }
  return g.emit(Op::kConcatBatch, std::move(inputs), std::move(out), std::move(counts));
}

Tensor slice_batch(Graph& g, const Tensor& a_in, int offset, int count) {
  Tensor a = g.bind(a_in);
  if (a.shape.empty() || offset < 0 || count < 1 || offset + count > a.shape[0]) {
    throw ShapeError("slice_batch: range [" + std::to_string(offset) + ", " +
                     std::to_string(offset + count) + ") out of bounds for " + shape_str(a.shape));
  }
  Shape out_shape = a.shape;
  out_shape[0] = count;
  std::int64_t row = a.size() / a.shape[0];
  Tensor out = Tensor::zeros(out_shape);
  std::memcpy(out.ptr(), a.ptr() + offset * row, sizeof(double) * static_cast<std::size_t>(count * row));
  return g.emit(Op::kSliceBatch, {a.node}, std::move(out), {offset, count});
}

Tensor embed_batch(Graph& g, const Tensor& a_in, int offset, int total) {
  Tensor a = g.bind(a_in);
  if (a.shape.empty() || offset < 0 || offset + a.shape[0] > total) {
    throw ShapeError("embed_batch: slice does not fit target batch");
  }
  Shape out_shape = a.shape;
  out_shape[0] = total;
  std::int64_t row = a.size() / a.shape[0];
  Tensor out = Tensor::zeros(out_shape);
  std::memcpy(out.ptr() + offset * row, a.ptr(), sizeof(double) * static_cast<std::size_t>(a.size()));
  return g.emit(Op::kEmbedBatch, {a.node}, std::move(out), {offset, total});
}

// ---------------------------------------------------------------------------
// composites
// ---------------------------------------------------------------------------

Tensor fully_connected(Graph& g, const Tensor& input, const Tensor& weight, const Tensor& bias) {
  Tensor x = g.bind(input), w = g.bind(weight), b = g.bind(bias);
  require_dims(x, 2, "fully_connected");
  require_dims(w, 2, "fully_connected");
  require_dims(b, 1, "fully_connected");
  if (x.shape[1] != w.shape[1] || w.shape[0] != b.shape[0]) {
    throw ShapeError("fully_connected: input " + shape_str(x.shape) + ", weight " +
                     shape_str(w.shape) + ", bias " + shape_str(b.shape) + " do not compose");
  }
  Tensor y = matmul(g, x, transpose2d(g, w));
  return add(g, y, broadcast_rows(g, b, x.shape[0]));
}

Tensor softmax_cross_entropy(Graph& g, const Tensor& logits_in, const std::vector<int>& labels) {
  Tensor logits = g.bind(logits_in);
  require_dims(logits, 2, "softmax_cross_entropy");
  int b = logits.shape[0], c = logits.shape[1];
  if (static_cast<int>(labels.size()) != b) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                     " labels for batch of " + std::to_string(b));
  }
  for (int label : labels) {
    if (label < 0 || label >= c) {
      throw ValueError("softmax_cross_entropy: label " + std::to_string(label) +
                       " out of range [0, " + std::to_string(c) + ")");
    }
  }
  // Detached row maxima; shifting by a constant leaves the loss gradient exact.
  Tensor m = Tensor::zeros({b});
  for (int r = 0; r < b; ++r) {
    double mx = logits[(std::int64_t)r * c];
    for (int j = 1; j < c; ++j) mx = std::max(mx, logits[(std::int64_t)r * c + j]);
    m[r] = mx;
  }
  Tensor mleaf = g.leaf(m);
  Tensor shifted = sub(g, logits, broadcast_cols(g, mleaf, c));
  Tensor lse = add(g, log_t(g, sum_rows(g, exp_t(g, shifted))), mleaf);
  Tensor picked = gather_rows(g, logits, labels);
  Tensor losses = sub(g, lse, picked);
  return scale(g, sum_all(g, losses), 1.0 / b);
}

Tensor cosine_similarity_flat(Graph& g, const std::vector<Tensor>& a,
                              const std::vector<Tensor>& b) {
  if (a.size() != b.size() || a.empty()) {
    throw ShapeError("cosine_similarity_flat: list sizes " + std::to_string(a.size()) + " vs " +
                     std::to_string(b.size()));
  }
  Tensor dot, na2, nb2;
  for (std::size_t i = 0; i < a.size(); ++i) {
    Tensor ai = g.bind(a[i]), bi = g.bind(b[i]);
    require_same_shape(ai, bi, "cosine_similarity_flat");
    Tensor d = sum_all(g, mul(g, ai, bi));
    Tensor sa = sum_all(g, mul(g, ai, ai));
    Tensor sb = sum_all(g, mul(g, bi, bi));
    if (i == 0) {
      dot = d;
      na2 = sa;
      nb2 = sb;
    } else {
      dot = add(g, dot, d);
      na2 = add(g, na2, sa);
      nb2 = add(g, nb2, sb);
    }
  }
  if (na2[0] == 0.0 || nb2[0] == 0.0) {
    throw ValueError("cosine_similarity_flat: zero-norm side, objective degenerate");
  }
  return mul(g, dot, recip(g, mul(g, sqrt_t(g, na2), sqrt_t(g, nb2))));
}

Tensor total_variation(Graph& g, const Tensor& image_in) {
  Tensor image = g.bind(image_in);
  require_dims(image, 4, "total_variation");
  int h = image.shape[2], w = image.shape[3];
  if (h < 1 || w < 1) throw ShapeError("total_variation: empty image");
  Tensor acc;
  bool has = false;
  if (w >= 2) {
    acc = sum_all(g, abs_t(g, diff_h(g, image)));
    has = true;
  }
  if (h >= 2) {
    Tensor tv = sum_all(g, abs_t(g, diff_v(g, image)));
    acc = has ? add(g, acc, tv) : tv;
    has = true;
  }
  if (!has) acc = g.leaf(Tensor::scalar(0.0));
  return acc;
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

namespace {

// Adjoint contributions of node n w.r.t. each input slot, expressed as graph
// ops over the original input nodes so that gradients stay differentiable.
std::vector<Tensor> vjp(Graph& g, const Node& n, const Tensor& adj) {
  auto in = [&](std::size_t i) { return g.node(n.inputs[i]).value; };
  switch (n.op) {
    case Op::kLeaf:
      return {};
    case Op::kAdd:
      return {adj, adj};
    case Op::kSub:
      return {adj, neg(g, adj)};
    case Op::kNeg:
      return {neg(g, adj)};
    case Op::kMul:
      return {mul(g, adj, in(1)), mul(g, adj, in(0))};
    case Op::kScale:
      return {scale(g, adj, n.dattr)};
    case Op::kRecip:
      return {neg(g, mul(g, adj, mul(g, n.value, n.value)))};
    case Op::kSqrt:
      return {scale(g, mul(g, adj, recip(g, n.value)), 0.5)};
    case Op::kLog:
      return {mul(g, adj, recip(g, in(0)))};
    case Op::kExp:
      return {mul(g, adj, n.value)};
    case Op::kAbs: {
      Tensor sign = Tensor::zeros(in(0).shape);
      const Tensor& x = in(0);
      for (std::int64_t i = 0; i < x.size(); ++i)
        sign[i] = x[i] > 0.0 ? 1.0 : (x[i] < 0.0 ? -1.0 : 0.0);
      return {mul(g, adj, g.leaf(sign))};
    }
    case Op::kRelu: {
      Tensor mask = Tensor::zeros(in(0).shape);
      const Tensor& x = in(0);
      for (std::int64_t i = 0; i < x.size(); ++i) mask[i] = x[i] > 0.0 ? 1.0 : 0.0;
      return {mul(g, adj, g.leaf(mask))};
    }
    case Op::kSumAll:
      return {broadcast_scalar(g, adj, in(0).shape)};
    case Op::kBroadcastScalar:
      return {sum_all(g, adj)};
    case Op::kSumRows:
      return {broadcast_cols(g, adj, in(0).shape[1])};
    case Op::kBroadcastCols:
      return {sum_rows(g, adj)};
    case Op::kSumCols:
      return {broadcast_rows(g, adj, in(0).shape[0])};
    case Op::kBroadcastRows:
      return {sum_cols(g, adj)};
    case Op::kSumNHW: {
      const Shape& s = in(0).shape;
      return {broadcast_nhw(g, adj, s[0], s[2], s[3])};
    }
    case Op::kBroadcastNHW:
      return {sum_nhw(g, adj)};
    case Op::kGatherRows: {
      std::vector<int> idx(n.iattrs.begin(), n.iattrs.end());
      return {scatter_rows(g, adj, idx, in(0).shape[1])};
    }
    case Op::kScatterRows: {
      std::vector<int> idx(n.iattrs.begin(), n.iattrs.end());
      return {gather_rows(g, adj, idx)};
    }
    case Op::kMatMul:
      return {matmul(g, adj, transpose2d(g, in(1))), matmul(g, transpose2d(g, in(0)), adj)};
    case Op::kTranspose2d:
      return {transpose2d(g, adj)};
    case Op::kReshape:
      return {reshape(g, adj, in(0).shape)};
    case Op::kConv2d: {
      int stride = static_cast<int>(n.iattrs[0]), pad = static_cast<int>(n.iattrs[1]);
      return {conv2d_input_grad(g, adj, in(1), stride, pad, in(0).shape),
              conv2d_kernel_grad(g, in(0), adj, stride, pad, in(1).shape)};
    }
    case Op::kConv2dInputGrad: {
      // node = IG(gout, k); adjoint h flows as d/dgout = conv(h, k),
      // d/dk = KG(h, gout).
      int stride = static_cast<int>(n.iattrs[0]), pad = static_cast<int>(n.iattrs[1]);
      return {conv2d(g, adj, in(1), stride, pad),
              conv2d_kernel_grad(g, adj, in(0), stride, pad, in(1).shape)};
    }
    case Op::kConv2dKernelGrad: {
      // node = KG(x, gout); d/dx = IG(gout, h), d/dgout = conv(x, h).
      int stride = static_cast<int>(n.iattrs[0]), pad = static_cast<int>(n.iattrs[1]);
      return {conv2d_input_grad(g, in(1), adj, stride, pad, in(0).shape),
              conv2d(g, in(0), adj, stride, pad)};
    }
    case Op::kAvgPool2d: {
      int kernel = static_cast<int>(n.iattrs[0]), stride = static_cast<int>(n.iattrs[1]);
      return {avgpool2d_input_grad(g, adj, kernel, stride, in(0).shape)};
    }
    case Op::kAvgPool2dInputGrad: {
      int kernel = static_cast<int>(n.iattrs[0]), stride = static_cast<int>(n.iattrs[1]);
      return {avgpool2d(g, adj, kernel, stride)};
    }
    case Op::kDiffH:
      return {diff_h_adj(g, adj, in(0).shape[3])};
    case Op::kDiffHAdj:
      return {diff_h(g, adj)};
    case Op::kDiffV:
      return {diff_v_adj(g, adj, in(0).shape[2])};
    case Op::kDiffVAdj:
      return {diff_v(g, adj)};
    case Op::kConcatBatch: {
      std::vector<Tensor> out;
      int off = 0;
      for (std::size_t i = 0; i < n.inputs.size(); ++i) {
        int count = static_cast<int>(n.iattrs[i]);
        out.push_back(slice_batch(g, adj, off, count));
        off += count;
      }
      return out;
    }
    case Op::kSliceBatch: {
      int off = static_cast<int>(n.iattrs[0]);
      return {embed_batch(g, adj, off, in(0).shape[0])};
    }
    case Op::kEmbedBatch: {
      int off = static_cast<int>(n.iattrs[0]);
      return {slice_batch(g, adj, off, in(0).shape[0])};
    }
  }
  throw Error("vjp: unhandled op");
}

}  // namespace

std::vector<Tensor> backward(Graph& g, const Tensor& output, std::span<const Tensor> wrt) {
  if (!g.owns(output)) throw ValueError("backward: output is not a node of this graph");
  if (output.size() != 1) {
    throw ShapeError("backward: output must be scalar, got shape " + shape_str(output.shape));
  }
  for (const Tensor& w : wrt) {
    if (!g.owns(w)) throw ValueError("backward: wrt tensor is not a node of this graph");
  }

  const std::int32_t out_id = output.node;

  // Restrict adjoint construction to nodes on a path from some wrt to output.
  std::vector<char> from_wrt(static_cast<std::size_t>(out_id) + 1, 0);
  for (const Tensor& w : wrt) {
    if (w.node <= out_id) from_wrt[static_cast<std::size_t>(w.node)] = 1;
  }
  for (std::int32_t i = 0; i <= out_id; ++i) {
    if (from_wrt[static_cast<std::size_t>(i)]) continue;
    for (std::int32_t in : g.node(i).inputs) {
      if (in <= out_id && from_wrt[static_cast<std::size_t>(in)]) {
        from_wrt[static_cast<std::size_t>(i)] = 1;
        break;
      }
    }
  }
  std::vector<char> to_out(static_cast<std::size_t>(out_id) + 1, 0);
  {
    std::vector<std::int32_t> stack{out_id};
    to_out[static_cast<std::size_t>(out_id)] = 1;
    while (!stack.empty()) {
      std::int32_t id = stack.back();
      stack.pop_back();
      for (std::int32_t in : g.node(id).inputs) {
        if (!to_out[static_cast<std::size_t>(in)]) {
          to_out[static_cast<std::size_t>(in)] = 1;
          stack.push_back(in);
        }
      }
    }
  }

  std::vector<std::int32_t> adj(static_cast<std::size_t>(out_id) + 1, -1);
  adj[static_cast<std::size_t>(out_id)] = g.leaf(Tensor::full(output.shape, 1.0)).node;

  for (std::int32_t id = out_id; id >= 0; --id) {
    std::int32_t adj_id = adj[static_cast<std::size_t>(id)];
    if (adj_id < 0) continue;
    if (!from_wrt[static_cast<std::size_t>(id)]) continue;
    Node n = g.node(id);  // copy: emitting may reallocate node storage
    if (n.op == Op::kLeaf) continue;
    Tensor adj_tensor = g.node(adj_id).value;
    std::vector<Tensor> contribs = vjp(g, n, adj_tensor);
    for (std::size_t slot = 0; slot < contribs.size(); ++slot) {
      std::int32_t in_id = n.inputs[slot];
      if (!from_wrt[static_cast<std::size_t>(in_id)] || !to_out[static_cast<std::size_t>(in_id)]) {
        continue;
      }
      std::int32_t& cur = adj[static_cast<std::size_t>(in_id)];
      if (cur < 0) {
        cur = contribs[slot].node;
      } else {
        cur = add(g, g.node(cur).value, contribs[slot]).node;
      }
    }
  }

  std::vector<Tensor> result;
  result.reserve(wrt.size());
  for (const Tensor& w : wrt) {
    std::int32_t a = w.node <= out_id ? adj[static_cast<std::size_t>(w.node)] : -1;
    if (a >= 0) {
      result.push_back(g.node(a).value);
    } else {
      result.push_back(g.leaf(Tensor::zeros(w.shape)));
    }
  }
  return result;
}

}  // namespace gradinv::ad
