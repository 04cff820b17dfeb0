#ifndef RPFEM_OPS_HPP_
#define RPFEM_OPS_HPP_

#include <cmath>
#include <cstdlib>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rpfem/tensor.hpp"

namespace rpfem {

/// Differentiable operations. Each forward is a fixed-order loop nest so
/// that replaying a pass with the same inputs is bit-identical; each
/// adjoint accumulates into the grads of the inputs that require them.
namespace ops {

namespace detail {

using rpfem::detail::input_grad;
using rpfem::detail::Node;
using rpfem::detail::record;

#ifdef RPFEM_FAULT_INJECTION
// Test builds only: RPFEM_INJECT_FAULT=<op> flips the sign of that op's
// adjoint so the gradient checker can be shown to catch it.
inline double fault_sign(std::string_view op) {
  const char* env = std::getenv("RPFEM_INJECT_FAULT");
  return (env != nullptr && op == env) ? -1.0 : 1.0;
}
#else
constexpr double fault_sign(std::string_view) { return 1.0; }
#endif

inline void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " +
                         std::to_string(rank) + ", got " + shape_str(t.shape()));
  }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()) + " differ");
  }
}

// Splits a shape around `axis` into (outer, length, inner) extents.
struct AxisSplit {
  std::size_t outer = 1, length = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t d = 0; d < axis; ++d) s.outer *= shape[d];
  s.length = shape[axis];
  for (std::size_t d = axis + 1; d < shape.size(); ++d) s.inner *= shape[d];
  return s;
}

// out[m x n] += a[m x k] * b[k x n]
inline void gemm_nn(const double* a, const double* b, double* out, std::size_t m,
                    std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += aip * brow[j];
    }
  }
}

// ga[m x k] += g[m x n] * b[k x n]^T
inline void gemm_nt(const double* g, const double* b, double* ga, std::size_t m,
                    std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      double acc = 0.0;
      const double* grow = g + i * n;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
      ga[i * k + p] += acc;
    }
  }
}

// gb[k x n] += a[m x k]^T * g[m x n]
inline void gemm_tn(const double* a, const double* g, double* gb, std::size_t m,
                    std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* grow = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      double* brow = gb + p * n;
      for (std::size_t j = 0; j < n; ++j) brow[j] += aip * grow[j];
    }
  }
}

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  if (a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: inner dimensions of " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()) + " disagree");
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  NDArray out(Shape{m, n});
  detail::gemm_nn(a.data().data(), b.data().data(), out.data.data(), m, k, n);
  return detail::record(std::move(out), {a, b}, "matmul", [m, k, n](detail::Node& self) {
    const double sign = detail::fault_sign("matmul");
    const auto& av = self.inputs[0]->value.data;
    const auto& bv = self.inputs[1]->value.data;
    std::vector<double> g = self.grad->data;
    if (sign < 0) for (double& x : g) x = -x;
    if (NDArray* ga = detail::input_grad(self, 0)) {
      detail::gemm_nt(g.data(), bv.data(), ga->data.data(), m, k, n);
    }
    if (NDArray* gb = detail::input_grad(self, 1)) {
      detail::gemm_tn(av.data(), g.data(), gb->data.data(), m, k, n);
    }
  });
}

/// Leading-axis batched product: [B x m x k] * [B x k x n] -> [B x m x n].
inline Tensor batched_matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 3, "batched_matmul");
  detail::require_rank(b, 3, "batched_matmul");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
    throw DimensionError("batched_matmul: shapes " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()) + " disagree");
  }
  const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  NDArray out(Shape{batch, m, n});
  for (std::size_t s = 0; s < batch; ++s) {
    detail::gemm_nn(a.data().data() + s * m * k, b.data().data() + s * k * n,
                    out.data.data() + s * m * n, m, k, n);
  }
  return detail::record(std::move(out), {a, b}, "batched_matmul",
                        [batch, m, k, n](detail::Node& self) {
    const auto& av = self.inputs[0]->value.data;
    const auto& bv = self.inputs[1]->value.data;
    const auto& g = self.grad->data;
    NDArray* ga = detail::input_grad(self, 0);
    NDArray* gb = detail::input_grad(self, 1);
    for (std::size_t s = 0; s < batch; ++s) {
      if (ga) {
        detail::gemm_nt(g.data() + s * m * n, bv.data() + s * k * n,
                        ga->data.data() + s * m * k, m, k, n);
      }
      if (gb) {
        detail::gemm_tn(av.data() + s * m * k, g.data() + s * m * n,
                        gb->data.data() + s * k * n, m, k, n);
      }
    }
  });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  NDArray out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += b.data()[i];
  return detail::record(std::move(out), {a, b}, "add", [](detail::Node& self) {
    const auto& g = self.grad->data;
    for (std::size_t k = 0; k < 2; ++k) {
      if (NDArray* gi = detail::input_grad(self, k)) {
        for (std::size_t i = 0; i < g.size(); ++i) gi->data[i] += g[i];
      }
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  NDArray out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] -= b.data()[i];
  return detail::record(std::move(out), {a, b}, "sub", [](detail::Node& self) {
    const auto& g = self.grad->data;
    if (NDArray* ga = detail::input_grad(self, 0)) {
      for (std::size_t i = 0; i < g.size(); ++i) ga->data[i] += g[i];
    }
    if (NDArray* gb = detail::input_grad(self, 1)) {
      for (std::size_t i = 0; i < g.size(); ++i) gb->data[i] -= g[i];
    }
  });
}

/// Elementwise product.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  NDArray out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= b.data()[i];
  return detail::record(std::move(out), {a, b}, "mul", [](detail::Node& self) {
    const auto& g = self.grad->data;
    const auto& av = self.inputs[0]->value.data;
    const auto& bv = self.inputs[1]->value.data;
    if (NDArray* ga = detail::input_grad(self, 0)) {
      for (std::size_t i = 0; i < g.size(); ++i) ga->data[i] += g[i] * bv[i];
    }
    if (NDArray* gb = detail::input_grad(self, 1)) {
      for (std::size_t i = 0; i < g.size(); ++i) gb->data[i] += g[i] * av[i];
    }
  });
}

inline Tensor scale(const Tensor& x, double factor) {
  NDArray out = x.value();
  for (double& v : out.data) v *= factor;
  return detail::record(std::move(out), {x}, "scale", [factor](detail::Node& self) {
    const auto& g = self.grad->data;
    if (NDArray* gx = detail::input_grad(self, 0)) {
      for (std::size_t i = 0; i < g.size(); ++i) gx->data[i] += factor * g[i];
    }
  });
}

/// Adds a length-F vector to every row of a [... x F] tensor.
inline Tensor add_bias(const Tensor& x, const Tensor& bias) {
  detail::require_rank(bias, 1, "add_bias");
  if (x.rank() == 0 || x.shape().back() != bias.dim(0)) {
    throw DimensionError("add_bias: " + shape_str(x.shape()) + " vs bias " +
                         shape_str(bias.shape()));
  }
  const std::size_t width = bias.dim(0);
  const std::size_t rows = x.size() / width;
  NDArray out = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t f = 0; f < width; ++f) out.data[r * width + f] += bias.data()[f];
  }
  return detail::record(std::move(out), {x, bias}, "add_bias",
                        [rows, width](detail::Node& self) {
    const auto& g = self.grad->data;
    if (NDArray* gx = detail::input_grad(self, 0)) {
      for (std::size_t i = 0; i < g.size(); ++i) gx->data[i] += g[i];
    }
    if (NDArray* gb = detail::input_grad(self, 1)) {
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t f = 0; f < width; ++f) gb->data[f] += g[r * width + f];
      }
    }
  });
}

/// x @ w + b for a [rows x in] input.
inline Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) {
  return add_bias(matmul(x, w), b);
}

inline Tensor leaky_relu(const Tensor& x, double slope = 0.01) {
  if (!(slope > 0.0)) throw ContractError("leaky_relu: slope must be positive");
  NDArray out = x.value();
  for (double& v : out.data) v = v >= 0.0 ? v : slope * v;
  return detail::record(std::move(out), {x}, "leaky_relu", [slope](detail::Node& self) {
    const double sign = detail::fault_sign("leaky_relu");
    const auto& g = self.grad->data;
    const auto& xv = self.inputs[0]->value.data;
    if (NDArray* gx = detail::input_grad(self, 0)) {
      for (std::size_t i = 0; i < g.size(); ++i) {
        gx->data[i] += sign * g[i] * (xv[i] >= 0.0 ? 1.0 : slope);
      }
    }
  });
}

/// Softmax along `axis` with max subtraction.
inline Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) +
                         " out of range for " + shape_str(x.shape()));
  }
  const auto s = detail::split_axis(x.shape(), axis);
  NDArray out(x.shape());
  const auto& xv = x.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.length * s.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < s.length; ++l) mx = std::max(mx, xv[base + l * s.inner]);
      double total = 0.0;
      for (std::size_t l = 0; l < s.length; ++l) {
        const double e = std::exp(xv[base + l * s.inner] - mx);
        out.data[base + l * s.inner] = e;
        total += e;
      }
      for (std::size_t l = 0; l < s.length; ++l) out.data[base + l * s.inner] /= total;
    }
  }
  return detail::record(std::move(out), {x}, "softmax", [s](detail::Node& self) {
    NDArray* gx = detail::input_grad(self, 0);
    if (!gx) return;
    const double sign = detail::fault_sign("softmax");
    const auto& y = self.value.data;
    const auto& g = self.grad->data;
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.length * s.inner + in;
        double dot = 0.0;
        for (std::size_t l = 0; l < s.length; ++l) {
          const std::size_t idx = base + l * s.inner;
          dot += y[idx] * g[idx];
        }
        for (std::size_t l = 0; l < s.length; ++l) {
          const std::size_t idx = base + l * s.inner;
          gx->data[idx] += sign * y[idx] * (g[idx] - dot);
        }
      }
    }
  });
}

/// Normalizes each row of the last axis to zero mean, unit variance; no
/// affine part. Used for diagnostics on LayerNorm inputs.
inline NDArray normalize_rows(const NDArray& x, double eps = 1e-5) {
  const std::size_t width = x.shape.back();
  const std::size_t rows = x.size() / width;
  NDArray out(x.shape);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = x.data.data() + r * width;
    double mean = 0.0;
    for (std::size_t f = 0; f < width; ++f) mean += row[f];
    mean /= static_cast<double>(width);
    double var = 0.0;
    for (std::size_t f = 0; f < width; ++f) var += (row[f] - mean) * (row[f] - mean);
    var /= static_cast<double>(width);
    const double inv = 1.0 / std::sqrt(var + eps);
    for (std::size_t f = 0; f < width; ++f) out.data[r * width + f] = (row[f] - mean) * inv;
  }
  return out;
}

/// LayerNorm over the last axis with per-feature gain and bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-5) {
  if (!(eps > 0.0)) throw ContractError("layer_norm: eps must be positive");
  detail::require_rank(gain, 1, "layer_norm");
  detail::require_rank(bias, 1, "layer_norm");
  if (x.rank() == 0 || x.shape().back() != gain.dim(0) || gain.dim(0) != bias.dim(0)) {
    throw DimensionError("layer_norm: input " + shape_str(x.shape()) + ", gain " +
                         shape_str(gain.shape()) + ", bias " + shape_str(bias.shape()));
  }
  const std::size_t width = gain.dim(0);
  const std::size_t rows = x.size() / width;
  NDArray xhat = normalize_rows(x.value(), eps);
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = x.data().data() + r * width;
    double mean = 0.0;
    for (std::size_t f = 0; f < width; ++f) mean += row[f];
    mean /= static_cast<double>(width);
    double var = 0.0;
    for (std::size_t f = 0; f < width; ++f) var += (row[f] - mean) * (row[f] - mean);
    inv_std[r] = 1.0 / std::sqrt(var / static_cast<double>(width) + eps);
  }
  NDArray out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t f = 0; f < width; ++f) {
      const std::size_t i = r * width + f;
      out.data[i] = xhat.data[i] * gain.data()[f] + bias.data()[f];
    }
  }
  return detail::record(
      std::move(out), {x, gain, bias}, "layer_norm",
      [rows, width, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& self) {
        const auto& g = self.grad->data;
        const auto& gamma = self.inputs[1]->value.data;
        if (NDArray* gx = detail::input_grad(self, 0)) {
          const double n = static_cast<double>(width);
          for (std::size_t r = 0; r < rows; ++r) {
            double sum_d = 0.0, sum_dx = 0.0;
            for (std::size_t f = 0; f < width; ++f) {
              const std::size_t i = r * width + f;
              const double d = g[i] * gamma[f];
              sum_d += d;
              sum_dx += d * xhat.data[i];
            }
            for (std::size_t f = 0; f < width; ++f) {
              const std::size_t i = r * width + f;
              const double d = g[i] * gamma[f];
              gx->data[i] += inv_std[r] * (d - sum_d / n - xhat.data[i] * sum_dx / n);
            }
          }
        }
        if (NDArray* gg = detail::input_grad(self, 1)) {
          for (std::size_t i = 0; i < g.size(); ++i) gg->data[i % width] += g[i] * xhat.data[i];
        }
        if (NDArray* gb = detail::input_grad(self, 2)) {
          for (std::size_t i = 0; i < g.size(); ++i) gb->data[i % width] += g[i];
        }
      });
}

inline Tensor concat(const std::vector<Tensor>& xs, std::size_t axis) {
  if (xs.empty()) throw ContractError("concat: no inputs");
  const Shape& first = xs.front().shape();
  if (axis >= first.size()) throw DimensionError("concat: axis out of range");
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& t : xs) {
    bool ok = t.rank() == first.size();
    for (std::size_t d = 0; ok && d < first.size(); ++d) {
      ok = d == axis || t.dim(d) == first[d];
    }
    if (!ok) {
      throw DimensionError("concat: incompatible shapes " + shape_str(first) +
                           " and " + shape_str(t.shape()) + " on axis " +
                           std::to_string(axis));
    }
    out_shape[axis] += t.dim(axis);
  }
  const auto s = detail::split_axis(out_shape, axis);
  NDArray out(out_shape);
  std::vector<std::size_t> widths;
  widths.reserve(xs.size());
  for (const auto& t : xs) widths.push_back(t.dim(axis) * s.inner);
  const std::size_t out_row = s.length * s.inner;
  std::size_t offset = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const auto& src = xs[k].data();
    for (std::size_t o = 0; o < s.outer; ++o) {
      std::copy_n(src.data() + o * widths[k], widths[k],
                  out.data.data() + o * out_row + offset);
    }
    offset += widths[k];
  }
  return detail::record(std::move(out), xs, "concat",
                        [s, widths, out_row](detail::Node& self) {
    const auto& g = self.grad->data;
    std::size_t offset = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      if (NDArray* gk = detail::input_grad(self, k)) {
        for (std::size_t o = 0; o < s.outer; ++o) {
          for (std::size_t i = 0; i < widths[k]; ++i) {
            gk->data[o * widths[k] + i] += g[o * out_row + offset + i];
          }
        }
      }
      offset += widths[k];
    }
  });
}

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(shape));
  }
  NDArray out(std::move(shape), x.value().data);
  return detail::record(std::move(out), {x}, "reshape", [](detail::Node& self) {
    if (NDArray* gx = detail::input_grad(self, 0)) {
      const auto& g = self.grad->data;
      for (std::size_t i = 0; i < g.size(); ++i) gx->data[i] += g[i];
    }
  });
}

/// Rows [begin, end) of the leading axis.
inline Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  if (x.rank() == 0 || begin > end || end > x.dim(0)) {
    throw DimensionError("slice_rows: [" + std::to_string(begin) + ", " +
                         std::to_string(end) + ") outside " + shape_str(x.shape()));
  }
  Shape shape = x.shape();
  const std::size_t row = x.size() / shape[0];
  shape[0] = end - begin;
  NDArray out(shape, std::vector<double>(x.data().begin() + begin * row,
                                         x.data().begin() + end * row));
  return detail::record(std::move(out), {x}, "slice_rows", [begin, row](detail::Node& self) {
    if (NDArray* gx = detail::input_grad(self, 0)) {
      const auto& g = self.grad->data;
      for (std::size_t i = 0; i < g.size(); ++i) gx->data[begin * row + i] += g[i];
    }
  });
}

/// Elements [begin, end) along `axis`.
inline Tensor slice_axis(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  if (axis >= x.rank() || begin > end || end > x.dim(axis)) {
    throw DimensionError("slice_axis: [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") on axis " + std::to_string(axis) + " outside " + shape_str(x.shape()));
  }
  const auto s = detail::split_axis(x.shape(), axis);
  Shape shape = x.shape();
  shape[axis] = end - begin;
  const std::size_t width = (end - begin) * s.inner;
  NDArray out(shape);
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(x.data().data() + o * s.length * s.inner + begin * s.inner, width,
                out.data.data() + o * width);
  }
  return detail::record(std::move(out), {x}, "slice_axis", [s, begin, width](detail::Node& self) {
    if (NDArray* gx = detail::input_grad(self, 0)) {
      const auto& g = self.grad->data;
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < width; ++i) {
          gx->data[o * s.length * s.inner + begin * s.inner + i] += g[o * width + i];
        }
      }
    }
  });
}

/// out[r] = x[indices[r]] along the leading axis; the adjoint scatter-adds.
inline Tensor gather_rows(const Tensor& x, std::vector<std::size_t> indices) {
  if (x.rank() == 0) throw DimensionError("gather_rows: scalar input");
  const std::size_t rows = x.dim(0);
  const std::size_t row = x.size() / std::max<std::size_t>(rows, 1);
  for (std::size_t idx : indices) {
    if (idx >= rows) {
      throw DimensionError("gather_rows: index " + std::to_string(idx) +
                           " outside " + shape_str(x.shape()));
    }
  }
  Shape shape = x.shape();
  shape[0] = indices.size();
  NDArray out(shape);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    std::copy_n(x.data().data() + indices[r] * row, row, out.data.data() + r * row);
  }
  return detail::record(std::move(out), {x}, "gather_rows",
                        [row, indices = std::move(indices)](detail::Node& self) {
    if (NDArray* gx = detail::input_grad(self, 0)) {
      const auto& g = self.grad->data;
      for (std::size_t r = 0; r < indices.size(); ++r) {
        for (std::size_t f = 0; f < row; ++f) gx->data[indices[r] * row + f] += g[r * row + f];
      }
    }
  });
}

/// Sums out one axis.
inline Tensor sum_axis(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) throw DimensionError("sum_axis: axis out of range");
  const auto s = detail::split_axis(x.shape(), axis);
  Shape shape = x.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  NDArray out(shape);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t l = 0; l < s.length; ++l) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        out.data[o * s.inner + in] += x.data()[(o * s.length + l) * s.inner + in];
      }
    }
  }
  return detail::record(std::move(out), {x}, "sum_axis", [s](detail::Node& self) {
    if (NDArray* gx = detail::input_grad(self, 0)) {
      const auto& g = self.grad->data;
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t l = 0; l < s.length; ++l) {
          for (std::size_t in = 0; in < s.inner; ++in) {
            gx->data[(o * s.length + l) * s.inner + in] += g[o * s.inner + in];
          }
        }
      }
    }
  });
}

inline Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  return detail::record(NDArray(Shape{}, {total}), {x}, "sum", [](detail::Node& self) {
    if (NDArray* gx = detail::input_grad(self, 0)) {
      const double g = self.grad->data[0];
      for (double& v : gx->data) v += g;
    }
  });
}

inline Tensor mean(const Tensor& x) {
  return scale(sum(x), 1.0 / static_cast<double>(std::max<std::size_t>(x.size(), 1)));
}

/// Mean cross-entropy of row-wise logits [N x K] against class indices.
inline Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  detail::require_rank(logits, 2, "cross_entropy");
  const std::size_t rows = logits.dim(0), classes = logits.dim(1);
  if (labels.size() != rows) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) +
                         " labels for " + shape_str(logits.shape()));
  }
  if (rows == 0) throw ContractError("cross_entropy: empty batch");
  NDArray probs(logits.shape());
  std::vector<int> targets(labels.begin(), labels.end());
  double loss = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= classes) {
      throw ContractError("cross_entropy: label " + std::to_string(targets[r]) +
                          " outside [0, " + std::to_string(classes) + ")");
    }
    const double* row = logits.data().data() + r * classes;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < classes; ++c) mx = std::max(mx, row[c]);
    double total = 0.0;
    for (std::size_t c = 0; c < classes; ++c) {
      probs.data[r * classes + c] = std::exp(row[c] - mx);
      total += probs.data[r * classes + c];
    }
    for (std::size_t c = 0; c < classes; ++c) probs.data[r * classes + c] /= total;
    loss += -(row[targets[r]] - mx - std::log(total));
  }
  loss /= static_cast<double>(rows);
  return detail::record(
      NDArray(Shape{}, {loss}), {logits}, "cross_entropy",
      [rows, classes, probs = std::move(probs), targets = std::move(targets)](detail::Node& self) {
        if (NDArray* gx = detail::input_grad(self, 0)) {
          const double g = self.grad->data[0] / static_cast<double>(rows);
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < classes; ++c) {
              const double onehot = static_cast<int>(c) == targets[r] ? 1.0 : 0.0;
              gx->data[r * classes + c] += g * (probs.data[r * classes + c] - onehot);
            }
          }
        }
      });
}

/// Scaled dot-product attention, streamed one query row at a time:
/// out[m] = sum_s softmax_s(scale * q[m].k[s]) v[s]. The [M x S] weight
/// matrix is never stored; the adjoint recomputes each row.
inline Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, double scale_factor) {
  detail::require_rank(q, 2, "attention");
  detail::require_rank(k, 2, "attention");
  detail::require_rank(v, 2, "attention");
  if (q.dim(1) != k.dim(1) || k.dim(0) != v.dim(0)) {
    throw DimensionError("attention: query " + shape_str(q.shape()) + ", key " +
                         shape_str(k.shape()) + ", value " + shape_str(v.shape()));
  }
  if (k.dim(0) == 0) throw ContractError("attention: no keys");
  const std::size_t rows = q.dim(0), keys = k.dim(0), width = q.dim(1), vwidth = v.dim(1);

  auto row_weights = [keys, width, scale_factor](const double* qrow, const double* kv,
                                                 std::vector<double>& w) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t s = 0; s < keys; ++s) {
      double dot = 0.0;
      for (std::size_t d = 0; d < width; ++d) dot += qrow[d] * kv[s * width + d];
      w[s] = dot * scale_factor;
      mx = std::max(mx, w[s]);
    }
    double total = 0.0;
    for (std::size_t s = 0; s < keys; ++s) {
      w[s] = std::exp(w[s] - mx);
      total += w[s];
    }
    for (std::size_t s = 0; s < keys; ++s) w[s] /= total;
  };

  NDArray out(Shape{rows, vwidth});
  std::vector<double> w(keys);
  for (std::size_t m = 0; m < rows; ++m) {
    row_weights(q.data().data() + m * width, k.data().data(), w);
    double* orow = out.data.data() + m * vwidth;
    for (std::size_t s = 0; s < keys; ++s) {
      const double* vrow = v.data().data() + s * vwidth;
      for (std::size_t d = 0; d < vwidth; ++d) orow[d] += w[s] * vrow[d];
    }
  }
  return detail::record(
      std::move(out), {q, k, v}, "attention",
      [rows, keys, width, vwidth, scale_factor, row_weights](detail::Node& self) {
        const auto& qv = self.inputs[0]->value.data;
        const auto& kv = self.inputs[1]->value.data;
        const auto& vv = self.inputs[2]->value.data;
        const auto& g = self.grad->data;
        NDArray* gq = detail::input_grad(self, 0);
        NDArray* gk = detail::input_grad(self, 1);
        NDArray* gv = detail::input_grad(self, 2);
        std::vector<double> w(keys), dw(keys);
        for (std::size_t m = 0; m < rows; ++m) {
          row_weights(qv.data() + m * width, kv.data(), w);
          const double* grow = g.data() + m * vwidth;
          double dot = 0.0;
          for (std::size_t s = 0; s < keys; ++s) {
            double acc = 0.0;
            for (std::size_t d = 0; d < vwidth; ++d) acc += grow[d] * vv[s * vwidth + d];
            dw[s] = acc;
            dot += w[s] * acc;
          }
          for (std::size_t s = 0; s < keys; ++s) {
            const double dlogit = w[s] * (dw[s] - dot) * scale_factor;
            if (gq) {
              for (std::size_t d = 0; d < width; ++d) {
                gq->data[m * width + d] += dlogit * kv[s * width + d];
              }
            }
            if (gk) {
              for (std::size_t d = 0; d < width; ++d) {
                gk->data[s * width + d] += dlogit * qv[m * width + d];
              }
            }
            if (gv) {
              for (std::size_t d = 0; d < vwidth; ++d) gv->data[s * vwidth + d] += w[s] * grow[d];
            }
          }
        }
      });
}

}  // namespace ops

}  // namespace rpfem

#endif  // RPFEM_OPS_HPP_
