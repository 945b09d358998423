#pragma once

// Differentiable operations on Tensor. Every op validates its contract,
// computes the forward value, and (when a tape is active and an input
// requires grad) records a local gradient rule.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "transfollower/tensor.hpp"

namespace transfollower {

namespace detail {

// out(+)= a[m x k] * b[k x n], i-p-j order so the inner loop is contiguous.
inline void mm(const double* a, std::size_t m, std::size_t k, const double* b,
               std::size_t n, double* out) {
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = out + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = arow[p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
}

// out(+)= c[m x n] * b^T where b is [k x n]; result [m x k].
inline void mm_bt(const double* c, std::size_t m, std::size_t n, const double* b,
                  std::size_t k, double* out) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* crow = c + i * n;
    double* orow = out + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = b + p * n;
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += crow[j] * brow[j];
      orow[p] += acc;
    }
  }
}

// out(+)= a^T * c where a is [m x k], c is [m x n]; result [k x n].
inline void mm_at(const double* a, std::size_t m, std::size_t k, const double* c,
                  std::size_t n, double* out) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = arow[p];
      double* orow = out + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * crow[j];
    }
  }
}

inline void require_2d(const Tensor& t, const char* op) {
  if (t.ndim() != 2)
    throw std::invalid_argument(std::string(op) + ": expected 2-D tensor, got " +
                                shape_str(t.shape()));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_2d(a, "matmul");
  detail::require_2d(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k)
    throw std::invalid_argument("matmul: inner dimensions disagree, " +
                                detail::shape_str(a.shape()) + " x " +
                                detail::shape_str(b.shape()));
  Tensor out(Shape{m, n});
  detail::mm(a.values().data(), m, k, b.values().data(), n, out.values().data());
  TFL_DASSERT_FINITE(out.values(), "matmul forward");
  if (detail::should_record({&a, &b})) {
    Tape::current()->record(out, {a, b}, [a, b, m, k, n](const auto& dout, const auto& adj_of) {
      if (a.requires_grad())
        detail::mm_bt(dout.data(), m, n, b.values().data(), k, adj_of(a).data());
      if (b.requires_grad())
        detail::mm_at(a.values().data(), m, k, dout.data(), n, adj_of(b).data());
    });
  }
  return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  Tensor out(a.shape());
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) out(i) = a(i) + b(i);
  if (detail::should_record({&a, &b})) {
    Tape::current()->record(out, {a, b}, [a, b, n](const auto& dout, const auto& adj_of) {
      if (a.requires_grad()) {
        auto& da = adj_of(a);
        for (std::size_t i = 0; i < n; ++i) da[i] += dout[i];
      }
      if (b.requires_grad()) {
        auto& db = adj_of(b);
        for (std::size_t i = 0; i < n; ++i) db[i] += dout[i];
      }
    });
  }
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor out(a.shape());
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) out(i) = a(i) - b(i);
  if (detail::should_record({&a, &b})) {
    Tape::current()->record(out, {a, b}, [a, b, n](const auto& dout, const auto& adj_of) {
      if (a.requires_grad()) {
        auto& da = adj_of(a);
        for (std::size_t i = 0; i < n; ++i) da[i] += dout[i];
      }
      if (b.requires_grad()) {
        auto& db = adj_of(b);
        for (std::size_t i = 0; i < n; ++i) db[i] -= dout[i];
      }
    });
  }
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor out(a.shape());
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) out(i) = a(i) * b(i);
  if (detail::should_record({&a, &b})) {
    Tape::current()->record(out, {a, b}, [a, b, n](const auto& dout, const auto& adj_of) {
      if (a.requires_grad()) {
        auto& da = adj_of(a);
        for (std::size_t i = 0; i < n; ++i) da[i] += dout[i] * b(i);
      }
      if (b.requires_grad()) {
        auto& db = adj_of(b);
        for (std::size_t i = 0; i < n; ++i) db[i] += dout[i] * a(i);
      }
    });
  }
  return out;
}

inline Tensor scale(const Tensor& a, double c) {
  Tensor out(a.shape());
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) out(i) = a(i) * c;
  if (detail::should_record({&a})) {
    Tape::current()->record(out, {a}, [a, c, n](const auto& dout, const auto& adj_of) {
      auto& da = adj_of(a);
      for (std::size_t i = 0; i < n; ++i) da[i] += dout[i] * c;
    });
  }
  return out;
}

// x [p x d] plus bias row b [d], broadcast over rows.
inline Tensor add_row_bias(const Tensor& x, const Tensor& b) {
  detail::require_2d(x, "add_row_bias");
  if (b.ndim() != 1 || b.size() != x.cols())
    throw std::invalid_argument("add_row_bias: bias shape " +
                                detail::shape_str(b.shape()) + " does not match " +
                                detail::shape_str(x.shape()));
  const std::size_t p = x.rows(), d = x.cols();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < d; ++j) out(i, j) = x(i, j) + b(j);
  if (detail::should_record({&x, &b})) {
    Tape::current()->record(out, {x, b}, [x, b, p, d](const auto& dout, const auto& adj_of) {
      if (x.requires_grad()) {
        auto& dx = adj_of(x);
        for (std::size_t i = 0; i < p * d; ++i) dx[i] += dout[i];
      }
      if (b.requires_grad()) {
        auto& db = adj_of(b);
        for (std::size_t i = 0; i < p; ++i)
          for (std::size_t j = 0; j < d; ++j) db[j] += dout[i * d + j];
      }
    });
  }
  return out;
}

inline Tensor relu(const Tensor& x) {
  Tensor out(x.shape());
  const std::size_t n = x.size();
  for (std::size_t i = 0; i < n; ++i) out(i) = x(i) > 0.0 ? x(i) : 0.0;
  if (detail::should_record({&x})) {
    Tape::current()->record(out, {x}, [x, n](const auto& dout, const auto& adj_of) {
      auto& dx = adj_of(x);
      for (std::size_t i = 0; i < n; ++i)
        if (x(i) > 0.0) dx[i] += dout[i];
    });
  }
  return out;
}

inline Tensor sigmoid(const Tensor& x) {
  Tensor out(x.shape());
  const std::size_t n = x.size();
  for (std::size_t i = 0; i < n; ++i) out(i) = 1.0 / (1.0 + std::exp(-x(i)));
  if (detail::should_record({&x})) {
    Tape::current()->record(out, {x}, [x, out, n](const auto& dout, const auto& adj_of) {
      auto& dx = adj_of(x);
      for (std::size_t i = 0; i < n; ++i) {
        const double s = out(i);
        dx[i] += dout[i] * s * (1.0 - s);
      }
    });
  }
  return out;
}

inline Tensor tanh(const Tensor& x) {
  Tensor out(x.shape());
  const std::size_t n = x.size();
  for (std::size_t i = 0; i < n; ++i) out(i) = std::tanh(x(i));
  if (detail::should_record({&x})) {
    Tape::current()->record(out, {x}, [x, out, n](const auto& dout, const auto& adj_of) {
      auto& dx = adj_of(x);
      for (std::size_t i = 0; i < n; ++i) {
        const double t = out(i);
        dx[i] += dout[i] * (1.0 - t * t);
      }
    });
  }
  return out;
}

// Row-wise softmax, stabilized by subtracting the row max.
inline Tensor softmax_rows(const Tensor& x) {
  detail::require_2d(x, "softmax_rows");
  const std::size_t r = x.rows(), c = x.cols();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < r; ++i) {
    double mx = x(i, 0);
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, x(i, j));
    double sum = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double e = std::exp(x(i, j) - mx);
      out(i, j) = e;
      sum += e;
    }
    const double inv = 1.0 / sum;
    for (std::size_t j = 0; j < c; ++j) out(i, j) *= inv;
  }
  TFL_DASSERT_FINITE(out.values(), "softmax_rows forward");
  if (detail::should_record({&x})) {
    Tape::current()->record(out, {x}, [x, out, r, c](const auto& dout, const auto& adj_of) {
      auto& dx = adj_of(x);
      for (std::size_t i = 0; i < r; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < c; ++j) dot += dout[i * c + j] * out(i, j);
        for (std::size_t j = 0; j < c; ++j)
          dx[i * c + j] += out(i, j) * (dout[i * c + j] - dot);
      }
    });
  }
  return out;
}

// Per-row layer normalization with scalar gain/shift and population variance.
// Accepts a 1-D tensor (treated as one row) or a 2-D tensor.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-5) {
  if (gamma.size() != 1 || beta.size() != 1)
    throw std::invalid_argument("layer_norm: gamma and beta must be scalars");
  const std::size_t r = x.ndim() == 1 ? 1 : x.rows();
  const std::size_t d = x.ndim() == 1 ? x.size() : x.cols();
  if (d < 1) throw std::invalid_argument("layer_norm: empty vectors");
  const double g = gamma.value(), b = beta.value();

  Tensor out(x.shape());
  std::vector<double> xhat(r * d);
  std::vector<double> inv_sigma(r);
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = x.values().data() + i * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = row[j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_sigma[i] = inv;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mean) * inv;
      xhat[i * d + j] = h;
      out(i * d + j) = g * h + b;
    }
  }
  TFL_DASSERT_FINITE(out.values(), "layer_norm forward");
  if (detail::should_record({&x, &gamma, &beta})) {
    Tape::current()->record(
        out, {x, gamma, beta},
        [x, gamma, beta, xhat = std::move(xhat), inv_sigma = std::move(inv_sigma), r, d,
         g](const auto& dout, const auto& adj_of) {
          if (beta.requires_grad()) {
            double acc = 0.0;
            for (std::size_t i = 0; i < r * d; ++i) acc += dout[i];
            adj_of(beta)[0] += acc;
          }
          if (gamma.requires_grad()) {
            double acc = 0.0;
            for (std::size_t i = 0; i < r * d; ++i) acc += dout[i] * xhat[i];
            adj_of(gamma)[0] += acc;
          }
          if (x.requires_grad()) {
            auto& dx = adj_of(x);
            for (std::size_t i = 0; i < r; ++i) {
              const double* dy = dout.data() + i * d;
              const double* h = xhat.data() + i * d;
              double mean_dy = 0.0, mean_dyh = 0.0;
              for (std::size_t j = 0; j < d; ++j) {
                mean_dy += dy[j];
                mean_dyh += dy[j] * h[j];
              }
              mean_dy /= static_cast<double>(d);
              mean_dyh /= static_cast<double>(d);
              const double s = g * inv_sigma[i];
              for (std::size_t j = 0; j < d; ++j)
                dx[i * d + j] += s * (dy[j] - mean_dy - h[j] * mean_dyh);
            }
          }
        });
  }
  return out;
}

inline Tensor transpose(const Tensor& x) {
  detail::require_2d(x, "transpose");
  const std::size_t r = x.rows(), c = x.cols();
  Tensor out(Shape{c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out(j, i) = x(i, j);
  if (detail::should_record({&x})) {
    Tape::current()->record(out, {x}, [x, r, c](const auto& dout, const auto& adj_of) {
      auto& dx = adj_of(x);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) dx[i * c + j] += dout[j * r + i];
    });
  }
  return out;
}

// Concatenate along the first axis. Both 1-D (vectors) and 2-D (rows).
inline Tensor concat_rows(const Tensor& a, const Tensor& b) {
  if (a.ndim() != b.ndim() || a.ndim() < 1 || a.ndim() > 2 ||
      (a.ndim() == 2 && a.cols() != b.cols()))
    throw std::invalid_argument("concat_rows: incompatible shapes " +
                                detail::shape_str(a.shape()) + " and " +
                                detail::shape_str(b.shape()));
  Shape shape = a.shape();
  shape[0] += b.shape()[0];
  Tensor out(shape);
  std::copy(a.values().begin(), a.values().end(), out.values().begin());
  std::copy(b.values().begin(), b.values().end(), out.values().begin() + a.size());
  if (detail::should_record({&a, &b})) {
    const std::size_t na = a.size(), nb = b.size();
    Tape::current()->record(out, {a, b}, [a, b, na, nb](const auto& dout, const auto& adj_of) {
      if (a.requires_grad()) {
        auto& da = adj_of(a);
        for (std::size_t i = 0; i < na; ++i) da[i] += dout[i];
      }
      if (b.requires_grad()) {
        auto& db = adj_of(b);
        for (std::size_t i = 0; i < nb; ++i) db[i] += dout[na + i];
      }
    });
  }
  return out;
}

// Rows [begin, end) of a 2-D tensor, or the element range of a 1-D tensor.
inline Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  const std::size_t r = x.ndim() == 1 ? x.size() : x.rows();
  if (begin >= end || end > r)
    throw std::invalid_argument("slice_rows: range [" + std::to_string(begin) + ", " +
                                std::to_string(end) + ") out of bounds for " +
                                detail::shape_str(x.shape()));
  const std::size_t c = x.ndim() == 1 ? 1 : x.cols();
  Shape shape = x.shape();
  shape[0] = end - begin;
  Tensor out(shape);
  std::copy(x.values().begin() + begin * c, x.values().begin() + end * c,
            out.values().begin());
  if (detail::should_record({&x})) {
    Tape::current()->record(out, {x}, [x, begin, c, n = (end - begin) * c](
                                          const auto& dout, const auto& adj_of) {
      auto& dx = adj_of(x);
      for (std::size_t i = 0; i < n; ++i) dx[begin * c + i] += dout[i];
    });
  }
  return out;
}

// Columns [begin, end) of a 2-D tensor.
inline Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
  detail::require_2d(x, "slice_cols");
  if (begin >= end || end > x.cols())
    throw std::invalid_argument("slice_cols: range [" + std::to_string(begin) + ", " +
                                std::to_string(end) + ") out of bounds for " +
                                detail::shape_str(x.shape()));
  const std::size_t r = x.rows(), c = x.cols(), w = end - begin;
  Tensor out(Shape{r, w});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < w; ++j) out(i, j) = x(i, begin + j);
  if (detail::should_record({&x})) {
    Tape::current()->record(out, {x}, [x, begin, r, c, w](const auto& dout, const auto& adj_of) {
      auto& dx = adj_of(x);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < w; ++j) dx[i * c + begin + j] += dout[i * w + j];
    });
  }
  return out;
}

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (detail::shape_numel(shape) != x.size())
    throw std::invalid_argument("reshape: cannot view " + detail::shape_str(x.shape()) +
                                " as " + detail::shape_str(shape));
  Tensor out(std::move(shape), x.values());
  if (detail::should_record({&x})) {
    Tape::current()->record(out, {x}, [x](const auto& dout, const auto& adj_of) {
      auto& dx = adj_of(x);
      for (std::size_t i = 0; i < dout.size(); ++i) dx[i] += dout[i];
    });
  }
  return out;
}

inline Tensor sum_all(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  Tensor out = Tensor::scalar(acc);
  if (detail::should_record({&x})) {
    Tape::current()->record(out, {x}, [x](const auto& dout, const auto& adj_of) {
      auto& dx = adj_of(x);
      for (double& g : dx) g += dout[0];
    });
  }
  return out;
}

inline Tensor mean_all(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  const double inv = 1.0 / static_cast<double>(x.size());
  Tensor out = Tensor::scalar(acc * inv);
  if (detail::should_record({&x})) {
    Tape::current()->record(out, {x}, [x, inv](const auto& dout, const auto& adj_of) {
      auto& dx = adj_of(x);
      for (double& g : dx) g += dout[0] * inv;
    });
  }
  return out;
}

// Inverted dropout. In training mode each element is kept with probability
// 1-p (one uniform draw per element, row-major order) and scaled by 1/(1-p);
// in eval mode the input tensor is returned unchanged.
inline Tensor dropout(const Tensor& x, double p, Rng& rng, bool training) {
  if (p < 0.0 || p >= 1.0)
    throw std::invalid_argument("dropout: probability must be in [0, 1), got " +
                                std::to_string(p));
  if (!training || p == 0.0) return x;
  const std::size_t n = x.size();
  const double keep = 1.0 - p;
  const double inv_keep = 1.0 / keep;
  std::vector<double> mask(n);
  for (std::size_t i = 0; i < n; ++i)
    mask[i] = rng.uniform01() < keep ? inv_keep : 0.0;
  Tensor out(x.shape());
  for (std::size_t i = 0; i < n; ++i) out(i) = x(i) * mask[i];
  if (detail::should_record({&x})) {
    Tape::current()->record(out, {x},
                            [x, mask = std::move(mask), n](const auto& dout, const auto& adj_of) {
                              auto& dx = adj_of(x);
                              for (std::size_t i = 0; i < n; ++i) dx[i] += dout[i] * mask[i];
                            });
  }
  return out;
}

// Gather rows of an embedding table; gradients scatter-add back into the rows.
inline Tensor embedding_rows(const Tensor& table, const std::vector<std::size_t>& positions) {
  detail::require_2d(table, "embedding_rows");
  const std::size_t v = table.rows(), d = table.cols();
  for (std::size_t pos : positions)
    if (pos >= v)
      throw std::invalid_argument("embedding_rows: position " + std::to_string(pos) +
                                  " outside table of size " + std::to_string(v));
  Tensor out(Shape{positions.size(), d});
  for (std::size_t i = 0; i < positions.size(); ++i)
    std::copy_n(table.values().begin() + positions[i] * d, d,
                out.values().begin() + i * d);
  if (detail::should_record({&table})) {
    Tape::current()->record(out, {table},
                            [table, positions, d](const auto& dout, const auto& adj_of) {
                              auto& dt = adj_of(table);
                              for (std::size_t i = 0; i < positions.size(); ++i)
                                for (std::size_t j = 0; j < d; ++j)
                                  dt[positions[i] * d + j] += dout[i * d + j];
                            });
  }
  return out;
}

}  // namespace transfollower
