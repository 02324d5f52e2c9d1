#pragma once

#include <Eigen/Core>

#ifdef __AVX512F__
#include <immintrin.h>
#endif

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "mmrec/autodiff/tape.hpp"
#include "mmrec/errors.hpp"
#include "mmrec/tensor.hpp"

namespace mmrec {

// Per-position validity flags; an empty mask means "all valid".
using Mask = std::vector<std::uint8_t>;

// Half-open row range [begin, end).
struct Segment {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
};

// Rows `queries` of Q attend over rows `keys` of K/V.
struct AttentionBlock {
  Segment queries;
  Segment keys;
};

namespace detail {

template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using ConstMap = Eigen::Map<const RowMatrix<T>>;
template <class T>
using MutMap = Eigen::Map<RowMatrix<T>>;

inline bool is_valid(const Mask& mask, std::size_t i) { return mask.empty() || mask[i] != 0; }

template <class T>
inline void require_same_shape(const BasicVar<T>& a, const BasicVar<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

template <class T>
inline void require_rank(const BasicVar<T>& a, std::size_t rank, const char* op) {
  if (a.shape().size() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_string(a.shape()));
  }
}

inline void require_mask(const Mask& mask, std::size_t n, const char* op) {
  if (!mask.empty() && mask.size() != n) {
    throw DimensionError(std::string(op) + ": mask length " + std::to_string(mask.size()) +
                         " does not match " + std::to_string(n) + " positions");
  }
}

// out[i] = softmax over valid positions of x; masked positions are exactly 0.
// Returns false when no position is valid.
template <class T>
inline bool softmax_kernel(const T* x, const Mask& mask, std::size_t offset, std::size_t n,
                           T* out) {
  T max_logit = -std::numeric_limits<T>::infinity();
  bool any = false;
  for (std::size_t i = 0; i < n; ++i) {
    if (is_valid(mask, offset + i)) {
      max_logit = std::max(max_logit, x[i]);
      any = true;
    }
  }
  if (!any) return false;
  T total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (is_valid(mask, offset + i)) {
      out[i] = std::exp(x[i] - max_logit);
      total += out[i];
    } else {
      out[i] = 0.0;
    }
  }
  const T inv = 1.0 / total;
  for (std::size_t i = 0; i < n; ++i) out[i] *= inv;
  return true;
}

// dx[i] += p[i] * (dy[i] - sum_j p[j] dy[j])
template <class T>
inline void softmax_backward_kernel(const T* p, const T* dy, std::size_t n, T* dx) {
  T inner = 0.0;
  for (std::size_t i = 0; i < n; ++i) inner += p[i] * dy[i];
  for (std::size_t i = 0; i < n; ++i) dx[i] += p[i] * (dy[i] - inner);
}

template <class T>
constexpr T kGeluC = static_cast<T>(0.044715L);
template <class T>
constexpr T kSqrt2OverPi = static_cast<T>(0.797884560802865355879892119868763737L);  // sqrt(2 / pi)

struct MatmulDims {
  std::size_t m, k, n;
  Shape out;
};

#ifdef __AVX512F__
// R rows x 32 columns of C = A B, accumulated in registers. Eigen packs both
// operands on every call, which dominates at the 3-8 row products used here.
template <int R>
inline void gemm_block(const double* a, std::size_t k, const double* b, std::size_t n, double* c) {
  __m512d acc[R][4];
  for (int r = 0; r < R; ++r) {
    for (int q = 0; q < 4; ++q) acc[r][q] = _mm512_setzero_pd();
  }
  for (std::size_t p = 0; p < k; ++p) {
    const double* bp = b + p * n;
    const __m512d b0 = _mm512_loadu_pd(bp), b1 = _mm512_loadu_pd(bp + 8);
    const __m512d b2 = _mm512_loadu_pd(bp + 16), b3 = _mm512_loadu_pd(bp + 24);
    for (int r = 0; r < R; ++r) {
      const __m512d av = _mm512_set1_pd(a[r * k + p]);
      acc[r][0] = _mm512_fmadd_pd(av, b0, acc[r][0]);
      acc[r][1] = _mm512_fmadd_pd(av, b1, acc[r][1]);
      acc[r][2] = _mm512_fmadd_pd(av, b2, acc[r][2]);
      acc[r][3] = _mm512_fmadd_pd(av, b3, acc[r][3]);
    }
  }
  for (int r = 0; r < R; ++r) {
    for (int q = 0; q < 4; ++q) _mm512_storeu_pd(c + r * n + 8 * q, acc[r][q]);
  }
}

inline void gemm_small(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  const std::size_t wide = n - n % 32;
  for (std::size_t j = 0; j < wide; j += 32) {
    std::size_t i = 0;
    for (; i + 4 <= m; i += 4) gemm_block<4>(a + i * k, k, b + j, n, c + i * n + j);
    switch (m - i) {
      case 3: gemm_block<3>(a + i * k, k, b + j, n, c + i * n + j); break;
      case 2: gemm_block<2>(a + i * k, k, b + j, n, c + i * n + j); break;
      case 1: gemm_block<1>(a + i * k, k, b + j, n, c + i * n + j); break;
      default: break;
    }
  }
  if (wide < n) {
    MutMap<double>(c, m, n).rightCols(n - wide).noalias() =
        ConstMap<double>(a, m, k) * ConstMap<double>(b, k, n).rightCols(n - wide);
  }
}
#endif

template <class T>
inline void gemm(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
#ifdef __AVX512F__
  if constexpr (std::is_same_v<T, double>) {
    if (m <= 16 && n >= 32) return gemm_small(a, b, c, m, k, n);
  }
#endif
  MutMap<T>(c, m, n).noalias() = ConstMap<T>(a, m, k) * ConstMap<T>(b, k, n);
}

// C = A[m x k] * B[n x k]^T.
template <class T>
inline void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  MutMap<T>(c, m, n).noalias() = ConstMap<T>(a, m, k) * ConstMap<T>(b, n, k).transpose();
}

template <class T>
inline MatmulDims matmul_dims(const BasicVar<T>& a, const BasicVar<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() > 2 || sb.size() > 2 || (sa.size() == 1 && sb.size() == 1)) {
    throw DimensionError("matmul: unsupported operand ranks " + shape_string(sa) + " x " +
                         shape_string(sb));
  }
  const std::size_t m = sa.size() == 1 ? 1 : sa[0];
  const std::size_t k = sa.size() == 1 ? sa[0] : sa[1];
  const std::size_t kb = sb[0];
  const std::size_t n = sb.size() == 1 ? 1 : sb[1];
  if (k != kb) {
    throw DimensionError("matmul: inner extents differ for " + shape_string(sa) + " x " +
                         shape_string(sb));
  }
  Shape out;
  if (sa.size() == 1) {
    out = {n};
  } else if (sb.size() == 1) {
    out = {m};
  } else {
    out = {m, n};
  }
  return {m, k, n, out};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

// Matrix product. A rank-1 left operand is a row vector, a rank-1 right
// operand a column vector; the corresponding output axis is dropped.
template <class T>
inline BasicVar<T> matmul(BasicVar<T> a, BasicVar<T> b) {
  const auto dims = detail::matmul_dims(a, b);
  const std::size_t ai = a.id(), bi = b.id(), m = dims.m, k = dims.k, n = dims.n;
  return a.tape().record(
      dims.out, {a, b},
      [=](BasicTape<T>& t, std::size_t o) { detail::gemm(t.value(ai), t.value(bi), t.mutable_value(o), m, k, n); },
      [=](BasicTape<T>& t, std::size_t o) {
        detail::ConstMap<T> dc(t.grad(o), m, n);
        if (T* ga = t.grad(ai)) {
          detail::MutMap<T>(ga, m, k).noalias() += dc * detail::ConstMap<T>(t.value(bi), k, n).transpose();
        }
        if (T* gb = t.grad(bi)) {
          detail::MutMap<T>(gb, k, n).noalias() += detail::ConstMap<T>(t.value(ai), m, k).transpose() * dc;
        }
      });
}

// a[m x k] times the transpose of b[n x k].
template <class T>
inline BasicVar<T> matmul_nt(BasicVar<T> a, BasicVar<T> b) {
  detail::require_rank(a, 2, "matmul_nt");
  detail::require_rank(b, 2, "matmul_nt");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
  if (b.shape()[1] != k) {
    throw DimensionError("matmul_nt: inner extents differ for " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()) + "^T");
  }
  const std::size_t ai = a.id(), bi = b.id();
  return a.tape().record(
      {m, n}, {a, b},
      [=](BasicTape<T>& t, std::size_t o) { detail::gemm_nt(t.value(ai), t.value(bi), t.mutable_value(o), m, k, n); },
      [=](BasicTape<T>& t, std::size_t o) {
        detail::ConstMap<T> dc(t.grad(o), m, n);
        if (T* ga = t.grad(ai)) {
          detail::MutMap<T>(ga, m, k).noalias() += dc * detail::ConstMap<T>(t.value(bi), n, k);
        }
        if (T* gb = t.grad(bi)) {
          detail::MutMap<T>(gb, n, k).noalias() += dc.transpose() * detail::ConstMap<T>(t.value(ai), m, k);
        }
      });
}

// x[n x in] * w[in x out] (+ bias[out] on every row).
template <class T>
inline BasicVar<T> linear(BasicVar<T> x, BasicVar<T> w, const BasicVar<T>* bias = nullptr) {
  detail::require_rank(x, 2, "linear");
  detail::require_rank(w, 2, "linear");
  const std::size_t n = x.shape()[0], in = x.shape()[1], out = w.shape()[1];
  if (w.shape()[0] != in) {
    throw DimensionError("linear: input " + shape_string(x.shape()) + " does not fit weight " +
                         shape_string(w.shape()));
  }
  if (bias && bias->shape() != Shape{out}) {
    throw DimensionError("linear: bias " + shape_string(bias->shape()) + " does not fit weight " +
                         shape_string(w.shape()));
  }
  const std::size_t xi = x.id(), wi = w.id();
  const bool has_bias = bias != nullptr;
  const std::size_t bi = has_bias ? bias->id() : 0;
  std::vector<BasicVar<T>> inputs{x, w};
  if (has_bias) inputs.push_back(*bias);
  return x.tape().record(
      {n, out}, inputs,
      [=](BasicTape<T>& t, std::size_t o) {
        detail::gemm(t.value(xi), t.value(wi), t.mutable_value(o), n, in, out);
        detail::MutMap<T> y(t.mutable_value(o), n, out);
        if (has_bias) y.rowwise() += detail::ConstMap<T>(t.value(bi), 1, out).row(0);
      },
      [=](BasicTape<T>& t, std::size_t o) {
        detail::ConstMap<T> dy(t.grad(o), n, out);
        if (T* gx = t.grad(xi)) {
          detail::MutMap<T>(gx, n, in).noalias() += dy * detail::ConstMap<T>(t.value(wi), in, out).transpose();
        }
        if (T* gw = t.grad(wi)) {
          detail::MutMap<T>(gw, in, out).noalias() += detail::ConstMap<T>(t.value(xi), n, in).transpose() * dy;
        }
        // Plain loop: Eigen's vectorized column sums peel by pointer
        // alignment, which makes the rounding differ from run to run.
        if (T* gb = has_bias ? t.grad(bi) : nullptr) {
          const T* g = t.grad(o);
          for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t c = 0; c < out; ++c) gb[c] += g[r * out + c];
          }
        }
      });
}

template <class T>
inline BasicVar<T> linear(BasicVar<T> x, BasicVar<T> w, BasicVar<T> bias) { return linear(x, w, &bias); }

// Scalar dot product of two equally-shaped tensors.
template <class T>
inline BasicVar<T> dot(BasicVar<T> a, BasicVar<T> b) {
  detail::require_same_shape(a, b, "dot");
  const std::size_t ai = a.id(), bi = b.id(), n = a.size();
  return a.tape().record(
      {1}, {a, b},
      [=](BasicTape<T>& t, std::size_t o) {
        const T* x = t.value(ai);
        const T* y = t.value(bi);
        T s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += x[i] * y[i];
        t.mutable_value(o)[0] = s;
      },
      [=](BasicTape<T>& t, std::size_t o) {
        const T g = t.grad(o)[0];
        if (T* ga = t.grad(ai)) {
          const T* y = t.value(bi);
          for (std::size_t i = 0; i < n; ++i) ga[i] += g * y[i];
        }
        if (T* gb = t.grad(bi)) {
          const T* x = t.value(ai);
          for (std::size_t i = 0; i < n; ++i) gb[i] += g * x[i];
        }
      });
}

template <class T>
inline BasicVar<T> sum(BasicVar<T> x) {
  const std::size_t xi = x.id(), n = x.size();
  return x.tape().record(
      {1}, {x},
      [=](BasicTape<T>& t, std::size_t o) {
        const T* v = t.value(xi);
        T s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += v[i];
        t.mutable_value(o)[0] = s;
      },
      [=](BasicTape<T>& t, std::size_t o) {
        const T g = t.grad(o)[0];
        if (T* gx = t.grad(xi)) {
          for (std::size_t i = 0; i < n; ++i) gx[i] += g;
        }
      });
}

// ---------------------------------------------------------------------------
// Elementwise

namespace detail {

template <class T, typename Fn, typename Dfn>
BasicVar<T> binary(BasicVar<T> a, BasicVar<T> b, const char* name, Fn fn, Dfn dfn) {
  require_same_shape(a, b, name);
  const std::size_t ai = a.id(), bi = b.id(), n = a.size();
  return a.tape().record(
      a.shape(), {a, b},
      [=](BasicTape<T>& t, std::size_t o) {
        const T* x = t.value(ai);
        const T* y = t.value(bi);
        T* z = t.mutable_value(o);
        for (std::size_t i = 0; i < n; ++i) z[i] = fn(x[i], y[i]);
      },
      [=](BasicTape<T>& t, std::size_t o) {
        const T* x = t.value(ai);
        const T* y = t.value(bi);
        const T* g = t.grad(o);
        T* ga = t.grad(ai);
        T* gb = t.grad(bi);
        for (std::size_t i = 0; i < n; ++i) {
          const auto [da, db] = dfn(x[i], y[i]);
          if (ga) ga[i] += g[i] * da;
          if (gb) gb[i] += g[i] * db;
        }
      });
}

// `dfn(x, y)` returns dy/dx given input x and output y.
template <class T, typename Fn, typename Dfn>
BasicVar<T> unary(BasicVar<T> a, Fn fn, Dfn dfn) {
  const std::size_t ai = a.id(), n = a.size();
  return a.tape().record(
      a.shape(), {a},
      [=](BasicTape<T>& t, std::size_t o) {
        const T* x = t.value(ai);
        T* y = t.mutable_value(o);
        for (std::size_t i = 0; i < n; ++i) y[i] = fn(x[i]);
      },
      [=](BasicTape<T>& t, std::size_t o) {
        T* ga = t.grad(ai);
        if (!ga) return;
        const T* x = t.value(ai);
        const T* y = t.value(o);
        const T* g = t.grad(o);
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * dfn(x[i], y[i]);
      });
}

template <class T>
struct Pair {
  T a, b;
};

}  // namespace detail

template <class T>
inline BasicVar<T> add(BasicVar<T> a, BasicVar<T> b) {
  return detail::binary(a, b, "add", [](T x, T y) { return x + y; },
                        [](T, T) { return detail::Pair<T>{1.0, 1.0}; });
}

template <class T>
inline BasicVar<T> sub(BasicVar<T> a, BasicVar<T> b) {
  return detail::binary(a, b, "sub", [](T x, T y) { return x - y; },
                        [](T, T) { return detail::Pair<T>{1.0, -1.0}; });
}

template <class T>
inline BasicVar<T> mul(BasicVar<T> a, BasicVar<T> b) {
  return detail::binary(a, b, "mul", [](T x, T y) { return x * y; },
                        [](T x, T y) { return detail::Pair<T>{y, x}; });
}

template <class T>
inline BasicVar<T> scale(BasicVar<T> a, double c) {
  return detail::unary(a, [c](T x) { return c * x; }, [c](T, T) { return c; });
}

template <class T>
inline BasicVar<T> relu(BasicVar<T> a) {
  return detail::unary(a, [](T x) { return x > 0.0 ? x : 0.0; },
                       [](T x, T) { return x > 0.0 ? 1.0 : 0.0; });
}

template <class T>
inline BasicVar<T> tanh(BasicVar<T> a) {
  return detail::unary(a, [](T x) { return std::tanh(x); },
                       [](T, T y) { return 1.0 - y * y; });
}

// GELU, tanh approximation:
//   gelu(x) = 0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x^3)))
// evaluated through the identity 0.5 * (1 + tanh(z)) = 1 / (1 + exp(-2z)).
template <class T>
inline BasicVar<T> gelu(BasicVar<T> a) {
  // Fixed 64-element aligned blocks, so every element takes the same (packet)
  // exp path whatever the alignment of the tape buffers.
  constexpr std::size_t kBlock = 64;
  using Block = Eigen::Array<T, kBlock, 1>;
  using BlockMap = Eigen::Map<Block, Eigen::Aligned64>;
  const T c = detail::kSqrt2OverPi<T>, c3 = detail::kSqrt2OverPi<T> * detail::kGeluC<T>;
  const std::size_t ai = a.id(), n = a.size();
  return a.tape().record(
      a.shape(), {a},
      [=](BasicTape<T>& t, std::size_t o) {
        alignas(64) T xb[kBlock], yb[kBlock];
        const T* x = t.value(ai);
        T* y = t.mutable_value(o);
        for (std::size_t off = 0; off < n; off += kBlock) {
          const std::size_t m = std::min(kBlock, n - off);
          std::copy(x + off, x + off + m, xb);
          std::fill(xb + m, xb + kBlock, T(0));
          BlockMap xs(xb), ys(yb);
          ys = xs / (T(1) + (T(-2) * xs * (c + c3 * xs.square())).exp());
          std::copy(yb, yb + m, y + off);
        }
      },
      [=](BasicTape<T>& t, std::size_t o) {
        T* ga = t.grad(ai);
        if (!ga) return;
        alignas(64) T xb[kBlock], gb[kBlock], db[kBlock];
        const T* x = t.value(ai);
        const T* gy = t.grad(o);
        for (std::size_t off = 0; off < n; off += kBlock) {
          const std::size_t m = std::min(kBlock, n - off);
          std::copy(x + off, x + off + m, xb);
          std::fill(xb + m, xb + kBlock, T(0));
          std::copy(gy + off, gy + off + m, gb);
          std::fill(gb + m, gb + kBlock, T(0));
          BlockMap xs(xb), gs(gb), ds(db);
          const Block s = T(1) / (T(1) + (T(-2) * xs * (c + c3 * xs.square())).exp());
          ds = gs * (s + T(2) * xs * s * (T(1) - s) * (c + T(3) * c3 * xs.square()));
          for (std::size_t k = 0; k < m; ++k) ga[off + k] += db[k];
        }
      });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <class T>
inline BasicVar<T> reshape(BasicVar<T> x, Shape shape) {
  if (num_elements(shape) != x.size()) {
    throw DimensionError("reshape: cannot view " + shape_string(x.shape()) + " as " + shape_string(shape));
  }
  const std::size_t xi = x.id(), n = x.size();
  return x.tape().record(
      std::move(shape), {x},
      [=](BasicTape<T>& t, std::size_t o) { std::copy_n(t.value(xi), n, t.mutable_value(o)); },
      [=](BasicTape<T>& t, std::size_t o) {
        if (T* gx = t.grad(xi)) {
          const T* g = t.grad(o);
          for (std::size_t i = 0; i < n; ++i) gx[i] += g[i];
        }
      });
}

template <class T>
inline BasicVar<T> transpose(BasicVar<T> x) {
  detail::require_rank(x, 2, "transpose");
  const std::size_t r = x.shape()[0], c = x.shape()[1], xi = x.id();
  return x.tape().record(
      {c, r}, {x},
      [=](BasicTape<T>& t, std::size_t o) {
        detail::MutMap<T>(t.mutable_value(o), c, r) = detail::ConstMap<T>(t.value(xi), r, c).transpose();
      },
      [=](BasicTape<T>& t, std::size_t o) {
        if (T* gx = t.grad(xi)) {
          detail::MutMap<T>(gx, r, c) += detail::ConstMap<T>(t.grad(o), c, r).transpose();
        }
      });
}

// Stacks 2-D tensors with equal column counts (or concatenates 1-D tensors).
template <class T>
inline BasicVar<T> concat_rows(std::span<const BasicVar<T>> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const Shape& first = parts[0].shape();
  std::size_t rows = 0;
  std::vector<std::size_t> ids, sizes;
  for (const BasicVar<T>& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != first.size() || (s.size() == 2 && s[1] != first[1]) || s.size() > 2) {
      throw DimensionError("concat_rows: incompatible shapes " + shape_string(first) + " and " +
                           shape_string(s));
    }
    rows += s[0];
    ids.push_back(p.id());
    sizes.push_back(p.size());
  }
  Shape out = first;
  out[0] = rows;
  return parts[0].tape().record(
      std::move(out), parts,
      [=](BasicTape<T>& t, std::size_t o) {
        T* y = t.mutable_value(o);
        for (std::size_t p = 0; p < ids.size(); ++p) {
          std::copy_n(t.value(ids[p]), sizes[p], y);
          y += sizes[p];
        }
      },
      [=](BasicTape<T>& t, std::size_t o) {
        const T* g = t.grad(o);
        for (std::size_t p = 0; p < ids.size(); ++p) {
          if (T* gp = t.grad(ids[p])) {
            for (std::size_t i = 0; i < sizes[p]; ++i) gp[i] += g[i];
          }
          g += sizes[p];
        }
      });
}

template <class T>
inline BasicVar<T> concat_rows(const std::vector<BasicVar<T>>& parts) {
  return concat_rows(std::span<const BasicVar<T>>(parts));
}

template <class T>
inline BasicVar<T> concat_rows(std::initializer_list<BasicVar<T>> parts) {
  return concat_rows(std::span<const BasicVar<T>>(parts.begin(), parts.size()));
}

// Rows [begin, end) of a 2-D tensor (elements of a 1-D tensor).
template <class T>
inline BasicVar<T> slice_rows(BasicVar<T> x, std::size_t begin, std::size_t end) {
  const Shape& s = x.shape();
  if (begin > end || end > s[0]) {
    throw DimensionError("slice_rows: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") outside " + shape_string(s));
  }
  const std::size_t width = x.size() / std::max<std::size_t>(s[0], 1);
  Shape out = s;
  out[0] = end - begin;
  const std::size_t xi = x.id(), off = begin * width, n = (end - begin) * width;
  return x.tape().record(
      std::move(out), {x},
      [=](BasicTape<T>& t, std::size_t o) { std::copy_n(t.value(xi) + off, n, t.mutable_value(o)); },
      [=](BasicTape<T>& t, std::size_t o) {
        if (T* gx = t.grad(xi)) {
          const T* g = t.grad(o);
          for (std::size_t i = 0; i < n; ++i) gx[off + i] += g[i];
        }
      });
}

// Row gather. Gradients are scatter-added in index order.
template <class T>
inline BasicVar<T> gather_rows(BasicVar<T> table, std::vector<std::size_t> ids) {
  const Shape& s = table.shape();
  const std::size_t width = s.size() == 1 ? 1 : s[1];
  for (std::size_t id : ids) {
    if (id >= s[0]) throw VocabularyError(static_cast<long long>(id), s[0]);
  }
  Shape out = s;
  out[0] = ids.size();
  const std::size_t ti = table.id();
  auto shared = std::make_shared<const std::vector<std::size_t>>(std::move(ids));
  return table.tape().record(
      std::move(out), {table},
      [=](BasicTape<T>& t, std::size_t o) {
        const T* src = t.value(ti);
        T* y = t.mutable_value(o);
        for (std::size_t r = 0; r < shared->size(); ++r) {
          std::copy_n(src + (*shared)[r] * width, width, y + r * width);
        }
      },
      [=](BasicTape<T>& t, std::size_t o) {
        T* gt = t.grad(ti);
        if (!gt) return;
        const T* g = t.grad(o);
        for (std::size_t r = 0; r < shared->size(); ++r) {
          T* dst = gt + (*shared)[r] * width;
          for (std::size_t c = 0; c < width; ++c) dst[c] += g[r * width + c];
        }
      });
}

// Token embedding lookup; rejects ids outside [0, V).
template <class T>
inline BasicVar<T> embedding_lookup(BasicVar<T> table, std::span<const long long> ids) {
  detail::require_rank(table, 2, "embedding_lookup");
  std::vector<std::size_t> rows;
  rows.reserve(ids.size());
  for (long long id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= table.shape()[0]) {
      throw VocabularyError(id, table.shape()[0]);
    }
    rows.push_back(static_cast<std::size_t>(id));
  }
  return gather_rows(table, std::move(rows));
}

// Zeroes the rows whose mask entry is 0.
template <class T>
inline BasicVar<T> mask_rows(BasicVar<T> x, const Mask& mask) {
  detail::require_rank(x, 2, "mask_rows");
  const std::size_t rows = x.shape()[0], width = x.shape()[1], xi = x.id();
  detail::require_mask(mask, rows, "mask_rows");
  return x.tape().record(
      x.shape(), {x},
      [=](BasicTape<T>& t, std::size_t o) {
        const T* v = t.value(xi);
        T* y = t.mutable_value(o);
        for (std::size_t r = 0; r < rows; ++r) {
          const bool keep = detail::is_valid(mask, r);
          for (std::size_t c = 0; c < width; ++c) y[r * width + c] = keep ? v[r * width + c] : 0.0;
        }
      },
      [=](BasicTape<T>& t, std::size_t o) {
        T* gx = t.grad(xi);
        if (!gx) return;
        const T* g = t.grad(o);
        for (std::size_t r = 0; r < rows; ++r) {
          if (!detail::is_valid(mask, r)) continue;
          for (std::size_t c = 0; c < width; ++c) gx[r * width + c] += g[r * width + c];
        }
      });
}

// Replaces every row whose flag is set with `row` (shape [d]).
template <class T>
inline BasicVar<T> override_rows(BasicVar<T> x, BasicVar<T> row, const Mask& flags) {
  detail::require_rank(x, 2, "override_rows");
  const std::size_t rows = x.shape()[0], width = x.shape()[1];
  if (row.shape() != Shape{width}) {
    throw DimensionError("override_rows: row " + shape_string(row.shape()) + " does not fit " +
                         shape_string(x.shape()));
  }
  if (flags.size() != rows) throw DimensionError("override_rows: flag count does not match rows");
  const std::size_t xi = x.id(), ri = row.id();
  return x.tape().record(
      x.shape(), {x, row},
      [=](BasicTape<T>& t, std::size_t o) {
        const T* v = t.value(xi);
        const T* p = t.value(ri);
        T* y = t.mutable_value(o);
        for (std::size_t r = 0; r < rows; ++r) {
          std::copy_n(flags[r] ? p : v + r * width, width, y + r * width);
        }
      },
      [=](BasicTape<T>& t, std::size_t o) {
        const T* g = t.grad(o);
        T* gx = t.grad(xi);
        T* gr = t.grad(ri);
        for (std::size_t r = 0; r < rows; ++r) {
          T* dst = flags[r] ? gr : gx ? gx + r * width : nullptr;
          if (!dst) continue;
          for (std::size_t c = 0; c < width; ++c) dst[c] += g[r * width + c];
        }
      });
}

// ---------------------------------------------------------------------------
// Normalization and attention

// Softmax over the valid positions of a 1-D tensor. Masked positions are
// exactly zero. Throws EmptyAttentionError if nothing is valid.
template <class T>
inline BasicVar<T> softmax_masked(BasicVar<T> x, const Mask& mask = {}) {
  detail::require_rank(x, 1, "softmax_masked");
  const std::size_t n = x.size(), xi = x.id();
  detail::require_mask(mask, n, "softmax_masked");
  if (n == 0 || (!mask.empty() && std::none_of(mask.begin(), mask.end(), [](auto m) { return m != 0; }))) {
    throw EmptyAttentionError("softmax over an empty or fully masked input");
  }
  return x.tape().record(
      x.shape(), {x},
      [=](BasicTape<T>& t, std::size_t o) { detail::softmax_kernel(t.value(xi), mask, 0, n, t.mutable_value(o)); },
      [=](BasicTape<T>& t, std::size_t o) {
        if (T* gx = t.grad(xi)) detail::softmax_backward_kernel(t.value(o), t.grad(o), n, gx);
      });
}

// Independent masked softmax inside each segment of a 1-D tensor. Positions
// outside every segment are zero.
template <class T>
inline BasicVar<T> segment_softmax(BasicVar<T> x, std::vector<Segment> segments, const Mask& mask = {}) {
  detail::require_rank(x, 1, "segment_softmax");
  const std::size_t n = x.size(), xi = x.id();
  detail::require_mask(mask, n, "segment_softmax");
  for (const Segment& s : segments) {
    if (s.end > n || s.begin > s.end) throw DimensionError("segment_softmax: segment out of range");
    bool any = false;
    for (std::size_t i = s.begin; i < s.end; ++i) any = any || detail::is_valid(mask, i);
    if (!any) throw EmptyAttentionError("segment_softmax: segment without a valid position");
  }
  auto segs = std::make_shared<const std::vector<Segment>>(std::move(segments));
  return x.tape().record(
      x.shape(), {x},
      [=](BasicTape<T>& t, std::size_t o) {
        T* y = t.mutable_value(o);
        std::fill_n(y, n, 0.0);
        const T* v = t.value(xi);
        for (const Segment& s : *segs) detail::softmax_kernel(v + s.begin, mask, s.begin, s.size(), y + s.begin);
      },
      [=](BasicTape<T>& t, std::size_t o) {
        T* gx = t.grad(xi);
        if (!gx) return;
        const T* p = t.value(o);
        const T* g = t.grad(o);
        for (const Segment& s : *segs) {
          detail::softmax_backward_kernel(p + s.begin, g + s.begin, s.size(), gx + s.begin);
        }
      });
}

// For each segment s: out[s] = sum_{i in s} w[i] * h[i, :].  Output [S x d].
template <class T>
inline BasicVar<T> segment_weighted_sum(BasicVar<T> h, BasicVar<T> w, std::vector<Segment> segments) {
  detail::require_rank(h, 2, "segment_weighted_sum");
  detail::require_rank(w, 1, "segment_weighted_sum");
  const std::size_t n = h.shape()[0], d = h.shape()[1];
  if (w.size() != n) throw DimensionError("segment_weighted_sum: weight count does not match rows");
  for (const Segment& s : segments) {
    if (s.end > n || s.begin > s.end) throw DimensionError("segment_weighted_sum: segment out of range");
  }
  const std::size_t hi = h.id(), wi = w.id(), count = segments.size();
  auto segs = std::make_shared<const std::vector<Segment>>(std::move(segments));
  return h.tape().record(
      {count, d}, {h, w},
      [=](BasicTape<T>& t, std::size_t o) {
        const T* hv = t.value(hi);
        const T* wv = t.value(wi);
        T* y = t.mutable_value(o);
        std::fill_n(y, count * d, 0.0);
        for (std::size_t k = 0; k < count; ++k) {
          const Segment& s = (*segs)[k];
          for (std::size_t i = s.begin; i < s.end; ++i) {
            for (std::size_t c = 0; c < d; ++c) y[k * d + c] += wv[i] * hv[i * d + c];
          }
        }
      },
      [=](BasicTape<T>& t, std::size_t o) {
        const T* hv = t.value(hi);
        const T* wv = t.value(wi);
        const T* g = t.grad(o);
        T* gh = t.grad(hi);
        T* gw = t.grad(wi);
        for (std::size_t k = 0; k < count; ++k) {
          const Segment& s = (*segs)[k];
          for (std::size_t i = s.begin; i < s.end; ++i) {
            T acc = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
              acc += g[k * d + c] * hv[i * d + c];
              if (gh) gh[i * d + c] += wv[i] * g[k * d + c];
            }
            if (gw) gw[i] += acc;
          }
        }
      });
}

// Per-row layer normalization: gain * (x - mean) / sqrt(var + eps) + bias.
template <class T>
inline BasicVar<T> layer_norm(BasicVar<T> x, BasicVar<T> gain, BasicVar<T> bias, double eps = 1e-5) {
  const std::size_t d = x.shape().back();
  if (d == 0) throw DimensionError("layer_norm: empty feature axis");
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d}) {
    throw DimensionError("layer_norm: gain/bias do not match feature axis of " + shape_string(x.shape()));
  }
  const std::size_t rows = x.size() / d;
  const std::size_t xi = x.id(), gi = gain.id(), bi = bias.id();
  // Per-row normalized values and inverse std, refreshed by every forward.
  auto cache = std::make_shared<std::vector<T>>(rows * d + rows);
  return x.tape().record(
      x.shape(), {x, gain, bias},
      [=](BasicTape<T>& t, std::size_t o) {
        const T* v = t.value(xi);
        const T* g = t.value(gi);
        const T* b = t.value(bi);
        T* y = t.mutable_value(o);
        T* xhat = cache->data();
        T* inv_std = xhat + rows * d;
        for (std::size_t r = 0; r < rows; ++r) {
          const T* row = v + r * d;
          T mean = 0.0;
          for (std::size_t c = 0; c < d; ++c) mean += row[c];
          mean /= static_cast<T>(d);
          T var = 0.0;
          for (std::size_t c = 0; c < d; ++c) var += (row[c] - mean) * (row[c] - mean);
          var /= static_cast<T>(d);
          inv_std[r] = 1.0 / std::sqrt(var + eps);
          for (std::size_t c = 0; c < d; ++c) {
            xhat[r * d + c] = (row[c] - mean) * inv_std[r];
            y[r * d + c] = g[c] * xhat[r * d + c] + b[c];
          }
        }
      },
      [=](BasicTape<T>& t, std::size_t o) {
        const T* dy = t.grad(o);
        const T* g = t.value(gi);
        const T* xhat = cache->data();
        const T* inv_std = xhat + rows * d;
        T* gx = t.grad(xi);
        T* gg = t.grad(gi);
        T* gb = t.grad(bi);
        for (std::size_t r = 0; r < rows; ++r) {
          T mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
          for (std::size_t c = 0; c < d; ++c) {
            const T dxhat = dy[r * d + c] * g[c];
            mean_dxhat += dxhat;
            mean_dxhat_xhat += dxhat * xhat[r * d + c];
            if (gg) gg[c] += dy[r * d + c] * xhat[r * d + c];
            if (gb) gb[c] += dy[r * d + c];
          }
          if (!gx) continue;
          mean_dxhat /= static_cast<T>(d);
          mean_dxhat_xhat /= static_cast<T>(d);
          for (std::size_t c = 0; c < d; ++c) {
            const T dxhat = dy[r * d + c] * g[c];
            gx[r * d + c] += inv_std[r] * (dxhat - mean_dxhat - xhat[r * d + c] * mean_dxhat_xhat);
          }
        }
      });
}

// Multi-head scaled dot-product attention over blocks of rows. Within a block
// every query row attends to the valid key rows of that block; query rows
// not covered by a block produce zeros. `scale` multiplies the logits.
template <class T>
inline BasicVar<T> multihead_attention(BasicVar<T> q, BasicVar<T> k, BasicVar<T> v, std::size_t heads, std::vector<AttentionBlock> blocks,
                               Mask key_mask, double scale) {
  detail::require_rank(q, 2, "multihead_attention");
  detail::require_rank(k, 2, "multihead_attention");
  detail::require_same_shape(k, v, "multihead_attention");
  const std::size_t nq = q.shape()[0], nk = k.shape()[0], d = q.shape()[1];
  if (k.shape()[1] != d) throw DimensionError("multihead_attention: query/key widths differ");
  if (heads == 0 || d % heads != 0) throw DimensionError("multihead_attention: width not divisible by heads");
  detail::require_mask(key_mask, nk, "multihead_attention");
  std::size_t prob_size = 0;
  std::vector<std::size_t> prob_offset;
  for (const AttentionBlock& b : blocks) {
    if (b.queries.end > nq || b.keys.end > nk || b.queries.begin > b.queries.end || b.keys.begin > b.keys.end) {
      throw DimensionError("multihead_attention: block out of range");
    }
    bool any = false;
    for (std::size_t j = b.keys.begin; j < b.keys.end; ++j) any = any || detail::is_valid(key_mask, j);
    if (!any && b.queries.size() > 0) throw EmptyAttentionError("attention block without a valid key");
    prob_offset.push_back(prob_size);
    prob_size += heads * b.queries.size() * b.keys.size();
  }
  struct Plan {
    std::vector<AttentionBlock> blocks;
    std::vector<std::size_t> offsets;
    Mask mask;
  };
  auto plan = std::make_shared<const Plan>(Plan{std::move(blocks), std::move(prob_offset), std::move(key_mask)});
  auto probs = std::make_shared<std::vector<T>>(prob_size);
  const std::size_t qi = q.id(), ki = k.id(), vi = v.id(), dh = d / heads;
  return q.tape().record(
      {nq, d}, {q, k, v},
      [=](BasicTape<T>& t, std::size_t o) {
        const T* Q = t.value(qi);
        const T* K = t.value(ki);
        const T* V = t.value(vi);
        T* Y = t.mutable_value(o);
        std::fill_n(Y, nq * d, 0.0);
        std::vector<T> logits;
        for (std::size_t bidx = 0; bidx < plan->blocks.size(); ++bidx) {
          const AttentionBlock& b = plan->blocks[bidx];
          const std::size_t nkb = b.keys.size();
          logits.resize(nkb);
          for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t qr = 0; qr < b.queries.size(); ++qr) {
              const T* qrow = Q + (b.queries.begin + qr) * d + h * dh;
              for (std::size_t kr = 0; kr < nkb; ++kr) {
                const T* krow = K + (b.keys.begin + kr) * d + h * dh;
                T s = 0.0;
                for (std::size_t c = 0; c < dh; ++c) s += qrow[c] * krow[c];
                logits[kr] = scale * s;
              }
              T* p = probs->data() + plan->offsets[bidx] + (h * b.queries.size() + qr) * nkb;
              detail::softmax_kernel(logits.data(), plan->mask, b.keys.begin, nkb, p);
              T* yrow = Y + (b.queries.begin + qr) * d + h * dh;
              for (std::size_t kr = 0; kr < nkb; ++kr) {
                if (p[kr] == 0.0) continue;
                const T* vrow = V + (b.keys.begin + kr) * d + h * dh;
                for (std::size_t c = 0; c < dh; ++c) yrow[c] += p[kr] * vrow[c];
              }
            }
          }
        }
      },
      [=](BasicTape<T>& t, std::size_t o) {
        const T* Q = t.value(qi);
        const T* K = t.value(ki);
        const T* V = t.value(vi);
        const T* G = t.grad(o);
        T* gQ = t.grad(qi);
        T* gK = t.grad(ki);
        T* gV = t.grad(vi);
        std::vector<T> dp, ds;
        for (std::size_t bidx = 0; bidx < plan->blocks.size(); ++bidx) {
          const AttentionBlock& b = plan->blocks[bidx];
          const std::size_t nkb = b.keys.size();
          dp.resize(nkb);
          ds.resize(nkb);
          for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t qr = 0; qr < b.queries.size(); ++qr) {
              const std::size_t qrow_idx = b.queries.begin + qr;
              const T* p = probs->data() + plan->offsets[bidx] + (h * b.queries.size() + qr) * nkb;
              const T* grow = G + qrow_idx * d + h * dh;
              for (std::size_t kr = 0; kr < nkb; ++kr) {
                const T* vrow = V + (b.keys.begin + kr) * d + h * dh;
                T s = 0.0;
                for (std::size_t c = 0; c < dh; ++c) s += grow[c] * vrow[c];
                dp[kr] = s;
                if (gV && p[kr] != 0.0) {
                  T* gv = gV + (b.keys.begin + kr) * d + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) gv[c] += p[kr] * grow[c];
                }
              }
              std::fill(ds.begin(), ds.end(), 0.0);
              detail::softmax_backward_kernel(p, dp.data(), nkb, ds.data());
              const T* qrow = Q + qrow_idx * d + h * dh;
              for (std::size_t kr = 0; kr < nkb; ++kr) {
                const T coef = scale * ds[kr];
                if (coef == 0.0) continue;
                const T* krow = K + (b.keys.begin + kr) * d + h * dh;
                if (gQ) {
                  T* gq = gQ + qrow_idx * d + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) gq[c] += coef * krow[c];
                }
                if (gK) {
                  T* gk = gK + (b.keys.begin + kr) * d + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) gk[c] += coef * qrow[c];
                }
              }
            }
          }
        }
      });
}

// Mean over rows of -log softmax(row)[0] for a [B x C] score matrix (a 1-D
// input is treated as a single row). Column 0 holds the positive.
template <class T>
inline BasicVar<T> softmax_cross_entropy_first(BasicVar<T> scores) {
  const Shape& s = scores.shape();
  if (s.size() > 2 || s.back() == 0) throw DimensionError("softmax_cross_entropy_first: bad shape " + shape_string(s));
  const std::size_t rows = s.size() == 1 ? 1 : s[0], cols = s.back(), si = scores.id();
  if (rows == 0) throw DimensionError("softmax_cross_entropy_first: empty batch");
  auto probs = std::make_shared<std::vector<T>>(rows * cols);
  return scores.tape().record(
      {1}, {scores},
      [=](BasicTape<T>& t, std::size_t o) {
        const T* x = t.value(si);
        T total = 0.0;
        for (std::size_t r = 0; r < rows; ++r) {
          const T* row = x + r * cols;
          const T mx = *std::max_element(row, row + cols);
          T z = 0.0;
          for (std::size_t c = 0; c < cols; ++c) z += std::exp(row[c] - mx);
          for (std::size_t c = 0; c < cols; ++c) (*probs)[r * cols + c] = std::exp(row[c] - mx) / z;
          total += mx + std::log(z) - row[0];
        }
        t.mutable_value(o)[0] = total / static_cast<T>(rows);
      },
      [=](BasicTape<T>& t, std::size_t o) {
        T* gx = t.grad(si);
        if (!gx) return;
        const T g = t.grad(o)[0] / static_cast<T>(rows);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < cols; ++c) {
            gx[r * cols + c] += g * ((*probs)[r * cols + c] - (c == 0 ? 1.0 : 0.0));
          }
        }
      });
}

}  // namespace mmrec
