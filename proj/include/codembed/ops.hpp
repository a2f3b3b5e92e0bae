#pragma once

// Differentiable operations on tape variables. Each op computes its value
// eagerly and records a gradient rule. Broadcasting is limited to
// scalar-with-tensor; row-vector bias addition is its own explicit op.

#include <codembed/tensor.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

namespace codembed {

/// Raised when an L2 normalization meets a zero row.
class NormalizationError : public std::domain_error {
 public:
  NormalizationError(const std::string& what, Index row) : std::domain_error(what), row_(row) {}
  Index row() const { return row_; }

 private:
  Index row_;
};

namespace detail {

template <typename Scalar>
void check_same_tape(const Var<Scalar>& a, const Var<Scalar>& b, const char* op) {
  if (a.tape() != b.tape()) throw TapeError(std::string(op) + ": operands live on different tapes");
}

template <typename Scalar>
bool is_scalar(const Var<Scalar>& v) {
  return v.rows() == 1 && v.cols() == 1;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

/// a[m x k] * b[k x p].
template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::check_same_tape(a, b, "matmul");
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions disagree, " + a.shape() + " * " + b.shape());
  }
  const Index ia = a.id(), ib = b.id();
  Matrix<Scalar> out = a.value() * b.value();
  return a.tape()->record(
      std::move(out),
      [ia, ib](Tape<Scalar>& t, const Matrix<Scalar>& g) {
        if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(ib).transpose());
        if (t.requires_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
      },
      a, b);
}

/// a[m x k] * b[p x k]^T, the row-wise dot-product matrix.
template <typename Scalar>
Var<Scalar> matmul_nt(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::check_same_tape(a, b, "matmul_nt");
  if (a.cols() != b.cols()) {
    throw DimensionError("matmul_nt: column counts disagree, " + a.shape() + " vs " + b.shape());
  }
  const Index ia = a.id(), ib = b.id();
  Matrix<Scalar> out = a.value() * b.value().transpose();
  return a.tape()->record(
      std::move(out),
      [ia, ib](Tape<Scalar>& t, const Matrix<Scalar>& g) {
        if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(ib));
        if (t.requires_grad(ib)) t.accumulate(ib, g.transpose() * t.value(ia));
      },
      a, b);
}

template <typename Scalar>
Var<Scalar> transpose(const Var<Scalar>& a) {
  const Index ia = a.id();
  Matrix<Scalar> out = a.value().transpose();
  return a.tape()->record(
      std::move(out),
      [ia](Tape<Scalar>& t, const Matrix<Scalar>& g) { t.accumulate(ia, g.transpose()); }, a);
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::check_same_tape(a, b, "add");
  const Index ia = a.id(), ib = b.id();
  if (a.rows() == b.rows() && a.cols() == b.cols()) {
    Matrix<Scalar> out = a.value() + b.value();
    return a.tape()->record(
        std::move(out),
        [ia, ib](Tape<Scalar>& t, const Matrix<Scalar>& g) {
          t.accumulate(ia, g);
          t.accumulate(ib, g);
        },
        a, b);
  }
  if (detail::is_scalar(b)) {
    Matrix<Scalar> out = a.value().array() + b.item();
    return a.tape()->record(
        std::move(out),
        [ia, ib](Tape<Scalar>& t, const Matrix<Scalar>& g) {
          t.accumulate(ia, g);
          t.accumulate(ib, Matrix<Scalar>::Constant(1, 1, g.sum()));
        },
        a, b);
  }
  if (detail::is_scalar(a)) return add(b, a);
  throw DimensionError("add: incompatible shapes " + a.shape() + " and " + b.shape());
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, Scalar factor) {
  const Index ia = a.id();
  Matrix<Scalar> out = a.value() * factor;
  return a.tape()->record(
      std::move(out),
      [ia, factor](Tape<Scalar>& t, const Matrix<Scalar>& g) { t.accumulate(ia, g * factor); }, a);
}

template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b) {
  return add(a, scale(b, Scalar(-1)));
}

/// Hadamard product, or scalar-with-tensor product.
template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::check_same_tape(a, b, "mul");
  const Index ia = a.id(), ib = b.id();
  if (a.rows() == b.rows() && a.cols() == b.cols()) {
    Matrix<Scalar> out = a.value().cwiseProduct(b.value());
    return a.tape()->record(
        std::move(out),
        [ia, ib](Tape<Scalar>& t, const Matrix<Scalar>& g) {
          if (t.requires_grad(ia)) t.accumulate(ia, g.cwiseProduct(t.value(ib)));
          if (t.requires_grad(ib)) t.accumulate(ib, g.cwiseProduct(t.value(ia)));
        },
        a, b);
  }
  if (detail::is_scalar(b)) {
    Matrix<Scalar> out = a.value() * b.item();
    return a.tape()->record(
        std::move(out),
        [ia, ib](Tape<Scalar>& t, const Matrix<Scalar>& g) {
          if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(ib)(0, 0));
          if (t.requires_grad(ib)) {
            t.accumulate(ib, Matrix<Scalar>::Constant(1, 1, g.cwiseProduct(t.value(ia)).sum()));
          }
        },
        a, b);
  }
  if (detail::is_scalar(a)) return mul(b, a);
  throw DimensionError("mul: incompatible shapes " + a.shape() + " and " + b.shape());
}

/// x[m x n] + bias[1 x n] added to every row.
template <typename Scalar>
Var<Scalar> add_row_vector(const Var<Scalar>& x, const Var<Scalar>& bias) {
  detail::check_same_tape(x, bias, "add_row_vector");
  if (bias.rows() != 1 || bias.cols() != x.cols()) {
    throw DimensionError("add_row_vector: bias " + bias.shape() + " does not match " + x.shape());
  }
  const Index ix = x.id(), ib = bias.id();
  Matrix<Scalar> out = x.value().rowwise() + bias.value().row(0);
  return x.tape()->record(
      std::move(out),
      [ix, ib](Tape<Scalar>& t, const Matrix<Scalar>& g) {
        t.accumulate(ix, g);
        if (t.requires_grad(ib)) t.accumulate(ib, g.colwise().sum());
      },
      x, bias);
}

template <typename Scalar>
Var<Scalar> tanh(const Var<Scalar>& a) {
  const Index ia = a.id();
  Matrix<Scalar> out = a.value().array().tanh().matrix();
  const Index io = a.tape()->size();
  return a.tape()->record(
      std::move(out),
      [ia, io](Tape<Scalar>& t, const Matrix<Scalar>& g) {
        const auto& y = t.value(io);
        t.accumulate(ia, (g.array() * (Scalar(1) - y.array().square())).matrix());
      },
      a);
}

/// GELU, tanh approximation.
template <typename Scalar>
Var<Scalar> gelu(const Var<Scalar>& a) {
  static constexpr Scalar kC = Scalar(0.7978845608028654);  // sqrt(2/pi)
  static constexpr Scalar kA = Scalar(0.044715);
  const Index ia = a.id();
  const auto& x = a.value().array();
  Matrix<Scalar> out = (Scalar(0.5) * x * (Scalar(1) + (kC * (x + kA * x.cube())).tanh())).matrix();
  return a.tape()->record(
      std::move(out),
      [ia](Tape<Scalar>& t, const Matrix<Scalar>& g) {
        using Arr = Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
        const Arr x = t.value(ia).array();
        const Arr th = (kC * (x + kA * x.cube())).tanh();
        const Arr d = Scalar(0.5) * (Scalar(1) + th) +
                      Scalar(0.5) * x * (Scalar(1) - th.square()) * kC *
                          (Scalar(1) + Scalar(3) * kA * x.square());
        t.accumulate(ia, (g.array() * d).matrix());
      },
      a);
}

// ---------------------------------------------------------------------------
// Reductions

/// Sum of all entries, sequential row-major order.
template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& a) {
  const Index ia = a.id();
  const auto& v = a.value();
  Scalar s = 0;
  for (Index i = 0; i < v.size(); ++i) s += v.data()[i];
  const Index rows = a.rows(), cols = a.cols();
  return a.tape()->record(
      Matrix<Scalar>::Constant(1, 1, s),
      [ia, rows, cols](Tape<Scalar>& t, const Matrix<Scalar>& g) {
        t.accumulate(ia, Matrix<Scalar>::Constant(rows, cols, g(0, 0)));
      },
      a);
}

template <typename Scalar>
Var<Scalar> mean(const Var<Scalar>& a) {
  return scale(sum(a), Scalar(1) / static_cast<Scalar>(a.size()));
}

/// Euclidean norm of every row, [m x 1].
template <typename Scalar>
Var<Scalar> row_l2norm(const Var<Scalar>& a) {
  const Index ia = a.id();
  Matrix<Scalar> out = a.value().rowwise().norm();
  const Index io = a.tape()->size();
  return a.tape()->record(
      std::move(out),
      [ia, io](Tape<Scalar>& t, const Matrix<Scalar>& g) {
        const auto& x = t.value(ia);
        const auto& n = t.value(io);
        Matrix<Scalar> dx(x.rows(), x.cols());
        for (Index i = 0; i < x.rows(); ++i) {
          const Scalar ni = n(i, 0);
          dx.row(i) = ni > 0 ? (x.row(i) * (g(i, 0) / ni)).eval() : RowVector<Scalar>::Zero(x.cols());
        }
        t.accumulate(ia, dx);
      },
      a);
}

/// Scale every row to unit L2 norm. Zero rows raise NormalizationError.
template <typename Scalar>
Var<Scalar> normalize_rows(const Var<Scalar>& a) {
  const Index ia = a.id();
  const auto& x = a.value();
  Matrix<Scalar> norms = x.rowwise().norm();
  Matrix<Scalar> out(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    if (!std::isfinite(norms(i, 0))) {
      throw NormalizationError("normalize: row " + std::to_string(i) + " has non-finite entries", i);
    }
    if (!(norms(i, 0) > 0)) {
      throw NormalizationError("normalize: row " + std::to_string(i) + " has zero norm", i);
    }
    out.row(i) = x.row(i) / norms(i, 0);
  }
  const Index io = a.tape()->size();
  return a.tape()->record(
      std::move(out),
      [ia, io, norms = std::move(norms)](Tape<Scalar>& t, const Matrix<Scalar>& g) {
        const auto& y = t.value(io);
        Matrix<Scalar> dx(y.rows(), y.cols());
        for (Index i = 0; i < y.rows(); ++i) {
          const Scalar gy = g.row(i).dot(y.row(i));
          dx.row(i) = (g.row(i) - y.row(i) * gy) / norms(i, 0);
        }
        t.accumulate(ia, dx);
      },
      a);
}

/// Row-wise softmax with per-row max subtraction.
template <typename Scalar>
Var<Scalar> softmax_rows(const Var<Scalar>& a) {
  const Index ia = a.id();
  const auto& x = a.value();
  Matrix<Scalar> out(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    const Scalar m = x.row(i).maxCoeff();
    out.row(i) = (x.row(i).array() - m).exp().matrix();
    Scalar z = 0;
    for (Index j = 0; j < x.cols(); ++j) z += out(i, j);
    out.row(i) /= z;
  }
  const Index io = a.tape()->size();
  return a.tape()->record(
      std::move(out),
      [ia, io](Tape<Scalar>& t, const Matrix<Scalar>& g) {
        const auto& y = t.value(io);
        Matrix<Scalar> dx(y.rows(), y.cols());
        for (Index i = 0; i < y.rows(); ++i) {
          const Scalar gy = g.row(i).dot(y.row(i));
          dx.row(i) = (y.row(i).array() * (g.row(i).array() - gy)).matrix();
        }
        t.accumulate(ia, dx);
      },
      a);
}

/// Row-wise log-softmax computed as x - max - log(sum(exp(x - max))).
template <typename Scalar>
Var<Scalar> log_softmax_rows(const Var<Scalar>& a) {
  const Index ia = a.id();
  const auto& x = a.value();
  Matrix<Scalar> out(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    const Scalar m = x.row(i).maxCoeff();
    Scalar z = 0;
    for (Index j = 0; j < x.cols(); ++j) z += std::exp(x(i, j) - m);
    const Scalar lse = m + std::log(z);
    out.row(i) = x.row(i).array() - lse;
  }
  const Index io = a.tape()->size();
  return a.tape()->record(
      std::move(out),
      [ia, io](Tape<Scalar>& t, const Matrix<Scalar>& g) {
        const auto& y = t.value(io);
        Matrix<Scalar> dx(y.rows(), y.cols());
        for (Index i = 0; i < y.rows(); ++i) {
          Scalar gs = 0;
          for (Index j = 0; j < y.cols(); ++j) gs += g(i, j);
          dx.row(i) = g.row(i).array() - y.row(i).array().exp() * gs;
        }
        t.accumulate(ia, dx);
      },
      a);
}

// ---------------------------------------------------------------------------
// Indexing and layout

/// Main diagonal of a square matrix as [n x 1].
template <typename Scalar>
Var<Scalar> diagonal(const Var<Scalar>& a) {
  if (a.rows() != a.cols()) throw DimensionError("diagonal: matrix is not square " + a.shape());
  const Index ia = a.id();
  const Index n = a.rows();
  Matrix<Scalar> out = a.value().diagonal();
  return a.tape()->record(
      std::move(out),
      [ia, n](Tape<Scalar>& t, const Matrix<Scalar>& g) {
        Matrix<Scalar> dx = Matrix<Scalar>::Zero(n, n);
        dx.diagonal() = g.col(0);
        t.accumulate(ia, dx);
      },
      a);
}

/// Columns [begin, begin + count).
template <typename Scalar>
Var<Scalar> slice_cols(const Var<Scalar>& a, Index begin, Index count) {
  if (begin < 0 || count < 1 || begin + count > a.cols()) {
    throw DimensionError("slice_cols: range [" + std::to_string(begin) + ", " +
                         std::to_string(begin + count) + ") outside " + a.shape());
  }
  const Index ia = a.id();
  const Index rows = a.rows(), cols = a.cols();
  Matrix<Scalar> out = a.value().middleCols(begin, count);
  return a.tape()->record(
      std::move(out),
      [ia, rows, cols, begin, count](Tape<Scalar>& t, const Matrix<Scalar>& g) {
        Matrix<Scalar> dx = Matrix<Scalar>::Zero(rows, cols);
        dx.middleCols(begin, count) = g;
        t.accumulate(ia, dx);
      },
      a);
}

/// Rows picked by index; used for embedding lookup and last-token selection.
template <typename Scalar>
Var<Scalar> gather_rows(const Var<Scalar>& a, std::vector<Index> rows) {
  const auto& x = a.value();
  Matrix<Scalar> out(static_cast<Index>(rows.size()), x.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] < 0 || rows[r] >= x.rows()) {
      throw DimensionError("gather_rows: row " + std::to_string(rows[r]) + " outside " + a.shape());
    }
    out.row(static_cast<Index>(r)) = x.row(rows[r]);
  }
  const Index ia = a.id();
  const Index n_rows = x.rows(), n_cols = x.cols();
  return a.tape()->record(
      std::move(out),
      [ia, n_rows, n_cols, rows = std::move(rows)](Tape<Scalar>& t, const Matrix<Scalar>& g) {
        Matrix<Scalar> dx = Matrix<Scalar>::Zero(n_rows, n_cols);
        for (std::size_t r = 0; r < rows.size(); ++r) dx.row(rows[r]) += g.row(static_cast<Index>(r));
        t.accumulate(ia, dx);
      },
      a);
}

/// Stack `times` copies of `a` vertically.
template <typename Scalar>
Var<Scalar> tile_rows(const Var<Scalar>& a, Index times) {
  if (times < 1) throw DimensionError("tile_rows: times must be >= 1");
  const Index ia = a.id();
  const Index r = a.rows();
  Matrix<Scalar> out = a.value().replicate(times, 1);
  return a.tape()->record(
      std::move(out),
      [ia, r, times](Tape<Scalar>& t, const Matrix<Scalar>& g) {
        Matrix<Scalar> dx = g.topRows(r);
        for (Index k = 1; k < times; ++k) dx += g.middleRows(k * r, r);
        t.accumulate(ia, dx);
      },
      a);
}

/// Mean of the first lengths[b] rows of every segment of `segment_rows`
/// rows. Output is [segments x cols]; rows past a segment's length are
/// never read.
template <typename Scalar>
Var<Scalar> segment_mean(const Var<Scalar>& a, Index segment_rows, std::vector<Index> lengths) {
  const Index segments = static_cast<Index>(lengths.size());
  if (segments * segment_rows != a.rows()) {
    throw DimensionError("segment_mean: " + std::to_string(segments) + " segments of " +
                         std::to_string(segment_rows) + " rows do not tile " + a.shape());
  }
  const auto& x = a.value();
  Matrix<Scalar> out(segments, x.cols());
  for (Index b = 0; b < segments; ++b) {
    const Index len = lengths[static_cast<std::size_t>(b)];
    if (len < 1 || len > segment_rows) {
      throw DimensionError("segment_mean: invalid length " + std::to_string(len) + " for segment " +
                           std::to_string(b));
    }
    RowVector<Scalar> acc = x.row(b * segment_rows);
    for (Index i = 1; i < len; ++i) acc += x.row(b * segment_rows + i);
    out.row(b) = acc / static_cast<Scalar>(len);
  }
  const Index ia = a.id();
  const Index rows = x.rows(), cols = x.cols();
  return a.tape()->record(
      std::move(out),
      [ia, rows, cols, segment_rows, lengths = std::move(lengths)](Tape<Scalar>& t,
                                                                   const Matrix<Scalar>& g) {
        Matrix<Scalar> dx = Matrix<Scalar>::Zero(rows, cols);
        for (std::size_t b = 0; b < lengths.size(); ++b) {
          const Index len = lengths[b];
          const RowVector<Scalar> share = g.row(static_cast<Index>(b)) / static_cast<Scalar>(len);
          for (Index i = 0; i < len; ++i) dx.row(static_cast<Index>(b) * segment_rows + i) = share;
        }
        t.accumulate(ia, dx);
      },
      a);
}

// ---------------------------------------------------------------------------
// Transformer building blocks

/// Root-mean-square normalization of every row, scaled by gain[1 x n].
template <typename Scalar>
Var<Scalar> rms_norm_rows(const Var<Scalar>& x, const Var<Scalar>& gain, Scalar eps = Scalar(1e-6)) {
  detail::check_same_tape(x, gain, "rms_norm_rows");
  if (gain.rows() != 1 || gain.cols() != x.cols()) {
    throw DimensionError("rms_norm_rows: gain " + gain.shape() + " does not match " + x.shape());
  }
  const auto& xv = x.value();
  const Index n = xv.cols();
  Matrix<Scalar> inv(xv.rows(), 1);
  for (Index i = 0; i < xv.rows(); ++i) {
    inv(i, 0) = Scalar(1) / std::sqrt(xv.row(i).squaredNorm() / static_cast<Scalar>(n) + eps);
  }
  Matrix<Scalar> out = (xv.array().colwise() * inv.col(0).array()).matrix();
  out.array().rowwise() *= gain.value().row(0).array();
  const Index ix = x.id(), ig = gain.id();
  return x.tape()->record(
      std::move(out),
      [ix, ig, n, inv = std::move(inv)](Tape<Scalar>& t, const Matrix<Scalar>& g) {
        const auto& xv = t.value(ix);
        const auto gv = t.value(ig).row(0).array();
        if (t.requires_grad(ig)) {
          Matrix<Scalar> xhat = (xv.array().colwise() * inv.col(0).array()).matrix();
          t.accumulate(ig, g.cwiseProduct(xhat).colwise().sum());
        }
        if (t.requires_grad(ix)) {
          Matrix<Scalar> dx(xv.rows(), xv.cols());
          for (Index i = 0; i < xv.rows(); ++i) {
            const Scalar r = inv(i, 0);
            const auto gg = (g.row(i).array() * gv).eval();
            const Scalar dot = (gg * xv.row(i).array()).sum();
            dx.row(i) = (r * gg - (r * r * r / static_cast<Scalar>(n)) * dot * xv.row(i).array()).matrix();
          }
          t.accumulate(ix, dx);
        }
      },
      x, gain);
}

/// Rotary position encoding. Rows are laid out as consecutive segments of
/// `segment_rows` positions; row r has position r % segment_rows. Each head
/// of width dh rotates component pairs (i, i + dh/2).
template <typename Scalar>
Var<Scalar> rope(const Var<Scalar>& x, Index segment_rows, Index n_heads, Scalar base = Scalar(10000)) {
  const Index cols = x.cols();
  if (n_heads < 1 || cols % n_heads != 0 || (cols / n_heads) % 2 != 0) {
    throw DimensionError("rope: width " + std::to_string(cols) + " not splittable into " +
                         std::to_string(n_heads) + " even heads");
  }
  if (segment_rows < 1 || x.rows() % segment_rows != 0) {
    throw DimensionError("rope: segment length does not tile rows of " + x.shape());
  }
  const Index dh = cols / n_heads;
  const Index half = dh / 2;
  auto cos_t = std::make_shared<Matrix<Scalar>>(segment_rows, half);
  auto sin_t = std::make_shared<Matrix<Scalar>>(segment_rows, half);
  for (Index p = 0; p < segment_rows; ++p) {
    for (Index i = 0; i < half; ++i) {
      const double inv_freq = std::pow(static_cast<double>(base), -2.0 * static_cast<double>(i) / static_cast<double>(dh));
      const double angle = static_cast<double>(p) * inv_freq;
      (*cos_t)(p, i) = static_cast<Scalar>(std::cos(angle));
      (*sin_t)(p, i) = static_cast<Scalar>(std::sin(angle));
    }
  }
  // sign = +1 rotates forward (value), -1 rotates back (gradient).
  auto rotate = [=](const Matrix<Scalar>& in, Scalar sign) {
    Matrix<Scalar> out(in.rows(), in.cols());
    for (Index r = 0; r < in.rows(); ++r) {
      const Index p = r % segment_rows;
      for (Index h = 0; h < n_heads; ++h) {
        const Index o = h * dh;
        for (Index i = 0; i < half; ++i) {
          const Scalar c = (*cos_t)(p, i), s = sign * (*sin_t)(p, i);
          const Scalar a = in(r, o + i), b = in(r, o + half + i);
          out(r, o + i) = a * c - b * s;
          out(r, o + half + i) = a * s + b * c;
        }
      }
    }
    return out;
  };
  const Index ix = x.id();
  return x.tape()->record(
      rotate(x.value(), Scalar(1)),
      [ix, rotate](Tape<Scalar>& t, const Matrix<Scalar>& g) { t.accumulate(ix, rotate(g, Scalar(-1))); },
      x);
}

/// Describes batched multi-head scaled dot-product attention over segments.
/// Queries: segments x query_rows rows; keys/values: segments x key_rows.
/// In segment b, key j is visible iff j < key_lengths[b] and, when causal,
/// j <= query position. Query rows at or beyond query_lengths[b] (if given)
/// produce zero output.
struct AttentionLayout {
  Index segments = 0;
  Index query_rows = 0;
  Index key_rows = 0;
  std::vector<Index> key_lengths;
  std::vector<Index> query_lengths;  // empty: every query row is live
  bool causal = false;
  Index n_heads = 1;
};

template <typename Scalar>
Var<Scalar> attention(const Var<Scalar>& q, const Var<Scalar>& k, const Var<Scalar>& v,
                      const AttentionLayout& layout) {
  detail::check_same_tape(q, k, "attention");
  detail::check_same_tape(q, v, "attention");
  const Index d = q.cols();
  const Index B = layout.segments, Lq = layout.query_rows, Lk = layout.key_rows, H = layout.n_heads;
  if (k.cols() != d || v.cols() != d || H < 1 || d % H != 0) {
    throw DimensionError("attention: widths q" + q.shape() + " k" + k.shape() + " v" + v.shape() +
                         " incompatible with " + std::to_string(H) + " heads");
  }
  if (q.rows() != B * Lq || k.rows() != B * Lk || v.rows() != B * Lk ||
      static_cast<Index>(layout.key_lengths.size()) != B ||
      (!layout.query_lengths.empty() && static_cast<Index>(layout.query_lengths.size()) != B)) {
    throw DimensionError("attention: layout does not match q" + q.shape() + " k" + k.shape());
  }
  const Index dh = d / H;
  const Scalar scale_factor = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
  const auto& Q = q.value();
  const auto& K = k.value();
  const auto& V = v.value();

  auto probs = std::make_shared<std::vector<Matrix<Scalar>>>(static_cast<std::size_t>(B * H));
  Matrix<Scalar> out = Matrix<Scalar>::Zero(B * Lq, d);
  std::vector<Index> q_live(static_cast<std::size_t>(B));
  for (Index b = 0; b < B; ++b) {
    const Index kl = layout.key_lengths[static_cast<std::size_t>(b)];
    if (kl < 1 || kl > Lk) throw DimensionError("attention: invalid key length in segment " + std::to_string(b));
    const Index ql = layout.query_lengths.empty() ? Lq : layout.query_lengths[static_cast<std::size_t>(b)];
    q_live[static_cast<std::size_t>(b)] = ql;
    for (Index h = 0; h < H; ++h) {
      auto Qh = Q.block(b * Lq, h * dh, ql, dh);
      auto Kh = K.block(b * Lk, h * dh, kl, dh);
      auto Vh = V.block(b * Lk, h * dh, kl, dh);
      Matrix<Scalar> P = (Qh * Kh.transpose()) * scale_factor;
      for (Index i = 0; i < ql; ++i) {
        const Index visible = layout.causal ? std::min(kl, i + 1) : kl;
        Scalar m = P(i, 0);
        for (Index j = 1; j < visible; ++j) m = std::max(m, P(i, j));
        Scalar z = 0;
        for (Index j = 0; j < visible; ++j) {
          P(i, j) = std::exp(P(i, j) - m);
          z += P(i, j);
        }
        for (Index j = 0; j < visible; ++j) P(i, j) /= z;
        for (Index j = visible; j < kl; ++j) P(i, j) = 0;
      }
      out.block(b * Lq, h * dh, ql, dh).noalias() = P * Vh;
      (*probs)[static_cast<std::size_t>(b * H + h)] = std::move(P);
    }
  }

  const Index iq = q.id(), ik = k.id(), iv = v.id();
  return q.tape()->record(
      std::move(out),
      [=, q_live = std::move(q_live)](Tape<Scalar>& t, const Matrix<Scalar>& g) {
        const auto& Q = t.value(iq);
        const auto& K = t.value(ik);
        const auto& V = t.value(iv);
        Matrix<Scalar> dQ = Matrix<Scalar>::Zero(Q.rows(), d);
        Matrix<Scalar> dK = Matrix<Scalar>::Zero(K.rows(), d);
        Matrix<Scalar> dV = Matrix<Scalar>::Zero(V.rows(), d);
        for (Index b = 0; b < B; ++b) {
          const Index kl = layout.key_lengths[static_cast<std::size_t>(b)];
          const Index ql = q_live[static_cast<std::size_t>(b)];
          for (Index h = 0; h < H; ++h) {
            const Matrix<Scalar>& P = (*probs)[static_cast<std::size_t>(b * H + h)];
            auto dO = g.block(b * Lq, h * dh, ql, dh);
            auto Qh = Q.block(b * Lq, h * dh, ql, dh);
            auto Kh = K.block(b * Lk, h * dh, kl, dh);
            auto Vh = V.block(b * Lk, h * dh, kl, dh);
            dV.block(b * Lk, h * dh, kl, dh).noalias() += P.transpose() * dO;
            Matrix<Scalar> dP = dO * Vh.transpose();
            for (Index i = 0; i < ql; ++i) {
              const Scalar row_dot = dP.row(i).dot(P.row(i));
              dP.row(i) = (P.row(i).array() * (dP.row(i).array() - row_dot)).matrix() * scale_factor;
            }
            dQ.block(b * Lq, h * dh, ql, dh).noalias() += dP * Kh;
            dK.block(b * Lk, h * dh, kl, dh).noalias() += dP.transpose() * Qh;
          }
        }
        if (t.requires_grad(iq)) t.accumulate(iq, dQ);
        if (t.requires_grad(ik)) t.accumulate(ik, dK);
        if (t.requires_grad(iv)) t.accumulate(iv, dV);
      },
      q, k, v);
}

}  // namespace codembed
