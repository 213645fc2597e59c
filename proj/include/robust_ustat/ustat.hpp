#pragma once

// Kernels, datasets and exact operator-valued U-statistics.

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "robust_ustat/errors.hpp"
#include "robust_ustat/matfun.hpp"
#include "robust_ustat/matrix.hpp"
#include "robust_ustat/parallel.hpp"

namespace robust_ustat {

struct DatasetInfo {
  std::uint64_t seed = 0;
  std::string source;
  /// Student-t with dof in (4, 4.5]: fourth moments barely finite.
  bool near_critical = false;
};

/// n samples of dimension p, stored column-major as a p x n matrix
/// (one column per sample).
class Dataset {
 public:
  Dataset() = default;

  explicit Dataset(Matrix samples, DatasetInfo info = {})
      : samples_(std::move(samples)), info_(std::move(info)) {
    if (samples_.cols() < 1) throw DataError("Dataset: need at least one sample");
    if (samples_.rows() < 1) throw DataError("Dataset: samples must have positive length");
    if (!samples_.allFinite()) throw DataError("Dataset: non-finite entry");
  }

  /// Builds from an n x p matrix (one row per sample).
  static Dataset from_rows(const Matrix& rows, DatasetInfo info = {}) {
    return Dataset(rows.transpose(), std::move(info));
  }

  Index size() const { return samples_.cols(); }
  Index dim() const { return samples_.rows(); }
  auto sample(Index i) const { return samples_.col(i); }
  const Matrix& samples() const { return samples_; }
  const DatasetInfo& info() const { return info_; }

 private:
  Matrix samples_;
  DatasetInfo info_;
};

/// The samples selected by one index tuple.
class TupleView {
 public:
  TupleView(const Matrix& samples, std::span<const Index> indices)
      : samples_(&samples), indices_(indices) {}

  std::size_t size() const { return indices_.size(); }
  auto operator[](std::size_t k) const { return samples_->col(indices_[k]); }
  std::span<const Index> indices() const { return indices_; }

 private:
  const Matrix* samples_;
  std::span<const Index> indices_;
};

/// A permutation-symmetric map from m samples to a d x d symmetric matrix.
///
/// Kernels of the form H = s * v v^T (s >= 0) may additionally expose the
/// factor through `rank_one`, which writes v and returns s; the robust
/// solver uses it for an exact faster evaluation path.
class KernelSpec {
 public:
  using Evaluate = std::function<Matrix(const TupleView&)>;
  using RankOne = std::function<double(const TupleView&, Vector&)>;

  KernelSpec(int arity, Index dim, Evaluate evaluate, RankOne rank_one = {})
      : arity_(arity), dim_(dim), evaluate_(std::move(evaluate)), rank_one_(std::move(rank_one)) {
    if (arity < 2) throw ArityError("KernelSpec: arity must be >= 2");
    if (dim < 1) throw DimError("KernelSpec: output dimension must be positive");
  }

  int arity() const { return arity_; }
  Index dim() const { return dim_; }

  /// Raw evaluation, no symmetry or shape checks.
  Matrix evaluate(const TupleView& x) const { return evaluate_(x); }

  SymMatrix operator()(const TupleView& x) const {
    if (x.size() != static_cast<std::size_t>(arity_)) {
      throw ArityError("KernelSpec: expected " + std::to_string(arity_) + " samples");
    }
    Matrix h = evaluate_(x);
    if (h.rows() != dim_ || h.cols() != dim_) throw DimError("KernelSpec: output has wrong shape");
    return SymMatrix(h);
  }

  bool has_rank_one() const { return static_cast<bool>(rank_one_); }
  double rank_one(const TupleView& x, Vector& v) const { return rank_one_(x, v); }

 private:
  int arity_;
  Index dim_;
  Evaluate evaluate_;
  RankOne rank_one_;
};

// ---------------------------------------------------------------------------
// Tuple enumeration

/// n! / (n - m)!, as a double (exact while below 2^53).
inline double count_ordered_tuples(Index n, int m) {
  double c = 1.0;
  for (int k = 0; k < m; ++k) c *= static_cast<double>(n - k);
  return c;
}

inline double count_combinations(Index n, int m) {
  if (m < 0 || m > n) return 0.0;
  double c = 1.0;
  for (int k = 0; k < m; ++k) c = c * static_cast<double>(n - k) / static_cast<double>(k + 1);
  return std::round(c);
}

namespace detail {

inline void check_arity(Index n, int m) {
  if (m < 2) throw ArityError("arity must be >= 2, got " + std::to_string(m));
  if (m > n) {
    throw ArityError("arity " + std::to_string(m) + " exceeds sample size " + std::to_string(n));
  }
}

}  // namespace detail

enum class TupleOrder {
  Ordered,       ///< all n!/(n-m)! tuples of distinct indices
  Combinations,  ///< increasing tuples only, n choose m of them
};

/// Lexicographic stream of index tuples with distinct entries.
class TupleStream {
 public:
  TupleStream(Index n, int m, TupleOrder order = TupleOrder::Ordered)
      : n_(n), order_(order), idx_(static_cast<std::size_t>(m)), used_(static_cast<std::size_t>(n), false) {
    detail::check_arity(n, m);
  }

  /// Advances to the next tuple; false once exhausted.
  bool next() {
    if (done_) return false;
    if (!started_) {
      started_ = true;
      for (std::size_t k = 0; k < idx_.size(); ++k) {
        idx_[k] = static_cast<Index>(k);
        used_[k] = true;
      }
      return true;
    }
    const bool ok = order_ == TupleOrder::Ordered ? advance_ordered() : advance_combination();
    if (!ok) done_ = true;
    return ok;
  }

  std::span<const Index> current() const { return idx_; }

 private:
  bool advance_ordered() {
    const std::size_t m = idx_.size();
    for (std::size_t pos = m; pos-- > 0;) {
      used_[static_cast<std::size_t>(idx_[pos])] = false;
      Index v = idx_[pos] + 1;
      while (v < n_ && used_[static_cast<std::size_t>(v)]) ++v;
      if (v >= n_) continue;
      idx_[pos] = v;
      used_[static_cast<std::size_t>(v)] = true;
      Index fill = 0;
      for (std::size_t q = pos + 1; q < m; ++q) {
        while (used_[static_cast<std::size_t>(fill)]) ++fill;
        idx_[q] = fill;
        used_[static_cast<std::size_t>(fill)] = true;
      }
      return true;
    }
    return false;
  }

  bool advance_combination() {
    const auto m = static_cast<Index>(idx_.size());
    for (Index pos = m - 1; pos >= 0; --pos) {
      if (idx_[static_cast<std::size_t>(pos)] < n_ - m + pos) {
        ++idx_[static_cast<std::size_t>(pos)];
        for (Index q = pos + 1; q < m; ++q) {
          idx_[static_cast<std::size_t>(q)] = idx_[static_cast<std::size_t>(q - 1)] + 1;
        }
        return true;
      }
    }
    return false;
  }

  Index n_;
  TupleOrder order_;
  std::vector<Index> idx_;
  std::vector<bool> used_;
  bool started_ = false;
  bool done_ = false;
};

inline TupleStream enumerate_tuples(Index n, int m) { return TupleStream(n, m, TupleOrder::Ordered); }

namespace detail {

/// Combinations split by their first index into contiguous ranges of
/// roughly equal size. Boundaries depend only on (n, m), so reductions that
/// combine chunk results in order are reproducible for any thread count.
struct CombinationChunk {
  Index first_begin;
  Index first_end;
  std::size_t offset;  ///< position of the chunk's first combination
  std::size_t count;
};

inline constexpr std::size_t kReductionChunks = 64;

inline std::vector<CombinationChunk> combination_chunks(Index n, int m,
                                                        std::size_t target = kReductionChunks) {
  check_arity(n, m);
  const double total = count_combinations(n, m);
  const double per_chunk = total / static_cast<double>(target);
  std::vector<CombinationChunk> chunks;
  std::size_t offset = 0;
  Index begin = 0;
  double acc = 0.0;
  for (Index i = 0; i <= n - m; ++i) {
    acc += count_combinations(n - 1 - i, m - 1);
    if (acc >= per_chunk || i == n - m) {
      const auto cnt = static_cast<std::size_t>(acc);
      chunks.push_back({begin, i + 1, offset, cnt});
      offset += cnt;
      begin = i + 1;
      acc = 0.0;
    }
  }
  return chunks;
}

/// Calls fn(span) for each increasing m-tuple whose first index lies in
/// [chunk.first_begin, chunk.first_end).
template <class Fn>
void for_each_combination(Index n, int m, const CombinationChunk& chunk, Fn&& fn) {
  std::vector<Index> idx(static_cast<std::size_t>(m));
  for (Index first = chunk.first_begin; first < chunk.first_end; ++first) {
    idx[0] = first;
    for (int q = 1; q < m; ++q) idx[static_cast<std::size_t>(q)] = first + q;
    while (true) {
      fn(std::span<const Index>(idx));
      // advance positions 1..m-1 keeping idx[0] fixed
      int pos = m - 1;
      while (pos >= 1 && idx[static_cast<std::size_t>(pos)] >= n - m + pos) --pos;
      if (pos < 1) break;
      ++idx[static_cast<std::size_t>(pos)];
      for (int q = pos + 1; q < m; ++q) {
        idx[static_cast<std::size_t>(q)] = idx[static_cast<std::size_t>(q - 1)] + 1;
      }
    }
  }
}

/// Accumulates many small terms into a plain block sum and folds the block
/// into a Kahan-compensated total every `kBlock` terms.
class BlockedMatrixSum {
 public:
  static constexpr int kBlock = 256;

  BlockedMatrixSum(Index rows, Index cols) : block_(Matrix::Zero(rows, cols)), total_(rows, cols) {}

  Matrix& block() { return block_; }
  void tick() {
    if (++pending_ == kBlock) flush();
  }
  void add(const Matrix& x) {
    block_ += x;
    tick();
  }
  void flush() {
    if (pending_ == 0) return;
    total_.add(block_);
    block_.setZero();
    pending_ = 0;
  }
  const Matrix& sum() {
    flush();
    return total_.sum();
  }

 private:
  Matrix block_;
  KahanMatrixSum total_;
  int pending_ = 0;
};

}  // namespace detail

// ---------------------------------------------------------------------------
// U-statistics

/// Exact U-statistic: the kernel averaged over all tuples of distinct
/// indices. `Combinations` visits each unordered tuple once, which equals
/// the ordered average for permutation-symmetric kernels.
inline SymMatrix u_statistic(const Dataset& data, const KernelSpec& kernel,
                             TupleOrder order = TupleOrder::Combinations) {
  const Index n = data.size();
  const int m = kernel.arity();
  detail::check_arity(n, m);
  const Index d = kernel.dim();

  if (order == TupleOrder::Ordered) {
    detail::BlockedMatrixSum acc(d, d);
    TupleStream stream(n, m, TupleOrder::Ordered);
    while (stream.next()) acc.add(kernel.evaluate(TupleView(data.samples(), stream.current())));
    return SymMatrix::symmetrize(acc.sum() / count_ordered_tuples(n, m));
  }

  const auto chunks = detail::combination_chunks(n, m);
  std::vector<Matrix> partial(chunks.size());
  parallel_for_chunks(chunks.size(), [&](std::size_t c) {
    detail::BlockedMatrixSum acc(d, d);
    detail::for_each_combination(n, m, chunks[c], [&](std::span<const Index> idx) {
      acc.add(kernel.evaluate(TupleView(data.samples(), idx)));
    });
    partial[c] = acc.sum();
  });
  KahanMatrixSum total(d, d);
  for (const auto& p : partial) total.add(p);
  return SymMatrix::symmetrize(total.sum() / count_combinations(n, m));
}

/// Average of k = floor(n/m) kernel evaluations on the disjoint consecutive
/// blocks of `permutation`.
inline SymMatrix block_average(const Dataset& data, const KernelSpec& kernel,
                               std::span<const Index> permutation) {
  const Index n = data.size();
  const int m = kernel.arity();
  detail::check_arity(n, m);
  if (static_cast<Index>(permutation.size()) != n) {
    throw PermutationError("block_average: permutation has length " +
                           std::to_string(permutation.size()) + ", expected " + std::to_string(n));
  }
  std::vector<bool> seen(static_cast<std::size_t>(n), false);
  for (Index p : permutation) {
    if (p < 0 || p >= n || seen[static_cast<std::size_t>(p)]) {
      throw PermutationError("block_average: not a permutation of 0..n-1");
    }
    seen[static_cast<std::size_t>(p)] = true;
  }
  const Index k = n / m;
  Matrix sum = Matrix::Zero(kernel.dim(), kernel.dim());
  for (Index b = 0; b < k; ++b) {
    sum += kernel.evaluate(TupleView(data.samples(), permutation.subspan(static_cast<std::size_t>(b * m),
                                                                         static_cast<std::size_t>(m))));
  }
  return SymMatrix::symmetrize(sum / static_cast<double>(k));
}

/// Average over tuples of (H - center)^2; a plug-in for E(H - EH)^2.
inline SymMatrix kernel_second_moment(const Dataset& data, const KernelSpec& kernel,
                                      const SymMatrix& center) {
  const Index n = data.size();
  const int m = kernel.arity();
  detail::check_arity(n, m);
  const Index d = kernel.dim();
  if (center.dim() != d) throw DimError("kernel_second_moment: center has wrong dimension");
  const auto chunks = detail::combination_chunks(n, m);
  std::vector<Matrix> partial(chunks.size());
  parallel_for_chunks(chunks.size(), [&](std::size_t c) {
    detail::BlockedMatrixSum acc(d, d);
    Matrix r(d, d);
    detail::for_each_combination(n, m, chunks[c], [&](std::span<const Index> idx) {
      r = kernel.evaluate(TupleView(data.samples(), idx)) - center.matrix();
      acc.block().noalias() += r * r;
      acc.tick();
    });
    partial[c] = acc.sum();
  });
  KahanMatrixSum total(d, d);
  for (const auto& p : partial) total.add(p);
  return SymMatrix::symmetrize(total.sum() / count_combinations(n, m));
}

/// Precomputed kernel values for every combination, in chunk order. Memory
/// is C(n, m) * d^2 doubles (C(n, m) * d for rank-one kernels).
class KernelCache {
 public:
  KernelCache(const Dataset& data, const KernelSpec& kernel)
      : n_(data.size()), m_(kernel.arity()), d_(kernel.dim()), rank_one_(kernel.has_rank_one()),
        chunks_(detail::combination_chunks(n_, m_)) {
    const std::size_t total = chunks_.empty() ? 0 : chunks_.back().offset + chunks_.back().count;
    const Index width = rank_one_ ? d_ : d_ * d_;
    values_.resize(width, static_cast<Index>(total));
    scales_.resize(rank_one_ ? total : 0);
    parallel_for_chunks(chunks_.size(), [&](std::size_t c) {
      std::size_t pos = chunks_[c].offset;
      Vector v(d_);
      detail::for_each_combination(n_, m_, chunks_[c], [&](std::span<const Index> idx) {
        const TupleView x(data.samples(), idx);
        if (rank_one_) {
          scales_[pos] = kernel.rank_one(x, v);
          values_.col(static_cast<Index>(pos)) = v;
        } else {
          const Matrix h = kernel.evaluate(x);
          values_.col(static_cast<Index>(pos)) = Eigen::Map<const Vector>(h.data(), d_ * d_);
        }
        ++pos;
      });
    });
  }

  Index sample_size() const { return n_; }
  int arity() const { return m_; }
  Index dim() const { return d_; }
  bool rank_one() const { return rank_one_; }
  const std::vector<detail::CombinationChunk>& chunks() const { return chunks_; }

  /// Column `pos` holds either v (rank-one) or the column-major kernel matrix.
  auto value(std::size_t pos) const { return values_.col(static_cast<Index>(pos)); }
  double scale(std::size_t pos) const { return scales_[pos]; }

 private:
  Index n_;
  int m_;
  Index d_;
  bool rank_one_;
  std::vector<detail::CombinationChunk> chunks_;
  Matrix values_;
  std::vector<double> scales_;
};

}  // namespace robust_ustat
