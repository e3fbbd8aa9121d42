#pragma once

// Channel-wise moment kernels shared by the differentiable statistics ops and
// the offline source statistics. Both routes must go through these functions
// so that identical inputs give bit-identical moments.

#include <Eigen/Dense>

#include <cmath>
#include <vector>

namespace tokalign {

template <typename Scalar>
using RowVec = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

/// Mean of every column, accumulated row by row in index order.
template <typename Derived>
RowVec<typename Derived::Scalar> column_mean(const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  RowVec<Scalar> acc = RowVec<Scalar>::Zero(x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) acc += x.row(r);
  return acc / static_cast<Scalar>(x.rows());
}

/// Biased central moment of the given order about `mean` (order 1 yields 0).
template <typename Derived>
RowVec<typename Derived::Scalar> column_central_moment(
    const Eigen::MatrixBase<Derived>& x, const RowVec<typename Derived::Scalar>& mean,
    int order) {
  using Scalar = typename Derived::Scalar;
  RowVec<Scalar> acc = RowVec<Scalar>::Zero(x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    auto dev = (x.row(r) - mean).array();
    switch (order) {
      case 1: acc.array() += dev; break;
      case 2: acc.array() += dev * dev; break;
      case 3: acc.array() += dev * dev * dev; break;
      default: acc.array() += dev.pow(static_cast<Scalar>(order)); break;
    }
  }
  return acc / static_cast<Scalar>(x.rows());
}

/// Streaming accumulator of counts, means and biased central moments up to a
/// fixed order. Merging follows the pairwise update of Pebay (2008), so any
/// fixed merge order is deterministic and numerically stable. A block built by
/// from_rows() reports exactly the two-pass kernels above.
template <typename Scalar>
class MomentAccumulator {
 public:
  MomentAccumulator(Eigen::Index channels, int max_order)
      : max_order_(max_order),
        mean_(RowVec<Scalar>::Zero(channels)),
        moments_(static_cast<std::size_t>(max_order + 1), RowVec<Scalar>::Zero(channels)) {}

  template <typename Derived>
  static MomentAccumulator from_rows(const Eigen::MatrixBase<Derived>& x, int max_order) {
    MomentAccumulator acc(x.cols(), max_order);
    if (x.rows() == 0) return acc;
    acc.count_ = static_cast<Scalar>(x.rows());
    acc.mean_ = column_mean(x);
    for (int p = 2; p <= max_order; ++p) acc.moments_[idx(p)] = column_central_moment(x, acc.mean_, p);
    return acc;
  }

  template <typename Derived>
  void add_row(const Eigen::MatrixBase<Derived>& row) {
    MomentAccumulator one(row.cols(), max_order_);
    one.count_ = 1;
    one.mean_ = row;
    merge(one);
  }

  void merge(const MomentAccumulator& other) {
    if (other.count_ == 0) return;
    if (count_ == 0) {
      *this = other;
      return;
    }
    const Scalar na = count_, nb = other.count_, n = na + nb;
    const RowVec<Scalar> delta = other.mean_ - mean_;
    // Work on central sums M_p = n * m_p.
    std::vector<RowVec<Scalar>> sa(moments_.size()), sb(moments_.size());
    for (int p = 2; p <= max_order_; ++p) {
      sa[idx(p)] = moments_[idx(p)] * na;
      sb[idx(p)] = other.moments_[idx(p)] * nb;
    }
    for (int p = 2; p <= max_order_; ++p) {
      RowVec<Scalar> out = sa[idx(p)] + sb[idx(p)];
      for (int k = 1; k <= p - 2; ++k) {
        const auto dk = delta.array().pow(static_cast<Scalar>(k));
        out.array() += binomial(p, k) * dk *
                       (std::pow(-nb / n, k) * sa[idx(p - k)].array() + std::pow(na / n, k) * sb[idx(p - k)].array());
      }
      const Scalar tail = std::pow(na * nb / n, p) * (1 / std::pow(nb, p - 1) - std::pow(-1 / na, p - 1));
      out.array() += tail * delta.array().pow(static_cast<Scalar>(p));
      moments_[idx(p)] = out / n;
    }
    mean_ += delta * (nb / n);
    count_ = n;
  }

  Scalar count() const { return count_; }
  int max_order() const { return max_order_; }
  const RowVec<Scalar>& mean() const { return mean_; }
  /// Biased central moment; order 2 is the variance.
  const RowVec<Scalar>& central_moment(int order) const { return moments_[idx(order)]; }

 private:
  static std::size_t idx(int p) { return static_cast<std::size_t>(p); }
  static Scalar binomial(int n, int k) {
    Scalar r = 1;
    for (int i = 1; i <= k; ++i) r = r * static_cast<Scalar>(n - k + i) / static_cast<Scalar>(i);
    return r;
  }

  int max_order_;
  Scalar count_ = 0;
  RowVec<Scalar> mean_;
  std::vector<RowVec<Scalar>> moments_;
};

}  // namespace tokalign
