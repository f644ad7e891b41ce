#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <vector>

namespace driftlab {

// Batches are row-major: one sample per row, features contiguous.
using Matrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXf;

// Row-wise softmax with max-subtraction.
template <typename Derived>
Matrix softmax_rows(const Eigen::MatrixBase<Derived>& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const auto row = logits.row(r);
    const double mx = static_cast<double>(row.maxCoeff());
    double sum = 0.0;
    for (Eigen::Index c = 0; c < logits.cols(); ++c) {
      const double e = std::exp(static_cast<double>(row[c]) - mx);
      out(r, c) = static_cast<float>(e);
      sum += e;
    }
    out.row(r) /= static_cast<float>(sum);
  }
  return out;
}

// Row-wise log-softmax, double intermediates.
template <typename Derived>
Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> log_softmax_rows_f64(
    const Eigen::MatrixBase<Derived>& logits) {
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> out(logits.rows(),
                                                                             logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const auto row = logits.row(r);
    const double mx = static_cast<double>(row.maxCoeff());
    double sum = 0.0;
    for (Eigen::Index c = 0; c < logits.cols(); ++c) {
      sum += std::exp(static_cast<double>(row[c]) - mx);
    }
    const double lse = mx + std::log(sum);
    for (Eigen::Index c = 0; c < logits.cols(); ++c) {
      out(r, c) = static_cast<double>(row[c]) - lse;
    }
  }
  return out;
}

// Column means accumulated in double, fixed row order.
template <typename Derived>
Vector mean_rows_f64(const Eigen::MatrixBase<Derived>& m) {
  if (m.rows() == 0) throw std::invalid_argument("mean_rows_f64: empty matrix");
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(m.cols());
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    acc += m.row(r).template cast<double>().transpose();
  }
  acc /= static_cast<double>(m.rows());
  return acc.cast<float>();
}

// Squared L2 distance of every row to a vector, double accumulation.
template <typename DerivedM, typename DerivedV>
Eigen::VectorXd rows_sq_distance_f64(const Eigen::MatrixBase<DerivedM>& m,
                                     const Eigen::MatrixBase<DerivedV>& v) {
  if (m.cols() != v.size()) throw std::invalid_argument("rows_sq_distance_f64: dim mismatch");
  Eigen::VectorXd out(m.rows());
  const Eigen::VectorXd vd = v.template cast<double>();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    out[r] = (m.row(r).template cast<double>().transpose() - vd).squaredNorm();
  }
  return out;
}

template <typename DerivedA, typename DerivedB>
double cosine_f64(const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("cosine_f64: dim mismatch");
  const Eigen::VectorXd ad = a.template cast<double>();
  const Eigen::VectorXd bd = b.template cast<double>();
  const double na = ad.norm();
  const double nb = bd.norm();
  if (na == 0.0 || nb == 0.0) throw std::invalid_argument("cosine_f64: zero vector");
  return ad.dot(bd) / (na * nb);
}

inline double pearson_f64(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw std::invalid_argument("pearson_f64: bad input");
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) throw std::invalid_argument("pearson_f64: constant series");
  return sxy / std::sqrt(sxx * syy);
}

// FNV-1a over raw bytes; used to assert immutability of frozen networks.
inline uint64_t fnv1a(const void* data, size_t n, uint64_t h = 1469598103934665603ull) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

template <typename Derived>
uint64_t hash_bytes(const Eigen::MatrixBase<Derived>& m, uint64_t h = 1469598103934665603ull) {
  const auto eval = m.eval();
  return fnv1a(eval.data(), sizeof(typename Derived::Scalar) * static_cast<size_t>(eval.size()),
               h);
}

template <typename Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& m) {
  return m.allFinite();
}

// splitmix64: derives independent sub-seeds from one experiment seed.
inline uint64_t mix_seed(uint64_t seed, uint64_t stream) {
  uint64_t z = seed + 0x9e3779b97f4a7c15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

}  // namespace driftlab
