#pragma once

// Dense tensor aliases and the handful of elementwise kernels shared by the
// fusion, encoder and explainability headers.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace mmfuse {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

class ContractError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& m) {
  return m.allFinite();
}

template <typename Derived>
void require_finite(const Eigen::MatrixBase<Derived>& m, std::string_view what) {
  if (!m.allFinite()) {
    throw ContractError(std::string(what) + ": non-finite value");
  }
}

template <typename T>
T sigmoid(T x) {
  // Split by sign so large |x| saturates to exactly 0 or 1 without overflow.
  if (x >= T(0)) {
    return T(1) / (T(1) + std::exp(-x));
  }
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
Vec<T> sigmoid(const Vec<T>& x) {
  return x.unaryExpr([](T v) { return sigmoid(v); });
}

template <typename T>
Vec<T> relu(const Vec<T>& x) {
  return x.cwiseMax(T(0));
}

// Numerically stable softmax of a vector.
template <typename T>
Vec<T> softmax(const Vec<T>& logits) {
  const T mx = logits.maxCoeff();
  Vec<T> e = (logits.array() - mx).exp().matrix();
  return e / e.sum();
}

// Softmax applied independently to every row.
template <typename T>
Mat<T> row_softmax(const Mat<T>& scores) {
  Mat<T> out(scores.rows(), scores.cols());
  for (Eigen::Index r = 0; r < scores.rows(); ++r) {
    const T mx = scores.row(r).maxCoeff();
    auto e = (scores.row(r).array() - mx).exp();
    out.row(r) = (e / e.sum()).matrix();
  }
  return out;
}

// 64-bit FNV-1a; used for token hashing and config fingerprints.
inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 14695981039346656037ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

// Fan-in scaled uniform init, U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
template <typename T>
Mat<T> fan_in_uniform(Eigen::Index rows, Eigen::Index cols, Eigen::Index fan_in,
                      std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in > 0 ? fan_in : 1));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Mat<T> m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j) {
    for (Eigen::Index i = 0; i < rows; ++i) {
      m(i, j) = static_cast<T>(dist(rng));
    }
  }
  return m;
}

}  // namespace mmfuse
