#pragma once

// Dense kernels used by the encoder, the probe and the tape. Every reduction
// runs in a fixed left-to-right order so repeated calls are bit-identical.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <numbers>
#include <string>

#include "synapse/errors.hpp"

namespace synapse {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

using Tensor2 = Matrix<double>;
using VectorXd = Vector<double>;
using RowVectorXd = RowVector<double>;

namespace detail {

inline std::string shape_str(Eigen::Index r, Eigen::Index c) {
  return std::to_string(r) + "x" + std::to_string(c);
}

}  // namespace detail

/// a * b. For each output element the products are summed over k in increasing order.
template <typename DerivedA, typename DerivedB>
Matrix<typename DerivedA::Scalar> matmul(const Eigen::MatrixBase<DerivedA>& a_in,
                                         const Eigen::MatrixBase<DerivedB>& b_in) {
  using Scalar = typename DerivedA::Scalar;
  if (a_in.cols() != b_in.rows()) {
    throw ShapeError("matmul: " + detail::shape_str(a_in.rows(), a_in.cols()) + " * " +
                     detail::shape_str(b_in.rows(), b_in.cols()));
  }
  // Ref copies only when the argument is not already contiguous row-major.
  const Eigen::Ref<const Matrix<Scalar>> a(a_in);
  const Eigen::Ref<const Matrix<Scalar>> b(b_in);
  const Eigen::Index n = a.rows(), inner = a.cols(), m = b.cols();
  Matrix<Scalar> out = Matrix<Scalar>::Zero(n, m);
  for (Eigen::Index i = 0; i < n; ++i) {
    Scalar* row = out.data() + i * m;
    const Scalar* arow = a.data() + i * a.outerStride();
    for (Eigen::Index k = 0; k < inner; ++k) {
      const Scalar aik = arow[k];
      const Scalar* brow = b.data() + k * b.outerStride();
      for (Eigen::Index j = 0; j < m; ++j) row[j] += aik * brow[j];
    }
  }
  return out;
}

/// a * b^T, same summation order as matmul.
template <typename DerivedA, typename DerivedB>
Matrix<typename DerivedA::Scalar> matmul_bt(const Eigen::MatrixBase<DerivedA>& a,
                                            const Eigen::MatrixBase<DerivedB>& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_bt: " + detail::shape_str(a.rows(), a.cols()) + " * (" +
                     detail::shape_str(b.rows(), b.cols()) + ")^T");
  }
  return matmul(a, b.transpose());
}

/// a^T * b, same summation order as matmul.
template <typename DerivedA, typename DerivedB>
Matrix<typename DerivedA::Scalar> matmul_at(const Eigen::MatrixBase<DerivedA>& a,
                                            const Eigen::MatrixBase<DerivedB>& b) {
  if (a.rows() != b.rows()) {
    throw ShapeError("matmul_at: (" + detail::shape_str(a.rows(), a.cols()) + ")^T * " +
                     detail::shape_str(b.rows(), b.cols()));
  }
  return matmul(a.transpose(), b);
}

/// Sequential sum, index 0 first.
template <typename Derived>
typename Derived::Scalar ordered_sum(const Eigen::MatrixBase<Derived>& v) {
  typename Derived::Scalar s(0);
  for (Eigen::Index i = 0; i < v.size(); ++i) s += v(i);
  return s;
}

/// Numerically stable softmax (max subtracted before exponentiation).
template <typename Derived>
Vector<typename Derived::Scalar> softmax(const Eigen::MatrixBase<Derived>& v) {
  using Scalar = typename Derived::Scalar;
  if (v.size() == 0) throw ShapeError("softmax: empty vector");
  Scalar mx = v(0);
  for (Eigen::Index i = 1; i < v.size(); ++i) mx = std::max<Scalar>(mx, v(i));
  Vector<Scalar> out(v.size());
  Scalar total(0);
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    out(i) = std::exp(v(i) - mx);
    total += out(i);
  }
  for (Eigen::Index i = 0; i < v.size(); ++i) out(i) /= total;
  return out;
}

/// log(sum(exp(v))) with max subtraction.
template <typename Derived>
typename Derived::Scalar log_sum_exp(const Eigen::MatrixBase<Derived>& v) {
  using Scalar = typename Derived::Scalar;
  if (v.size() == 0) throw ShapeError("log_sum_exp: empty vector");
  Scalar mx = v(0);
  for (Eigen::Index i = 1; i < v.size(); ++i) mx = std::max<Scalar>(mx, v(i));
  Scalar total(0);
  for (Eigen::Index i = 0; i < v.size(); ++i) total += std::exp(v(i) - mx);
  return mx + std::log(total);
}

/// gamma * (v - mean) / sqrt(var + eps) + beta, population variance.
template <typename DerivedV, typename DerivedG, typename DerivedB>
Vector<typename DerivedV::Scalar> layer_norm(const Eigen::MatrixBase<DerivedV>& v,
                                             const Eigen::MatrixBase<DerivedG>& gamma,
                                             const Eigen::MatrixBase<DerivedB>& beta,
                                             typename DerivedV::Scalar eps) {
  using Scalar = typename DerivedV::Scalar;
  if (v.size() != gamma.size() || v.size() != beta.size()) {
    throw ShapeError("layer_norm: length mismatch");
  }
  if (!(eps > Scalar(0))) throw ShapeError("layer_norm: eps must be positive");
  if (v.size() == 0) throw ShapeError("layer_norm: empty vector");
  const Eigen::Index n = v.size();
  const Scalar mean = ordered_sum(v) / Scalar(n);
  Scalar var(0);
  for (Eigen::Index i = 0; i < n; ++i) var += (v(i) - mean) * (v(i) - mean);
  var /= Scalar(n);
  const Scalar inv = Scalar(1) / std::sqrt(var + eps);
  Vector<Scalar> out(n);
  for (Eigen::Index i = 0; i < n; ++i) out(i) = gamma(i) * ((v(i) - mean) * inv) + beta(i);
  return out;
}

/// GELU, tanh approximation.
template <typename Scalar>
Scalar gelu(Scalar x) {
  const Scalar c = std::sqrt(Scalar(2) / std::numbers::pi_v<Scalar>);
  return Scalar(0.5) * x * (Scalar(1) + std::tanh(c * (x + Scalar(0.044715) * x * x * x)));
}

template <typename Scalar>
Scalar gelu_derivative(Scalar x) {
  const Scalar c = std::sqrt(Scalar(2) / std::numbers::pi_v<Scalar>);
  const Scalar u = c * (x + Scalar(0.044715) * x * x * x);
  const Scalar t = std::tanh(u);
  const Scalar du = c * (Scalar(1) + Scalar(3) * Scalar(0.044715) * x * x);
  return Scalar(0.5) * (Scalar(1) + t) + Scalar(0.5) * x * (Scalar(1) - t * t) * du;
}

/// -log softmax(logits)[label].
template <typename Derived>
typename Derived::Scalar cross_entropy(const Eigen::MatrixBase<Derived>& logits, Eigen::Index label) {
  if (label < 0 || label >= logits.size()) {
    throw IndexError("cross_entropy: label " + std::to_string(label) + " out of range for " +
                     std::to_string(logits.size()) + " classes");
  }
  const auto loss = log_sum_exp(logits) - logits(label);
  return loss < 0 ? typename Derived::Scalar(0) : loss;
}

/// Index of the largest entry; ties go to the lowest index.
template <typename Derived>
Eigen::Index argmax(const Eigen::MatrixBase<Derived>& v) {
  if (v.size() == 0) throw ShapeError("argmax: empty vector");
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < v.size(); ++i)
    if (v(i) > v(best)) best = i;
  return best;
}

/// True when every entry is finite.
template <typename Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      if (!std::isfinite(m(i, j))) return false;
  return true;
}

}  // namespace synapse
