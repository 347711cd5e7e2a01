#pragma once

// Shared numerical kernels: matrix functions, fixed-step RK4, central
// differences and a platform-stable random source.

#include <Eigen/Dense>
#include <unsupported/Eigen/MatrixFunctions>

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "geolab/errors.hpp"

namespace geolab {

using Matrix = Eigen::MatrixXd;
using CMatrix = Eigen::MatrixXcd;
using Vector = Eigen::VectorXd;
using CVector = Eigen::VectorXcd;
using Complex = std::complex<double>;

template <class Derived>
void require_finite(const Eigen::DenseBase<Derived>& m, const char* what) {
  if (!m.derived().allFinite()) throw DomainError(std::string(what) + ": non-finite entry");
}

namespace numerics {

inline constexpr double kSymmetryTol = 1e-10;
inline constexpr double kPsdClamp = 1e-12;

/// M^p for symmetric positive semidefinite M and p in [0, 1], through the
/// eigendecomposition Q diag(lambda^p) Q^T. Eigenvalues slightly below zero
/// (down to -1e-12 relative to the spectral radius) are clamped to zero;
/// 0^0 = 1, so M^0 = I for every M.
inline Matrix fractional_power(const Matrix& m, double p) {
  require_finite(m, "fractional_power");
  if (m.rows() != m.cols()) throw DomainError("fractional_power: matrix is not square");
  if (!(p >= 0.0 && p <= 1.0)) throw DomainError("fractional_power: exponent " + std::to_string(p) + " outside [0, 1]");
  const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
  if ((m - m.transpose()).cwiseAbs().maxCoeff() > kSymmetryTol * scale)
    throw DomainError("fractional_power: matrix is not symmetric");
  if (p == 0.0) return Matrix::Identity(m.rows(), m.cols());

  Eigen::SelfAdjointEigenSolver<Matrix> eig(0.5 * (m + m.transpose()));
  Vector lambda = eig.eigenvalues();
  const double radius = std::max(1.0, lambda.cwiseAbs().maxCoeff());
  for (Eigen::Index i = 0; i < lambda.size(); ++i) {
    if (lambda(i) < -kPsdClamp * radius)
      throw DomainError("fractional_power: eigenvalue " + std::to_string(lambda(i)) + " is negative");
    lambda(i) = std::pow(std::max(lambda(i), 0.0), p);
  }
  const Matrix& q = eig.eigenvectors();
  return q * lambda.asDiagonal() * q.transpose();
}

namespace detail {

template <class Mat>
void check_log_spectrum(const Mat& m) {
  using Scalar = typename Mat::Scalar;
  Eigen::Matrix<Complex, Eigen::Dynamic, 1> ev;
  if constexpr (std::is_same_v<Scalar, double>) {
    ev = Eigen::EigenSolver<Mat>(m, false).eigenvalues();
  } else {
    ev = Eigen::ComplexEigenSolver<Mat>(m, false).eigenvalues();
  }
  const double scale = std::max(1.0, ev.cwiseAbs().maxCoeff());
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    const Complex z = ev(i);
    if (std::abs(z) <= 1e-14 * scale || (std::abs(z.imag()) <= 1e-12 * scale && z.real() <= 0.0)) {
      std::ostringstream os;
      os << "principal_log: eigenvalue " << z.real() << (z.imag() < 0 ? "-" : "+") << std::abs(z.imag())
         << "i lies on the closed negative real axis";
      throw DomainError(os.str());
    }
  }
}

}  // namespace detail

/// Principal matrix logarithm. Throws DomainError naming the offending
/// eigenvalue when the spectrum touches (-inf, 0].
inline Matrix principal_log(const Matrix& m) {
  require_finite(m, "principal_log");
  if (m.rows() != m.cols()) throw DomainError("principal_log: matrix is not square");
  detail::check_log_spectrum(m);
  return m.log();
}

inline CMatrix principal_log(const CMatrix& m) {
  require_finite(m, "principal_log");
  if (m.rows() != m.cols()) throw DomainError("principal_log: matrix is not square");
  detail::check_log_spectrum(m);
  return m.log();
}

// Scaling-and-squaring Pade exponential.
inline Matrix expm(const Matrix& x) {
  require_finite(x, "expm");
  return x.exp();
}

inline CMatrix expm(const CMatrix& x) {
  require_finite(x, "expm");
  return x.exp();
}

template <class Vec>
struct OdeState {
  double time = 0.0;
  Vec state;
  double h = 0.0;  // step that produced this sample
};

struct NoStepHook {
  template <class Vec>
  void operator()(std::size_t, OdeState<Vec>&) const {}
};

/// One classical RK4 step of size h for the autonomous-in-form field
/// f(t, x).
template <class Vec, class Field>
Vec rk4_step(const Field& f, double t, const Vec& x, double h) {
  const Vec k1 = f(t, x);
  const Vec k2 = f(t + 0.5 * h, Vec(x + (0.5 * h) * k1));
  const Vec k3 = f(t + 0.5 * h, Vec(x + (0.5 * h) * k2));
  const Vec k4 = f(t + h, Vec(x + h * k3));
  return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

/// Fixed-step RK4 trajectory from x0 to t_end. The last step is shortened so
/// the final sample sits exactly on t_end. `after_step(i, state)` runs after
/// step i and may modify the state in place (re-projection onto a manifold).
template <class Vec, class Field, class Hook = NoStepHook>
std::vector<OdeState<Vec>> rk4_integrate(const Field& f, OdeState<Vec> x0, double t_end, double h,
                                         Hook&& after_step = {}) {
  if (!(h > 0.0)) throw DomainError("rk4_integrate: step must be positive");
  if (h > t_end - x0.time) throw DomainError("rk4_integrate: step exceeds integration interval");
  if (!x0.state.allFinite()) throw IntegrationBlowup(0, x0.time);

  const double span = t_end - x0.time;
  const auto steps = static_cast<std::size_t>(std::ceil(span / h - 1e-9));
  std::vector<OdeState<Vec>> out;
  out.reserve(steps + 1);
  x0.h = h;
  out.push_back(x0);
  const double t0 = x0.time;
  for (std::size_t i = 1; i <= steps; ++i) {
    const OdeState<Vec>& prev = out.back();
    const double t_next = (i == steps) ? t_end : t0 + static_cast<double>(i) * h;
    const double step = t_next - prev.time;
    OdeState<Vec> next{t_next, rk4_step(f, prev.time, prev.state, step), step};
    if (!next.state.allFinite()) throw IntegrationBlowup(i, t_next);
    after_step(i, next);
    out.push_back(std::move(next));
  }
  return out;
}

/// Central-difference gradient (f(x + eps e_i) - f(x - eps e_i)) / (2 eps).
template <class Fn>
Vector fd_gradient(const Fn& f, const Vector& x, double eps = 1e-5) {
  Vector g(x.size());
  Vector probe = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    probe(i) = x(i) + eps;
    const double up = f(static_cast<const Vector&>(probe));
    probe(i) = x(i) - eps;
    const double down = f(static_cast<const Vector&>(probe));
    probe(i) = x(i);
    g(i) = (up - down) / (2.0 * eps);
  }
  return g;
}

inline double relative_error(const Eigen::Ref<const Matrix>& got, const Eigen::Ref<const Matrix>& want) {
  const double denom = std::max(want.norm(), 1e-300);
  return (got - want).norm() / denom;
}

}  // namespace numerics

/// mt19937_64 with hand-rolled uniform/normal transforms so that streams are
/// identical across standard libraries (std::normal_distribution is not).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  Matrix normal_matrix(Eigen::Index rows, Eigen::Index cols, double stddev = 1.0) {
    Matrix m(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j)
      for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = stddev * normal();
    return m;
  }

  Vector normal_vector(Eigen::Index n, double stddev = 1.0) { return normal_matrix(n, 1, stddev); }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace geolab
