#pragma once

// Complexity geometry on SU(2) and SU(4).
//
// The Lie algebra is spanned by e_k = i P_k / 2 over the non-identity Pauli
// strings P_k, with <A, B> = (4 / 2^n) Re tr(A^dagger B) so that the basis
// is orthonormal. A penalty metric is diagonal in this basis. Paths are
// written U' = U Omega with Omega measured in the metric, i.e. the metric is
// invariant under left translation; its sectional curvatures coincide with
// those of the right-invariant metric having the same inner product at the
// identity, since inversion is an isometry between the two.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include <unsupported/Eigen/KroneckerProduct>

#include "geolab/numerics.hpp"

namespace geolab::complexity {

class PauliBasis {
 public:
  explicit PauliBasis(int qubits) : qubits_(qubits) {
    if (qubits != 1 && qubits != 2) throw DomainError("PauliBasis: qubit count must be 1 or 2");
    const std::array<CMatrix, 4> single = paulis();
    const std::array<char, 4> names{'I', 'X', 'Y', 'Z'};
    const int strings = qubits == 1 ? 4 : 16;
    for (int s = 1; s < strings; ++s) {
      // Leading factor acts on the first qubit.
      const int hi = qubits == 1 ? s : s / 4, lo = qubits == 1 ? 0 : s % 4;
      CMatrix p = qubits == 1 ? single[static_cast<std::size_t>(hi)]
                              : CMatrix(Eigen::kroneckerProduct(single[static_cast<std::size_t>(hi)],
                                                                single[static_cast<std::size_t>(lo)]));
      generators_.push_back(Complex(0.0, 0.5) * p);
      body_.push_back(qubits == 1 ? 1 : (hi != 0) + (lo != 0));
      std::string label(1, names[static_cast<std::size_t>(hi)]);
      if (qubits == 2) label += names[static_cast<std::size_t>(lo)];
      labels_.push_back(label);
    }
    const int n = dim();
    structure_.assign(static_cast<std::size_t>(n * n * n), 0.0);
    for (int a = 0; a < n; ++a)
      for (int b = 0; b < n; ++b) {
        const Vector c = coefficients(generator(a) * generator(b) - generator(b) * generator(a));
        for (int k = 0; k < n; ++k) {
          if (std::abs(c(k)) < 1e-14) continue;
          structure_[static_cast<std::size_t>((a * n + b) * n + k)] = c(k);
          terms_.push_back({a, b, k, c(k)});
        }
      }
  }

  struct Term {
    int a, b, c;
    double f;
  };

  int qubits() const { return qubits_; }
  int dim() const { return static_cast<int>(generators_.size()); }
  int matrix_size() const { return qubits_ == 1 ? 2 : 4; }
  const CMatrix& generator(int k) const { return generators_.at(static_cast<std::size_t>(k)); }
  int body(int k) const { return body_.at(static_cast<std::size_t>(k)); }
  const std::string& label(int k) const { return labels_.at(static_cast<std::size_t>(k)); }

  /// [e_a, e_b] = sum_c f(a, b, c) e_c.
  double structure(int a, int b, int c) const {
    return structure_[static_cast<std::size_t>((a * dim() + b) * dim() + c)];
  }
  /// Nonzero structure constants (Pauli strings pairwise commute or
  /// anticommute, so each pair contributes at most one term).
  const std::vector<Term>& terms() const { return terms_; }

  CMatrix to_matrix(const Vector& x) const {
    check(x);
    CMatrix m = CMatrix::Zero(matrix_size(), matrix_size());
    for (int k = 0; k < dim(); ++k) m += x(k) * generator(k);
    return m;
  }

  /// Orthogonal projection of a matrix onto the algebra, in coefficients.
  Vector coefficients(const CMatrix& m) const {
    Vector x(dim());
    const double scale = 4.0 / matrix_size();
    for (int k = 0; k < dim(); ++k) x(k) = scale * (generator(k).adjoint() * m).trace().real();
    return x;
  }

  void check(const Vector& x) const {
    if (x.size() != dim()) throw DomainError("PauliBasis: coefficient vector has the wrong length");
  }

 private:
  static std::array<CMatrix, 4> paulis() {
    std::array<CMatrix, 4> p;
    for (CMatrix& m : p) m = CMatrix::Zero(2, 2);
    p[0] << 1, 0, 0, 1;
    p[1] << 0, 1, 1, 0;
    p[2] << 0, Complex(0, -1), Complex(0, 1), 0;
    p[3] << 1, 0, 0, -1;
    return p;
  }

  int qubits_;
  std::vector<CMatrix> generators_;
  std::vector<int> body_;
  std::vector<std::string> labels_;
  std::vector<double> structure_;
  std::vector<Term> terms_;
};

/// [X, Y] in basis coefficients.
inline Vector bracket(const PauliBasis& basis, const Vector& x, const Vector& y) {
  basis.check(x);
  basis.check(y);
  Vector out = Vector::Zero(basis.dim());
  for (const auto& t : basis.terms()) out(t.c) += x(t.a) * y(t.b) * t.f;
  return out;
}

class PenaltyMetric {
 public:
  PenaltyMetric(PauliBasis basis, Vector weights) : basis_(std::move(basis)), weights_(std::move(weights)) {
    if (weights_.size() != basis_.dim()) throw DomainError("PenaltyMetric: one weight per generator required");
    if (!weights_.allFinite() || weights_.minCoeff() < 1.0) throw DomainError("PenaltyMetric: weights must be >= 1");
  }

  static PenaltyMetric bi_invariant(int qubits) {
    PauliBasis b(qubits);
    const int n = b.dim();
    return PenaltyMetric(std::move(b), Vector::Ones(n));
  }

  /// Weight q on every generator acting on at least `min_body` qubits.
  static PenaltyMetric body_penalty(int qubits, int min_body, double q) {
    PauliBasis b(qubits);
    Vector w = Vector::Ones(b.dim());
    for (int k = 0; k < b.dim(); ++k)
      if (b.body(k) >= min_body) w(k) = q;
    return PenaltyMetric(std::move(b), w);
  }

  /// Weight q on the generators with the given labels ("Z", "XX", ...).
  static PenaltyMetric penalize(int qubits, const std::vector<std::string>& labels, double q) {
    PauliBasis b(qubits);
    Vector w = Vector::Ones(b.dim());
    for (const std::string& l : labels) {
      int hit = -1;
      for (int k = 0; k < b.dim(); ++k)
        if (b.label(k) == l) hit = k;
      if (hit < 0) throw DomainError("PenaltyMetric: unknown generator label " + l);
      w(hit) = q;
    }
    return PenaltyMetric(std::move(b), w);
  }

  const PauliBasis& basis() const { return basis_; }
  const Vector& weights() const { return weights_; }
  int dim() const { return basis_.dim(); }

  double inner(const Vector& x, const Vector& y) const { return (weights_.array() * x.array() * y.array()).sum(); }
  double norm(const Vector& x) const { return std::sqrt(inner(x, x)); }

  /// Coadjoint action in coefficients: (ad*_x m)_b = sum_{a,c} x_a m_c f(a, b, c).
  Vector coadjoint(const Vector& x, const Vector& m) const {
    Vector out = Vector::Zero(dim());
    for (const auto& t : basis_.terms()) out(t.b) += x(t.a) * m(t.c) * t.f;
    return out;
  }

  /// Metric transpose of ad_x: <ad_star(x, y), z> = <y, [x, z]>.
  Vector ad_star(const Vector& x, const Vector& y) const {
    return coadjoint(x, weights_.cwiseProduct(y)).cwiseQuotient(weights_);
  }

  /// Levi-Civita connection on invariant fields.
  Vector connection(const Vector& x, const Vector& y) const {
    return 0.5 * (bracket(basis_, x, y) - ad_star(x, y) - ad_star(y, x));
  }

 private:
  PauliBasis basis_;
  Vector weights_;
};

inline constexpr double kMinSectionArea = 1e-14;

/// <R(X, Y) Y, X> / (|X|^2 |Y|^2 - <X, Y>^2).
inline double sectional_curvature(const PenaltyMetric& g, const Vector& x, const Vector& y) {
  g.basis().check(x);
  g.basis().check(y);
  const double area2 = g.inner(x, x) * g.inner(y, y) - std::pow(g.inner(x, y), 2);
  if (!(area2 >= kMinSectionArea)) throw DomainError("sectional_curvature: degenerate section");
  const Vector xy = bracket(g.basis(), x, y);
  const Vector r = g.connection(x, g.connection(y, y)) - g.connection(y, g.connection(x, y)) - g.connection(xy, y);
  return g.inner(r, x) / area2;
}

/// The same quantity from Arnold's formula for invariant metrics, with
/// B(u, v) = ad_star(v, u):
///   <R(x,y)y,x> = <d,d> + 2<a,b> - 3<a,a> - 4<B(x,x)/2, B(y,y)/2>
/// where 2d = B(x,y) + B(y,x), 2b = B(x,y) - B(y,x), 2a = [x,y].
inline double arnold_curvature(const PenaltyMetric& g, const Vector& x, const Vector& y) {
  g.basis().check(x);
  g.basis().check(y);
  const double area2 = g.inner(x, x) * g.inner(y, y) - std::pow(g.inner(x, y), 2);
  if (!(area2 >= kMinSectionArea)) throw DomainError("arnold_curvature: degenerate section");
  auto b = [&](const Vector& u, const Vector& v) { return g.ad_star(v, u); };
  const Vector bxy = b(x, y), byx = b(y, x);
  const Vector d = 0.5 * (bxy + byx), skew = 0.5 * (bxy - byx), a = 0.5 * bracket(g.basis(), x, y);
  const double num =
      g.inner(d, d) + 2.0 * g.inner(a, skew) - 3.0 * g.inner(a, a) - g.inner(b(x, x), b(y, y));
  return num / area2;
}

inline constexpr double kCertifyMargin = 1e-8;
inline constexpr double kCertifyAgreement = 1e-10;

struct CurvatureCertificate {
  double curvature = 0.0;  // connection formula
  double arnold = 0.0;     // Arnold's formula
  bool negative = false;   // both below -kCertifyMargin and agreeing
};

/// Negative-curvature certificate from two independent evaluations.
inline CurvatureCertificate certify_section(const PenaltyMetric& g, const Vector& x, const Vector& y) {
  CurvatureCertificate c;
  c.curvature = sectional_curvature(g, x, y);
  c.arnold = arnold_curvature(g, x, y);
  const double scale = std::max(1.0, std::abs(c.curvature));
  c.negative = c.curvature < -kCertifyMargin && c.arnold < -kCertifyMargin &&
               std::abs(c.curvature - c.arnold) <= kCertifyAgreement * scale;
  return c;
}

/// Two G-orthonormal directions drawn from the Gaussian on coefficients.
inline std::array<Vector, 2> random_section(const PenaltyMetric& g, Rng& rng) {
  Vector x = rng.normal_vector(g.dim());
  x /= g.norm(x);
  Vector y = rng.normal_vector(g.dim());
  y -= g.inner(x, y) * x;
  y /= g.norm(y);
  return {x, y};
}

// ---------------------------------------------------------------------------
// Geodesics

struct GeodesicSample {
  double t = 0.0;
  CMatrix u;
  Vector omega;
};

struct GeodesicPath {
  Vector omega0;
  std::vector<GeodesicSample> samples;
  double length = 0.0;
  double max_unitarity_defect = 0.0;  // max ||U^dagger U - I||_F
  double max_energy_drift = 0.0;      // max relative change of <Omega, G Omega>

  const CMatrix& endpoint() const { return samples.back().u; }
};

inline constexpr int kReunitarizeEvery = 10;

/// Nearest unitary in Frobenius norm.
inline CMatrix polar_unitary(const CMatrix& m) {
  Eigen::JacobiSVD<CMatrix> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  return svd.matrixU() * svd.matrixV().adjoint();
}

inline double unitarity_defect(const CMatrix& u) {
  return (u.adjoint() * u - CMatrix::Identity(u.rows(), u.cols())).norm();
}

namespace detail {

// State layout: Re U (column major), Im U, Omega.
inline Vector pack(const CMatrix& u, const Vector& omega) {
  const Eigen::Index d2 = u.size();
  Vector s(2 * d2 + omega.size());
  for (Eigen::Index k = 0; k < d2; ++k) {
    s(k) = u.data()[k].real();
    s(d2 + k) = u.data()[k].imag();
  }
  s.tail(omega.size()) = omega;
  return s;
}

inline CMatrix unpack_u(const Vector& s, int d) {
  CMatrix u(d, d);
  const Eigen::Index d2 = u.size();
  for (Eigen::Index k = 0; k < d2; ++k) u.data()[k] = Complex(s(k), s(d2 + k));
  return u;
}

}  // namespace detail

/// Euler-Arnold flow U' = U Omega, (G Omega)' = ad*_Omega (G Omega), by
/// fixed-step RK4 with polar re-unitarization every 10 steps.
inline GeodesicPath geodesic_shoot(const PenaltyMetric& g, const Vector& omega0, double t_end = 1.0, double h = 0.01) {
  g.basis().check(omega0);
  require_finite(omega0, "geodesic_shoot");
  const int d = g.basis().matrix_size();
  const Eigen::Index d2 = static_cast<Eigen::Index>(d) * d;
  const PauliBasis& basis = g.basis();

  auto field = [&](double, const Vector& s) {
    const CMatrix u = detail::unpack_u(s, d);
    const Vector omega = s.tail(g.dim());
    const CMatrix du = u * basis.to_matrix(omega);
    Vector out(s.size());
    for (Eigen::Index k = 0; k < d2; ++k) {
      out(k) = du.data()[k].real();
      out(d2 + k) = du.data()[k].imag();
    }
    out.tail(g.dim()) = g.ad_star(omega, omega);
    return out;
  };
  auto reproject = [&](std::size_t step, numerics::OdeState<Vector>& st) {
    if (step % kReunitarizeEvery != 0) return;
    const CMatrix u = polar_unitary(detail::unpack_u(st.state, d));
    st.state.head(2 * d2) = detail::pack(u, Vector()).head(2 * d2);
  };

  const auto traj = numerics::rk4_integrate(
      field, numerics::OdeState<Vector>{0.0, detail::pack(CMatrix::Identity(d, d), omega0), h}, t_end, h, reproject);

  GeodesicPath path;
  path.omega0 = omega0;
  const double e0 = g.inner(omega0, omega0);
  path.length = std::sqrt(e0) * t_end;
  path.samples.reserve(traj.size());
  for (const auto& st : traj) {
    GeodesicSample s{st.time, detail::unpack_u(st.state, d), st.state.tail(g.dim())};
    path.max_unitarity_defect = std::max(path.max_unitarity_defect, unitarity_defect(s.u));
    if (e0 > 0.0) path.max_energy_drift = std::max(path.max_energy_drift, std::abs(g.inner(s.omega, s.omega) - e0) / e0);
    path.samples.push_back(std::move(s));
  }
  return path;
}

// ---------------------------------------------------------------------------
// Shooting

struct ShootingOptions {
  int restarts = 4;         // random starts in addition to the logarithm starts
  std::uint64_t seed = 1;
  double h = 0.01;
  double tol = 1e-4;        // endpoint error accepted as converged
  int max_iters = 60;
  double fd_step = 1e-7;

  void validate() const {
    if (restarts < 0) throw DomainError("ShootingOptions: restarts must be nonnegative");
    if (!(h > 0.0 && h <= 1.0)) throw DomainError("ShootingOptions: h must lie in (0, 1]");
    if (!(tol > 0.0)) throw DomainError("ShootingOptions: tol must be positive");
    if (max_iters < 1) throw DomainError("ShootingOptions: max_iters must be positive");
  }
};

/// Upper bound on a geodesic distance found by shooting. `endpoint_error`
/// is the residual of the returned shot.
struct ShootingResult {
  double distance = 0.0;
  Vector omega0;
  double endpoint_error = 0.0;
  int converged_shots = 0;
  int total_shots = 0;
};

namespace detail {

inline Vector complex_to_real(const CMatrix& m) {
  Vector r(2 * m.size());
  for (Eigen::Index k = 0; k < m.size(); ++k) {
    r(2 * k) = m.data()[k].real();
    r(2 * k + 1) = m.data()[k].imag();
  }
  return r;
}

// Forward-difference Jacobian of a vector residual.
template <class Residual>
Matrix jacobian(const Residual& res, const Vector& x, const Vector& r0, double step) {
  Matrix j(r0.size(), x.size());
  Vector probe = x;
  for (Eigen::Index k = 0; k < x.size(); ++k) {
    probe(k) = x(k) + step;
    j.col(k) = (res(probe) - r0) / step;
    probe(k) = x(k);
  }
  return j;
}

// Levenberg-Marquardt on ||res||; returns the final point.
template <class Residual>
Vector levenberg_marquardt(const Residual& res, Vector x, int max_iters, double target, double step) {
  Vector r = res(x);
  double cost = r.squaredNorm();
  double mu = 1e-3;
  for (int it = 0; it < max_iters && std::sqrt(cost) > target; ++it) {
    const Matrix j = jacobian(res, x, r, step);
    const Matrix jtj = j.transpose() * j;
    const Vector jtr = j.transpose() * r;
    bool improved = false;
    for (int tries = 0; tries < 12; ++tries) {
      Matrix a = jtj;
      a.diagonal().array() += mu * (1.0 + jtj.diagonal().array());
      const Vector dx = a.ldlt().solve(-jtr);
      const Vector xn = x + dx;
      const Vector rn = res(xn);
      if (rn.allFinite() && rn.squaredNorm() < cost) {
        x = xn;
        r = rn;
        cost = rn.squaredNorm();
        mu = std::max(mu / 3.0, 1e-12);
        improved = true;
        break;
      }
      mu *= 4.0;
    }
    if (!improved) break;
  }
  return x;
}

inline bool lexicographically_less(const Vector& a, const Vector& b) {
  for (Eigen::Index k = 0; k < a.size(); ++k)
    if (a(k) != b(k)) return a(k) < b(k);
  return false;
}

// Keep the shorter shot; equal lengths fall back to lexicographic order.
inline void keep_best(ShootingResult& best, bool& have, double len, const Vector& x, double err) {
  if (!have || len < best.distance || (len == best.distance && lexicographically_less(x, best.omega0))) {
    best.distance = len;
    best.omega0 = x;
    best.endpoint_error = err;
    have = true;
  }
}

// Principal logarithms of the d phase-rotated copies of U that lie in SU(d).
inline std::vector<Vector> log_starts(const PauliBasis& basis, const CMatrix& u) {
  const int d = basis.matrix_size();
  const double det_phase = std::arg(u.determinant());
  std::vector<Vector> out;
  for (int k = 0; k < d; ++k) {
    const double phase = -(det_phase + 2.0 * std::numbers::pi * k) / d;
    const CMatrix rotated = std::polar(1.0, phase) * u;
    try {
      out.push_back(basis.coefficients(numerics::principal_log(rotated)));
    } catch (const DomainError&) {
      // -1 in the spectrum: the neighbouring phases still supply starts.
    }
  }
  return out;
}

inline Vector random_start(const PenaltyMetric& g, Rng& rng) {
  Vector x = rng.normal_vector(g.dim());
  const double radius = 2.0 * std::numbers::pi * rng.uniform();
  return x * (radius / g.norm(x));
}

}  // namespace detail

/// Endpoint residual of a shot against `target` modulo global phase:
/// ||U(1) - e^{i theta} target||_F with theta = arg tr(target^dagger U(1)).
inline double endpoint_error(const CMatrix& u1, const CMatrix& target) {
  const Complex tr = (target.adjoint() * u1).trace();
  const Complex phase = std::abs(tr) > 0.0 ? tr / std::abs(tr) : Complex(1.0, 0.0);
  return (u1 - phase * target).norm();
}

/// Representative of the phase class of u: the largest-magnitude entry
/// (first on near ties) is made real and positive.
inline CMatrix canonical_phase(const CMatrix& u) {
  const double top = u.cwiseAbs().maxCoeff();
  for (Eigen::Index j = 0; j < u.cols(); ++j)
    for (Eigen::Index i = 0; i < u.rows(); ++i)
      if (std::abs(u(i, j)) >= top * (1.0 - 1e-9)) return u * (std::conj(u(i, j)) / std::abs(u(i, j)));
  return u;
}

/// Shortest converged geodesic from I to `target` (modulo global phase)
/// over logarithm starts and `opt.restarts` random starts. An upper bound
/// on the complexity C(U).
inline ShootingResult complexity_distance(const PenaltyMetric& g, const CMatrix& target_in,
                                          const ShootingOptions& opt = {}) {
  opt.validate();
  const int d = g.basis().matrix_size();
  if (target_in.rows() != d || target_in.cols() != d) throw DomainError("complexity_distance: target has the wrong size");
  require_finite(target_in, "complexity_distance");
  if (unitarity_defect(target_in) > 1e-10) throw DomainError("complexity_distance: target is not unitary");
  const CMatrix target = canonical_phase(target_in);

  ShootingResult best;
  if (endpoint_error(CMatrix::Identity(d, d), target) < 1e-12) {
    best.omega0 = Vector::Zero(g.dim());
    best.converged_shots = best.total_shots = 1;
    return best;
  }

  auto residual = [&](const Vector& x) {
    const CMatrix u1 = geodesic_shoot(g, x, 1.0, opt.h).endpoint();
    const Complex tr = (target.adjoint() * u1).trace();
    const Complex phase = std::abs(tr) > 0.0 ? tr / std::abs(tr) : Complex(1.0, 0.0);
    return detail::complex_to_real(u1 - phase * target);
  };

  std::vector<Vector> starts = detail::log_starts(g.basis(), target);
  Rng rng(opt.seed);
  for (int k = 0; k < opt.restarts; ++k) starts.push_back(detail::random_start(g, rng));

  bool have = false;
  double best_err = std::numeric_limits<double>::infinity();
  for (const Vector& s : starts) {
    ++best.total_shots;
    Vector x;
    try {
      x = detail::levenberg_marquardt(residual, s, opt.max_iters, 1e-3 * opt.tol, opt.fd_step);
    } catch (const IntegrationBlowup&) {
      continue;
    }
    const double err = residual(x).norm();
    best_err = std::min(best_err, err);
    if (err >= opt.tol) continue;
    ++best.converged_shots;
    detail::keep_best(best, have, g.norm(x), x, err);
  }
  if (!have) throw NoConvergence("complexity_distance: no shot reached the target", best_err);
  return best;
}

/// 1 - |<psi| U |0...0>|^2.
inline double infidelity(const CMatrix& u, const CVector& psi) {
  return std::max(0.0, 1.0 - std::norm(psi.dot(u.col(0))));
}

inline CVector normalized_state(const CVector& psi) {
  const double n = psi.norm();
  if (!(n > 0.0) || !psi.allFinite()) throw DomainError("state: amplitudes must be finite and nonzero");
  if (std::abs(n - 1.0) > 1e-12) throw DomainError("state: amplitude vector is not unit norm");
  return psi;
}

/// Unitary whose first column is psi (Householder completion).
inline CMatrix completion(const CVector& psi) {
  const Eigen::Index d = psi.size();
  const Complex phase = std::abs(psi(0)) > 0.0 ? psi(0) / std::abs(psi(0)) : Complex(1.0, 0.0);
  CVector v = psi / phase;
  v(0) -= 1.0;
  CMatrix h = CMatrix::Identity(d, d);
  if (v.norm() > 1e-14) h -= 2.0 * v * v.adjoint() / v.squaredNorm();
  return phase * h;
}

struct StateOptions {
  ShootingOptions shooting;
  double fidelity_tol = 1e-6;  // accepted infidelity
  int descent_iters = 60;

  void validate() const {
    shooting.validate();
    if (!(fidelity_tol > 0.0)) throw DomainError("StateOptions: fidelity_tol must be positive");
    if (descent_iters < 0) throw DomainError("StateOptions: descent_iters must be nonnegative");
  }
};

/// Shortest converged geodesic whose endpoint carries |0...0> to psi up to
/// phase. Each start is first restored onto the constraint set, then its
/// length is reduced along the constraint's tangent space with a
/// restoration step after every move. An upper bound on C(|psi>).
inline ShootingResult state_complexity(const PenaltyMetric& g, const CVector& psi_in, const StateOptions& opt = {}) {
  opt.validate();
  const int d = g.basis().matrix_size();
  if (psi_in.size() != d) throw DomainError("state_complexity: state has the wrong dimension");
  const CVector psi = normalized_state(psi_in);
  const ShootingOptions& so = opt.shooting;

  ShootingResult best;
  if (infidelity(CMatrix::Identity(d, d), psi) < 1e-14) {
    best.omega0 = Vector::Zero(g.dim());
    best.converged_shots = best.total_shots = 1;
    return best;
  }

  auto residual = [&](const Vector& x) {
    const CVector col = geodesic_shoot(g, x, 1.0, so.h).endpoint().col(0);
    const Complex ov = psi.dot(col);
    const Complex phase = std::abs(ov) > 0.0 ? ov / std::abs(ov) : Complex(1.0, 0.0);
    const CVector r = col / phase - psi;
    Vector out(2 * d);
    for (int k = 0; k < d; ++k) {
      out(2 * k) = r(k).real();
      out(2 * k + 1) = r(k).imag();
    }
    return out;
  };
  // |r|^2 = 2 - 2 |<psi|U e0>|, so |r| < sqrt(tol) keeps infidelity below tol.
  const double feasible = std::sqrt(opt.fidelity_tol);
  const Vector w = g.weights();

  // Minimum-G-norm Gauss-Newton corrections back onto the constraint set.
  auto restore = [&](Vector x) {
    for (int it = 0; it < 30; ++it) {
      const Vector r = residual(x);
      if (r.norm() < 1e-3 * feasible) break;
      const Matrix j = detail::jacobian(residual, x, r, so.fd_step);
      const Matrix jw = j * w.cwiseInverse().asDiagonal();
      const Matrix gram = jw * j.transpose();
      const Vector lam = gram.completeOrthogonalDecomposition().solve(r);
      const Vector xn = x - w.cwiseInverse().asDiagonal() * (j.transpose() * lam);
      if (!(residual(xn).norm() < r.norm())) break;
      x = xn;
    }
    return x;
  };

  std::vector<Vector> starts = detail::log_starts(g.basis(), completion(psi));
  Rng rng(so.seed);
  for (int k = 0; k < so.restarts; ++k) starts.push_back(detail::random_start(g, rng));

  bool have = false;
  double best_err = std::numeric_limits<double>::infinity();
  for (const Vector& s : starts) {
    ++best.total_shots;
    try {
      Vector x = detail::levenberg_marquardt(residual, s, so.max_iters, 1e-3 * feasible, so.fd_step);
      x = restore(x);
      if (!(residual(x).norm() < feasible)) {
        best_err = std::min(best_err, infidelity(geodesic_shoot(g, x, 1.0, so.h).endpoint(), psi));
        continue;
      }
      double step = 0.5;
      for (int it = 0; it < opt.descent_iters && step > 1e-6; ++it) {
        // Metric gradient of the squared length, projected onto the
        // constraint tangent space in the G inner product.
        const Vector r = residual(x);
        const Matrix j = detail::jacobian(residual, x, r, so.fd_step);
        const Matrix jw = j * w.cwiseInverse().asDiagonal();
        const Vector lam = (jw * j.transpose()).completeOrthogonalDecomposition().solve(j * x);
        const Vector dir = x - w.cwiseInverse().asDiagonal() * (j.transpose() * lam);
        if (g.norm(dir) < 1e-9 * std::max(1.0, g.norm(x))) break;
        bool moved = false;
        while (step > 1e-6) {
          const Vector xn = restore(x - step * dir);
          if (residual(xn).norm() < feasible && g.norm(xn) < g.norm(x) - 1e-12) {
            x = xn;
            moved = true;
            step = std::min(1.0, step * 1.5);
            break;
          }
          step *= 0.5;
        }
        if (!moved) break;
      }
      const double err = infidelity(geodesic_shoot(g, x, 1.0, so.h).endpoint(), psi);
      best_err = std::min(best_err, err);
      if (err >= opt.fidelity_tol) continue;
      ++best.converged_shots;
      detail::keep_best(best, have, g.norm(x), x, err);
    } catch (const IntegrationBlowup&) {
      continue;
    }
  }
  if (!have) throw NoConvergence("state_complexity: no shot reached the state", best_err);
  return best;
}

// ---------------------------------------------------------------------------
// Geodesic deviation

inline constexpr double kJacobiScale = 1e-6;

struct DeviationSample {
  double t = 0.0;
  double deviation = 0.0;  // ||U1(t) - U2(t)||_F / ||delta||_G
};

/// Finite-difference Jacobi field: geodesics from omega0 and omega0 + delta
/// integrated side by side.
inline std::vector<DeviationSample> jacobi_deviation(const PenaltyMetric& g, const Vector& omega0, const Vector& delta,
                                                     double t_end, double h = 0.01) {
  const double dn = g.norm(delta);
  if (!(dn > 0.0)) throw DomainError("jacobi_deviation: perturbation must be nonzero");
  if (dn > 1e-4 * g.norm(omega0)) throw DomainError("jacobi_deviation: perturbation exceeds 1e-4 |omega0|");
  const GeodesicPath a = geodesic_shoot(g, omega0, t_end, h);
  const GeodesicPath b = geodesic_shoot(g, omega0 + delta, t_end, h);
  std::vector<DeviationSample> out;
  out.reserve(a.samples.size());
  for (std::size_t k = 0; k < a.samples.size(); ++k)
    out.push_back({a.samples[k].t, (a.samples[k].u - b.samples[k].u).norm() / dn});
  return out;
}

/// Perturbation along `direction` scaled to kJacobiScale |omega0|_G.
inline Vector jacobi_perturbation(const PenaltyMetric& g, const Vector& omega0, const Vector& direction) {
  const double dn = g.norm(direction);
  if (!(dn > 0.0)) throw DomainError("jacobi_perturbation: direction must be nonzero");
  return direction * (kJacobiScale * g.norm(omega0) / dn);
}

/// Least-squares line through (x, y) with coefficient of determination.
struct LineFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r2 = 0.0;
};

inline LineFit fit_line(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw DomainError("fit_line: need at least two paired points");
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (!(sxx > 0.0)) throw DomainError("fit_line: abscissae are all equal");
  LineFit f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  f.r2 = syy > 0.0 ? (sxy * sxy) / (sxx * syy) : 1.0;
  return f;
}

/// Log-linear fit of a deviation curve over t > 0 up to the first sample
/// exceeding `saturation` times the curve's maximum.
inline LineFit growth_fit(const std::vector<DeviationSample>& curve, double saturation = 1e-2) {
  double peak = 0.0;
  for (const DeviationSample& s : curve) peak = std::max(peak, s.deviation);
  std::vector<double> t, y;
  for (const DeviationSample& s : curve) {
    if (s.t <= 0.0) continue;
    if (s.deviation > saturation * peak) break;
    if (!(s.deviation > 0.0)) continue;
    t.push_back(s.t);
    y.push_back(std::log(s.deviation));
  }
  return fit_line(t, y);
}

}  // namespace geolab::complexity
