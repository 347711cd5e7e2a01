#pragma once

// Desk-scale LDDMM on 1D signals and small 2D images.
//
// Time is split into T intervals of length dt = 1/T with a velocity field
// u_i held constant on [t_i, t_{i+1}). Three families of maps are built:
//   forward  phi_{0,t_i}  Lagrangian particle tracking (phi' = u o phi)
//   to_zero  phi_{t_i,0}  semi-Lagrangian: phi_{i+1,0}(x) = phi_{i,0}(x - dt u_i(x))
//   to_one   phi_{t_i,1}  semi-Lagrangian: phi_{i,1}(x) = phi_{i+1,1}(x + dt u_i(x))
// The deformed template is J^0_1 = I0 o phi_{1,0}, so the matching term is
// beta |I1 - I0 o phi_{1,0}|^2 and the descent direction below is the exact
// gradient of this discrete energy.

#include <array>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "geolab/numerics.hpp"

namespace geolab::lddmm {

struct Grid {
  int dims = 1;
  std::array<int, 2> size{8, 1};  // {nx, ny}; ny = 1 in 1D
  std::array<double, 2> spacing{1.0, 1.0};

  Grid() = default;
  Grid(int nx, double hx) : dims(1), size{nx, 1}, spacing{hx, 1.0} { validate(); }
  Grid(int nx, int ny, double hx, double hy) : dims(2), size{nx, ny}, spacing{hx, hy} { validate(); }

  void validate() const {
    if (dims != 1 && dims != 2) throw DomainError("Grid: dims must be 1 or 2");
    for (int a = 0; a < dims; ++a) {
      if (size[a] < 8 || size[a] > 128) throw DomainError("Grid: axis sizes must lie in [8, 128]");
      if (!(spacing[a] > 0.0)) throw DomainError("Grid: spacing must be positive");
    }
    if (dims == 1 && size[1] != 1) throw DomainError("Grid: 1D grids have a single row");
  }

  int nodes() const { return size[0] * size[1]; }
  int index(int ix, int iy) const { return iy * size[0] + ix; }
  double cell_volume() const { return dims == 1 ? spacing[0] : spacing[0] * spacing[1]; }
  double coord(int node, int axis) const {
    return axis == 0 ? (node % size[0]) * spacing[0] : (node / size[0]) * spacing[1];
  }

  friend bool operator==(const Grid& a, const Grid& b) {
    return a.dims == b.dims && a.size == b.size && a.spacing == b.spacing;
  }
};

struct Image {
  Grid grid;
  Vector values;  // row-major node order

  Image() = default;
  Image(Grid g, Vector v) : grid(g), values(std::move(v)) {
    if (values.size() != grid.nodes()) throw DomainError("Image: value count does not match grid");
    require_finite(values, "Image");
  }
};

/// u_t sampled on T intervals; values[i] is nodes x dims.
struct VelocityField {
  Grid grid;
  std::vector<Matrix> values;

  VelocityField() = default;
  VelocityField(Grid g, int timesteps) : grid(g) {
    if (timesteps < 1) throw DomainError("VelocityField: needs at least one timestep");
    values.assign(static_cast<std::size_t>(timesteps), Matrix::Zero(g.nodes(), g.dims));
  }

  int timesteps() const { return static_cast<int>(values.size()); }
  double dt() const { return 1.0 / timesteps(); }

  Vector flatten() const {
    Vector out(static_cast<Eigen::Index>(values.size()) * grid.nodes() * grid.dims);
    Eigen::Index k = 0;
    for (const Matrix& m : values)
      for (Eigen::Index c = 0; c < m.cols(); ++c)
        for (Eigen::Index n = 0; n < m.rows(); ++n) out(k++) = m(n, c);
    return out;
  }

  void assign_flat(const Vector& flat) {
    Eigen::Index k = 0;
    for (Matrix& m : values)
      for (Eigen::Index c = 0; c < m.cols(); ++c)
        for (Eigen::Index n = 0; n < m.rows(); ++n) m(n, c) = flat(k++);
  }
};

/// phi(x) = x + displacement(x) on grid nodes.
struct DiffeoMap {
  Grid grid;
  Matrix displacement;  // nodes x dims

  static DiffeoMap identity(const Grid& g) { return {g, Matrix::Zero(g.nodes(), g.dims)}; }
};

// ---------------------------------------------------------------------------
// Interpolation

namespace detail {

/// Linear (1D) / bilinear (2D) stencil at a physical point, clamped to the
/// domain. dweight[a][s] is the derivative of weight s along axis a; it is
/// zero along axes where the point was clamped.
struct Stencil {
  std::array<int, 4> node{};
  std::array<double, 4> weight{};
  std::array<std::array<double, 4>, 2> dweight{};
  int count = 0;
};

inline Stencil stencil(const Grid& g, const double* p) {
  std::array<int, 2> lo{0, 0};
  std::array<double, 2> frac{0.0, 0.0};
  std::array<double, 2> dfrac{0.0, 0.0};
  for (int a = 0; a < g.dims; ++a) {
    const int n = g.size[a];
    const double s = p[a] / g.spacing[a];
    double clamped = s;
    bool inside = true;
    if (s < 0.0) {
      clamped = 0.0;
      inside = false;
    } else if (s > n - 1) {
      clamped = n - 1;
      inside = false;
    }
    int i0 = static_cast<int>(std::floor(clamped));
    if (i0 > n - 2) i0 = n - 2;
    lo[a] = i0;
    frac[a] = clamped - i0;
    dfrac[a] = inside ? 1.0 / g.spacing[a] : 0.0;
  }
  Stencil st;
  if (g.dims == 1) {
    st.count = 2;
    st.node = {lo[0], lo[0] + 1, 0, 0};
    st.weight = {1.0 - frac[0], frac[0], 0.0, 0.0};
    st.dweight[0] = {-dfrac[0], dfrac[0], 0.0, 0.0};
    return st;
  }
  st.count = 4;
  const double fx = frac[0], fy = frac[1];
  st.node = {g.index(lo[0], lo[1]), g.index(lo[0] + 1, lo[1]), g.index(lo[0], lo[1] + 1),
             g.index(lo[0] + 1, lo[1] + 1)};
  st.weight = {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy};
  st.dweight[0] = {-(1 - fy) * dfrac[0], (1 - fy) * dfrac[0], -fy * dfrac[0], fy * dfrac[0]};
  st.dweight[1] = {-(1 - fx) * dfrac[1], -fx * dfrac[1], (1 - fx) * dfrac[1], fx * dfrac[1]};
  return st;
}

inline double sample(const Stencil& st, const double* values) {
  double v = 0.0;
  for (int s = 0; s < st.count; ++s) v += st.weight[s] * values[st.node[s]];
  return v;
}

inline double sample_derivative(const Stencil& st, const double* values, int axis) {
  double v = 0.0;
  for (int s = 0; s < st.count; ++s) v += st.dweight[axis][s] * values[st.node[s]];
  return v;
}

inline std::array<double, 2> node_position(const Grid& g, int n) { return {g.coord(n, 0), g.dims > 1 ? g.coord(n, 1) : 0.0}; }

/// Sample each column of `field` (nodes x c) at a point.
inline void sample_columns(const Stencil& st, const Matrix& field, double* out) {
  for (Eigen::Index c = 0; c < field.cols(); ++c) out[c] = sample(st, field.col(c).data());
}

/// Spatial gradient of nodal values by central differences (one-sided at
/// the edges); nodes x dims.
inline Matrix grid_gradient(const Grid& g, const Vector& f) {
  Matrix grad(g.nodes(), g.dims);
  for (int iy = 0; iy < g.size[1]; ++iy) {
    for (int ix = 0; ix < g.size[0]; ++ix) {
      const int n = g.index(ix, iy);
      for (int a = 0; a < g.dims; ++a) {
        const int i = a == 0 ? ix : iy;
        const int len = g.size[a];
        auto at = [&](int j) { return a == 0 ? f(g.index(j, iy)) : f(g.index(ix, j)); };
        if (i == 0)
          grad(n, a) = (at(1) - at(0)) / g.spacing[a];
        else if (i == len - 1)
          grad(n, a) = (at(len - 1) - at(len - 2)) / g.spacing[a];
        else
          grad(n, a) = (at(i + 1) - at(i - 1)) / (2.0 * g.spacing[a]);
      }
    }
  }
  return grad;
}

}  // namespace detail

/// Jacobian determinant of x + d(x) at every node.
inline Vector jacobian_determinant(const DiffeoMap& phi) {
  const Grid& g = phi.grid;
  std::vector<Matrix> grads;
  for (int c = 0; c < g.dims; ++c) grads.push_back(detail::grid_gradient(g, phi.displacement.col(c)));
  Vector det(g.nodes());
  for (int n = 0; n < g.nodes(); ++n) {
    if (g.dims == 1) {
      det(n) = 1.0 + grads[0](n, 0);
    } else {
      const double a = 1.0 + grads[0](n, 0), b = grads[0](n, 1);
      const double c = grads[1](n, 0), d = 1.0 + grads[1](n, 1);
      det(n) = a * d - b * c;
    }
  }
  return det;
}

/// Point map evaluation: phi(p) = p + d(clamp(p)).
inline std::array<double, 2> apply_map(const DiffeoMap& phi, const std::array<double, 2>& p) {
  const detail::Stencil st = detail::stencil(phi.grid, p.data());
  std::array<double, 2> out = p;
  for (int a = 0; a < phi.grid.dims; ++a) out[a] += detail::sample(st, phi.displacement.col(a).data());
  return out;
}

/// psi o phi on grid nodes.
inline DiffeoMap compose(const DiffeoMap& psi, const DiffeoMap& phi) {
  if (!(psi.grid == phi.grid)) throw DomainError("compose: grid mismatch");
  const Grid& g = phi.grid;
  DiffeoMap out = DiffeoMap::identity(g);
  for (int n = 0; n < g.nodes(); ++n) {
    auto x = detail::node_position(g, n);
    std::array<double, 2> p = x;
    for (int a = 0; a < g.dims; ++a) p[a] += phi.displacement(n, a);
    const auto q = apply_map(psi, p);
    for (int a = 0; a < g.dims; ++a) out.displacement(n, a) = q[a] - x[a];
  }
  return out;
}

/// I o phi, with clamp-to-edge lookups outside the domain.
inline Image warp(const Image& image, const DiffeoMap& phi) {
  if (!(image.grid == phi.grid)) throw DomainError("warp: grid mismatch");
  const Grid& g = image.grid;
  Vector out(g.nodes());
  for (int n = 0; n < g.nodes(); ++n) {
    auto p = detail::node_position(g, n);
    for (int a = 0; a < g.dims; ++a) p[a] += phi.displacement(n, a);
    out(n) = detail::sample(detail::stencil(g, p.data()), image.values.data());
  }
  return Image(g, out);
}

// ---------------------------------------------------------------------------
// Kernel

/// Gaussian smoothing K = L^-1 as a separable circulant operator. Along
/// each axis the Fourier multiplier is exp(-sigma^2 w^2 / 2) (sigma in grid
/// units), floored at kMultiplierFloor so that L stays bounded.
class KernelOp {
 public:
  static constexpr double kMultiplierFloor = 1e-6;

  KernelOp() = default;
  KernelOp(const Grid& g, double sigma) : grid_(g), sigma_(sigma) {
    if (!(sigma >= 0.5)) throw DomainError("KernelOp: sigma must be at least 0.5 grid units");
    for (int a = 0; a < 2; ++a) {
      smooth_[a] = circulant(g.size[a], sigma, false);
      sharpen_[a] = circulant(g.size[a], sigma, true);
    }
  }

  static KernelOp identity(const Grid& g) {
    KernelOp k;
    k.grid_ = g;
    k.sigma_ = 0.0;
    for (int a = 0; a < 2; ++a) {
      k.smooth_[a] = Matrix::Identity(g.size[a], g.size[a]);
      k.sharpen_[a] = k.smooth_[a];
    }
    return k;
  }

  double sigma() const { return sigma_; }
  const Grid& grid() const { return grid_; }

  /// K applied to every column of a nodes x c field.
  Matrix smooth(const Matrix& field) const { return apply(field, smooth_); }
  /// L = K^-1 applied to every column.
  Matrix sharpen(const Matrix& field) const { return apply(field, sharpen_); }

  /// <L u, u> in L2(grid) (node volume included).
  double energy(const Matrix& field) const {
    return (sharpen(field).array() * field.array()).sum() * grid_.cell_volume();
  }

 private:
  static Matrix circulant(int n, double sigma, bool inverse) {
    Vector mult(n);
    for (int k = 0; k < n; ++k) {
      const double w = 2.0 * std::numbers::pi * std::min(k, n - k) / n;
      const double m = std::max(std::exp(-0.5 * sigma * sigma * w * w), kMultiplierFloor);
      mult(k) = inverse ? 1.0 / m : m;
    }
    Vector row(n);
    for (int j = 0; j < n; ++j) {
      double s = 0.0;
      for (int k = 0; k < n; ++k) s += mult(k) * std::cos(2.0 * std::numbers::pi * k * j / n);
      row(j) = s / n;
    }
    Matrix c(n, n);
    for (int r = 0; r < n; ++r)
      for (int col = 0; col < n; ++col) c(r, col) = row(((r - col) % n + n) % n);
    return c;
  }

  Matrix apply(const Matrix& field, const std::array<Matrix, 2>& ops) const {
    using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    const int nx = grid_.size[0], ny = grid_.size[1];
    Matrix out(field.rows(), field.cols());
    for (Eigen::Index c = 0; c < field.cols(); ++c) {
      Eigen::Map<const RowMajor> in(field.col(c).data(), ny, nx);
      RowMajor res = ops[1] * in * ops[0].transpose();
      out.col(c) = Eigen::Map<const Vector>(res.data(), res.size());
    }
    return out;
  }

  Grid grid_;
  double sigma_ = 0.0;
  std::array<Matrix, 2> smooth_;
  std::array<Matrix, 2> sharpen_;
};

// ---------------------------------------------------------------------------
// Flow

struct Flow {
  std::vector<DiffeoMap> forward;  // phi_{0,t_i}, i = 0..T
  std::vector<DiffeoMap> to_one;   // phi_{t_i,1}
  std::vector<DiffeoMap> to_zero;  // phi_{t_i,0}
  double min_jacobian = 1.0;       // over phi_{0,1} and phi_{1,0}
  bool diffeomorphic = true;

  const DiffeoMap& endpoint() const { return forward.back(); }
  const DiffeoMap& inverse_endpoint() const { return to_zero.back(); }
};

inline Flow integrate_flow(const VelocityField& u) {
  const Grid& g = u.grid;
  const int steps = u.timesteps();
  const double dt = u.dt();
  const int dims = g.dims;

  Flow flow;
  flow.forward.assign(static_cast<std::size_t>(steps + 1), DiffeoMap::identity(g));
  flow.to_one.assign(static_cast<std::size_t>(steps + 1), DiffeoMap::identity(g));
  flow.to_zero.assign(static_cast<std::size_t>(steps + 1), DiffeoMap::identity(g));

  for (int i = 0; i < steps; ++i) {
    const Matrix& v = u.values[static_cast<std::size_t>(i)];
    const Matrix& prev_zero = flow.to_zero[static_cast<std::size_t>(i)].displacement;
    const Matrix& prev_fwd = flow.forward[static_cast<std::size_t>(i)].displacement;
    Matrix& next_zero = flow.to_zero[static_cast<std::size_t>(i + 1)].displacement;
    Matrix& next_fwd = flow.forward[static_cast<std::size_t>(i + 1)].displacement;
    for (int n = 0; n < g.nodes(); ++n) {
      const auto x = detail::node_position(g, n);
      std::array<double, 2> y = x;
      for (int a = 0; a < dims; ++a) y[a] -= dt * v(n, a);
      const detail::Stencil sy = detail::stencil(g, y.data());
      for (int a = 0; a < dims; ++a) next_zero(n, a) = -dt * v(n, a) + detail::sample(sy, prev_zero.col(a).data());

      std::array<double, 2> p = x;
      for (int a = 0; a < dims; ++a) p[a] += prev_fwd(n, a);
      const detail::Stencil sp = detail::stencil(g, p.data());
      for (int a = 0; a < dims; ++a) next_fwd(n, a) = prev_fwd(n, a) + dt * detail::sample(sp, v.col(a).data());
    }
  }
  for (int i = steps - 1; i >= 0; --i) {
    const Matrix& v = u.values[static_cast<std::size_t>(i)];
    const Matrix& later = flow.to_one[static_cast<std::size_t>(i + 1)].displacement;
    Matrix& cur = flow.to_one[static_cast<std::size_t>(i)].displacement;
    for (int n = 0; n < g.nodes(); ++n) {
      std::array<double, 2> y = detail::node_position(g, n);
      for (int a = 0; a < dims; ++a) y[a] += dt * v(n, a);
      const detail::Stencil sy = detail::stencil(g, y.data());
      for (int a = 0; a < dims; ++a) cur(n, a) = dt * v(n, a) + detail::sample(sy, later.col(a).data());
    }
  }
  flow.min_jacobian = std::min(jacobian_determinant(flow.endpoint()).minCoeff(),
                               jacobian_determinant(flow.inverse_endpoint()).minCoeff());
  flow.diffeomorphic = flow.min_jacobian > 0.0;
  return flow;
}

// ---------------------------------------------------------------------------
// Energy and gradient

struct RegConfig {
  double beta = 10.0;
  int timesteps = 16;
  double eta = 0.5;
  int max_iters = 200;
  double tol = 1e-6;
  double sigma = 2.0;
  int max_halvings = 20;

  void validate() const {
    if (!(beta > 0.0)) throw DomainError("RegConfig: beta must be positive");
    if (timesteps < 1) throw DomainError("RegConfig: timesteps must be positive");
    if (!(eta > 0.0)) throw DomainError("RegConfig: eta must be positive");
    if (max_iters < 1) throw DomainError("RegConfig: max_iters must be positive");
    if (!(tol > 0.0)) throw DomainError("RegConfig: tol must be positive");
    if (!(sigma >= 0.5)) throw DomainError("RegConfig: sigma must be at least 0.5 grid units");
  }
};

struct Energy {
  double total = 0.0;
  double kinetic = 0.0;
  double matching = 0.0;
};

inline void check_pair(const VelocityField& u, const Image& i0, const Image& i1) {
  if (!(u.grid == i0.grid) || !(u.grid == i1.grid)) throw DomainError("lddmm: grid mismatch between field and images");
}

/// sum_t 1/2 <L u_t, u_t> dt.
inline double kinetic_energy(const VelocityField& u, const KernelOp& kernel) {
  double e = 0.0;
  for (const Matrix& m : u.values) e += 0.5 * kernel.energy(m) * u.dt();
  return e;
}

inline double matching_energy(const Image& deformed, const Image& target, double beta) {
  return beta * (target.values - deformed.values).squaredNorm() * deformed.grid.cell_volume();
}

inline Energy energy(const VelocityField& u, const Image& i0, const Image& i1, const KernelOp& kernel, double beta) {
  check_pair(u, i0, i1);
  Energy e;
  e.kinetic = kinetic_energy(u, kernel);
  e.matching = matching_energy(warp(i0, integrate_flow(u).inverse_endpoint()), i1, beta);
  e.total = e.kinetic + e.matching;
  return e;
}

inline Energy energy(const VelocityField& u, const Image& i0, const Image& i1, const RegConfig& cfg) {
  return energy(u, i0, i1, KernelOp(u.grid, cfg.sigma), cfg.beta);
}

/// Which preconditioning factors act on the matching-term momentum. With
/// both disabled, one descent step is plain gradient descent on the
/// matching term (smoothing replaced by the identity, transport Jacobians
/// dropped).
struct Preconditioning {
  bool kernel = true;
  bool jacobian = true;
};

/// Derivative of the matching term with respect to every velocity entry
/// (reverse mode through the semi-Lagrangian recursion for phi_{t,0}).
/// With `jacobian` disabled, the Jacobian factors of the transport are
/// replaced by the identity and the adjoint is pulled back instead of
/// scattered.
inline std::vector<Matrix> matching_sensitivity(const VelocityField& u, const Image& i0, const Image& i1, double beta,
                                                bool jacobian = true) {
  check_pair(u, i0, i1);
  const Grid& g = u.grid;
  const int steps = u.timesteps();
  const int dims = g.dims;
  const double dt = u.dt();
  const double vol = g.cell_volume();

  // Forward pass, keeping departure stencils.
  std::vector<Matrix> disp(static_cast<std::size_t>(steps + 1), Matrix::Zero(g.nodes(), dims));
  std::vector<std::vector<detail::Stencil>> stencils(static_cast<std::size_t>(steps));
  for (int i = 0; i < steps; ++i) {
    const Matrix& v = u.values[static_cast<std::size_t>(i)];
    auto& st = stencils[static_cast<std::size_t>(i)];
    st.resize(static_cast<std::size_t>(g.nodes()));
    for (int n = 0; n < g.nodes(); ++n) {
      auto y = detail::node_position(g, n);
      for (int a = 0; a < dims; ++a) y[a] -= dt * v(n, a);
      st[static_cast<std::size_t>(n)] = detail::stencil(g, y.data());
      for (int a = 0; a < dims; ++a)
        disp[static_cast<std::size_t>(i + 1)](n, a) =
            -dt * v(n, a) + detail::sample(st[static_cast<std::size_t>(n)], disp[static_cast<std::size_t>(i)].col(a).data());
    }
  }

  // Seed: d matching / d disp_T.
  Matrix adj = Matrix::Zero(g.nodes(), dims);
  for (int n = 0; n < g.nodes(); ++n) {
    auto p = detail::node_position(g, n);
    for (int a = 0; a < dims; ++a) p[a] += disp[static_cast<std::size_t>(steps)](n, a);
    const detail::Stencil st = detail::stencil(g, p.data());
    const double r = 2.0 * beta * (detail::sample(st, i0.values.data()) - i1.values(n)) * vol;
    for (int a = 0; a < dims; ++a) adj(n, a) = r * detail::sample_derivative(st, i0.values.data(), a);
  }

  std::vector<Matrix> out(static_cast<std::size_t>(steps), Matrix::Zero(g.nodes(), dims));
  for (int i = steps - 1; i >= 0; --i) {
    const Matrix& d = disp[static_cast<std::size_t>(i)];
    const auto& st = stencils[static_cast<std::size_t>(i)];
    Matrix& du = out[static_cast<std::size_t>(i)];
    Matrix prev = Matrix::Zero(g.nodes(), dims);
    for (int n = 0; n < g.nodes(); ++n) {
      const detail::Stencil& s = st[static_cast<std::size_t>(n)];
      for (int a = 0; a < dims; ++a) {
        double jt = adj(n, a);
        if (jacobian)
          for (int c = 0; c < dims; ++c) jt += adj(n, c) * detail::sample_derivative(s, d.col(c).data(), a);
        du(n, a) = -dt * jt;
      }
      if (jacobian)
        for (int k = 0; k < s.count; ++k)
          for (int a = 0; a < dims; ++a) prev(s.node[static_cast<std::size_t>(k)], a) += s.weight[static_cast<std::size_t>(k)] * adj(n, a);
    }
    if (!jacobian) {
      const Matrix& v = u.values[static_cast<std::size_t>(i)];
      for (int n = 0; n < g.nodes(); ++n) {
        auto y = detail::node_position(g, n);
        for (int a = 0; a < dims; ++a) y[a] += dt * v(n, a);
        const detail::Stencil s = detail::stencil(g, y.data());
        for (int a = 0; a < dims; ++a) prev(n, a) = detail::sample(s, adj.col(a).data());
      }
    }
    adj = std::move(prev);
  }
  return out;
}

/// Euclidean gradient of the discrete energy with respect to the raw field
/// entries: L u_i dt dV + d(matching)/d u_i.
inline VelocityField l2_gradient(const VelocityField& u, const Image& i0, const Image& i1, const KernelOp& kernel,
                                 double beta) {
  const std::vector<Matrix> dm = matching_sensitivity(u, i0, i1, beta);
  VelocityField out = u;
  const double w = u.dt() * u.grid.cell_volume();
  for (std::size_t i = 0; i < dm.size(); ++i) out.values[i] = kernel.sharpen(u.values[i]) * w + dm[i];
  return out;
}

/// Gradient in the V metric: u_t - 2 beta K*( |D phi_{t,1}| grad J0_t (J0_t - J1_t) ),
/// realized as u_i + K(d matching/d u_i) / (dt dV).
inline VelocityField gradient(const VelocityField& u, const Image& i0, const Image& i1, const KernelOp& kernel,
                              double beta, Preconditioning pre = {}) {
  const std::vector<Matrix> dm = matching_sensitivity(u, i0, i1, beta, pre.jacobian);
  VelocityField out = u;
  const double w = u.dt() * u.grid.cell_volume();
  for (std::size_t i = 0; i < dm.size(); ++i)
    out.values[i] = u.values[i] + (pre.kernel ? kernel.smooth(dm[i]) : dm[i]) / w;
  return out;
}

inline VelocityField gradient(const VelocityField& u, const Image& i0, const Image& i1, const RegConfig& cfg) {
  return gradient(u, i0, i1, KernelOp(u.grid, cfg.sigma), cfg.beta);
}

/// Momentum from the optimality condition evaluated pointwise on the grid:
/// m_t = 2 beta |D phi_{t,1}| (J0_t - J1_t) grad J0_t with J0_t = I0 o phi_{t,0}
/// and J1_t = I1 o phi_{t,1}. grad J0_t is taken by the chain rule,
/// D phi_{t,0}^T (grad I0)(phi_{t,0}(x)), with grad I0 the derivative of the
/// interpolant used by warp. Returned at every t_i, i = 0..T.
inline std::vector<Matrix> momentum(const Flow& flow, const Image& i0, const Image& i1, double beta) {
  const Grid& g = i0.grid;
  std::vector<Matrix> out;
  out.reserve(flow.to_zero.size());
  for (std::size_t i = 0; i < flow.to_zero.size(); ++i) {
    const DiffeoMap& back = flow.to_zero[i];
    const Image j1 = warp(i1, flow.to_one[i]);
    const Vector jac = jacobian_determinant(flow.to_one[i]);
    std::vector<Matrix> dd;
    for (int c = 0; c < g.dims; ++c) dd.push_back(detail::grid_gradient(g, back.displacement.col(c)));
    Matrix m(g.nodes(), g.dims);
    for (int n = 0; n < g.nodes(); ++n) {
      auto p = detail::node_position(g, n);
      for (int a = 0; a < g.dims; ++a) p[a] += back.displacement(n, a);
      const detail::Stencil st = detail::stencil(g, p.data());
      const double j0 = detail::sample(st, i0.values.data());
      const double scale = 2.0 * beta * jac(n) * (j0 - j1.values(n));
      for (int a = 0; a < g.dims; ++a) {
        double d = 0.0;
        for (int c = 0; c < g.dims; ++c)
          d += ((a == c ? 1.0 : 0.0) + dd[static_cast<std::size_t>(c)](n, a)) * detail::sample_derivative(st, i0.values.data(), c);
        m(n, a) = scale * d;
      }
    }
    out.push_back(std::move(m));
  }
  return out;
}

/// L2(time x grid) norm of a field sequence.
inline double field_norm(const std::vector<Matrix>& f, const Grid& g) {
  double s = 0.0;
  for (const Matrix& m : f) s += m.squaredNorm();
  return std::sqrt(s * g.cell_volume() / static_cast<double>(f.size()));
}

/// Momentum on each interval as carried by the discrete flow: the matching
/// residual at t = 1 transported back through the same semi-Lagrangian
/// steps that define phi_{t,0}, m_i = -d(matching)/d u_i / (dt dV).
inline std::vector<Matrix> transported_momentum(const VelocityField& u, const Image& i0, const Image& i1, double beta) {
  std::vector<Matrix> m = matching_sensitivity(u, i0, i1, beta);
  const double w = u.dt() * u.grid.cell_volume();
  for (Matrix& x : m) x /= -w;
  return m;
}

/// Residual of the optimality condition L u_t = m_t with the momentum
/// transported by the discrete flow.
inline double ep_residual(const VelocityField& u, const Image& i0, const Image& i1, const KernelOp& kernel, double beta) {
  const std::vector<Matrix> m = transported_momentum(u, i0, i1, beta);
  std::vector<Matrix> r;
  for (std::size_t i = 0; i < m.size(); ++i) r.push_back(kernel.sharpen(u.values[i]) - m[i]);
  return field_norm(r, u.grid);
}

/// Residual of u_t = K m_t with m_t from the pointwise formula, averaged
/// over each interval. Carries an O(h) interpolation gap that does not
/// vanish at the discrete optimum, so it is reported but not asserted.
inline double pointwise_ep_residual(const VelocityField& u, const Image& i0, const Image& i1, const KernelOp& kernel,
                                    double beta) {
  const Flow flow = integrate_flow(u);
  const std::vector<Matrix> m = momentum(flow, i0, i1, beta);
  std::vector<Matrix> r;
  for (int i = 0; i < u.timesteps(); ++i)
    r.push_back(u.values[static_cast<std::size_t>(i)] -
                kernel.smooth(0.5 * (m[static_cast<std::size_t>(i)] + m[static_cast<std::size_t>(i + 1)])));
  return field_norm(r, u.grid);
}

/// sum_t sqrt(<L u_t, u_t>) dt.
inline double path_length(const VelocityField& u, const KernelOp& kernel) {
  double len = 0.0;
  for (const Matrix& m : u.values) len += std::sqrt(std::max(kernel.energy(m), 0.0)) * u.dt();
  return len;
}

// ---------------------------------------------------------------------------
// Registration

struct Registration {
  VelocityField velocity;
  DiffeoMap phi;            // phi_{0,1}
  DiffeoMap phi_inverse;    // phi_{1,0}
  Image deformed;           // I0 o phi_{1,0}
  std::vector<double> energy_trace;
  Energy final_energy;
  double ep_residual = 0.0;
  double pointwise_ep_residual = 0.0;
  double gradient_residual = 0.0;
  double path_length = 0.0;
  double min_jacobian = 1.0;
  bool diffeomorphic = true;
  int iterations = 0;
  bool converged = false;
};

/// One descent step u - eta * grad E(u).
inline VelocityField descent_update(const VelocityField& u, const VelocityField& grad, double eta) {
  VelocityField next = u;
  for (std::size_t i = 0; i < next.values.size(); ++i) next.values[i] -= eta * grad.values[i];
  return next;
}

/// Gradient descent on u with backtracking: eta is halved (at most
/// cfg.max_halvings times) whenever a step would raise the energy, so the
/// trace never increases. Stops when the relative decrease drops below tol.
inline Registration register_images(const Image& i0, const Image& i1, const RegConfig& cfg) {
  cfg.validate();
  if (!(i0.grid == i1.grid)) throw DomainError("register_images: grid mismatch");
  const Grid& g = i0.grid;
  const KernelOp kernel(g, cfg.sigma);

  VelocityField u(g, cfg.timesteps);
  Energy e = energy(u, i0, i1, kernel, cfg.beta);
  Registration out;
  out.energy_trace.push_back(e.total);
  double eta = cfg.eta;
  VelocityField grad = gradient(u, i0, i1, kernel, cfg.beta);

  for (int it = 0; it < cfg.max_iters; ++it) {
    if (e.total <= 0.0 || field_norm(grad.values, g) == 0.0) {
      out.converged = true;
      break;
    }
    bool accepted = false;
    VelocityField trial;
    Energy trial_e;
    for (int h = 0; h <= cfg.max_halvings; ++h) {
      trial = descent_update(u, grad, eta);
      trial_e = energy(trial, i0, i1, kernel, cfg.beta);
      if (trial_e.total < e.total) {
        accepted = true;
        break;
      }
      eta *= 0.5;
    }
    if (!accepted) {
      out.converged = true;
      break;
    }
    const double rel = (e.total - trial_e.total) / e.total;
    u = std::move(trial);
    e = trial_e;
    out.energy_trace.push_back(e.total);
    out.iterations = it + 1;
    grad = gradient(u, i0, i1, kernel, cfg.beta);
    if (rel < cfg.tol) {
      out.converged = true;
      break;
    }
  }

  const Flow flow = integrate_flow(u);
  out.phi = flow.endpoint();
  out.phi_inverse = flow.inverse_endpoint();
  out.deformed = warp(i0, flow.inverse_endpoint());
  out.final_energy = e;
  out.gradient_residual = field_norm(grad.values, g);
  out.ep_residual = ep_residual(u, i0, i1, kernel, cfg.beta);
  out.pointwise_ep_residual = pointwise_ep_residual(u, i0, i1, kernel, cfg.beta);
  out.path_length = path_length(u, kernel);
  out.min_jacobian = flow.min_jacobian;
  out.diffeomorphic = flow.diffeomorphic;
  out.velocity = std::move(u);
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic inputs

/// Gaussian bump exp(-|x - c|^2 / (2 w^2)) in physical units.
inline Image gaussian_bump(const Grid& g, std::array<double, 2> center, double width) {
  Vector v(g.nodes());
  for (int n = 0; n < g.nodes(); ++n) {
    double r2 = 0.0;
    for (int a = 0; a < g.dims; ++a) r2 += std::pow(g.coord(n, a) - center[static_cast<std::size_t>(a)], 2);
    v(n) = std::exp(-0.5 * r2 / (width * width));
  }
  return Image(g, v);
}

}  // namespace geolab::lddmm
