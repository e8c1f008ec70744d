#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include <json.hpp>

#include "geolvm/errors.hpp"

namespace geolvm::manifolds {

using Eigen::MatrixXd;
using Eigen::VectorXd;

enum class Kind { Euclidean, Sphere, Spd, Product };

// Riemannian structure descriptor. size is the Euclidean dimension, the
// sphere's intrinsic dimension M (ambient M+1), or the SPD matrix side M.
struct ManifoldSpec {
  Kind kind = Kind::Euclidean;
  int size = 1;
  std::vector<ManifoldSpec> parts;

  static ManifoldSpec euclidean(int dim) {
    require(dim >= 1, ErrorKind::Validation, "euclidean dim must be >= 1");
    return {Kind::Euclidean, dim, {}};
  }
  static ManifoldSpec sphere(int m) {
    require(m >= 1, ErrorKind::Validation, "sphere intrinsic dim must be >= 1");
    return {Kind::Sphere, m, {}};
  }
  static ManifoldSpec spd(int m) {
    require(m >= 2, ErrorKind::Validation, "spd matrix side must be >= 2");
    return {Kind::Spd, m, {}};
  }
  static ManifoldSpec product(std::vector<ManifoldSpec> ps) {
    require(!ps.empty(), ErrorKind::Validation, "product needs at least one component");
    for (const auto& p : ps)
      require(p.kind != Kind::Product, ErrorKind::Validation, "nested products are not supported");
    ManifoldSpec s;
    s.kind = Kind::Product;
    s.size = static_cast<int>(ps.size());
    s.parts = std::move(ps);
    return s;
  }

  int ambient_dim() const {
    switch (kind) {
      case Kind::Euclidean: return size;
      case Kind::Sphere:    return size + 1;
      case Kind::Spd:       return size * size;
      case Kind::Product: {
        int d = 0;
        for (const auto& p : parts) d += p.ambient_dim();
        return d;
      }
    }
    return 0;
  }

  int tangent_dim() const {
    switch (kind) {
      case Kind::Euclidean: return size;
      case Kind::Sphere:    return size;
      case Kind::Spd:       return size * (size + 1) / 2;
      case Kind::Product: {
        int d = 0;
        for (const auto& p : parts) d += p.tangent_dim();
        return d;
      }
    }
    return 0;
  }

  bool operator==(const ManifoldSpec& o) const {
    return kind == o.kind && size == o.size && parts == o.parts;
  }
  bool operator!=(const ManifoldSpec& o) const { return !(*this == o); }
};

namespace detail {

// Iteration over (component, ambient offset, tangent offset).
template <typename F>
void for_each_component(const ManifoldSpec& spec, F&& f) {
  if (spec.kind == Kind::Product) {
    int ao = 0, to = 0;
    for (const auto& p : spec.parts) {
      f(p, ao, to);
      ao += p.ambient_dim();
      to += p.tangent_dim();
    }
  } else {
    f(spec, 0, 0);
  }
}

inline MatrixXd as_square(const Eigen::Ref<const VectorXd>& coords, int m) {
  // row-major flattening of an m-by-m matrix
  MatrixXd A(m, m);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j) A(i, j) = coords(i * m + j);
  return A;
}

inline VectorXd flatten_square(const MatrixXd& A) {
  const int m = static_cast<int>(A.rows());
  VectorXd v(m * m);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j) v(i * m + j) = A(i, j);
  return v;
}

// Symmetric-coordinate chart for SPD tangent spaces: diagonal entries first,
// then sqrt(2)-scaled upper off-diagonals (row-major over i<j). The scaling
// makes the coordinate inner product equal the Frobenius inner product.
inline MatrixXd sym_from_coeffs(const Eigen::Ref<const VectorXd>& v, int m) {
  MatrixXd V = MatrixXd::Zero(m, m);
  int k = 0;
  for (int i = 0; i < m; ++i) V(i, i) = v(k++);
  const double inv_sqrt2 = 1.0 / std::numbers::sqrt2;
  for (int i = 0; i < m; ++i)
    for (int j = i + 1; j < m; ++j) {
      V(i, j) = V(j, i) = v(k++) * inv_sqrt2;
    }
  return V;
}

inline VectorXd coeffs_from_sym(const MatrixXd& V) {
  const int m = static_cast<int>(V.rows());
  VectorXd v(m * (m + 1) / 2);
  int k = 0;
  for (int i = 0; i < m; ++i) v(k++) = V(i, i);
  for (int i = 0; i < m; ++i)
    for (int j = i + 1; j < m; ++j) v(k++) = V(i, j) * std::numbers::sqrt2;
  return v;
}

struct SymEig {
  MatrixXd U;
  VectorXd lam;
};

inline SymEig sym_eig(const MatrixXd& A) {
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(A);
  require(es.info() == Eigen::Success, ErrorKind::Numerical, "symmetric eigendecomposition failed");
  return {es.eigenvectors(), es.eigenvalues()};
}

inline MatrixXd sym_func(const MatrixXd& A, double (*f)(double)) {
  const SymEig e = sym_eig(A);
  return e.U * e.lam.unaryExpr(f).asDiagonal() * e.U.transpose();
}

inline MatrixXd spd_sqrt(const MatrixXd& A) { return sym_func(A, [](double x) { return std::sqrt(x); }); }
inline MatrixXd spd_inv_sqrt(const MatrixXd& A) {
  return sym_func(A, [](double x) { return 1.0 / std::sqrt(x); });
}
inline MatrixXd sym_exp(const MatrixXd& A) { return sym_func(A, [](double x) { return std::exp(x); }); }

}  // namespace detail

struct ManifoldPoint {
  ManifoldSpec spec;
  VectorXd coords;
};

struct TangentCoords {
  ManifoldPoint base;
  VectorXd coeffs;
};

// Orthonormal tangent frame: columns are ambient vectors, cols'
// * cols = I. For SPD the chart is the fixed symmetric basis and the
// columns do not depend on the basepoint.
struct TangentBasis {
  ManifoldPoint base;
  MatrixXd columns;  // ambient_dim x tangent_dim
};

inline void validate_point(const ManifoldSpec& spec, const Eigen::Ref<const VectorXd>& coords) {
  require(coords.size() == spec.ambient_dim(), ErrorKind::Dimension,
          "point has wrong ambient dimension");
  require(coords.allFinite(), ErrorKind::Validation, "point has non-finite coordinates");
  detail::for_each_component(spec, [&](const ManifoldSpec& p, int ao, int) {
    const auto c = coords.segment(ao, p.ambient_dim());
    switch (p.kind) {
      case Kind::Euclidean:
        break;
      case Kind::Sphere:
        require(std::abs(c.norm() - 1.0) <= 1e-9, ErrorKind::Validation,
                "sphere point is not unit norm");
        break;
      case Kind::Spd: {
        const MatrixXd A = detail::as_square(c, p.size);
        require((A - A.transpose()).cwiseAbs().maxCoeff() <= 1e-9, ErrorKind::Validation,
                "spd point is not symmetric");
        const auto e = detail::sym_eig(0.5 * (A + A.transpose()));
        require(e.lam.minCoeff() > 0.0, ErrorKind::Validation, "spd point is not positive definite");
        break;
      }
      case Kind::Product:
        break;
    }
  });
}

inline ManifoldPoint make_point(const ManifoldSpec& spec, const VectorXd& coords) {
  validate_point(spec, coords);
  return {spec, coords};
}

// Canonical basepoints: 0 for Euclidean parts, (1,0,...,0) for spheres,
// identity for SPD parts.
inline ManifoldPoint canonical_basepoint(const ManifoldSpec& spec) {
  VectorXd c = VectorXd::Zero(spec.ambient_dim());
  detail::for_each_component(spec, [&](const ManifoldSpec& p, int ao, int) {
    switch (p.kind) {
      case Kind::Euclidean:
        break;
      case Kind::Sphere:
        c(ao) = 1.0;
        break;
      case Kind::Spd:
        for (int i = 0; i < p.size; ++i) c(ao + i * p.size + i) = 1.0;
        break;
      case Kind::Product:
        break;
    }
  });
  return {spec, c};
}

namespace detail {

// Basis columns for one sphere, ambient dim m+1.
inline MatrixXd sphere_basis(const Eigen::Ref<const VectorXd>& p) {
  const int n = static_cast<int>(p.size());
  const int m = n - 1;
  if (m == 2) {
    // QR of the 3x2 seed matrix [[-z,0],[0,z],[x,-y]]; columns are tangent at
    // (x,y,z). Degenerate when z ~ 0, so permute the largest coordinate into
    // the z slot first and undo the permutation on the result.
    int zi = 2;
    if (std::abs(p(2)) < 1e-6) {
      zi = std::abs(p(0)) >= std::abs(p(1)) ? 0 : 1;
    }
    int perm[3];
    int k = 0;
    for (int i = 0; i < 3; ++i)
      if (i != zi) perm[k++] = i;
    perm[2] = zi;
    const double x = p(perm[0]), y = p(perm[1]), z = p(perm[2]);
    Eigen::Matrix<double, 3, 2> A;
    A << -z, 0.0, 0.0, z, x, -y;
    Eigen::HouseholderQR<Eigen::Matrix<double, 3, 2>> qr(A);
    const Eigen::Matrix3d Qfull = qr.householderQ();
    MatrixXd B(3, 2);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 2; ++j) B(perm[i], j) = Qfull(i, j);
    return B;
  }
  if (m == 3) {
    // explicit frame at (w,x,y,z)
    const double w = p(0), x = p(1), y = p(2), z = p(3);
    MatrixXd B(4, 3);
    B << -x, -y, -z,
          w,  z, -y,
         -z,  w,  x,
          y, -x,  w;
    return B;
  }
  // Generic completion: QR of the point vector, drop the radial column.
  Eigen::HouseholderQR<MatrixXd> qr(p);
  MatrixXd Qfull = qr.householderQ() * MatrixXd::Identity(n, n);
  return Qfull.rightCols(m);
}

inline MatrixXd spd_basis(int m) {
  const int d = m * (m + 1) / 2;
  MatrixXd B(m * m, d);
  for (int k = 0; k < d; ++k) {
    VectorXd e = VectorXd::Zero(d);
    e(k) = 1.0;
    B.col(k) = flatten_square(sym_from_coeffs(e, m));
  }
  return B;
}

}  // namespace detail

inline TangentBasis tangent_basis(const ManifoldPoint& base) {
  const int ad = base.spec.ambient_dim();
  const int td = base.spec.tangent_dim();
  require(base.coords.size() == ad, ErrorKind::Dimension, "basepoint has wrong dimension");
  MatrixXd B = MatrixXd::Zero(ad, td);
  detail::for_each_component(base.spec, [&](const ManifoldSpec& p, int ao, int to) {
    switch (p.kind) {
      case Kind::Euclidean:
        B.block(ao, to, p.size, p.size).setIdentity();
        break;
      case Kind::Sphere:
        B.block(ao, to, p.size + 1, p.size) = detail::sphere_basis(base.coords.segment(ao, p.size + 1));
        break;
      case Kind::Spd:
        B.block(ao, to, p.size * p.size, p.tangent_dim()) = detail::spd_basis(p.size);
        break;
      case Kind::Product:
        break;
    }
  });
  return {base, B};
}

namespace detail {

inline VectorXd sphere_exp(const Eigen::Ref<const VectorXd>& p, const Eigen::Ref<const VectorXd>& v) {
  const MatrixXd B = sphere_basis(p);
  const VectorXd u = B * v;
  const double r = u.norm();
  if (r < 1e-14) return p;
  VectorXd q = p * std::cos(r) + u * (std::sin(r) / r);
  q /= q.norm();
  return q;
}

inline VectorXd sphere_log(const Eigen::Ref<const VectorXd>& p, const Eigen::Ref<const VectorXd>& q) {
  const double c = std::clamp(p.dot(q), -1.0, 1.0);
  require(c > -1.0 + 1e-12, ErrorKind::Domain, "log_map is undefined at antipodal sphere points");
  const double d = std::acos(c);
  const MatrixXd B = sphere_basis(p);
  if (d < 1e-12) return VectorXd::Zero(B.cols());
  const VectorXd w = q - c * p;
  const double wn = w.norm();
  if (wn < 1e-300) return VectorXd::Zero(B.cols());
  return B.transpose() * (w * (d / wn));
}

inline VectorXd spd_exp(const Eigen::Ref<const VectorXd>& pc, const Eigen::Ref<const VectorXd>& v, int m) {
  const MatrixXd X = as_square(pc, m);
  const MatrixXd V = sym_from_coeffs(v, m);
  const MatrixXd S = spd_sqrt(X);
  const MatrixXd Si = spd_inv_sqrt(X);
  MatrixXd A = Si * V * Si;
  A = 0.5 * (A + A.transpose());
  MatrixXd Y = S * sym_exp(A) * S;
  Y = 0.5 * (Y + Y.transpose());
  require(Y.allFinite(), ErrorKind::Numerical, "spd exponential overflowed");
  return flatten_square(Y);
}

inline VectorXd spd_log(const Eigen::Ref<const VectorXd>& pc, const Eigen::Ref<const VectorXd>& qc, int m) {
  const MatrixXd X = as_square(pc, m);
  const MatrixXd Y = as_square(qc, m);
  const MatrixXd S = spd_sqrt(X);
  const MatrixXd Si = spd_inv_sqrt(X);
  MatrixXd A = Si * Y * Si;
  A = 0.5 * (A + A.transpose());
  const SymEig e = sym_eig(A);
  require(e.lam.minCoeff() > 0.0, ErrorKind::Domain, "log_map target is outside the spd cone");
  const MatrixXd W = e.U * e.lam.array().log().matrix().asDiagonal() * e.U.transpose();
  MatrixXd V = S * W * S;
  V = 0.5 * (V + V.transpose());
  return coeffs_from_sym(V);
}

inline double spd_distance(const Eigen::Ref<const VectorXd>& pc, const Eigen::Ref<const VectorXd>& qc, int m) {
  const MatrixXd X = as_square(pc, m);
  const MatrixXd Y = as_square(qc, m);
  const MatrixXd Si = spd_inv_sqrt(X);
  MatrixXd A = Si * Y * Si;
  A = 0.5 * (A + A.transpose());
  const SymEig e = sym_eig(A);
  require(e.lam.minCoeff() > 0.0, ErrorKind::Domain, "distance target is outside the spd cone");
  return e.lam.array().log().matrix().norm();
}

}  // namespace detail

inline ManifoldPoint exp_map(const ManifoldPoint& base, const Eigen::Ref<const VectorXd>& coeffs) {
  require(coeffs.size() == base.spec.tangent_dim(), ErrorKind::Dimension,
          "tangent coefficients have wrong dimension");
  require(coeffs.allFinite(), ErrorKind::Validation, "tangent coefficients are non-finite");
  VectorXd out(base.spec.ambient_dim());
  detail::for_each_component(base.spec, [&](const ManifoldSpec& p, int ao, int to) {
    const auto pc = base.coords.segment(ao, p.ambient_dim());
    const auto v = coeffs.segment(to, p.tangent_dim());
    switch (p.kind) {
      case Kind::Euclidean:
        out.segment(ao, p.size) = pc + v;
        break;
      case Kind::Sphere:
        out.segment(ao, p.ambient_dim()) = detail::sphere_exp(pc, v);
        break;
      case Kind::Spd:
        out.segment(ao, p.ambient_dim()) = detail::spd_exp(pc, v, p.size);
        break;
      case Kind::Product:
        break;
    }
  });
  return {base.spec, out};
}

inline ManifoldPoint exp_map(const ManifoldPoint& base, const TangentCoords& v) {
  require(v.base.spec == base.spec && v.base.coords == base.coords, ErrorKind::Validation,
          "tangent coords are attached to a different basepoint");
  return exp_map(base, v.coeffs);
}

inline TangentCoords log_map(const ManifoldPoint& base, const ManifoldPoint& q) {
  require(base.spec == q.spec, ErrorKind::Dimension, "log_map arguments have different specs");
  VectorXd out(base.spec.tangent_dim());
  detail::for_each_component(base.spec, [&](const ManifoldSpec& p, int ao, int to) {
    const auto pc = base.coords.segment(ao, p.ambient_dim());
    const auto qc = q.coords.segment(ao, p.ambient_dim());
    switch (p.kind) {
      case Kind::Euclidean:
        out.segment(to, p.size) = qc - pc;
        break;
      case Kind::Sphere:
        out.segment(to, p.size) = detail::sphere_log(pc, qc);
        break;
      case Kind::Spd:
        out.segment(to, p.tangent_dim()) = detail::spd_log(pc, qc, p.size);
        break;
      case Kind::Product:
        break;
    }
  });
  return {base, out};
}

inline double distance(const ManifoldPoint& a, const ManifoldPoint& b) {
  require(a.spec == b.spec, ErrorKind::Dimension, "distance arguments have different specs");
  double sq = 0.0;
  detail::for_each_component(a.spec, [&](const ManifoldSpec& p, int ao, int) {
    const auto ac = a.coords.segment(ao, p.ambient_dim());
    const auto bc = b.coords.segment(ao, p.ambient_dim());
    double d = 0.0;
    switch (p.kind) {
      case Kind::Euclidean:
        d = (ac - bc).norm();
        break;
      case Kind::Sphere:
        d = std::acos(std::clamp(ac.dot(bc), -1.0, 1.0));
        break;
      case Kind::Spd:
        d = detail::spd_distance(ac, bc, p.size);
        break;
      case Kind::Product:
        break;
    }
    sq += d * d;
  });
  return std::sqrt(sq);
}

namespace detail {

// log|det dExp| for one sphere of intrinsic dim m at radius r.
inline double sphere_cov_log_det(int m, double r) {
  if (r < 1e-12) return 0.0;
  require(r < std::numbers::pi, ErrorKind::Domain,
          "change-of-volume term requires tangent norm below pi");
  return (m - 1) * std::log(std::sin(r) / r);
}

// First divided difference of exp; log|det dExp| on spd is the sum over i<=j
// of log g(lam_i, lam_j) with lam the eigenvalues of V/a.
inline double spd_cov_log_det(const Eigen::Ref<const VectorXd>& pc,
                              const Eigen::Ref<const VectorXd>& v, int m) {
  const MatrixXd X = as_square(pc, m);
  double a = X.trace() / m;
  require(a > 0.0, ErrorKind::Domain, "spd basepoint must be positive");
  MatrixXd D = X - a * MatrixXd::Identity(m, m);
  require(D.cwiseAbs().maxCoeff() <= 1e-9 * std::max(1.0, a), ErrorKind::Domain,
          "spd change-of-volume term requires a scalar basepoint a*I");
  const MatrixXd V = sym_from_coeffs(v, m) / a;
  const SymEig e = sym_eig(V);
  double s = 0.0;
  for (int i = 0; i < m; ++i) {
    for (int j = i; j < m; ++j) {
      const double li = e.lam(i), lj = e.lam(j);
      double g;
      if (std::abs(li - lj) < 1e-7) {
        g = std::exp(0.5 * (li + lj));
      } else {
        g = (std::exp(li) - std::exp(lj)) / (li - lj);
      }
      s += std::log(g);
    }
  }
  return s;
}

}  // namespace detail

// Per-point log-volume correction of the wrapped construction:
// log|det d Exp_base| at the given tangent coefficients. Zero for Euclidean
// parts; spheres use the closed form in the radius; SPD requires a scalar
// basepoint a*I.
inline double cov_log_det(const ManifoldPoint& base, const Eigen::Ref<const VectorXd>& coeffs) {
  require(coeffs.size() == base.spec.tangent_dim(), ErrorKind::Dimension,
          "tangent coefficients have wrong dimension");
  double s = 0.0;
  detail::for_each_component(base.spec, [&](const ManifoldSpec& p, int ao, int to) {
    const auto v = coeffs.segment(to, p.tangent_dim());
    switch (p.kind) {
      case Kind::Euclidean:
        break;
      case Kind::Sphere:
        s += detail::sphere_cov_log_det(p.size, v.norm());
        break;
      case Kind::Spd:
        s += detail::spd_cov_log_det(base.coords.segment(ao, p.ambient_dim()), v, p.size);
        break;
      case Kind::Product:
        break;
    }
  });
  return s;
}

inline double cov_log_det(const TangentCoords& v) { return cov_log_det(v.base, v.coeffs); }

// Membership test for raw ambient coordinates.
inline bool project_check(const ManifoldSpec& spec, const Eigen::Ref<const VectorXd>& coords,
                          double tol) {
  if (coords.size() != spec.ambient_dim()) return false;
  if (!coords.allFinite()) return false;
  bool ok = true;
  detail::for_each_component(spec, [&](const ManifoldSpec& p, int ao, int) {
    if (!ok) return;
    const auto c = coords.segment(ao, p.ambient_dim());
    switch (p.kind) {
      case Kind::Euclidean:
        break;
      case Kind::Sphere:
        if (std::abs(c.norm() - 1.0) > tol) ok = false;
        break;
      case Kind::Spd: {
        const MatrixXd A = detail::as_square(c, p.size);
        if ((A - A.transpose()).cwiseAbs().maxCoeff() > tol) {
          ok = false;
          return;
        }
        const auto e = detail::sym_eig(0.5 * (A + A.transpose()));
        const double tr = A.trace();
        if (tr <= 0.0 || e.lam.minCoeff() < tol * tr / p.size) ok = false;
        break;
      }
      case Kind::Product:
        break;
    }
  });
  return ok;
}

inline void to_json(nlohmann::json& j, const ManifoldSpec& s) {
  switch (s.kind) {
    case Kind::Euclidean:
      j = {{"kind", "euclidean"}, {"size", s.size}};
      break;
    case Kind::Sphere:
      j = {{"kind", "sphere"}, {"size", s.size}};
      break;
    case Kind::Spd:
      j = {{"kind", "spd"}, {"size", s.size}};
      break;
    case Kind::Product: {
      nlohmann::json parts = nlohmann::json::array();
      for (const auto& p : s.parts) {
        nlohmann::json pj;
        to_json(pj, p);
        parts.push_back(pj);
      }
      j = {{"kind", "product"}, {"parts", parts}};
      break;
    }
  }
}

inline void from_json(const nlohmann::json& j, ManifoldSpec& s) {
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "euclidean") {
    s = ManifoldSpec::euclidean(j.at("size").get<int>());
  } else if (kind == "sphere") {
    s = ManifoldSpec::sphere(j.at("size").get<int>());
  } else if (kind == "spd") {
    s = ManifoldSpec::spd(j.at("size").get<int>());
  } else if (kind == "product") {
    std::vector<ManifoldSpec> parts;
    for (const auto& pj : j.at("parts")) {
      ManifoldSpec p;
      from_json(pj, p);
      parts.push_back(p);
    }
    s = ManifoldSpec::product(std::move(parts));
  } else {
    fail(ErrorKind::Validation, "unknown manifold kind: " + kind);
  }
}

}  // namespace geolvm::manifolds
