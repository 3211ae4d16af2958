#pragma once

// Dense double-precision kernels shared by the rest of the library:
// small fixed-size linear algebra (3-vectors, 3x3 symmetric eigenproblems,
// similarity Procrustes), row-major matrices, and a counter-based RNG whose
// streams are reproducible across platforms.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

namespace unihpe::numkit {

// ---------------------------------------------------------------------------
// Matrix: row-major dense storage. Deliberately minimal; heavier operations
// live with their callers so the dependency surface stays flat.
// ---------------------------------------------------------------------------

struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> v;  // rows*cols, row-major

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), v(r * c, 0.0) {}

  double& at(std::size_t r, std::size_t c) { return v[r * cols + c]; }
  double at(std::size_t r, std::size_t c) const { return v[r * cols + c]; }

  double* row(std::size_t r) { return v.data() + r * cols; }
  const double* row(std::size_t r) const { return v.data() + r * cols; }

  std::size_t size() const { return v.size(); }
};

using Vec3 = std::array<double, 3>;

inline double dot3(const Vec3& a, const Vec3& b) {
  return a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
}

inline Vec3 cross3(const Vec3& a, const Vec3& b) {
  return {a[1] * b[2] - a[2] * b[1],
          a[2] * b[0] - a[0] * b[2],
          a[0] * b[1] - a[1] * b[0]};
}

inline double norm3(const Vec3& a) { return std::sqrt(dot3(a, a)); }

inline Vec3 scale3(const Vec3& a, double s) {
  return {a[0] * s, a[1] * s, a[2] * s};
}

inline Vec3 sub3(const Vec3& a, const Vec3& b) {
  return {a[0] - b[0], a[1] - b[1], a[2] - b[2]};
}

inline Vec3 add3(const Vec3& a, const Vec3& b) {
  return {a[0] + b[0], a[1] + b[1], a[2] + b[2]};
}

// ---------------------------------------------------------------------------
// Mat3: 3x3 matrix, row-major. Columns are addressed explicitly where they
// carry meaning (eigenvectors, rotation frames).
// ---------------------------------------------------------------------------

struct Mat3 {
  std::array<double, 9> m{};

  double& operator()(std::size_t r, std::size_t c) { return m[r * 3 + c]; }
  double operator()(std::size_t r, std::size_t c) const { return m[r * 3 + c]; }

  static Mat3 identity() {
    Mat3 a;
    a(0, 0) = a(1, 1) = a(2, 2) = 1.0;
    return a;
  }

  Vec3 col(std::size_t c) const { return {m[c], m[3 + c], m[6 + c]}; }
  Vec3 row_vec(std::size_t r) const { return {m[3 * r], m[3 * r + 1], m[3 * r + 2]}; }

  void set_col(std::size_t c, const Vec3& v) {
    m[c] = v[0];
    m[3 + c] = v[1];
    m[6 + c] = v[2];
  }

  Mat3 transposed() const {
    Mat3 t;
    for (std::size_t r = 0; r < 3; ++r)
      for (std::size_t c = 0; c < 3; ++c) t(c, r) = (*this)(r, c);
    return t;
  }

  double trace() const { return m[0] + m[4] + m[8]; }

  double det() const {
    return m[0] * (m[4] * m[8] - m[5] * m[7]) -
           m[1] * (m[3] * m[8] - m[5] * m[6]) +
           m[2] * (m[3] * m[7] - m[4] * m[6]);
  }
};

inline Mat3 mul(const Mat3& a, const Mat3& b) {
  Mat3 c;
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < 3; ++k) s += a(i, k) * b(k, j);
      c(i, j) = s;
    }
  return c;
}

inline Vec3 mul(const Mat3& a, const Vec3& x) {
  return {a(0, 0) * x[0] + a(0, 1) * x[1] + a(0, 2) * x[2],
          a(1, 0) * x[0] + a(1, 1) * x[1] + a(1, 2) * x[2],
          a(2, 0) * x[0] + a(2, 1) * x[1] + a(2, 2) * x[2]};
}

// ---------------------------------------------------------------------------
// Symmetric 3x3 eigendecomposition.
//
// Primary path: closed-form eigenvalues through the trigonometric solution of
// the characteristic cubic, eigenvectors from cross products of rows of
// (A - lambda I). Near-degenerate spectra make those cross products
// ill-conditioned, so the solver falls back to cyclic Jacobi rotations, which
// are unconditionally stable. Results are ordered descending and every
// eigenvector's largest-magnitude component is made positive so repeated
// calls give bit-identical output.
// ---------------------------------------------------------------------------

struct EigenResult3 {
  std::array<double, 3> eigenvalues{};  // descending
  Mat3 eigenvectors;                    // columns, matching order
  bool used_fallback = false;           // Jacobi path taken
};

namespace detail {

inline double off_diag_sq(const Mat3& a) {
  return a(0, 1) * a(0, 1) + a(0, 2) * a(0, 2) + a(1, 2) * a(1, 2);
}

inline void fix_sign(Vec3& v) {
  std::size_t k = 0;
  for (std::size_t i = 1; i < 3; ++i)
    if (std::abs(v[i]) > std::abs(v[k])) k = i;
  if (v[k] < 0.0) v = scale3(v, -1.0);
}

// Cyclic Jacobi sweeps. Converges to machine precision within a handful of
// sweeps for any symmetric 3x3 input.
inline EigenResult3 jacobi_eig3(Mat3 a) {
  Mat3 vmat = Mat3::identity();
  double scale = 0.0;
  for (double x : a.m) scale = std::max(scale, std::abs(x));
  if (scale == 0.0) {
    EigenResult3 r;
    r.eigenvectors = Mat3::identity();
    r.used_fallback = true;
    return r;
  }
  const double stop = (1e-15 * scale) * (1e-15 * scale);
  for (int sweep = 0; sweep < 64 && off_diag_sq(a) > stop; ++sweep) {
    for (auto [p, q] : {std::pair<int, int>{0, 1}, {0, 2}, {1, 2}}) {
      const double apq = a(p, q);
      if (apq == 0.0) continue;
      const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
      const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                       (std::abs(theta) + std::sqrt(theta * theta + 1.0));
      const double c = 1.0 / std::sqrt(t * t + 1.0);
      const double s = t * c;
      Mat3 j = Mat3::identity();
      j(p, p) = c;
      j(q, q) = c;
      j(p, q) = s;
      j(q, p) = -s;
      a = mul(mul(j.transposed(), a), j);
      a(p, q) = a(q, p) = 0.0;  // rotation zeroes this pair by construction
      vmat = mul(vmat, j);
    }
  }
  std::array<int, 3> order = {0, 1, 2};
  std::stable_sort(order.begin(), order.end(),
                   [&](int x, int y) { return a(x, x) > a(y, y); });
  EigenResult3 r;
  r.used_fallback = true;
  for (std::size_t i = 0; i < 3; ++i) {
    r.eigenvalues[i] = a(order[i], order[i]);
    Vec3 col = vmat.col(order[i]);
    const double n = norm3(col);
    if (n > 0.0) col = scale3(col, 1.0 / n);
    fix_sign(col);
    r.eigenvectors.set_col(i, col);
  }
  return r;
}

// Null-space direction of (a - lambda I) from the best-conditioned cross
// product of its rows. Returns false when all candidates are tiny, i.e. the
// eigenvalue is (numerically) repeated.
inline bool eigvec_from_cross(const Mat3& a, double lambda, double scale, Vec3& out) {
  Mat3 m = a;
  m(0, 0) -= lambda;
  m(1, 1) -= lambda;
  m(2, 2) -= lambda;
  const Vec3 r0 = m.row_vec(0), r1 = m.row_vec(1), r2 = m.row_vec(2);
  const std::array<Vec3, 3> cand = {cross3(r0, r1), cross3(r0, r2), cross3(r1, r2)};
  std::size_t best = 0;
  double best_n = -1.0;
  for (std::size_t i = 0; i < 3; ++i) {
    const double n = norm3(cand[i]);
    if (n > best_n) {
      best_n = n;
      best = i;
    }
  }
  if (best_n <= 1e-6 * scale * scale) return false;
  out = scale3(cand[best], 1.0 / best_n);
  return true;
}

}  // namespace detail

// Throws std::invalid_argument when the input is not symmetric to 1e-12
// (entrywise). The caller owns pre-symmetrization if its matrix is only
// symmetric up to larger rounding noise.
inline EigenResult3 sym_eig3(const Mat3& a) {
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = r + 1; c < 3; ++c)
      if (std::abs(a(r, c) - a(c, r)) > 1e-12)
        throw std::invalid_argument(
            "sym_eig3: input not symmetric at (" + std::to_string(r) + "," +
            std::to_string(c) + "), skew " +
            std::to_string(std::abs(a(r, c) - a(c, r))));

  double scale = 0.0;
  for (double x : a.m) scale = std::max(scale, std::abs(x));
  if (scale == 0.0) {
    EigenResult3 r;
    r.eigenvectors = Mat3::identity();
    return r;
  }

  // Closed-form eigenvalues (trigonometric solution of the shifted cubic).
  const double q = a.trace() / 3.0;
  const double p1 = detail::off_diag_sq(a);
  const double p2 = (a(0, 0) - q) * (a(0, 0) - q) + (a(1, 1) - q) * (a(1, 1) - q) +
                    (a(2, 2) - q) * (a(2, 2) - q) + 2.0 * p1;
  if (p2 <= 1e-30 * scale * scale) {
    // Scalar matrix: every direction is an eigenvector.
    EigenResult3 r;
    r.eigenvalues = {q, q, q};
    r.eigenvectors = Mat3::identity();
    return r;
  }
  const double p = std::sqrt(p2 / 6.0);
  Mat3 b;
  for (std::size_t i = 0; i < 9; ++i) b.m[i] = a.m[i] / p;
  b(0, 0) -= q / p;
  b(1, 1) -= q / p;
  b(2, 2) -= q / p;
  const double rdet = std::clamp(b.det() / 2.0, -1.0, 1.0);
  const double phi = std::acos(rdet) / 3.0;
  const double two_pi_3 = 2.0 * std::numbers::pi / 3.0;
  const double l0 = q + 2.0 * p * std::cos(phi);
  const double l2 = q + 2.0 * p * std::cos(phi + two_pi_3);
  const double l1 = 3.0 * q - l0 - l2;

  // Repeated (or nearly repeated) eigenvalues leave the cross-product
  // construction without a well-defined null direction; hand those to Jacobi.
  const double degeneracy_tol = 1e-10 * std::max(std::abs(a.trace()), scale);
  if (l0 - l1 < degeneracy_tol || l1 - l2 < degeneracy_tol)
    return detail::jacobi_eig3(a);

  Vec3 v0, v2;
  if (!detail::eigvec_from_cross(a, l0, scale, v0) ||
      !detail::eigvec_from_cross(a, l2, scale, v2))
    return detail::jacobi_eig3(a);

  // Re-orthogonalize the extreme pair, then close the frame with a cross
  // product so the middle vector is exactly orthonormal to both.
  const double d = dot3(v2, v0);
  v2 = sub3(v2, scale3(v0, d));
  const double n2 = norm3(v2);
  if (n2 < 0.5) return detail::jacobi_eig3(a);
  v2 = scale3(v2, 1.0 / n2);
  Vec3 v1 = cross3(v2, v0);

  EigenResult3 r;
  detail::fix_sign(v0);
  detail::fix_sign(v1);
  detail::fix_sign(v2);
  r.eigenvectors.set_col(0, v0);
  r.eigenvectors.set_col(1, v1);
  r.eigenvectors.set_col(2, v2);
  // Rayleigh-quotient polish: with eigenvector error e, the quotient is off
  // by O(e^2), so this recovers nearly full double precision even when the
  // closed-form roots carry a few ulps of cancellation.
  r.eigenvalues = {dot3(v0, mul(a, v0)), dot3(v1, mul(a, v1)), dot3(v2, mul(a, v2))};
  if (r.eigenvalues[0] < r.eigenvalues[1] || r.eigenvalues[1] < r.eigenvalues[2])
    return detail::jacobi_eig3(a);

  // Residual audit: if the closed form lost accuracy (pathological scaling,
  // hidden near-degeneracy), redo with Jacobi rather than return junk.
  for (std::size_t i = 0; i < 3; ++i) {
    const Vec3 v = r.eigenvectors.col(i);
    const Vec3 av = mul(a, v);
    const Vec3 resid = sub3(av, scale3(v, r.eigenvalues[i]));
    if (norm3(resid) > 1e-9 * std::max(scale, 1.0)) return detail::jacobi_eig3(a);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Top singular value of a 3-row matrix.
//
// Rows must be unit-norm to 1e-6: callers pass row-normalized embedding
// stacks, and the cheap Gram route below is only meaningful under that
// contract. sigma1^2 equals the top eigenvalue of the 3x3 Gram matrix
// M M^T, so the cost is one 3xD product plus a fixed-size eigensolve instead
// of a full SVD of the 3xD matrix.
// ---------------------------------------------------------------------------

struct TopSingular {
  double sigma1 = 0.0;
  double lambda1 = 0.0;  // sigma1^2, top Gram eigenvalue
};

inline Mat3 gram_3xd(const Matrix& m) {
  Mat3 g;
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = i; j < 3; ++j) {
      double s = 0.0;
      const double* ri = m.row(i);
      const double* rj = m.row(j);
      for (std::size_t k = 0; k < m.cols; ++k) s += ri[k] * rj[k];
      g(i, j) = s;
      g(j, i) = s;
    }
  return g;
}

inline TopSingular top_singular_value(const Matrix& m) {
  if (m.rows != 3 || m.cols == 0)
    throw std::invalid_argument("top_singular_value: expected a 3xD matrix, got " +
                                std::to_string(m.rows) + "x" + std::to_string(m.cols));
  for (std::size_t r = 0; r < 3; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < m.cols; ++c) s += m.at(r, c) * m.at(r, c);
    if (std::abs(std::sqrt(s) - 1.0) > 1e-6)
      throw std::invalid_argument("top_singular_value: row " + std::to_string(r) +
                                  " is not unit-norm (|r| = " + std::to_string(std::sqrt(s)) + ")");
  }
  const EigenResult3 e = sym_eig3(gram_3xd(m));
  TopSingular t;
  t.lambda1 = e.eigenvalues[0];
  t.sigma1 = std::sqrt(std::max(t.lambda1, 0.0));
  return t;
}

// Reference route for the same quantity: one-sided Jacobi SVD that rotates
// the three rows until they are mutually orthogonal. Much more work per call
// than the Gram route; kept as the comparison baseline for benchmarks and
// cross-checks.
inline double top_singular_value_svd(const Matrix& m) {
  if (m.rows != 3 || m.cols == 0)
    throw std::invalid_argument("top_singular_value_svd: expected a 3xD matrix");
  Matrix w = m;
  const double eps = 1e-15;
  for (int sweep = 0; sweep < 60; ++sweep) {
    bool rotated = false;
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = i + 1; j < 3; ++j) {
        double aii = 0.0, ajj = 0.0, aij = 0.0;
        double* ri = w.row(i);
        double* rj = w.row(j);
        for (std::size_t k = 0; k < w.cols; ++k) {
          aii += ri[k] * ri[k];
          ajj += rj[k] * rj[k];
          aij += ri[k] * rj[k];
        }
        if (std::abs(aij) <= eps * std::sqrt(aii * ajj)) continue;
        rotated = true;
        const double zeta = (ajj - aii) / (2.0 * aij);
        const double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t k = 0; k < w.cols; ++k) {
          const double x = ri[k], y = rj[k];
          ri[k] = c * x - s * y;
          rj[k] = s * x + c * y;
        }
      }
    if (!rotated) break;
  }
  double best = 0.0;
  for (std::size_t i = 0; i < 3; ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < w.cols; ++k) s += w.at(i, k) * w.at(i, k);
    best = std::max(best, s);
  }
  return std::sqrt(best);
}

// ---------------------------------------------------------------------------
// Row-wise L2 normalization. A row whose norm underflows 1e-12 is an error:
// normalizing it would silently produce garbage directions, and every caller
// here feeds rows that are nonzero by construction.
// ---------------------------------------------------------------------------

inline Matrix l2_normalize_rows(const Matrix& m) {
  Matrix out = m;
  for (std::size_t r = 0; r < m.rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < m.cols; ++c) s += m.at(r, c) * m.at(r, c);
    const double n = std::sqrt(s);
    if (n <= 1e-12)
      throw std::invalid_argument("l2_normalize_rows: row " + std::to_string(r) +
                                  " has near-zero norm " + std::to_string(n));
    const double inv = 1.0 / n;
    for (std::size_t c = 0; c < m.cols; ++c) out.at(r, c) = m.at(r, c) * inv;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Similarity Procrustes: least-squares {scale, rotation, translation} mapping
// source points onto target points (Umeyama's closed form). Rotation comes
// from the SVD of the cross-covariance, built here on top of sym_eig3, with
// the determinant correction that rules out reflections.
// ---------------------------------------------------------------------------

struct SimilarityTransform {
  double scale = 1.0;
  Mat3 rotation = Mat3::identity();
  Vec3 translation{};
  // Cross-covariance was rank-deficient: the optimum is attained but not
  // unique, so downstream consumers should treat the rotation as one valid
  // choice rather than "the" alignment.
  bool degenerate = false;

  Vec3 apply(const Vec3& p) const {
    return add3(scale3(mul(rotation, p), scale), translation);
  }
};

namespace detail {

// SVD of a general 3x3 by one-sided Jacobi: right rotations orthogonalize
// the columns of a, after which singular values are plain column norms and
// left singular vectors the normalized columns. This stays accurate for
// repeated and for vanishing singular values, where eigendecomposition-based
// constructions of u lose orthogonality.
struct Svd3 {
  Mat3 u, v;
  std::array<double, 3> sigma{};
};

inline Svd3 svd3(const Mat3& a) {
  Mat3 w = a;
  Mat3 v = Mat3::identity();
  constexpr double eps = 1e-15;
  for (int sweep = 0; sweep < 60; ++sweep) {
    bool rotated = false;
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = i + 1; j < 3; ++j) {
        double aii = 0.0, ajj = 0.0, aij = 0.0;
        for (std::size_t k = 0; k < 3; ++k) {
          aii += w(k, i) * w(k, i);
          ajj += w(k, j) * w(k, j);
          aij += w(k, i) * w(k, j);
        }
        if (std::abs(aij) <= eps * std::sqrt(aii * ajj) || aij == 0.0) continue;
        rotated = true;
        const double zeta = (ajj - aii) / (2.0 * aij);
        const double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t k = 0; k < 3; ++k) {
          const double x = w(k, i), y = w(k, j);
          w(k, i) = c * x - s * y;
          w(k, j) = s * x + c * y;
          const double vx = v(k, i), vy = v(k, j);
          v(k, i) = c * vx - s * vy;
          v(k, j) = s * vx + c * vy;
        }
      }
    if (!rotated) break;
  }

  std::array<double, 3> sig;
  for (std::size_t i = 0; i < 3; ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < 3; ++k) s += w(k, i) * w(k, i);
    sig[i] = std::sqrt(s);
  }
  std::array<std::size_t, 3> order = {0, 1, 2};
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return sig[x] > sig[y]; });

  Svd3 out;
  std::array<Vec3, 3> ucols;
  const double cutoff = 1e-13 * std::max(sig[order[0]], 1e-300);
  std::size_t good = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    out.sigma[i] = sig[order[i]];
    out.v.set_col(i, v.col(order[i]));
    if (out.sigma[i] > cutoff && good == i) {
      Vec3 u = scale3(w.col(order[i]), 1.0 / out.sigma[i]);
      // Orthogonality against earlier columns is already near machine
      // precision; one Gram-Schmidt pass removes the residue.
      for (std::size_t k = 0; k < i; ++k) u = sub3(u, scale3(ucols[k], dot3(ucols[k], u)));
      const double n = norm3(u);
      if (n > 0.5) {
        ucols[i] = scale3(u, 1.0 / n);
        ++good;
      }
    }
  }
  // Orthonormal completion for rank-deficient inputs.
  if (good == 0) {
    ucols[0] = {1.0, 0.0, 0.0};
    good = 1;
  }
  if (good == 1) {
    const Vec3 aux = std::abs(ucols[0][0]) < 0.9 ? Vec3{1.0, 0.0, 0.0} : Vec3{0.0, 1.0, 0.0};
    const Vec3 c = cross3(ucols[0], aux);
    ucols[1] = scale3(c, 1.0 / norm3(c));
    good = 2;
  }
  if (good == 2) ucols[2] = cross3(ucols[0], ucols[1]);
  for (std::size_t i = 0; i < 3; ++i) out.u.set_col(i, ucols[i]);
  return out;
}

}  // namespace detail

inline SimilarityTransform procrustes_align(const std::vector<Vec3>& source,
                                            const std::vector<Vec3>& target) {
  if (source.size() != target.size())
    throw std::invalid_argument("procrustes_align: point counts differ (" +
                                std::to_string(source.size()) + " vs " +
                                std::to_string(target.size()) + ")");
  if (source.size() < 3)
    throw std::invalid_argument("procrustes_align: need at least 3 points, got " +
                                std::to_string(source.size()));
  const double n = static_cast<double>(source.size());

  Vec3 mu_s{}, mu_t{};
  for (std::size_t i = 0; i < source.size(); ++i) {
    mu_s = add3(mu_s, source[i]);
    mu_t = add3(mu_t, target[i]);
  }
  mu_s = scale3(mu_s, 1.0 / n);
  mu_t = scale3(mu_t, 1.0 / n);

  double var_s = 0.0;
  Mat3 cov;  // (1/n) sum (t - mu_t)(s - mu_s)^T
  for (std::size_t i = 0; i < source.size(); ++i) {
    const Vec3 xs = sub3(source[i], mu_s);
    const Vec3 xt = sub3(target[i], mu_t);
    var_s += dot3(xs, xs);
    for (std::size_t r = 0; r < 3; ++r)
      for (std::size_t c = 0; c < 3; ++c) cov(r, c) += xt[r] * xs[c] / n;
  }
  var_s /= n;

  const detail::Svd3 svd = detail::svd3(cov);

  SimilarityTransform out;
  // Rank <= 1 leaves a whole family of optimal rotations; rank 2 is still
  // unique up to the reflection handled below.
  out.degenerate = svd.sigma[1] <= 1e-12 * std::max(svd.sigma[0], 1e-300) || svd.sigma[0] == 0.0;

  const double d = (svd.u.det() * svd.v.det() < 0.0) ? -1.0 : 1.0;
  Mat3 dmat = Mat3::identity();
  dmat(2, 2) = d;
  out.rotation = mul(mul(svd.u, dmat), svd.v.transposed());

  const double tr_ds = svd.sigma[0] + svd.sigma[1] + d * svd.sigma[2];
  if (var_s <= 0.0) {
    // All source points coincide: scale is unidentifiable, keep 1.
    out.scale = 1.0;
    out.degenerate = true;
  } else {
    out.scale = tr_ds / var_s;
    if (out.scale <= 0.0) {
      // Anti-aligned degenerate cloud; fall back to a harmless positive scale.
      out.scale = std::numeric_limits<double>::min();
      out.degenerate = true;
    }
  }
  out.translation = sub3(mu_t, scale3(mul(out.rotation, mu_s), out.scale));
  return out;
}

// ---------------------------------------------------------------------------
// Rng: counter-based generator (splitmix64 finalizer over key + counter).
// A given (seed, call sequence) produces identical output on every platform,
// and split() derives statistically independent child streams, so data
// generation can be sharded per record without coordination.
// ---------------------------------------------------------------------------

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : key_(mix(seed ^ 0x9E3779B97F4A7C15ULL)) {}

  std::uint64_t next_u64() {
    ctr_ += 0x9E3779B97F4A7C15ULL;
    return mix(key_ + ctr_);
  }

  // Child stream independent of this one and of other stream ids. Does not
  // advance this generator.
  Rng split(std::uint64_t stream) const {
    Rng child(0);
    child.key_ = mix(key_ ^ mix(stream + 0x1D8E4E27C47D124FULL));
    child.ctr_ = 0;
    return child;
  }

  // Uniform in [0, 1) with 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform in (0, 1]; safe as a log() argument.
  double uniform_pos() {
    return (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Unbiased integer in [0, n) (Lemire's multiply-shift with rejection).
  std::uint64_t uniform_int(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("Rng::uniform_int: n must be positive");
    unsigned __int128 m = static_cast<unsigned __int128>(next_u64()) * n;
    auto lo = static_cast<std::uint64_t>(m);
    if (lo < n) {
      const std::uint64_t t = (0 - n) % n;
      while (lo < t) {
        m = static_cast<unsigned __int128>(next_u64()) * n;
        lo = static_cast<std::uint64_t>(m);
      }
    }
    return static_cast<std::uint64_t>(m >> 64);
  }

  // Standard normal via Box-Muller (no cached spare: keeps the stream
  // position a pure function of the call count).
  double normal() {
    const double u1 = uniform_pos();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  template <typename T>
  void shuffle(std::vector<T>& xs) {
    for (std::size_t i = xs.size(); i > 1; --i)
      std::swap(xs[i - 1], xs[uniform_int(i)]);
  }

  std::vector<std::size_t> permutation(std::size_t n) {
    std::vector<std::size_t> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = i;
    shuffle(p);
    return p;
  }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z ^= z >> 30;
    z *= 0xBF58476D1CE4E5B9ULL;
    z ^= z >> 27;
    z *= 0x94D049BB133111EBULL;
    z ^= z >> 31;
    return z;
  }

  std::uint64_t key_ = 0;
  std::uint64_t ctr_ = 0;
};

}  // namespace unihpe::numkit
