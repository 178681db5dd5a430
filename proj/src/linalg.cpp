#include "dualprop/linalg.hpp"

#include <cmath>
#include <numbers>

#include "dualprop/rng.hpp"

namespace dualprop {

double Rng::normal() {
  // Box-Muller; u1 nudged away from zero so log() stays finite
  double u1 = uniform();
  if (u1 < 1e-300) u1 = 1e-300;
  double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

Matrix Matrix::identity(std::size_t n) {
  Matrix I(n, n);
  for (std::size_t i = 0; i < n; ++i) I(i, i) = 1.0;
  return I;
}

static void require(bool ok, const char* what) {
  if (!ok) throw DimensionError(what);
}

double dot(const Vector& a, const Vector& b) {
  require(a.size() == b.size(), "dot: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm2(const Vector& v) { return std::sqrt(dot(v, v)); }

Vector add(const Vector& a, const Vector& b) {
  require(a.size() == b.size(), "add: size mismatch");
  Vector r(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) r[i] = a[i] + b[i];
  return r;
}

Vector sub(const Vector& a, const Vector& b) {
  require(a.size() == b.size(), "sub: size mismatch");
  Vector r(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) r[i] = a[i] - b[i];
  return r;
}

Vector scale(const Vector& v, double c) {
  Vector r(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) r[i] = c * v[i];
  return r;
}

Vector axpy(const Vector& a, double c, const Vector& b) {
  require(a.size() == b.size(), "axpy: size mismatch");
  Vector r(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) r[i] = a[i] + c * b[i];
  return r;
}

Vector matvec(const Matrix& M, const Vector& v) {
  require(M.cols == v.size(), "matvec: shape mismatch");
  Vector y(M.rows, 0.0);
  const double* row = M.data.data();
  for (std::size_t i = 0; i < M.rows; ++i, row += M.cols) {
    double s = 0.0;
    for (std::size_t j = 0; j < M.cols; ++j) s += row[j] * v[j];
    y[i] = s;
  }
  return y;
}

Vector matvec_transposed(const Matrix& M, const Vector& v) {
  require(M.rows == v.size(), "matvec_transposed: shape mismatch");
  Vector y(M.cols, 0.0);
  const double* row = M.data.data();
  for (std::size_t i = 0; i < M.rows; ++i, row += M.cols) {
    const double vi = v[i];
    for (std::size_t j = 0; j < M.cols; ++j) y[j] += row[j] * vi;
  }
  return y;
}

Matrix outer(const Vector& u, const Vector& v) {
  Matrix M(u.size(), v.size());
  for (std::size_t i = 0; i < u.size(); ++i)
    for (std::size_t j = 0; j < v.size(); ++j) M(i, j) = u[i] * v[j];
  return M;
}

Matrix matmul(const Matrix& A, const Matrix& B) {
  require(A.cols == B.rows, "matmul: shape mismatch");
  Matrix C(A.rows, B.cols);
  for (std::size_t i = 0; i < A.rows; ++i) {
    for (std::size_t k = 0; k < A.cols; ++k) {
      const double aik = A(i, k);
      if (aik == 0.0) continue;
      for (std::size_t j = 0; j < B.cols; ++j) C(i, j) += aik * B(k, j);
    }
  }
  return C;
}

Matrix transpose(const Matrix& M) {
  Matrix T(M.cols, M.rows);
  for (std::size_t i = 0; i < M.rows; ++i)
    for (std::size_t j = 0; j < M.cols; ++j) T(j, i) = M(i, j);
  return T;
}

Matrix add(const Matrix& A, const Matrix& B) {
  require(A.same_shape(B), "matrix add: shape mismatch");
  Matrix C = A;
  for (std::size_t i = 0; i < C.data.size(); ++i) C.data[i] += B.data[i];
  return C;
}

Matrix sub(const Matrix& A, const Matrix& B) {
  require(A.same_shape(B), "matrix sub: shape mismatch");
  Matrix C = A;
  for (std::size_t i = 0; i < C.data.size(); ++i) C.data[i] -= B.data[i];
  return C;
}

Matrix scale(const Matrix& M, double c) {
  Matrix C = M;
  for (double& x : C.data) x *= c;
  return C;
}

double frobenius_norm(const Matrix& M) {
  double s = 0.0;
  for (double x : M.data) s += x * x;
  return std::sqrt(s);
}

double spectral_norm(const Matrix& M, int iters, std::uint64_t seed) {
  if (M.rows == 0 || M.cols == 0) throw DimensionError("spectral_norm: empty matrix");
  Rng rng(seed);
  Vector v(M.cols);
  for (double& x : v) x = rng.normal();
  double n = norm2(v);
  if (n == 0.0) v[0] = 1.0; else v = scale(v, 1.0 / n);

  for (int t = 0; t < iters; ++t) {
    Vector w = matvec_transposed(M, matvec(M, v));  // M^T M v
    double wn = norm2(w);
    if (wn < 1e-300) return 0.0;  // v fell in the null space; sigma_max estimate collapses
    v = scale(w, 1.0 / wn);
  }
  return norm2(matvec(M, v));  // sqrt(v^T M^T M v) for unit v
}

// LU with partial pivoting, factored in place; perm holds the row order.
namespace {

struct Lu {
  Matrix lu;
  std::vector<std::size_t> perm;
};

Lu lu_factor(const Matrix& A) {
  if (A.rows != A.cols) throw DimensionError("solve: matrix not square");
  const std::size_t n = A.rows;
  Lu f{A, std::vector<std::size_t>(n)};
  for (std::size_t i = 0; i < n; ++i) f.perm[i] = i;
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t p = c;
    double best = std::abs(f.lu(c, c));
    for (std::size_t r = c + 1; r < n; ++r) {
      double a = std::abs(f.lu(r, c));
      if (a > best) { best = a; p = r; }
    }
    if (best < 1e-300) throw SingularMatrix("solve: singular pivot");
    if (p != c) {
      for (std::size_t j = 0; j < n; ++j) std::swap(f.lu(c, j), f.lu(p, j));
      std::swap(f.perm[c], f.perm[p]);
    }
    for (std::size_t r = c + 1; r < n; ++r) {
      double m = f.lu(r, c) / f.lu(c, c);
      f.lu(r, c) = m;
      for (std::size_t j = c + 1; j < n; ++j) f.lu(r, j) -= m * f.lu(c, j);
    }
  }
  return f;
}

Vector lu_solve(const Lu& f, const Vector& b) {
  const std::size_t n = f.lu.rows;
  Vector x(n);
  for (std::size_t i = 0; i < n; ++i) x[i] = b[f.perm[i]];
  for (std::size_t i = 1; i < n; ++i)
    for (std::size_t j = 0; j < i; ++j) x[i] -= f.lu(i, j) * x[j];
  for (std::size_t ii = n; ii-- > 0;) {
    for (std::size_t j = ii + 1; j < n; ++j) x[ii] -= f.lu(ii, j) * x[j];
    x[ii] /= f.lu(ii, ii);
  }
  return x;
}

}  // namespace

Vector solve(const Matrix& A, const Vector& b) {
  if (A.rows != b.size()) throw DimensionError("solve: rhs size mismatch");
  return lu_solve(lu_factor(A), b);
}

Matrix inverse(const Matrix& A) {
  Lu f = lu_factor(A);
  const std::size_t n = A.rows;
  Matrix inv(n, n);
  Vector e(n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    e[j] = 1.0;
    Vector col = lu_solve(f, e);
    for (std::size_t i = 0; i < n; ++i) inv(i, j) = col[i];
    e[j] = 0.0;
  }
  return inv;
}

// Power iteration on a symmetric matrix; returns the signed Rayleigh quotient
// at the dominant-magnitude eigenvector.
static double dominant_eigenvalue_sym(const Matrix& A, int iters, std::uint64_t seed) {
  Rng rng(seed);
  Vector v(A.cols);
  for (double& x : v) x = rng.normal();
  double n = norm2(v);
  if (n == 0.0) v[0] = 1.0; else v = scale(v, 1.0 / n);
  for (int t = 0; t < iters; ++t) {
    Vector w = matvec(A, v);
    double wn = norm2(w);
    if (wn < 1e-300) return 0.0;
    v = scale(w, 1.0 / wn);
  }
  return dot(v, matvec(A, v));
}

double largest_eigenvalue_sym(const Matrix& A, int iters) {
  if (A.rows != A.cols) throw DimensionError("largest_eigenvalue_sym: not square");
  // shift so the target eigenvalue dominates in magnitude even when A has a
  // larger-magnitude negative eigenvalue
  double m = std::abs(dominant_eigenvalue_sym(A, iters, 0xabcd));
  if (m == 0.0) return 0.0;
  Matrix shifted = add(A, scale(Matrix::identity(A.rows), m));  // A + mI >= 0
  return dominant_eigenvalue_sym(shifted, iters, 0xabce) - m;
}

double smallest_eigenvalue_sym(const Matrix& A, int iters) {
  if (A.rows != A.cols) throw DimensionError("smallest_eigenvalue_sym: not square");
  double m = std::abs(dominant_eigenvalue_sym(A, iters, 0xabcd));
  if (m == 0.0) return 0.0;
  Matrix shifted = sub(scale(Matrix::identity(A.rows), m), A);  // mI - A >= 0
  return m - dominant_eigenvalue_sym(shifted, iters, 0xabcf);
}

}  // namespace dualprop
