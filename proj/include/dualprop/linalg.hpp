#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace dualprop {

using Vector = std::vector<double>;

struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Dense row-major matrix of doubles. Everything in this project is small and
// dense, so there is no sparsity or view machinery -- just contiguous storage
// and the handful of kernels the algorithms need.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;  // rows * cols, row-major

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0)
      : rows(r), cols(c), data(r * c, fill) {}

  static Matrix identity(std::size_t n);

  double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

  bool same_shape(const Matrix& other) const {
    return rows == other.rows && cols == other.cols;
  }
};

// ---- vector ops ----

double dot(const Vector& a, const Vector& b);
double norm2(const Vector& v);           // Euclidean norm
Vector add(const Vector& a, const Vector& b);
Vector sub(const Vector& a, const Vector& b);
Vector scale(const Vector& v, double c);
// a + c * b
Vector axpy(const Vector& a, double c, const Vector& b);

// ---- matrix ops ----

// y = M v
Vector matvec(const Matrix& M, const Vector& v);
// y = M^T v
Vector matvec_transposed(const Matrix& M, const Vector& v);
// u v^T
Matrix outer(const Vector& u, const Vector& v);
Matrix matmul(const Matrix& A, const Matrix& B);
Matrix transpose(const Matrix& M);
Matrix add(const Matrix& A, const Matrix& B);
Matrix sub(const Matrix& A, const Matrix& B);
Matrix scale(const Matrix& M, double c);
double frobenius_norm(const Matrix& M);

// Largest singular value estimated by power iteration on M^T M, started from
// a seed-deterministic random unit vector; returns the square root of the
// final Rayleigh quotient. Throws DimensionError on an empty matrix.
double spectral_norm(const Matrix& M, int iters = 100, std::uint64_t seed = 0x5eed);

// Solve A x = b by LU with partial pivoting (A square). Throws
// SingularMatrix when a pivot degenerates.
struct SingularMatrix : std::runtime_error {
  using std::runtime_error::runtime_error;
};
Vector solve(const Matrix& A, const Vector& b);
Matrix inverse(const Matrix& A);

// Smallest eigenvalue of a symmetric matrix, estimated by a two-stage shifted
// power iteration: first the dominant magnitude m, then lambda_min = m -
// lambda_max(mI - A). Sign-correct for indefinite inputs, unlike plain
// inverse iteration.
double smallest_eigenvalue_sym(const Matrix& A, int iters = 200);
double largest_eigenvalue_sym(const Matrix& A, int iters = 200);

}  // namespace dualprop
