#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "svlab/rng.hpp"

namespace svlab {

using RealVector = std::vector<double>;

// Row-major dense real matrix. The universal carrier for weights, gradients
// and adapter factors. A default-constructed matrix is 0x0 and only valid as
// a placeholder; every public operation requires rows, cols >= 1.
class DenseMatrix {
public:
    DenseMatrix() = default;
    DenseMatrix(std::size_t rows, std::size_t cols, double fill = 0.0);
    DenseMatrix(std::size_t rows, std::size_t cols, std::vector<double> data);

    static DenseMatrix identity(std::size_t n);
    static DenseMatrix diagonal(std::span<const double> diag);
    static DenseMatrix gaussian(std::size_t rows, std::size_t cols, Rng& rng, double stddev = 1.0);
    static DenseMatrix from_columns(std::span<const RealVector> columns);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t i, std::size_t j) noexcept { return data_[i * cols_ + j]; }
    double operator()(std::size_t i, std::size_t j) const noexcept { return data_[i * cols_ + j]; }

    std::span<double> row(std::size_t i) noexcept { return {data_.data() + i * cols_, cols_}; }
    std::span<const double> row(std::size_t i) const noexcept { return {data_.data() + i * cols_, cols_}; }

    RealVector column(std::size_t j) const;
    void set_column(std::size_t j, std::span<const double> values);

    std::vector<double>& data() noexcept { return data_; }
    const std::vector<double>& data() const noexcept { return data_; }

    DenseMatrix transpose() const;
    bool all_finite() const noexcept;

    DenseMatrix& operator+=(const DenseMatrix& other);
    DenseMatrix& operator-=(const DenseMatrix& other);
    DenseMatrix& operator*=(double s) noexcept;

    friend bool operator==(const DenseMatrix&, const DenseMatrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

DenseMatrix operator+(DenseMatrix a, const DenseMatrix& b);
DenseMatrix operator-(DenseMatrix a, const DenseMatrix& b);
DenseMatrix operator*(DenseMatrix a, double s);
DenseMatrix operator*(double s, DenseMatrix a);

DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b);
// aᵀ·b without materializing the transpose.
DenseMatrix matmul_tn(const DenseMatrix& a, const DenseMatrix& b);
// a·bᵀ without materializing the transpose.
DenseMatrix matmul_nt(const DenseMatrix& a, const DenseMatrix& b);
RealVector matvec(const DenseMatrix& a, std::span<const double> x);
RealVector matvec_t(const DenseMatrix& a, std::span<const double> x);

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> a);

// tr(aᵀb). Throws ContractViolation on shape mismatch.
double frobenius_inner(const DenseMatrix& a, const DenseMatrix& b);
double frobenius_norm(const DenseMatrix& a);
double max_abs(const DenseMatrix& a) noexcept;

// Largest |(aᵀa - I)_ij| over a's columns.
double orthonormality_error(const DenseMatrix& a);

// basis·(basisᵀ·x). `basis` must have orthonormal columns within 1e-8.
DenseMatrix project_onto_columns(const DenseMatrix& x, const DenseMatrix& basis);

// Orthonormal basis for the column span via modified Gram-Schmidt with one
// reorthogonalization pass. Columns that fall below `drop_tol` relative
// norm are discarded, so the result may have fewer columns than the input.
DenseMatrix orthonormalize_columns(const DenseMatrix& a, double drop_tol = 1e-10);

// Haar-distributed rows x cols matrix with orthonormal columns (cols <= rows).
DenseMatrix haar_orthonormal(std::size_t rows, std::size_t cols, Rng& rng);

// Thin SVD factors: u is m x r, vt is r x n, r = min(m, n).
struct SvdFactors {
    DenseMatrix u;
    RealVector sigma;
    DenseMatrix vt;

    std::size_t rank() const noexcept { return sigma.size(); }
    std::size_t out_dim() const noexcept { return u.rows(); }
    std::size_t in_dim() const noexcept { return vt.cols(); }

    RealVector left(std::size_t i) const { return u.column(i); }
    RealVector right(std::size_t i) const { return RealVector(vt.row(i).begin(), vt.row(i).end()); }

    DenseMatrix reconstruct() const;

    friend bool operator==(const SvdFactors&, const SvdFactors&) = default;
};

struct SvdOptions {
    int max_sweeps = 80;
};

// Thin SVD by one-sided (Hestenes) Jacobi on the columns of the taller
// orientation. Deterministic for identical input bytes.
//
// Sign convention: each left singular vector u_i has a nonnegative entry of
// largest magnitude (ties go to the lowest row index); v_i flips with it.
// Singular values are sorted nonincreasing; equal values keep Jacobi order.
// Left vectors for (numerically) zero singular values are completed to an
// orthonormal set from the standard basis.
//
// Throws NumericalFailure naming the sweep count if rotations do not settle.
SvdFactors svd(const DenseMatrix& w, SvdOptions options = {});

double spectral_norm(const DenseMatrix& a);

}  // namespace svlab
