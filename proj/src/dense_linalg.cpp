#include "svlab/dense_linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "svlab/errors.hpp"

namespace svlab {

namespace {

void require_same_shape(const DenseMatrix& a, const DenseMatrix& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw ContractViolation(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                                std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                                std::to_string(b.cols()));
    }
}

void require_nonempty_finite(const DenseMatrix& a, const char* op) {
    if (a.rows() == 0 || a.cols() == 0) throw ContractViolation(std::string(op) + ": empty matrix");
    if (!a.all_finite()) throw ContractViolation(std::string(op) + ": non-finite entry");
}

}  // namespace

DenseMatrix::DenseMatrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

DenseMatrix::DenseMatrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
        throw ContractViolation("DenseMatrix: data length " + std::to_string(data_.size()) + " != " +
                                std::to_string(rows_) + "x" + std::to_string(cols_));
    }
}

DenseMatrix DenseMatrix::identity(std::size_t n) {
    DenseMatrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

DenseMatrix DenseMatrix::diagonal(std::span<const double> diag) {
    DenseMatrix m(diag.size(), diag.size());
    for (std::size_t i = 0; i < diag.size(); ++i) m(i, i) = diag[i];
    return m;
}

DenseMatrix DenseMatrix::gaussian(std::size_t rows, std::size_t cols, Rng& rng, double stddev) {
    DenseMatrix m(rows, cols);
    for (double& x : m.data_) x = stddev * rng.normal();
    return m;
}

DenseMatrix DenseMatrix::from_columns(std::span<const RealVector> columns) {
    if (columns.empty()) throw ContractViolation("from_columns: no columns");
    DenseMatrix m(columns.front().size(), columns.size());
    for (std::size_t j = 0; j < columns.size(); ++j) m.set_column(j, columns[j]);
    return m;
}

RealVector DenseMatrix::column(std::size_t j) const {
    RealVector out(rows_);
    for (std::size_t i = 0; i < rows_; ++i) out[i] = (*this)(i, j);
    return out;
}

void DenseMatrix::set_column(std::size_t j, std::span<const double> values) {
    if (values.size() != rows_) throw ContractViolation("set_column: length mismatch");
    for (std::size_t i = 0; i < rows_; ++i) (*this)(i, j) = values[i];
}

DenseMatrix DenseMatrix::transpose() const {
    DenseMatrix t(cols_, rows_);
    for (std::size_t i = 0; i < rows_; ++i)
        for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
    return t;
}

bool DenseMatrix::all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
}

DenseMatrix& DenseMatrix::operator+=(const DenseMatrix& other) {
    require_same_shape(*this, other, "operator+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
}

DenseMatrix& DenseMatrix::operator-=(const DenseMatrix& other) {
    require_same_shape(*this, other, "operator-=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
    return *this;
}

DenseMatrix& DenseMatrix::operator*=(double s) noexcept {
    for (double& x : data_) x *= s;
    return *this;
}

DenseMatrix operator+(DenseMatrix a, const DenseMatrix& b) { return a += b; }
DenseMatrix operator-(DenseMatrix a, const DenseMatrix& b) { return a -= b; }
DenseMatrix operator*(DenseMatrix a, double s) { return a *= s; }
DenseMatrix operator*(double s, DenseMatrix a) { return a *= s; }

namespace {

// Four independent partial sums (fixed order, so still deterministic) let the
// compiler keep the adds in vector registers.
double dot_raw(const double* a, const double* b, std::size_t n) {
    double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    for (; i < n; ++i) s0 += a[i] * b[i];
    return (s0 + s1) + (s2 + s3);
}

}  // namespace

DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b) {
    if (a.cols() != b.rows()) {
        throw ContractViolation("matmul: inner dimensions " + std::to_string(a.cols()) + " vs " +
                                std::to_string(b.rows()));
    }
    DenseMatrix c(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto crow = c.row(i);
        for (std::size_t p = 0; p < a.cols(); ++p) {
            const double aip = a(i, p);
            if (aip == 0.0) continue;
            auto brow = b.row(p);
            for (std::size_t j = 0; j < b.cols(); ++j) crow[j] += aip * brow[j];
        }
    }
    return c;
}

DenseMatrix matmul_tn(const DenseMatrix& a, const DenseMatrix& b) {
    if (a.rows() != b.rows()) throw ContractViolation("matmul_tn: row counts differ");
    DenseMatrix c(a.cols(), b.cols());
    for (std::size_t p = 0; p < a.rows(); ++p) {
        auto arow = a.row(p);
        auto brow = b.row(p);
        for (std::size_t i = 0; i < a.cols(); ++i) {
            const double api = arow[i];
            if (api == 0.0) continue;
            auto crow = c.row(i);
            for (std::size_t j = 0; j < b.cols(); ++j) crow[j] += api * brow[j];
        }
    }
    return c;
}

DenseMatrix matmul_nt(const DenseMatrix& a, const DenseMatrix& b) {
    if (a.cols() != b.cols()) throw ContractViolation("matmul_nt: column counts differ");
    DenseMatrix c(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.rows(); ++j) c(i, j) = dot_raw(a.row(i).data(), b.row(j).data(), a.cols());
    return c;
}

RealVector matvec(const DenseMatrix& a, std::span<const double> x) {
    if (a.cols() != x.size()) throw ContractViolation("matvec: dimension mismatch");
    RealVector y(a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) y[i] = dot(a.row(i), x);
    return y;
}

RealVector matvec_t(const DenseMatrix& a, std::span<const double> x) {
    if (a.rows() != x.size()) throw ContractViolation("matvec_t: dimension mismatch");
    RealVector y(a.cols(), 0.0);
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto arow = a.row(i);
        for (std::size_t j = 0; j < a.cols(); ++j) y[j] += arow[j] * x[i];
    }
    return y;
}


double dot(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw ContractViolation("dot: length mismatch");
    return dot_raw(a.data(), b.data(), a.size());
}

double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

double frobenius_inner(const DenseMatrix& a, const DenseMatrix& b) {
    require_same_shape(a, b, "frobenius_inner");
    return dot(a.data(), b.data());
}

double frobenius_norm(const DenseMatrix& a) { return norm2(a.data()); }

double max_abs(const DenseMatrix& a) noexcept {
    double m = 0.0;
    for (double x : a.data()) m = std::max(m, std::abs(x));
    return m;
}

double orthonormality_error(const DenseMatrix& a) {
    DenseMatrix g = matmul_tn(a, a);
    for (std::size_t i = 0; i < g.rows(); ++i) g(i, i) -= 1.0;
    return max_abs(g);
}

DenseMatrix project_onto_columns(const DenseMatrix& x, const DenseMatrix& basis) {
    if (basis.rows() != x.rows()) throw ContractViolation("project_onto_columns: basis/x row mismatch");
    if (orthonormality_error(basis) > 1e-8) {
        throw ContractViolation("project_onto_columns: basis columns are not orthonormal");
    }
    return matmul(basis, matmul_tn(basis, x));
}

DenseMatrix orthonormalize_columns(const DenseMatrix& a, double drop_tol) {
    std::vector<RealVector> kept;
    double scale = 0.0;
    for (std::size_t j = 0; j < a.cols(); ++j) scale = std::max(scale, norm2(a.column(j)));
    for (std::size_t j = 0; j < a.cols(); ++j) {
        RealVector v = a.column(j);
        const double original = norm2(v);
        for (int pass = 0; pass < 2; ++pass) {
            for (const auto& q : kept) {
                const double c = dot(q, v);
                for (std::size_t i = 0; i < v.size(); ++i) v[i] -= c * q[i];
            }
        }
        const double n = norm2(v);
        if (original == 0.0 || n <= drop_tol * std::max(scale, original)) continue;
        for (double& x : v) x /= n;
        kept.push_back(std::move(v));
    }
    if (kept.empty()) return DenseMatrix(a.rows(), 0);
    return DenseMatrix::from_columns(kept);
}

DenseMatrix haar_orthonormal(std::size_t rows, std::size_t cols, Rng& rng) {
    if (cols > rows) throw ContractViolation("haar_orthonormal: cols > rows");
    // Gram-Schmidt on a Gaussian matrix yields Q with R having positive
    // diagonal, which is exactly the Haar measure.
    for (;;) {
        DenseMatrix q = orthonormalize_columns(DenseMatrix::gaussian(rows, cols, rng));
        if (q.cols() == cols) return q;
    }
}

DenseMatrix SvdFactors::reconstruct() const {
    DenseMatrix us = u;
    for (std::size_t i = 0; i < us.rows(); ++i)
        for (std::size_t j = 0; j < sigma.size(); ++j) us(i, j) *= sigma[j];
    return matmul(us, vt);
}

namespace {

// One-sided Jacobi on a matrix with m >= n, given as its n columns (each of
// length m) stored as the rows of `cols`. On return the rows of `cols` are
// mutually orthogonal (A·V) and the rows of `vrows` are the columns of V.
void hestenes_jacobi(DenseMatrix& cols, DenseMatrix& vrows, int max_sweeps) {
    const std::size_t n = cols.rows();
    const std::size_t m = cols.cols();
    const double tol = static_cast<double>(m) * std::numeric_limits<double>::epsilon();
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        bool rotated = false;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                auto cp = cols.row(p);
                auto cq = cols.row(q);
                const double alpha = dot(cp, cp);
                const double beta = dot(cq, cq);
                const double gamma = dot(cp, cq);
                if (gamma == 0.0 || std::abs(gamma) <= tol * std::sqrt(alpha * beta)) continue;
                rotated = true;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (std::size_t k = 0; k < m; ++k) {
                    const double a = cp[k];
                    const double b = cq[k];
                    cp[k] = c * a - s * b;
                    cq[k] = s * a + c * b;
                }
                auto vp = vrows.row(p);
                auto vq = vrows.row(q);
                for (std::size_t k = 0; k < n; ++k) {
                    const double a = vp[k];
                    const double b = vq[k];
                    vp[k] = c * a - s * b;
                    vq[k] = s * a + c * b;
                }
            }
        }
        if (!rotated) return;
    }
    throw NumericalFailure("svd: one-sided Jacobi did not converge after " + std::to_string(max_sweeps) +
                           " sweeps");
}

// Thin SVD for m >= n. Returns u (m x n), sigma, and v (n x n, columns).
void svd_tall(const DenseMatrix& a, DenseMatrix& u, RealVector& sigma, DenseMatrix& v, int max_sweeps) {
    const std::size_t m = a.rows();
    const std::size_t n = a.cols();
    DenseMatrix cols = a.transpose();
    DenseMatrix vrows = DenseMatrix::identity(n);
    hestenes_jacobi(cols, vrows, max_sweeps);

    RealVector norms(n);
    for (std::size_t j = 0; j < n; ++j) norms[j] = norm2(cols.row(j));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return norms[x] > norms[y]; });

    const double smax = norms[order.front()];
    const double zero_tol = smax * static_cast<double>(std::max(m, n)) * std::numeric_limits<double>::epsilon();

    u = DenseMatrix(m, n);
    v = DenseMatrix(n, n);
    sigma.assign(n, 0.0);
    std::vector<RealVector> basis;
    std::vector<std::size_t> missing;
    for (std::size_t j = 0; j < n; ++j) {
        const std::size_t src = order[j];
        sigma[j] = norms[src];
        auto vr = vrows.row(src);
        for (std::size_t i = 0; i < n; ++i) v(i, j) = vr[i];
        if (smax == 0.0 || norms[src] <= zero_tol) {
            missing.push_back(j);
            continue;
        }
        RealVector col(cols.row(src).begin(), cols.row(src).end());
        for (double& x : col) x /= norms[src];
        u.set_column(j, col);
        basis.push_back(std::move(col));
    }

    // Complete the left basis from e_0, e_1, ... for null directions.
    std::size_t next_unit = 0;
    for (std::size_t j : missing) {
        for (; next_unit < m; ++next_unit) {
            RealVector e(m, 0.0);
            e[next_unit] = 1.0;
            for (int pass = 0; pass < 2; ++pass) {
                for (const auto& q : basis) {
                    const double c = dot(q, e);
                    for (std::size_t i = 0; i < m; ++i) e[i] -= c * q[i];
                }
            }
            const double nrm = norm2(e);
            if (nrm > 0.5) {
                for (double& x : e) x /= nrm;
                u.set_column(j, e);
                basis.push_back(std::move(e));
                ++next_unit;
                break;
            }
        }
    }
}

}  // namespace

SvdFactors svd(const DenseMatrix& w, SvdOptions options) {
    require_nonempty_finite(w, "svd");
    const bool wide = w.rows() < w.cols();
    DenseMatrix left;
    DenseMatrix right;
    RealVector sigma;
    if (wide) {
        svd_tall(w.transpose(), right, sigma, left, options.max_sweeps);
    } else {
        svd_tall(w, left, sigma, right, options.max_sweeps);
    }
    // left: m x r (columns u_i); right: n x r (columns v_i).
    const std::size_t r = sigma.size();
    for (std::size_t j = 0; j < r; ++j) {
        std::size_t arg = 0;
        double best = -1.0;
        for (std::size_t i = 0; i < left.rows(); ++i) {
            if (std::abs(left(i, j)) > best) {
                best = std::abs(left(i, j));
                arg = i;
            }
        }
        if (left(arg, j) < 0.0) {
            for (std::size_t i = 0; i < left.rows(); ++i) left(i, j) = -left(i, j);
            for (std::size_t i = 0; i < right.rows(); ++i) right(i, j) = -right(i, j);
        }
    }
    if (wide) {
        // For a wide matrix the Jacobi V is square (m x m) and the tall
        // side's thin factor is n x m, so both already have r = m columns.
    }
    SvdFactors f;
    f.u = std::move(left);
    f.sigma = std::move(sigma);
    f.vt = right.transpose();
    return f;
}

double spectral_norm(const DenseMatrix& a) { return svd(a).sigma.front(); }

}  // namespace svlab
