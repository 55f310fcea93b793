#pragma once

#include <cstddef>
#include <utility>
#include <vector>

#include "svlab/dense_linalg.hpp"
#include "svlab/rng.hpp"

namespace svlab {

// Per-component scaling of a frozen layer's singular values.
struct SvfAdapter {
    RealVector z;

    static SvfAdapter identity(std::size_t rank) { return {RealVector(rank, 1.0)}; }
    friend bool operator==(const SvfAdapter&, const SvfAdapter&) = default;
};

// Low-rank update, effective delta is (alpha / rank) * b * a.
struct LoraAdapter {
    DenseMatrix b;  // d_out x r
    DenseMatrix a;  // r x d_in
    double alpha = 1.0;

    std::size_t rank() const noexcept { return a.rows(); }
    double scale() const noexcept { return alpha / static_cast<double>(rank()); }

    // B = 0, A ~ N(0, 0.02^2): the delta starts at exactly zero.
    static LoraAdapter initialize(std::size_t d_out, std::size_t d_in, std::size_t r, double alpha, Rng& rng);

    friend bool operator==(const LoraAdapter&, const LoraAdapter&) = default;
};

struct AdaptedLayer {
    SvdFactors base;
    SvfAdapter svf;
    LoraAdapter lora;

    std::size_t d_out() const noexcept { return base.out_dim(); }
    std::size_t d_in() const noexcept { return base.in_dim(); }

    // svf_apply(base, svf) + lora_delta(lora)
    DenseMatrix materialize() const;
};

DenseMatrix svf_apply(const SvdFactors& base, const SvfAdapter& svf);
DenseMatrix lora_delta(const LoraAdapter& lora);

// Applies the composite weight without materializing it: U(z*s*(Vt x)) + scale*B(A x).
RealVector adapted_forward(const AdaptedLayer& layer, std::span<const double> x);

using LayerDims = std::pair<std::size_t, std::size_t>;  // (d_out, d_in)

std::size_t param_count_svf(const std::vector<LayerDims>& dims);
std::size_t param_count_lora(const std::vector<LayerDims>& dims, int r);

}  // namespace svlab
