#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "svlab/dense_linalg.hpp"
#include "svlab/spectral_adapters.hpp"

namespace svlab {

using IndexSet = std::vector<std::size_t>;  // sorted, unique

struct CriticalSubspace {
    IndexSet indices;
    DenseMatrix u_crit;  // d_out x k
    DenseMatrix v_crit;  // d_in x k, kept for diagnostics only
    std::size_t source_layer = 0;

    std::size_t k() const noexcept { return indices.size(); }
    friend bool operator==(const CriticalSubspace&, const CriticalSubspace&) = default;
};

struct GammaSpectrum {
    RealVector gamma;
    std::size_t source_layer = 0;
};

struct SkillRelevantSet {
    IndexSet indices;
    double epsilon = 0.0;
};

// Indices of the k largest |z_i - 1|, ties to the lower index, returned sorted.
IndexSet critical_indices(const SvfAdapter& svf, std::size_t k);

// Gathers u_i, v_i at the given (sorted, in-range) indices.
CriticalSubspace subspace_from_indices(const SvdFactors& base, IndexSet indices, std::size_t layer = 0);

CriticalSubspace build_critical_subspace(const SvdFactors& base, const SvfAdapter& svf, std::size_t k,
                                         std::size_t layer = 0);

// gamma_i = u_i^T G v_i
GammaSpectrum gamma_spectrum(const DenseMatrix& grad, const SvdFactors& base, std::size_t layer = 0);

// dL/dz_i = sigma_i * gamma_i when grad_w is dL/dW evaluated at the SVF weight.
RealVector svf_loss_gradient(const DenseMatrix& grad_w, const SvdFactors& base);

SkillRelevantSet skill_relevant_set(const SvfAdapter& svf, double epsilon);

// Data-driven default threshold for trained probes: median of |z - 1|.
double median_deviation(const SvfAdapter& svf);

struct OverlapScore {
    double overlap = 0.0;
    double jaccard = 0.0;
};

OverlapScore index_set_overlap(const IndexSet& a, const IndexSet& b);

struct LayeredOverlap {
    std::vector<OverlapScore> per_layer;
    OverlapScore micro;  // intersection and union counts pooled over layers
};

LayeredOverlap layered_overlap(const std::vector<IndexSet>& a, const std::vector<IndexSet>& b);

}  // namespace svlab
