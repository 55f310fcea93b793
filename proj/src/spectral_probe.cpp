#include "svlab/spectral_probe.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "svlab/errors.hpp"

namespace svlab {

IndexSet critical_indices(const SvfAdapter& svf, std::size_t k) {
    const std::size_t n = svf.z.size();
    if (k < 1 || k > n) {
        throw ContractViolation("critical_indices: k=" + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return std::abs(svf.z[a] - 1.0) > std::abs(svf.z[b] - 1.0);
    });
    IndexSet picked(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
    std::sort(picked.begin(), picked.end());
    return picked;
}

CriticalSubspace subspace_from_indices(const SvdFactors& base, IndexSet indices, std::size_t layer) {
    if (indices.empty()) throw ContractViolation("critical subspace needs at least one index");
    for (std::size_t j = 0; j < indices.size(); ++j) {
        if (indices[j] >= base.rank()) throw ContractViolation("critical index out of range");
        if (j > 0 && indices[j] <= indices[j - 1]) throw ContractViolation("critical indices must be increasing");
    }
    CriticalSubspace crit;
    crit.u_crit = DenseMatrix(base.out_dim(), indices.size());
    crit.v_crit = DenseMatrix(base.in_dim(), indices.size());
    for (std::size_t j = 0; j < indices.size(); ++j) {
        crit.u_crit.set_column(j, base.left(indices[j]));
        crit.v_crit.set_column(j, base.right(indices[j]));
    }
    crit.indices = std::move(indices);
    crit.source_layer = layer;
    return crit;
}

CriticalSubspace build_critical_subspace(const SvdFactors& base, const SvfAdapter& svf, std::size_t k,
                                         std::size_t layer) {
    if (svf.z.size() != base.rank()) throw ContractViolation("build_critical_subspace: z length != rank");
    return subspace_from_indices(base, critical_indices(svf, k), layer);
}

GammaSpectrum gamma_spectrum(const DenseMatrix& grad, const SvdFactors& base, std::size_t layer) {
    if (grad.rows() != base.out_dim() || grad.cols() != base.in_dim()) {
        throw ContractViolation("gamma_spectrum: gradient shape does not match layer");
    }
    // (U^T G)_i . v_i
    const DenseMatrix utg = matmul_tn(base.u, grad);
    GammaSpectrum out;
    out.source_layer = layer;
    out.gamma.resize(base.rank());
    for (std::size_t i = 0; i < base.rank(); ++i) out.gamma[i] = dot(utg.row(i), base.vt.row(i));
    return out;
}

RealVector svf_loss_gradient(const DenseMatrix& grad_w, const SvdFactors& base) {
    RealVector g = gamma_spectrum(grad_w, base).gamma;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] *= base.sigma[i];
    return g;
}

SkillRelevantSet skill_relevant_set(const SvfAdapter& svf, double epsilon) {
    if (!(epsilon > 0.0)) throw ContractViolation("skill_relevant_set: epsilon must be positive");
    SkillRelevantSet s;
    s.epsilon = epsilon;
    for (std::size_t i = 0; i < svf.z.size(); ++i)
        if (std::abs(svf.z[i] - 1.0) > epsilon) s.indices.push_back(i);
    return s;
}

double median_deviation(const SvfAdapter& svf) {
    if (svf.z.empty()) throw ContractViolation("median_deviation: empty z");
    RealVector d(svf.z.size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = std::abs(svf.z[i] - 1.0);
    std::sort(d.begin(), d.end());
    const std::size_t n = d.size();
    return n % 2 ? d[n / 2] : 0.5 * (d[n / 2 - 1] + d[n / 2]);
}

namespace {

struct Counts {
    std::size_t inter = 0, uni = 0, smaller = 0;
};

Counts count(const IndexSet& a, const IndexSet& b) {
    IndexSet tmp;
    std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(tmp));
    Counts c;
    c.inter = tmp.size();
    c.uni = a.size() + b.size() - c.inter;
    c.smaller = std::min(a.size(), b.size());
    return c;
}

OverlapScore score(const Counts& c) {
    OverlapScore s;
    if (c.smaller > 0) s.overlap = static_cast<double>(c.inter) / static_cast<double>(c.smaller);
    if (c.uni > 0) s.jaccard = static_cast<double>(c.inter) / static_cast<double>(c.uni);
    return s;
}

}  // namespace

OverlapScore index_set_overlap(const IndexSet& a, const IndexSet& b) { return score(count(a, b)); }

LayeredOverlap layered_overlap(const std::vector<IndexSet>& a, const std::vector<IndexSet>& b) {
    if (a.size() != b.size()) throw ContractViolation("layered_overlap: layer counts differ");
    LayeredOverlap out;
    Counts pooled;
    for (std::size_t l = 0; l < a.size(); ++l) {
        Counts c = count(a[l], b[l]);
        out.per_layer.push_back(score(c));
        pooled.inter += c.inter;
        pooled.uni += c.uni;
        pooled.smaller += c.smaller;
    }
    out.micro = score(pooled);
    return out;
}

}  // namespace svlab
