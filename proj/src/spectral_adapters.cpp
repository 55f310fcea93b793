#include "svlab/spectral_adapters.hpp"

#include <algorithm>
#include <string>

#include "svlab/errors.hpp"

namespace svlab {

LoraAdapter LoraAdapter::initialize(std::size_t d_out, std::size_t d_in, std::size_t r, double alpha, Rng& rng) {
    if (r == 0 || r > std::min(d_out, d_in)) {
        throw ContractViolation("lora rank " + std::to_string(r) + " outside [1, min(d_out, d_in)]");
    }
    if (!(alpha > 0.0)) throw ContractViolation("lora alpha must be positive");
    LoraAdapter lora;
    lora.a = DenseMatrix::gaussian(r, d_in, rng, 0.02);
    lora.b = DenseMatrix(d_out, r);
    lora.alpha = alpha;
    return lora;
}

DenseMatrix svf_apply(const SvdFactors& base, const SvfAdapter& svf) {
    if (svf.z.size() != base.rank()) {
        throw ContractViolation("svf_apply: z has length " + std::to_string(svf.z.size()) + ", layer rank is " +
                                std::to_string(base.rank()));
    }
    DenseMatrix us = base.u;
    for (std::size_t i = 0; i < us.rows(); ++i)
        for (std::size_t j = 0; j < base.rank(); ++j) us(i, j) *= svf.z[j] * base.sigma[j];
    return matmul(us, base.vt);
}

DenseMatrix lora_delta(const LoraAdapter& lora) {
    if (lora.b.cols() != lora.a.rows()) throw ContractViolation("lora_delta: B and A ranks differ");
    return matmul(lora.b, lora.a) * lora.scale();
}

DenseMatrix AdaptedLayer::materialize() const {
    DenseMatrix w = svf_apply(base, svf);
    if (lora.rank() > 0) w += lora_delta(lora);
    return w;
}

RealVector adapted_forward(const AdaptedLayer& layer, std::span<const double> x) {
    if (x.size() != layer.d_in()) {
        throw ContractViolation("adapted_forward: input length " + std::to_string(x.size()) + ", expected " +
                                std::to_string(layer.d_in()));
    }
    RealVector coeff = matvec(layer.base.vt, x);
    for (std::size_t i = 0; i < coeff.size(); ++i) coeff[i] *= layer.svf.z[i] * layer.base.sigma[i];
    RealVector y = matvec(layer.base.u, coeff);
    if (layer.lora.rank() > 0) {
        RealVector ax = matvec(layer.lora.a, x);
        const double s = layer.lora.scale();
        for (double& v : ax) v *= s;
        RealVector bax = matvec(layer.lora.b, ax);
        for (std::size_t i = 0; i < y.size(); ++i) y[i] += bax[i];
    }
    return y;
}

std::size_t param_count_svf(const std::vector<LayerDims>& dims) {
    std::size_t total = 0;
    for (auto [d_out, d_in] : dims) total += std::min(d_out, d_in);
    return total;
}

std::size_t param_count_lora(const std::vector<LayerDims>& dims, int r) {
    if (r <= 0) throw ContractViolation("param_count_lora: rank must be positive");
    std::size_t total = 0;
    for (auto [d_out, d_in] : dims) total += static_cast<std::size_t>(r) * (d_out + d_in);
    return total;
}

}  // namespace svlab
