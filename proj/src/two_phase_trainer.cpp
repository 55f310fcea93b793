#include "svlab/two_phase_trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

#include "svlab/errors.hpp"

namespace svlab {

std::vector<LayerDims> ModelConfig::layer_dims() const {
    std::vector<std::size_t> sizes{in_dim};
    sizes.insert(sizes.end(), hidden.begin(), hidden.end());
    sizes.push_back(out_dim);
    std::vector<LayerDims> dims;
    for (std::size_t l = 0; l + 1 < sizes.size(); ++l) dims.emplace_back(sizes[l + 1], sizes[l]);
    return dims;
}

std::vector<LayerDims> ToyModel::layer_dims() const {
    std::vector<LayerDims> dims;
    for (const auto& layer : layers) dims.emplace_back(layer.d_out(), layer.d_in());
    return dims;
}

namespace {

// Orthonormal columns spanning the complement of `basis` in R^n (n - basis.cols() of them).
DenseMatrix complement_basis(const DenseMatrix& basis, Rng& rng) {
    const std::size_t n = basis.rows();
    DenseMatrix g = DenseMatrix::gaussian(n, n - basis.cols(), rng);
    g -= matmul(basis, matmul_tn(basis, g));
    DenseMatrix q = orthonormalize_columns(g);
    if (q.cols() != n - basis.cols()) throw NumericalFailure("complement basis lost rank");
    return q;
}

DenseMatrix hstack(const DenseMatrix& a, const DenseMatrix& b) {
    DenseMatrix out(a.rows(), a.cols() + b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < a.cols(); ++j) out(i, j) = a(i, j);
        for (std::size_t j = 0; j < b.cols(); ++j) out(i, a.cols() + j) = b(i, j);
    }
    return out;
}

void require_finite(double v, const std::string& where) {
    if (!std::isfinite(v)) throw NumericalFailure(where + ": loss is not finite");
}

}  // namespace

ToyModel build_toy_model(const ModelConfig& cfg, std::uint64_t root_seed) {
    const auto dims = cfg.layer_dims();
    if (dims.size() < 2 || dims.size() > 4) throw ContractViolation("toy model needs 2 to 4 layers");
    if (cfg.layer_alignment < 0.0 || cfg.layer_alignment > 1.0) {
        throw ContractViolation("layer_alignment must lie in [0, 1]");
    }
    Rng rng(root_seed, streams::base_model);
    ToyModel model;
    DenseMatrix prev_u;
    for (std::size_t l = 0; l < dims.size(); ++l) {
        const auto [d_out, d_in] = dims[l];
        if (d_out == 0 || d_in == 0) throw ContractViolation("layer dimensions must be positive");
        const std::size_t r = std::min(d_out, d_in);
        DenseMatrix u = haar_orthonormal(d_out, r, rng);
        DenseMatrix v = haar_orthonormal(d_in, r, rng);
        if (cfg.neuron_aligned && l + 1 < dims.size()) {
            std::vector<std::size_t> units(d_out);
            std::iota(units.begin(), units.end(), std::size_t{0});
            for (std::size_t i = 0; i < r; ++i) std::swap(units[i], units[i + rng.below(d_out - i)]);
            u = DenseMatrix(d_out, r);
            for (std::size_t i = 0; i < r; ++i) u(units[i], i) = 1.0;
        }
        if (l > 0 && cfg.layer_alignment > 0.0) {
            // Previous layer's output directions in shuffled order, topped up
            // from their complement when this layer reads more of them.
            std::vector<std::size_t> perm(prev_u.cols());
            std::iota(perm.begin(), perm.end(), std::size_t{0});
            for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
            DenseMatrix shuffled(d_in, prev_u.cols());
            for (std::size_t j = 0; j < perm.size(); ++j) shuffled.set_column(j, prev_u.column(perm[j]));
            if (shuffled.cols() < d_in) shuffled = hstack(shuffled, complement_basis(shuffled, rng));
            DenseMatrix aligned(d_in, r);
            for (std::size_t j = 0; j < r; ++j) aligned.set_column(j, shuffled.column(j));
            if (cfg.layer_alignment >= 1.0) {
                v = aligned;
            } else {
                v = orthonormalize_columns(std::sqrt(cfg.layer_alignment) * aligned +
                                           std::sqrt(1.0 - cfg.layer_alignment) * v);
                if (v.cols() != r) throw NumericalFailure("aligned right basis lost rank");
            }
        }
        RealVector sigma(r);
        double mass = 0.0;
        for (std::size_t i = 0; i < r; ++i) {
            sigma[i] = std::pow(static_cast<double>(i + 1), -cfg.sigma_decay);
            mass += sigma[i] * sigma[i];
        }
        const double gain = l == 0 ? cfg.input_gain : cfg.hidden_gain;
        const double c = gain * std::sqrt(static_cast<double>(d_out) / mass);
        for (double& v : sigma) v *= c;
        SvdFactors drawn{u, sigma, v.transpose()};
        AdaptedLayer layer;
        // Re-factor so stored vectors follow the library sign convention.
        layer.base = svd(drawn.reconstruct());
        layer.svf = SvfAdapter::identity(r);
        model.layers.push_back(std::move(layer));
        prev_u = model.layers.back().base.u;
    }
    return model;
}

RealVector SkillTask::target(std::span<const double> x) const {
    return matvec(target_map, matvec_t(v_task, x));
}

Samples SkillTask::draw(std::size_t n, Rng& rng) const {
    const std::size_t in = v_task.rows();
    const std::size_t s = v_task.cols();
    Samples out{DenseMatrix(n, in), DenseMatrix(n, target_map.rows())};
    const double cscale = 1.0 / std::sqrt(static_cast<double>(s));
    const double nscale = noise_scale / std::sqrt(static_cast<double>(in));
    for (std::size_t t = 0; t < n; ++t) {
        RealVector c(s);
        for (double& v : c) v = cscale * rng.normal();
        RealVector x = matvec(v_task, c);
        if (noise_scale > 0.0)
            for (double& v : x) v += nscale * rng.normal();
        RealVector y = target(x);
        std::copy(x.begin(), x.end(), out.x.row(t).begin());
        std::copy(y.begin(), y.end(), out.y.row(t).begin());
    }
    return out;
}

std::vector<std::size_t> trace_pathway(const ToyModel& model, std::size_t out_index) {
    const std::size_t L = model.layers.size();
    if (out_index >= model.layers.back().base.rank()) throw ContractViolation("trace_pathway: index out of range");
    std::vector<std::size_t> chain(L);
    chain[L - 1] = out_index;
    for (std::size_t l = L - 1; l > 0; --l) {
        const SvdFactors& cur = model.layers[l].base;
        const SvdFactors& prev = model.layers[l - 1].base;
        const auto v = cur.vt.row(chain[l]);
        std::size_t best = 0;
        double best_dot = 0.0;
        for (std::size_t i = 0; i < prev.rank(); ++i) {
            double d = 0.0;
            for (std::size_t r = 0; r < v.size(); ++r) d += v[r] * prev.u(r, i);
            if (std::abs(d) > best_dot) {
                best_dot = std::abs(d);
                best = i;
            }
        }
        if (best_dot < 1.0 - 1e-8) return {};
        chain[l - 1] = best;
    }
    return chain;
}

SkillTask make_skill_task(const ToyModel& model, const SkillConfig& cfg, std::uint64_t root_seed) {
    const SvdFactors& first = model.layers.front().base;
    const SvdFactors& last = model.layers.back().base;
    const std::size_t n = first.in_dim();
    const std::size_t k = cfg.misalign_k;
    if (cfg.s == 0 || k > first.rank() || (k > 0 && cfg.s > k) || cfg.s + k > n) {
        throw ContractViolation("skill task: need 1 <= s, s <= misalign_k (when set) and s + misalign_k <= in_dim");
    }
    if (cfg.delta < 0.0 || cfg.delta > 1.0) throw ContractViolation("skill task: delta outside [0, 1]");
    Rng rng(root_seed, streams::skill_task);
    SkillTask task;
    DenseMatrix vk(n, std::max<std::size_t>(k, 1));
    for (std::size_t i = 0; i < k; ++i) vk.set_column(i, first.right(i));

    DenseMatrix c;
    DenseMatrix answer;  // out_dim x s, pathway mode only
    RealVector chain_gain;  // signed product of sigmas along each chain
    if (cfg.pathway) {
        c = DenseMatrix(n, cfg.s);
        answer = DenseMatrix(last.out_dim(), cfg.s);
        std::size_t found = 0;
        for (std::size_t j = last.rank(); j-- > 0 && found < cfg.s;) {
            const auto chain = trace_pathway(model, j);
            if (chain.empty() || chain.front() < k) continue;
            c.set_column(found, first.right(chain.front()));
            answer.set_column(found, last.left(j));
            double g = first.sigma[chain.front()];
            for (std::size_t l = 1; l < chain.size(); ++l) {
                const SvdFactors& cur = model.layers[l].base;
                const SvdFactors& prev = model.layers[l - 1].base;
                g *= cur.sigma[chain[l]] * (dot(cur.right(chain[l]), prev.left(chain[l - 1])) < 0.0 ? -1.0 : 1.0);
            }
            chain_gain.push_back(g);
            ++found;
        }
        if (found < cfg.s) {
            throw ContractViolation("skill task: only " + std::to_string(found) +
                                    " pathways avoid the top input directions (layer_alignment must be 1)");
        }
    } else if (k == 0) {
        c = haar_orthonormal(n, cfg.s, rng);
    } else {
        c = DenseMatrix::gaussian(n, cfg.s, rng);
        c -= matmul(vk, matmul_tn(vk, c));
        c = orthonormalize_columns(c);
        if (c.cols() != cfg.s) throw NumericalFailure("skill task basis lost rank");
    }
    if (k > 0) {
        const DenseMatrix leak = matmul(vk, haar_orthonormal(k, cfg.s, rng));
        task.v_task = std::sqrt(1.0 - cfg.delta) * c + std::sqrt(cfg.delta) * leak;
    } else {
        task.v_task = c;
    }
    if (cfg.pathway) {
        if (cfg.pathway_gain > 0.0) {
            RealVector d(cfg.s);
            for (std::size_t t = 0; t < cfg.s; ++t) d[t] = cfg.pathway_gain * chain_gain[t];
            task.target_map = matmul(answer, DenseMatrix::diagonal(d));
        } else {
            task.target_map = matmul(answer, DenseMatrix::gaussian(cfg.s, cfg.s, rng, cfg.target_scale));
        }
        if (cfg.answer_readout) task.readout = answer;
    } else {
        task.target_map = DenseMatrix::gaussian(model.out_dim(), cfg.s, rng, cfg.target_scale);
        if (cfg.answer_readout) task.readout = orthonormalize_columns(task.target_map);
    }
    task.sample_count = cfg.sample_count;
    task.noise_scale = cfg.noise_scale;
    return task;
}

namespace {

DenseMatrix distinct_unit_keys(std::size_t count, std::size_t in_dim, Rng& rng, const DenseMatrix* avoid = nullptr) {
    DenseMatrix keys(count, in_dim);
    auto far_from = [&](const RealVector& key, const DenseMatrix& others, std::size_t rows) {
        for (std::size_t p = 0; p < rows; ++p) {
            double d2 = 0.0;
            for (std::size_t i = 0; i < in_dim; ++i) d2 += (key[i] - others(p, i)) * (key[i] - others(p, i));
            if (std::sqrt(d2) <= 0.1) return false;
        }
        return true;
    };
    for (std::size_t t = 0; t < count; ++t) {
        for (;;) {
            RealVector key(in_dim);
            for (double& v : key) v = rng.normal();
            const double nrm = norm2(key);
            for (double& v : key) v /= nrm;
            if (!far_from(key, keys, t)) continue;
            if (avoid && !far_from(key, *avoid, avoid->rows())) continue;
            std::copy(key.begin(), key.end(), keys.row(t).begin());
            break;
        }
    }
    return keys;
}

}  // namespace

FactSet make_fact_set(std::size_t count, std::size_t in_dim, std::size_t out_dim, double value_scale,
                      std::uint64_t root_seed) {
    if (count == 0) throw ContractViolation("fact set must be nonempty");
    Rng rng(root_seed, streams::facts);
    FactSet facts{distinct_unit_keys(count, in_dim, rng), DenseMatrix(count, out_dim)};
    for (double& v : facts.values.data()) v = value_scale * rng.normal();
    return facts;
}

FactSet make_offset_fact_set(const ToyModel& model, std::size_t count, double offset, std::uint64_t root_seed) {
    if (!(offset >= 0.0) || !std::isfinite(offset)) throw ContractViolation("fact offset must be finite and >= 0");
    FactSet facts = make_fact_set(count, model.in_dim(), model.out_dim(), 1.0, root_seed);
    const DenseMatrix own = model_forward(model, facts.keys);
    for (std::size_t t = 0; t < count; ++t) {
        const double own_norm = norm2(own.row(t));
        const double dir_norm = norm2(facts.values.row(t));
        for (std::size_t j = 0; j < own.cols(); ++j) {
            facts.values(t, j) = own(t, j) + offset * own_norm * facts.values(t, j) / dir_norm;
        }
    }
    return facts;
}

FactSet make_relative_fact_set(const ToyModel& model, std::size_t count, double value_scale, std::uint64_t root_seed) {
    if (!(value_scale >= 0.0) || !std::isfinite(value_scale)) throw ContractViolation("fact value scale must be finite and >= 0");
    FactSet facts = make_fact_set(count, model.in_dim(), model.out_dim(), value_scale, root_seed);
    facts.values += model_forward(model, facts.keys);
    return facts;
}

void append_anchor_facts(FactSet& facts, const ToyModel& model, double ratio, std::uint64_t root_seed) {
    if (!(ratio > 0.0)) throw ContractViolation("anchor ratio must be positive");
    const auto extra = static_cast<std::size_t>(std::ceil(static_cast<double>(facts.new_count()) / ratio));
    if (extra == 0) return;
    Rng rng(root_seed, streams::anchors);
    const DenseMatrix keys = distinct_unit_keys(extra, model.in_dim(), rng, &facts.keys);
    const DenseMatrix values = model_forward(model, keys);
    DenseMatrix all_keys(facts.count() + extra, facts.keys.cols());
    DenseMatrix all_values(facts.count() + extra, facts.values.cols());
    std::copy(facts.keys.data().begin(), facts.keys.data().end(), all_keys.data().begin());
    std::copy(keys.data().begin(), keys.data().end(), all_keys.data().begin() + facts.keys.data().size());
    std::copy(facts.values.data().begin(), facts.values.data().end(), all_values.data().begin());
    std::copy(values.data().begin(), values.data().end(), all_values.data().begin() + facts.values.data().size());
    facts.keys = std::move(all_keys);
    facts.values = std::move(all_values);
    facts.anchor_count += extra;
}

std::string_view mode_name(ProtectionMode m) {
    switch (m) {
        case ProtectionMode::svf_guided: return "svf_guided";
        case ProtectionMode::topk_raw: return "topk_raw";
        case ProtectionMode::random_k: return "random_k";
        case ProtectionMode::orth_complement: return "orth_complement";
        case ProtectionMode::none: return "none";
    }
    return "?";
}

std::optional<ProtectionMode> parse_mode(std::string_view name) {
    for (ProtectionMode m : all_modes)
        if (mode_name(m) == name) return m;
    return std::nullopt;
}

double mse(const DenseMatrix& pred, const DenseMatrix& target) {
    if (pred.rows() != target.rows() || pred.cols() != target.cols()) throw ContractViolation("mse: shape mismatch");
    double total = 0.0;
    for (std::size_t i = 0; i < pred.data().size(); ++i) {
        const double d = pred.data()[i] - target.data()[i];
        total += d * d;
    }
    return total / static_cast<double>(pred.rows());
}

namespace {

std::vector<DenseMatrix> composite_weights(const ToyModel& model) {
    std::vector<DenseMatrix> w;
    w.reserve(model.layers.size());
    for (const auto& layer : model.layers) {
        DenseMatrix m = svf_apply(layer.base, layer.svf);
        if (layer.lora.rank() > 0) m += lora_delta(layer.lora);
        w.push_back(std::move(m));
    }
    return w;
}

DenseMatrix forward_with(const std::vector<DenseMatrix>& weights, const DenseMatrix& x,
                         std::vector<DenseMatrix>* activations) {
    DenseMatrix h = x;
    for (std::size_t l = 0; l < weights.size(); ++l) {
        if (activations) activations->push_back(h);
        DenseMatrix pre = matmul_nt(h, weights[l]);
        if (l + 1 < weights.size())
            for (double& v : pre.data()) v = std::tanh(v);
        h = std::move(pre);
    }
    return h;
}

struct Backprop {
    double loss = 0.0;
    std::vector<DenseMatrix> acts;    // input to each layer, batch x d_in
    std::vector<DenseMatrix> deltas;  // dL/d(pre-activation) per layer, batch x d_out
};

Backprop backprop_with(const std::vector<DenseMatrix>& weights, const Samples& batch, bool want_grads,
                       const DenseMatrix* readout) {
    Backprop bp;
    DenseMatrix out = forward_with(weights, batch.x, want_grads ? &bp.acts : nullptr);
    DenseMatrix delta = out - batch.y;
    if (readout) {
        // error seen through the answer coordinates only
        const DenseMatrix coords = matmul(delta, *readout);
        bp.loss = mse(coords, DenseMatrix(coords.rows(), coords.cols()));
        if (want_grads) delta = matmul_nt(coords, *readout);
    } else {
        bp.loss = mse(out, batch.y);
    }
    if (!want_grads) return bp;
    bp.deltas.assign(weights.size(), DenseMatrix());
    delta *= 2.0 / static_cast<double>(batch.count());
    for (std::size_t l = weights.size(); l-- > 0;) {
        if (l > 0) {
            DenseMatrix back = matmul(delta, weights[l]);
            const DenseMatrix& h = bp.acts[l];  // tanh output feeding layer l
            for (std::size_t i = 0; i < back.data().size(); ++i) back.data()[i] *= 1.0 - h.data()[i] * h.data()[i];
            bp.deltas[l] = std::move(delta);
            delta = std::move(back);
        } else {
            bp.deltas[l] = std::move(delta);
        }
    }
    return bp;
}

double loss_and_grads_with(const std::vector<DenseMatrix>& weights, const Samples& batch,
                           std::vector<DenseMatrix>* grads, const DenseMatrix* readout = nullptr) {
    Backprop bp = backprop_with(weights, batch, grads != nullptr, readout);
    if (grads) {
        grads->assign(weights.size(), DenseMatrix());
        for (std::size_t l = 0; l < weights.size(); ++l) (*grads)[l] = matmul_tn(bp.deltas[l], bp.acts[l]);
    }
    return bp.loss;
}

// Phase-2 pass that keeps each layer as W_svf + s*B*A without forming the sum.
struct FactoredPass {
    double loss = 0.0;
    std::vector<DenseMatrix> acts;    // layer inputs
    std::vector<DenseMatrix> xa;      // acts[l] * A_l^T
    std::vector<DenseMatrix> deltas;  // dL/d(pre-activation)
};

FactoredPass factored_pass(const std::vector<DenseMatrix>& svf_w, const ToyModel& model, const Samples& batch,
                           bool want_grads) {
    const std::size_t L = svf_w.size();
    FactoredPass fp;
    DenseMatrix h = batch.x;
    for (std::size_t l = 0; l < L; ++l) {
        const LoraAdapter& lora = model.layers[l].lora;
        DenseMatrix xa = matmul_nt(h, lora.a);
        DenseMatrix pre = matmul_nt(h, svf_w[l]);
        const DenseMatrix low = matmul_nt(xa, lora.b);
        const double s = lora.scale();
        for (std::size_t i = 0; i < pre.data().size(); ++i) pre.data()[i] += s * low.data()[i];
        if (l + 1 < L)
            for (double& v : pre.data()) v = std::tanh(v);
        if (want_grads) {
            fp.acts.push_back(std::move(h));
            fp.xa.push_back(std::move(xa));
        }
        h = std::move(pre);
    }
    fp.loss = mse(h, batch.y);
    if (!want_grads) return fp;
    DenseMatrix delta = h - batch.y;
    delta *= 2.0 / static_cast<double>(batch.count());
    fp.deltas.assign(L, DenseMatrix());
    for (std::size_t l = L; l-- > 0;) {
        if (l > 0) {
            const LoraAdapter& lora = model.layers[l].lora;
            DenseMatrix back = matmul(delta, svf_w[l]);
            const DenseMatrix low = matmul(matmul(delta, lora.b), lora.a);
            const double s = lora.scale();
            const DenseMatrix& act = fp.acts[l];
            for (std::size_t i = 0; i < back.data().size(); ++i) {
                back.data()[i] = (back.data()[i] + s * low.data()[i]) * (1.0 - act.data()[i] * act.data()[i]);
            }
            fp.deltas[l] = std::move(delta);
            delta = std::move(back);
        } else {
            fp.deltas[l] = std::move(delta);
        }
    }
    return fp;
}

Samples gather(const FactSet& facts, std::span<const std::size_t> idx) {
    Samples s{DenseMatrix(idx.size(), facts.keys.cols()), DenseMatrix(idx.size(), facts.values.cols())};
    for (std::size_t t = 0; t < idx.size(); ++t) {
        std::copy(facts.keys.row(idx[t]).begin(), facts.keys.row(idx[t]).end(), s.x.row(t).begin());
        std::copy(facts.values.row(idx[t]).begin(), facts.values.row(idx[t]).end(), s.y.row(t).begin());
    }
    return s;
}

}  // namespace

DenseMatrix model_forward(const ToyModel& model, const DenseMatrix& x) {
    if (x.cols() != model.in_dim()) throw ContractViolation("model_forward: input width mismatch");
    return forward_with(composite_weights(model), x, nullptr);
}

double loss_and_weight_grads(const ToyModel& model, const Samples& batch, std::vector<DenseMatrix>* grads,
                             const DenseMatrix* readout) {
    if (batch.x.cols() != model.in_dim() || batch.y.cols() != model.out_dim()) {
        throw ContractViolation("loss_and_weight_grads: batch shape mismatch");
    }
    return loss_and_grads_with(composite_weights(model), batch, grads, readout);
}

Phase1Result phase1_train_svf(ToyModel& model, const Samples& train, double lr, int steps, std::size_t k,
                              const DenseMatrix* readout) {
    if (steps < 0) throw ContractViolation("phase 1: negative step count");
    for (const auto& layer : model.layers) {
        if (k < 1 || k > layer.base.rank()) {
            throw ContractViolation("phase 1: k=" + std::to_string(k) + " exceeds layer rank " +
                                    std::to_string(layer.base.rank()));
        }
        if (layer.lora.rank() > 0 && max_abs(layer.lora.b) != 0.0) {
            throw ContractViolation("phase 1 expects zero LoRA deltas");
        }
    }
    Phase1Result res;
    std::vector<DenseMatrix> grads;
    res.initial_loss = loss_and_weight_grads(model, train, nullptr, readout);
    require_finite(res.initial_loss, "phase 1 at step 0");
    for (int t = 0; t < steps; ++t) {
        const double loss = loss_and_weight_grads(model, train, &grads, readout);
        require_finite(loss, "phase 1 at step " + std::to_string(t));
        for (std::size_t l = 0; l < model.layers.size(); ++l) {
            RealVector gz = svf_loss_gradient(grads[l], model.layers[l].base);
            auto& z = model.layers[l].svf.z;
            for (std::size_t i = 0; i < z.size(); ++i) z[i] -= lr * gz[i];
        }
    }
    res.steps = steps;
    res.final_loss = loss_and_weight_grads(model, train, nullptr, readout);
    require_finite(res.final_loss, "phase 1 at step " + std::to_string(steps));
    res.converged = res.final_loss < res.initial_loss;
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        res.crit.push_back(build_critical_subspace(model.layers[l].base, model.layers[l].svf, k, l));
    }
    return res;
}

double ortho_loss(const LoraAdapter& lora, const CriticalSubspace& crit) {
    if (crit.u_crit.rows() != lora.b.rows()) throw ContractViolation("ortho_loss: subspace/adapter dimension mismatch");
    // U^T dW = scale * (U^T B) A
    const DenseMatrix utdw = matmul(matmul_tn(crit.u_crit, lora.b), lora.a) * lora.scale();
    const double f = frobenius_norm(utdw);
    return f * f;
}

LoraGrads ortho_loss_grads(const LoraAdapter& lora, const CriticalSubspace& crit) {
    if (crit.u_crit.rows() != lora.b.rows()) throw ContractViolation("ortho_loss: subspace/adapter dimension mismatch");
    const double s = lora.scale();
    // dB = 2s U U^T dW A^T = 2s^2 U (U^T B)(A A^T),  dA = 2s B^T U U^T dW = 2s^2 (U^T B)^T (U^T B) A.
    // Grouped so nothing d_out x d_in is formed.
    const DenseMatrix utb = matmul_tn(crit.u_crit, lora.b);  // k x r
    LoraGrads g;
    g.b = matmul(crit.u_crit, matmul(utb, matmul_nt(lora.a, lora.a))) * (2.0 * s * s);
    g.a = matmul(matmul_tn(utb, utb), lora.a) * (2.0 * s * s);
    return g;
}

double total_loss(double sft, const std::vector<double>& ortho_per_layer, double lambda_ortho) {
    double sum = 0.0;
    for (double o : ortho_per_layer) sum += o;
    return sft + lambda_ortho * sum;
}

std::vector<CriticalSubspace> protection_subspaces(const ToyModel& model, ProtectionMode mode,
                                                   const std::vector<CriticalSubspace>& svf_crit, std::size_t k,
                                                   std::uint64_t root_seed) {
    std::vector<CriticalSubspace> out;
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        const SvdFactors& base = model.layers[l].base;
        if (k < 1 || k > base.rank()) throw ContractViolation("protection: k exceeds layer rank");
        IndexSet idx;
        switch (mode) {
            case ProtectionMode::svf_guided:
            case ProtectionMode::none:
                if (svf_crit.size() != model.layers.size()) throw ContractViolation("protection: missing SVF subspaces");
                out.push_back(svf_crit[l]);
                continue;
            case ProtectionMode::topk_raw:
            case ProtectionMode::orth_complement:
                idx.resize(k);
                std::iota(idx.begin(), idx.end(), std::size_t{0});
                break;
            case ProtectionMode::random_k: {
                Rng rng(root_seed, streams::random_k + l);
                std::vector<std::size_t> all(base.rank());
                std::iota(all.begin(), all.end(), std::size_t{0});
                // partial Fisher-Yates
                for (std::size_t i = 0; i < k; ++i) std::swap(all[i], all[i + rng.below(all.size() - i)]);
                idx.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k));
                std::sort(idx.begin(), idx.end());
                break;
            }
        }
        out.push_back(subspace_from_indices(base, std::move(idx), l));
    }
    return out;
}

double evaluate_skill(const ToyModel& model, const SkillTask& task, std::size_t n_eval, std::uint64_t root_seed) {
    Rng rng(root_seed, streams::skill_eval);
    Samples s = task.draw(n_eval, rng);
    return loss_and_weight_grads(model, s, nullptr, task.readout.empty() ? nullptr : &task.readout);
}

double evaluate_recall(const ToyModel& model, const FactSet& facts, double tol) {
    if (facts.new_count() == 0) throw ContractViolation("evaluate_recall: no facts to score");
    const DenseMatrix pred = model_forward(model, facts.keys);
    std::size_t hits = 0;
    for (std::size_t t = 0; t < facts.new_count(); ++t) {
        double err = 0.0, ref = 0.0;
        for (std::size_t j = 0; j < pred.cols(); ++j) {
            const double d = pred(t, j) - facts.values(t, j);
            err += d * d;
            ref += facts.values(t, j) * facts.values(t, j);
        }
        if (std::isinf(tol) || std::sqrt(err) <= tol * std::sqrt(ref)) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(facts.new_count());
}

RunMetrics phase2_inject(ToyModel& model, const FactSet& facts, const TrainConfig& cfg,
                         const std::vector<CriticalSubspace>& svf_crit, const SkillProbe& probe, double recall_tol) {
    if (cfg.lora_rank <= 0 || cfg.epochs < 0 || cfg.batch_size == 0 || !(cfg.lr > 0.0) || cfg.lambda_ortho < 0.0) {
        throw ContractViolation("phase 2: invalid training configuration");
    }
    if (facts.keys.cols() != model.in_dim() || facts.values.cols() != model.out_dim()) {
        throw ContractViolation("phase 2: fact dimensions do not match the model");
    }
    const std::size_t L = model.layers.size();
    const ProtectionMode mode = cfg.protection_mode;
    const double lambda = mode == ProtectionMode::none ? 0.0 : cfg.lambda_ortho;
    const auto active = protection_subspaces(model, mode, svf_crit, cfg.k, cfg.seed);

    Rng init_rng(cfg.seed, streams::lora_init);
    for (auto& layer : model.layers) {
        layer.lora = LoraAdapter::initialize(layer.d_out(), layer.d_in(), static_cast<std::size_t>(cfg.lora_rank),
                                             cfg.alpha, init_rng);
    }

    std::vector<SvdFactors> frozen_base;
    std::vector<SvfAdapter> frozen_svf;
    std::vector<DenseMatrix> svf_weights;
    for (const auto& layer : model.layers) {
        frozen_base.push_back(layer.base);
        frozen_svf.push_back(layer.svf);
        svf_weights.push_back(svf_apply(layer.base, layer.svf));
    }

    RunMetrics metrics;
    if (probe.task) metrics.skill_loss_before = evaluate_skill(model, *probe.task, probe.n_eval, probe.root_seed);

    Rng order_rng(cfg.seed, streams::batch_order);
    std::vector<std::size_t> order(facts.count());
    std::iota(order.begin(), order.end(), std::size_t{0});
    const Samples all_facts{facts.keys, facts.values};
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[order_rng.below(i)]);
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
            const Samples batch = gather(facts, std::span(order).subspan(start, stop - start));
            const FactoredPass fp = factored_pass(svf_weights, model, batch, true);
            if (!std::isfinite(fp.loss)) {
                throw NumericalFailure("phase 2 diverged at epoch " + std::to_string(epoch) + ", sample offset " +
                                       std::to_string(start));
            }
            for (std::size_t l = 0; l < L; ++l) {
                LoraAdapter& lora = model.layers[l].lora;
                const double s = lora.scale();
                // dL/dW = delta^T act, contracted with A and B before it is ever formed
                DenseMatrix gb = matmul_tn(fp.deltas[l], fp.xa[l]) * s;
                DenseMatrix ga = matmul_tn(matmul(fp.deltas[l], lora.b), fp.acts[l]) * s;
                if (lambda > 0.0 && mode != ProtectionMode::orth_complement) {
                    LoraGrads og = ortho_loss_grads(lora, active[l]);
                    gb += og.b * lambda;
                    ga += og.a * lambda;
                }
                lora.b -= gb * cfg.lr;
                lora.a -= ga * cfg.lr;
                if (mode == ProtectionMode::orth_complement) {
                    const DenseMatrix& uk = active[l].u_crit;
                    lora.b -= matmul(uk, matmul_tn(uk, lora.b));
                }
            }
        }
        EpochMetrics em;
        em.epoch = epoch;
        em.sft_loss = factored_pass(svf_weights, model, all_facts, false).loss;
        if (!std::isfinite(em.sft_loss)) throw NumericalFailure("phase 2 diverged at epoch " + std::to_string(epoch));
        for (std::size_t l = 0; l < L; ++l) {
            em.ortho_loss.push_back(ortho_loss(model.layers[l].lora, active[l]));
            em.interference += ortho_loss(model.layers[l].lora, svf_crit[l]);
        }
        metrics.epochs.push_back(std::move(em));
    }

    for (std::size_t l = 0; l < L; ++l) {
        if (!(model.layers[l].base == frozen_base[l]) || !(model.layers[l].svf == frozen_svf[l])) {
            throw std::logic_error("phase 2 mutated frozen parameters of layer " + std::to_string(l));
        }
    }
    metrics.fact_recall = evaluate_recall(model, facts, recall_tol);
    if (probe.task) metrics.skill_loss_after = evaluate_skill(model, *probe.task, probe.n_eval, probe.root_seed);
    return metrics;
}

}  // namespace svlab
