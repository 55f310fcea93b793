#include "svlab/theory_lab.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "svlab/errors.hpp"

namespace svlab {

namespace {

constexpr std::uint64_t kBaseStream = 20;
constexpr std::uint64_t kTaskStream = 21;  // + task index
constexpr double kMinRelativeGap = 1e-3;

DenseMatrix outer_sum(const std::vector<RealVector>& g, const std::vector<RealVector>& h, std::size_t m,
                      std::size_t n) {
    DenseMatrix out(m, n);
    for (std::size_t j = 0; j < g.size(); ++j) {
        for (std::size_t r = 0; r < m; ++r) {
            auto row = out.row(r);
            for (std::size_t c = 0; c < n; ++c) row[c] += g[j][r] * h[j][c];
        }
    }
    return out;
}

RealVector ranks(std::span<const double> a) {
    std::vector<std::size_t> order(a.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return a[x] < a[y]; });
    RealVector r(a.size());
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j + 1 < order.size() && a[order[j + 1]] == a[order[i]]) ++j;
        const double avg = 0.5 * static_cast<double>(i + j);
        for (std::size_t t = i; t <= j; ++t) r[order[t]] = avg;
        i = j + 1;
    }
    return r;
}

}  // namespace

DenseMatrix AssumptionInstance::skill_gradient() const { return outer_sum(g, h, m(), n()); }

DenseMatrix AssumptionInstance::total_gradient() const { return skill_gradient() + noise; }

SvdFactors generate_base(std::size_t m, std::size_t n, double decay_alpha, std::uint64_t seed) {
    if (m == 0 || n == 0) throw ContractViolation("generate_base: empty shape");
    if (!std::isfinite(decay_alpha) || decay_alpha < 0.0) throw ContractViolation("generate_base: bad decay exponent");
    const std::size_t r = std::min(m, n);
    Rng rng(seed, kBaseStream);
    SvdFactors f;
    f.u = haar_orthonormal(m, r, rng);
    const DenseMatrix v = haar_orthonormal(n, r, rng);
    f.vt = v.transpose();
    f.sigma.resize(r);
    const double scale = std::sqrt(static_cast<double>(n));
    for (std::size_t i = 0; i < r; ++i) {
        f.sigma[i] = scale * std::pow(static_cast<double>(i + 1), -decay_alpha / 2.0);
        if (i > 0) f.sigma[i] = std::min(f.sigma[i], f.sigma[i - 1] * (1.0 - kMinRelativeGap));
    }
    return f;
}

double achieved_misalignment(const SvdFactors& w0, const DenseMatrix& v_task, std::size_t k) {
    double worst = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        const auto vi = w0.vt.row(i);
        double acc = 0.0;
        for (std::size_t j = 0; j < v_task.cols(); ++j) {
            double p = 0.0;
            for (std::size_t c = 0; c < vi.size(); ++c) p += v_task(c, j) * vi[c];
            acc += p * p;
        }
        worst = std::max(worst, acc);
    }
    return worst;
}

AssumptionInstance generate_task(const SvdFactors& w0, std::size_t s, std::size_t k, double delta, double eps_noise,
                                 std::uint64_t seed, std::size_t task_index) {
    const std::size_t m = w0.out_dim(), n = w0.in_dim();
    if (s == 0) throw ContractViolation("generate_task: s must be positive");
    if (k >= std::min(m, n)) throw ContractViolation("generate_task: need k < min(m, n)");
    if (s > n - k) throw ContractViolation("generate_task: s > n - k, no misaligned subspace of that size exists");
    if (!(delta >= 0.0 && delta <= 1.0)) throw ContractViolation("generate_task: delta outside [0, 1]");
    if (!(eps_noise >= 0.0) || !std::isfinite(eps_noise)) throw ContractViolation("generate_task: bad eps_noise");

    Rng rng(seed, kTaskStream + task_index);
    AssumptionInstance inst;
    inst.w0 = w0;
    inst.k = k;
    inst.delta_target = delta;
    inst.eps_noise = eps_noise;
    inst.seed = seed;

    // Complement part: Gaussian, projected off the top-k right vectors.
    DenseMatrix vk(n, std::max<std::size_t>(k, 1));
    for (std::size_t i = 0; i < k; ++i) vk.set_column(i, w0.right(i));
    DenseMatrix c = DenseMatrix::gaussian(n, s, rng);
    if (k > 0) {
        for (int pass = 0; pass < 2; ++pass) c -= matmul(vk, matmul_tn(vk, c));
    }
    c = orthonormalize_columns(c);
    if (c.cols() != s) throw NumericalFailure("generate_task: complement basis lost rank");
    DenseMatrix vt = c;
    if (k > 0 && delta > 0.0) {
        // Leak sqrt(delta) of the first min(s, k) columns into span(V_k)
        // along orthonormal directions, which keeps the columns orthonormal.
        const std::size_t leak_cols = std::min(s, k);
        const DenseMatrix leak = matmul(vk, haar_orthonormal(k, leak_cols, rng));
        const double a = std::sqrt(1.0 - delta), b = std::sqrt(delta);
        for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t j = 0; j < leak_cols; ++j) vt(r, j) = a * c(r, j) + b * leak(r, j);
        }
    }
    inst.v_task = vt;
    inst.delta = achieved_misalignment(w0, vt, k);

    const DenseMatrix gcoef = DenseMatrix::gaussian(m, s, rng);
    const DenseMatrix hcoef = DenseMatrix::gaussian(s, s, rng);
    inst.g.resize(s);
    inst.h.resize(s);
    for (std::size_t j = 0; j < s; ++j) {
        RealVector hj = matvec(vt, hcoef.column(j));
        const double nrm = norm2(hj);
        if (!(nrm > 0.0)) throw NumericalFailure("generate_task: zero h_j draw");
        for (double& x : hj) x /= nrm;
        // Re-project so h_j sits in span(v_task) to working precision.
        inst.h[j] = matvec(vt, matvec_t(vt, hj));
        inst.g[j] = gcoef.column(j);
    }
    const double gnorm = frobenius_norm(outer_sum(inst.g, inst.h, m, n));
    if (!(gnorm > 0.0)) throw NumericalFailure("generate_task: zero skill gradient");
    for (auto& gj : inst.g) {
        for (double& x : gj) x *= kSkillGradientNorm / gnorm;
    }

    inst.noise = DenseMatrix(m, n);
    if (eps_noise > 0.0) {
        DenseMatrix nz = DenseMatrix::gaussian(m, n, rng);
        nz *= eps_noise / frobenius_norm(nz);
        inst.noise = nz;
    }
    return inst;
}

AssumptionInstance generate_instance(std::size_t m, std::size_t n, std::size_t s, std::size_t k, double delta,
                                     double decay_alpha, double eps_noise, std::uint64_t seed) {
    if (k >= std::min(m, n)) throw ContractViolation("generate_instance: need k < min(m, n)");
    if (s == 0 || s > n - k) throw ContractViolation("generate_instance: need 1 <= s <= n - k");
    AssumptionInstance inst = generate_task(generate_base(m, n, decay_alpha, seed), s, k, delta, eps_noise, seed, 0);
    inst.decay_alpha = decay_alpha;
    return inst;
}

TheoremVerdict verify_theorem(const AssumptionInstance& inst, double eta_z) {
    if (!(eta_z > 0.0)) throw ContractViolation("verify_theorem: eta_z must be positive");
    const DenseMatrix gt = inst.skill_gradient();
    const DenseMatrix grad = gt + inst.noise;
    const GammaSpectrum gs = gamma_spectrum(grad, inst.w0);
    const std::size_t r = inst.w0.rank();
    const std::size_t k = inst.k;

    TheoremVerdict v;
    v.seed = inst.seed;
    const double gt_norm = frobenius_norm(gt);
    const double grad_norm = frobenius_norm(grad);
    v.degenerate = grad_norm == 0.0;

    SvfAdapter svf = SvfAdapter::identity(r);
    for (std::size_t i = 0; i < r; ++i) svf.z[i] = 1.0 - eta_z * inst.w0.sigma[i] * gs.gamma[i];
    const double sigma_max = inst.w0.sigma.front();
    const double eps = std::max(eta_z * sigma_max * std::sqrt(inst.delta_target), eta_z * sigma_max * grad_norm * 1e-10);
    if (v.degenerate) {
        v.s_set.epsilon = eps;
    } else {
        v.s_set = skill_relevant_set(svf, eps);
    }
    v.contained_in_topk =
        std::all_of(v.s_set.indices.begin(), v.s_set.indices.end(), [&](std::size_t i) { return i < k; });

    for (std::size_t i = 0; i < r; ++i) {
        const double a = std::abs(gs.gamma[i]);
        if (i < k) {
            v.gamma_max_topk = std::max(v.gamma_max_topk, a);
        } else if (a > v.gamma_star) {
            v.gamma_star = a;
            v.i_star = i;
        }
    }
    if (k >= r) v.i_star = r;
    v.bound_small = gt_norm * std::sqrt(inst.delta) + frobenius_norm(inst.noise);
    v.small_bound_holds = v.gamma_max_topk <= v.bound_small * (1.0 + 1e-9) + 1e-14 * grad_norm;
    v.empirical_c1 = inst.delta > 0.0 ? v.gamma_max_topk / std::sqrt(inst.delta) : 0.0;
    v.c_t = gt_norm / std::sqrt(static_cast<double>(inst.s()));
    v.bound_large = v.c_t / std::sqrt(static_cast<double>(inst.n() - k));
    v.large_bound_attained = !v.degenerate && v.gamma_star >= v.bound_large;

    v.details.resize(r);
    for (std::size_t i = 0; i < r; ++i) {
        v.details[i] = {i, inst.w0.sigma[i], gs.gamma[i], svf.z[i] - 1.0,
                        std::binary_search(v.s_set.indices.begin(), v.s_set.indices.end(), i)};
    }
    return v;
}

PerturbationReport perturbation_check(const AssumptionInstance& inst, double eta) {
    if (!(eta >= 0.0) || !std::isfinite(eta)) throw ContractViolation("perturbation_check: eta must be >= 0");
    const DenseMatrix w0 = inst.w0.reconstruct();
    const DenseMatrix grad = inst.total_gradient();
    const RealVector s0 = svd(w0).sigma;
    const RealVector s1 = svd(w0 - eta * grad).sigma;
    const GammaSpectrum gs = gamma_spectrum(grad, inst.w0);

    PerturbationReport rep;
    rep.eta = eta;
    rep.rows.resize(s0.size());
    for (std::size_t i = 0; i < s0.size(); ++i) {
        PerturbationRow& row = rep.rows[i];
        row.index = i;
        row.sigma = s0[i];
        row.delta_sigma = s1[i] - s0[i];
        row.relative_change = std::abs(row.delta_sigma) / s0[i];
        row.predicted = eta * std::abs(gs.gamma[i]) / s0[i];
        row.predicted_literal = eta * std::abs(gs.gamma[i]);
        row.residual = std::abs(row.relative_change - row.predicted);
        row.residual_literal = std::abs(row.relative_change - row.predicted_literal);
        rep.max_residual = std::max(rep.max_residual, row.residual);
        rep.max_residual_literal = std::max(rep.max_residual_literal, row.residual_literal);
    }
    return rep;
}

PerturbationDecay perturbation_decay(const AssumptionInstance& inst, double eta) {
    PerturbationDecay d;
    d.full = perturbation_check(inst, eta);
    d.half = perturbation_check(inst, eta / 2.0);
    d.ratio = d.half.max_residual > 0.0 ? d.full.max_residual / d.half.max_residual : 0.0;
    return d;
}

ProtectionCost topk_protection_cost(const AssumptionInstance& inst) {
    const GammaSpectrum gs = gamma_spectrum(inst.total_gradient(), inst.w0);
    ProtectionCost c;
    for (std::size_t i = inst.k; i < gs.gamma.size(); ++i) {
        const double t = inst.w0.sigma[i] * gs.gamma[i];
        c.forfeited += t * t;
    }
    const double ct = frobenius_norm(inst.skill_gradient()) / std::sqrt(static_cast<double>(inst.s()));
    c.floor = ct * ct / static_cast<double>(inst.n() - inst.k);
    c.above_floor = c.forfeited >= c.floor;
    return c;
}

UnionReport multiskill_union(std::span<const AssumptionInstance> instances, double eta_z) {
    UnionReport rep;
    if (instances.empty()) return rep;
    const SvdFactors& w0 = instances.front().w0;
    rep.k = instances.front().k;
    rep.coverage.assign(w0.rank(), 0);
    for (const auto& inst : instances) {
        if (!(inst.w0 == w0)) throw ContractViolation("multiskill_union: instances do not share w0");
        if (inst.k != rep.k) throw ContractViolation("multiskill_union: instances disagree on k");
        const TheoremVerdict v = verify_theorem(inst, eta_z);
        for (std::size_t i : v.s_set.indices) ++rep.coverage[i];
    }
    for (std::size_t i = 0; i < rep.coverage.size(); ++i) {
        if (rep.coverage[i] > 0) rep.union_set.push_back(i);
    }
    rep.smallest_prefix = rep.union_set.empty() ? 0 : rep.union_set.back() + 1;
    rep.contained_in_topk = rep.smallest_prefix <= rep.k;
    return rep;
}

double spearman_rank_correlation(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size() || a.size() < 2) throw ContractViolation("spearman: need two equal-length samples, n >= 2");
    const RealVector ra = ranks(a), rb = ranks(b);
    const double mean = 0.5 * static_cast<double>(a.size() - 1);
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double x = ra[i] - mean, y = rb[i] - mean;
        sab += x * y;
        saa += x * x;
        sbb += y * y;
    }
    if (saa == 0.0 || sbb == 0.0) return 0.0;
    return sab / std::sqrt(saa * sbb);
}

FaithfulnessReport svf_probe_faithfulness(const AssumptionInstance& inst, double eta_z, int steps, double lr) {
    if (steps < 0 || !(lr > 0.0)) throw ContractViolation("svf_probe_faithfulness: need steps >= 0, lr > 0");
    const GammaSpectrum gs = gamma_spectrum(inst.total_gradient(), inst.w0);
    const RealVector& sigma = inst.w0.sigma;
    const std::size_t r = sigma.size();

    FaithfulnessReport rep;
    rep.steps = steps;
    rep.lr = lr;
    for (std::size_t i = 0; i < r; ++i) {
        const double target = sigma[i] * std::abs(gs.gamma[i]);
        if (target == 0.0) continue;
        const double dev = std::abs(eta_z * sigma[i] * gs.gamma[i]);
        rep.one_step_max_error = std::max(rep.one_step_max_error, std::abs(dev / target - eta_z));
    }

    rep.mu = 1.0 / (sigma.front() * sigma.front());
    RealVector z(r, 1.0);
    for (int t = 0; t < steps; ++t) {
        for (std::size_t i = 0; i < r; ++i) {
            const double g = sigma[i] * gs.gamma[i] + rep.mu * sigma[i] * sigma[i] * (z[i] - 1.0);
            z[i] -= lr * g;
        }
    }
    rep.z_deviation.resize(r);
    RealVector score(r);
    for (std::size_t i = 0; i < r; ++i) {
        rep.z_deviation[i] = std::abs(z[i] - 1.0);
        score[i] = sigma[i] * std::abs(gs.gamma[i]);
    }
    rep.spearman = r >= 2 ? spearman_rank_correlation(rep.z_deviation, score) : 1.0;
    return rep;
}

TheorySeedRow run_theory_seed(const TheoryConfig& cfg, std::uint64_t seed) {
    const SvdFactors base = generate_base(cfg.m, cfg.n, cfg.decay_alpha, seed);
    std::vector<AssumptionInstance> skills;
    skills.reserve(std::max<std::size_t>(cfg.skills, 1));
    for (std::size_t t = 0; t < std::max<std::size_t>(cfg.skills, 1); ++t) {
        skills.push_back(generate_task(base, cfg.s, cfg.k, cfg.delta, cfg.eps_noise, seed, t));
        skills.back().decay_alpha = cfg.decay_alpha;
    }
    const AssumptionInstance& inst = skills.front();

    TheorySeedRow row;
    row.seed = seed;
    row.verdict = verify_theorem(inst, cfg.eta_z);
    const PerturbationDecay pd = perturbation_decay(inst, cfg.eta);
    row.perturb_residual = pd.full.max_residual;
    row.perturb_bound = 10.0 * cfg.eta * cfg.eta;
    row.perturb_ratio = pd.ratio;
    row.perturb_residual_literal = pd.full.max_residual_literal;
    row.cost = topk_protection_cost(inst);
    row.union_report = multiskill_union(std::span<const AssumptionInstance>(skills.data(), cfg.skills), cfg.eta_z);
    row.spearman = svf_probe_faithfulness(inst, cfg.eta_z, cfg.faith_steps, cfg.faith_lr).spearman;
    return row;
}

}  // namespace svlab
