#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "svlab/dense_linalg.hpp"
#include "svlab/spectral_probe.hpp"

namespace svlab {

// Frobenius norm every generated skill gradient G_T is rescaled to.
inline constexpr double kSkillGradientNorm = 4.0;

// Synthetic pre-trained matrix plus one skill living in a low-dim input
// subspace that (almost) avoids the top-k right singular vectors.
struct AssumptionInstance {
    SvdFactors w0;
    DenseMatrix v_task;       // n x s, orthonormal
    std::vector<RealVector> g;  // s vectors of length m
    std::vector<RealVector> h;  // s vectors of length n, each inside span(v_task)
    DenseMatrix noise;        // m x n
    std::size_t k = 0;
    double delta = 0.0;         // achieved max_{i<k} ||P_T v_i||^2
    double delta_target = 0.0;  // requested misalignment
    double decay_alpha = 0.0;
    double eps_noise = 0.0;
    std::uint64_t seed = 0;

    std::size_t m() const noexcept { return w0.out_dim(); }
    std::size_t n() const noexcept { return w0.in_dim(); }
    std::size_t s() const noexcept { return v_task.cols(); }

    DenseMatrix skill_gradient() const;  // G_T = sum_j g_j h_j^T
    DenseMatrix total_gradient() const;  // G_T + N
};

// sigma_i = sqrt(n) * i^(-alpha/2) (1-based), with consecutive values kept at
// least a relative 1e-3 apart; Haar U and V.
SvdFactors generate_base(std::size_t m, std::size_t n, double decay_alpha, std::uint64_t seed);

// A skill on an existing base. `task_index` selects an independent stream so
// several skills can share one base.
AssumptionInstance generate_task(const SvdFactors& w0, std::size_t s, std::size_t k, double delta, double eps_noise,
                                 std::uint64_t seed, std::size_t task_index = 0);

AssumptionInstance generate_instance(std::size_t m, std::size_t n, std::size_t s, std::size_t k, double delta,
                                     double decay_alpha, double eps_noise, std::uint64_t seed);

// max_{i<k} ||v_task^T v_i||^2 recomputed from the factors.
double achieved_misalignment(const SvdFactors& w0, const DenseMatrix& v_task, std::size_t k);

struct IndexDetail {
    std::size_t index = 0;
    double sigma = 0.0;
    double gamma = 0.0;
    double z_deviation = 0.0;  // z*_i - 1 after one analytic step
    bool selected = false;
};

struct TheoremVerdict {
    std::uint64_t seed = 0;
    double gamma_max_topk = 0.0;
    double gamma_star = 0.0;     // largest |gamma_i| over i >= k
    std::size_t i_star = 0;
    double bound_small = 0.0;    // ||G_T||_F sqrt(delta) + ||N||_F, a hard ceiling for |gamma_i|, i < k
    double empirical_c1 = 0.0;   // gamma_max_topk / sqrt(delta), 0 when delta = 0
    double c_t = 0.0;            // ||G_T||_F / sqrt(s)
    double bound_large = 0.0;    // c_T / sqrt(n - k)
    bool small_bound_holds = false;
    bool large_bound_attained = false;
    bool degenerate = false;     // G_T + N == 0
    SkillRelevantSet s_set;
    bool contained_in_topk = false;
    std::vector<IndexDetail> details;
};

// epsilon = eta_z sigma_max sqrt(delta_target), floored at
// eta_z sigma_max ||G+N||_F 1e-10 so roundoff-level gammas never count.
TheoremVerdict verify_theorem(const AssumptionInstance& inst, double eta_z);

struct PerturbationRow {
    std::size_t index = 0;
    double sigma = 0.0;
    double delta_sigma = 0.0;        // sigma_i(W1) - sigma_i(W0), both from fresh SVDs
    double relative_change = 0.0;    // |delta_sigma| / sigma
    double predicted = 0.0;          // eta |gamma_i| / sigma_i
    double predicted_literal = 0.0;  // eta |gamma_i|
    double residual = 0.0;           // |relative_change - predicted|
    double residual_literal = 0.0;
};

struct PerturbationReport {
    double eta = 0.0;
    std::vector<PerturbationRow> rows;
    double max_residual = 0.0;
    double max_residual_literal = 0.0;
};

PerturbationReport perturbation_check(const AssumptionInstance& inst, double eta);

struct PerturbationDecay {
    PerturbationReport full;
    PerturbationReport half;
    double ratio = 0.0;  // residual(eta) / residual(eta/2); ~4 for a second-order residual
};

PerturbationDecay perturbation_decay(const AssumptionInstance& inst, double eta);

struct ProtectionCost {
    double forfeited = 0.0;  // sum_{i>=k} (sigma_i gamma_i)^2
    double floor = 0.0;      // c_T^2 / (n - k)
    bool above_floor = false;
};

ProtectionCost topk_protection_cost(const AssumptionInstance& inst);

struct UnionReport {
    IndexSet union_set;
    std::vector<std::size_t> coverage;  // per index: number of skills that select it
    std::size_t smallest_prefix = 0;    // shortest prefix {0..p-1} holding the union
    std::size_t k = 0;
    bool contained_in_topk = true;
};

// All instances must share w0 bitwise.
UnionReport multiskill_union(std::span<const AssumptionInstance> instances, double eta_z);

struct FaithfulnessReport {
    double one_step_max_error = 0.0;  // max |(|z_i - 1| / (sigma_i |gamma_i|)) - eta_z| over gamma_i != 0
    RealVector z_deviation;           // |z_i - 1| after descent
    double spearman = 0.0;
    int steps = 0;
    double lr = 0.0;
    double mu = 0.0;
};

// Gradient descent on z for the quadratic surrogate
//   L(z) = <G, W_z - W0> + (mu/2) ||W_z - W0||_F^2,  mu = 1/sigma_max^2,
// then Spearman correlation of |z_i - 1| against sigma_i |gamma_i|.
FaithfulnessReport svf_probe_faithfulness(const AssumptionInstance& inst, double eta_z, int steps = 200,
                                          double lr = 1e-2);

// Average ranks for ties.
double spearman_rank_correlation(std::span<const double> a, std::span<const double> b);

struct TheoryConfig {
    std::size_t m = 64;
    std::size_t n = 64;
    std::size_t s = 2;
    std::size_t k = 8;
    double delta = 1e-4;
    double decay_alpha = 1.0;
    double eps_noise = 0.0;
    double eta_z = 1e-2;
    double eta = 1e-3;
    int faith_steps = 200;
    double faith_lr = 1e-2;
    std::size_t skills = 5;
};

struct TheorySeedRow {
    std::uint64_t seed = 0;
    TheoremVerdict verdict;
    double perturb_residual = 0.0;
    double perturb_bound = 0.0;  // 10 eta^2
    double perturb_ratio = 0.0;
    double perturb_residual_literal = 0.0;
    ProtectionCost cost;
    UnionReport union_report;
    double spearman = 0.0;
};

TheorySeedRow run_theory_seed(const TheoryConfig& cfg, std::uint64_t seed);

}  // namespace svlab
