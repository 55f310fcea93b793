// One line per criterion; exit status is the number of failures.
// Pass criterion numbers as arguments to run a subset.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>

#include "svlab/lab_harness.hpp"
#include "svlab/spectral_adapters.hpp"
#include "svlab/spectral_probe.hpp"
#include "svlab/theory_lab.hpp"
#include "svlab/two_phase_trainer.hpp"

using namespace svlab;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

Outcome svd_core() {
    Rng rng(2024);
    double worst_rt = 0.0, worst_orth = 0.0;
    for (int t = 0; t < 200; ++t) {
        const std::size_t m = 1 + rng.below(64), n = 1 + rng.below(64);
        const DenseMatrix w = DenseMatrix::gaussian(m, n, rng);
        const SvdFactors f = svd(w);
        worst_rt = std::max(worst_rt, frobenius_norm(f.reconstruct() - w) / frobenius_norm(w));
        worst_orth = std::max({worst_orth, orthonormality_error(f.u), orthonormality_error(f.vt.transpose())});
    }
    return {worst_rt <= 1e-10 && worst_orth <= 1e-10,
            fmt("max roundtrip %.3g, max orthonormality %.3g", worst_rt, worst_orth)};
}

// gradient check error: max |analytic - fd| over the largest |fd| of the configuration
double rel_err(const std::vector<double>& g, const std::vector<double>& fd) {
    double diff = 0.0, scale = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) {
        diff = std::max(diff, std::abs(g[i] - fd[i]));
        scale = std::max(scale, std::abs(fd[i]));
    }
    return scale > 0.0 ? diff / scale : diff;
}

Outcome svf_gradient() {
    Rng rng(77);
    const double h = 1e-5;
    double worst = 0.0;
    for (int t = 0; t < 50; ++t) {
        const std::size_t m = 2 + rng.below(15), n = 2 + rng.below(15);
        const SvdFactors f = svd(DenseMatrix::gaussian(m, n, rng));
        const DenseMatrix target = DenseMatrix::gaussian(m, n, rng);
        SvfAdapter z{RealVector(f.rank())};
        for (double& v : z.z) v = 1.0 + 0.5 * rng.normal();
        auto loss = [&](const SvfAdapter& s) {
            const DenseMatrix d = svf_apply(f, s) - target;
            return 0.5 * frobenius_inner(d, d);
        };
        const RealVector g = svf_loss_gradient(svf_apply(f, z) - target, f);
        std::vector<double> fd(f.rank());
        for (std::size_t i = 0; i < f.rank(); ++i) {
            SvfAdapter p = z, q = z;
            p.z[i] += h;
            q.z[i] -= h;
            fd[i] = (loss(p) - loss(q)) / (2 * h);
        }
        worst = std::max(worst, rel_err({g.begin(), g.end()}, fd));
    }
    return {worst <= 1e-6, fmt("max relative error %.3g over 50 configs", worst)};
}

Outcome ortho_gradient() {
    Rng rng(78);
    const double h = 1e-5;
    double worst = 0.0;
    for (int t = 0; t < 50; ++t) {
        const std::size_t m = 3 + rng.below(14), n = 3 + rng.below(14);
        const std::size_t rmax = std::min(m, n);
        const int r = static_cast<int>(1 + rng.below(std::min<std::size_t>(rmax, 6)));
        const SvdFactors f = svd(DenseMatrix::gaussian(m, n, rng));
        const std::size_t k = 1 + rng.below(f.rank());
        IndexSet idx;
        for (std::size_t i = 0; i < k; ++i) idx.push_back(i);
        const CriticalSubspace crit = subspace_from_indices(f, idx);
        LoraAdapter lora = LoraAdapter::initialize(m, n, r, 1.0 + 31.0 * rng.uniform(), rng);
        lora.b = DenseMatrix::gaussian(m, r, rng, 0.05);
        lora.a = DenseMatrix::gaussian(r, n, rng, 0.5);
        const LoraGrads g = ortho_loss_grads(lora, crit);
        std::vector<double> ga, fa;
        for (DenseMatrix* p : {&lora.b, &lora.a}) {
            const DenseMatrix& an = p == &lora.b ? g.b : g.a;
            for (std::size_t i = 0; i < p->rows(); ++i)
                for (std::size_t j = 0; j < p->cols(); ++j) {
                    const double keep = (*p)(i, j);
                    (*p)(i, j) = keep + h;
                    const double lp = ortho_loss(lora, crit);
                    (*p)(i, j) = keep - h;
                    const double lm = ortho_loss(lora, crit);
                    (*p)(i, j) = keep;
                    ga.push_back(an(i, j));
                    fa.push_back((lp - lm) / (2 * h));
                }
        }
        worst = std::max(worst, rel_err(ga, fa));
    }
    return {worst <= 1e-6, fmt("max relative error %.3g over 50 configs", worst)};
}

Outcome theorem() {
    int holds = 0, disjoint = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        const AssumptionInstance a = generate_instance(64, 64, 2, 8, 1e-4, 1.0, 0.0, seed);
        if (!verify_theorem(a, 1e-2).contained_in_topk) ++holds;
        const AssumptionInstance b = generate_instance(64, 64, 2, 8, 0.0, 1.0, 0.0, seed);
        const TheoremVerdict v = verify_theorem(b, 1e-2);
        if (std::none_of(v.s_set.indices.begin(), v.s_set.indices.end(), [](std::size_t i) { return i < 8; }))
            ++disjoint;
    }
    return {holds >= 95 && disjoint == 100,
            fmt("S_T outside top-k in %d/100 seeds; disjoint at delta=0 in %d/100", holds, disjoint)};
}

Outcome perturbation() {
    const double eta = 1e-3;
    double worst = 0.0, rmin = 1e300, rmax = 0.0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const AssumptionInstance inst = generate_instance(64, 64, 2, 8, 1e-4, 1.0, 0.0, seed);
        const PerturbationDecay d = perturbation_decay(inst, eta);
        worst = std::max(worst, d.full.max_residual);
        rmin = std::min(rmin, d.ratio);
        rmax = std::max(rmax, d.ratio);
    }
    return {worst <= 10 * eta * eta && rmin >= 2.0 && rmax <= 8.0,
            fmt("max residual %.3g (bound %.3g), halving ratio in [%.3f, %.3f] over 20 seeds", worst,
                10 * eta * eta, rmin, rmax)};
}

Outcome weyl() {
    Rng rng(99);
    int bad = 0;
    double slack = 1e300;
    for (int t = 0; t < 100; ++t) {
        const std::size_t m = 2 + rng.below(30), n = 2 + rng.below(30);
        const DenseMatrix w = DenseMatrix::gaussian(m, n, rng);
        const DenseMatrix e = DenseMatrix::gaussian(m, n, rng, std::pow(10.0, -3.0 * rng.uniform()));
        const RealVector a = svd(w).sigma, b = svd(w + e).sigma;
        const double bound = spectral_norm(e);
        for (std::size_t i = 0; i < a.size(); ++i) {
            const double d = std::abs(a[i] - b[i]);
            // a few ulps of the spectrum for roundoff
            if (d > bound + 1e-13 * a[0]) ++bad;
            slack = std::min(slack, bound - d);
        }
    }
    return {bad == 0, fmt("%d violations over 100 pairs, min slack %.3g", bad, slack)};
}

double mean(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

struct BenchData {
    std::vector<double> inter10, inter0, svf, topk, rnd, recall_none;
    bool ready = false;
};

BenchData& bench_data() {
    static BenchData d;
    if (d.ready) return d;
    const ExperimentConfig cfg = preset("canonical");
    for (std::size_t i = 0; i < 20; ++i) {
        const SeedContext ctx = prepare_seed(cfg, seed_at(cfg, i));
        TrainConfig t = cfg.train;
        t.protection_mode = ProtectionMode::svf_guided;
        t.lambda_ortho = 10.0;
        const ModeRun s = run_mode(ctx, cfg, t);
        t.lambda_ortho = 0.0;
        const ModeRun s0 = run_mode(ctx, cfg, t);
        const ModeRun tk = run_mode(ctx, cfg, ProtectionMode::topk_raw);
        const ModeRun rk = run_mode(ctx, cfg, ProtectionMode::random_k);
        const ModeRun nn = run_mode(ctx, cfg, ProtectionMode::none);
        d.inter10.push_back(s.metrics.final_interference());
        d.inter0.push_back(s0.metrics.final_interference());
        d.svf.push_back(s.metrics.skill_degradation());
        d.topk.push_back(tk.metrics.skill_degradation());
        d.rnd.push_back(rk.metrics.skill_degradation());
        d.recall_none.push_back(nn.metrics.fact_recall);
    }
    d.ready = true;
    return d;
}

Outcome interference() {
    const BenchData& d = bench_data();
    const double a = mean(d.inter10), b = mean(d.inter0);
    return {a <= 0.1 * b, fmt("mean interference %.4g at lambda 10 vs %.4g at lambda 0 (ratio %.3g)", a, b, a / b)};
}

Outcome ordering() {
    const BenchData& d = bench_data();
    int wins = 0;
    for (std::size_t i = 0; i < d.svf.size(); ++i)
        if (d.svf[i] <= d.topk[i] && d.svf[i] <= d.rnd[i]) ++wins;
    const double s = mean(d.svf), t = mean(d.topk), r = mean(d.rnd), rec = mean(d.recall_none);
    return {s <= t && s <= r && wins >= 15 && rec >= 0.9,
            fmt("mean degradation svf %.4g topk %.4g random %.4g; per-seed %d/20; plain recall %.3f", s, t, r, wins,
                rec)};
}

Outcome ablation() {
    ExperimentConfig cfg = preset("canonical");
    cfg.ablation.ks.clear();
    const std::vector<AblationCell> cells = run_ablation(cfg);
    std::vector<double> inter, rec;
    std::ostringstream os;
    for (const AblationCell& c : cells) {
        if (c.param == "lambda_ortho") inter.push_back(c.mean_interference());
        if (c.param == "lora_rank") rec.push_back(c.mean_recall());
    }
    bool ok = cfg.ablation.seeds >= 10;
    for (std::size_t i = 1; i < inter.size(); ++i) ok = ok && inter[i] <= inter[i - 1];
    for (std::size_t i = 1; i < rec.size(); ++i) ok = ok && rec[i] >= rec[i - 1];
    os << "interference";
    for (double v : inter) os << ' ' << fmt("%.4g", v);
    os << "; recall";
    for (double v : rec) os << ' ' << fmt("%.3f", v);
    os << "; seeds " << cfg.ablation.seeds;
    return {ok, os.str()};
}

Outcome param_counts() {
    const bool ok = param_count_svf({{8, 4}}) == 4 && param_count_lora({{8, 4}}, 2) == 24 &&
                    param_count_svf({{16, 32}, {8, 16}}) == 24 && param_count_lora({{16, 32}, {8, 16}}, 3) == 216;
    return {ok, fmt("svf [(8,4)] = %zu, lora r=2 = %zu", param_count_svf({{8, 4}}), param_count_lora({{8, 4}}, 2))};
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

Outcome determinism() {
    namespace fs = std::filesystem;
    const fs::path root = fs::temp_directory_path() / "svlab_acceptance_det";
    fs::remove_all(root);
    std::string csv[2];
    for (int i = 0; i < 2; ++i) {
        const fs::path out = root / std::to_string(i);
        const std::string cmd = std::string("\"") + SVLAB_CLI_PATH + "\" bench --preset canonical --seeds 5 --out \"" +
                                out.string() + "\" > /dev/null";
        if (std::system(cmd.c_str()) != 0) return {false, "cli exited nonzero"};
        csv[i] = slurp(out / "bench" / "comparison.csv");
    }
    const bool ok = !csv[0].empty() && csv[0] == csv[1];
    return {ok, fmt("comparison.csv %zu bytes, identical: %s", csv[0].size(), ok ? "yes" : "no")};
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
        {"svd roundtrip and orthonormality", svd_core},
        {"svf gradient equals sigma*gamma", svf_gradient},
        {"orthogonality loss gradients", ortho_gradient},
        {"misaligned skills escape the top-k", theorem},
        {"first-order singular value perturbation", perturbation},
        {"weyl bound", weyl},
        {"orthogonality penalty suppresses interference", interference},
        {"protection mode ordering and plasticity floor", ordering},
        {"ablation monotonicity", ablation},
        {"parameter counts", param_counts},
        {"bench csv is deterministic", determinism},
    };
    std::set<int> only;
    for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
    int failures = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int id = static_cast<int>(i + 1);
        if (!only.empty() && !only.count(id)) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::printf("[%s] criterion %2d  %s: %s (%.1fs)\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first,
                    o.detail.c_str(), secs);
        std::fflush(stdout);
        failures += o.pass ? 0 : 1;
    }
    return failures;
}
