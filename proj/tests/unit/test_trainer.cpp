#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>
#include <limits>

#include "svlab/errors.hpp"
#include "svlab/two_phase_trainer.hpp"

using namespace svlab;

namespace {

ModelConfig small_model(double alignment = 0.0) {
    ModelConfig m;
    m.in_dim = 10;
    m.hidden = {12};
    m.out_dim = 6;
    m.layer_alignment = alignment;
    return m;
}

SkillConfig small_skill() {
    SkillConfig s;
    s.s = 2;
    s.misalign_k = 3;
    s.sample_count = 64;
    s.eval_count = 128;
    return s;
}

TrainConfig small_train(ProtectionMode mode, int epochs = 20) {
    TrainConfig t;
    t.k = 3;
    t.epochs = epochs;
    t.lr = 3e-3;
    t.protection_mode = mode;
    return t;
}

Eigen::MatrixXd to_eigen(const DenseMatrix& m) {
    Eigen::MatrixXd e(m.rows(), m.cols());
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < m.cols(); ++j) e(i, j) = m(i, j);
    return e;
}

}  // namespace

TEST(ToyModel, ShapesAndDeterminism) {
    ModelConfig cfg = small_model();
    cfg.hidden = {12, 7};
    const ToyModel a = build_toy_model(cfg, 4), b = build_toy_model(cfg, 4), c = build_toy_model(cfg, 5);
    ASSERT_EQ(a.layers.size(), 3u);
    EXPECT_EQ(a.in_dim(), 10u);
    EXPECT_EQ(a.out_dim(), 6u);
    EXPECT_EQ(a.layers[1].d_in(), 12u);
    EXPECT_EQ(a.layers[0].base, b.layers[0].base);
    EXPECT_NE(a.layers[0].base, c.layers[0].base);
    for (const auto& l : a.layers) {
        EXPECT_EQ(l.svf.z, RealVector(l.base.rank(), 1.0));
        EXPECT_EQ(max_abs(lora_delta(l.lora)), 0.0);
    }
}

TEST(ToyModel, FullAlignmentChainsEveryComponent) {
    const ToyModel m = build_toy_model(small_model(1.0), 6);
    for (std::size_t j = 0; j < m.layers.back().base.rank(); ++j) {
        const auto chain = trace_pathway(m, j);
        ASSERT_EQ(chain.size(), 2u);
        EXPECT_NEAR(std::abs(dot(m.layers[1].base.right(j), m.layers[0].base.left(chain[0]))), 1.0, 1e-8);
    }
    // independent bases: chains break
    const ToyModel free = build_toy_model(small_model(0.0), 6);
    EXPECT_TRUE(trace_pathway(free, 0).empty());
}

TEST(ToyModel, ForwardMatchesManualComposition) {
    const ToyModel m = build_toy_model(small_model(), 7);
    Rng rng(1);
    const DenseMatrix x = DenseMatrix::gaussian(5, 10, rng);
    const DenseMatrix y = model_forward(m, x);
    const Eigen::MatrixXd w0 = to_eigen(m.layers[0].materialize());
    const Eigen::MatrixXd w1 = to_eigen(m.layers[1].materialize());
    const Eigen::MatrixXd h = (to_eigen(x) * w0.transpose()).array().tanh().matrix();
    const Eigen::MatrixXd ey = h * w1.transpose();
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < 6; ++j) EXPECT_NEAR(y(i, j), ey(i, j), 1e-12);
}

TEST(SkillTask, DependsOnlyOnProjection) {
    const ToyModel m = build_toy_model(small_model(), 8);
    SkillConfig sc = small_skill();
    sc.delta = 1e-3;
    const SkillTask t = make_skill_task(m, sc, 8);
    EXPECT_LE(orthonormality_error(t.v_task), 1e-12);
    Rng rng(2);
    RealVector x(10);
    for (double& v : x) v = rng.normal();
    const RealVector px = matvec(t.v_task, matvec_t(t.v_task, x));
    const RealVector a = t.target(x), b = t.target(px);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
    // misalignment against the top-3 right vectors of layer 0
    double worst = 0.0;
    for (std::size_t i = 0; i < 3; ++i) {
        const RealVector p = matvec_t(t.v_task, m.layers[0].base.right(i));
        worst = std::max(worst, dot(p, p));
    }
    EXPECT_LE(worst, 1e-3 * (1 + 1e-9));
}

TEST(SkillTask, PathwayUsesChains) {
    const ToyModel m = build_toy_model(small_model(1.0), 9);
    SkillConfig sc = small_skill();
    sc.pathway = true;
    sc.answer_readout = true;
    sc.delta = 0.0;
    const SkillTask t = make_skill_task(m, sc, 9);
    ASSERT_EQ(t.readout.cols(), 2u);
    EXPECT_LE(orthonormality_error(t.readout), 1e-12);
    for (std::size_t c = 0; c < 2; ++c) {
        // each readout column is a last-layer left vector
        double best = 0.0;
        for (std::size_t j = 0; j < m.layers[1].base.rank(); ++j)
            best = std::max(best, std::abs(dot(t.readout.column(c), m.layers[1].base.left(j))));
        EXPECT_NEAR(best, 1.0, 1e-12);
    }
    sc.pathway_gain = 1.5;
    const SkillTask d = make_skill_task(m, sc, 9);
    // diagonal in the chain basis
    const DenseMatrix coef = matmul_tn(d.readout, d.target_map);
    EXPECT_NEAR(coef(0, 1), 0.0, 1e-12);
    EXPECT_NEAR(coef(1, 0), 0.0, 1e-12);
    EXPECT_THROW(make_skill_task(build_toy_model(small_model(0.0), 9), sc, 9), ContractViolation);
}

TEST(SkillTask, DrawIsSeeded) {
    const ToyModel m = build_toy_model(small_model(), 10);
    const SkillTask t = make_skill_task(m, small_skill(), 10);
    Rng a(3), b(3);
    const Samples s1 = t.draw(20, a), s2 = t.draw(20, b);
    EXPECT_EQ(s1.x, s2.x);
    EXPECT_EQ(s1.y, s2.y);
}

TEST(Facts, DistinctUnitKeys) {
    const FactSet f = make_fact_set(40, 8, 5, 1.0, 11);
    ASSERT_EQ(f.count(), 40u);
    for (std::size_t i = 0; i < 40; ++i) {
        EXPECT_NEAR(norm2(f.keys.row(i)), 1.0, 1e-12);
        for (std::size_t j = 0; j < i; ++j) {
            double d2 = 0.0;
            for (std::size_t c = 0; c < 8; ++c) d2 += std::pow(f.keys(i, c) - f.keys(j, c), 2);
            EXPECT_GT(std::sqrt(d2), 0.1);
        }
    }
    EXPECT_TRUE(f.values.all_finite());
    EXPECT_THROW(make_fact_set(0, 8, 5, 1.0, 11), ContractViolation);
}

TEST(Facts, RelativeAndAnchors) {
    const ToyModel m = build_toy_model(small_model(), 12);
    const FactSet zero = make_relative_fact_set(m, 10, 0.0, 12);
    EXPECT_LT(max_abs(zero.values - model_forward(m, zero.keys)), 1e-15);
    EXPECT_DOUBLE_EQ(evaluate_recall(m, zero, 1e-9), 1.0);

    FactSet f = make_relative_fact_set(m, 10, 0.5, 12);
    EXPECT_EQ(f.keys, zero.keys);
    append_anchor_facts(f, m, 3.0, 12);
    EXPECT_EQ(f.count(), 14u);
    EXPECT_EQ(f.new_count(), 10u);
    // anchors replay the model exactly
    for (std::size_t t = 10; t < 14; ++t) {
        const DenseMatrix out = model_forward(m, DenseMatrix(1, 10, std::vector<double>(f.keys.row(t).begin(), f.keys.row(t).end())));
        for (std::size_t j = 0; j < 6; ++j) EXPECT_DOUBLE_EQ(out(0, j), f.values(t, j));
    }
}

TEST(Recall, InfiniteToleranceAndNullModel) {
    const ToyModel m = build_toy_model(small_model(), 13);
    const FactSet f = make_fact_set(20, 10, 6, 1.0, 13);
    EXPECT_DOUBLE_EQ(evaluate_recall(m, f, std::numeric_limits<double>::infinity()), 1.0);
    EXPECT_LE(evaluate_recall(m, f, 0.1), 0.2);
}

TEST(Losses, WeightGradientsMatchFiniteDifferences) {
    ToyModel m = build_toy_model(small_model(), 14);
    Rng rng(4);
    m.layers[0].svf.z = RealVector(m.layers[0].base.rank(), 1.1);
    m.layers[1].lora.b = DenseMatrix::gaussian(6, 4, rng, 0.05);
    const SkillTask t = make_skill_task(m, small_skill(), 14);
    const Samples batch = t.draw(8, rng);
    std::vector<DenseMatrix> grads;
    loss_and_weight_grads(m, batch, &grads);
    // perturb W'_l through an extra rank-1 LoRA-free change: use z on a dyad
    for (std::size_t l = 0; l < 2; ++l) {
        const auto& base = m.layers[l].base;
        const RealVector gz = svf_loss_gradient(grads[l], base);
        for (std::size_t i = 0; i < base.rank(); i += 3) {
            ToyModel p = m, q = m;
            p.layers[l].svf.z[i] += 1e-5;
            q.layers[l].svf.z[i] -= 1e-5;
            const double fd = (loss_and_weight_grads(p, batch, nullptr) - loss_and_weight_grads(q, batch, nullptr)) / 2e-5;
            EXPECT_NEAR(gz[i], fd, 1e-6 * std::max(1.0, std::abs(fd))) << "layer " << l << " index " << i;
        }
    }
}

TEST(Losses, ReadoutRestrictsTheError) {
    const ToyModel m = build_toy_model(small_model(1.0), 15);
    SkillConfig sc = small_skill();
    sc.pathway = true;
    sc.answer_readout = true;
    const SkillTask t = make_skill_task(m, sc, 15);
    Rng rng(5);
    Samples batch = t.draw(8, rng);
    const double before = loss_and_weight_grads(m, batch, nullptr, &t.readout);
    // move targets orthogonally to the readout: loss unchanged
    DenseMatrix shift(8, 6);
    for (std::size_t i = 0; i < 8; ++i)
        for (std::size_t j = 0; j < 6; ++j) shift(i, j) = rng.normal();
    shift -= matmul(matmul(shift, t.readout), t.readout.transpose());
    batch.y += shift;
    EXPECT_NEAR(loss_and_weight_grads(m, batch, nullptr, &t.readout), before, 1e-10);
}

TEST(Phase1, ZeroStepsAndFixedPoint) {
    ToyModel m = build_toy_model(small_model(), 16);
    const SkillTask t = make_skill_task(m, small_skill(), 16);
    Rng rng(6);
    const Samples s = t.draw(32, rng);
    const Phase1Result r0 = phase1_train_svf(m, s, 1e-2, 0, 3);
    EXPECT_EQ(m.layers[0].svf.z, RealVector(m.layers[0].base.rank(), 1.0));
    EXPECT_EQ(r0.initial_loss, r0.final_loss);

    // targets produced by the model itself: zero gradient
    Samples own = s;
    own.y = model_forward(m, own.x);
    phase1_train_svf(m, own, 1e-2, 200, 3);
    for (const auto& l : m.layers)
        for (double z : l.svf.z) EXPECT_NEAR(z, 1.0, 1e-6);
}

TEST(Phase1, ReducesSkillLossAndBuildsSubspaces) {
    ToyModel m = build_toy_model(small_model(), 17);
    const SkillTask t = make_skill_task(m, small_skill(), 17);
    Rng rng(7);
    const Samples s = t.draw(64, rng);
    const double before = evaluate_skill(m, t, 256, 17);
    const Phase1Result r = phase1_train_svf(m, s, 1e-2, 300, 3);
    EXPECT_TRUE(r.converged);
    EXPECT_LT(r.final_loss, r.initial_loss);
    EXPECT_LE(evaluate_skill(m, t, 256, 17), before);
    ASSERT_EQ(r.crit.size(), 2u);
    for (std::size_t l = 0; l < 2; ++l) {
        EXPECT_EQ(r.crit[l].indices, critical_indices(m.layers[l].svf, 3));
        EXPECT_EQ(r.crit[l].source_layer, l);
    }
    ToyModel dirty = m;
    Rng lr(1);
    dirty.layers[0].lora = LoraAdapter::initialize(12, 10, 2, 32.0, lr);
    dirty.layers[0].lora.b(0, 0) = 1.0;
    EXPECT_THROW(phase1_train_svf(dirty, s, 1e-2, 1, 3), ContractViolation);
}

TEST(Phase1, DivergenceIsReported) {
    ToyModel m = build_toy_model(small_model(), 18);
    const SkillTask t = make_skill_task(m, small_skill(), 18);
    Rng rng(8);
    const Samples s = t.draw(32, rng);
    EXPECT_THROW(phase1_train_svf(m, s, 1e30, 50, 3), NumericalFailure);
}

TEST(OrthoLoss, TrivialCases) {
    const ToyModel m = build_toy_model(small_model(), 19);
    const SvdFactors& base = m.layers[0].base;
    const CriticalSubspace crit = subspace_from_indices(base, {1});
    Rng rng(19);
    LoraAdapter lora = LoraAdapter::initialize(base.out_dim(), base.in_dim(), 2, 32.0, rng);
    EXPECT_EQ(ortho_loss(lora, crit), 0.0);
    // scale * B A = u_1 v_1^T
    lora.b = DenseMatrix(base.out_dim(), lora.rank());
    lora.a = DenseMatrix(lora.rank(), base.in_dim());
    const RealVector u = base.left(1), v = base.right(1);
    for (std::size_t i = 0; i < u.size(); ++i) lora.b(i, 0) = u[i] / lora.scale();
    for (std::size_t j = 0; j < v.size(); ++j) lora.a(0, j) = v[j];
    EXPECT_NEAR(ortho_loss(lora, crit), 1.0, 1e-12);
}

TEST(OrthoLoss, DenseOracleAndFiniteDifferences) {
    Rng rng(21);
    const SvdFactors base = svd(DenseMatrix::gaussian(9, 7, rng));
    const CriticalSubspace crit = subspace_from_indices(base, {0, 2, 5});
    LoraAdapter lora = LoraAdapter::initialize(9, 7, 3, 32.0, rng);
    lora.b = DenseMatrix::gaussian(9, 3, rng, 0.1);
    lora.a = DenseMatrix::gaussian(3, 7, rng, 0.1);

    const Eigen::MatrixXd dw = to_eigen(lora_delta(lora));
    const double oracle = (dw.transpose() * to_eigen(crit.u_crit)).squaredNorm();
    EXPECT_NEAR(ortho_loss(lora, crit), oracle, 1e-12 * std::max(1.0, oracle));

    const LoraGrads g = ortho_loss_grads(lora, crit);
    const double h = 1e-5;
    for (std::size_t i = 0; i < 9; ++i)
        for (std::size_t j = 0; j < 3; ++j) {
            LoraAdapter p = lora, q = lora;
            p.b(i, j) += h;
            q.b(i, j) -= h;
            const double fd = (ortho_loss(p, crit) - ortho_loss(q, crit)) / (2 * h);
            EXPECT_NEAR(g.b(i, j), fd, 1e-6 * std::max(1.0, std::abs(fd)));
        }
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 7; ++j) {
            LoraAdapter p = lora, q = lora;
            p.a(i, j) += h;
            q.a(i, j) -= h;
            const double fd = (ortho_loss(p, crit) - ortho_loss(q, crit)) / (2 * h);
            EXPECT_NEAR(g.a(i, j), fd, 1e-6 * std::max(1.0, std::abs(fd)));
        }
}

TEST(TotalLoss, AffineInLambda) {
    EXPECT_EQ(total_loss(1.5, {2.0, 3.0}, 0.0), 1.5);
    EXPECT_EQ(total_loss(0.0, {2.0}, 10.0), 20.0);
    const double a = total_loss(0.7, {0.1, 0.4}, 1.0), b = total_loss(0.7, {0.1, 0.4}, 2.0),
                 c = total_loss(0.7, {0.1, 0.4}, 3.0);
    EXPECT_NEAR(c - b, b - a, 1e-15);
}

TEST(ProtectionSubspaces, PerMode) {
    ToyModel m = build_toy_model(small_model(), 22);
    const SkillTask t = make_skill_task(m, small_skill(), 22);
    Rng rng(9);
    const Phase1Result p = phase1_train_svf(m, t.draw(32, rng), 1e-2, 50, 3);
    const auto top = protection_subspaces(m, ProtectionMode::topk_raw, p.crit, 3, 22);
    EXPECT_EQ(top[0].indices, (IndexSet{0, 1, 2}));
    EXPECT_EQ(protection_subspaces(m, ProtectionMode::svf_guided, p.crit, 3, 22)[1].indices, p.crit[1].indices);
    EXPECT_EQ(protection_subspaces(m, ProtectionMode::none, p.crit, 3, 22)[0].indices, p.crit[0].indices);
    const auto r1 = protection_subspaces(m, ProtectionMode::random_k, p.crit, 3, 22);
    const auto r2 = protection_subspaces(m, ProtectionMode::random_k, p.crit, 3, 22);
    EXPECT_EQ(r1[0].indices, r2[0].indices);
    EXPECT_EQ(r1[0].indices.size(), 3u);
}

class Phase2Test : public ::testing::Test {
protected:
    void SetUp() override {
        model = build_toy_model(small_model(), 23);
        task = make_skill_task(model, small_skill(), 23);
        Rng rng(10);
        const Phase1Result p = phase1_train_svf(model, task.draw(64, rng), 1e-2, 100, 3);
        crit = p.crit;
        facts = make_relative_fact_set(model, 10, 0.5, 23);
    }
    ToyModel model;
    SkillTask task;
    std::vector<CriticalSubspace> crit;
    FactSet facts;
};

TEST_F(Phase2Test, FrozenPartsUntouchedAndLossDrops) {
    ToyModel m = model;
    const RunMetrics r = phase2_inject(m, facts, small_train(ProtectionMode::svf_guided, 30), crit, {&task, 128, 23});
    ASSERT_EQ(r.epochs.size(), 30u);
    for (std::size_t l = 0; l < 2; ++l) {
        EXPECT_EQ(m.layers[l].base, model.layers[l].base);
        EXPECT_EQ(m.layers[l].svf, model.layers[l].svf);
    }
    EXPECT_LT(r.epochs.back().sft_loss, r.epochs.front().sft_loss);
    EXPECT_GE(r.final_interference(), 0.0);
    EXPECT_GE(r.fact_recall, 0.0);
    EXPECT_LE(r.fact_recall, 1.0);
}

TEST_F(Phase2Test, NothingToLearnKeepsDeltaSmall) {
    FactSet own = make_relative_fact_set(model, 10, 0.0, 23);
    ToyModel m = model;
    const RunMetrics r = phase2_inject(m, own, small_train(ProtectionMode::svf_guided, 30), crit, {&task, 128, 23});
    EXPECT_LT(r.epochs.front().sft_loss, 1e-20);
    for (const auto& l : m.layers) EXPECT_LE(frobenius_norm(lora_delta(l.lora)), 1e-3);
}

TEST_F(Phase2Test, NoneEqualsSvfWithZeroLambda) {
    ToyModel a = model, b = model;
    TrainConfig ta = small_train(ProtectionMode::none, 10);
    TrainConfig tb = small_train(ProtectionMode::svf_guided, 10);
    tb.lambda_ortho = 0.0;
    const RunMetrics ra = phase2_inject(a, facts, ta, crit, {&task, 128, 23});
    const RunMetrics rb = phase2_inject(b, facts, tb, crit, {&task, 128, 23});
    ASSERT_EQ(ra.epochs.size(), rb.epochs.size());
    for (std::size_t e = 0; e < ra.epochs.size(); ++e) {
        EXPECT_EQ(ra.epochs[e].sft_loss, rb.epochs[e].sft_loss);
        EXPECT_EQ(ra.epochs[e].interference, rb.epochs[e].interference);
    }
    EXPECT_EQ(ra.skill_loss_after, rb.skill_loss_after);
    EXPECT_EQ(ra.fact_recall, rb.fact_recall);
}

TEST_F(Phase2Test, OrthComplementIsExact) {
    for (int epochs : {1, 2, 5}) {
        ToyModel m = model;
        phase2_inject(m, facts, small_train(ProtectionMode::orth_complement, epochs), crit, {&task, 128, 23});
        for (std::size_t l = 0; l < 2; ++l) {
            const CriticalSubspace top = subspace_from_indices(m.layers[l].base, {0, 1, 2}, l);
            EXPECT_LE(frobenius_norm(matmul_tn(top.u_crit, lora_delta(m.layers[l].lora))), 1e-10);
        }
    }
}

TEST_F(Phase2Test, PenaltyReducesInterference) {
    ToyModel a = model, b = model;
    TrainConfig t = small_train(ProtectionMode::svf_guided, 40);
    const RunMetrics on = phase2_inject(a, facts, t, crit, {&task, 128, 23});
    t.protection_mode = ProtectionMode::none;
    const RunMetrics off = phase2_inject(b, facts, t, crit, {&task, 128, 23});
    EXPECT_LT(on.final_interference(), off.final_interference());
}

TEST_F(Phase2Test, RejectsBadConfig) {
    ToyModel m = model;
    TrainConfig t = small_train(ProtectionMode::svf_guided);
    t.batch_size = 0;
    EXPECT_THROW(phase2_inject(m, facts, t, crit, {&task, 128, 23}), ContractViolation);
    t = small_train(ProtectionMode::svf_guided);
    t.lr = 1e6;
    EXPECT_THROW(phase2_inject(m, facts, t, crit, {&task, 128, 23}), NumericalFailure);
}

TEST(EvaluateSkill, DeterministicAndZeroCase) {
    ToyModel m = build_toy_model(small_model(), 24);
    SkillTask t = make_skill_task(m, small_skill(), 24);
    EXPECT_EQ(evaluate_skill(m, t, 64, 3), evaluate_skill(m, t, 64, 3));
    for (auto& l : m.layers) std::fill(l.base.sigma.begin(), l.base.sigma.end(), 0.0);
    t.target_map = DenseMatrix(t.target_map.rows(), t.target_map.cols());
    EXPECT_EQ(evaluate_skill(m, t, 64, 3), 0.0);
}

TEST(Modes, NamesRoundTrip) {
    for (ProtectionMode m : all_modes) EXPECT_EQ(parse_mode(mode_name(m)), m);
    EXPECT_FALSE(parse_mode("bogus").has_value());
}
