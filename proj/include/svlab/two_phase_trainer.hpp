#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "svlab/dense_linalg.hpp"
#include "svlab/spectral_adapters.hpp"
#include "svlab/spectral_probe.hpp"

namespace svlab {

// Stream ids for derive_seed(root, id). Never renumber: that would shift
// every pinned result.
namespace streams {
inline constexpr std::uint64_t base_model = 1;
inline constexpr std::uint64_t skill_task = 2;
inline constexpr std::uint64_t facts = 3;
inline constexpr std::uint64_t skill_train = 4;
inline constexpr std::uint64_t skill_eval = 5;
inline constexpr std::uint64_t lora_init = 6;
inline constexpr std::uint64_t batch_order = 7;
inline constexpr std::uint64_t anchors = 8;
inline constexpr std::uint64_t random_k = 100;  // + layer index
}  // namespace streams

struct ModelConfig {
    std::size_t in_dim = 32;
    std::vector<std::size_t> hidden{64};
    std::size_t out_dim = 8;
    // sigma_i proportional to i^-sigma_decay (1-based i), normalized so that
    // ||W||_F^2 = gain^2 * d_out: per-unit output variance is gain^2 times the
    // per-unit input variance for isotropic inputs. Keys and skill inputs are
    // unit-scale vectors, hence the larger gain on the first layer.
    double input_gain = 4.0;
    double hidden_gain = 2.0;
    double sigma_decay = 0.5;
    // 0: every layer draws Haar singular bases independently. 1: layer l+1's
    // right singular vectors are drawn from layer l's left singular vectors
    // (consecutive layers share the hidden basis). In between: mixed.
    double layer_alignment = 0.0;
    // Left singular vectors of every layer that feeds a tanh are distinct
    // coordinate vectors, so the elementwise nonlinearity never mixes two
    // singular components of the hidden representation.
    bool neuron_aligned = false;

    std::vector<LayerDims> layer_dims() const;
};

struct ToyModel {
    std::vector<AdaptedLayer> layers;

    std::size_t in_dim() const { return layers.front().d_in(); }
    std::size_t out_dim() const { return layers.back().d_out(); }
    std::vector<LayerDims> layer_dims() const;
};

ToyModel build_toy_model(const ModelConfig& cfg, std::uint64_t root_seed);

// Row-per-sample batch.
struct Samples {
    DenseMatrix x;
    DenseMatrix y;
    std::size_t count() const noexcept { return x.rows(); }
};

struct SkillConfig {
    std::size_t s = 2;
    double delta = 1e-4;          // leakage of the task basis into the top-k input directions
    std::size_t misalign_k = 8;   // how many top right vectors of layer 0 the task avoids
    std::size_t sample_count = 256;
    std::size_t eval_count = 2048;
    double noise_scale = 0.0;
    double target_scale = 1.0;
    // Skill loss and evaluation look only at the answer coordinates (the
    // column span of the target map) instead of the whole output.
    bool answer_readout = false;
    // Route the skill along s chains of singular components that connect
    // through consecutive layers (needs layer_alignment = 1): inputs enter on
    // the layer-0 right vectors of each chain, answers leave on the last
    // layer's left vectors. Chains are taken from the low-sigma end of the
    // last layer and must enter layer 0 outside its top misalign_k.
    bool pathway = false;
    // Pathway mode only. When > 0 the target scales chain t by pathway_gain
    // times the chain's own signed linear gain (product of its sigmas), so
    // rescaling singular values alone can fit it. 0 keeps a random s x s mix.
    double pathway_gain = 0.0;
};

// Targets depend on x only through its projection onto v_task.
struct SkillTask {
    DenseMatrix v_task;      // in_dim x s, orthonormal
    DenseMatrix target_map;  // out_dim x s
    DenseMatrix readout;     // out_dim x s orthonormal basis of the answer coordinates, or empty
    std::size_t sample_count = 0;
    double noise_scale = 0.0;

    RealVector target(std::span<const double> x) const;
    Samples draw(std::size_t n, Rng& rng) const;
};

SkillTask make_skill_task(const ToyModel& model, const SkillConfig& cfg, std::uint64_t root_seed);

// Per-layer component indices of one chain, layer 0 first, or empty when the
// chain starting at last-layer component `out_index` breaks (some right
// vector is not one of the previous layer's left vectors).
std::vector<std::size_t> trace_pathway(const ToyModel& model, std::size_t out_index);

struct FactSet {
    DenseMatrix keys;    // count x in_dim, unit rows
    DenseMatrix values;  // count x out_dim
    std::size_t anchor_count = 0;  // trailing rows replaying the model's own behavior; not scored by recall
    std::size_t count() const noexcept { return keys.rows(); }
    std::size_t new_count() const noexcept { return keys.rows() - anchor_count; }
};

// Unit keys (pairwise distance > 0.1) with i.i.d. N(0, value_scale^2) values.
FactSet make_fact_set(std::size_t count, std::size_t in_dim, std::size_t out_dim, double value_scale,
                      std::uint64_t root_seed);

// Same keys; each value is the model's own answer moved by `offset` times its
// norm in a random direction, so every fact starts wrong by a relative
// error of about `offset`.
FactSet make_offset_fact_set(const ToyModel& model, std::size_t count, double offset, std::uint64_t root_seed);

// Same keys; values are the model's own answers plus N(0, value_scale^2) noise.
FactSet make_relative_fact_set(const ToyModel& model, std::size_t count, double value_scale, std::uint64_t root_seed);

// Appends ceil(new_count / ratio) anchor pairs: fresh unit keys with the
// model's current outputs as values.
void append_anchor_facts(FactSet& facts, const ToyModel& model, double ratio, std::uint64_t root_seed);

enum class ProtectionMode { svf_guided, topk_raw, random_k, orth_complement, none };

std::string_view mode_name(ProtectionMode m);
std::optional<ProtectionMode> parse_mode(std::string_view name);
inline constexpr ProtectionMode all_modes[] = {ProtectionMode::svf_guided, ProtectionMode::topk_raw,
                                               ProtectionMode::random_k, ProtectionMode::orth_complement,
                                               ProtectionMode::none};

struct TrainConfig {
    int lora_rank = 4;
    double alpha = 32.0;
    double lambda_ortho = 10.0;
    std::size_t k = 8;
    double lr = 0.01;
    int epochs = 400;
    std::size_t batch_size = 8;
    std::uint64_t seed = 0;
    ProtectionMode protection_mode = ProtectionMode::svf_guided;
};

struct EpochMetrics {
    int epoch = 0;
    double sft_loss = 0.0;
    std::vector<double> ortho_loss;  // per layer, against the active protection subspace
    double interference = 0.0;       // against the SVF-guided subspaces
};

struct RunMetrics {
    std::vector<EpochMetrics> epochs;
    double skill_loss_before = 0.0;
    double skill_loss_after = 0.0;
    double fact_recall = 0.0;

    double final_interference() const { return epochs.empty() ? 0.0 : epochs.back().interference; }
    double final_sft() const { return epochs.empty() ? 0.0 : epochs.back().sft_loss; }
    double skill_degradation() const { return skill_loss_after - skill_loss_before; }
};

// Mean over rows of the squared Euclidean error.
double mse(const DenseMatrix& pred, const DenseMatrix& target);

// Composite forward pass for a row-per-sample batch.
DenseMatrix model_forward(const ToyModel& model, const DenseMatrix& x);

// Loss and dL/dW'_l for every layer (W'_l the composite weight).
// With `readout` (orthonormal columns) the error is measured only in those
// output coordinates.
double loss_and_weight_grads(const ToyModel& model, const Samples& batch, std::vector<DenseMatrix>* grads,
                             const DenseMatrix* readout = nullptr);

struct Phase1Result {
    std::vector<CriticalSubspace> crit;
    double initial_loss = 0.0;
    double final_loss = 0.0;
    int steps = 0;
    bool converged = false;  // final loss strictly below initial
};

// Gradient descent on every layer's z (LoRA must be zero). Leaves the
// trained z in the model and returns the frozen critical subspaces.
Phase1Result phase1_train_svf(ToyModel& model, const Samples& train, double lr, int steps, std::size_t k,
                              const DenseMatrix* readout = nullptr);

struct LoraGrads {
    DenseMatrix b;
    DenseMatrix a;
};

// ||dW^T u_crit||_F^2 on the effective (scaled) delta.
double ortho_loss(const LoraAdapter& lora, const CriticalSubspace& crit);
LoraGrads ortho_loss_grads(const LoraAdapter& lora, const CriticalSubspace& crit);

double total_loss(double sft, const std::vector<double>& ortho_per_layer, double lambda_ortho);

// Subspaces a protection mode penalizes. svf_guided and none return
// `svf_crit`; topk_raw and orth_complement the leading k components;
// random_k a seeded uniform k-subset per layer.
std::vector<CriticalSubspace> protection_subspaces(const ToyModel& model, ProtectionMode mode,
                                                   const std::vector<CriticalSubspace>& svf_crit, std::size_t k,
                                                   std::uint64_t root_seed);

struct SkillProbe {
    const SkillTask* task = nullptr;
    std::size_t n_eval = 2048;
    std::uint64_t root_seed = 0;
};

double evaluate_skill(const ToyModel& model, const SkillTask& task, std::size_t n_eval, std::uint64_t root_seed);
// Fraction of non-anchor facts answered within relative Euclidean error tol.
double evaluate_recall(const ToyModel& model, const FactSet& facts, double tol);

// Trains fresh LoRA adapters on the facts with base and z frozen. The model's
// adapters are replaced; base factors and z are checked bitwise unchanged.
RunMetrics phase2_inject(ToyModel& model, const FactSet& facts, const TrainConfig& cfg,
                         const std::vector<CriticalSubspace>& svf_crit, const SkillProbe& probe,
                         double recall_tol = 0.1);

}  // namespace svlab
