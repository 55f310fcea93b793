#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "svlab/spectral_probe.hpp"
#include "svlab/theory_lab.hpp"
#include "svlab/two_phase_trainer.hpp"

namespace svlab {

inline constexpr std::string_view kLibraryVersion = "0.4.0";
inline constexpr std::string_view kBundleFormat = "svlab-bundle/1";
inline constexpr std::string_view kOutDirEnv = "SVLAB_OUT_DIR";

enum class FactValues { gaussian, relative, offset };

struct FactConfig {
    std::size_t count = 50;
    // gaussian: i.i.d. N(0, scale^2) values. relative: the model's own answer
    // plus N(0, scale^2) noise. offset: own answer moved by scale * its norm.
    FactValues values = FactValues::relative;
    double value_scale = 0.5;
    bool anchors = false;
    double anchor_ratio = 3.0;
    double recall_tol = 0.1;
};

struct Phase1Config {
    double lr = 1e-2;
    int steps = 500;
};

struct AblationConfig {
    std::vector<double> lambdas{0.1, 1.0, 10.0, 100.0};
    std::vector<int> ranks{2, 4, 8};
    std::vector<std::size_t> ks{4, 8, 16};
    std::size_t seeds = 10;
};

struct ReportConfig {
    bool svg = true;
    std::size_t probe_top = 64;
};

struct ExperimentConfig {
    std::string kind = "phase2";
    std::uint64_t root_seed = 0;
    std::size_t seeds = 20;
    std::string out_dir;  // empty: $SVLAB_OUT_DIR or ./svlab_out
    ModelConfig model;
    SkillConfig skill;
    FactConfig facts;
    Phase1Config phase1;
    TrainConfig train;
    TheoryConfig theory;
    std::size_t theory_seeds = 100;
    AblationConfig ablation;
    ReportConfig report;
};

// Config <-> JSON. from_json rejects unknown keys and wrong types with a
// ConfigError naming the dotted path.
nlohmann::json config_to_json(const ExperimentConfig& cfg);
ExperimentConfig config_from_json(const nlohmann::json& j);
// Overlays `patch` onto `base` key by key (objects merge, everything else replaces).
void merge_json(nlohmann::json& base, const nlohmann::json& patch, const std::string& path = "");
// "train.lambda_ortho=3" style override. Values parse as JSON, falling back to a string.
void apply_override(nlohmann::json& j, std::string_view assignment);

// "canonical" (the acceptance benchmark) or "smoke" (seconds-scale).
ExperimentConfig preset(std::string_view name);
std::vector<std::string> preset_names();

// Throws ConfigError on the first bad field.
void validate(const ExperimentConfig& cfg);

ExperimentConfig load_config_file(const std::filesystem::path& path);

std::filesystem::path resolve_out_dir(const ExperimentConfig& cfg);

// ---- persistence

struct MetricTable {
    std::string name;
    std::vector<std::string> columns;
    std::vector<std::vector<double>> rows;
    friend bool operator==(const MetricTable&, const MetricTable&) = default;
};

struct ArtifactBundle {
    std::string format{kBundleFormat};
    std::string library_version{kLibraryVersion};
    std::uint64_t root_seed = 0;
    nlohmann::json config;  // full ExperimentConfig snapshot
    std::vector<AdaptedLayer> layers;
    std::vector<CriticalSubspace> critical;
    std::vector<MetricTable> metrics;
    nlohmann::json info = nlohmann::json::object();  // small labels: mode, seed, ...

    const MetricTable* table(std::string_view name) const;
};

// Doubles are written with %.17g so save/load is bit exact.
std::string bundle_to_text(const ArtifactBundle& bundle);
ArtifactBundle bundle_from_text(std::string_view text);
void save_bundle(const ArtifactBundle& bundle, const std::filesystem::path& path);
ArtifactBundle load_bundle(const std::filesystem::path& path);

// JSON text with every float printed as %.17g.
std::string dump_json_exact(const nlohmann::json& j, int indent = 1);

// ---- runs

struct SeedContext {
    std::uint64_t seed = 0;
    ToyModel model;  // after Phase 1, adapters zero
    SkillTask task;
    Phase1Result phase1;
    FactSet facts;
};

// Builds model and task, trains Phase 1 (NumericalFailure if the skill loss
// did not drop), then draws the facts.
SeedContext prepare_seed(const ExperimentConfig& cfg, std::uint64_t seed);

struct ModeRun {
    ProtectionMode mode = ProtectionMode::none;
    std::uint64_t seed = 0;
    TrainConfig train;
    RunMetrics metrics;
    LayeredOverlap overlap;  // protected index sets against the SVF-guided ones
    ToyModel model;          // after Phase 2
    std::vector<CriticalSubspace> protected_sets;
};

ModeRun run_mode(const SeedContext& ctx, const ExperimentConfig& cfg, ProtectionMode mode);
ModeRun run_mode(const SeedContext& ctx, const ExperimentConfig& cfg, const TrainConfig& train);

// seed i runs with root_seed + i
std::uint64_t seed_at(const ExperimentConfig& cfg, std::size_t i);

// Rows ordered mode-major, then seed.
std::vector<ModeRun> run_bench(const ExperimentConfig& cfg, const std::vector<ProtectionMode>& modes);

struct AblationCell {
    std::string param;  // lambda_ortho, lora_rank or k
    double value = 0.0;
    std::vector<double> interference;  // per seed
    std::vector<double> recall;
    std::vector<double> degradation;
    double mean_interference() const;
    double mean_recall() const;
    double mean_degradation() const;
};

// svf_guided runs over the ablation grids; one axis varies at a time.
std::vector<AblationCell> run_ablation(const ExperimentConfig& cfg);

std::vector<TheorySeedRow> run_theory(const ExperimentConfig& cfg);

ArtifactBundle make_phase1_bundle(const ExperimentConfig& cfg, const SeedContext& ctx);
ArtifactBundle make_run_bundle(const ExperimentConfig& cfg, const ModeRun& run);
ModeRun run_from_bundle(const ArtifactBundle& bundle);

// ---- reports

struct CsvTable {
    std::vector<std::string> comments;  // written as "# ..." lines
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
};

std::string csv_escape(std::string_view field);
std::string format_number(double v);
std::string to_csv(const CsvTable& table);
void write_text_file(const std::filesystem::path& path, std::string_view text);

struct Series {
    std::string name;
    std::vector<double> x;
    std::vector<double> y;
};

// Standalone SVG 1.1; one polyline per series (lines) or one circle per point (scatter).
std::string svg_line_chart(const std::string& title, const std::string& x_label, const std::string& y_label,
                           const std::vector<Series>& series, bool log_y = false);
std::string svg_scatter_chart(const std::string& title, const std::string& x_label, const std::string& y_label,
                              const std::vector<Series>& series, bool log_y = false);

CsvTable probe_table(const std::vector<SeedContext>& contexts, std::size_t k, std::size_t top);
CsvTable dynamics_table(const std::vector<const ModeRun*>& runs);
CsvTable comparison_table(const std::vector<ModeRun>& runs);
CsvTable theory_table(const std::vector<TheorySeedRow>& rows);
CsvTable ablation_table(const std::vector<AblationCell>& cells);

// Writes comparison.csv, dynamics.csv (first seed, every mode present) and
// their charts into `dir`. Throws ContractViolation on an empty run set.
void emit_reports(const std::vector<ModeRun>& runs, const std::filesystem::path& dir, bool svg);

}  // namespace svlab
