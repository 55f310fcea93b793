// svlab command-line front end. Exit codes: 0 ok, 2 config, 3 numerical, 4 I/O.
#include <cstdio>
#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "svlab/errors.hpp"
#include "svlab/lab_harness.hpp"

namespace fs = std::filesystem;
using namespace svlab;

namespace {

struct CommonOptions {
    std::string config_path;
    std::string preset_name = "canonical";
    std::size_t seeds = 0;  // 0: keep the configured count
    std::string out;
    std::string mode;
    std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
    cmd->add_option("--config", o.config_path, "JSON config file, overlaid on the preset");
    cmd->add_option("--preset", o.preset_name, "canonical or smoke")->capture_default_str();
    cmd->add_option("--seeds", o.seeds, "number of seeds (root_seed, root_seed+1, ...)");
    cmd->add_option("--out", o.out, "output directory (default: $SVLAB_OUT_DIR or ./svlab_out)");
    cmd->add_option("--mode", o.mode, "protection mode: svf_guided, topk_raw, random_k, orth_complement, none");
    cmd->add_option("--set", o.sets, "override one field, e.g. --set train.lambda_ortho=1");
}

ExperimentConfig resolve_config(const CommonOptions& o, const std::string& kind) {
    nlohmann::json j = config_to_json(preset(o.preset_name));
    if (!o.config_path.empty()) {
        std::ifstream in(o.config_path);
        if (!in) throw IoError("cannot open config file '" + o.config_path + "'");
        nlohmann::json file;
        try {
            file = nlohmann::json::parse(in);
        } catch (const nlohmann::json::parse_error& e) {
            throw ConfigError("<file>", o.config_path + ": " + e.what());
        }
        merge_json(j, file);
    }
    for (const auto& s : o.sets) apply_override(j, s);
    j["kind"] = kind;
    if (o.seeds > 0) {
        j["seeds"] = o.seeds;
        j["theory"]["seeds"] = o.seeds;
        j["ablation"]["seeds"] = o.seeds;
    }
    if (!o.out.empty()) j["out_dir"] = o.out;
    if (!o.mode.empty()) j["train"]["mode"] = o.mode;
    ExperimentConfig cfg = config_from_json(j);
    validate(cfg);
    return cfg;
}

std::string cell_dir(std::uint64_t seed) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "seed_%03llu", static_cast<unsigned long long>(seed));
    return buf;
}

int cmd_theory(const ExperimentConfig& cfg) {
    const fs::path dir = resolve_out_dir(cfg) / "theory";
    const auto rows = run_theory(cfg);
    write_text_file(dir / "theory.csv", to_csv(theory_table(rows)));
    std::size_t holds = 0, perturb_ok = 0;
    for (const auto& r : rows) {
        holds += r.verdict.contained_in_topk ? 0 : 1;
        perturb_ok += r.perturb_residual <= r.perturb_bound ? 1 : 0;
    }
    if (cfg.report.svg) {
        Series s{"per seed", {}, {}};
        for (const auto& r : rows) {
            s.x.push_back(static_cast<double>(r.verdict.i_star));
            s.y.push_back(r.verdict.gamma_star);
        }
        write_text_file(dir / "gamma_star.svg",
                        svg_scatter_chart("Largest |gamma| outside the top-k", "index i*", "|gamma_i*|", {s}));
    }
    std::printf("theorem holds (S_T not inside top-%zu) in %zu/%zu seeds (%.3f)\n", cfg.theory.k, holds, rows.size(),
                static_cast<double>(holds) / static_cast<double>(rows.size()));
    std::printf("perturbation residual within 10 eta^2 in %zu/%zu seeds\n", perturb_ok, rows.size());
    std::printf("wrote %s\n", (dir / "theory.csv").string().c_str());
    return 0;
}

int cmd_phase1(const ExperimentConfig& cfg) {
    const fs::path dir = resolve_out_dir(cfg) / "phase1";
    CsvTable t;
    t.comments = {"skill training of the SVF vectors, one row per seed",
                  "initial_loss / final_loss: skill MSE before and after", "ratio: final_loss / initial_loss",
                  "converged: 1 when the loss dropped"};
    t.header = {"seed", "initial_loss", "final_loss", "ratio", "converged"};
    for (std::size_t i = 0; i < cfg.seeds; ++i) {
        const SeedContext ctx = prepare_seed(cfg, seed_at(cfg, i));
        save_bundle(make_phase1_bundle(cfg, ctx), dir / cell_dir(ctx.seed) / "bundle.json");
        const auto& p = ctx.phase1;
        t.rows.push_back({std::to_string(ctx.seed), format_number(p.initial_loss), format_number(p.final_loss),
                          format_number(p.final_loss / p.initial_loss), p.converged ? "1" : "0"});
        std::printf("seed %llu: skill loss %.6g -> %.6g\n", static_cast<unsigned long long>(ctx.seed), p.initial_loss,
                    p.final_loss);
    }
    write_text_file(dir / "phase1.csv", to_csv(t));
    return 0;
}

void save_runs(const ExperimentConfig& cfg, const std::vector<ModeRun>& runs, const fs::path& dir) {
    for (const auto& r : runs)
        save_bundle(make_run_bundle(cfg, r), dir / "cells" / cell_dir(r.seed) / std::string(mode_name(r.mode)) / "bundle.json");
}

void print_means(const std::vector<ModeRun>& runs) {
    const CsvTable t = comparison_table(runs);
    for (const auto& row : t.rows) {
        if (row[1] != "mean") continue;
        std::printf("%-16s recall %-10s skill_degradation %-12s interference %s\n", row[0].c_str(), row[2].c_str(),
                    row[5].c_str(), row[6].c_str());
    }
}

int cmd_phase2(const ExperimentConfig& cfg) {
    const fs::path dir = resolve_out_dir(cfg) / "phase2";
    const auto runs = run_bench(cfg, {cfg.train.protection_mode});
    save_runs(cfg, runs, dir);
    emit_reports(runs, dir, cfg.report.svg);
    print_means(runs);
    return 0;
}

int cmd_bench(const ExperimentConfig& cfg, bool single_mode) {
    const fs::path dir = resolve_out_dir(cfg) / "bench";
    std::vector<ProtectionMode> modes(std::begin(all_modes), std::end(all_modes));
    if (single_mode) modes = {cfg.train.protection_mode};
    const auto runs = run_bench(cfg, modes);
    save_runs(cfg, runs, dir);
    emit_reports(runs, dir, cfg.report.svg);
    print_means(runs);
    std::printf("wrote %s\n", (dir / "comparison.csv").string().c_str());
    return 0;
}

int cmd_ablate(const ExperimentConfig& cfg) {
    const fs::path dir = resolve_out_dir(cfg) / "ablation";
    const auto cells = run_ablation(cfg);
    write_text_file(dir / "ablation.csv", to_csv(ablation_table(cells)));
    if (cfg.report.svg) {
        for (const char* param : {"lambda_ortho", "lora_rank", "k"}) {
            Series inter{"interference", {}, {}};
            Series rec{"recall", {}, {}};
            for (const auto& c : cells) {
                if (c.param != param) continue;
                inter.x.push_back(c.value);
                inter.y.push_back(c.mean_interference());
                rec.x.push_back(c.value);
                rec.y.push_back(c.mean_recall());
            }
            write_text_file(dir / ("ablation_" + std::string(param) + "_interference.svg"),
                            svg_line_chart("Interference vs " + std::string(param), param, "interference", {inter}, true));
            write_text_file(dir / ("ablation_" + std::string(param) + "_recall.svg"),
                            svg_line_chart("Recall vs " + std::string(param), param, "recall", {rec}));
        }
    }
    for (const auto& c : cells)
        std::printf("%-12s %-8g interference %-12.6g recall %-8.4g skill_degradation %.6g\n", c.param.c_str(), c.value,
                    c.mean_interference(), c.mean_recall(), c.mean_degradation());
    return 0;
}

int cmd_probe(const ExperimentConfig& cfg) {
    const fs::path dir = resolve_out_dir(cfg) / "probe";
    std::vector<SeedContext> contexts;
    for (std::size_t i = 0; i < cfg.seeds; ++i) contexts.push_back(prepare_seed(cfg, seed_at(cfg, i)));
    const CsvTable t = probe_table(contexts, cfg.train.k, cfg.report.probe_top);
    write_text_file(dir / "probe.csv", to_csv(t));
    if (cfg.report.svg) {
        const SeedContext& ctx = contexts.front();
        std::vector<Series> sorted, by_sigma;
        for (std::size_t l = 0; l < ctx.model.layers.size(); ++l) {
            Series a{"layer " + std::to_string(l), {}, {}}, b{"layer " + std::to_string(l), {}, {}};
            for (const auto& row : t.rows) {
                if (row[0] != std::to_string(ctx.seed) || row[1] != std::to_string(l)) continue;
                a.x.push_back(std::stod(row[2]));
                a.y.push_back(std::stod(row[3]));
                b.x.push_back(std::stod(row[4]));
                b.y.push_back(std::stod(row[3]));
            }
            sorted.push_back(std::move(a));
            by_sigma.push_back(std::move(b));
        }
        write_text_file(dir / "probe_sorted.svg", svg_line_chart("Sorted |z - 1|", "position", "|z - 1|", sorted, true));
        write_text_file(dir / "probe_sigma_rank.svg",
                        svg_scatter_chart("|z - 1| against sigma rank", "sigma rank", "|z - 1|", by_sigma, true));
    }
    std::printf("wrote %s (%zu rows)\n", (dir / "probe.csv").string().c_str(), t.rows.size());
    return 0;
}

int cmd_report(const ExperimentConfig& cfg, const std::string& input) {
    const fs::path in = input.empty() ? resolve_out_dir(cfg) : fs::path(input);
    if (!fs::exists(in)) throw IoError("input directory '" + in.string() + "' does not exist");
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(in))
        if (e.is_regular_file() && e.path().filename() == "bundle.json") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    std::vector<ModeRun> runs;
    for (const auto& f : files) {
        ArtifactBundle b = load_bundle(f);
        if (b.info.value("kind", "") == "phase2") runs.push_back(run_from_bundle(b));
    }
    if (runs.empty()) throw IoError("no phase-2 bundles under '" + in.string() + "'");
    // comparison rows are mode-major then seed, like bench
    std::stable_sort(runs.begin(), runs.end(), [](const ModeRun& a, const ModeRun& b) {
        if (a.mode != b.mode) return static_cast<int>(a.mode) < static_cast<int>(b.mode);
        return a.seed < b.seed;
    });
    const fs::path out = in / "report";
    emit_reports(runs, out, cfg.report.svg);
    print_means(runs);
    std::printf("aggregated %zu runs into %s\n", runs.size(), out.string().c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"svlab: spectral adapter lab"};
    app.require_subcommand(1);
    CommonOptions opts;
    std::string report_input;
    std::vector<std::pair<std::string, CLI::App*>> cmds;
    for (const char* name : {"theory", "phase1", "phase2", "bench", "ablate", "probe", "report"}) {
        CLI::App* c = app.add_subcommand(name);
        add_common(c, opts);
        cmds.emplace_back(name, c);
    }
    cmds[0].second->description("synthetic misalignment sweep and theorem verdict table");
    cmds[1].second->description("train SVF vectors on the skill and save bundles");
    cmds[2].second->description("inject facts with one protection mode");
    cmds[3].second->description("compare every protection mode across seeds");
    cmds[4].second->description("ablation grids over lambda_ortho, rank and k");
    cmds[5].second->description("SVF deviation spectra");
    cmds[6].second->description("aggregate CSV/SVG from saved phase-2 bundles");
    cmds[6].second->add_option("input", report_input, "directory searched for bundle.json files (default: output dir)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        for (auto& [name, cmd] : cmds) {
            if (!cmd->parsed()) continue;
            const std::string kind = name == "ablate" ? "ablation" : name;
            const ExperimentConfig cfg = resolve_config(opts, kind);
            if (name == "theory") return cmd_theory(cfg);
            if (name == "phase1") return cmd_phase1(cfg);
            if (name == "phase2") return cmd_phase2(cfg);
            if (name == "bench") return cmd_bench(cfg, !opts.mode.empty());
            if (name == "ablate") return cmd_ablate(cfg);
            if (name == "probe") return cmd_probe(cfg);
            if (name == "report") return cmd_report(cfg, report_input);
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const ContractViolation& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const NumericalFailure& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 3;
    } catch (const IoError& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return 4;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return 4;
    }
    return 2;
}
