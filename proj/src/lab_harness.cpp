#include "svlab/lab_harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

#include "svlab/errors.hpp"

namespace svlab {

using json = nlohmann::json;

namespace {

std::string join_path(const std::string& base, const std::string& key) {
    return base.empty() ? key : base + "." + key;
}

// Reads one JSON object into a struct, remembering which keys were consumed
// so anything left over is reported as unknown.
class ObjectReader {
public:
    ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
    }

    const json* find(const std::string& key) {
        seen_.push_back(key);
        auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }

    std::string path(const std::string& key) const { return join_path(path_, key); }

    template <class T>
    void get(const std::string& key, T& out) {
        if (const json* v = find(key)) read(*v, path(key), out);
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it) {
            if (std::find(seen_.begin(), seen_.end(), it.key()) == seen_.end())
                throw ConfigError(path(it.key()), "unknown field");
        }
    }

    static void read(const json& v, const std::string& p, double& out) {
        if (!v.is_number()) throw ConfigError(p, "expected a number");
        out = v.get<double>();
        if (!std::isfinite(out)) throw ConfigError(p, "must be finite");
    }
    static void read(const json& v, const std::string& p, bool& out) {
        if (!v.is_boolean()) throw ConfigError(p, "expected true or false");
        out = v.get<bool>();
    }
    static void read(const json& v, const std::string& p, std::string& out) {
        if (!v.is_string()) throw ConfigError(p, "expected a string");
        out = v.get<std::string>();
    }
    static void read(const json& v, const std::string& p, int& out) {
        if (!v.is_number_integer()) throw ConfigError(p, "expected an integer");
        const auto x = v.get<std::int64_t>();
        if (x < std::numeric_limits<int>::min() || x > std::numeric_limits<int>::max())
            throw ConfigError(p, "out of range");
        out = static_cast<int>(x);
    }
    static void read(const json& v, const std::string& p, std::uint64_t& out) {
        if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0))
            throw ConfigError(p, "expected a nonnegative integer");
        out = v.get<std::uint64_t>();
    }
    template <class T>
    static void read(const json& v, const std::string& p, std::vector<T>& out) {
        if (!v.is_array()) throw ConfigError(p, "expected an array");
        out.clear();
        for (std::size_t i = 0; i < v.size(); ++i) {
            T x{};
            read(v[i], p + "[" + std::to_string(i) + "]", x);
            out.push_back(x);
        }
    }

private:
    const json& j_;
    std::string path_;
    std::vector<std::string> seen_;
};

std::string_view fact_values_name(FactValues v) {
    switch (v) {
        case FactValues::gaussian: return "gaussian";
        case FactValues::relative: return "relative";
        case FactValues::offset: return "offset";
    }
    return "?";
}

const std::vector<std::string>& experiment_kinds() {
    static const std::vector<std::string> kinds{"probe", "phase1", "phase2", "bench", "theory", "ablation", "report"};
    return kinds;
}

}  // namespace

json config_to_json(const ExperimentConfig& c) {
    json j;
    j["kind"] = c.kind;
    j["root_seed"] = c.root_seed;
    j["seeds"] = c.seeds;
    j["out_dir"] = c.out_dir;
    j["model"] = {{"in_dim", c.model.in_dim},
                  {"hidden", c.model.hidden},
                  {"out_dim", c.model.out_dim},
                  {"input_gain", c.model.input_gain},
                  {"hidden_gain", c.model.hidden_gain},
                  {"sigma_decay", c.model.sigma_decay},
                  {"layer_alignment", c.model.layer_alignment},
                  {"neuron_aligned", c.model.neuron_aligned}};
    j["skill"] = {{"s", c.skill.s},
                  {"delta", c.skill.delta},
                  {"misalign_k", c.skill.misalign_k},
                  {"sample_count", c.skill.sample_count},
                  {"eval_count", c.skill.eval_count},
                  {"noise_scale", c.skill.noise_scale},
                  {"target_scale", c.skill.target_scale},
                  {"answer_readout", c.skill.answer_readout},
                  {"pathway", c.skill.pathway},
                  {"pathway_gain", c.skill.pathway_gain}};
    j["facts"] = {{"count", c.facts.count},
                  {"values", std::string(fact_values_name(c.facts.values))},
                  {"value_scale", c.facts.value_scale},
                  {"anchors", c.facts.anchors},
                  {"anchor_ratio", c.facts.anchor_ratio},
                  {"recall_tol", c.facts.recall_tol}};
    j["phase1"] = {{"lr", c.phase1.lr}, {"steps", c.phase1.steps}};
    j["train"] = {{"lora_rank", c.train.lora_rank},
                  {"alpha", c.train.alpha},
                  {"lambda_ortho", c.train.lambda_ortho},
                  {"k", c.train.k},
                  {"lr", c.train.lr},
                  {"epochs", c.train.epochs},
                  {"batch_size", c.train.batch_size},
                  {"mode", std::string(mode_name(c.train.protection_mode))}};
    j["theory"] = {{"m", c.theory.m},
                   {"n", c.theory.n},
                   {"s", c.theory.s},
                   {"k", c.theory.k},
                   {"delta", c.theory.delta},
                   {"decay_alpha", c.theory.decay_alpha},
                   {"eps_noise", c.theory.eps_noise},
                   {"eta_z", c.theory.eta_z},
                   {"eta", c.theory.eta},
                   {"faith_steps", c.theory.faith_steps},
                   {"faith_lr", c.theory.faith_lr},
                   {"skills", c.theory.skills},
                   {"seeds", c.theory_seeds}};
    j["ablation"] = {{"lambdas", c.ablation.lambdas},
                     {"ranks", c.ablation.ranks},
                     {"ks", c.ablation.ks},
                     {"seeds", c.ablation.seeds}};
    j["report"] = {{"svg", c.report.svg}, {"probe_top", c.report.probe_top}};
    return j;
}

ExperimentConfig config_from_json(const json& j) {
    ExperimentConfig c;
    ObjectReader root(j, "");
    root.get("kind", c.kind);
    root.get("root_seed", c.root_seed);
    std::uint64_t u = c.seeds;
    root.get("seeds", u);
    c.seeds = u;
    root.get("out_dir", c.out_dir);

    // size_t fields go through uint64 so the reader stays small
    auto get_size = [](ObjectReader& r, const char* key, std::size_t& out) {
        std::uint64_t v = out;
        r.get(key, v);
        out = static_cast<std::size_t>(v);
    };
    auto get_sizes = [](ObjectReader& r, const char* key, std::vector<std::size_t>& out) {
        std::vector<std::uint64_t> v(out.begin(), out.end());
        r.get(key, v);
        out.assign(v.begin(), v.end());
    };

    if (const json* m = root.find("model")) {
        ObjectReader r(*m, "model");
        get_size(r, "in_dim", c.model.in_dim);
        get_sizes(r, "hidden", c.model.hidden);
        get_size(r, "out_dim", c.model.out_dim);
        r.get("input_gain", c.model.input_gain);
        r.get("hidden_gain", c.model.hidden_gain);
        r.get("sigma_decay", c.model.sigma_decay);
        r.get("layer_alignment", c.model.layer_alignment);
        r.get("neuron_aligned", c.model.neuron_aligned);
        r.finish();
    }
    if (const json* s = root.find("skill")) {
        ObjectReader r(*s, "skill");
        get_size(r, "s", c.skill.s);
        r.get("delta", c.skill.delta);
        get_size(r, "misalign_k", c.skill.misalign_k);
        get_size(r, "sample_count", c.skill.sample_count);
        get_size(r, "eval_count", c.skill.eval_count);
        r.get("noise_scale", c.skill.noise_scale);
        r.get("target_scale", c.skill.target_scale);
        r.get("answer_readout", c.skill.answer_readout);
        r.get("pathway", c.skill.pathway);
        r.get("pathway_gain", c.skill.pathway_gain);
        r.finish();
    }
    if (const json* f = root.find("facts")) {
        ObjectReader r(*f, "facts");
        get_size(r, "count", c.facts.count);
        std::string values(fact_values_name(c.facts.values));
        r.get("values", values);
        if (values == "gaussian") c.facts.values = FactValues::gaussian;
        else if (values == "relative") c.facts.values = FactValues::relative;
        else if (values == "offset") c.facts.values = FactValues::offset;
        else throw ConfigError("facts.values", "expected gaussian, relative or offset, got '" + values + "'");
        r.get("value_scale", c.facts.value_scale);
        r.get("anchors", c.facts.anchors);
        r.get("anchor_ratio", c.facts.anchor_ratio);
        r.get("recall_tol", c.facts.recall_tol);
        r.finish();
    }
    if (const json* p = root.find("phase1")) {
        ObjectReader r(*p, "phase1");
        r.get("lr", c.phase1.lr);
        r.get("steps", c.phase1.steps);
        r.finish();
    }
    if (const json* t = root.find("train")) {
        ObjectReader r(*t, "train");
        r.get("lora_rank", c.train.lora_rank);
        r.get("alpha", c.train.alpha);
        r.get("lambda_ortho", c.train.lambda_ortho);
        get_size(r, "k", c.train.k);
        r.get("lr", c.train.lr);
        r.get("epochs", c.train.epochs);
        get_size(r, "batch_size", c.train.batch_size);
        std::string mode(mode_name(c.train.protection_mode));
        r.get("mode", mode);
        auto parsed = parse_mode(mode);
        if (!parsed) throw ConfigError("train.mode", "unknown protection mode '" + mode + "'");
        c.train.protection_mode = *parsed;
        r.finish();
    }
    if (const json* t = root.find("theory")) {
        ObjectReader r(*t, "theory");
        get_size(r, "m", c.theory.m);
        get_size(r, "n", c.theory.n);
        get_size(r, "s", c.theory.s);
        get_size(r, "k", c.theory.k);
        r.get("delta", c.theory.delta);
        r.get("decay_alpha", c.theory.decay_alpha);
        r.get("eps_noise", c.theory.eps_noise);
        r.get("eta_z", c.theory.eta_z);
        r.get("eta", c.theory.eta);
        r.get("faith_steps", c.theory.faith_steps);
        r.get("faith_lr", c.theory.faith_lr);
        get_size(r, "skills", c.theory.skills);
        get_size(r, "seeds", c.theory_seeds);
        r.finish();
    }
    if (const json* a = root.find("ablation")) {
        ObjectReader r(*a, "ablation");
        r.get("lambdas", c.ablation.lambdas);
        r.get("ranks", c.ablation.ranks);
        get_sizes(r, "ks", c.ablation.ks);
        get_size(r, "seeds", c.ablation.seeds);
        r.finish();
    }
    if (const json* rep = root.find("report")) {
        ObjectReader r(*rep, "report");
        r.get("svg", c.report.svg);
        get_size(r, "probe_top", c.report.probe_top);
        r.finish();
    }
    root.finish();
    return c;
}

void merge_json(json& base, const json& patch, const std::string& path) {
    if (!patch.is_object()) throw ConfigError(path.empty() ? "<root>" : path, "expected an object");
    for (auto it = patch.begin(); it != patch.end(); ++it) {
        const std::string p = join_path(path, it.key());
        if (it->is_object() && base.contains(it.key()) && base[it.key()].is_object())
            merge_json(base[it.key()], *it, p);
        else
            base[it.key()] = *it;
    }
}

void apply_override(json& j, std::string_view assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string_view::npos || eq == 0)
        throw ConfigError(std::string(assignment), "override must look like key=value");
    const std::string key(assignment.substr(0, eq));
    const std::string text(assignment.substr(eq + 1));
    json value = json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;

    json* node = &j;
    std::size_t start = 0;
    while (true) {
        const auto dot = key.find('.', start);
        const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (part.empty()) throw ConfigError(key, "empty path component");
        if (dot == std::string::npos) {
            (*node)[part] = value;
            return;
        }
        json& child = (*node)[part];
        if (child.is_null()) child = json::object();
        if (!child.is_object()) throw ConfigError(key.substr(0, dot), "is not an object");
        node = &child;
        start = dot + 1;
    }
}

ExperimentConfig preset(std::string_view name) {
    ExperimentConfig c;
    if (name == "canonical") {
        c.model.in_dim = 32;
        c.model.hidden = {128};
        c.model.out_dim = 16;
        c.model.input_gain = 4.0;
        c.model.hidden_gain = 2.0;
        c.model.sigma_decay = 0.5;
        c.model.layer_alignment = 1.0;
        c.skill.s = 2;
        c.skill.delta = 1e-4;
        c.skill.misalign_k = 8;
        c.skill.answer_readout = true;
        c.skill.pathway = true;
        c.facts.count = 50;
        c.facts.values = FactValues::relative;
        c.facts.value_scale = 0.5;
        c.phase1 = {1e-2, 500};
        c.train.lora_rank = 4;
        c.train.alpha = 32.0;
        c.train.lambda_ortho = 10.0;
        c.train.k = 8;
        c.train.lr = 3e-3;
        c.train.epochs = 5000;
        c.train.batch_size = 8;
        c.seeds = 20;
        c.theory_seeds = 100;
        c.ablation.seeds = 10;
        return c;
    }
    if (name == "smoke") {
        c = preset("canonical");
        c.model.in_dim = 16;
        c.model.hidden = {24};
        c.model.out_dim = 8;
        c.skill.misalign_k = 4;
        c.skill.eval_count = 256;
        c.facts.count = 12;
        c.phase1 = {1e-2, 100};
        c.train.k = 4;
        c.train.epochs = 30;
        c.seeds = 2;
        c.theory.m = 24;
        c.theory.n = 24;
        c.theory.k = 4;
        c.theory.skills = 2;
        c.theory.faith_steps = 20;
        c.theory_seeds = 4;
        c.ablation.lambdas = {1.0, 10.0};
        c.ablation.ranks = {2, 4};
        c.ablation.ks = {4};
        c.ablation.seeds = 2;
        return c;
    }
    throw ConfigError("preset", "unknown preset '" + std::string(name) + "'");
}

std::vector<std::string> preset_names() { return {"canonical", "smoke"}; }

void validate(const ExperimentConfig& c) {
    auto require = [](bool ok, const char* field, const std::string& msg) {
        if (!ok) throw ConfigError(field, msg);
    };
    const auto& kinds = experiment_kinds();
    require(std::find(kinds.begin(), kinds.end(), c.kind) != kinds.end(), "kind", "unknown experiment kind '" + c.kind + "'");
    require(c.seeds >= 1, "seeds", "must be >= 1");

    const ModelConfig& m = c.model;
    require(m.in_dim >= 1, "model.in_dim", "must be >= 1");
    require(m.out_dim >= 1, "model.out_dim", "must be >= 1");
    require(!m.hidden.empty() && m.hidden.size() <= 3, "model.hidden", "need 1 to 3 hidden widths (2 to 4 layers)");
    for (std::size_t h : m.hidden) require(h >= 1, "model.hidden", "widths must be >= 1");
    require(m.input_gain > 0.0, "model.input_gain", "must be > 0");
    require(m.hidden_gain > 0.0, "model.hidden_gain", "must be > 0");
    require(m.sigma_decay >= 0.0, "model.sigma_decay", "must be >= 0");
    require(m.layer_alignment >= 0.0 && m.layer_alignment <= 1.0, "model.layer_alignment", "must lie in [0, 1]");

    std::size_t min_rank = std::numeric_limits<std::size_t>::max();
    std::size_t min_dim = min_rank;
    for (auto [out, in] : m.layer_dims()) {
        min_rank = std::min(min_rank, std::min(out, in));
        min_dim = std::min(min_dim, std::min(out, in));
    }
    const std::size_t rank0 = std::min(m.in_dim, m.hidden.front());

    const SkillConfig& s = c.skill;
    require(s.s >= 1 && s.s <= m.in_dim, "skill.s", "must lie in [1, model.in_dim]");
    require(s.delta >= 0.0 && s.delta <= 1.0, "skill.delta", "must lie in [0, 1]");
    require(s.misalign_k <= rank0, "skill.misalign_k", "exceeds the rank of layer 0 (" + std::to_string(rank0) + ")");
    require(s.misalign_k + s.s <= m.in_dim, "skill.misalign_k", "misalign_k + s must not exceed model.in_dim");
    require(s.sample_count >= 1, "skill.sample_count", "must be >= 1");
    require(s.eval_count >= 1, "skill.eval_count", "must be >= 1");
    require(s.noise_scale >= 0.0, "skill.noise_scale", "must be >= 0");
    require(s.pathway_gain >= 0.0, "skill.pathway_gain", "must be >= 0");
    require(!s.pathway || m.layer_alignment == 1.0, "skill.pathway", "needs model.layer_alignment = 1");

    const FactConfig& f = c.facts;
    require(f.count >= 1, "facts.count", "must be >= 1");
    require(f.value_scale >= 0.0, "facts.value_scale", "must be >= 0");
    require(f.anchor_ratio > 0.0, "facts.anchor_ratio", "must be > 0");
    require(f.recall_tol > 0.0, "facts.recall_tol", "must be > 0");

    require(c.phase1.lr > 0.0, "phase1.lr", "must be > 0");
    require(c.phase1.steps >= 0, "phase1.steps", "must be >= 0");

    const TrainConfig& t = c.train;
    require(t.lora_rank >= 1 && static_cast<std::size_t>(t.lora_rank) <= min_dim, "train.lora_rank",
            "must lie in [1, " + std::to_string(min_dim) + "]");
    require(t.alpha > 0.0, "train.alpha", "must be > 0");
    require(t.lambda_ortho >= 0.0, "train.lambda_ortho", "must be >= 0");
    require(t.k >= 1 && t.k <= min_rank, "train.k",
            "k = " + std::to_string(t.k) + " exceeds the smallest layer rank " + std::to_string(min_rank));
    require(t.lr > 0.0, "train.lr", "must be > 0");
    require(t.epochs >= 0, "train.epochs", "must be >= 0");
    require(t.batch_size >= 1, "train.batch_size", "must be >= 1");

    const TheoryConfig& th = c.theory;
    require(th.m >= 1, "theory.m", "must be >= 1");
    require(th.n >= 1, "theory.n", "must be >= 1");
    require(th.k >= 1 && th.k < std::min(th.m, th.n), "theory.k", "must lie in [1, min(m, n))");
    require(th.s >= 1 && th.s <= th.n - th.k, "theory.s", "must lie in [1, n - k]");
    require(th.delta >= 0.0 && th.delta <= 1.0, "theory.delta", "must lie in [0, 1]");
    require(th.decay_alpha >= 0.0, "theory.decay_alpha", "must be >= 0");
    require(th.eps_noise >= 0.0, "theory.eps_noise", "must be >= 0");
    require(th.eta_z > 0.0, "theory.eta_z", "must be > 0");
    require(th.eta > 0.0, "theory.eta", "must be > 0");
    require(th.faith_steps >= 0, "theory.faith_steps", "must be >= 0");
    require(th.faith_lr > 0.0, "theory.faith_lr", "must be > 0");
    require(th.skills >= 1, "theory.skills", "must be >= 1");
    require(c.theory_seeds >= 1, "theory.seeds", "must be >= 1");

    require(!c.ablation.lambdas.empty(), "ablation.lambdas", "must be nonempty");
    for (double l : c.ablation.lambdas) require(l >= 0.0, "ablation.lambdas", "entries must be >= 0");
    require(!c.ablation.ranks.empty(), "ablation.ranks", "must be nonempty");
    for (int r : c.ablation.ranks)
        require(r >= 1 && static_cast<std::size_t>(r) <= min_dim, "ablation.ranks", "entries must lie in [1, " + std::to_string(min_dim) + "]");
    require(!c.ablation.ks.empty(), "ablation.ks", "must be nonempty");
    for (std::size_t k : c.ablation.ks)
        require(k >= 1 && k <= min_rank, "ablation.ks", "entries must lie in [1, " + std::to_string(min_rank) + "]");
    require(c.ablation.seeds >= 1, "ablation.seeds", "must be >= 1");
    require(c.report.probe_top >= 1, "report.probe_top", "must be >= 1");
}

ExperimentConfig load_config_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file '" + path.string() + "'");
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("<file>", path.string() + ": " + e.what());
    }
    json base = config_to_json(ExperimentConfig{});
    merge_json(base, j);
    return config_from_json(base);
}

std::filesystem::path resolve_out_dir(const ExperimentConfig& cfg) {
    if (!cfg.out_dir.empty()) return cfg.out_dir;
    if (const char* env = std::getenv(std::string(kOutDirEnv).c_str()); env && *env) return env;
    return "svlab_out";
}

// ---------------------------------------------------------------- persistence

namespace {

std::string format_exact(double v) {
    if (std::isnan(v)) return "\"nan\"";
    if (std::isinf(v)) return v > 0 ? "\"inf\"" : "\"-inf\"";
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

bool is_scalar(const json& j) { return !j.is_object() && !j.is_array(); }

void dump_exact(const json& j, int indent, int depth, std::string& out) {
    const std::string pad(static_cast<std::size_t>(indent * (depth + 1)), ' ');
    const std::string close_pad(static_cast<std::size_t>(indent * depth), ' ');
    switch (j.type()) {
        case json::value_t::object: {
            if (j.empty()) {
                out += "{}";
                return;
            }
            out += "{\n";
            bool first = true;
            for (auto it = j.begin(); it != j.end(); ++it) {
                if (!first) out += ",\n";
                first = false;
                out += pad;
                out += json(it.key()).dump();
                out += ": ";
                dump_exact(*it, indent, depth + 1, out);
            }
            out += "\n" + close_pad + "}";
            return;
        }
        case json::value_t::array: {
            if (j.empty()) {
                out += "[]";
                return;
            }
            const bool flat = std::all_of(j.begin(), j.end(), is_scalar);
            if (flat) {
                out += "[";
                for (std::size_t i = 0; i < j.size(); ++i) {
                    if (i) out += ", ";
                    dump_exact(j[i], indent, depth + 1, out);
                }
                out += "]";
                return;
            }
            out += "[\n";
            for (std::size_t i = 0; i < j.size(); ++i) {
                if (i) out += ",\n";
                out += pad;
                dump_exact(j[i], indent, depth + 1, out);
            }
            out += "\n" + close_pad + "]";
            return;
        }
        case json::value_t::number_float:
            out += format_exact(j.get<double>());
            return;
        default:
            out += j.dump();
            return;
    }
}

json vector_json(const RealVector& v) {
    json a = json::array();
    for (double x : v) {
        if (std::isfinite(x)) a.push_back(x);
        else a.push_back(std::isnan(x) ? "nan" : (x > 0 ? "inf" : "-inf"));
    }
    return a;
}

json matrix_json(const DenseMatrix& m) {
    json rows = json::array();
    for (std::size_t i = 0; i < m.rows(); ++i) rows.push_back(vector_json(RealVector(m.row(i).begin(), m.row(i).end())));
    return {{"shape", {m.rows(), m.cols()}}, {"data", rows}};
}

double number_from(const json& v, const std::string& where) {
    if (v.is_number()) return v.get<double>();
    if (v.is_string()) {
        const auto s = v.get<std::string>();
        if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
        if (s == "inf") return std::numeric_limits<double>::infinity();
        if (s == "-inf") return -std::numeric_limits<double>::infinity();
    }
    throw IoError("bundle payload '" + where + "' holds a non-numeric entry");
}

const json& member(const json& j, const std::string& key, const std::string& where) {
    if (!j.is_object() || !j.contains(key)) throw IoError("bundle payload '" + join_path(where, key) + "' is missing");
    return j.at(key);
}

RealVector vector_from(const json& j, const std::string& where) {
    if (!j.is_array()) throw IoError("bundle payload '" + where + "' is not an array");
    RealVector v;
    v.reserve(j.size());
    for (std::size_t i = 0; i < j.size(); ++i) v.push_back(number_from(j[i], where));
    return v;
}

DenseMatrix matrix_from(const json& j, const std::string& where) {
    const json& shape = member(j, "shape", where);
    const json& data = member(j, "data", where);
    if (!shape.is_array() || shape.size() != 2 || !shape[0].is_number_unsigned() || !shape[1].is_number_unsigned())
        throw IoError("bundle payload '" + where + ".shape' is malformed");
    const auto rows = shape[0].get<std::size_t>();
    const auto cols = shape[1].get<std::size_t>();
    if (!data.is_array() || data.size() != rows) throw IoError("bundle payload '" + where + ".data' does not match its shape");
    DenseMatrix m(rows, cols);
    for (std::size_t i = 0; i < rows; ++i) {
        RealVector r = vector_from(data[i], where + ".data");
        if (r.size() != cols) throw IoError("bundle payload '" + where + ".data' does not match its shape");
        std::copy(r.begin(), r.end(), m.row(i).begin());
    }
    return m;
}

std::vector<std::size_t> indices_from(const json& j, const std::string& where) {
    if (!j.is_array()) throw IoError("bundle payload '" + where + "' is not an array");
    std::vector<std::size_t> out;
    for (const auto& v : j) {
        if (!v.is_number_unsigned()) throw IoError("bundle payload '" + where + "' holds a non-index entry");
        out.push_back(v.get<std::size_t>());
    }
    return out;
}

}  // namespace

const MetricTable* ArtifactBundle::table(std::string_view name) const {
    for (const auto& t : metrics)
        if (t.name == name) return &t;
    return nullptr;
}

std::string dump_json_exact(const json& j, int indent) {
    std::string out;
    dump_exact(j, indent, 0, out);
    out += "\n";
    return out;
}

std::string bundle_to_text(const ArtifactBundle& b) {
    json j;
    j["format"] = b.format;
    j["library_version"] = b.library_version;
    j["root_seed"] = b.root_seed;
    j["config"] = b.config;
    j["info"] = b.info;
    json layers = json::array();
    for (const auto& l : b.layers) {
        layers.push_back({{"base", {{"u", matrix_json(l.base.u)}, {"sigma", vector_json(l.base.sigma)}, {"vt", matrix_json(l.base.vt)}}},
                          {"z", vector_json(l.svf.z)},
                          {"lora", {{"alpha", l.lora.alpha}, {"b", matrix_json(l.lora.b)}, {"a", matrix_json(l.lora.a)}}}});
    }
    j["layers"] = layers;
    json crit = json::array();
    for (const auto& c : b.critical) {
        crit.push_back({{"layer", c.source_layer},
                        {"indices", c.indices},
                        {"u_crit", matrix_json(c.u_crit)},
                        {"v_crit", matrix_json(c.v_crit)}});
    }
    j["critical"] = crit;
    json metrics = json::array();
    for (const auto& t : b.metrics) {
        json rows = json::array();
        for (const auto& r : t.rows) rows.push_back(vector_json(r));
        metrics.push_back({{"name", t.name}, {"columns", t.columns}, {"rows", rows}});
    }
    j["metrics"] = metrics;
    return dump_json_exact(j);
}

ArtifactBundle bundle_from_text(std::string_view text) {
    json j = json::parse(text.begin(), text.end(), nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw IoError("bundle manifest is not valid structured text");
    ArtifactBundle b;
    const json& format = member(j, "format", "");
    if (!format.is_string() || format.get<std::string>() != kBundleFormat) {
        throw IoError("unsupported bundle format version '" + (format.is_string() ? format.get<std::string>() : format.dump()) +
                      "' (expected '" + std::string(kBundleFormat) + "')");
    }
    b.format = format.get<std::string>();
    const json& version = member(j, "library_version", "");
    if (!version.is_string()) throw IoError("bundle payload 'library_version' is malformed");
    b.library_version = version.get<std::string>();
    const json& seed = member(j, "root_seed", "");
    if (!seed.is_number_unsigned()) throw IoError("bundle payload 'root_seed' is malformed");
    b.root_seed = seed.get<std::uint64_t>();
    b.config = member(j, "config", "");
    b.info = j.value("info", json::object());

    const json& layers = member(j, "layers", "");
    if (!layers.is_array()) throw IoError("bundle payload 'layers' is not an array");
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const std::string w = "layers[" + std::to_string(l) + "]";
        AdaptedLayer layer;
        const json& base = member(layers[l], "base", w);
        layer.base.u = matrix_from(member(base, "u", w + ".base"), w + ".base.u");
        layer.base.sigma = vector_from(member(base, "sigma", w + ".base"), w + ".base.sigma");
        layer.base.vt = matrix_from(member(base, "vt", w + ".base"), w + ".base.vt");
        if (layer.base.u.cols() != layer.base.rank() || layer.base.vt.rows() != layer.base.rank())
            throw IoError("bundle payload '" + w + ".base' has inconsistent factor shapes");
        layer.svf.z = vector_from(member(layers[l], "z", w), w + ".z");
        if (layer.svf.z.size() != layer.base.rank()) throw IoError("bundle payload '" + w + ".z' has the wrong length");
        const json& lora = member(layers[l], "lora", w);
        layer.lora.alpha = number_from(member(lora, "alpha", w + ".lora"), w + ".lora.alpha");
        layer.lora.b = matrix_from(member(lora, "b", w + ".lora"), w + ".lora.b");
        layer.lora.a = matrix_from(member(lora, "a", w + ".lora"), w + ".lora.a");
        b.layers.push_back(std::move(layer));
    }
    const json& crit = member(j, "critical", "");
    if (!crit.is_array()) throw IoError("bundle payload 'critical' is not an array");
    for (std::size_t i = 0; i < crit.size(); ++i) {
        const std::string w = "critical[" + std::to_string(i) + "]";
        CriticalSubspace c;
        const json& layer = member(crit[i], "layer", w);
        if (!layer.is_number_unsigned()) throw IoError("bundle payload '" + w + ".layer' is malformed");
        c.source_layer = layer.get<std::size_t>();
        c.indices = indices_from(member(crit[i], "indices", w), w + ".indices");
        c.u_crit = matrix_from(member(crit[i], "u_crit", w), w + ".u_crit");
        c.v_crit = matrix_from(member(crit[i], "v_crit", w), w + ".v_crit");
        b.critical.push_back(std::move(c));
    }
    const json& metrics = member(j, "metrics", "");
    if (!metrics.is_array()) throw IoError("bundle payload 'metrics' is not an array");
    for (std::size_t i = 0; i < metrics.size(); ++i) {
        const std::string w = "metrics[" + std::to_string(i) + "]";
        MetricTable t;
        const json& name = member(metrics[i], "name", w);
        const json& cols = member(metrics[i], "columns", w);
        if (!name.is_string() || !cols.is_array()) throw IoError("bundle payload '" + w + "' is malformed");
        t.name = name.get<std::string>();
        for (const auto& c : cols) {
            if (!c.is_string()) throw IoError("bundle payload '" + w + ".columns' is malformed");
            t.columns.push_back(c.get<std::string>());
        }
        const json& rows = member(metrics[i], "rows", w);
        if (!rows.is_array()) throw IoError("bundle payload '" + w + ".rows' is not an array");
        for (const auto& r : rows) {
            t.rows.push_back(vector_from(r, w + ".rows"));
            if (t.rows.back().size() != t.columns.size()) throw IoError("bundle payload '" + w + ".rows' has a ragged row");
        }
        b.metrics.push_back(std::move(t));
    }
    return b;
}

void write_text_file(const std::filesystem::path& path, std::string_view text) {
    std::error_code ec;
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create directory '" + path.parent_path().string() + "': " + ec.message());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw IoError("write to '" + path.string() + "' failed");
}

void save_bundle(const ArtifactBundle& bundle, const std::filesystem::path& path) {
    write_text_file(path, bundle_to_text(bundle));
}

ArtifactBundle load_bundle(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("bundle '" + path.string() + "' is missing or unreadable");
    std::stringstream ss;
    ss << in.rdbuf();
    try {
        return bundle_from_text(ss.str());
    } catch (const IoError& e) {
        throw IoError(path.string() + ": " + e.what());
    }
}

// ---------------------------------------------------------------- runs

std::uint64_t seed_at(const ExperimentConfig& cfg, std::size_t i) { return cfg.root_seed + i; }

SeedContext prepare_seed(const ExperimentConfig& cfg, std::uint64_t seed) {
    SeedContext ctx;
    ctx.seed = seed;
    ctx.model = build_toy_model(cfg.model, seed);
    ctx.task = make_skill_task(ctx.model, cfg.skill, seed);
    Rng train_rng(seed, streams::skill_train);
    const Samples train = ctx.task.draw(cfg.skill.sample_count, train_rng);
    const DenseMatrix* readout = ctx.task.readout.empty() ? nullptr : &ctx.task.readout;
    ctx.phase1 = phase1_train_svf(ctx.model, train, cfg.phase1.lr, cfg.phase1.steps, cfg.train.k, readout);
    if (cfg.phase1.steps > 0 && !ctx.phase1.converged) {
        throw NumericalFailure("phase 1 did not reduce the skill loss for seed " + std::to_string(seed) + " (" +
                               std::to_string(ctx.phase1.initial_loss) + " -> " + std::to_string(ctx.phase1.final_loss) + ")");
    }
    switch (cfg.facts.values) {
        case FactValues::gaussian:
            ctx.facts = make_fact_set(cfg.facts.count, ctx.model.in_dim(), ctx.model.out_dim(), cfg.facts.value_scale, seed);
            break;
        case FactValues::relative:
            ctx.facts = make_relative_fact_set(ctx.model, cfg.facts.count, cfg.facts.value_scale, seed);
            break;
        case FactValues::offset:
            ctx.facts = make_offset_fact_set(ctx.model, cfg.facts.count, cfg.facts.value_scale, seed);
            break;
    }
    if (cfg.facts.anchors) append_anchor_facts(ctx.facts, ctx.model, cfg.facts.anchor_ratio, seed);
    return ctx;
}

namespace {

std::vector<CriticalSubspace> svf_sets_for_k(const SeedContext& ctx, std::size_t k) {
    if (!ctx.phase1.crit.empty() && ctx.phase1.crit.front().k() == k) return ctx.phase1.crit;
    std::vector<CriticalSubspace> out;
    for (std::size_t l = 0; l < ctx.model.layers.size(); ++l)
        out.push_back(build_critical_subspace(ctx.model.layers[l].base, ctx.model.layers[l].svf, k, l));
    return out;
}

std::vector<IndexSet> index_sets(const std::vector<CriticalSubspace>& subs) {
    std::vector<IndexSet> out;
    for (const auto& s : subs) out.push_back(s.indices);
    return out;
}

double mean_of(const std::vector<double>& v) {
    return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

ModeRun run_mode(const SeedContext& ctx, const ExperimentConfig& cfg, const TrainConfig& train) {
    ModeRun run;
    run.mode = train.protection_mode;
    run.seed = ctx.seed;
    run.train = train;
    run.train.seed = ctx.seed;
    run.model = ctx.model;
    const auto svf_sets = svf_sets_for_k(ctx, run.train.k);
    run.metrics = phase2_inject(run.model, ctx.facts, run.train, svf_sets, SkillProbe{&ctx.task, cfg.skill.eval_count, ctx.seed},
                                cfg.facts.recall_tol);
    run.protected_sets = protection_subspaces(ctx.model, run.mode, svf_sets, run.train.k, ctx.seed);
    run.overlap = layered_overlap(index_sets(run.protected_sets), index_sets(svf_sets));
    return run;
}

ModeRun run_mode(const SeedContext& ctx, const ExperimentConfig& cfg, ProtectionMode mode) {
    TrainConfig t = cfg.train;
    t.protection_mode = mode;
    return run_mode(ctx, cfg, t);
}

std::vector<ModeRun> run_bench(const ExperimentConfig& cfg, const std::vector<ProtectionMode>& modes) {
    std::vector<std::vector<ModeRun>> by_mode(modes.size());
    for (std::size_t i = 0; i < cfg.seeds; ++i) {
        const SeedContext ctx = prepare_seed(cfg, seed_at(cfg, i));
        for (std::size_t m = 0; m < modes.size(); ++m) by_mode[m].push_back(run_mode(ctx, cfg, modes[m]));
    }
    std::vector<ModeRun> out;
    for (auto& v : by_mode)
        for (auto& r : v) out.push_back(std::move(r));
    return out;
}

double AblationCell::mean_interference() const { return mean_of(interference); }
double AblationCell::mean_recall() const { return mean_of(recall); }
double AblationCell::mean_degradation() const { return mean_of(degradation); }

std::vector<AblationCell> run_ablation(const ExperimentConfig& cfg) {
    std::vector<AblationCell> cells;
    for (double v : cfg.ablation.lambdas) cells.push_back({"lambda_ortho", v, {}, {}, {}});
    for (int v : cfg.ablation.ranks) cells.push_back({"lora_rank", static_cast<double>(v), {}, {}, {}});
    for (std::size_t v : cfg.ablation.ks) cells.push_back({"k", static_cast<double>(v), {}, {}, {}});

    for (std::size_t i = 0; i < cfg.ablation.seeds; ++i) {
        const SeedContext ctx = prepare_seed(cfg, seed_at(cfg, i));
        for (AblationCell& cell : cells) {
            TrainConfig t = cfg.train;
            t.protection_mode = ProtectionMode::svf_guided;
            if (cell.param == "lambda_ortho") t.lambda_ortho = cell.value;
            else if (cell.param == "lora_rank") t.lora_rank = static_cast<int>(cell.value);
            else t.k = static_cast<std::size_t>(cell.value);
            const ModeRun r = run_mode(ctx, cfg, t);
            cell.interference.push_back(r.metrics.final_interference());
            cell.recall.push_back(r.metrics.fact_recall);
            cell.degradation.push_back(r.metrics.skill_degradation());
        }
    }
    return cells;
}

std::vector<TheorySeedRow> run_theory(const ExperimentConfig& cfg) {
    std::vector<TheorySeedRow> rows;
    for (std::size_t i = 0; i < cfg.theory_seeds; ++i) rows.push_back(run_theory_seed(cfg.theory, seed_at(cfg, i)));
    return rows;
}

ArtifactBundle make_phase1_bundle(const ExperimentConfig& cfg, const SeedContext& ctx) {
    ArtifactBundle b;
    b.root_seed = ctx.seed;
    b.config = config_to_json(cfg);
    b.info = {{"kind", "phase1"}, {"seed", ctx.seed}};
    b.layers = ctx.model.layers;
    b.critical = ctx.phase1.crit;
    b.metrics.push_back({"phase1",
                         {"initial_loss", "final_loss", "steps", "converged"},
                         {{ctx.phase1.initial_loss, ctx.phase1.final_loss, static_cast<double>(ctx.phase1.steps),
                           ctx.phase1.converged ? 1.0 : 0.0}}});
    return b;
}

ArtifactBundle make_run_bundle(const ExperimentConfig& cfg, const ModeRun& run) {
    ArtifactBundle b;
    b.root_seed = run.seed;
    b.config = config_to_json(cfg);
    b.info = {{"kind", "phase2"}, {"seed", run.seed}, {"mode", std::string(mode_name(run.mode))},
              {"lambda_ortho", run.train.lambda_ortho}, {"lora_rank", run.train.lora_rank}, {"k", run.train.k}};
    b.layers = run.model.layers;
    b.critical = run.protected_sets;

    MetricTable epochs{"epochs", {"epoch", "sft_loss", "interference"}, {}};
    const std::size_t layers = run.model.layers.size();
    for (std::size_t l = 0; l < layers; ++l) epochs.columns.push_back("ortho_l" + std::to_string(l));
    for (const auto& e : run.metrics.epochs) {
        std::vector<double> row{static_cast<double>(e.epoch), e.sft_loss, e.interference};
        for (std::size_t l = 0; l < layers; ++l) row.push_back(l < e.ortho_loss.size() ? e.ortho_loss[l] : 0.0);
        epochs.rows.push_back(std::move(row));
    }
    b.metrics.push_back(std::move(epochs));

    MetricTable summary{"summary", {"skill_before", "skill_after", "recall", "overlap", "jaccard"}, {}};
    summary.rows.push_back({run.metrics.skill_loss_before, run.metrics.skill_loss_after, run.metrics.fact_recall,
                            run.overlap.micro.overlap, run.overlap.micro.jaccard});
    b.metrics.push_back(std::move(summary));

    MetricTable per_layer{"overlap_per_layer", {"layer", "overlap", "jaccard"}, {}};
    for (std::size_t l = 0; l < run.overlap.per_layer.size(); ++l)
        per_layer.rows.push_back({static_cast<double>(l), run.overlap.per_layer[l].overlap, run.overlap.per_layer[l].jaccard});
    b.metrics.push_back(std::move(per_layer));
    return b;
}

ModeRun run_from_bundle(const ArtifactBundle& b) {
    if (b.info.value("kind", "") != "phase2") throw IoError("bundle does not hold a phase-2 run");
    ModeRun run;
    const auto mode = parse_mode(b.info.value("mode", ""));
    if (!mode) throw IoError("bundle payload 'info.mode' is missing or unknown");
    run.mode = *mode;
    run.seed = b.info.value("seed", std::uint64_t{0});
    run.train.protection_mode = run.mode;
    run.train.seed = run.seed;
    run.train.lambda_ortho = b.info.value("lambda_ortho", run.train.lambda_ortho);
    run.train.lora_rank = b.info.value("lora_rank", run.train.lora_rank);
    run.train.k = b.info.value("k", run.train.k);
    run.model.layers = b.layers;
    run.protected_sets = b.critical;

    const MetricTable* epochs = b.table("epochs");
    const MetricTable* summary = b.table("summary");
    if (!epochs || !summary || summary->rows.size() != 1 || epochs->columns.size() < 3)
        throw IoError("bundle payload 'metrics' lacks the epochs or summary table");
    for (const auto& r : epochs->rows) {
        EpochMetrics e;
        e.epoch = static_cast<int>(r[0]);
        e.sft_loss = r[1];
        e.interference = r[2];
        e.ortho_loss.assign(r.begin() + 3, r.end());
        run.metrics.epochs.push_back(std::move(e));
    }
    const auto& s = summary->rows.front();
    run.metrics.skill_loss_before = s[0];
    run.metrics.skill_loss_after = s[1];
    run.metrics.fact_recall = s[2];
    run.overlap.micro = {s[3], s[4]};
    if (const MetricTable* pl = b.table("overlap_per_layer"))
        for (const auto& r : pl->rows) run.overlap.per_layer.push_back({r[1], r[2]});
    return run;
}

// ---------------------------------------------------------------- reports

std::string csv_escape(std::string_view field) {
    if (field.find_first_of(",\"\n\r") == std::string_view::npos) return std::string(field);
    std::string out = "\"";
    for (char c : field) {
        if (c == '"') out += '"';
        out += c;
    }
    out += '"';
    return out;
}

std::string format_number(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

std::string to_csv(const CsvTable& t) {
    std::string out;
    for (const auto& c : t.comments) out += "# " + c + "\n";
    auto line = [&out](const std::vector<std::string>& fields) {
        for (std::size_t i = 0; i < fields.size(); ++i) {
            if (i) out += ',';
            out += csv_escape(fields[i]);
        }
        out += '\n';
    };
    line(t.header);
    for (const auto& r : t.rows) line(r);
    return out;
}

namespace {

constexpr double kW = 720, kH = 440, kLeft = 80, kRight = 170, kTop = 40, kBottom = 60;
constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};

std::string xml_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

std::string fmt2(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

struct Frame {
    double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
    bool log_y = false;
    double ty(double y) const { return log_y ? std::log10(std::max(y, 1e-300)) : y; }
    double px(double x) const { return kLeft + (x - x0) / (x1 - x0) * (kW - kLeft - kRight); }
    double py(double y) const {
        const double t = log_y && !(y > 0.0) ? y0 : ty(y);
        return kH - kBottom - (t - y0) / (y1 - y0) * (kH - kTop - kBottom);
    }
};

Frame frame_for(const std::vector<Series>& series, bool log_y) {
    Frame f;
    f.log_y = log_y;
    double xlo = INFINITY, xhi = -INFINITY, ylo = INFINITY, yhi = -INFINITY;
    for (const auto& s : series) {
        for (double x : s.x) {
            if (std::isfinite(x)) xlo = std::min(xlo, x), xhi = std::max(xhi, x);
        }
        for (double y : s.y) {
            if (log_y && !(y > 0.0)) continue;
            const double t = f.ty(y);
            if (std::isfinite(t)) ylo = std::min(ylo, t), yhi = std::max(yhi, t);
        }
    }
    if (!(xlo <= xhi)) xlo = 0, xhi = 1;
    if (!(ylo <= yhi)) ylo = 0, yhi = 1;
    if (xhi == xlo) xhi = xlo + 1;
    if (yhi == ylo) yhi = ylo + 1;
    f.x0 = xlo, f.x1 = xhi, f.y0 = ylo, f.y1 = yhi;
    return f;
}

std::string svg_frame(const std::string& title, const std::string& xl, const std::string& yl, const Frame& f,
                      const std::vector<Series>& series) {
    std::string o;
    o += "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
    o += "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" + fmt2(kW) + "\" height=\"" + fmt2(kH) +
         "\" viewBox=\"0 0 " + fmt2(kW) + " " + fmt2(kH) + "\">\n";
    o += "<rect x=\"0\" y=\"0\" width=\"" + fmt2(kW) + "\" height=\"" + fmt2(kH) + "\" fill=\"white\"/>\n";
    o += "<text x=\"" + fmt2(kW / 2) + "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">" +
         xml_escape(title) + "</text>\n";
    const double bx = kLeft, by = kH - kBottom, tx = kW - kRight, topy = kTop;
    o += "<line x1=\"" + fmt2(bx) + "\" y1=\"" + fmt2(by) + "\" x2=\"" + fmt2(tx) + "\" y2=\"" + fmt2(by) + "\" stroke=\"black\"/>\n";
    o += "<line x1=\"" + fmt2(bx) + "\" y1=\"" + fmt2(by) + "\" x2=\"" + fmt2(bx) + "\" y2=\"" + fmt2(topy) + "\" stroke=\"black\"/>\n";
    auto label = [&](double x, double y, const std::string& s, const char* anchor) {
        o += "<text x=\"" + fmt2(x) + "\" y=\"" + fmt2(y) + "\" text-anchor=\"" + anchor +
             "\" font-family=\"sans-serif\" font-size=\"11\">" + xml_escape(s) + "</text>\n";
    };
    label(bx, by + 16, format_number(f.x0), "start");
    label(tx, by + 16, format_number(f.x1), "end");
    const std::string ylo = f.log_y ? "1e" + format_number(f.y0) : format_number(f.y0);
    const std::string yhi = f.log_y ? "1e" + format_number(f.y1) : format_number(f.y1);
    label(bx - 6, by, ylo, "end");
    label(bx - 6, topy + 8, yhi, "end");
    label((bx + tx) / 2, kH - 20, xl, "middle");
    o += "<text x=\"18\" y=\"" + fmt2((by + topy) / 2) + "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" transform=\"rotate(-90 18 " +
         fmt2((by + topy) / 2) + ")\">" + xml_escape(f.log_y ? yl + " (log10)" : yl) + "</text>\n";
    for (std::size_t i = 0; i < series.size(); ++i) {
        const double ly = topy + 14.0 * static_cast<double>(i);
        const char* color = kPalette[i % std::size(kPalette)];
        o += "<rect x=\"" + fmt2(tx + 12) + "\" y=\"" + fmt2(ly - 8) + "\" width=\"10\" height=\"10\" fill=\"" + color + "\"/>\n";
        label(tx + 26, ly + 1, series[i].name, "start");
    }
    return o;
}

}  // namespace

std::string svg_line_chart(const std::string& title, const std::string& x_label, const std::string& y_label,
                           const std::vector<Series>& series, bool log_y) {
    const Frame f = frame_for(series, log_y);
    std::string o = svg_frame(title, x_label, y_label, f, series);
    for (std::size_t i = 0; i < series.size(); ++i) {
        const Series& s = series[i];
        if (s.x.size() != s.y.size()) throw ContractViolation("svg_line_chart: x and y lengths differ");
        o += "<polyline fill=\"none\" stroke=\"";
        o += kPalette[i % std::size(kPalette)];
        o += "\" stroke-width=\"1.5\" points=\"";
        for (std::size_t p = 0; p < s.x.size(); ++p) {
            if (p) o += ' ';
            o += fmt2(f.px(s.x[p])) + "," + fmt2(f.py(s.y[p]));
        }
        o += "\"/>\n";
    }
    o += "</svg>\n";
    return o;
}

std::string svg_scatter_chart(const std::string& title, const std::string& x_label, const std::string& y_label,
                              const std::vector<Series>& series, bool log_y) {
    const Frame f = frame_for(series, log_y);
    std::string o = svg_frame(title, x_label, y_label, f, series);
    for (std::size_t i = 0; i < series.size(); ++i) {
        const Series& s = series[i];
        if (s.x.size() != s.y.size()) throw ContractViolation("svg_scatter_chart: x and y lengths differ");
        for (std::size_t p = 0; p < s.x.size(); ++p) {
            o += "<circle cx=\"" + fmt2(f.px(s.x[p])) + "\" cy=\"" + fmt2(f.py(s.y[p])) + "\" r=\"2.5\" fill=\"" +
                 kPalette[i % std::size(kPalette)] + "\"/>\n";
        }
    }
    o += "</svg>\n";
    return o;
}

CsvTable probe_table(const std::vector<SeedContext>& contexts, std::size_t k, std::size_t top) {
    if (contexts.empty()) throw ContractViolation("probe report: no runs");
    CsvTable t;
    t.comments = {"probe spectra: per layer, components sorted by SVF deviation (sorted scaling-magnitude spectrum)",
                  "seed: run seed",
                  "layer: layer index, input side first",
                  "position: place in the descending |z_i - 1| order (elbow-and-tail shape)",
                  "deviation: |z_i - 1| after skill training",
                  "sigma_rank: index i of the component in descending base singular-value order",
                  "sigma: base singular value sigma_i",
                  "critical: 1 when the component is in the protected top-k set (k = " + std::to_string(k) + ")"};
    t.header = {"seed", "layer", "position", "deviation", "sigma_rank", "sigma", "critical"};
    for (const auto& ctx : contexts) {
        for (std::size_t l = 0; l < ctx.model.layers.size(); ++l) {
            const auto& layer = ctx.model.layers[l];
            const std::size_t r = layer.svf.z.size();
            std::vector<std::size_t> order(r);
            std::iota(order.begin(), order.end(), 0);
            std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
                return std::abs(layer.svf.z[a] - 1.0) > std::abs(layer.svf.z[b] - 1.0);
            });
            const IndexSet crit = critical_indices(layer.svf, std::min(k, r));
            for (std::size_t p = 0; p < std::min(top, r); ++p) {
                const std::size_t i = order[p];
                const bool is_crit = std::binary_search(crit.begin(), crit.end(), i);
                t.rows.push_back({std::to_string(ctx.seed), std::to_string(l), std::to_string(p),
                                  format_number(std::abs(layer.svf.z[i] - 1.0)), std::to_string(i),
                                  format_number(layer.base.sigma[i]), is_crit ? "1" : "0"});
            }
        }
    }
    return t;
}

namespace {

std::vector<std::string> run_labels(const std::vector<const ModeRun*>& runs) {
    std::map<std::string, int> counts;
    for (const ModeRun* r : runs) ++counts[std::string(mode_name(r->mode))];
    std::vector<std::string> labels;
    for (const ModeRun* r : runs) {
        std::string name(mode_name(r->mode));
        if (counts[name] > 1) name += "_s" + std::to_string(r->seed);
        labels.push_back(name);
    }
    return labels;
}

}  // namespace

CsvTable dynamics_table(const std::vector<const ModeRun*>& runs) {
    if (runs.empty()) throw ContractViolation("dynamics report: no runs");
    const std::size_t n = runs.front()->metrics.epochs.size();
    for (const ModeRun* r : runs)
        if (r->metrics.epochs.size() != n) throw ContractViolation("dynamics report: runs differ in epoch count");
    const auto labels = run_labels(runs);
    CsvTable t;
    t.comments = {"training dynamics, one row per epoch (loss and interference curves, constrained vs unconstrained)",
                  "epoch: epoch index, 0-based",
                  "sft_<run>: mean squared fact-reconstruction error after the epoch",
                  "interference_<run>: sum over layers of ||dW^T u_i||^2 over the SVF-guided protected components"};
    t.header = {"epoch"};
    for (const auto& l : labels) {
        t.header.push_back("sft_" + l);
        t.header.push_back("interference_" + l);
    }
    for (std::size_t e = 0; e < n; ++e) {
        std::vector<std::string> row{std::to_string(runs.front()->metrics.epochs[e].epoch)};
        for (const ModeRun* r : runs) {
            row.push_back(format_number(r->metrics.epochs[e].sft_loss));
            row.push_back(format_number(r->metrics.epochs[e].interference));
        }
        t.rows.push_back(std::move(row));
    }
    return t;
}

CsvTable comparison_table(const std::vector<ModeRun>& runs) {
    if (runs.empty()) throw ContractViolation("comparison report: no runs");
    CsvTable t;
    t.comments = {"protection-mode comparison, one row per (mode, seed) and a seed-mean row per mode",
                  "mode: protection strategy used while injecting facts",
                  "seed: run seed, or 'mean' for the average over seeds",
                  "recall: fraction of facts answered within the relative tolerance",
                  "skill_before / skill_after: skill MSE before and after fact injection",
                  "skill_degradation: skill_after - skill_before",
                  "interference: final sum of ||dW^T u_i||^2 over the SVF-guided components",
                  "overlap: |protected cap svf| / k pooled over layers, against the SVF-guided sets",
                  "jaccard: |protected cap svf| / |protected cup svf| pooled over layers"};
    t.header = {"mode", "seed", "recall", "skill_before", "skill_after", "skill_degradation", "interference", "overlap", "jaccard"};
    auto values = [](const ModeRun& r) {
        return std::vector<double>{r.metrics.fact_recall, r.metrics.skill_loss_before, r.metrics.skill_loss_after,
                                   r.metrics.skill_degradation(), r.metrics.final_interference(), r.overlap.micro.overlap,
                                   r.overlap.micro.jaccard};
    };
    std::vector<ProtectionMode> order;
    for (const auto& r : runs)
        if (std::find(order.begin(), order.end(), r.mode) == order.end()) order.push_back(r.mode);
    for (ProtectionMode m : order) {
        std::vector<double> sum(7, 0.0);
        std::size_t count = 0;
        for (const auto& r : runs) {
            if (r.mode != m) continue;
            const auto v = values(r);
            std::vector<std::string> row{std::string(mode_name(m)), std::to_string(r.seed)};
            for (std::size_t i = 0; i < v.size(); ++i) {
                row.push_back(format_number(v[i]));
                sum[i] += v[i];
            }
            ++count;
            t.rows.push_back(std::move(row));
        }
        std::vector<std::string> row{std::string(mode_name(m)), "mean"};
        for (double s : sum) row.push_back(format_number(s / static_cast<double>(count)));
        t.rows.push_back(std::move(row));
    }
    return t;
}

CsvTable theory_table(const std::vector<TheorySeedRow>& rows) {
    if (rows.empty()) throw ContractViolation("theory report: no seeds");
    CsvTable t;
    t.comments = {"synthetic misalignment regime, one row per seed",
                  "theorem_holds: 1 when the skill-relevant set S_T is not contained in the top-k",
                  "gamma_max_topk: max |gamma_i| over the top-k components",
                  "bound_small: ||G_T||_F sqrt(delta) + ||N||_F; small_bound_holds compares the two",
                  "gamma_star / i_star: largest |gamma_i| outside the top-k and its index",
                  "bound_large: ||G_T||_F / sqrt(s (n - k)); large_bound_attained: gamma_star >= bound_large",
                  "s_size: |S_T|; s_outside_topk: members of S_T with index >= k",
                  "perturb_residual: max_i | |d sigma_i| / sigma_i - eta |gamma_i| / sigma_i | after one step (first-order law)",
                  "perturb_ratio: residual(eta) / residual(eta / 2)",
                  "perturb_residual_literal: same residual against eta |gamma_i| without the 1/sigma_i factor",
                  "forfeited / floor: gradient energy outside the top-k and its c_T^2 / (n - k) floor (protection cost)",
                  "union_contained: 1 when the union of several skills' S_T fits inside the top-k",
                  "spearman: rank correlation of trained |z_i - 1| with sigma_i |gamma_i|"};
    t.header = {"seed", "theorem_holds", "gamma_max_topk", "bound_small", "small_bound_holds", "gamma_star", "i_star",
                "bound_large", "large_bound_attained", "s_size", "s_outside_topk", "perturb_residual", "perturb_ratio",
                "perturb_residual_literal", "forfeited", "floor", "union_contained", "spearman"};
    for (const auto& r : rows) {
        const auto& v = r.verdict;
        std::size_t outside = 0;
        for (std::size_t i : v.s_set.indices) outside += i >= r.union_report.k ? 1 : 0;
        t.rows.push_back({std::to_string(r.seed), v.contained_in_topk ? "0" : "1", format_number(v.gamma_max_topk),
                          format_number(v.bound_small), v.small_bound_holds ? "1" : "0", format_number(v.gamma_star),
                          std::to_string(v.i_star), format_number(v.bound_large), v.large_bound_attained ? "1" : "0",
                          std::to_string(v.s_set.indices.size()), std::to_string(outside), format_number(r.perturb_residual),
                          format_number(r.perturb_ratio), format_number(r.perturb_residual_literal),
                          format_number(r.cost.forfeited), format_number(r.cost.floor),
                          r.union_report.contained_in_topk ? "1" : "0", format_number(r.spearman)});
    }
    return t;
}

CsvTable ablation_table(const std::vector<AblationCell>& cells) {
    if (cells.empty()) throw ContractViolation("ablation report: no cells");
    CsvTable t;
    t.comments = {"ablation grid, svf_guided protection, one axis varied at a time",
                  "param / value: the varied setting; the others keep their configured values",
                  "seeds: number of seeds averaged",
                  "interference: seed-mean final interference",
                  "recall: seed-mean fact recall",
                  "skill_degradation: seed-mean skill_after - skill_before"};
    t.header = {"param", "value", "seeds", "interference", "recall", "skill_degradation"};
    for (const auto& c : cells) {
        t.rows.push_back({c.param, format_number(c.value), std::to_string(c.interference.size()),
                          format_number(c.mean_interference()), format_number(c.mean_recall()),
                          format_number(c.mean_degradation())});
    }
    return t;
}

void emit_reports(const std::vector<ModeRun>& runs, const std::filesystem::path& dir, bool svg) {
    if (runs.empty()) throw ContractViolation("emit_reports: empty run set");
    write_text_file(dir / "comparison.csv", to_csv(comparison_table(runs)));

    std::uint64_t first_seed = runs.front().seed;
    for (const auto& r : runs) first_seed = std::min(first_seed, r.seed);
    std::vector<const ModeRun*> first;
    for (const auto& r : runs)
        if (r.seed == first_seed) first.push_back(&r);
    const CsvTable dyn = dynamics_table(first);
    write_text_file(dir / "dynamics.csv", to_csv(dyn));
    if (!svg) return;

    const auto labels = run_labels(first);
    std::vector<Series> sft, inter;
    for (std::size_t i = 0; i < first.size(); ++i) {
        Series a{labels[i], {}, {}}, b{labels[i], {}, {}};
        for (const auto& e : first[i]->metrics.epochs) {
            a.x.push_back(e.epoch);
            a.y.push_back(e.sft_loss);
            b.x.push_back(e.epoch);
            b.y.push_back(e.interference);
        }
        sft.push_back(std::move(a));
        inter.push_back(std::move(b));
    }
    write_text_file(dir / "dynamics_sft.svg", svg_line_chart("Fact loss per epoch (seed " + std::to_string(first_seed) + ")",
                                                             "epoch", "sft loss", sft, true));
    write_text_file(dir / "dynamics_interference.svg",
                    svg_line_chart("Interference per epoch (seed " + std::to_string(first_seed) + ")", "epoch",
                                   "interference", inter, true));
}

}  // namespace svlab
