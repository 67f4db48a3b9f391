#include "crane/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "crane/calibration.hpp"
#include "crane/delta_ops.hpp"
#include "crane/errors.hpp"
#include "crane/gsp.hpp"
#include "crane/manifest.hpp"
#include "crane/merge_engine.hpp"
#include "crane/micro_transformer.hpp"
#include "crane/model_schema.hpp"
#include "crane/rng.hpp"
#include "crane/synthetic_lab.hpp"
#include "crane/taylor_gate.hpp"
#include "crane/tensor_archive.hpp"

namespace fs = std::filesystem;

namespace crane {

namespace {

struct GlobalOpts {
    int threads = 1;
    uint64_t seed = 1;
    std::string manifest_out;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string render(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string render(bool v) { return v ? "true" : "false"; }

// Default manifest location when --manifest-out is not given: next to the
// command's primary output. Commands without an output file write a manifest
// only on request.
void finish_manifest(Manifest& m, const GlobalOpts& g, const std::string& primary_out,
                     Clock::time_point t0) {
    m.wall_seconds = seconds_since(t0);
    std::string path = g.manifest_out;
    if (path.empty() && !primary_out.empty()) path = primary_out + ".manifest.json";
    if (!path.empty()) m.save(path);
}

void hash_archive_inputs(Manifest& m, const TensorArchive& archive) {
    for (const fs::path& shard : archive.shard_list()) m.add_input(shard);
}

// --schema takes a preset name or a JSON file path; --config points at a
// micro model config whose schema_for() is used when --schema is absent.
ModelSchema resolve_schema(const std::string& schema_arg, const std::string& config_arg) {
    if (!schema_arg.empty()) {
        if (schema_arg.find('/') != std::string::npos ||
            schema_arg.find(".json") != std::string::npos)
            return ModelSchema::load(schema_arg);
        return ModelSchema::preset(schema_arg);
    }
    if (!config_arg.empty()) return schema_for(MicroConfig::load(config_arg));
    return ModelSchema::preset("micro-dense");
}

BaselineMethod method_from_cli(std::string s) {
    if (s == "ta") s = "task_arithmetic";
    std::replace(s.begin(), s.end(), '-', '_');
    return method_from_name(s);
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot create " + path.string());
    out << text;
    if (!out) throw IoError("short write on " + path.string());
}

// ---- delta ----

struct DeltaOpts {
    std::string instruct, thinking, out;
    uint64_t shard_budget = UINT64_MAX;
};

int cmd_delta(const DeltaOpts& o, const GlobalOpts& g) {
    auto t0 = Clock::now();
    Manifest m;
    m.command = "delta";
    m.config = {{"instruct", o.instruct},
                {"thinking", o.thinking},
                {"out", o.out},
                {"threads", std::to_string(g.threads)},
                {"shard_budget", std::to_string(o.shard_budget)}};

    TensorArchive inst_a = TensorArchive::open(o.instruct);
    TensorArchive think_a = TensorArchive::open(o.thinking);
    hash_archive_inputs(m, inst_a);
    hash_archive_inputs(m, think_a);

    TensorMap delta = delta_archive(to_map(inst_a), to_map(think_a), g.threads);
    uint64_t coords = 0;
    for (const auto& [name, t] : delta) coords += t.element_count();

    for (const fs::path& p : write_archive(delta, o.out, o.shard_budget))
        m.outputs.push_back(p.string());
    m.stats["tensors"] = static_cast<double>(delta.size());
    m.stats["coords"] = static_cast<double>(coords);
    finish_manifest(m, g, o.out, t0);
    std::cout << "wrote " << o.out << " (" << delta.size() << " tensors)\n";
    return 0;
}

// ---- taylor ----

struct TaylorOpts {
    std::string instruct, delta, calib_r, calib_a, grad_r, grad_a, schema, config, out;
    bool arch_normalize = false;
};

int cmd_taylor(const TaylorOpts& o, const GlobalOpts& g) {
    auto t0 = Clock::now();
    Manifest m;
    m.command = "taylor";
    m.config = {{"instruct", o.instruct},     {"delta", o.delta},
                {"calib_r", o.calib_r},       {"calib_a", o.calib_a},
                {"grad_r", o.grad_r},         {"grad_a", o.grad_a},
                {"schema", o.schema},         {"config", o.config},
                {"out", o.out},               {"arch_normalize", render(o.arch_normalize)},
                {"threads", std::to_string(g.threads)}};

    TensorArchive inst_a = TensorArchive::open(o.instruct);
    TensorArchive delta_a = TensorArchive::open(o.delta);
    hash_archive_inputs(m, inst_a);
    hash_archive_inputs(m, delta_a);
    TensorMap inst = to_map(inst_a);
    TensorMap delta = to_map(delta_a);

    ModelSchema schema = resolve_schema(o.schema, o.config);
    BoundSchema bound = crane::bind(schema, inst);

    GradientSet g_r, g_a;
    std::string note;
    if (!o.grad_r.empty() || !o.grad_a.empty()) {
        if (o.grad_r.empty() || o.grad_a.empty())
            throw ValidationError("--grad-r and --grad-a must be given together");
        TensorArchive gra = TensorArchive::open(o.grad_r);
        TensorArchive gaa = TensorArchive::open(o.grad_a);
        hash_archive_inputs(m, gra);
        hash_archive_inputs(m, gaa);
        g_r.tensors = to_map(gra);
        g_a.tensors = to_map(gaa);
        note = "external gradient archives";
    } else {
        if (o.config.empty())
            throw ValidationError(
                "gradients need --config (built-in model) or --grad-r/--grad-a archives");
        if (o.calib_r.empty() || o.calib_a.empty())
            throw ValidationError("--calib-r and --calib-a are required without --grad-r/--grad-a");
        MicroConfig mc = MicroConfig::load(o.config);
        m.add_input(o.config);
        m.add_input(o.calib_r);
        m.add_input(o.calib_a);
        auto ex_r = filter_set(load_calibration(o.calib_r), 'R');
        auto ex_a = filter_set(load_calibration(o.calib_a), 'A');
        if (ex_r.empty()) throw ValidationError("no R-tagged examples in " + o.calib_r);
        if (ex_a.empty()) throw ValidationError("no A-tagged examples in " + o.calib_a);
        g_r = gradients(inst, mc, ex_r, g.threads);
        g_a = gradients(inst, mc, ex_a, g.threads);
        note = "micro gradients over R=" + std::to_string(ex_r.size()) +
               " A=" + std::to_string(ex_a.size()) + " examples";
    }

    auto scores = coordinate_scores(g_r, g_a, delta, g.threads);
    SalienceTable table = aggregate(scores, bound, inst);
    if (o.arch_normalize) {
        BoundSchema normed = bound;
        if (normed.kappa.empty())
            normed.kappa = kappa_from_occupation(occupation_counts(bound), schema.reference_family);
        table = arch_normalize(table, normed);
    }
    table.calibration_note = note;

    for (const std::string& w : table.warnings) std::cerr << "warning: " << w << "\n";

    table.save(o.out);
    fs::path csv = fs::path(o.out).replace_extension(".csv");
    write_text(csv, table.to_csv_text());
    m.outputs.push_back(o.out);
    m.outputs.push_back(csv.string());
    m.stats["rows"] = static_cast<double>(table.entries.size());
    m.stats["warnings"] = static_cast<double>(table.warnings.size());
    finish_manifest(m, g, o.out, t0);
    std::cout << "wrote " << o.out << " and " << csv.string() << " (" << table.entries.size()
              << " rows)\n";
    return 0;
}

// ---- gsp-build ----

struct GspBuildOpts {
    std::string instruct, calib_f, config, schema, out;
    double tau = 0.03;
    int rho = 2;
    std::string spaces = "default";
};

int cmd_gsp_build(const GspBuildOpts& o, const GlobalOpts& g) {
    auto t0 = Clock::now();
    Manifest m;
    m.command = "gsp-build";
    m.config = {{"instruct", o.instruct}, {"calib_f", o.calib_f}, {"config", o.config},
                {"schema", o.schema},     {"out", o.out},         {"tau", render(o.tau)},
                {"rho", std::to_string(o.rho)}, {"spaces", o.spaces},
                {"threads", std::to_string(g.threads)}};

    if (o.spaces != "default" && o.spaces != "all")
        throw ValidationError("--spaces must be \"default\" or \"all\"");
    if (o.rho < 0) throw ValidationError("--rho must be non-negative");

    TensorArchive inst_a = TensorArchive::open(o.instruct);
    hash_archive_inputs(m, inst_a);
    TensorMap inst = to_map(inst_a);
    MicroConfig mc = MicroConfig::load(o.config);
    m.add_input(o.config);
    ModelSchema schema =
        o.schema.empty() ? schema_for(mc) : resolve_schema(o.schema, o.config);
    BoundSchema bound = crane::bind(schema, inst);

    m.add_input(o.calib_f);
    auto f_examples = filter_set(load_calibration(o.calib_f), 'F');

    std::set<std::string> all_spaces;
    for (const auto& [name, entry] : bound.entries)
        if (!entry.space.empty()) all_spaces.insert(entry.space);

    std::set<std::string> targets;
    if (o.spaces == "all") {
        targets = all_spaces;
    } else {
        // Residual-stream spaces only; the narrow inner/output spaces stay
        // identity unless explicitly requested.
        for (const std::string& s : all_spaces) {
            if (s.size() >= 7 && s.compare(s.size() - 7, 7, "attn_in") == 0) targets.insert(s);
            if (s.size() >= 6 && s.compare(s.size() - 6, 6, "mlp_in") == 0) targets.insert(s);
        }
    }

    GspProjectorSet set;
    set.tau = o.tau;
    set.k = gsp_steepness(o.tau);
    set.rho = o.rho;

    if (f_examples.empty()) {
        std::cerr << "warning: no F-tagged calibration examples; every space is identity\n";
        set.identity_spaces = all_spaces;
    } else {
        FormatSupport support = format_support(f_examples);
        std::vector<size_t> lengths;
        lengths.reserve(f_examples.size());
        for (const auto& ex : f_examples) lengths.push_back(ex.tokens.size());
        Neighborhood hood = expand_neighborhood(support, o.rho, lengths);

        std::map<int, std::vector<int>> pos_by_example;
        for (const auto& [ei, p] : hood.positions) pos_by_example[ei].push_back(p);

        std::vector<ForwardTrace> traces(f_examples.size());
        for (size_t ei = 0; ei < f_examples.size(); ++ei) {
            std::map<std::string, std::vector<int>> capture;
            auto it = pos_by_example.find(static_cast<int>(ei));
            const std::vector<int> empty;
            const std::vector<int>& pos = it == pos_by_example.end() ? empty : it->second;
            for (const std::string& s : targets) capture[s] = pos;
            traces[ei] = forward(inst, mc, f_examples[ei].tokens, capture);
        }

        for (const std::string& s : targets) {
            // Routed expert spaces see only the positions routed to them.
            bool routed = s.find("experts.") != std::string::npos;
            ActivationMatrix H = build_activation_matrix(traces, s, hood, !routed);
            auto proj = build_projector(H, o.tau);
            if (proj.has_value())
                set.projectors.emplace(s, std::move(*proj));
            else
                set.identity_spaces.insert(s);
        }
        for (const std::string& s : all_spaces)
            if (targets.count(s) == 0) set.identity_spaces.insert(s);
    }

    set.save(o.out);
    m.outputs.push_back(o.out);
    m.outputs.push_back(o.out + ".json");
    m.stats["projectors"] = static_cast<double>(set.projectors.size());
    m.stats["identity_spaces"] = static_cast<double>(set.identity_spaces.size());
    finish_manifest(m, g, o.out, t0);
    std::cout << "wrote " << o.out << " (" << set.projectors.size() << " projectors, "
              << set.identity_spaces.size() << " identity)\n";
    return 0;
}

// ---- merge ----

struct MergeOpts {
    std::string instruct, thinking, salience, projectors, preset = "crane-30b";
    std::string schema, config, out;
    double alpha = 0.0, tau = 0.0;  // effective values resolved from the preset
    bool alpha_set = false, tau_set = false;
    bool no_sparsifier = false, no_taylor = false, no_gsp = false;
    bool arch_on = false, arch_off = false;
    uint64_t shard_budget = UINT64_MAX;
};

int cmd_merge(const MergeOpts& o, const GlobalOpts& g) {
    auto t0 = Clock::now();

    MergeConfig cfg;
    if (o.preset == "crane-30b") {
        cfg.alpha = 0.25;
        cfg.tau = 0.03;
        cfg.arch_normalize = false;
    } else if (o.preset == "crane-80b") {
        cfg.alpha = 0.15;
        cfg.tau = 0.03;
        cfg.arch_normalize = true;
    } else {
        throw ValidationError("unknown preset \"" + o.preset +
                              "\" (expected crane-30b or crane-80b)");
    }
    if (o.alpha_set) cfg.alpha = o.alpha;
    if (o.tau_set) cfg.tau = o.tau;
    if (o.arch_on && o.arch_off)
        throw ValidationError("--arch-normalize and --no-arch-normalize conflict");
    if (o.arch_on) cfg.arch_normalize = true;
    if (o.arch_off) cfg.arch_normalize = false;
    cfg.use_sparsifier = !o.no_sparsifier;
    cfg.use_taylor = !o.no_taylor;
    cfg.use_gsp = !o.no_gsp;
    cfg.validate();

    Manifest m;
    m.command = "merge";
    m.config = {{"instruct", o.instruct},
                {"thinking", o.thinking},
                {"salience", o.salience},
                {"projectors", o.projectors},
                {"preset", o.preset},
                {"schema", o.schema},
                {"config", o.config},
                {"out", o.out},
                {"alpha", render(cfg.alpha)},
                {"tau", render(cfg.tau)},
                {"use_sparsifier", render(cfg.use_sparsifier)},
                {"use_taylor", render(cfg.use_taylor)},
                {"use_gsp", render(cfg.use_gsp)},
                {"arch_normalize", render(cfg.arch_normalize)},
                {"threads", std::to_string(g.threads)},
                {"shard_budget", std::to_string(o.shard_budget)}};

    TensorArchive inst_a = TensorArchive::open(o.instruct);
    TensorArchive think_a = TensorArchive::open(o.thinking);
    hash_archive_inputs(m, inst_a);
    hash_archive_inputs(m, think_a);
    TensorMap inst = to_map(inst_a);
    TensorMap think = to_map(think_a);

    ModelSchema schema = resolve_schema(o.schema, o.config);
    BoundSchema bound = crane::bind(schema, inst);

    SalienceTable table;
    const SalienceTable* table_ptr = nullptr;
    if (cfg.use_taylor) {
        if (o.salience.empty())
            throw ValidationError("--salience is required unless --no-taylor is set");
        table = SalienceTable::load(o.salience);
        m.add_input(o.salience);
        table_ptr = &table;
    }

    GspProjectorSet projectors;
    const GspProjectorSet* proj_ptr = nullptr;
    if (cfg.use_gsp) {
        if (o.projectors.empty())
            throw ValidationError("--projectors is required unless --no-gsp is set");
        projectors = GspProjectorSet::load(o.projectors);
        m.add_input(o.projectors);
        m.add_input(o.projectors + ".json");
        if (projectors.tau != cfg.tau)
            std::cerr << "warning: --tau " << cfg.tau << " differs from the projector archive ("
                      << projectors.tau << "); the stored weights win\n";
        proj_ptr = &projectors;
    }

    MergeStats stats;
    TensorMap merged = crane_merge(inst, think, bound, table_ptr, proj_ptr, cfg, &stats, g.threads);

    for (const fs::path& p : write_archive(merged, o.out, o.shard_budget))
        m.outputs.push_back(p.string());
    fs::path stats_path = o.out + ".stats.json";
    write_text(stats_path, stats.to_json_text());
    m.outputs.push_back(stats_path.string());

    m.stats["total_coords"] = static_cast<double>(stats.total_coords);
    m.stats["surviving_coords"] = static_cast<double>(stats.surviving_coords);
    m.stats["sparsify_survival"] = stats.sparsify_survival;
    m.stats["salience_rows"] = static_cast<double>(stats.salience_used.size());
    m.stats["projected_spaces"] = static_cast<double>(stats.mean_w.size());
    finish_manifest(m, g, o.out, t0);
    std::cout << "wrote " << o.out << " (survival " << render(stats.sparsify_survival) << ")\n";
    return 0;
}

// ---- baseline ----

struct BaselineOpts {
    std::string method, instruct, thinking, config, calib, out;
    double alpha = 0.30, t = 0.30, density = 0.50, omega = 0.40;
    uint64_t shard_budget = UINT64_MAX;
};

int cmd_baseline(const BaselineOpts& o, const GlobalOpts& g) {
    auto t0 = Clock::now();

    BaselineConfig bc;
    bc.method = method_from_cli(o.method);
    bc.alpha = o.alpha;
    bc.t = o.t;
    bc.density = o.density;
    bc.omega = o.omega;

    Manifest m;
    m.command = "baseline";
    m.config = {{"method", method_name(bc.method)},
                {"instruct", o.instruct},
                {"thinking", o.thinking},
                {"config", o.config},
                {"calib", o.calib},
                {"out", o.out},
                {"alpha", render(bc.alpha)},
                {"t", render(bc.t)},
                {"density", render(bc.density)},
                {"omega", render(bc.omega)},
                {"threads", std::to_string(g.threads)},
                {"shard_budget", std::to_string(o.shard_budget)}};

    TensorArchive inst_a = TensorArchive::open(o.instruct);
    TensorArchive think_a = TensorArchive::open(o.thinking);
    hash_archive_inputs(m, inst_a);
    hash_archive_inputs(m, think_a);
    TensorMap inst = to_map(inst_a);
    TensorMap think = to_map(think_a);

    if (bc.method == BaselineMethod::aim_ta || bc.method == BaselineMethod::aim_ties) {
        if (o.config.empty() || o.calib.empty())
            throw ValidationError("aim methods need --config and --calib to record activations");
        MicroConfig mc = MicroConfig::load(o.config);
        m.add_input(o.config);
        m.add_input(o.calib);
        BoundSchema bound = crane::bind(schema_for(mc), inst);
        bc.importance = aim_importance(inst, mc, bound, load_calibration(o.calib));
    }

    std::vector<std::string> warnings;
    TensorMap merged = baseline_merge(inst, think, bc, &warnings, g.threads);
    for (const std::string& w : warnings) std::cerr << "warning: " << w << "\n";

    for (const fs::path& p : write_archive(merged, o.out, o.shard_budget))
        m.outputs.push_back(p.string());
    m.stats["tensors"] = static_cast<double>(merged.size());
    m.stats["warnings"] = static_cast<double>(warnings.size());
    finish_manifest(m, g, o.out, t0);
    std::cout << "wrote " << o.out << " (" << method_name(bc.method) << ")\n";
    return 0;
}

// ---- verify ----

struct VerifyOpts {
    std::string config, out;
    int support = 4;
    int format_rank = 2;
    bool no_noise = false;
    double alpha = 0.25, tau = 0.03;
    bool arch_normalize = false;
    bool no_sparsifier = false, no_taylor = false, no_gsp = false;
};

int cmd_verify(const VerifyOpts& o, const GlobalOpts& g) {
    auto t0 = Clock::now();
    Manifest m;
    m.command = "verify";
    m.config = {{"config", o.config},
                {"out", o.out},
                {"seed", std::to_string(g.seed)},
                {"support", std::to_string(o.support)},
                {"format_rank", std::to_string(o.format_rank)},
                {"with_noise", render(!o.no_noise)},
                {"alpha", render(o.alpha)},
                {"tau", render(o.tau)},
                {"arch_normalize", render(o.arch_normalize)},
                {"threads", std::to_string(g.threads)}};

    MicroConfig mc;
    if (!o.config.empty()) {
        mc = MicroConfig::load(o.config);
        m.add_input(o.config);
    } else {
        mc.vocab = 12;
        mc.d_model = 8;
        mc.n_layers = 2;
        mc.n_heads = 2;
        mc.ffn_mult = 2;
        mc.seed = g.seed;
    }

    PlantingSpec spec;
    spec.support_per_tensor = o.support;
    spec.format_rank = o.format_rank;
    spec.with_noise = !o.no_noise;
    spec.seed = g.seed;
    PlantedPair pair = plant_pair(mc, spec);

    MergeConfig cfg;
    cfg.alpha = o.alpha;
    cfg.tau = o.tau;
    cfg.arch_normalize = o.arch_normalize;
    cfg.use_sparsifier = !o.no_sparsifier;
    cfg.use_taylor = !o.no_taylor;
    cfg.use_gsp = !o.no_gsp;

    VerificationReport report = verify_pipeline(pair, cfg, g.threads);
    std::cout << report.to_table_text();

    if (!o.out.empty()) {
        write_text(o.out, report.to_json_text());
        m.outputs.push_back(o.out);
    }
    m.stats["stage1_noise_removal_rate"] = report.stage1_noise_removal_rate;
    m.stats["ctg_selectivity"] = report.ctg_selectivity;
    m.stats["gsp_energy_ratio"] = report.gsp_energy_ratio;
    m.stats["pass"] = report.pass ? 1.0 : 0.0;
    finish_manifest(m, g, o.out, t0);

    if (!report.pass) {
        std::cerr << "error: pipeline verification failed\n";
        return 1;
    }
    return 0;
}

// ---- compare-salience ----

struct CompareOpts {
    std::string a, b;
    std::vector<int> top_k;
};

int cmd_compare_salience(const CompareOpts& o, const GlobalOpts& g) {
    auto t0 = Clock::now();
    Manifest m;
    m.command = "compare-salience";
    m.config = {{"a", o.a}, {"b", o.b}};

    SalienceTable ta = SalienceTable::load(o.a);
    SalienceTable tb = SalienceTable::load(o.b);
    m.add_input(o.a);
    m.add_input(o.b);

    std::vector<int> ks = o.top_k.empty() ? std::vector<int>{5, 10} : o.top_k;
    SalienceComparison c = compare_salience(ta, tb, ks);

    char buf[64];
    std::snprintf(buf, sizeof(buf), "pearson  %.6f\n", c.pearson);
    std::cout << buf;
    std::snprintf(buf, sizeof(buf), "spearman %.6f\n", c.spearman);
    std::cout << buf;
    for (const auto& [k, overlap] : c.top_k_overlap)
        std::cout << "top-" << k << " overlap " << overlap << "\n";

    m.stats["pearson"] = c.pearson;
    m.stats["spearman"] = c.spearman;
    finish_manifest(m, g, "", t0);
    return 0;
}

// ---- ttc ----

struct TtcOpts {
    double input = 0.0, cached = 0.0, output = 0.0;
};

int cmd_ttc(const TtcOpts& o, const GlobalOpts& g) {
    auto t0 = Clock::now();
    double value = ttc(o.input, o.cached, o.output);
    char buf[64];
    std::snprintf(buf, sizeof(buf), "ttc_tokens   %.1f\n", value);
    std::cout << buf;
    std::cout << "ttc_millions " << format_millions(value) << "\n";

    Manifest m;
    m.command = "ttc";
    m.config = {{"input", render(o.input)},
                {"cached", render(o.cached)},
                {"output", render(o.output)}};
    m.stats["ttc"] = value;
    finish_manifest(m, g, "", t0);
    return 0;
}

// ---- make-fixture ----

struct FixtureOpts {
    std::string out_dir, config;
    int support = 4;
    int format_rank = 2;
    bool no_noise = false;
    int moe = 0;
    int examples = 3;
};

int cmd_make_fixture(const FixtureOpts& o, const GlobalOpts& g) {
    auto t0 = Clock::now();
    Manifest m;
    m.command = "make-fixture";
    m.config = {{"out", o.out_dir},
                {"config", o.config},
                {"seed", std::to_string(g.seed)},
                {"support", std::to_string(o.support)},
                {"format_rank", std::to_string(o.format_rank)},
                {"with_noise", render(!o.no_noise)},
                {"moe", std::to_string(o.moe)},
                {"examples", std::to_string(o.examples)}};

    MicroConfig mc;
    if (!o.config.empty()) {
        mc = MicroConfig::load(o.config);
        m.add_input(o.config);
    } else {
        mc.vocab = 12;
        mc.d_model = 8;
        mc.n_layers = 2;
        mc.n_heads = 2;
        mc.ffn_mult = 2;
        mc.seed = g.seed;
    }
    if (o.moe > 0) mc.moe_experts = o.moe;
    if (o.examples < 1) throw ValidationError("--examples must be at least 1");

    PlantingSpec spec;
    spec.support_per_tensor = o.support;
    spec.format_rank = o.format_rank;
    spec.with_noise = !o.no_noise;
    spec.seed = g.seed;
    PlantedPair pair = plant_pair(mc, spec);

    fs::create_directories(o.out_dir);
    fs::path dir(o.out_dir);

    mc.save(dir / "config.json");
    m.outputs.push_back((dir / "config.json").string());
    for (const fs::path& p : write_archive(pair.inst, dir / "instruct.tensors"))
        m.outputs.push_back(p.string());
    for (const fs::path& p : write_archive(pair.think, dir / "thinking.tensors"))
        m.outputs.push_back(p.string());

    std::vector<CalibrationExample> examples;
    for (char tag : {'R', 'A', 'F'}) {
        SplitMix64 rng(g.seed ^ fnv1a64(std::string(1, tag)));
        int count = tag == 'F' ? std::max(1, o.examples - 1) : o.examples;
        for (int e = 0; e < count; ++e) {
            CalibrationExample ex;
            ex.set_tag = tag;
            size_t len = 6 + rng.next_below(3);
            ex.tokens.resize(len);
            for (int& t : ex.tokens)
                t = static_cast<int>(rng.next_below(static_cast<uint64_t>(mc.vocab)));
            ex.mask.assign(len, 1);
            ex.mask[0] = 0;
            examples.push_back(std::move(ex));
        }
    }
    save_calibration(examples, dir / "calib.jsonl");
    m.outputs.push_back((dir / "calib.jsonl").string());

    m.stats["tensors"] = static_cast<double>(pair.inst.size());
    m.stats["examples"] = static_cast<double>(examples.size());
    finish_manifest(m, g, (dir / "fixture").string(), t0);
    std::cout << "fixture written to " << o.out_dir << "\n";
    return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
    CLI::App app{"checkpoint merging toolkit: sparsified, gated, format-protected weight edits"};
    app.name("crane");
    app.require_subcommand(1);

    GlobalOpts g;
    app.add_option("--threads", g.threads, "worker thread cap")->check(CLI::PositiveNumber);
    app.add_option("--seed", g.seed, "seed for seeded commands");
    app.add_option("--manifest-out", g.manifest_out,
                   "manifest path (default: <out>.manifest.json)");

    DeltaOpts d;
    CLI::App* delta_cmd = app.add_subcommand("delta", "write theta_think - theta_inst");
    delta_cmd->fallthrough();
    delta_cmd->add_option("--instruct", d.instruct)->required();
    delta_cmd->add_option("--thinking", d.thinking)->required();
    delta_cmd->add_option("--out", d.out)->required();
    delta_cmd->add_option("--shard-budget", d.shard_budget, "max payload bytes per shard");

    TaylorOpts ty;
    CLI::App* taylor_cmd = app.add_subcommand("taylor", "build the blockwise salience table");
    taylor_cmd->fallthrough();
    taylor_cmd->add_option("--instruct", ty.instruct)->required();
    taylor_cmd->add_option("--delta", ty.delta)->required();
    taylor_cmd->add_option("--calib-r", ty.calib_r, "R-tagged calibration JSONL");
    taylor_cmd->add_option("--calib-a", ty.calib_a, "A-tagged calibration JSONL");
    taylor_cmd->add_option("--grad-r", ty.grad_r, "external reasoning gradient archive");
    taylor_cmd->add_option("--grad-a", ty.grad_a, "external agent gradient archive");
    taylor_cmd->add_option("--schema", ty.schema, "schema preset name or JSON path");
    taylor_cmd->add_option("--config", ty.config, "micro model config JSON");
    taylor_cmd->add_option("--out", ty.out)->required();
    taylor_cmd->add_flag("--arch-normalize", ty.arch_normalize,
                         "divide mixer rows by family kappa");

    GspBuildOpts gb;
    CLI::App* gsp_cmd = app.add_subcommand("gsp-build", "collect activations, build projectors");
    gsp_cmd->fallthrough();
    gsp_cmd->add_option("--instruct", gb.instruct)->required();
    gsp_cmd->add_option("--calib-f", gb.calib_f, "F-tagged calibration JSONL")->required();
    gsp_cmd->add_option("--config", gb.config, "micro model config JSON")->required();
    gsp_cmd->add_option("--schema", gb.schema, "schema preset name or JSON path");
    gsp_cmd->add_option("--tau", gb.tau, "protection threshold");
    gsp_cmd->add_option("--rho", gb.rho, "neighborhood radius");
    gsp_cmd->add_option("--spaces", gb.spaces, "default (residual stream) or all");
    gsp_cmd->add_option("--out", gb.out)->required();

    MergeOpts mg;
    CLI::App* merge_cmd = app.add_subcommand("merge", "three-stage gated merge");
    merge_cmd->fallthrough();
    merge_cmd->add_option("--instruct", mg.instruct)->required();
    merge_cmd->add_option("--thinking", mg.thinking)->required();
    merge_cmd->add_option("--salience", mg.salience, "salience table JSON");
    merge_cmd->add_option("--projectors", mg.projectors, "projector archive");
    merge_cmd->add_option("--preset", mg.preset, "crane-30b (default) or crane-80b");
    merge_cmd->add_option("--schema", mg.schema, "schema preset name or JSON path");
    merge_cmd->add_option("--config", mg.config, "micro model config JSON");
    merge_cmd->add_option("--out", mg.out)->required();
    CLI::Option* alpha_opt = merge_cmd->add_option("--alpha", mg.alpha, "edit strength");
    CLI::Option* tau_opt = merge_cmd->add_option("--tau", mg.tau, "protection threshold");
    merge_cmd->add_flag("--no-sparsifier", mg.no_sparsifier, "skip the median gate");
    merge_cmd->add_flag("--no-taylor", mg.no_taylor, "skip salience scaling");
    merge_cmd->add_flag("--no-gsp", mg.no_gsp, "skip the projection");
    merge_cmd->add_flag("--arch-normalize", mg.arch_on, "expect an arch-normalized table");
    merge_cmd->add_flag("--no-arch-normalize", mg.arch_off, "expect a raw table");
    merge_cmd->add_option("--shard-budget", mg.shard_budget, "max payload bytes per shard");

    BaselineOpts bl;
    CLI::App* baseline_cmd = app.add_subcommand("baseline", "reference merge rules");
    baseline_cmd->fallthrough();
    baseline_cmd->add_option("method", bl.method, "ta | ties | slerp | aim-ta | aim-ties")
        ->required();
    baseline_cmd->add_option("--instruct", bl.instruct)->required();
    baseline_cmd->add_option("--thinking", bl.thinking)->required();
    baseline_cmd->add_option("--config", bl.config, "micro model config JSON (aim)");
    baseline_cmd->add_option("--calib", bl.calib, "calibration JSONL (aim)");
    baseline_cmd->add_option("--out", bl.out)->required();
    baseline_cmd->add_option("--alpha", bl.alpha, "task-vector strength");
    baseline_cmd->add_option("--t", bl.t, "slerp interpolation knob");
    baseline_cmd->add_option("--density", bl.density, "ties keep fraction");
    baseline_cmd->add_option("--omega", bl.omega, "aim relaxation floor");
    baseline_cmd->add_option("--shard-budget", bl.shard_budget, "max payload bytes per shard");

    VerifyOpts vf;
    CLI::App* verify_cmd = app.add_subcommand("verify", "planted-pair pipeline check");
    verify_cmd->fallthrough();
    verify_cmd->add_option("--config", vf.config, "micro model config JSON");
    verify_cmd->add_option("--support", vf.support, "planted support per tensor");
    verify_cmd->add_option("--format-rank", vf.format_rank, "planted basis rank");
    verify_cmd->add_flag("--no-noise", vf.no_noise, "plant only the support");
    verify_cmd->add_option("--alpha", vf.alpha, "edit strength");
    verify_cmd->add_option("--tau", vf.tau, "protection threshold");
    verify_cmd->add_flag("--arch-normalize", vf.arch_normalize);
    verify_cmd->add_flag("--no-sparsifier", vf.no_sparsifier);
    verify_cmd->add_flag("--no-taylor", vf.no_taylor);
    verify_cmd->add_flag("--no-gsp", vf.no_gsp);
    verify_cmd->add_option("--out", vf.out, "report JSON path");

    CompareOpts cp;
    CLI::App* compare_cmd = app.add_subcommand("compare-salience", "rank-agreement report");
    compare_cmd->fallthrough();
    compare_cmd->add_option("a", cp.a)->required();
    compare_cmd->add_option("b", cp.b)->required();
    compare_cmd->add_option("--top-k", cp.top_k, "overlap sizes (default 5 10)");

    TtcOpts tt;
    CLI::App* ttc_cmd = app.add_subcommand("ttc", "weighted token cost");
    ttc_cmd->fallthrough();
    ttc_cmd->add_option("--input", tt.input)->required();
    ttc_cmd->add_option("--cached", tt.cached)->required();
    ttc_cmd->add_option("--output", tt.output)->required();

    FixtureOpts fx;
    CLI::App* fixture_cmd = app.add_subcommand("make-fixture", "seeded planted-pair workspace");
    fixture_cmd->fallthrough();
    fixture_cmd->add_option("--out", fx.out_dir)->required();
    fixture_cmd->add_option("--config", fx.config, "micro model config JSON");
    fixture_cmd->add_option("--support", fx.support, "planted support per tensor");
    fixture_cmd->add_option("--format-rank", fx.format_rank, "planted basis rank");
    fixture_cmd->add_flag("--no-noise", fx.no_noise, "plant only the support");
    fixture_cmd->add_option("--moe", fx.moe, "expert count (0 = dense)");
    fixture_cmd->add_option("--examples", fx.examples, "calibration examples per tag");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    mg.alpha_set = alpha_opt->count() > 0;
    mg.tau_set = tau_opt->count() > 0;

    try {
        if (delta_cmd->parsed()) return cmd_delta(d, g);
        if (taylor_cmd->parsed()) return cmd_taylor(ty, g);
        if (gsp_cmd->parsed()) return cmd_gsp_build(gb, g);
        if (merge_cmd->parsed()) return cmd_merge(mg, g);
        if (baseline_cmd->parsed()) return cmd_baseline(bl, g);
        if (verify_cmd->parsed()) return cmd_verify(vf, g);
        if (compare_cmd->parsed()) return cmd_compare_salience(cp, g);
        if (ttc_cmd->parsed()) return cmd_ttc(tt, g);
        if (fixture_cmd->parsed()) return cmd_make_fixture(fx, g);
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

}  // namespace crane
