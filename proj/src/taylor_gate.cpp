#include "crane/taylor_gate.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"

#include "crane/errors.hpp"
#include "crane/parallel.hpp"

using nlohmann::json;

namespace crane {

std::map<std::string, CoordinateScores> coordinate_scores(const GradientSet& g_r,
                                                          const GradientSet& g_a,
                                                          const TensorMap& delta, int threads) {
    for (const auto& [name, t] : delta) {
        if (!g_r.tensors.count(name) || !g_a.tensors.count(name))
            throw ValidationError("no gradient for tensor \"" + name + "\"");
    }
    if (g_r.tensors.size() != delta.size() || g_a.tensors.size() != delta.size())
        throw ValidationError("gradient sets and delta cover different tensor sets");

    std::vector<const std::pair<const std::string, Tensor>*> items;
    for (const auto& kv : delta) items.push_back(&kv);
    std::vector<CoordinateScores> slots(items.size());

    parallel_for(items.size(), threads, [&](size_t i) {
        const std::string& name = items[i]->first;
        const Tensor& dt = items[i]->second;
        const Tensor& rt = g_r.tensors.at(name);
        const Tensor& at = g_a.tensors.at(name);
        if (rt.shape != dt.shape || at.shape != dt.shape)
            throw ValidationError("tensor \"" + name + "\": gradient/delta shape mismatch");
        const auto d = load_f64(dt);
        const auto gr = load_f64(rt);
        const auto ga = load_f64(at);
        CoordinateScores& sc = slots[i];
        sc.s_r.resize(d.size());
        sc.s_a.resize(d.size());
        sc.p.resize(d.size());
        for (size_t j = 0; j < d.size(); ++j) {
            sc.s_r[j] = -gr[j] * d[j];
            sc.s_a[j] = -ga[j] * d[j];
            sc.p[j] = std::max(0.0, std::min(sc.s_r[j], sc.s_a[j]));
        }
    });

    std::map<std::string, CoordinateScores> out;
    for (size_t i = 0; i < items.size(); ++i) out.emplace(items[i]->first, std::move(slots[i]));
    return out;
}

namespace {

bool is_anchor_kind(const BoundSchema& bound, ComponentKind k) {
    return std::find(bound.anchor_kinds.begin(), bound.anchor_kinds.end(), k) !=
           bound.anchor_kinds.end();
}

bool is_mixer_kind_name(const std::string& kind) {
    for (ComponentKind k : {ComponentKind::q_proj, ComponentKind::k_proj, ComponentKind::v_proj,
                            ComponentKind::o_proj, ComponentKind::mixer_inner})
        if (kind == kind_name(k)) return true;
    return false;
}

json layer_to_json(int layer) {
    if (layer == kGlobalLayer) return json("global");
    return json(layer);
}

int layer_from_json(const json& j) {
    if (j.is_string()) {
        if (j.get<std::string>() == "global") return kGlobalLayer;
        throw ValidationError("bad layer tag \"" + j.get<std::string>() + "\"");
    }
    return j.get<int>();
}

}  // namespace

SalienceTable aggregate(const std::map<std::string, CoordinateScores>& scores,
                        const BoundSchema& bound, const TensorMap& inst) {
    if (scores.size() != inst.size())
        throw ValidationError("scores and instruct archive cover different tensor sets");
    for (const auto& [name, t] : inst)
        if (!scores.count(name)) throw ValidationError("no scores for tensor \"" + name + "\"");

    // Blockwise p-sums and squared Frobenius norms, accumulated in tensor-name
    // order so the reduction is layout- and thread-independent.
    std::map<SalienceKey, double> psum, norm2;
    for (const auto& [name, sc] : scores) {
        const BoundEntry& e = bound.at(name);
        const SalienceKey key{kind_name(e.component.kind), e.component.layer};
        double s = 0.0;
        for (double v : sc.p) s += v;
        psum[key] += s;
        double n2 = 0.0;
        for (double v : load_f64(inst.at(name))) n2 += v * v;
        norm2[key] += n2;
    }

    // Per-layer anchor references (union of the anchor kinds).
    std::vector<double> anchor_psum(static_cast<size_t>(bound.n_layers), 0.0);
    std::vector<double> anchor_norm(static_cast<size_t>(bound.n_layers), 0.0);
    for (int l = 0; l < bound.n_layers; ++l) {
        double n2 = 0.0;
        for (ComponentKind k : bound.anchor_kinds) {
            const SalienceKey key{kind_name(k), l};
            if (auto it = psum.find(key); it != psum.end()) anchor_psum[l] += it->second;
            if (auto it = norm2.find(key); it != norm2.end()) n2 += it->second;
        }
        anchor_norm[l] = std::sqrt(n2);
    }

    SalienceTable table;
    for (int l = 0; l < bound.n_layers; ++l) table.anchor_norms[l] = anchor_norm[l];
    const double mean_psum =
        std::accumulate(anchor_psum.begin(), anchor_psum.end(), 0.0) / bound.n_layers;
    const double mean_norm =
        std::accumulate(anchor_norm.begin(), anchor_norm.end(), 0.0) / bound.n_layers;
    table.anchor_norms[kGlobalLayer] = mean_norm;

    std::vector<bool> layer_warned(static_cast<size_t>(bound.n_layers), false);
    bool global_warned = false;
    auto coefficient = [&](const SalienceKey& key, double block_psum, double block_norm) {
        double ref_psum, ref_norm;
        if (key.layer == kGlobalLayer) {
            ref_psum = mean_psum;
            ref_norm = mean_norm;
            if (ref_psum <= 0.0 || ref_norm <= 0.0) {
                if (!global_warned)
                    table.warnings.push_back("global anchor reference is zero; global rows zeroed");
                global_warned = true;
                return 0.0;
            }
        } else {
            ref_psum = anchor_psum[static_cast<size_t>(key.layer)];
            ref_norm = anchor_norm[static_cast<size_t>(key.layer)];
            if (ref_psum <= 0.0 || ref_norm <= 0.0) {
                if (!layer_warned[static_cast<size_t>(key.layer)])
                    table.warnings.push_back("layer " + std::to_string(key.layer) +
                                             ": anchor reference is zero; layer zeroed");
                layer_warned[static_cast<size_t>(key.layer)] = true;
                return 0.0;
            }
        }
        if (block_norm <= 0.0) {
            table.warnings.push_back(key.kind + " layer " +
                                     (key.layer == kGlobalLayer ? std::string("global")
                                                                : std::to_string(key.layer)) +
                                     ": zero component norm; coefficient zeroed");
            return 0.0;
        }
        return (block_psum / ref_psum) * (ref_norm / block_norm);
    };

    for (const auto& [key, ps] : psum)
        table.entries[key] = coefficient(key, ps, std::sqrt(norm2.at(key)));
    // The anchor pseudo-row normalizes against itself, so its value is the
    // exact quotient x/x = 1 whenever the layer reference is nonzero.
    for (int l = 0; l < bound.n_layers; ++l)
        table.entries[{kAnchorKind, l}] = coefficient({kAnchorKind, l}, anchor_psum[l], anchor_norm[l]);
    return table;
}

SalienceTable arch_normalize(const SalienceTable& table, const BoundSchema& bound) {
    if (table.arch_normalized)
        throw ValidationError("salience table is already architecture-normalized");
    SalienceTable out = table;
    out.arch_normalized = true;
    for (auto& [key, value] : out.entries) {
        if (!is_mixer_kind_name(key.kind) || key.layer == kGlobalLayer) continue;
        if (key.layer >= static_cast<int>(bound.layer_family.size()))
            throw ValidationError("salience layer " + std::to_string(key.layer) +
                                  " outside the bound schema");
        const double kappa = bound.kappa_for(bound.layer_family[static_cast<size_t>(key.layer)]);
        if (kappa <= 0.0) throw ValidationError("kappa must be positive");
        value /= kappa;
    }
    return out;
}

double SalienceTable::at(const std::string& kind, int layer) const {
    auto it = entries.find({kind, layer});
    if (it == entries.end())
        throw ValidationError("no salience entry for " + kind + " at layer " +
                              (layer == kGlobalLayer ? std::string("global") : std::to_string(layer)));
    return it->second;
}

std::string SalienceTable::to_json_text() const {
    json j;
    json rows = json::array();
    for (const auto& [key, value] : entries) {
        json row;
        row["kind"] = key.kind;
        row["layer"] = layer_to_json(key.layer);
        row["value"] = value;
        rows.push_back(std::move(row));
    }
    j["entries"] = rows;
    json norms;
    for (const auto& [layer, n] : anchor_norms)
        norms[layer == kGlobalLayer ? "global" : std::to_string(layer)] = n;
    j["anchor_norms"] = norms;
    j["metadata"] = {{"calibration", calibration_note}, {"arch_normalized", arch_normalized}};
    return j.dump(2);
}

SalienceTable SalienceTable::from_json_text(const std::string& text) {
    SalienceTable t;
    try {
        const json j = json::parse(text);
        for (const auto& row : j.at("entries")) {
            const SalienceKey key{row.at("kind").get<std::string>(),
                                  layer_from_json(row.at("layer"))};
            if (t.entries.count(key)) throw ValidationError("duplicate salience entry");
            t.entries[key] = row.at("value").get<double>();
        }
        for (auto it = j.at("anchor_norms").begin(); it != j.at("anchor_norms").end(); ++it) {
            const int layer = it.key() == "global" ? kGlobalLayer : std::stoi(it.key());
            t.anchor_norms[layer] = it.value().get<double>();
        }
        const auto& meta = j.at("metadata");
        t.calibration_note = meta.value("calibration", "");
        t.arch_normalized = meta.value("arch_normalized", false);
    } catch (const json::exception& e) {
        throw ValidationError(std::string("bad salience JSON: ") + e.what());
    }
    return t;
}

std::string SalienceTable::to_csv_text() const {
    std::vector<int> layers;
    std::vector<std::string> kinds;
    bool has_global = false;
    for (const auto& [key, v] : entries) {
        if (key.layer == kGlobalLayer) has_global = true;
        else if (std::find(layers.begin(), layers.end(), key.layer) == layers.end())
            layers.push_back(key.layer);
        if (std::find(kinds.begin(), kinds.end(), key.kind) == kinds.end())
            kinds.push_back(key.kind);
    }
    std::sort(layers.begin(), layers.end());
    std::sort(kinds.begin(), kinds.end());

    std::ostringstream out;
    out << "kind";
    for (int l : layers) out << "," << l;
    if (has_global) out << ",global";
    out << "\n";
    for (const auto& kind : kinds) {
        out << kind;
        for (int l : layers) {
            out << ",";
            if (auto it = entries.find({kind, l}); it != entries.end()) out << json(it->second).dump();
        }
        if (has_global) {
            out << ",";
            if (auto it = entries.find({kind, kGlobalLayer}); it != entries.end())
                out << json(it->second).dump();
        }
        out << "\n";
    }
    return out.str();
}

void SalienceTable::save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot create " + path.string());
    out << to_json_text() << "\n";
    if (!out) throw IoError("short write on " + path.string());
}

SalienceTable SalienceTable::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open salience table " + path.string());
    std::string text((std::istreambuf_iterator<char>(in)), {});
    return from_json_text(text);
}

namespace {

// Pearson correlation; identical vectors (including constant ones) count as
// perfectly correlated, any other zero-variance input as uncorrelated.
double pearson(const std::vector<double>& x, const std::vector<double>& y) {
    const size_t n = x.size();
    const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
    const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
    double sxy = 0, sxx = 0, syy = 0;
    for (size_t i = 0; i < n; ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) return x == y ? 1.0 : 0.0;
    return sxy / std::sqrt(sxx * syy);
}

// Average ranks (1-based), ties share the mean of their positions.
std::vector<double> average_ranks(const std::vector<double>& v) {
    std::vector<size_t> order(v.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(v.size());
    size_t i = 0;
    while (i < order.size()) {
        size_t j = i;
        while (j < order.size() && v[order[j]] == v[order[i]]) ++j;
        const double r = 0.5 * (static_cast<double>(i) + static_cast<double>(j - 1)) + 1.0;
        for (size_t k = i; k < j; ++k) ranks[order[k]] = r;
        i = j;
    }
    return ranks;
}

}  // namespace

SalienceComparison compare_salience(const SalienceTable& a, const SalienceTable& b,
                                    const std::vector<int>& k_list) {
    if (a.entries.size() != b.entries.size())
        throw ValidationError("salience tables cover different grids");
    std::vector<double> va, vb;
    for (const auto& [key, value] : a.entries) {
        auto it = b.entries.find(key);
        if (it == b.entries.end())
            throw ValidationError("salience tables cover different grids: missing " + key.kind);
        va.push_back(value);
        vb.push_back(it->second);
    }

    SalienceComparison cmp;
    cmp.pearson = pearson(va, vb);
    cmp.spearman = pearson(average_ranks(va), average_ranks(vb));

    // Indices are already in (kind, layer) order, so a stable sort by value
    // breaks ties exactly as documented.
    auto top = [&](const std::vector<double>& v, size_t k) {
        std::vector<size_t> order(v.size());
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(),
                         [&](size_t x, size_t y) { return v[x] > v[y]; });
        order.resize(std::min(k, order.size()));
        std::sort(order.begin(), order.end());
        return order;
    };
    for (int k : k_list) {
        if (k < 1) throw ValidationError("top-k size must be at least 1");
        const auto ta = top(va, static_cast<size_t>(k));
        const auto tb = top(vb, static_cast<size_t>(k));
        std::vector<size_t> both;
        std::set_intersection(ta.begin(), ta.end(), tb.begin(), tb.end(), std::back_inserter(both));
        cmp.top_k_overlap[k] = static_cast<int>(both.size());
    }
    return cmp;
}

}  // namespace crane
