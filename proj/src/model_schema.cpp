#include "crane/model_schema.hpp"

#include <algorithm>
#include <fstream>

#include "json.hpp"

#include "crane/errors.hpp"

namespace crane {

using nlohmann::json;

namespace {

const std::pair<ComponentKind, const char*> kKindNames[] = {
    {ComponentKind::q_proj, "q_proj"},
    {ComponentKind::k_proj, "k_proj"},
    {ComponentKind::v_proj, "v_proj"},
    {ComponentKind::o_proj, "o_proj"},
    {ComponentKind::expert_gate, "expert_gate"},
    {ComponentKind::expert_up, "expert_up"},
    {ComponentKind::expert_down, "expert_down"},
    {ComponentKind::dense_gate, "dense_gate"},
    {ComponentKind::dense_up, "dense_up"},
    {ComponentKind::dense_down, "dense_down"},
    {ComponentKind::router, "router"},
    {ComponentKind::norm, "norm"},
    {ComponentKind::lm_head, "lm_head"},
    {ComponentKind::embedding, "embedding"},
    {ComponentKind::mixer_inner, "mixer_inner"},
};

}  // namespace

const char* kind_name(ComponentKind k) {
    for (const auto& [kind, name] : kKindNames)
        if (kind == k) return name;
    return "?";
}

ComponentKind kind_from_name(const std::string& s) {
    for (const auto& [kind, name] : kKindNames)
        if (s == name) return kind;
    throw ValidationError("unknown component kind \"" + s + "\"");
}

bool kind_wants_expert(ComponentKind k) {
    return k == ComponentKind::expert_gate || k == ComponentKind::expert_up ||
           k == ComponentKind::expert_down;
}

bool is_mixer_kind(ComponentKind k) {
    return k == ComponentKind::q_proj || k == ComponentKind::k_proj ||
           k == ComponentKind::v_proj || k == ComponentKind::o_proj ||
           k == ComponentKind::mixer_inner;
}

const char* family_name(MixerFamily f) {
    switch (f) {
        case MixerFamily::full_attention: return "full_attention";
        case MixerFamily::linear_attention: return "linear_attention";
        default: return "none";
    }
}

MixerFamily family_from_name(const std::string& s) {
    if (s == "full_attention") return MixerFamily::full_attention;
    if (s == "linear_attention") return MixerFamily::linear_attention;
    if (s == "none") return MixerFamily::none;
    throw ValidationError("unknown mixer family \"" + s + "\"");
}

const char* input_side_name(InputSide s) { return s == InputSide::left ? "left" : "right"; }

InputSide input_side_from_name(const std::string& s) {
    if (s == "right") return InputSide::right;
    if (s == "left") return InputSide::left;
    throw ValidationError("unknown input side \"" + s + "\" (expected \"left\" or \"right\")");
}

namespace {

// Match a literal-with-captures pattern against a name. "{layer}" and
// "{expert}" each consume one run of digits; everything else is literal.
bool match_pattern(const std::string& pattern, const std::string& name, int* layer, int* expert) {
    size_t pi = 0, ni = 0;
    *layer = kGlobalLayer;
    *expert = -1;
    while (pi < pattern.size()) {
        if (pattern[pi] == '{') {
            const size_t close = pattern.find('}', pi);
            if (close == std::string::npos) throw ValidationError("unclosed capture in pattern " + pattern);
            const std::string cap = pattern.substr(pi + 1, close - pi - 1);
            size_t start = ni;
            long long val = 0;
            while (ni < name.size() && name[ni] >= '0' && name[ni] <= '9') {
                val = val * 10 + (name[ni] - '0');
                if (val > 1'000'000) return false;  // silly index, not a real capture
                ++ni;
            }
            if (ni == start) return false;
            if (cap == "layer") *layer = static_cast<int>(val);
            else if (cap == "expert") *expert = static_cast<int>(val);
            else throw ValidationError("unknown capture {" + cap + "} in pattern " + pattern);
            pi = close + 1;
        } else {
            if (ni >= name.size() || name[ni] != pattern[pi]) return false;
            ++pi;
            ++ni;
        }
    }
    return ni == name.size();
}

std::string substitute(const std::string& tmpl, int layer, int expert) {
    std::string out;
    size_t i = 0;
    while (i < tmpl.size()) {
        if (tmpl[i] == '{') {
            const size_t close = tmpl.find('}', i);
            const std::string cap = tmpl.substr(i + 1, close - i - 1);
            if (cap == "layer") out += std::to_string(layer);
            else if (cap == "expert") out += std::to_string(expert);
            else throw ValidationError("unknown capture {" + cap + "} in space " + tmpl);
            i = close + 1;
        } else {
            out += tmpl[i++];
        }
    }
    return out;
}

void validate_schema(const ModelSchema& s) {
    if (s.rules.empty()) throw ValidationError("schema has no rules");
    if (s.anchor_kinds.empty()) throw ValidationError("schema has no anchor kinds");
    for (const auto& r : s.rules) {
        const bool has_expert = r.pattern.find("{expert}") != std::string::npos;
        if (kind_wants_expert(r.kind) != has_expert)
            throw ValidationError("rule \"" + r.pattern + "\": expert capture must be present iff the kind is an expert kind");
    }
}

}  // namespace

BoundSchema bind(const ModelSchema& schema, const std::vector<std::string>& names) {
    validate_schema(schema);
    BoundSchema bound;
    bound.anchor_kinds = schema.anchor_kinds;

    int max_layer = kGlobalLayer;
    for (const auto& name : names) {
        const SchemaRule* hit = nullptr;
        int layer = kGlobalLayer, expert = -1;
        for (const auto& rule : schema.rules) {
            int l, e;
            if (!match_pattern(rule.pattern, name, &l, &e)) continue;
            if (hit != nullptr)
                throw ValidationError("ambiguous match for tensor \"" + name + "\": patterns \"" +
                                      hit->pattern + "\" and \"" + rule.pattern + "\"");
            hit = &rule;
            layer = l;
            expert = e;
        }
        if (hit == nullptr) throw ValidationError("unmatched tensor name \"" + name + "\"");

        BoundEntry entry;
        entry.component.layer = layer;
        entry.component.kind = hit->kind;
        entry.component.expert_index = expert;
        if (is_mixer_kind(hit->kind) && layer != kGlobalLayer && !schema.family_cycle.empty())
            entry.family = schema.family_cycle[static_cast<size_t>(layer) % schema.family_cycle.size()];
        if (!hit->space.empty()) entry.space = substitute(hit->space, layer, expert);
        entry.input_side = hit->input_side;
        bound.entries.emplace(name, std::move(entry));
        max_layer = std::max(max_layer, layer);
    }
    bound.kappa = schema.kappa;

    bound.n_layers = max_layer + 1;
    bound.layer_family.resize(bound.n_layers, MixerFamily::none);
    for (int l = 0; l < bound.n_layers; ++l)
        if (!schema.family_cycle.empty())
            bound.layer_family[l] = schema.family_cycle[static_cast<size_t>(l) % schema.family_cycle.size()];

    for (int l = 0; l < bound.n_layers; ++l)
        if (bound.anchor_names(l).empty())
            throw ValidationError("layer " + std::to_string(l) + " has no anchor tensors");
    return bound;
}

BoundSchema bind(const ModelSchema& schema, const TensorArchive& archive) {
    return bind(schema, archive.names());
}

BoundSchema bind(const ModelSchema& schema, const TensorMap& tensors) {
    std::vector<std::string> names;
    names.reserve(tensors.size());
    for (const auto& [name, t] : tensors) names.push_back(name);
    return crane::bind(schema, names);
}

const BoundEntry& BoundSchema::at(const std::string& name) const {
    auto it = entries.find(name);
    if (it == entries.end()) throw ValidationError("tensor \"" + name + "\" not in bound schema");
    return it->second;
}

std::vector<std::string> BoundSchema::anchor_names(int layer) const {
    std::vector<std::string> out;
    for (const auto& [name, entry] : entries) {
        if (entry.component.layer != layer) continue;
        if (std::find(anchor_kinds.begin(), anchor_kinds.end(), entry.component.kind) !=
            anchor_kinds.end())
            out.push_back(name);
    }
    return out;  // map iteration is already sorted
}

double BoundSchema::kappa_for(MixerFamily family) const {
    if (family == MixerFamily::none) return 1.0;
    auto it = kappa.find(family_name(family));
    return it == kappa.end() ? 1.0 : it->second;
}

std::map<std::string, int> occupation_counts(const BoundSchema& bound) {
    std::map<std::string, int> mu;
    mu[family_name(MixerFamily::full_attention)] = 0;
    mu[family_name(MixerFamily::linear_attention)] = 0;
    for (int l = 0; l < bound.n_layers; ++l) {
        const MixerFamily f = bound.layer_family[l];
        if (f != MixerFamily::none) ++mu[family_name(f)];
    }
    return mu;
}

std::map<std::string, double> kappa_from_occupation(const std::map<std::string, int>& occupation,
                                                    const std::string& reference) {
    auto ref = occupation.find(reference);
    if (ref == occupation.end() || ref->second <= 0)
        throw ValidationError("reference family \"" + reference + "\" has zero occupation");
    std::map<std::string, double> kappa;
    for (const auto& [fam, mu] : occupation)
        kappa[fam] = fam == reference ? 1.0
                                      : static_cast<double>(mu) / static_cast<double>(ref->second);
    return kappa;
}

std::map<std::string, double> kappa_measured(const std::map<std::string, int>& occupation,
                                             const std::map<std::string, double>& perturbation_scale,
                                             const std::string& reference) {
    auto ref = occupation.find(reference);
    if (ref == occupation.end() || ref->second <= 0)
        throw ValidationError("reference family \"" + reference + "\" has zero occupation");
    auto scale_of = [&](const std::string& fam) {
        auto it = perturbation_scale.find(fam);
        if (it == perturbation_scale.end())
            throw ValidationError("no perturbation scale for family \"" + fam + "\"");
        if (!(it->second > 0)) throw ValidationError("non-positive perturbation scale for \"" + fam + "\"");
        return it->second;
    };
    const double ref_term = static_cast<double>(ref->second) * scale_of(reference);
    std::map<std::string, double> kappa;
    for (const auto& [fam, mu] : occupation) {
        if (fam == reference) {
            kappa[fam] = 1.0;
            continue;
        }
        // Families with zero occupation keep kappa 0 without needing a scale.
        kappa[fam] = mu == 0 ? 0.0 : static_cast<double>(mu) * scale_of(fam) / ref_term;
    }
    return kappa;
}

// ---- JSON (de)serialization and presets ----

namespace {

ModelSchema schema_from_json(const json& j) {
    ModelSchema s;
    s.name = j.value("name", "");
    s.reference_family = j.value("reference_family", "full_attention");
    for (const auto& f : j.value("families", json::array()))
        s.family_cycle.push_back(family_from_name(f.get<std::string>()));
    for (const auto& a : j.at("anchor"))
        s.anchor_kinds.push_back(kind_from_name(a.get<std::string>()));
    if (j.contains("kappa"))
        for (auto it = j.at("kappa").begin(); it != j.at("kappa").end(); ++it)
            s.kappa[it.key()] = it.value().get<double>();
    for (const auto& r : j.at("rules")) {
        SchemaRule rule;
        rule.pattern = r.at("pattern").get<std::string>();
        rule.kind = kind_from_name(r.at("kind").get<std::string>());
        rule.space = r.value("space", "");
        rule.input_side = input_side_from_name(r.value("input_side", "right"));
        s.rules.push_back(std::move(rule));
    }
    validate_schema(s);
    return s;
}

json schema_to_json(const ModelSchema& s) {
    json j;
    j["name"] = s.name;
    j["reference_family"] = s.reference_family;
    json fams = json::array();
    for (MixerFamily f : s.family_cycle) fams.push_back(family_name(f));
    j["families"] = fams;
    json anchor = json::array();
    for (ComponentKind k : s.anchor_kinds) anchor.push_back(kind_name(k));
    j["anchor"] = anchor;
    if (!s.kappa.empty()) j["kappa"] = s.kappa;
    json rules = json::array();
    for (const auto& r : s.rules) {
        json jr;
        jr["pattern"] = r.pattern;
        jr["kind"] = kind_name(r.kind);
        if (!r.space.empty()) jr["space"] = r.space;
        if (r.input_side != InputSide::right) jr["input_side"] = input_side_name(r.input_side);
        rules.push_back(std::move(jr));
    }
    j["rules"] = rules;
    return j;
}

void push_common_rules(ModelSchema& s) {
    s.rules.push_back({"embed.weight", ComponentKind::embedding, ""});
    s.rules.push_back({"layers.{layer}.attn_norm.weight", ComponentKind::norm, ""});
    s.rules.push_back({"layers.{layer}.q_proj.weight", ComponentKind::q_proj, "layers.{layer}.attn_in"});
    s.rules.push_back({"layers.{layer}.k_proj.weight", ComponentKind::k_proj, "layers.{layer}.attn_in"});
    s.rules.push_back({"layers.{layer}.v_proj.weight", ComponentKind::v_proj, "layers.{layer}.attn_in"});
    s.rules.push_back({"layers.{layer}.o_proj.weight", ComponentKind::o_proj, "layers.{layer}.o_in"});
    s.rules.push_back({"layers.{layer}.mlp_norm.weight", ComponentKind::norm, ""});
    s.rules.push_back({"final_norm.weight", ComponentKind::norm, ""});
    s.rules.push_back({"lm_head.weight", ComponentKind::lm_head, "lm_head_in"});
}

void push_dense_ffn_rules(ModelSchema& s) {
    s.rules.push_back({"layers.{layer}.ffn.gate.weight", ComponentKind::dense_gate, "layers.{layer}.mlp_in"});
    s.rules.push_back({"layers.{layer}.ffn.up.weight", ComponentKind::dense_up, "layers.{layer}.mlp_in"});
    s.rules.push_back({"layers.{layer}.ffn.down.weight", ComponentKind::dense_down, "layers.{layer}.mlp_inner"});
}

void push_moe_ffn_rules(ModelSchema& s) {
    s.rules.push_back({"layers.{layer}.router.weight", ComponentKind::router, "layers.{layer}.mlp_in"});
    s.rules.push_back({"layers.{layer}.experts.{expert}.gate.weight", ComponentKind::expert_gate, "layers.{layer}.mlp_in"});
    s.rules.push_back({"layers.{layer}.experts.{expert}.up.weight", ComponentKind::expert_up, "layers.{layer}.mlp_in"});
    s.rules.push_back({"layers.{layer}.experts.{expert}.down.weight", ComponentKind::expert_down, "layers.{layer}.experts.{expert}.down_in"});
}

}  // namespace

ModelSchema ModelSchema::preset(const std::string& preset_name) {
    ModelSchema s;
    s.name = preset_name;
    s.reference_family = "full_attention";
    if (preset_name == "micro-dense") {
        s.family_cycle = {MixerFamily::full_attention};
        s.anchor_kinds = {ComponentKind::dense_gate, ComponentKind::dense_up, ComponentKind::dense_down};
        push_common_rules(s);
        push_dense_ffn_rules(s);
    } else if (preset_name == "micro-moe") {
        s.family_cycle = {MixerFamily::full_attention};
        s.anchor_kinds = {ComponentKind::expert_gate, ComponentKind::expert_up, ComponentKind::expert_down};
        push_common_rules(s);
        push_moe_ffn_rules(s);
    } else if (preset_name == "micro-hybrid") {
        // 3:1 linear:full repeating stack.
        s.family_cycle = {MixerFamily::linear_attention, MixerFamily::linear_attention,
                          MixerFamily::linear_attention, MixerFamily::full_attention};
        s.anchor_kinds = {ComponentKind::dense_gate, ComponentKind::dense_up, ComponentKind::dense_down};
        push_common_rules(s);
        push_dense_ffn_rules(s);
    } else {
        throw ValidationError("unknown schema preset \"" + preset_name + "\"");
    }
    return s;
}

ModelSchema ModelSchema::from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ValidationError(std::string("bad schema JSON: ") + e.what());
    }
    try {
        return schema_from_json(j);
    } catch (const json::exception& e) {
        throw ValidationError(std::string("bad schema JSON: ") + e.what());
    }
}

ModelSchema ModelSchema::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open schema " + path.string());
    std::string text((std::istreambuf_iterator<char>(in)), {});
    return from_json_text(text);
}

std::string ModelSchema::to_json_text() const {
    return schema_to_json(*this).dump(2);
}

void ModelSchema::save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot create schema " + path.string());
    out << to_json_text() << "\n";
    if (!out) throw IoError("short write on " + path.string());
}

}  // namespace crane
