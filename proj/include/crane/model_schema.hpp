#pragma once

#include <compare>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "crane/tensor_archive.hpp"

namespace crane {

enum class ComponentKind {
    q_proj, k_proj, v_proj, o_proj,
    expert_gate, expert_up, expert_down,
    dense_gate, dense_up, dense_down,
    router, norm, lm_head, embedding, mixer_inner,
};

const char* kind_name(ComponentKind k);
ComponentKind kind_from_name(const std::string& s);
bool kind_wants_expert(ComponentKind k);  // expert_{gate,up,down}
bool is_mixer_kind(ComponentKind k);      // q/k/v/o_proj, mixer_inner

// Layer index for tensors outside the per-layer stack (embedding, lm_head, ...).
inline constexpr int kGlobalLayer = -1;

struct ComponentId {
    int layer = kGlobalLayer;
    ComponentKind kind = ComponentKind::norm;
    int expert_index = -1;  // -1 = none

    auto operator<=>(const ComponentId&) const = default;
};

enum class MixerFamily { full_attention, linear_attention, none };

const char* family_name(MixerFamily f);
MixerFamily family_from_name(const std::string& s);

// Which axis of a 2-D weight consumes the activation the projector protects.
// "right" covers the usual [out, in] storage where y = x * W^T.
enum class InputSide { right, left };

const char* input_side_name(InputSide s);
InputSide input_side_from_name(const std::string& s);

// Name patterns are literal text with "{layer}" and optionally "{expert}"
// digit captures; no general regex.
struct SchemaRule {
    std::string pattern;
    ComponentKind kind = ComponentKind::norm;
    std::string space;  // activation-space id pattern; "" = no collected space
    InputSide input_side = InputSide::right;
};

struct ModelSchema {
    std::string name;
    std::vector<SchemaRule> rules;
    std::vector<ComponentKind> anchor_kinds;   // kinds forming the per-layer anchor
    std::vector<MixerFamily> family_cycle;     // layer l -> cycle[l % size]
    std::map<std::string, double> kappa;       // family name -> kappa; absent = 1.0
    std::string reference_family;

    static ModelSchema preset(const std::string& preset_name);  // micro-dense/-moe/-hybrid
    static ModelSchema from_json_text(const std::string& text);
    static ModelSchema load(const std::filesystem::path& path);
    std::string to_json_text() const;
    void save(const std::filesystem::path& path) const;
};

struct BoundEntry {
    ComponentId component;
    MixerFamily family = MixerFamily::none;  // none for non-mixer tensors
    std::string space;                       // resolved activation-space id, "" = none
    InputSide input_side = InputSide::right;
};

struct BoundSchema {
    std::map<std::string, BoundEntry> entries;
    int n_layers = 0;
    std::vector<MixerFamily> layer_family;   // resolved mixer family per layer
    std::vector<ComponentKind> anchor_kinds;
    std::map<std::string, double> kappa;     // family name -> kappa; absent = 1.0

    const BoundEntry& at(const std::string& name) const;
    // Anchor tensor names for a layer, sorted (union across experts for MoE).
    std::vector<std::string> anchor_names(int layer) const;
    double kappa_for(MixerFamily family) const;  // 1.0 when unlisted
};

BoundSchema bind(const ModelSchema& schema, const std::vector<std::string>& names);
BoundSchema bind(const ModelSchema& schema, const TensorArchive& archive);
BoundSchema bind(const ModelSchema& schema, const TensorMap& tensors);

// mu: family name -> number of layers whose mixer has that family.
std::map<std::string, int> occupation_counts(const BoundSchema& bound);

// kappa(f) = mu(f) / mu(reference); kappa(reference) = 1 exactly.
std::map<std::string, double> kappa_from_occupation(const std::map<std::string, int>& occupation,
                                                    const std::string& reference);

// kappa(f) = (mu(f) * scale(f)) / (mu(ref) * scale(ref)).
std::map<std::string, double> kappa_measured(const std::map<std::string, int>& occupation,
                                             const std::map<std::string, double>& perturbation_scale,
                                             const std::string& reference);

}  // namespace crane
