#pragma once

#include <compare>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "crane/micro_transformer.hpp"
#include "crane/model_schema.hpp"
#include "crane/tensor_archive.hpp"

namespace crane {

// Per-coordinate gate inputs for one tensor. p_j > 0 only where both losses
// improve to first order, i.e. s_r(j) > 0 and s_a(j) > 0.
struct CoordinateScores {
    std::vector<double> s_r, s_a, p;
};

// s_K(j) = -g_{K,j} * delta_j; p_j = max(0, min(s_r(j), s_a(j))).
// All three inputs must cover the same tensor names with matching shapes.
std::map<std::string, CoordinateScores> coordinate_scores(const GradientSet& g_r,
                                                          const GradientSet& g_a,
                                                          const TensorMap& delta,
                                                          int threads = 1);

// Pseudo-kind for the per-layer normalization block (FFN/expert gate+up+down
// union); its coefficient is exactly 1 by construction.
inline constexpr const char* kAnchorKind = "anchor";

// Rows are keyed by component-kind name plus layer; kGlobalLayer marks the
// "global" row used by embedding and lm_head.
struct SalienceKey {
    std::string kind;
    int layer = kGlobalLayer;

    auto operator<=>(const SalienceKey&) const = default;
};

struct SalienceTable {
    std::map<SalienceKey, double> entries;
    std::map<int, double> anchor_norms;  // layer -> ||anchor||_F; kGlobalLayer -> layer mean
    std::string calibration_note;        // recorded by the CLI; free-form
    bool arch_normalized = false;
    std::vector<std::string> warnings;   // in-memory only, never serialized

    double at(const std::string& kind, int layer) const;

    std::string to_json_text() const;
    std::string to_csv_text() const;  // kind x layer grid, heatmap-ready
    static SalienceTable from_json_text(const std::string& text);
    void save(const std::filesystem::path& path) const;
    static SalienceTable load(const std::filesystem::path& path);
};

// Blockwise aggregation: one coefficient per (kind, layer), expert replicas
// of a kind pooled together, normalized against the layer anchor block.
// Global components divide by the mean of the per-layer anchor references.
SalienceTable aggregate(const std::map<std::string, CoordinateScores>& scores,
                        const BoundSchema& bound, const TensorMap& inst);

// Divide mixer-kind rows by kappa of their layer's mixer family; everything
// else (FFN, norms, router, globals, the anchor row) is left untouched.
SalienceTable arch_normalize(const SalienceTable& table, const BoundSchema& bound);

struct SalienceComparison {
    double pearson = 0.0;
    double spearman = 0.0;
    std::map<int, int> top_k_overlap;  // k -> |top-k(a) intersect top-k(b)|
};

// Both tables must cover the same (kind, layer) grid. Top-k ties are broken
// by (kind name, layer) so reports are reproducible.
SalienceComparison compare_salience(const SalienceTable& a, const SalienceTable& b,
                                    const std::vector<int>& k_list);

}  // namespace crane
