#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "crane/merge_engine.hpp"
#include "crane/micro_transformer.hpp"
#include "crane/model_schema.hpp"

namespace crane {

// Recipe for a planted-structure checkpoint pair. The planted delta lives on
// the FFN block: `support_per_tensor` coordinates per anchor-kind tensor get
// large edits (above the 75th percentile of the base magnitudes), and with
// `with_noise` every remaining coordinate of those tensors gets a small
// constant-magnitude edit below the 25th percentile. One constant magnitude
// means the per-tensor median of |delta| IS the noise level, so the strict
// median gate removes the noise set exactly — a provable, not probabilistic,
// construction.
struct PlantingSpec {
    int support_per_tensor = 4;
    int format_rank = 2;
    bool with_noise = true;
    uint64_t seed = 1;

    void validate() const;
};

struct PlantedPair {
    MicroConfig config;
    TensorMap inst, think;
    // Planted tensor -> sorted flat coordinates of the reasoning support.
    std::map<std::string, std::vector<size_t>> support;
    // Residual space -> d x format_rank orthonormal basis.
    std::map<std::string, Eigen::MatrixXd> format_basis;
    uint64_t seed = 0;
};

// Deterministic per (config, spec). Planted tensors are re-quantized to a
// 2^-10 grid and stored as f64 so every sum below is exact and the pair
// recovers its delta bit-for-bit.
PlantedPair plant_pair(const MicroConfig& config, const PlantingSpec& spec);

// Projectors built from activations planted to lie exactly in the pair's
// format bases; every other collected space becomes identity. All retained
// amplitude ratios sit far above 2*tau, so the protection weights saturate.
GspProjectorSet planted_projectors(const PlantedPair& pair, const BoundSchema& bound, double tau);

struct VerificationReport {
    double stage1_noise_removal_rate = 0.0;
    double ctg_selectivity = 0.0;
    double gsp_energy_ratio = 0.0;
    double min_protection_weight = 0.0;

    bool stage1_pass = false;
    bool ctg_pass = false;
    bool gsp_pass = false;
    bool end_to_end_support = false;  // every edited coordinate lies in the support
    bool pass = false;

    std::string to_json_text() const;
    std::string to_table_text() const;
};

// Oracle run of the full pipeline over a planted pair: real NLL gradients
// with sign-controlled overrides on the planted coordinates, planted format
// projectors, and a crane_merge consistency pass.
VerificationReport verify_pipeline(const PlantedPair& pair, const MergeConfig& cfg,
                                   int threads = 1);

}  // namespace crane
