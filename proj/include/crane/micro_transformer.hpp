#pragma once

#include <Eigen/Dense>
#include <map>
#include <string>
#include <vector>

#include "crane/calibration.hpp"
#include "crane/model_schema.hpp"
#include "crane/tensor_archive.hpp"

namespace crane {

struct MicroConfig {
    int vocab = 64;
    int d_model = 8;
    int n_layers = 2;
    int n_heads = 2;
    int ffn_mult = 2;
    int moe_experts = 0;                      // 0 = dense FFN
    std::vector<MixerFamily> mixer_families;  // per layer; empty = all full_attention
    uint64_t seed = 1;

    bool moe() const { return moe_experts > 0; }
    int ffn_dim() const { return ffn_mult * d_model; }
    int head_dim() const { return d_model / n_heads; }
    MixerFamily family(int layer) const {
        return mixer_families.empty() ? MixerFamily::full_attention
                                      : mixer_families[static_cast<size_t>(layer)];
    }
    void validate() const;

    static MicroConfig from_json_text(const std::string& text);
    static MicroConfig load(const std::filesystem::path& path);
    std::string to_json_text() const;
    void save(const std::filesystem::path& path) const;
};

// Schema whose rules/anchor/family cycle match this config's tensor naming.
ModelSchema schema_for(const MicroConfig& config);

struct CapturedVector {
    int position = 0;
    std::vector<double> values;
};

struct ForwardTrace {
    Eigen::MatrixXd logits;  // seq x vocab
    std::map<std::string, std::vector<CapturedVector>> captured;
};

// capture: activation-space id -> sorted positions wanted. Vectors are taken
// immediately before the linear map that owns the space. Expert down_in
// spaces only yield the requested positions actually routed to that expert.
ForwardTrace forward(const TensorMap& params, const MicroConfig& config,
                     const std::vector<int>& tokens,
                     const std::map<std::string, std::vector<int>>& capture = {});

// Deterministic seeded init: per-tensor SplitMix64 stream keyed by
// seed ^ fnv1a64(name), normal draws scaled by 1/sqrt(fan_in); norm weights 1.
TensorMap init_params(const MicroConfig& config);

// Masked mean NLL of next-token targets: positions s with mask[s]=1 contribute
// -log p(tokens[s] | tokens[<s]). mask[0] must be 0 (no preceding context).
double masked_nll(const TensorMap& params, const MicroConfig& config,
                  const CalibrationExample& example);

// Token-weighted dataset loss: global M = total masked positions.
double dataset_nll(const TensorMap& params, const MicroConfig& config,
                   const std::vector<CalibrationExample>& dataset);

struct GradientSet {
    TensorMap tensors;  // f64, same names/shapes as the parameter map
};

// Exact reverse-mode gradient of dataset_nll. Per-example work may fan out
// over threads; the final accumulation is a fixed-order sequential reduction.
GradientSet gradients(const TensorMap& params, const MicroConfig& config,
                      const std::vector<CalibrationExample>& dataset, int threads = 1);

}  // namespace crane
