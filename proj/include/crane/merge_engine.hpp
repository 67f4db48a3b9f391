#pragma once

#include <map>
#include <string>
#include <vector>

#include "crane/calibration.hpp"
#include "crane/gsp.hpp"
#include "crane/micro_transformer.hpp"
#include "crane/model_schema.hpp"
#include "crane/taylor_gate.hpp"
#include "crane/tensor_archive.hpp"

namespace crane {

struct MergeConfig {
    double alpha = 0.25;
    double tau = 0.03;
    int rho = 2;
    bool use_sparsifier = true;  // ablation switches; off = identity for that stage
    bool use_taylor = true;
    bool use_gsp = true;
    bool arch_normalize = false;  // must agree with the salience table handed in

    void validate() const;  // alpha >= 0 (0 is the degenerate no-edit case)
};

// Per-run accounting emitted alongside the merged archive.
struct MergeStats {
    uint64_t total_coords = 0;
    uint64_t surviving_coords = 0;
    double sparsify_survival = 1.0;               // surviving / total; 1 with the stage off
    std::map<SalienceKey, double> salience_used;  // (kind, layer) -> coefficient applied
    std::map<std::string, double> mean_w;         // space -> mean protection weight

    std::string to_json_text() const;
};

// Three-stage edit: theta_inst + Pi(alpha * S * T(delta)), stages bypassable.
// salience may be null only with use_taylor off, projectors null only with
// use_gsp off. Output tensors keep the instruct dtype.
TensorMap crane_merge(const TensorMap& inst, const TensorMap& think, const BoundSchema& schema,
                      const SalienceTable* salience, const GspProjectorSet* projectors,
                      const MergeConfig& cfg, MergeStats* stats = nullptr, int threads = 1);

// merged = inst + alpha * (think - inst).
TensorMap task_arithmetic(const TensorMap& inst, const TensorMap& think, double alpha,
                          int threads = 1);

// Trim the delta to the top-density fraction by magnitude (per tensor, ties
// broken by index), then add alpha times the trimmed delta. With one task
// vector, sign election and disjoint averaging are identities, so trimming is
// the whole story.
TensorMap ties_merge(const TensorMap& inst, const TensorMap& think, double alpha, double density,
                     int threads = 1);

// Per-tensor spherical interpolation of the flattened weights; linear
// fallback when the angle is below 1e-7 or either side has zero norm.
// t=0 and t=1 return the endpoints byte-exactly (t=1 up to dtype rounding).
TensorMap slerp_merge(const TensorMap& inst, const TensorMap& think, double t, int threads = 1);

enum class BaselineMethod { task_arithmetic, ties, slerp, aim_ta, aim_ties };

const char* method_name(BaselineMethod m);
BaselineMethod method_from_name(const std::string& s);

struct BaselineConfig {
    BaselineMethod method = BaselineMethod::task_arithmetic;
    double alpha = 0.30;
    double t = 0.30;
    double density = 0.50;
    double omega = 0.40;
    // Tensor name -> recorded input-channel activation magnitudes (AIM only).
    std::map<std::string, std::vector<double>> importance;

    void validate() const;
};

// Column-wise relaxation r_j = 1 - (1 - omega) * m_j / max(m) on an
// [out, in] update; unchanged when max(m) = 0.
Eigen::MatrixXd aim_relax(const Eigen::MatrixXd& update, const std::vector<double>& m,
                          double omega);

// Base-rule update (task arithmetic or TIES by cfg.method), AIM-relaxed
// column-wise, added to inst. 1-D tensors are exempt by definition; a 2-D
// tensor without an importance vector keeps its unrelaxed update and is
// reported through `warnings`.
TensorMap aim_merge(const TensorMap& inst, const TensorMap& think, const BaselineConfig& cfg,
                    std::vector<std::string>* warnings = nullptr, int threads = 1);

// Dispatch on cfg.method.
TensorMap baseline_merge(const TensorMap& inst, const TensorMap& think, const BaselineConfig& cfg,
                         std::vector<std::string>* warnings = nullptr, int threads = 1);

// Mean |activation| per input channel, one vector per tensor that owns an
// activation space, recorded by running the instruct weights over `dataset`.
std::map<std::string, std::vector<double>> aim_importance(
    const TensorMap& params, const MicroConfig& config, const BoundSchema& bound,
    const std::vector<CalibrationExample>& dataset);

// Weighted token count: n_input + 0.1 * n_cached + 5 * n_output.
double ttc(double n_input, double n_cached, double n_output);

// "181.1M"-style rendering used by the cost tables.
std::string format_millions(double value);

}  // namespace crane
