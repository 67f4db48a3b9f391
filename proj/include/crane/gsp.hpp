#pragma once

#include <Eigen/Dense>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "crane/calibration.hpp"
#include "crane/micro_transformer.hpp"
#include "crane/model_schema.hpp"

namespace crane {

// Protected activations for one space, one row per neighborhood position.
struct ActivationMatrix {
    std::string space;
    Eigen::MatrixXd rows;  // N_q x d_q
};

struct GspProjector {
    std::string space;
    Eigen::MatrixXd V;      // d_q x r, orthonormal columns
    Eigen::VectorXd sigma;  // non-increasing, positive after rank truncation
    Eigen::VectorXd w;      // protection weights in (0, 1)
    double tau = 0.0;
    double k = 0.0;
};

struct GspProjectorSet {
    std::map<std::string, GspProjector> projectors;
    std::set<std::string> identity_spaces;  // collected nothing usable; edits pass through
    double tau = 0.0;
    double k = 0.0;
    int rho = 0;

    // Returns nullptr for identity spaces, throws for unknown ones.
    const GspProjector* find(const std::string& space) const;

    // Writes "{space}.V/.sigma/.w" tensors plus a "<path>.json" sidecar.
    void save(const std::filesystem::path& archive_path) const;
    static GspProjectorSet load(const std::filesystem::path& archive_path);
};

// k = ln(99) / tau: places the sigmoid at 0.01 / 0.5 / 0.99 for amplitudes
// 0 / tau / 2*tau.
double gsp_steepness(double tau);

// Clamped sigmoid in amplitude a = sigma_r / sigma_1. The exp argument is
// capped at +-60 and the weight at (1e-12, 1 - 1e-12); k ~ 153 would
// otherwise overflow for amplitudes far from tau.
double gsp_weight(double a, double tau);

// Rows in (example, position) order following the neighborhood. With
// require_all (the default) every neighborhood position must have been
// captured; routed expert spaces legitimately yield subsets, so callers pass
// false for those and take whatever rows exist.
ActivationMatrix build_activation_matrix(const std::vector<ForwardTrace>& traces,
                                         const std::string& space, const Neighborhood& hood,
                                         bool require_all = true);

// Thin SVD via the d x d Gram matrix when rows outnumber columns; nullopt is
// the identity marker (no rows, or a numerically zero spectrum).
std::optional<GspProjector> build_projector(const ActivationMatrix& H, double tau);

// Pi(Delta) = Delta - Delta V diag(w) V^T. Delta carries the protected input
// dimension on columns; orient first if it is stored the other way round.
Eigen::MatrixXd project(const Eigen::MatrixXd& delta, const GspProjector& proj);

// Layout normalization between the two 2-D storage conventions. Pure
// transposition; no arithmetic happens here.
Eigen::MatrixXd orient_input_right(const Eigen::MatrixXd& m, InputSide side);
Eigen::MatrixXd restore_orientation(const Eigen::MatrixXd& m, InputSide side);

// ||H Delta^T||_F^2, the local format-preservation surrogate.
double format_energy(const Eigen::MatrixXd& delta, const ActivationMatrix& H);
// Same quantity through the spectrum: sum_r sigma_r^2 ||Delta v_r||^2.
double format_energy_spectral(const Eigen::MatrixXd& delta, const GspProjector& proj);
// Post-projection energy: sum_r sigma_r^2 (1 - w_r)^2 ||Delta v_r||^2.
double post_energy_spectral(const Eigen::MatrixXd& delta, const GspProjector& proj);

// Archive bridging for 2-D (or 1-D, treated as a single row) tensors.
Eigen::MatrixXd matrix_from_tensor(const Tensor& t);
Tensor tensor_from_matrix_f64(const Eigen::MatrixXd& m);

}  // namespace crane
