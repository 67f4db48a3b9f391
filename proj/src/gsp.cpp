#include "crane/gsp.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include "json.hpp"

#include "crane/errors.hpp"

using Eigen::MatrixXd;
using Eigen::VectorXd;
using nlohmann::json;

namespace crane {

double gsp_steepness(double tau) {
    if (!(tau > 0.0 && tau < 1.0)) throw ValidationError("tau must lie in (0, 1)");
    return std::log(99.0) / tau;
}

double gsp_weight(double a, double tau) {
    const double k = gsp_steepness(tau);
    const double arg = std::clamp(k * (a - tau), -60.0, 60.0);
    const double w = 1.0 / (1.0 + std::exp(-arg));
    return std::clamp(w, 1e-12, 1.0 - 1e-12);
}

ActivationMatrix build_activation_matrix(const std::vector<ForwardTrace>& traces,
                                         const std::string& space, const Neighborhood& hood,
                                         bool require_all) {
    std::vector<const CapturedVector*> rows;
    for (const auto& [ei, s] : hood.positions) {
        if (ei < 0 || static_cast<size_t>(ei) >= traces.size())
            throw ValidationError("neighborhood references example " + std::to_string(ei) +
                                  " outside the trace list");
        const auto& captured = traces[static_cast<size_t>(ei)].captured;
        const CapturedVector* hit = nullptr;
        if (auto it = captured.find(space); it != captured.end())
            for (const auto& cv : it->second)
                if (cv.position == s) {
                    hit = &cv;
                    break;
                }
        if (hit == nullptr) {
            if (require_all)
                throw ValidationError("space " + space + ": no capture at example " +
                                      std::to_string(ei) + " position " + std::to_string(s));
            continue;
        }
        rows.push_back(hit);
    }

    ActivationMatrix m;
    m.space = space;
    if (rows.empty()) return m;
    const size_t d = rows.front()->values.size();
    m.rows.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(d));
    for (size_t i = 0; i < rows.size(); ++i) {
        if (rows[i]->values.size() != d)
            throw ValidationError("space " + space + ": inconsistent capture widths");
        for (size_t j = 0; j < d; ++j)
            m.rows(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i]->values[j];
    }
    return m;
}

std::optional<GspProjector> build_projector(const ActivationMatrix& H, double tau) {
    const double k = gsp_steepness(tau);
    if (H.rows.size() > 0 && !H.rows.allFinite())
        throw ValidationError("space " + H.space + ": non-finite activations");
    if (H.rows.rows() == 0 || H.rows.cols() == 0) return std::nullopt;

    // Gram route when rows outnumber columns: the d x d eigenproblem gives the
    // same right singular vectors at a fraction of the memory.
    MatrixXd V;
    VectorXd sigma;
    if (H.rows.rows() > H.rows.cols()) {
        const MatrixXd gram = H.rows.transpose() * H.rows;
        Eigen::SelfAdjointEigenSolver<MatrixXd> es(gram);
        if (es.info() != Eigen::Success)
            throw ValidationError("space " + H.space + ": eigendecomposition failed");
        const Eigen::Index d = gram.rows();
        sigma.resize(d);
        V.resize(d, d);
        for (Eigen::Index i = 0; i < d; ++i) {  // eigenvalues come back ascending
            sigma(i) = std::sqrt(std::max(0.0, es.eigenvalues()(d - 1 - i)));
            V.col(i) = es.eigenvectors().col(d - 1 - i);
        }
    } else {
        Eigen::JacobiSVD<MatrixXd> svd(H.rows, Eigen::ComputeThinV);
        sigma = svd.singularValues();
        V = svd.matrixV();
    }

    const double s1 = sigma.size() > 0 ? sigma(0) : 0.0;
    if (s1 <= 0.0) return std::nullopt;
    Eigen::Index r = 0;
    while (r < sigma.size() && sigma(r) > 1e-10 * s1) ++r;

    GspProjector proj;
    proj.space = H.space;
    proj.tau = tau;
    proj.k = k;
    proj.V = V.leftCols(r);
    proj.sigma = sigma.head(r);
    proj.w.resize(r);
    for (Eigen::Index i = 0; i < r; ++i) proj.w(i) = gsp_weight(sigma(i) / s1, tau);
    return proj;
}

Eigen::MatrixXd project(const Eigen::MatrixXd& delta, const GspProjector& proj) {
    if (delta.cols() != proj.V.rows())
        throw ValidationError("space " + proj.space + ": edit has input width " +
                              std::to_string(delta.cols()) + ", projector expects " +
                              std::to_string(proj.V.rows()));
    const MatrixXd coeffs = delta * proj.V;  // d_out x r
    return delta - (coeffs * proj.w.asDiagonal()) * proj.V.transpose();
}

Eigen::MatrixXd orient_input_right(const Eigen::MatrixXd& m, InputSide side) {
    return side == InputSide::left ? m.transpose() : m;
}

Eigen::MatrixXd restore_orientation(const Eigen::MatrixXd& m, InputSide side) {
    return side == InputSide::left ? m.transpose() : m;
}

double format_energy(const Eigen::MatrixXd& delta, const ActivationMatrix& H) {
    if (H.rows.size() == 0) return 0.0;
    if (H.rows.cols() != delta.cols())
        throw ValidationError("space " + H.space + ": edit/activation width mismatch");
    return (H.rows * delta.transpose()).squaredNorm();
}

double format_energy_spectral(const Eigen::MatrixXd& delta, const GspProjector& proj) {
    if (delta.cols() != proj.V.rows())
        throw ValidationError("space " + proj.space + ": edit/projector width mismatch");
    double e = 0.0;
    for (Eigen::Index r = 0; r < proj.sigma.size(); ++r)
        e += proj.sigma(r) * proj.sigma(r) * (delta * proj.V.col(r)).squaredNorm();
    return e;
}

double post_energy_spectral(const Eigen::MatrixXd& delta, const GspProjector& proj) {
    if (delta.cols() != proj.V.rows())
        throw ValidationError("space " + proj.space + ": edit/projector width mismatch");
    double e = 0.0;
    for (Eigen::Index r = 0; r < proj.sigma.size(); ++r) {
        const double keep = 1.0 - proj.w(r);
        e += proj.sigma(r) * proj.sigma(r) * keep * keep * (delta * proj.V.col(r)).squaredNorm();
    }
    return e;
}

Eigen::MatrixXd matrix_from_tensor(const Tensor& t) {
    const auto vals = load_f64(t);
    size_t rows = 1, cols = t.element_count();
    if (t.shape.size() == 2) {
        rows = t.shape[0];
        cols = t.shape[1];
    } else if (t.shape.size() != 1) {
        throw ValidationError("matrix bridge supports 1-D and 2-D tensors only");
    }
    MatrixXd m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (size_t r = 0; r < rows; ++r)
        for (size_t c = 0; c < cols; ++c)
            m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = vals[r * cols + c];
    return m;
}

Tensor tensor_from_matrix_f64(const Eigen::MatrixXd& m) {
    std::vector<double> vals(static_cast<size_t>(m.rows()) * static_cast<size_t>(m.cols()));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c)
            vals[static_cast<size_t>(r) * static_cast<size_t>(m.cols()) +
                 static_cast<size_t>(c)] = m(r, c);
    return Tensor::from_f64(
        Dtype::F64, {static_cast<size_t>(m.rows()), static_cast<size_t>(m.cols())}, vals);
}

const GspProjector* GspProjectorSet::find(const std::string& space) const {
    if (auto it = projectors.find(space); it != projectors.end()) return &it->second;
    if (identity_spaces.count(space)) return nullptr;
    throw ValidationError("no projector for space \"" + space + "\"");
}

void GspProjectorSet::save(const std::filesystem::path& archive_path) const {
    TensorMap tensors;
    for (const auto& [space, proj] : projectors) {
        tensors.emplace(space + ".V", tensor_from_matrix_f64(proj.V));
        tensors.emplace(space + ".sigma",
                        tensor_from_matrix_f64(proj.sigma.transpose()));  // 1 x r
        tensors.emplace(space + ".w", tensor_from_matrix_f64(proj.w.transpose()));
    }
    write_archive(tensors, archive_path);

    json side;
    side["tau"] = tau;
    side["k"] = k;
    side["rho"] = rho;
    side["identity_spaces"] = identity_spaces;  // std::set serializes sorted
    std::ofstream out(archive_path.string() + ".json", std::ios::trunc);
    if (!out) throw IoError("cannot create " + archive_path.string() + ".json");
    out << side.dump(2) << "\n";
    if (!out) throw IoError("short write on projector sidecar");
}

GspProjectorSet GspProjectorSet::load(const std::filesystem::path& archive_path) {
    GspProjectorSet set;

    const std::filesystem::path side_path = archive_path.string() + ".json";
    std::ifstream in(side_path);
    if (!in) throw IoError("cannot open projector sidecar " + side_path.string());
    try {
        const json side = json::parse(in);
        set.tau = side.at("tau").get<double>();
        set.k = side.at("k").get<double>();
        set.rho = side.value("rho", 0);
        for (const auto& s : side.at("identity_spaces"))
            set.identity_spaces.insert(s.get<std::string>());
    } catch (const json::exception& e) {
        throw ValidationError("bad projector sidecar: " + std::string(e.what()));
    }

    const TensorMap tensors = to_map(TensorArchive::open(archive_path));
    for (const auto& [name, t] : tensors) {
        const size_t dot = name.rfind('.');
        if (dot == std::string::npos) throw ValidationError("unrecognized projector tensor " + name);
        const std::string space = name.substr(0, dot);
        const std::string part = name.substr(dot + 1);
        GspProjector& proj = set.projectors[space];
        proj.space = space;
        proj.tau = set.tau;
        proj.k = set.k;
        const MatrixXd m = matrix_from_tensor(t);
        if (part == "V") proj.V = m;
        else if (part == "sigma") proj.sigma = m.row(0).transpose();
        else if (part == "w") proj.w = m.row(0).transpose();
        else throw ValidationError("unrecognized projector tensor " + name);
    }
    for (const auto& [space, proj] : set.projectors) {
        if (proj.V.size() == 0 || proj.sigma.size() != proj.V.cols() ||
            proj.w.size() != proj.V.cols())
            throw ValidationError("projector for space \"" + space + "\" is incomplete");
        if (set.identity_spaces.count(space))
            throw ValidationError("space \"" + space + "\" is both identity and projected");
    }
    return set;
}

}  // namespace crane
