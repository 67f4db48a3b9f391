#include "crane/merge_engine.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <set>

#include "json.hpp"

#include "crane/delta_ops.hpp"
#include "crane/errors.hpp"
#include "crane/parallel.hpp"

using nlohmann::json;

namespace crane {

namespace {

void check_same_names(const TensorMap& inst, const TensorMap& think) {
    for (const auto& [name, t] : inst)
        if (!think.count(name))
            throw ValidationError("tensor \"" + name + "\" present in instruct archive only");
    for (const auto& [name, t] : think)
        if (!inst.count(name))
            throw ValidationError("tensor \"" + name + "\" present in thinking archive only");
}

// think - inst, decoded to f64; shapes must agree.
std::vector<double> delta_of(const std::string& name, const Tensor& inst, const Tensor& think) {
    if (inst.shape != think.shape)
        throw ValidationError("tensor \"" + name + "\" has mismatched shapes");
    auto base = load_f64(inst);
    const auto other = load_f64(think);
    for (size_t i = 0; i < base.size(); ++i) base[i] = other[i] - base[i];
    return base;
}

// Pairwise per-tensor map with deterministic reassembly.
template <typename Fn>
TensorMap map_pair(const TensorMap& inst, const TensorMap& think, int threads, Fn&& fn) {
    check_same_names(inst, think);
    std::vector<std::pair<const std::string*, std::pair<const Tensor*, const Tensor*>>> items;
    items.reserve(inst.size());
    for (const auto& [name, t] : inst) items.push_back({&name, {&t, &think.at(name)}});
    std::vector<Tensor> slots(items.size());
    parallel_for(items.size(), threads, [&](size_t i) {
        slots[i] = fn(*items[i].first, *items[i].second.first, *items[i].second.second);
    });
    TensorMap out;
    for (size_t i = 0; i < items.size(); ++i) out.emplace(*items[i].first, std::move(slots[i]));
    return out;
}

// Keep the top-k coordinates by |magnitude|, zero the rest. k comes from
// rounding density * D; equal magnitudes are resolved by index order.
std::vector<double> trim_by_density(const std::vector<double>& delta, double density) {
    const size_t D = delta.size();
    const auto k = static_cast<size_t>(std::llround(density * static_cast<double>(D)));
    if (k >= D) return delta;
    std::vector<size_t> order(D);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        return std::abs(delta[a]) > std::abs(delta[b]);
    });
    std::vector<double> out(D, 0.0);
    for (size_t i = 0; i < k; ++i) out[order[i]] = delta[order[i]];
    return out;
}

std::vector<double> relax_factors(const std::vector<double>& m, double omega) {
    double mx = 0.0;
    for (double v : m) {
        if (v < 0.0) throw ValidationError("importance magnitudes must be non-negative");
        mx = std::max(mx, v);
    }
    std::vector<double> r(m.size(), 1.0);
    if (mx <= 0.0) return r;  // the scaler leaves the update unchanged
    for (size_t j = 0; j < m.size(); ++j) r[j] = 1.0 - (1.0 - omega) * (m[j] / mx);
    return r;
}

json salience_key_json(const SalienceKey& key, double value) {
    json row;
    row["kind"] = key.kind;
    if (key.layer == kGlobalLayer) row["layer"] = "global";
    else row["layer"] = key.layer;
    row["value"] = value;
    return row;
}

}  // namespace

void MergeConfig::validate() const {
    if (!(alpha >= 0.0) || !std::isfinite(alpha))
        throw ValidationError("alpha must be finite and non-negative");
    if (!(tau > 0.0 && tau < 1.0)) throw ValidationError("tau must lie in (0, 1)");
    if (rho < 0) throw ValidationError("rho must be non-negative");
}

std::string MergeStats::to_json_text() const {
    json j;
    j["sparsify_survival"] = sparsify_survival;
    j["total_coords"] = total_coords;
    j["surviving_coords"] = surviving_coords;
    j["salience_used"] = json::array();
    for (const auto& [key, value] : salience_used)
        j["salience_used"].push_back(salience_key_json(key, value));
    j["mean_w"] = json::object();
    for (const auto& [space, w] : mean_w) j["mean_w"][space] = w;
    return j.dump(2);
}

TensorMap crane_merge(const TensorMap& inst, const TensorMap& think, const BoundSchema& schema,
                      const SalienceTable* salience, const GspProjectorSet* projectors,
                      const MergeConfig& cfg, MergeStats* stats, int threads) {
    cfg.validate();
    check_same_names(inst, think);
    if (cfg.use_taylor) {
        if (salience == nullptr)
            throw ValidationError("the Taylor stage is enabled but no salience table was given");
        if (salience->arch_normalized != cfg.arch_normalize)
            throw ValidationError(
                "salience table normalization does not match the merge configuration");
    }
    if (cfg.use_gsp && projectors == nullptr)
        throw ValidationError("the projection stage is enabled but no projector set was given");
    for (const auto& [name, t] : inst) schema.at(name);  // every tensor must be mapped

    struct Slot {
        Tensor out;
        uint64_t total = 0;
        uint64_t surviving = 0;
    };
    std::vector<const std::string*> names;
    names.reserve(inst.size());
    for (const auto& [name, t] : inst) names.push_back(&name);
    std::vector<Slot> slots(names.size());

    parallel_for(names.size(), threads, [&](size_t i) {
        const std::string& name = *names[i];
        const Tensor& inst_t = inst.at(name);
        const Tensor& think_t = think.at(name);
        const BoundEntry& entry = schema.at(name);

        std::vector<double> edit = delta_of(name, inst_t, think_t);
        slots[i].total = edit.size();
        if (cfg.use_sparsifier) edit = sparsify(edit);
        slots[i].surviving = static_cast<uint64_t>(
            std::count_if(edit.begin(), edit.end(), [](double v) { return v != 0.0; }));

        double scale = cfg.alpha;
        if (cfg.use_taylor)
            scale *= salience->at(kind_name(entry.component.kind), entry.component.layer);
        for (double& v : edit) v = scale * v;

        if (cfg.use_gsp && inst_t.shape.size() == 2 && !entry.space.empty()) {
            const GspProjector* proj = projectors->find(entry.space);
            if (proj != nullptr) {
                const size_t rows = inst_t.shape[0], cols = inst_t.shape[1];
                Eigen::MatrixXd m(static_cast<Eigen::Index>(rows),
                                  static_cast<Eigen::Index>(cols));
                for (size_t r = 0; r < rows; ++r)
                    for (size_t c = 0; c < cols; ++c)
                        m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) =
                            edit[r * cols + c];
                const Eigen::MatrixXd projected =
                    restore_orientation(project(orient_input_right(m, entry.input_side), *proj),
                                        entry.input_side);
                for (size_t r = 0; r < rows; ++r)
                    for (size_t c = 0; c < cols; ++c)
                        edit[r * cols + c] = projected(static_cast<Eigen::Index>(r),
                                                       static_cast<Eigen::Index>(c));
            }
        }

        auto merged = load_f64(inst_t);
        for (size_t j = 0; j < merged.size(); ++j) merged[j] += edit[j];
        slots[i].out = Tensor::from_f64(inst_t.dtype, inst_t.shape, merged);
    });

    TensorMap out;
    for (size_t i = 0; i < names.size(); ++i) out.emplace(*names[i], std::move(slots[i].out));

    if (stats != nullptr) {
        *stats = MergeStats{};
        for (const auto& slot : slots) {
            stats->total_coords += slot.total;
            stats->surviving_coords += cfg.use_sparsifier ? slot.surviving : slot.total;
        }
        stats->sparsify_survival =
            stats->total_coords == 0
                ? 1.0
                : static_cast<double>(stats->surviving_coords) /
                      static_cast<double>(stats->total_coords);
        for (const auto& [name, t] : inst) {
            const BoundEntry& entry = schema.at(name);
            const SalienceKey key{kind_name(entry.component.kind), entry.component.layer};
            if (cfg.use_taylor)
                stats->salience_used[key] = salience->at(key.kind, key.layer);
            if (cfg.use_gsp && t.shape.size() == 2 && !entry.space.empty()) {
                const GspProjector* proj = projectors->find(entry.space);
                if (proj != nullptr && proj->w.size() > 0)
                    stats->mean_w[entry.space] = proj->w.mean();
            }
        }
    }
    return out;
}

TensorMap task_arithmetic(const TensorMap& inst, const TensorMap& think, double alpha,
                          int threads) {
    if (!std::isfinite(alpha)) throw ValidationError("alpha must be finite");
    return map_pair(inst, think, threads,
                    [&](const std::string& name, const Tensor& a, const Tensor& b) {
                        const auto delta = delta_of(name, a, b);
                        auto merged = load_f64(a);
                        for (size_t j = 0; j < merged.size(); ++j)
                            merged[j] += alpha * delta[j];
                        return Tensor::from_f64(a.dtype, a.shape, merged);
                    });
}

TensorMap ties_merge(const TensorMap& inst, const TensorMap& think, double alpha, double density,
                     int threads) {
    if (!std::isfinite(alpha)) throw ValidationError("alpha must be finite");
    if (!(density > 0.0 && density <= 1.0)) throw ValidationError("density must lie in (0, 1]");
    return map_pair(inst, think, threads,
                    [&](const std::string& name, const Tensor& a, const Tensor& b) {
                        const auto delta = trim_by_density(delta_of(name, a, b), density);
                        auto merged = load_f64(a);
                        for (size_t j = 0; j < merged.size(); ++j)
                            merged[j] += alpha * delta[j];
                        return Tensor::from_f64(a.dtype, a.shape, merged);
                    });
}

TensorMap slerp_merge(const TensorMap& inst, const TensorMap& think, double t, int threads) {
    if (!(t >= 0.0 && t <= 1.0)) throw ValidationError("t must lie in [0, 1]");
    return map_pair(inst, think, threads,
                    [&](const std::string& name, const Tensor& a, const Tensor& b) {
                        if (a.shape != b.shape)
                            throw ValidationError("tensor \"" + name + "\" has mismatched shapes");
                        if (t == 0.0) return a;  // byte-exact endpoint
                        const auto vb = load_f64(b);
                        if (t == 1.0) return Tensor::from_f64(a.dtype, a.shape, vb);

                        const auto va = load_f64(a);
                        double na2 = 0.0, nb2 = 0.0, dot = 0.0;
                        for (size_t j = 0; j < va.size(); ++j) {
                            na2 += va[j] * va[j];
                            nb2 += vb[j] * vb[j];
                            dot += va[j] * vb[j];
                        }
                        const double na = std::sqrt(na2), nb = std::sqrt(nb2);
                        double wa = 1.0 - t, wb = t;  // linear fallback weights
                        if (na > 0.0 && nb > 0.0) {
                            const double c = std::clamp(dot / (na * nb), -1.0, 1.0);
                            const double omega = std::acos(c);
                            const double s = std::sin(omega);
                            // Near-zero sine also covers the antipodal case,
                            // where no interpolation arc is well defined.
                            if (omega >= 1e-7 && s >= 1e-7) {
                                wa = std::sin((1.0 - t) * omega) / s;
                                wb = std::sin(t * omega) / s;
                            }
                        }
                        std::vector<double> merged(va.size());
                        for (size_t j = 0; j < merged.size(); ++j)
                            merged[j] = wa * va[j] + wb * vb[j];
                        return Tensor::from_f64(a.dtype, a.shape, merged);
                    });
}

const char* method_name(BaselineMethod m) {
    switch (m) {
        case BaselineMethod::task_arithmetic: return "task_arithmetic";
        case BaselineMethod::ties: return "ties";
        case BaselineMethod::slerp: return "slerp";
        case BaselineMethod::aim_ta: return "aim_ta";
        case BaselineMethod::aim_ties: return "aim_ties";
    }
    throw ValidationError("unknown baseline method");
}

BaselineMethod method_from_name(const std::string& s) {
    for (BaselineMethod m :
         {BaselineMethod::task_arithmetic, BaselineMethod::ties, BaselineMethod::slerp,
          BaselineMethod::aim_ta, BaselineMethod::aim_ties})
        if (s == method_name(m)) return m;
    throw ValidationError("unknown baseline method \"" + s + "\"");
}

void BaselineConfig::validate() const {
    if (!std::isfinite(alpha)) throw ValidationError("alpha must be finite");
    if (!(t >= 0.0 && t <= 1.0)) throw ValidationError("t must lie in [0, 1]");
    if (!(density > 0.0 && density <= 1.0)) throw ValidationError("density must lie in (0, 1]");
    if (!(omega >= 0.0 && omega <= 1.0)) throw ValidationError("omega must lie in [0, 1]");
}

Eigen::MatrixXd aim_relax(const Eigen::MatrixXd& update, const std::vector<double>& m,
                          double omega) {
    if (!(omega >= 0.0 && omega <= 1.0)) throw ValidationError("omega must lie in [0, 1]");
    if (static_cast<Eigen::Index>(m.size()) != update.cols())
        throw ValidationError("importance vector length " + std::to_string(m.size()) +
                              " does not match " + std::to_string(update.cols()) +
                              " input channels");
    const auto r = relax_factors(m, omega);
    Eigen::MatrixXd out = update;
    for (Eigen::Index j = 0; j < out.cols(); ++j) out.col(j) *= r[static_cast<size_t>(j)];
    return out;
}

TensorMap aim_merge(const TensorMap& inst, const TensorMap& think, const BaselineConfig& cfg,
                    std::vector<std::string>* warnings, int threads) {
    cfg.validate();
    if (cfg.method != BaselineMethod::aim_ta && cfg.method != BaselineMethod::aim_ties)
        throw ValidationError("aim_merge requires an aim_ta or aim_ties configuration");
    check_same_names(inst, think);

    std::vector<const std::string*> names;
    names.reserve(inst.size());
    for (const auto& [name, t] : inst) names.push_back(&name);
    std::vector<Tensor> slots(names.size());
    std::vector<std::string> slot_warnings(names.size());

    parallel_for(names.size(), threads, [&](size_t i) {
        const std::string& name = *names[i];
        const Tensor& a = inst.at(name);
        const Tensor& b = think.at(name);
        std::vector<double> upd = delta_of(name, a, b);
        if (cfg.method == BaselineMethod::aim_ties) upd = trim_by_density(upd, cfg.density);
        for (double& v : upd) v = cfg.alpha * v;

        if (a.shape.size() == 2) {  // 1-D tensors are exempt by definition
            const auto it = cfg.importance.find(name);
            if (it == cfg.importance.end()) {
                slot_warnings[i] =
                    "tensor \"" + name + "\": no importance vector; update left unrelaxed";
            } else {
                const size_t cols = a.shape[1];
                if (it->second.size() != cols)
                    throw ValidationError("tensor \"" + name + "\": importance vector length " +
                                          std::to_string(it->second.size()) + " does not match " +
                                          std::to_string(cols) + " input channels");
                const auto r = relax_factors(it->second, cfg.omega);
                const size_t rows = a.shape[0];
                for (size_t row = 0; row < rows; ++row)
                    for (size_t c = 0; c < cols; ++c) upd[row * cols + c] *= r[c];
            }
        }

        auto merged = load_f64(a);
        for (size_t j = 0; j < merged.size(); ++j) merged[j] += upd[j];
        slots[i] = Tensor::from_f64(a.dtype, a.shape, merged);
    });

    TensorMap out;
    for (size_t i = 0; i < names.size(); ++i) {
        out.emplace(*names[i], std::move(slots[i]));
        if (warnings != nullptr && !slot_warnings[i].empty())
            warnings->push_back(std::move(slot_warnings[i]));
    }
    return out;
}

TensorMap baseline_merge(const TensorMap& inst, const TensorMap& think, const BaselineConfig& cfg,
                         std::vector<std::string>* warnings, int threads) {
    cfg.validate();
    switch (cfg.method) {
        case BaselineMethod::task_arithmetic:
            return task_arithmetic(inst, think, cfg.alpha, threads);
        case BaselineMethod::ties:
            return ties_merge(inst, think, cfg.alpha, cfg.density, threads);
        case BaselineMethod::slerp:
            return slerp_merge(inst, think, cfg.t, threads);
        case BaselineMethod::aim_ta:
        case BaselineMethod::aim_ties:
            return aim_merge(inst, think, cfg, warnings, threads);
    }
    throw ValidationError("unknown baseline method");
}

std::map<std::string, std::vector<double>> aim_importance(
    const TensorMap& params, const MicroConfig& config, const BoundSchema& bound,
    const std::vector<CalibrationExample>& dataset) {
    std::set<std::string> spaces;
    for (const auto& [name, entry] : bound.entries)
        if (!entry.space.empty()) spaces.insert(entry.space);

    // Accumulate |activation| per channel over every position of every
    // example; routed expert spaces contribute only the rows they saw.
    std::map<std::string, std::pair<std::vector<double>, uint64_t>> acc;
    for (const auto& ex : dataset) {
        std::map<std::string, std::vector<int>> capture;
        std::vector<int> all(ex.tokens.size());
        std::iota(all.begin(), all.end(), 0);
        for (const auto& s : spaces) capture[s] = all;
        const ForwardTrace trace = forward(params, config, ex.tokens, capture);
        for (const auto& [space, rows] : trace.captured) {
            auto& [sums, count] = acc[space];
            for (const auto& cv : rows) {
                if (sums.empty()) sums.resize(cv.values.size(), 0.0);
                for (size_t c = 0; c < cv.values.size(); ++c) sums[c] += std::abs(cv.values[c]);
                ++count;
            }
        }
    }

    std::map<std::string, std::vector<double>> out;
    for (const auto& [name, entry] : bound.entries) {
        if (entry.space.empty()) continue;
        const Tensor& t = params.at(name);
        if (t.shape.size() != 2) continue;
        const size_t width =
            entry.input_side == InputSide::right ? t.shape[1] : t.shape[0];
        std::vector<double> m(width, 0.0);
        if (auto it = acc.find(entry.space); it != acc.end() && it->second.second > 0) {
            const auto& [sums, count] = it->second;
            if (sums.size() != width)
                throw ValidationError("space " + entry.space + " width " +
                                      std::to_string(sums.size()) +
                                      " does not match tensor \"" + name + "\"");
            for (size_t c = 0; c < width; ++c)
                m[c] = sums[c] / static_cast<double>(count);
        }
        out.emplace(name, std::move(m));
    }
    return out;
}

double ttc(double n_input, double n_cached, double n_output) {
    if (n_input < 0.0 || n_cached < 0.0 || n_output < 0.0)
        throw ValidationError("token counts must be non-negative");
    return n_input + 0.1 * n_cached + 5.0 * n_output;
}

std::string format_millions(double value) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.1fM", value / 1e6);
    return buf;
}

}  // namespace crane
