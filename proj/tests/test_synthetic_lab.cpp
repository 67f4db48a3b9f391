#include "crane/synthetic_lab.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "doctest.h"

#include "crane/delta_ops.hpp"
#include "crane/errors.hpp"
#include "crane/gsp.hpp"
#include "crane/merge_engine.hpp"
#include "crane/micro_transformer.hpp"

using namespace crane;
using doctest::Approx;

namespace {

MicroConfig dense_cfg() {
    MicroConfig c;
    c.vocab = 12;
    c.d_model = 8;
    c.n_layers = 2;
    c.n_heads = 2;
    c.ffn_mult = 2;
    c.seed = 5;
    return c;
}

std::vector<double> delta_values(const PlantedPair& pair, const std::string& name) {
    auto a = load_f64(pair.inst.at(name));
    auto b = load_f64(pair.think.at(name));
    for (size_t j = 0; j < a.size(); ++j) b[j] -= a[j];
    return b;
}

bool same_values(const TensorMap& a, const TensorMap& b) {
    if (a.size() != b.size()) return false;
    for (const auto& [name, t] : a) {
        auto it = b.find(name);
        if (it == b.end() || it->second.shape != t.shape) return false;
        if (load_f64(t) != load_f64(it->second)) return false;
    }
    return true;
}

double max_abs_diff(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    return (a - b).cwiseAbs().maxCoeff();
}

}  // namespace

TEST_CASE("planted pair carries an exactly recoverable delta") {
    PlantingSpec spec;
    spec.support_per_tensor = 8;
    spec.seed = 11;
    PlantedPair pair = plant_pair(dense_cfg(), spec);

    CHECK(pair.support.size() == 6);
    for (int l = 0; l < 2; ++l) {
        std::string p = "layers." + std::to_string(l) + ".ffn.";
        CHECK(pair.support.count(p + "gate.weight") == 1);
        CHECK(pair.support.count(p + "up.weight") == 1);
        CHECK(pair.support.count(p + "down.weight") == 1);
    }

    for (const auto& [name, t] : pair.inst) {
        if (pair.support.count(name) > 0) continue;
        CHECK(load_f64(t) == load_f64(pair.think.at(name)));
    }

    for (const auto& [name, coords] : pair.support) {
        CHECK(coords.size() == 8);
        CHECK(std::is_sorted(coords.begin(), coords.end()));
        CHECK(std::adjacent_find(coords.begin(), coords.end()) == coords.end());

        std::vector<double> d = delta_values(pair, name);
        std::set<size_t> sup(coords.begin(), coords.end());

        double nu = 0.0;
        for (size_t j = 0; j < d.size(); ++j) {
            CHECK(d[j] != 0.0);
            if (sup.count(j) > 0) continue;
            if (nu == 0.0) nu = std::abs(d[j]);
            CHECK(std::abs(d[j]) == nu);
        }
        CHECK(nu > 0.0);
        CHECK(median_magnitude(d) == nu);
        for (size_t j : coords) CHECK(std::abs(d[j]) > nu);

        std::vector<double> kept = sparsify(d);
        for (size_t j = 0; j < kept.size(); ++j) {
            if (sup.count(j) > 0) {
                CHECK(kept[j] == 2.0 * d[j]);
            } else {
                CHECK(kept[j] == 0.0);
            }
        }
    }
}

TEST_CASE("noise-free planting edits only the support") {
    PlantingSpec spec;
    spec.support_per_tensor = 4;
    spec.with_noise = false;
    spec.seed = 3;
    PlantedPair pair = plant_pair(dense_cfg(), spec);

    for (const auto& [name, coords] : pair.support) {
        std::vector<double> d = delta_values(pair, name);
        std::set<size_t> sup(coords.begin(), coords.end());
        size_t nonzero = 0;
        for (size_t j = 0; j < d.size(); ++j) {
            if (d[j] != 0.0) {
                ++nonzero;
                CHECK(sup.count(j) == 1);
            }
        }
        CHECK(nonzero == coords.size());

        std::vector<double> kept = sparsify(d);
        for (size_t j = 0; j < kept.size(); ++j)
            CHECK((kept[j] != 0.0) == (sup.count(j) == 1));
    }
}

TEST_CASE("planting is deterministic per seed") {
    PlantingSpec spec;
    spec.seed = 21;
    PlantedPair a = plant_pair(dense_cfg(), spec);
    PlantedPair b = plant_pair(dense_cfg(), spec);
    CHECK(same_values(a.inst, b.inst));
    CHECK(same_values(a.think, b.think));
    CHECK(a.support == b.support);
    REQUIRE(a.format_basis.size() == b.format_basis.size());
    for (const auto& [space, basis] : a.format_basis)
        CHECK(max_abs_diff(basis, b.format_basis.at(space)) == 0.0);

    spec.seed = 22;
    PlantedPair c = plant_pair(dense_cfg(), spec);
    CHECK_FALSE(same_values(a.think, c.think));
}

TEST_CASE("format bases are orthonormal and projector weights saturate") {
    MicroConfig cfg = dense_cfg();
    PlantingSpec spec;
    spec.format_rank = 2;
    spec.seed = 7;
    PlantedPair pair = plant_pair(cfg, spec);

    CHECK(pair.format_basis.size() == 4);
    for (const auto& [space, basis] : pair.format_basis) {
        CHECK(basis.rows() == 8);
        CHECK(basis.cols() == 2);
        Eigen::MatrixXd gram = basis.transpose() * basis;
        CHECK(max_abs_diff(gram, Eigen::MatrixXd::Identity(2, 2)) < 1e-12);
    }

    BoundSchema bound = crane::bind(schema_for(cfg), pair.inst);
    GspProjectorSet set = planted_projectors(pair, bound, 0.03);
    CHECK(set.projectors.size() == 4);
    CHECK(set.tau == 0.03);
    CHECK(set.rho == 0);
    CHECK(set.identity_spaces.count("lm_head_in") == 1);
    CHECK(set.identity_spaces.count("layers.0.o_in") == 1);
    CHECK(set.identity_spaces.count("layers.1.mlp_inner") == 1);

    for (const auto& [space, proj] : set.projectors) {
        REQUIRE(proj.sigma.size() == 2);
        CHECK(proj.sigma(0) > proj.sigma(1));
        CHECK(proj.sigma(1) / proj.sigma(0) == Approx(0.75).epsilon(1e-12));
        CHECK(proj.w(0) == 1.0 - 1e-12);
        CHECK(proj.w(1) == 1.0 - 1e-12);
        const Eigen::MatrixXd& basis = pair.format_basis.at(space);
        for (int c = 0; c < 2; ++c)
            CHECK(std::abs(proj.V.col(c).dot(basis.col(c))) == Approx(1.0).epsilon(1e-9));
    }

    CHECK(set.find("layers.0.attn_in") != nullptr);
    CHECK(set.find("lm_head_in") == nullptr);
}

TEST_CASE("verify_pipeline certifies a planted pair") {
    PlantingSpec spec;
    spec.support_per_tensor = 6;
    spec.seed = 31;
    PlantedPair pair = plant_pair(dense_cfg(), spec);

    MergeConfig cfg;
    VerificationReport r = verify_pipeline(pair, cfg);

    CHECK(r.stage1_noise_removal_rate == 1.0);
    CHECK(r.ctg_selectivity == 1.0);
    CHECK(r.min_protection_weight == 1.0 - 1e-12);
    CHECK(r.gsp_energy_ratio > 0.0);
    double attenuation =
        (1.0 - r.min_protection_weight) * (1.0 - r.min_protection_weight) + 1e-9;
    CHECK(r.gsp_energy_ratio <= attenuation);
    CHECK(r.gsp_energy_ratio <= 1e-4);
    CHECK(r.stage1_pass);
    CHECK(r.ctg_pass);
    CHECK(r.gsp_pass);
    CHECK(r.end_to_end_support);
    CHECK(r.pass);

    std::string j = r.to_json_text();
    CHECK(j.find("\"stage1_noise_removal_rate\"") != std::string::npos);
    CHECK(j.find("\"pass\": true") != std::string::npos);
    std::string t = r.to_table_text();
    CHECK(t.find("PASS") != std::string::npos);
    CHECK(t.find("FAIL") == std::string::npos);
}

TEST_CASE("alpha zero reports a clean no-edit baseline") {
    PlantingSpec spec;
    spec.seed = 41;
    PlantedPair pair = plant_pair(dense_cfg(), spec);
    MergeConfig cfg;
    cfg.alpha = 0.0;
    VerificationReport r = verify_pipeline(pair, cfg);
    CHECK(r.gsp_energy_ratio == 0.0);
    CHECK(r.end_to_end_support);
    CHECK(r.pass);
}

TEST_CASE("verification is deterministic and thread-invariant") {
    PlantingSpec spec;
    spec.seed = 51;
    PlantedPair pair = plant_pair(dense_cfg(), spec);
    MergeConfig cfg;
    std::string a = verify_pipeline(pair, cfg, 1).to_json_text();
    std::string b = verify_pipeline(pair, cfg, 1).to_json_text();
    std::string c = verify_pipeline(pair, cfg, 4).to_json_text();
    CHECK(a == b);
    CHECK(a == c);
}

TEST_CASE("moe pairs plant per-expert tensors and verify") {
    MicroConfig cfg = dense_cfg();
    cfg.moe_experts = 2;
    PlantingSpec spec;
    spec.support_per_tensor = 4;
    spec.seed = 61;
    PlantedPair pair = plant_pair(cfg, spec);

    CHECK(pair.support.size() == 12);
    CHECK(pair.support.count("layers.0.experts.0.gate.weight") == 1);
    CHECK(pair.support.count("layers.1.experts.1.down.weight") == 1);
    CHECK(pair.support.count("layers.0.router.weight") == 0);

    VerificationReport r = verify_pipeline(pair, MergeConfig{});
    CHECK(r.pass);
}

TEST_CASE("arch-normalized verification passes on a hybrid stack") {
    MicroConfig cfg = dense_cfg();
    cfg.n_layers = 4;
    cfg.mixer_families = {MixerFamily::linear_attention, MixerFamily::linear_attention,
                          MixerFamily::linear_attention, MixerFamily::full_attention};
    PlantingSpec spec;
    spec.seed = 71;
    PlantedPair pair = plant_pair(cfg, spec);
    MergeConfig mc;
    mc.arch_normalize = true;
    VerificationReport r = verify_pipeline(pair, mc);
    CHECK(r.pass);
}

TEST_CASE("planting rejects impossible recipes") {
    MicroConfig cfg = dense_cfg();
    PlantingSpec spec;

    spec.support_per_tensor = 0;
    CHECK_THROWS_AS(plant_pair(cfg, spec), ValidationError);

    spec = PlantingSpec{};
    spec.format_rank = 0;
    CHECK_THROWS_AS(plant_pair(cfg, spec), ValidationError);

    spec = PlantingSpec{};
    spec.format_rank = cfg.d_model + 1;
    CHECK_THROWS_WITH_AS(plant_pair(cfg, spec), doctest::Contains("residual width"),
                         ValidationError);

    spec = PlantingSpec{};
    spec.support_per_tensor = 64;  // the planted tensors have 128 coordinates
    CHECK_THROWS_WITH_AS(plant_pair(cfg, spec), doctest::Contains("noise majority"),
                         ValidationError);
}
