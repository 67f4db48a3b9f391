#include <algorithm>
#include <set>

#include "doctest.h"

#include "crane/errors.hpp"
#include "crane/model_schema.hpp"

using namespace crane;

namespace {

std::vector<std::string> dense_names(int n_layers) {
    std::vector<std::string> v{"embed.weight", "final_norm.weight", "lm_head.weight"};
    for (int l = 0; l < n_layers; ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        for (const char* t : {"attn_norm.weight", "q_proj.weight", "k_proj.weight",
                              "v_proj.weight", "o_proj.weight", "mlp_norm.weight",
                              "ffn.gate.weight", "ffn.up.weight", "ffn.down.weight"})
            v.push_back(p + t);
    }
    return v;
}

std::vector<std::string> moe_names(int n_layers, int n_experts) {
    std::vector<std::string> v{"embed.weight", "final_norm.weight", "lm_head.weight"};
    for (int l = 0; l < n_layers; ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        for (const char* t : {"attn_norm.weight", "q_proj.weight", "k_proj.weight",
                              "v_proj.weight", "o_proj.weight", "mlp_norm.weight",
                              "router.weight"})
            v.push_back(p + t);
        for (int e = 0; e < n_experts; ++e)
            for (const char* t : {"gate.weight", "up.weight", "down.weight"})
                v.push_back(p + "experts." + std::to_string(e) + "." + t);
    }
    return v;
}

}  // namespace

TEST_CASE("micro-dense preset binds its own naming completely") {
    const auto schema = ModelSchema::preset("micro-dense");
    const auto names = dense_names(2);
    const auto bound = crane::bind(schema, names);
    CHECK(bound.entries.size() == names.size());
    CHECK(bound.n_layers == 2);

    const auto& q = bound.at("layers.0.q_proj.weight");
    CHECK(q.component.kind == ComponentKind::q_proj);
    CHECK(q.component.layer == 0);
    CHECK(q.component.expert_index == -1);
    CHECK(q.family == MixerFamily::full_attention);
    CHECK(q.space == "layers.0.attn_in");

    const auto& emb = bound.at("embed.weight");
    CHECK(emb.component.layer == kGlobalLayer);
    CHECK(emb.component.kind == ComponentKind::embedding);
    CHECK(emb.family == MixerFamily::none);
    CHECK(emb.space.empty());

    const auto& down = bound.at("layers.1.ffn.down.weight");
    CHECK(down.component.kind == ComponentKind::dense_down);
    CHECK(down.space == "layers.1.mlp_inner");
    CHECK(down.family == MixerFamily::none);
}

TEST_CASE("micro-moe preset binds experts and router") {
    const auto schema = ModelSchema::preset("micro-moe");
    const auto names = moe_names(2, 4);
    const auto bound = crane::bind(schema, names);
    CHECK(bound.entries.size() == names.size());

    const auto& e3 = bound.at("layers.1.experts.3.up.weight");
    CHECK(e3.component.kind == ComponentKind::expert_up);
    CHECK(e3.component.layer == 1);
    CHECK(e3.component.expert_index == 3);
    CHECK(e3.space == "layers.1.mlp_in");

    const auto& router = bound.at("layers.0.router.weight");
    CHECK(router.component.kind == ComponentKind::router);
    CHECK(router.component.expert_index == -1);

    const auto& ed = bound.at("layers.0.experts.2.down.weight");
    CHECK(ed.space == "layers.0.experts.2.down_in");
}

TEST_CASE("unmatched tensor name is an error") {
    const auto schema = ModelSchema::preset("micro-dense");
    auto names = dense_names(1);
    names.push_back("debug.tmp");
    CHECK_THROWS_WITH_AS(crane::bind(schema, names), doctest::Contains("debug.tmp"), ValidationError);
}

TEST_CASE("two rules matching one name is an ambiguity error") {
    auto schema = ModelSchema::preset("micro-dense");
    schema.rules.push_back({"layers.{layer}.q_proj.weight", ComponentKind::mixer_inner, ""});
    CHECK_THROWS_WITH_AS(crane::bind(schema, dense_names(1)), doctest::Contains("ambiguous"),
                         ValidationError);
}

TEST_CASE("bind is deterministic under name permutation") {
    const auto schema = ModelSchema::preset("micro-moe");
    auto names = moe_names(3, 2);
    const auto a = crane::bind(schema, names);
    std::reverse(names.begin(), names.end());
    const auto b = crane::bind(schema, names);
    REQUIRE(a.entries.size() == b.entries.size());
    for (const auto& [name, ea] : a.entries) {
        const auto& eb = b.at(name);
        CHECK(ea.component == eb.component);
        CHECK(ea.family == eb.family);
        CHECK(ea.space == eb.space);
    }
}

TEST_CASE("moe anchor is the union of expert gate/up/down, router excluded") {
    const auto schema = ModelSchema::preset("micro-moe");
    const auto bound = crane::bind(schema, moe_names(1, 3));
    const auto anchor = bound.anchor_names(0);

    std::set<std::string> expected;
    for (int e = 0; e < 3; ++e)
        for (const char* t : {"gate.weight", "up.weight", "down.weight"})
            expected.insert("layers.0.experts." + std::to_string(e) + "." + t);
    CHECK(std::set<std::string>(anchor.begin(), anchor.end()) == expected);
    CHECK(std::find(anchor.begin(), anchor.end(), "layers.0.router.weight") == anchor.end());
}

TEST_CASE("dense anchor is gate/up/down") {
    const auto schema = ModelSchema::preset("micro-dense");
    const auto bound = crane::bind(schema, dense_names(2));
    const auto anchor = bound.anchor_names(1);
    CHECK(anchor == std::vector<std::string>{"layers.1.ffn.down.weight", "layers.1.ffn.gate.weight",
                                             "layers.1.ffn.up.weight"});
}

TEST_CASE("occupation counts by mixer family") {
    SUBCASE("48-layer 3:1 linear:full stack") {
        const auto schema = ModelSchema::preset("micro-hybrid");
        const auto bound = crane::bind(schema, dense_names(48));
        const auto mu = occupation_counts(bound);
        CHECK(mu.at("linear_attention") == 36);
        CHECK(mu.at("full_attention") == 12);
    }
    SUBCASE("4-layer all-full") {
        const auto schema = ModelSchema::preset("micro-dense");
        const auto bound = crane::bind(schema, dense_names(4));
        const auto mu = occupation_counts(bound);
        CHECK(mu.at("full_attention") == 4);
        CHECK(mu.at("linear_attention") == 0);
    }
    SUBCASE("alternating full/linear over 6 layers") {
        auto schema = ModelSchema::preset("micro-hybrid");
        schema.family_cycle = {MixerFamily::full_attention, MixerFamily::linear_attention};
        const auto bound = crane::bind(schema, dense_names(6));
        const auto mu = occupation_counts(bound);
        CHECK(mu.at("full_attention") == 3);
        CHECK(mu.at("linear_attention") == 3);
    }
}

TEST_CASE("kappa from occupation") {
    SUBCASE("36/12 with full reference gives linear kappa 3") {
        const auto kappa = kappa_from_occupation(
            {{"linear_attention", 36}, {"full_attention", 12}}, "full_attention");
        CHECK(kappa.at("linear_attention") == 3.0);
        CHECK(kappa.at("full_attention") == 1.0);
    }
    SUBCASE("single family is 1 everywhere") {
        const auto kappa = kappa_from_occupation({{"full_attention", 4}}, "full_attention");
        CHECK(kappa.at("full_attention") == 1.0);
    }
    SUBCASE("6/3 gives 2") {
        const auto kappa = kappa_from_occupation(
            {{"linear_attention", 6}, {"full_attention", 3}}, "full_attention");
        CHECK(kappa.at("linear_attention") == 2.0);
    }
    SUBCASE("zero reference occupation is an error") {
        CHECK_THROWS_AS(
            kappa_from_occupation({{"linear_attention", 6}, {"full_attention", 0}}, "full_attention"),
            ValidationError);
    }
}

TEST_CASE("measured kappa") {
    const std::map<std::string, int> mu{{"linear_attention", 36}, {"full_attention", 12}};
    SUBCASE("equal scales reduce to the occupation ratio") {
        const auto k = kappa_measured(mu, {{"linear_attention", 0.7}, {"full_attention", 0.7}},
                                      "full_attention");
        CHECK(k.at("linear_attention") == doctest::Approx(3.0).epsilon(1e-15));
        CHECK(k.at("full_attention") == 1.0);
    }
    SUBCASE("unequal scales shift the ratio") {
        const auto k = kappa_measured(mu, {{"linear_attention", 0.5}, {"full_attention", 1.0}},
                                      "full_attention");
        CHECK(k.at("linear_attention") == doctest::Approx(1.5).epsilon(1e-15));
    }
    SUBCASE("reference family is exactly 1") {
        const auto k = kappa_measured(mu, {{"linear_attention", 0.3}, {"full_attention", 0.9}},
                                      "full_attention");
        CHECK(k.at("full_attention") == 1.0);
    }
    SUBCASE("non-positive scale is an error") {
        CHECK_THROWS_AS(kappa_measured(mu, {{"linear_attention", 0.0}, {"full_attention", 1.0}},
                                       "full_attention"),
                        ValidationError);
    }
}

TEST_CASE("schema JSON round-trips and binds identically") {
    const auto schema = ModelSchema::preset("micro-hybrid");
    const auto schema2 = ModelSchema::from_json_text(schema.to_json_text());
    const auto names = dense_names(8);
    const auto a = crane::bind(schema, names);
    const auto b = crane::bind(schema2, names);
    REQUIRE(a.entries.size() == b.entries.size());
    for (const auto& [name, ea] : a.entries) {
        CHECK(ea.component == b.at(name).component);
        CHECK(ea.family == b.at(name).family);
        CHECK(ea.space == b.at(name).space);
    }
    CHECK(occupation_counts(a) == occupation_counts(b));
}

TEST_CASE("schema validation rejects malformed rules") {
    auto schema = ModelSchema::preset("micro-dense");
    SUBCASE("expert kind without expert capture") {
        schema.rules.push_back({"layers.{layer}.oops.weight", ComponentKind::expert_gate, ""});
        CHECK_THROWS_AS(crane::bind(schema, dense_names(1)), ValidationError);
    }
    SUBCASE("empty anchor") {
        schema.anchor_kinds.clear();
        CHECK_THROWS_AS(crane::bind(schema, dense_names(1)), ValidationError);
    }
    SUBCASE("anchor kinds absent from the archive") {
        schema.anchor_kinds = {ComponentKind::expert_gate};
        CHECK_THROWS_WITH_AS(crane::bind(schema, dense_names(1)), doctest::Contains("anchor"),
                             ValidationError);
    }
}

TEST_CASE("unknown preset name is an error") {
    CHECK_THROWS_AS(ModelSchema::preset("micro-giant"), ValidationError);
}
