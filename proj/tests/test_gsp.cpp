#include "crane/gsp.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include <Eigen/SVD>

#include "doctest.h"

#include "crane/errors.hpp"
#include "crane/rng.hpp"
#include "test_support.hpp"

using namespace crane;
using crane::testing::TempDir;
namespace fs = std::filesystem;

namespace {

Eigen::MatrixXd random_matrix(Eigen::Index rows, Eigen::Index cols, uint64_t seed) {
    SplitMix64 rng(seed);
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = rng.next_normal();
    return m;
}

ActivationMatrix make_H(Eigen::Index rows, Eigen::Index cols, uint64_t seed,
                        const std::string& space = "fixture") {
    ActivationMatrix H;
    H.space = space;
    H.rows = random_matrix(rows, cols, seed);
    return H;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("steepness and sigmoid landmarks") {
    const double tau = 0.03;
    const double k = gsp_steepness(tau);
    CHECK(k == std::log(99.0) / tau);
    CHECK(std::abs(k - 153.17066167115297) < 1e-9);

    // Protection must vanish at a=0, sit at half height at a=tau, and
    // saturate by a=2*tau.
    CHECK(std::abs(gsp_weight(0.0, tau) - 0.01) < 1e-9);
    CHECK(gsp_weight(tau, tau) == 0.5);
    CHECK(std::abs(gsp_weight(2.0 * tau, tau) - 0.99) < 1e-9);

    SUBCASE("landmarks hold for other tau values too") {
        for (double t : {0.01, 0.05, 0.25}) {
            CHECK(std::abs(gsp_weight(0.0, t) - 0.01) < 1e-9);
            CHECK(gsp_weight(t, t) == 0.5);
            CHECK(std::abs(gsp_weight(2.0 * t, t) - 0.99) < 1e-9);
        }
    }

    SUBCASE("clamps cap the extremes") {
        CHECK(gsp_weight(1.0, tau) == 1.0 - 1e-12);
        CHECK(gsp_weight(-1.0, tau) == 1e-12);
    }

    SUBCASE("monotone in the amplitude") {
        double prev = 0.0;
        for (double a = 0.0; a <= 0.2001; a += 0.002) {
            const double w = gsp_weight(a, tau);
            CHECK(w >= prev);
            prev = w;
        }
    }

    SUBCASE("tau outside (0,1) is rejected") {
        CHECK_THROWS_AS(gsp_steepness(0.0), ValidationError);
        CHECK_THROWS_AS(gsp_steepness(1.0), ValidationError);
        CHECK_THROWS_AS(gsp_steepness(-0.5), ValidationError);
        CHECK_THROWS_AS(gsp_weight(0.5, 0.0), ValidationError);
        ActivationMatrix H = make_H(3, 2, 1);
        CHECK_THROWS_AS(build_projector(H, 1.0), ValidationError);
    }
}

TEST_CASE("repeated rows collapse to a fully protected rank-1 space") {
    ActivationMatrix H;
    H.space = "rank1";
    H.rows.resize(3, 2);
    for (int r = 0; r < 3; ++r) {
        H.rows(r, 0) = 3.0;
        H.rows(r, 1) = 4.0;
    }
    const auto proj = build_projector(H, 0.03);
    REQUIRE(proj.has_value());
    CHECK(proj->sigma.size() == 1);  // the zero direction is truncated away
    CHECK(std::abs(proj->sigma(0) - 5.0 * std::sqrt(3.0)) < 1e-9);
    CHECK(std::abs(std::abs(proj->V(0, 0)) - 0.6) < 1e-9);
    CHECK(std::abs(std::abs(proj->V(1, 0)) - 0.8) < 1e-9);
    CHECK(proj->w(0) == 1.0 - 1e-12);  // a = 1 saturates the sigmoid

    // An edit aligned with the protected direction is reduced to the clamp
    // leakage, i.e. essentially removed.
    Eigen::MatrixXd delta(1, 2);
    delta << 0.6, 0.8;
    const Eigen::MatrixXd out = project(delta, *proj);
    CHECK(out.norm() < 1e-11);
}

TEST_CASE("projection acts diagonally on the singular directions") {
    const ActivationMatrix H = make_H(6, 4, 77);
    const auto proj = build_projector(H, 0.03);
    REQUIRE(proj.has_value());
    const Eigen::MatrixXd delta = random_matrix(3, 4, 78);
    const Eigen::MatrixXd projected = project(delta, *proj);
    for (Eigen::Index r = 0; r < proj->sigma.size(); ++r) {
        const Eigen::VectorXd lhs = projected * proj->V.col(r);
        const Eigen::VectorXd rhs = (1.0 - proj->w(r)) * (delta * proj->V.col(r));
        CHECK((lhs - rhs).norm() < 1e-9);
    }

    SUBCASE("projecting twice squares the attenuation") {
        const Eigen::MatrixXd twice = project(projected, *proj);
        for (Eigen::Index r = 0; r < proj->sigma.size(); ++r) {
            const double keep = 1.0 - proj->w(r);
            const Eigen::VectorXd lhs = twice * proj->V.col(r);
            const Eigen::VectorXd rhs = keep * keep * (delta * proj->V.col(r));
            CHECK((lhs - rhs).norm() < 1e-9);
        }
    }
}

TEST_CASE("edits orthogonal to the activation span pass through") {
    ActivationMatrix H;
    H.space = "axis";
    H.rows.resize(2, 3);
    H.rows << 2, 0, 0,  //
        0, 1, 0;
    const auto proj = build_projector(H, 0.03);
    REQUIRE(proj.has_value());
    REQUIRE(proj->sigma.size() == 2);
    CHECK(std::abs(proj->sigma(0) - 2.0) < 1e-12);
    CHECK(std::abs(proj->sigma(1) - 1.0) < 1e-12);

    Eigen::MatrixXd delta(1, 3);
    delta << 0.0, 0.0, 7.0;
    const Eigen::MatrixXd out = project(delta, *proj);
    CHECK((out - delta).norm() < 1e-12);
}

TEST_CASE("hand-sized projector arithmetic") {
    GspProjector proj;
    proj.space = "hand";
    proj.V.resize(2, 1);
    proj.V << 1.0, 0.0;
    proj.sigma.resize(1);
    proj.sigma << 2.0;
    proj.w.resize(1);
    proj.w << 0.75;

    const Eigen::MatrixXd out = project(Eigen::MatrixXd::Identity(2, 2), proj);
    CHECK(out(0, 0) == 0.25);
    CHECK(out(0, 1) == 0.0);
    CHECK(out(1, 0) == 0.0);
    CHECK(out(1, 1) == 1.0);

    SUBCASE("energies by hand") {
        // sigma^2 * |Delta v|^2 summed over the single direction: the identity
        // edit has |I v| = 1, so pre-energy 4 and post-energy 4 * 0.25^2.
        CHECK(format_energy_spectral(Eigen::MatrixXd::Identity(2, 2), proj) == 4.0);
        CHECK(post_energy_spectral(Eigen::MatrixXd::Identity(2, 2), proj) == 0.25);
    }
}

TEST_CASE("gram route matches a direct thin SVD") {
    const ActivationMatrix H = make_H(20, 6, 402);
    REQUIRE(H.rows.rows() > H.rows.cols());  // forces the gram path
    const auto proj = build_projector(H, 0.03);
    REQUIRE(proj.has_value());

    Eigen::JacobiSVD<Eigen::MatrixXd> svd(H.rows, Eigen::ComputeThinV);
    REQUIRE(proj->sigma.size() == svd.singularValues().size());
    for (Eigen::Index i = 0; i < proj->sigma.size(); ++i) {
        CHECK(std::abs(proj->sigma(i) - svd.singularValues()(i)) <
              1e-9 * svd.singularValues()(0));
        // Columns agree up to sign for a spectrum without ties.
        CHECK(std::abs(std::abs(proj->V.col(i).dot(svd.matrixV().col(i))) - 1.0) < 1e-9);
    }

    const Eigen::MatrixXd delta = random_matrix(4, 6, 403);
    GspProjector direct;
    direct.space = H.space;
    direct.V = svd.matrixV();
    direct.sigma = svd.singularValues();
    direct.w.resize(direct.sigma.size());
    for (Eigen::Index i = 0; i < direct.sigma.size(); ++i)
        direct.w(i) = gsp_weight(direct.sigma(i) / direct.sigma(0), 0.03);
    CHECK((project(delta, *proj) - project(delta, direct)).norm() < 1e-9);
}

TEST_CASE("spectral energies agree with the activation-product form") {
    const ActivationMatrix H = make_H(7, 5, 500);
    const auto proj = build_projector(H, 0.03);
    REQUIRE(proj.has_value());
    REQUIRE(proj->sigma.size() == 5);  // full rank, nothing truncated
    const Eigen::MatrixXd delta = random_matrix(4, 5, 501);

    const double direct = format_energy(delta, H);
    const double spectral = format_energy_spectral(delta, *proj);
    CHECK(std::abs(direct - spectral) < 1e-9 * std::max(1.0, direct));

    const Eigen::MatrixXd projected = project(delta, *proj);
    const double post_direct = format_energy(projected, H);
    const double post_spectral = post_energy_spectral(delta, *proj);
    CHECK(std::abs(post_direct - post_spectral) < 1e-9 * std::max(1.0, direct));

    // Attenuation never adds energy.
    CHECK(post_spectral <= direct * (1.0 + 1e-12));
    CHECK(post_spectral < direct);  // random spans always intersect the edit
}

TEST_CASE("degenerate inputs fall back to identity") {
    SUBCASE("no rows collected") {
        ActivationMatrix H;
        H.space = "empty";
        CHECK_FALSE(build_projector(H, 0.03).has_value());
    }
    SUBCASE("all-zero activations") {
        ActivationMatrix H;
        H.space = "zeros";
        H.rows = Eigen::MatrixXd::Zero(3, 4);
        CHECK_FALSE(build_projector(H, 0.03).has_value());
    }
    SUBCASE("non-finite activations are an input error, not a fallback") {
        ActivationMatrix H = make_H(3, 3, 9);
        H.rows(1, 1) = std::nan("");
        CHECK_THROWS_AS(build_projector(H, 0.03), ValidationError);
    }
}

TEST_CASE("rank truncation drops directions below 1e-10 of the top") {
    ActivationMatrix H;
    H.space = "trunc";
    H.rows = Eigen::MatrixXd::Zero(2, 2);
    H.rows(0, 0) = 1.0;

    SUBCASE("ratio 1e-12 is cut") {
        H.rows(1, 1) = 1e-12;
        const auto proj = build_projector(H, 0.03);
        REQUIRE(proj.has_value());
        CHECK(proj->sigma.size() == 1);
        CHECK(proj->V.cols() == 1);
        CHECK(proj->w.size() == 1);
    }
    SUBCASE("ratio 1e-8 survives") {
        H.rows(1, 1) = 1e-8;
        const auto proj = build_projector(H, 0.03);
        REQUIRE(proj.has_value());
        CHECK(proj->sigma.size() == 2);
        CHECK(proj->sigma(0) >= proj->sigma(1));
    }
}

TEST_CASE("width mismatches are rejected") {
    const ActivationMatrix H = make_H(4, 3, 11);
    const auto proj = build_projector(H, 0.03);
    REQUIRE(proj.has_value());
    const Eigen::MatrixXd wrong = random_matrix(2, 5, 12);
    CHECK_THROWS_AS(project(wrong, *proj), ValidationError);
    CHECK_THROWS_AS(format_energy(wrong, H), ValidationError);
    CHECK_THROWS_AS(format_energy_spectral(wrong, *proj), ValidationError);
    CHECK_THROWS_AS(post_energy_spectral(wrong, *proj), ValidationError);
}

TEST_CASE("activation matrices assemble from forward traces") {
    MicroConfig cfg;
    cfg.vocab = 12;
    cfg.d_model = 8;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.ffn_mult = 2;
    cfg.seed = 3;
    const TensorMap params = init_params(cfg);

    const std::vector<int> toks_a = {1, 2, 3, 4, 5};
    const std::vector<int> toks_b = {6, 7, 8};
    const std::map<std::string, std::vector<int>> capture = {
        {"layers.0.attn_in", {0, 1, 2, 3, 4}}};
    const std::map<std::string, std::vector<int>> capture_b = {{"layers.0.attn_in", {0, 1, 2}}};
    std::vector<ForwardTrace> traces;
    traces.push_back(forward(params, cfg, toks_a, capture));
    traces.push_back(forward(params, cfg, toks_b, capture_b));

    Neighborhood hood;
    hood.positions = {{0, 1}, {0, 3}, {1, 0}, {1, 2}};

    const ActivationMatrix H = build_activation_matrix(traces, "layers.0.attn_in", hood);
    REQUIRE(H.rows.rows() == 4);
    REQUIRE(H.rows.cols() == cfg.d_model);
    CHECK(H.space == "layers.0.attn_in");

    // Rows appear in neighborhood order and carry the captured values.
    const auto& cap_a = traces[0].captured.at("layers.0.attn_in");
    const auto& cap_b = traces[1].captured.at("layers.0.attn_in");
    CHECK(H.rows(0, 0) == cap_a[1].values[0]);
    CHECK(H.rows(1, 5) == cap_a[3].values[5]);
    CHECK(H.rows(2, 2) == cap_b[0].values[2]);
    CHECK(H.rows(3, 7) == cap_b[2].values[7]);

    SUBCASE("missing captures are an error by default") {
        Neighborhood wide = hood;
        wide.positions.push_back({1, 2});  // fine
        wide.positions.push_back({0, 0});  // captured, fine
        Neighborhood missing;
        missing.positions = {{1, 0}, {1, 2}};
        std::vector<ForwardTrace> thin;
        thin.push_back(forward(params, cfg, toks_a, {{"layers.0.attn_in", {0}}}));
        Neighborhood want_uncaptured;
        want_uncaptured.positions = {{0, 0}, {0, 3}};
        CHECK_THROWS_WITH_AS(
            build_activation_matrix(thin, "layers.0.attn_in", want_uncaptured),
            doctest::Contains("position 3"), ValidationError);
    }

    SUBCASE("lenient mode keeps whatever rows exist") {
        std::vector<ForwardTrace> thin;
        thin.push_back(forward(params, cfg, toks_a, {{"layers.0.attn_in", {0, 4}}}));
        Neighborhood want;
        want.positions = {{0, 0}, {0, 2}, {0, 4}};
        const ActivationMatrix sub =
            build_activation_matrix(thin, "layers.0.attn_in", want, /*require_all=*/false);
        REQUIRE(sub.rows.rows() == 2);
        CHECK(sub.rows(0, 0) == thin[0].captured.at("layers.0.attn_in")[0].values[0]);
        CHECK(sub.rows(1, 0) == thin[0].captured.at("layers.0.attn_in")[1].values[0]);
    }

    SUBCASE("neighborhood referencing a missing example is rejected") {
        Neighborhood bad;
        bad.positions = {{2, 0}};
        CHECK_THROWS_AS(build_activation_matrix(traces, "layers.0.attn_in", bad),
                        ValidationError);
    }

    SUBCASE("routed expert spaces partition the positions") {
        MicroConfig moe = cfg;
        moe.moe_experts = 2;
        moe.seed = 5;
        const TensorMap mp = init_params(moe);
        const std::vector<int> all = {0, 1, 2, 3, 4};
        std::vector<ForwardTrace> mt;
        mt.push_back(forward(mp, moe, toks_a,
                             {{"layers.0.experts.0.down_in", all},
                              {"layers.0.experts.1.down_in", all}}));
        Neighborhood every;
        for (int s = 0; s < 5; ++s) every.positions.push_back({0, s});
        const ActivationMatrix h0 = build_activation_matrix(
            mt, "layers.0.experts.0.down_in", every, /*require_all=*/false);
        const ActivationMatrix h1 = build_activation_matrix(
            mt, "layers.0.experts.1.down_in", every, /*require_all=*/false);
        CHECK(h0.rows.rows() + h1.rows.rows() == 5);
        if (h0.rows.rows() > 0) CHECK(h0.rows.cols() == moe.ffn_dim());
    }
}

TEST_CASE("orientation helpers transpose only the left-input layout") {
    const Eigen::MatrixXd m = random_matrix(3, 5, 600);

    const Eigen::MatrixXd right = orient_input_right(m, InputSide::right);
    CHECK(right.rows() == 3);
    CHECK((right - m).norm() == 0.0);
    CHECK((restore_orientation(right, InputSide::right) - m).norm() == 0.0);

    const Eigen::MatrixXd left = orient_input_right(m, InputSide::left);
    CHECK(left.rows() == 5);
    CHECK((left - m.transpose()).norm() == 0.0);
    CHECK((restore_orientation(left, InputSide::left) - m).norm() == 0.0);
}

TEST_CASE("tensor bridging round-trips and rejects higher ranks") {
    const Eigen::MatrixXd m = random_matrix(2, 3, 700);
    const Tensor t = tensor_from_matrix_f64(m);
    CHECK(t.shape == std::vector<size_t>{2, 3});
    CHECK((matrix_from_tensor(t) - m).norm() == 0.0);

    const Tensor one_d = Tensor::from_f64(Dtype::F64, {3}, {1.0, 2.0, 3.0});
    const Eigen::MatrixXd row = matrix_from_tensor(one_d);
    CHECK(row.rows() == 1);
    CHECK(row.cols() == 3);
    CHECK(row(0, 2) == 3.0);

    const Tensor three_d = Tensor::from_f64(Dtype::F64, {1, 1, 2}, {1.0, 2.0});
    CHECK_THROWS_AS(matrix_from_tensor(three_d), ValidationError);
}

TEST_CASE("projector sets save and load losslessly") {
    GspProjectorSet set;
    set.tau = 0.03;
    set.k = gsp_steepness(0.03);
    set.rho = 2;
    set.identity_spaces = {"layers.1.o_in", "lm_head_in"};
    for (const std::string space : {"layers.0.attn_in", "layers.0.mlp_in"}) {
        const auto proj =
            build_projector(make_H(6, 4, fnv1a64(space), space), 0.03);
        REQUIRE(proj.has_value());
        set.projectors.emplace(space, *proj);
    }

    TempDir dir("crane-gsp");
    const fs::path path = dir.file("projectors.tnsr");
    set.save(path);
    REQUIRE(fs::exists(path));
    REQUIRE(fs::exists(fs::path(path.string() + ".json")));

    const GspProjectorSet back = GspProjectorSet::load(path);
    CHECK(back.tau == set.tau);
    CHECK(back.k == set.k);
    CHECK(back.rho == set.rho);
    CHECK(back.identity_spaces == set.identity_spaces);
    REQUIRE(back.projectors.size() == 2);
    for (const auto& [space, orig] : set.projectors) {
        const GspProjector& got = back.projectors.at(space);
        CHECK(got.space == space);
        CHECK((got.V - orig.V).norm() == 0.0);  // f64 payloads are exact
        CHECK((got.sigma - orig.sigma).norm() == 0.0);
        CHECK((got.w - orig.w).norm() == 0.0);
        CHECK(got.tau == set.tau);
        CHECK(got.k == set.k);
    }

    SUBCASE("find distinguishes projected, identity, and unknown spaces") {
        const GspProjector* p = back.find("layers.0.attn_in");
        REQUIRE(p != nullptr);
        CHECK(p->space == "layers.0.attn_in");
        CHECK(back.find("lm_head_in") == nullptr);
        CHECK_THROWS_WITH_AS(back.find("layers.9.attn_in"), doctest::Contains("layers.9.attn_in"),
                             ValidationError);
    }

    SUBCASE("writes are byte-deterministic") {
        const fs::path again = dir.file("projectors2.tnsr");
        set.save(again);
        CHECK(slurp(path) == slurp(again));
        CHECK(slurp(fs::path(path.string() + ".json")) ==
              slurp(fs::path(again.string() + ".json")));
    }

    SUBCASE("a missing sidecar is an IO error") {
        fs::remove(fs::path(path.string() + ".json"));
        CHECK_THROWS_AS(GspProjectorSet::load(path), IoError);
    }

    SUBCASE("an incomplete projector is rejected") {
        const fs::path broken = dir.file("broken.tnsr");
        TensorMap only_v;
        only_v.emplace("layers.0.attn_in.V",
                       tensor_from_matrix_f64(Eigen::MatrixXd::Identity(3, 2)));
        write_archive(only_v, broken);
        std::ofstream side(broken.string() + ".json");
        side << R"({"tau":0.03,"k":153.0,"rho":2,"identity_spaces":[]})";
        side.close();
        CHECK_THROWS_WITH_AS(GspProjectorSet::load(broken), doctest::Contains("incomplete"),
                             ValidationError);
    }

    SUBCASE("a space cannot be both projected and identity") {
        GspProjectorSet clash = set;
        clash.identity_spaces.insert("layers.0.attn_in");
        const fs::path p2 = dir.file("clash.tnsr");
        clash.save(p2);
        CHECK_THROWS_AS(GspProjectorSet::load(p2), ValidationError);
    }
}
