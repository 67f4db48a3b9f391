#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <unistd.h>

#include "doctest.h"

#include "crane/calibration.hpp"
#include "crane/errors.hpp"

using namespace crane;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("crane-cal-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    fs::path file(const std::string& name) const { return path / name; }
    static inline int counter = 0;
};

fs::path write_jsonl(const TempDir& dir, const std::string& name, const std::string& body) {
    const fs::path p = dir.file(name);
    std::ofstream out(p);
    out << body;
    return p;
}

}  // namespace

TEST_CASE("load_calibration reads well-formed JSONL") {
    TempDir dir;
    const auto p = write_jsonl(dir, "ok.jsonl",
                               R"({"tokens": [3, 1, 4], "mask": [0, 1, 1], "set": "R"})"
                               "\n"
                               R"({"tokens": [2, 7], "mask": [0, 1], "set": "A"})"
                               "\n"
                               R"({"tokens": [5, 5, 5, 5], "mask": [0, 0, 0, 0], "set": "F"})"
                               "\n");
    const auto ex = load_calibration(p);
    REQUIRE(ex.size() == 3);
    CHECK(ex[0].tokens == std::vector<int>{3, 1, 4});
    CHECK(ex[0].mask == std::vector<uint8_t>{0, 1, 1});
    CHECK(ex[0].set_tag == 'R');
    CHECK(ex[1].set_tag == 'A');
    CHECK(ex[2].set_tag == 'F');

    const auto counts = tag_counts(ex);
    CHECK(counts.at('R') == 1);
    CHECK(counts.at('A') == 1);
    CHECK(counts.at('F') == 1);
    CHECK(filter_set(ex, 'A').size() == 1);
    CHECK(filter_set(ex, 'R')[0].tokens == ex[0].tokens);
}

TEST_CASE("blank lines are skipped") {
    TempDir dir;
    const auto p = write_jsonl(dir, "blank.jsonl",
                               "\n"
                               R"({"tokens": [1, 2], "mask": [0, 1], "set": "R"})"
                               "\n\n"
                               R"({"tokens": [3], "mask": [0], "set": "F"})"
                               "\n");
    CHECK(load_calibration(p).size() == 2);
}

TEST_CASE("loader errors cite file and line") {
    TempDir dir;

    SUBCASE("missing file") {
        CHECK_THROWS_AS(load_calibration(dir.file("absent.jsonl")), IoError);
    }
    SUBCASE("empty file") {
        const auto p = write_jsonl(dir, "empty.jsonl", "");
        CHECK_THROWS_AS(load_calibration(p), ValidationError);
    }
    SUBCASE("bad JSON names the line") {
        const auto p = write_jsonl(dir, "bad.jsonl",
                                   R"({"tokens": [1, 2], "mask": [0, 1], "set": "R"})"
                                   "\n"
                                   "{not json}\n");
        try {
            load_calibration(p);
            FAIL("expected ValidationError");
        } catch (const ValidationError& e) {
            const std::string msg = e.what();
            CHECK(msg.find("bad.jsonl:2") != std::string::npos);
        }
    }
    SUBCASE("missing field") {
        const auto p = write_jsonl(dir, "nofield.jsonl", R"({"tokens": [1, 2], "set": "R"})" "\n");
        CHECK_THROWS_AS(load_calibration(p), ValidationError);
    }
    SUBCASE("unknown set tag") {
        const auto p =
            write_jsonl(dir, "set.jsonl", R"({"tokens": [1], "mask": [0], "set": "Q"})" "\n");
        CHECK_THROWS_AS(load_calibration(p), ValidationError);
    }
    SUBCASE("length mismatch") {
        const auto p = write_jsonl(dir, "len.jsonl",
                                   R"({"tokens": [1, 2, 3], "mask": [0, 1], "set": "R"})" "\n");
        CHECK_THROWS_AS(load_calibration(p), ValidationError);
    }
    SUBCASE("negative token") {
        const auto p = write_jsonl(dir, "neg.jsonl",
                                   R"({"tokens": [-1, 2], "mask": [0, 1], "set": "R"})" "\n");
        CHECK_THROWS_AS(load_calibration(p), ValidationError);
    }
    SUBCASE("mask value outside 0/1") {
        const auto p = write_jsonl(dir, "mask.jsonl",
                                   R"({"tokens": [1, 2], "mask": [0, 2], "set": "R"})" "\n");
        CHECK_THROWS_AS(load_calibration(p), ValidationError);
    }
    SUBCASE("empty token list") {
        const auto p =
            write_jsonl(dir, "notok.jsonl", R"({"tokens": [], "mask": [], "set": "F"})" "\n");
        CHECK_THROWS_AS(load_calibration(p), ValidationError);
    }
    SUBCASE("reasoning example without a masked position") {
        const auto p = write_jsonl(dir, "nomask.jsonl",
                                   R"({"tokens": [1, 2], "mask": [0, 0], "set": "R"})" "\n");
        CHECK_THROWS_AS(load_calibration(p), ValidationError);
    }
}

TEST_CASE("fluency examples may have an all-zero mask") {
    TempDir dir;
    const auto p = write_jsonl(dir, "fluent.jsonl",
                               R"({"tokens": [4, 4, 4], "mask": [0, 0, 0], "set": "F"})" "\n");
    const auto ex = load_calibration(p);
    CHECK(ex.size() == 1);
}

TEST_CASE("save then load round-trips") {
    TempDir dir;
    std::vector<CalibrationExample> ex{
        {{9, 8, 7}, {0, 0, 1}, 'R'},
        {{1}, {0}, 'F'},
        {{2, 3}, {0, 1}, 'A'},
    };
    const auto p = dir.file("rt.jsonl");
    save_calibration(ex, p);
    const auto back = load_calibration(p);
    REQUIRE(back.size() == ex.size());
    for (size_t i = 0; i < ex.size(); ++i) {
        CHECK(back[i].tokens == ex[i].tokens);
        CHECK(back[i].mask == ex[i].mask);
        CHECK(back[i].set_tag == ex[i].set_tag);
    }
}

TEST_CASE("format_support enumerates masked positions in order") {
    std::vector<CalibrationExample> f{
        {{1, 2, 3, 4}, {0, 1, 0, 1}, 'F'},
        {{5, 6}, {0, 0}, 'F'},
        {{7, 8, 9}, {0, 0, 1}, 'F'},
    };
    const auto support = format_support(f);
    REQUIRE(support.positions.size() == 3);
    CHECK(support.positions[0] == std::pair<int, int>{0, 1});
    CHECK(support.positions[1] == std::pair<int, int>{0, 3});
    CHECK(support.positions[2] == std::pair<int, int>{2, 2});
}

TEST_CASE("expand_neighborhood clips at sequence edges and dedupes") {
    // Example 0 has length 5 with support at s=1 and s=2; radius 2 windows
    // [0..3] and [0..4] overlap and must merge into unique sorted positions.
    FormatSupport support;
    support.positions = {{0, 1}, {0, 2}};
    const auto hood = expand_neighborhood(support, 2, {5});
    CHECK(hood.radius == 2);
    REQUIRE(hood.positions.size() == 5);
    for (int i = 0; i < 5; ++i) CHECK(hood.positions[static_cast<size_t>(i)] == std::pair<int, int>{0, i});
}

TEST_CASE("radius zero reproduces the support") {
    FormatSupport support;
    support.positions = {{0, 0}, {1, 3}};
    const auto hood = expand_neighborhood(support, 0, {2, 6});
    REQUIRE(hood.positions.size() == 2);
    CHECK(hood.positions[0] == std::pair<int, int>{0, 0});
    CHECK(hood.positions[1] == std::pair<int, int>{1, 3});
}

TEST_CASE("neighborhood size is bounded by |support| times the window width") {
    FormatSupport support;
    std::vector<size_t> lengths{12, 9, 30};
    support.positions = {{0, 0}, {0, 11}, {1, 4}, {2, 15}, {2, 16}};
    for (int radius : {0, 1, 2, 5}) {
        const auto hood = expand_neighborhood(support, radius, lengths);
        CHECK(hood.positions.size() <= support.positions.size() * (2 * static_cast<size_t>(radius) + 1));
        // Monotone: a larger radius never shrinks the set.
        if (radius > 0) {
            const auto smaller = expand_neighborhood(support, radius - 1, lengths);
            CHECK(smaller.positions.size() <= hood.positions.size());
        }
        for (const auto& [ei, s] : hood.positions) {
            CHECK(s >= 0);
            CHECK(static_cast<size_t>(s) < lengths[static_cast<size_t>(ei)]);
        }
    }
}

TEST_CASE("expand_neighborhood validates inputs") {
    FormatSupport support;
    support.positions = {{0, 1}};
    CHECK_THROWS_AS(expand_neighborhood(support, -1, {4}), ValidationError);
    CHECK_THROWS_AS(expand_neighborhood(support, 1, {}), ValidationError);
    FormatSupport bad;
    bad.positions = {{2, 0}};
    CHECK_THROWS_AS(expand_neighborhood(bad, 1, {4, 4}), ValidationError);
}
