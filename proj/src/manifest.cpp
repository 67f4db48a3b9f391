#include "crane/manifest.hpp"

#include <cstdio>
#include <fstream>

#include "json.hpp"

#include "crane/errors.hpp"
#include "crane/rng.hpp"

namespace crane {

uint64_t hash_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    uint64_t h = 0xcbf29ce484222325ull;
    char buf[65536];
    while (in) {
        in.read(buf, sizeof(buf));
        std::streamsize got = in.gcount();
        if (got > 0) h = fnv1a64(buf, static_cast<size_t>(got), h);
    }
    if (in.bad()) throw IoError("read failure on " + path.string());
    return h;
}

std::string hex64(uint64_t value) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(value));
    return buf;
}

void Manifest::add_input(const std::filesystem::path& path) {
    input_hashes[path.string()] = hex64(hash_file(path));
}

std::string Manifest::to_json_text() const {
    nlohmann::json j;
    j["command"] = command;
    j["config"] = config;
    j["input_hashes"] = input_hashes;
    j["outputs"] = outputs;
    j["stats"] = stats;
    j["wall_seconds"] = wall_seconds;
    return j.dump(2) + "\n";
}

void Manifest::save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot create " + path.string());
    out << to_json_text();
    if (!out) throw IoError("short write on " + path.string());
}

}  // namespace crane
