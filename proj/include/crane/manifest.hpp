#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace crane {

// Execution record for one CLI command: effective configuration, input byte
// hashes, written files, and per-stage statistics. Re-running a command on
// identical inputs reproduces the manifest except for wall_seconds.
struct Manifest {
    std::string command;
    std::map<std::string, std::string> config;        // flag -> rendered value
    std::map<std::string, std::string> input_hashes;  // path -> 16-hex fnv1a64
    std::vector<std::string> outputs;                 // written paths, write order
    std::map<std::string, double> stats;
    double wall_seconds = 0.0;

    void add_input(const std::filesystem::path& path);

    std::string to_json_text() const;
    void save(const std::filesystem::path& path) const;
};

// Streaming 64-bit FNV-1a over the file's bytes.
uint64_t hash_file(const std::filesystem::path& path);

std::string hex64(uint64_t value);

}  // namespace crane
