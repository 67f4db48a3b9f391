#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "crane/dtype.hpp"

namespace crane {

struct TensorMeta {
    Dtype dtype = Dtype::F32;
    std::vector<size_t> shape;
    uint64_t byte_offset = 0;  // relative to owning payload start
    uint64_t byte_length = 0;

    size_t element_count() const {
        size_t n = 1;
        for (size_t e : shape) n *= e;
        return n;
    }
};

// Owned tensor: the unit handed to the writer and produced by f64 math.
struct Tensor {
    Dtype dtype = Dtype::F32;
    std::vector<size_t> shape;
    std::vector<unsigned char> bytes;

    size_t element_count() const {
        size_t n = 1;
        for (size_t e : shape) n *= e;
        return n;
    }

    static Tensor from_f64(Dtype dtype, std::vector<size_t> shape, const std::vector<double>& values);
};

// Read-only view into an open archive's payload.
struct TensorView {
    TensorMeta meta;
    std::span<const unsigned char> bytes;
};

class TensorArchive {
public:
    // Each path is either a shard file or an "archive.index.json" index.
    static TensorArchive open(const std::vector<std::filesystem::path>& paths);
    static TensorArchive open(const std::filesystem::path& path) { return open(std::vector{path}); }

    size_t size() const { return order_.size(); }
    bool contains(const std::string& name) const { return views_.count(name) != 0; }
    // Lexicographic over tensor names, independent of shard layout.
    const std::vector<std::string>& names() const { return order_; }
    const TensorView& view(const std::string& name) const;
    const std::vector<std::filesystem::path>& shard_list() const { return shards_; }

private:
    std::vector<std::string> order_;
    std::map<std::string, TensorView> views_;
    std::vector<std::filesystem::path> shards_;
    std::vector<std::vector<unsigned char>> payloads_;
};

// In-memory archive used by everything downstream of file I/O.
using TensorMap = std::map<std::string, Tensor>;
TensorMap to_map(const TensorArchive& archive);

// Widen a view to f64 (lossless for every supported dtype).
std::vector<double> load_f64(const TensorView& view);
std::vector<double> load_f64(const Tensor& tensor);

// Write tensors in lexicographic name order, splitting shards so no payload
// exceeds shard_budget (an oversized tensor gets its own shard). Returns the
// written shard paths; multi-shard outputs also get an "archive.index.json"
// next to the shards. `out` names the single-shard file; multi-shard files
// derive "<stem>-NNNNN-of-NNNNN<ext>" names from it.
std::vector<std::filesystem::path> write_archive(const std::map<std::string, Tensor>& tensors,
                                                 const std::filesystem::path& out,
                                                 uint64_t shard_budget = UINT64_MAX);

}  // namespace crane
