#include "crane/tensor_archive.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>

#include "json.hpp"

#include "crane/errors.hpp"

namespace crane {

using nlohmann::json;
namespace fs = std::filesystem;

Tensor Tensor::from_f64(Dtype dtype, std::vector<size_t> shape, const std::vector<double>& values) {
    Tensor t;
    t.dtype = dtype;
    t.shape = std::move(shape);
    if (t.element_count() != values.size())
        throw ValidationError("tensor shape does not match value count");
    const size_t w = dtype_width(dtype);
    t.bytes.resize(values.size() * w);
    for (size_t i = 0; i < values.size(); ++i)
        encode_element(values[i], dtype, t.bytes.data() + i * w);
    return t;
}

std::vector<double> load_f64(const TensorView& view) {
    const size_t w = dtype_width(view.meta.dtype);
    const size_t n = view.meta.element_count();
    if (view.bytes.size() != n * w)
        throw ValidationError("tensor byte length does not match shape");
    std::vector<double> out(n);
    for (size_t i = 0; i < n; ++i)
        out[i] = decode_element(view.bytes.data() + i * w, view.meta.dtype);
    return out;
}

std::vector<double> load_f64(const Tensor& tensor) {
    TensorView v;
    v.meta.dtype = tensor.dtype;
    v.meta.shape = tensor.shape;
    v.meta.byte_length = tensor.bytes.size();
    v.bytes = std::span<const unsigned char>(tensor.bytes.data(), tensor.bytes.size());
    return load_f64(v);
}

namespace {

std::vector<unsigned char> read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    in.seekg(0, std::ios::end);
    const auto len = in.tellg();
    if (len < 0) throw IoError("cannot stat " + path.string());
    in.seekg(0, std::ios::beg);
    std::vector<unsigned char> buf(static_cast<size_t>(len));
    if (len > 0) in.read(reinterpret_cast<char*>(buf.data()), len);
    if (!in) throw IoError("short read on " + path.string());
    return buf;
}

struct ParsedShard {
    std::map<std::string, TensorMeta> metas;
    std::vector<unsigned char> payload;
};

ParsedShard parse_shard(const fs::path& path) {
    auto buf = read_file(path);
    if (buf.size() < 8) throw ValidationError(path.string() + ": truncated header length");
    uint64_t header_len = 0;
    std::memcpy(&header_len, buf.data(), 8);  // little-endian on every supported target
    if (8 + header_len > buf.size())
        throw ValidationError(path.string() + ": header length exceeds file size");

    json header;
    try {
        header = json::parse(buf.begin() + 8, buf.begin() + 8 + static_cast<ptrdiff_t>(header_len));
    } catch (const json::exception& e) {
        throw ValidationError(path.string() + ": bad header JSON: " + e.what());
    }
    if (!header.is_object()) throw ValidationError(path.string() + ": header is not a JSON object");

    ParsedShard shard;
    const uint64_t payload_len = buf.size() - 8 - header_len;
    for (auto it = header.begin(); it != header.end(); ++it) {
        const std::string& name = it.key();
        const json& entry = it.value();
        if (!entry.is_object() || !entry.contains("dtype") || !entry.contains("shape") ||
            !entry.contains("data_offsets"))
            throw ValidationError(path.string() + ": malformed entry for " + name);
        TensorMeta meta;
        meta.dtype = dtype_from_name(entry.at("dtype").get<std::string>());
        for (const auto& d : entry.at("shape")) {
            if (!d.is_number_unsigned()) throw ValidationError(name + ": shape must be unsigned");
            meta.shape.push_back(d.get<size_t>());
        }
        const auto& offs = entry.at("data_offsets");
        if (!offs.is_array() || offs.size() != 2)
            throw ValidationError(name + ": data_offsets must be [begin, end]");
        const uint64_t begin = offs[0].get<uint64_t>();
        const uint64_t end = offs[1].get<uint64_t>();
        if (end < begin || end > payload_len)
            throw ValidationError(name + ": data_offsets out of range");
        meta.byte_offset = begin;
        meta.byte_length = end - begin;
        if (meta.byte_length != meta.element_count() * dtype_width(meta.dtype))
            throw ValidationError(name + ": byte span does not match dtype * shape");
        if (!shard.metas.emplace(name, std::move(meta)).second)
            throw ValidationError(path.string() + ": duplicate tensor " + name);
    }
    shard.payload.assign(buf.begin() + 8 + static_cast<ptrdiff_t>(header_len), buf.end());
    return shard;
}

bool is_index_file(const fs::path& path) {
    return path.filename() == "archive.index.json";
}

}  // namespace

TensorArchive TensorArchive::open(const std::vector<fs::path>& paths) {
    // Expand index files into their shard lists, keep explicit shards as-is.
    std::vector<fs::path> shard_paths;
    for (const auto& p : paths) {
        if (is_index_file(p)) {
            json idx;
            try {
                idx = json::parse(read_file(p));
            } catch (const json::exception& e) {
                throw ValidationError(p.string() + ": bad index JSON: " + e.what());
            }
            if (!idx.contains("shards") || !idx.at("shards").is_array())
                throw ValidationError(p.string() + ": index missing \"shards\" array");
            for (const auto& s : idx.at("shards"))
                shard_paths.push_back(p.parent_path() / s.get<std::string>());
        } else {
            shard_paths.push_back(p);
        }
    }
    if (shard_paths.empty()) throw ValidationError("archive has no shards");

    TensorArchive ar;
    ar.shards_ = shard_paths;
    for (const auto& sp : shard_paths) {
        auto shard = parse_shard(sp);
        ar.payloads_.push_back(std::move(shard.payload));
        const auto& payload = ar.payloads_.back();
        for (auto& [name, meta] : shard.metas) {
            TensorView v;
            v.meta = meta;
            v.bytes = std::span<const unsigned char>(payload.data() + meta.byte_offset, meta.byte_length);
            if (!ar.views_.emplace(name, v).second)
                throw ValidationError("duplicate tensor across shards: " + name);
        }
    }
    for (const auto& [name, _] : ar.views_) ar.order_.push_back(name);  // map is already sorted
    return ar;
}

const TensorView& TensorArchive::view(const std::string& name) const {
    auto it = views_.find(name);
    if (it == views_.end()) throw ValidationError("no tensor named " + name);
    return it->second;
}

namespace {

void write_shard(const fs::path& path, const std::vector<std::pair<std::string, const Tensor*>>& tensors) {
    json header = json::object();
    uint64_t offset = 0;
    for (const auto& [name, t] : tensors) {
        json entry;
        entry["dtype"] = dtype_name(t->dtype);
        entry["shape"] = t->shape;
        entry["data_offsets"] = {offset, offset + t->bytes.size()};
        header[name] = std::move(entry);
        offset += t->bytes.size();
    }
    const std::string header_str = header.dump();
    const uint64_t header_len = header_str.size();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot create " + path.string());
    out.write(reinterpret_cast<const char*>(&header_len), 8);
    out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
    for (const auto& [_, t] : tensors)
        out.write(reinterpret_cast<const char*>(t->bytes.data()), static_cast<std::streamsize>(t->bytes.size()));
    if (!out) throw IoError("short write on " + path.string());
}

}  // namespace

std::vector<fs::path> write_archive(const std::map<std::string, Tensor>& tensors,
                                    const fs::path& out, uint64_t shard_budget) {
    if (shard_budget == 0) throw ValidationError("shard budget must be positive");

    // Greedy packing in lexicographic name order: start a new shard when the
    // next tensor would overflow the budget; a tensor larger than the budget
    // still goes somewhere, alone in its own shard.
    std::vector<std::vector<std::pair<std::string, const Tensor*>>> groups;
    uint64_t used = 0;
    for (const auto& [name, t] : tensors) {
        const uint64_t sz = t.bytes.size();
        if (groups.empty() || (used + sz > shard_budget && !groups.back().empty())) {
            groups.emplace_back();
            used = 0;
        }
        groups.back().emplace_back(name, &t);
        used += sz;
    }
    if (groups.empty()) groups.emplace_back();  // empty archive still writes one shard

    std::vector<fs::path> written;
    if (groups.size() == 1) {
        write_shard(out, groups[0]);
        written.push_back(out);
        return written;
    }

    const std::string stem = out.stem().string();
    const std::string ext = out.extension().string();
    const fs::path dir = out.parent_path();
    json shard_names = json::array();
    for (size_t i = 0; i < groups.size(); ++i) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "-%05zu-of-%05zu", i + 1, groups.size());
        const std::string fname = stem + buf + ext;
        write_shard(dir / fname, groups[i]);
        written.push_back(dir / fname);
        shard_names.push_back(fname);
    }

    json idx;
    idx["shards"] = shard_names;
    std::ofstream idx_out(dir / "archive.index.json", std::ios::trunc);
    if (!idx_out) throw IoError("cannot create archive.index.json");
    idx_out << idx.dump(2) << "\n";
    if (!idx_out) throw IoError("short write on archive.index.json");
    return written;
}

TensorMap to_map(const TensorArchive& archive) {
    TensorMap out;
    for (const auto& name : archive.names()) {
        const auto& v = archive.view(name);
        Tensor t;
        t.dtype = v.meta.dtype;
        t.shape = v.meta.shape;
        t.bytes.assign(v.bytes.begin(), v.bytes.end());
        out.emplace(name, std::move(t));
    }
    return out;
}

}  // namespace crane
