#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "../core/params.hpp"
#include "../core/tensor.hpp"

// Checkpoint container: a plain-text manifest (one `name f32 d0xd1x... byte_offset`
// line per tensor) next to a single binary blob of little-endian 32-bit floats.

namespace glyphdiff {

static_assert(std::endian::native == std::endian::little, "blob layout assumes little-endian");

struct TensorRecord {
    std::string name;
    std::vector<int> shape;
    std::vector<float> data;
};

inline std::string record_dims(const std::vector<int>& shape) {
    std::ostringstream os;
    for (size_t i = 0; i < shape.size(); i++) os << (i ? "x" : "") << shape[i];
    return os.str();
}

inline void save_records(const std::string& prefix, const std::vector<TensorRecord>& recs) {
    std::ofstream mf(prefix + ".manifest");
    if (!mf) throw IoError("cannot write " + prefix + ".manifest");
    std::ofstream bf(prefix + ".bin", std::ios::binary);
    if (!bf) throw IoError("cannot write " + prefix + ".bin");
    uint64_t offset = 0;
    for (auto& r : recs) {
        if (r.name.empty() || r.name.find_first_of(" \t\n") != std::string::npos)
            throw IoError("bad record name '" + r.name + "'");
        if (r.shape.empty()) throw IoError(r.name + ": empty shape");
        int64_t n = 1;
        for (int d : r.shape) {
            if (d <= 0) throw IoError(r.name + ": bad dim");
            n *= d;
        }
        if (n != static_cast<int64_t>(r.data.size()))
            throw IoError(r.name + ": shape/data mismatch");
        mf << r.name << " f32 " << record_dims(r.shape) << " " << offset << "\n";
        bf.write(reinterpret_cast<const char*>(r.data.data()),
                 static_cast<std::streamsize>(n * sizeof(float)));
        offset += static_cast<uint64_t>(n) * sizeof(float);
    }
    if (!mf || !bf) throw IoError("short write under " + prefix);
}

inline std::vector<TensorRecord> load_records(const std::string& prefix) {
    std::ifstream mf(prefix + ".manifest");
    if (!mf) throw IoError("cannot read " + prefix + ".manifest");
    std::ifstream bf(prefix + ".bin", std::ios::binary);
    if (!bf) throw IoError("cannot read " + prefix + ".bin");
    bf.seekg(0, std::ios::end);
    uint64_t blob_size = static_cast<uint64_t>(bf.tellg());

    std::vector<TensorRecord> out;
    std::string line;
    int lineno = 0;
    while (std::getline(mf, line)) {
        lineno++;
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string name, dtype, dims;
        uint64_t offset = 0;
        if (!(ls >> name >> dtype >> dims >> offset))
            throw IoError(prefix + ".manifest:" + std::to_string(lineno) + ": malformed line");
        if (dtype != "f32")
            throw IoError(prefix + ".manifest:" + std::to_string(lineno) + ": unsupported dtype " + dtype);
        TensorRecord rec;
        rec.name = name;
        int64_t n = 1;
        size_t pos = 0;
        while (pos <= dims.size()) {
            size_t next = dims.find('x', pos);
            std::string tok = dims.substr(pos, next == std::string::npos ? next : next - pos);
            int d = 0;
            try {
                d = std::stoi(tok);
            } catch (...) {
                throw IoError(prefix + ".manifest:" + std::to_string(lineno) + ": bad dims " + dims);
            }
            if (d <= 0) throw IoError(prefix + ".manifest:" + std::to_string(lineno) + ": bad dims " + dims);
            rec.shape.push_back(d);
            n *= d;
            if (next == std::string::npos) break;
            pos = next + 1;
        }
        uint64_t bytes = static_cast<uint64_t>(n) * sizeof(float);
        if (offset + bytes > blob_size)
            throw IoError(prefix + ".bin: " + name + " extends past end of blob");
        rec.data.resize(static_cast<size_t>(n));
        bf.seekg(static_cast<std::streamoff>(offset));
        bf.read(reinterpret_cast<char*>(rec.data.data()), static_cast<std::streamsize>(bytes));
        if (!bf) throw IoError(prefix + ".bin: short read for " + name);
        out.push_back(std::move(rec));
    }
    return out;
}

template <typename T>
std::vector<TensorRecord> records_from_store(const ParamStore<T>& ps) {
    std::vector<TensorRecord> out;
    out.reserve(ps.size());
    for (auto& [name, t] : ps.items()) {
        TensorRecord rec{name, t->shape, {}};
        rec.data.resize(static_cast<size_t>(t->numel()));
        for (int64_t i = 0; i < t->numel(); i++) rec.data[static_cast<size_t>(i)] = static_cast<float>(t->v[i]);
        out.push_back(std::move(rec));
    }
    return out;
}

// every store tensor must appear with an identical shape; extra records
// (optimizer state, config) are ignored here
template <typename T>
void load_store(ParamStore<T>& ps, const std::vector<TensorRecord>& recs) {
    std::map<std::string, const TensorRecord*> by_name;
    for (auto& r : recs) by_name[r.name] = &r;
    for (auto& [name, t] : ps.items()) {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw ConfigError("checkpoint missing tensor " + name);
        if (it->second->shape != t->shape)
            throw ConfigError("checkpoint shape mismatch for " + name + ": file " +
                              shape_str(it->second->shape) + " vs model " + shape_str(t->shape));
        for (int64_t i = 0; i < t->numel(); i++)
            t->v[i] = static_cast<T>(it->second->data[static_cast<size_t>(i)]);
    }
}

inline const TensorRecord* find_record(const std::vector<TensorRecord>& recs, const std::string& name) {
    for (auto& r : recs)
        if (r.name == name) return &r;
    return nullptr;
}

}  // namespace glyphdiff
