#pragma once

// Named float32 tensor container used for weights, optimizer state, EMA
// copies and teacher feature files.
// Layout: "CMTA" | u32 version | u32 count | per tensor:
//   u32 name_len | name | u32 rows | u32 cols | rows*cols f32, little-endian.

#include "comit/common.hpp"
#include "comit/graph.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

namespace comit::serialize {

inline constexpr uint32_t kArchiveVersion = 1;

struct TensorArchive {
    std::map<std::string, MatF> tensors;

    bool has(const std::string& name) const { return tensors.count(name) > 0; }

    const MatF& get(const std::string& name) const {
        auto it = tensors.find(name);
        if (it == tensors.end()) fail("archive: missing tensor " + name);
        return it->second;
    }
};

namespace detail {

inline void put_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) fail("archive: truncated stream");
    return static_cast<uint32_t>(b[0]) | static_cast<uint32_t>(b[1]) << 8 |
           static_cast<uint32_t>(b[2]) << 16 | static_cast<uint32_t>(b[3]) << 24;
}

inline void put_f32(std::ostream& os, float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(os, bits);
}

inline float get_f32(std::istream& is) {
    uint32_t bits = get_u32(is);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

}  // namespace detail

inline void write_archive(std::ostream& os, const TensorArchive& ar) {
    os.write("CMTA", 4);
    detail::put_u32(os, kArchiveVersion);
    detail::put_u32(os, static_cast<uint32_t>(ar.tensors.size()));
    for (const auto& [name, m] : ar.tensors) {
        detail::put_u32(os, static_cast<uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::put_u32(os, static_cast<uint32_t>(m.rows()));
        detail::put_u32(os, static_cast<uint32_t>(m.cols()));
        for (Eigen::Index r = 0; r < m.rows(); ++r)
            for (Eigen::Index c = 0; c < m.cols(); ++c) detail::put_f32(os, m(r, c));
    }
}

inline TensorArchive read_archive(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::string_view(magic, 4) != "CMTA") fail("archive: bad magic");
    if (detail::get_u32(is) != kArchiveVersion) fail("archive: unsupported version");
    uint32_t count = detail::get_u32(is);
    TensorArchive ar;
    for (uint32_t i = 0; i < count; ++i) {
        uint32_t name_len = detail::get_u32(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        uint32_t rows = detail::get_u32(is), cols = detail::get_u32(is);
        MatF m(rows, cols);
        for (uint32_t r = 0; r < rows; ++r)
            for (uint32_t c = 0; c < cols; ++c) m(r, c) = detail::get_f32(is);
        ar.tensors.emplace(std::move(name), std::move(m));
    }
    return ar;
}

inline void save_archive(const std::filesystem::path& path, const TensorArchive& ar) {
    std::ofstream os(path, std::ios::binary);
    if (!os) fail("cannot open archive for writing: " + path.string());
    write_archive(os, ar);
}

inline TensorArchive load_archive(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) fail("cannot open archive: " + path.string());
    return read_archive(is);
}

// ---- ParamStore bridging -----------------------------------------------------

template <typename T>
TensorArchive weights_to_archive(const ParamStore<T>& store) {
    TensorArchive ar;
    for (int i = 0; i < store.size(); ++i)
        ar.tensors[store.entry(i).name] = store.entry(i).w.template cast<float>();
    return ar;
}

template <typename T>
void weights_from_archive(ParamStore<T>& store, const TensorArchive& ar) {
    for (int i = 0; i < store.size(); ++i) {
        const auto& e = store.entry(i);
        const MatF& m = ar.get(e.name);
        require(m.rows() == e.w.rows() && m.cols() == e.w.cols(),
                "archive: tensor shape mismatch for " + e.name);
        store.weight(i) = m.template cast<T>();
    }
}

template <typename T>
TensorArchive moments_to_archive(const ParamStore<T>& store) {
    TensorArchive ar;
    for (int i = 0; i < store.size(); ++i) {
        ar.tensors[store.entry(i).name + "#m"] = store.entry(i).m.template cast<float>();
        ar.tensors[store.entry(i).name + "#v"] = store.entry(i).v.template cast<float>();
    }
    return ar;
}

template <typename T>
void moments_from_archive(ParamStore<T>& store, const TensorArchive& ar) {
    for (int i = 0; i < store.size(); ++i) {
        auto& e = store.entry(i);
        e.m = ar.get(e.name + "#m").template cast<T>();
        e.v = ar.get(e.name + "#v").template cast<T>();
    }
}

}  // namespace comit::serialize
