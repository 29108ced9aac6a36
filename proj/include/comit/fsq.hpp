#pragma once

// Finite scalar quantization. Each channel is squashed into (-1, 1) with a
// tanh bound and rounded to one of L_i uniformly spaced grid values
//   v_k = -1 + 2k / (L_i - 1),  k in [0, L_i).
// Even level counts have no zero grid point, so those channels carry a fixed
// pre-squash shift that lands input 0 exactly on the lower central grid value.
// Token ids combine per-channel digits in mixed radix (channel 0 least
// significant).

#include "comit/common.hpp"
#include "comit/graph.hpp"

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <vector>

namespace comit::fsq {

struct FsqSpec {
    std::vector<int> levels;

    int token_dim() const { return static_cast<int>(levels.size()); }

    int64_t vocab_size() const {
        int64_t n = 1;
        for (int l : levels) n *= l;
        return n;
    }

    void validate() const {
        require(!levels.empty(), "FsqSpec: empty level list");
        for (int l : levels) require(l >= 2, "FsqSpec: every level count must be >= 2");
    }

    bool operator==(const FsqSpec& o) const { return levels == o.levels; }

    // paper-scale preset: 64000 codes over 6 channels
    static FsqSpec paper() { return {{8, 8, 8, 5, 5, 5}}; }
    // desk-scale preset: 1600 codes over 4 channels
    static FsqSpec desk() { return {{8, 8, 5, 5}}; }
};

// pre-squash shift per channel; lands 0 on the lower central grid value for
// even level counts, and on 0 for odd ones
inline double bound_shift(int level) {
    return level % 2 == 0 ? std::atanh(-1.0 / (level - 1)) : 0.0;
}

inline double grid_value(int digit, int level) {
    return -1.0 + 2.0 * digit / (level - 1);
}

inline int nearest_digit(double bounded, int level) {
    long d = std::lround((bounded + 1.0) * (level - 1) / 2.0);
    if (d < 0) d = 0;
    if (d >= level) d = level - 1;
    return static_cast<int>(d);
}

struct Quantized {
    std::vector<double> values;
    std::vector<int> digits;
};

inline Quantized quantize(const std::vector<double>& v, const FsqSpec& spec) {
    spec.validate();
    require(static_cast<int>(v.size()) == spec.token_dim(), "quantize: dimension mismatch");
    Quantized q;
    q.values.resize(v.size());
    q.digits.resize(v.size());
    for (size_t i = 0; i < v.size(); ++i) {
        require(std::isfinite(v[i]), "quantize: non-finite input channel");
        int level = spec.levels[i];
        double b = std::tanh(v[i] + bound_shift(level));
        int d = nearest_digit(b, level);
        q.digits[i] = d;
        q.values[i] = grid_value(d, level);
    }
    return q;
}

inline std::vector<double> dequantize(const std::vector<int>& digits, const FsqSpec& spec) {
    require(static_cast<int>(digits.size()) == spec.token_dim(), "dequantize: dimension mismatch");
    std::vector<double> v(digits.size());
    for (size_t i = 0; i < digits.size(); ++i) {
        require(digits[i] >= 0 && digits[i] < spec.levels[i], "dequantize: digit out of range");
        v[i] = grid_value(digits[i], spec.levels[i]);
    }
    return v;
}

inline int64_t digits_to_id(const std::vector<int>& digits, const FsqSpec& spec) {
    require(static_cast<int>(digits.size()) == spec.token_dim(), "digits_to_id: dimension mismatch");
    int64_t id = 0, base = 1;
    for (size_t i = 0; i < digits.size(); ++i) {
        require(digits[i] >= 0 && digits[i] < spec.levels[i], "digits_to_id: digit out of range");
        id += digits[i] * base;
        base *= spec.levels[i];
    }
    return id;
}

inline std::vector<int> id_to_digits(int64_t id, const FsqSpec& spec) {
    require(id >= 0 && id < spec.vocab_size(), "id_to_digits: id out of vocabulary");
    std::vector<int> digits(static_cast<size_t>(spec.token_dim()));
    for (size_t i = 0; i < digits.size(); ++i) {
        digits[i] = static_cast<int>(id % spec.levels[i]);
        id /= spec.levels[i];
    }
    return digits;
}

// Fixed-length discrete message: L tokens, each a quantized channel vector
// with its vocabulary id.
struct LatentMessage {
    MatD tokens;                // L x d grid values in [-1, 1]
    std::vector<int64_t> ids;   // L ids in [0, N)
    FsqSpec spec;

    int length() const { return static_cast<int>(ids.size()); }

    bool operator==(const LatentMessage& o) const {
        return ids == o.ids && spec == o.spec;
    }
};

inline LatentMessage message_from_ids(const std::vector<int64_t>& ids, const FsqSpec& spec) {
    spec.validate();
    LatentMessage m;
    m.spec = spec;
    m.ids = ids;
    m.tokens.resize(static_cast<Eigen::Index>(ids.size()), spec.token_dim());
    for (size_t j = 0; j < ids.size(); ++j) {
        auto values = dequantize(id_to_digits(ids[j], spec), spec);
        for (int c = 0; c < spec.token_dim(); ++c)
            m.tokens(static_cast<Eigen::Index>(j), c) = values[static_cast<size_t>(c)];
    }
    return m;
}

// quantize an L x d matrix of raw channel values row by row
inline LatentMessage message_from_raw(const MatD& raw, const FsqSpec& spec) {
    LatentMessage m;
    m.spec = spec;
    m.tokens.resize(raw.rows(), raw.cols());
    m.ids.resize(static_cast<size_t>(raw.rows()));
    std::vector<double> row(static_cast<size_t>(raw.cols()));
    for (Eigen::Index r = 0; r < raw.rows(); ++r) {
        for (Eigen::Index c = 0; c < raw.cols(); ++c) row[static_cast<size_t>(c)] = raw(r, c);
        Quantized q = quantize(row, spec);
        m.ids[static_cast<size_t>(r)] = digits_to_id(q.digits, spec);
        for (Eigen::Index c = 0; c < raw.cols(); ++c)
            m.tokens(r, c) = q.values[static_cast<size_t>(c)];
    }
    return m;
}

// Straight-through quantization on the tape: forward emits exact grid values,
// backward passes the tanh-bound gradient (rounding treated as identity).
template <typename T>
typename Graph<T>::Var straight_through(Graph<T>& g, typename Graph<T>::Var raw,
                                        const FsqSpec& spec) {
    const Mat<T>& x = g.val(raw);
    require(x.cols() == spec.token_dim(), "straight_through: dimension mismatch");
    Mat<T> value(x.rows(), x.cols());
    Mat<T> deriv(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r)
        for (Eigen::Index c = 0; c < x.cols(); ++c) {
            require(std::isfinite(static_cast<double>(x(r, c))),
                    "straight_through: non-finite input");
            int level = spec.levels[static_cast<size_t>(c)];
            double b = std::tanh(static_cast<double>(x(r, c)) + bound_shift(level));
            value(r, c) = static_cast<T>(grid_value(nearest_digit(b, level), level));
            deriv(r, c) = static_cast<T>(1.0 - b * b);
        }
    return g.elementwise_custom(raw, std::move(value), std::move(deriv));
}

// ---- message dump format ----------------------------------------------------
// "COMT" | version u32 | L u32 | N u32 | L x id u32, all little-endian

inline constexpr uint32_t kDumpVersion = 1;

namespace detail {
inline void put_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}
inline uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) fail("message dump: truncated stream");
    return static_cast<uint32_t>(b[0]) | static_cast<uint32_t>(b[1]) << 8 |
           static_cast<uint32_t>(b[2]) << 16 | static_cast<uint32_t>(b[3]) << 24;
}
}  // namespace detail

inline void write_message(std::ostream& os, const LatentMessage& m) {
    os.write("COMT", 4);
    detail::put_u32(os, kDumpVersion);
    detail::put_u32(os, static_cast<uint32_t>(m.length()));
    detail::put_u32(os, static_cast<uint32_t>(m.spec.vocab_size()));
    for (int64_t id : m.ids) detail::put_u32(os, static_cast<uint32_t>(id));
}

inline void save_message(const std::filesystem::path& path, const LatentMessage& m) {
    std::ofstream os(path, std::ios::binary);
    if (!os) fail("cannot open message dump for writing: " + path.string());
    write_message(os, m);
}

// reads ids; the caller supplies the FsqSpec used to reconstruct token values
inline LatentMessage read_message(std::istream& is, const FsqSpec& spec) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::string_view(magic, 4) != "COMT") fail("message dump: bad magic");
    uint32_t version = detail::get_u32(is);
    if (version != kDumpVersion) fail("message dump: unsupported version");
    uint32_t length = detail::get_u32(is);
    uint32_t vocab = detail::get_u32(is);
    if (vocab != static_cast<uint32_t>(spec.vocab_size()))
        fail("message dump: vocabulary size does not match spec");
    std::vector<int64_t> ids(length);
    for (uint32_t j = 0; j < length; ++j) ids[j] = detail::get_u32(is);
    return message_from_ids(ids, spec);
}

inline LatentMessage load_message(const std::filesystem::path& path, const FsqSpec& spec) {
    std::ifstream is(path, std::ios::binary);
    if (!is) fail("cannot open message dump: " + path.string());
    return read_message(is, spec);
}

}  // namespace comit::fsq
