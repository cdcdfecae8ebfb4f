// Dense 4-D tensor (batch, channel, height, width), contiguous row-major.
// All kernels in this library operate on this one layout.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace lim {

template <typename S>
struct Tensor4 {
    static_assert(std::is_floating_point_v<S>, "Tensor4 holds IEEE-754 floats");

    int n = 0, c = 0, h = 0, w = 0;
    std::vector<S> data;

    Tensor4() = default;
    Tensor4(int n_, int c_, int h_, int w_, S fill = S(0))
        : n(n_), c(c_), h(h_), w(w_) {
        if (n < 0 || c < 0 || h < 0 || w < 0) {
            throw std::invalid_argument("Tensor4: negative extent " + shape_str());
        }
        data.assign(static_cast<std::size_t>(n) * c * h * w, fill);
    }

    static Tensor4 zeros(int n, int c, int h, int w) { return Tensor4(n, c, h, w, S(0)); }
    static Tensor4 ones(int n, int c, int h, int w) { return Tensor4(n, c, h, w, S(1)); }

    std::size_t size() const { return data.size(); }

    bool same_shape(const Tensor4& o) const {
        return n == o.n && c == o.c && h == o.h && w == o.w;
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << "(" << n << "," << c << "," << h << "," << w << ")";
        return os.str();
    }

    std::size_t index(int b, int ch, int y, int x) const {
        return ((static_cast<std::size_t>(b) * c + ch) * h + y) * w + x;
    }

    S& at(int b, int ch, int y, int x) { return data[index(b, ch, y, x)]; }
    const S& at(int b, int ch, int y, int x) const { return data[index(b, ch, y, x)]; }

    S* row(int b, int ch, int y) { return data.data() + index(b, ch, y, 0); }
    const S* row(int b, int ch, int y) const { return data.data() + index(b, ch, y, 0); }

    S* plane(int b, int ch) { return data.data() + index(b, ch, 0, 0); }
    const S* plane(int b, int ch) const { return data.data() + index(b, ch, 0, 0); }

    void fill(S v) { std::fill(data.begin(), data.end(), v); }

    template <typename T>
    Tensor4<T> cast() const {
        Tensor4<T> out(n, c, h, w);
        for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<T>(data[i]);
        return out;
    }
};

namespace detail {

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

template <typename S>
void require_same_shape(const Tensor4<S>& a, const Tensor4<S>& b, const char* op) {
    if (!a.same_shape(b)) {
        throw std::invalid_argument(std::string(op) + ": extent mismatch " + a.shape_str() +
                                    " vs " + b.shape_str());
    }
}

}  // namespace detail

template <typename S>
Tensor4<S> elementwise_add(const Tensor4<S>& a, const Tensor4<S>& b) {
    detail::require_same_shape(a, b, "elementwise_add");
    Tensor4<S> out(a.n, a.c, a.h, a.w);
    for (std::size_t i = 0; i < a.size(); ++i) out.data[i] = a.data[i] + b.data[i];
    return out;
}

template <typename S>
void add_inplace(Tensor4<S>& acc, const Tensor4<S>& b) {
    detail::require_same_shape(acc, b, "add_inplace");
    for (std::size_t i = 0; i < acc.size(); ++i) acc.data[i] += b.data[i];
}

template <typename S>
S tensor_sum(const Tensor4<S>& t) {
    S s = S(0);
    for (S v : t.data) s += v;
    return s;
}

template <typename S>
S max_abs(const Tensor4<S>& t) {
    S m = S(0);
    for (S v : t.data) m = std::max(m, std::abs(v));
    return m;
}

template <typename S>
bool all_finite(const Tensor4<S>& t) {
    for (S v : t.data) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

template <typename S>
bool bit_equal(const Tensor4<S>& a, const Tensor4<S>& b) {
    if (!a.same_shape(b)) return false;
    return std::memcmp(a.data.data(), b.data.data(), a.size() * sizeof(S)) == 0;
}

// ---------------------------------------------------------------------------
// Versioned binary dump/load.
// Layout: magic "T4v1", 4 little-endian u32 extents (n,c,h,w), one precision
// tag byte (bytes per element: 4 or 8), then raw little-endian values.
// ---------------------------------------------------------------------------

namespace detail {

inline void write_u32_le(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t read_u32_le(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw std::runtime_error("tensor load: truncated header");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace detail

template <typename S>
void dump_tensor(const Tensor4<S>& t, std::ostream& os) {
    os.write("T4v1", 4);
    detail::write_u32_le(os, static_cast<std::uint32_t>(t.n));
    detail::write_u32_le(os, static_cast<std::uint32_t>(t.c));
    detail::write_u32_le(os, static_cast<std::uint32_t>(t.h));
    detail::write_u32_le(os, static_cast<std::uint32_t>(t.w));
    const unsigned char tag = sizeof(S);
    os.write(reinterpret_cast<const char*>(&tag), 1);
    // x86-family hosts are little-endian; values are written verbatim.
    os.write(reinterpret_cast<const char*>(t.data.data()),
             static_cast<std::streamsize>(t.size() * sizeof(S)));
    if (!os) throw std::runtime_error("tensor dump: write failure");
}

template <typename S>
void dump_tensor(const Tensor4<S>& t, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("tensor dump: cannot open " + path);
    dump_tensor(t, os);
}

template <typename S>
Tensor4<S> load_tensor(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "T4v1", 4) != 0) {
        throw std::runtime_error("tensor load: bad magic (expected T4v1)");
    }
    const int n = static_cast<int>(detail::read_u32_le(is));
    const int c = static_cast<int>(detail::read_u32_le(is));
    const int h = static_cast<int>(detail::read_u32_le(is));
    const int w = static_cast<int>(detail::read_u32_le(is));
    unsigned char tag = 0;
    is.read(reinterpret_cast<char*>(&tag), 1);
    if (!is || (tag != 4 && tag != 8)) throw std::runtime_error("tensor load: bad precision tag");
    Tensor4<S> out(n, c, h, w);
    const std::size_t count = out.size();
    if (tag == sizeof(S)) {
        is.read(reinterpret_cast<char*>(out.data.data()),
                static_cast<std::streamsize>(count * sizeof(S)));
    } else if (tag == 4) {
        std::vector<float> tmp(count);
        is.read(reinterpret_cast<char*>(tmp.data()), static_cast<std::streamsize>(count * 4));
        for (std::size_t i = 0; i < count; ++i) out.data[i] = static_cast<S>(tmp[i]);
    } else {
        std::vector<double> tmp(count);
        is.read(reinterpret_cast<char*>(tmp.data()), static_cast<std::streamsize>(count * 8));
        for (std::size_t i = 0; i < count; ++i) out.data[i] = static_cast<S>(tmp[i]);
    }
    if (!is) throw std::runtime_error("tensor load: truncated payload");
    return out;
}

template <typename S>
Tensor4<S> load_tensor(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("tensor load: cannot open " + path);
    return load_tensor<S>(is);
}

}  // namespace lim
