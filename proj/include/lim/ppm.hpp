// Binary PPM (P6, 8-bit) reader/writer.
#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace lim {

struct Image8 {
    int w = 0, h = 0;
    std::vector<std::uint8_t> rgb;  // row-major, 3 bytes per pixel

    std::uint8_t* pixel(int x, int y) { return rgb.data() + 3 * (static_cast<std::size_t>(y) * w + x); }
    const std::uint8_t* pixel(int x, int y) const {
        return rgb.data() + 3 * (static_cast<std::size_t>(y) * w + x);
    }
};

inline void write_ppm(const Image8& img, std::ostream& os) {
    os << "P6\n" << img.w << " " << img.h << "\n255\n";
    os.write(reinterpret_cast<const char*>(img.rgb.data()),
             static_cast<std::streamsize>(img.rgb.size()));
    if (!os) throw std::runtime_error("ppm write failed");
}

inline void write_ppm(const Image8& img, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for writing: " + path);
    write_ppm(img, os);
}

namespace detail {

inline int ppm_next_int(std::istream& is) {
    // skips whitespace and '#' comment lines between header fields
    for (;;) {
        const int c = is.peek();
        if (c == '#') {
            std::string line;
            std::getline(is, line);
        } else if (std::isspace(c)) {
            is.get();
        } else {
            break;
        }
    }
    int v = 0;
    if (!(is >> v)) throw std::runtime_error("ppm: malformed header");
    return v;
}

}  // namespace detail

inline Image8 read_ppm(std::istream& is) {
    char m0 = 0, m1 = 0;
    is.get(m0);
    is.get(m1);
    if (m0 != 'P' || m1 != '6') throw std::runtime_error("ppm: not a P6 file");
    Image8 img;
    img.w = detail::ppm_next_int(is);
    img.h = detail::ppm_next_int(is);
    const int maxval = detail::ppm_next_int(is);
    if (maxval != 255) throw std::runtime_error("ppm: only 8-bit maxval 255 supported");
    is.get();  // single whitespace before payload
    img.rgb.resize(static_cast<std::size_t>(img.w) * img.h * 3);
    is.read(reinterpret_cast<char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
    if (!is) throw std::runtime_error("ppm: truncated payload");
    return img;
}

inline Image8 read_ppm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open: " + path);
    return read_ppm(is);
}

// Reads only the header, for dimension lookups.
inline std::pair<int, int> read_ppm_dims(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open: " + path);
    char m0 = 0, m1 = 0;
    is.get(m0);
    is.get(m1);
    if (m0 != 'P' || m1 != '6') throw std::runtime_error("ppm: not a P6 file");
    const int w = detail::ppm_next_int(is);
    const int h = detail::ppm_next_int(is);
    return {w, h};
}

}  // namespace lim
