// Procedural pseudo-X-ray scene generator: translucent overlapping shapes
// on a white background, composited multiplicatively like attenuation
// images, with tight box annotations and per-instance occlusion fractions.
#pragma once

#include <array>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "lim/eval.hpp"
#include "lim/ppm.hpp"
#include "lim/rng.hpp"
#include "lim/tensor.hpp"

namespace lim {

// Material color model: organic substances image orange, inorganic blue,
// mixtures green. Base transmittance per channel fixes the hue; the
// per-shape attenuation coefficient scales its strength.
enum class MaterialClass { Organic, Inorganic, Mixture };

inline const char* material_name(MaterialClass m) {
    switch (m) {
        case MaterialClass::Organic: return "organic";
        case MaterialClass::Inorganic: return "inorganic";
        case MaterialClass::Mixture: return "mixture";
    }
    return "?";
}

inline std::array<double, 3> material_base_transmittance(MaterialClass m) {
    switch (m) {
        case MaterialClass::Organic: return {1.00, 0.62, 0.12};   // orange
        case MaterialClass::Inorganic: return {0.15, 0.35, 1.00}; // blue
        case MaterialClass::Mixture: return {0.20, 1.00, 0.30};   // green
    }
    return {1.0, 1.0, 1.0};
}

// per-channel transmittance of one shape: 1 - alpha * (1 - base)
inline std::array<double, 3> shape_transmittance(MaterialClass m, double alpha) {
    const auto base = material_base_transmittance(m);
    return {1.0 - alpha * (1.0 - base[0]), 1.0 - alpha * (1.0 - base[1]),
            1.0 - alpha * (1.0 - base[2])};
}

enum class ShapeKind { Rectangle, Ellipse, Capsule };

inline const char* shape_kind_name(ShapeKind k) {
    switch (k) {
        case ShapeKind::Rectangle: return "rectangle";
        case ShapeKind::Ellipse: return "ellipse";
        case ShapeKind::Capsule: return "capsule";
    }
    return "?";
}

// shape kinds map one-to-one onto detector classes; each kind keeps a fixed
// material so color identifies the class
inline MaterialClass material_for_kind(ShapeKind k) {
    switch (k) {
        case ShapeKind::Rectangle: return MaterialClass::Inorganic;
        case ShapeKind::Ellipse: return MaterialClass::Organic;
        case ShapeKind::Capsule: return MaterialClass::Mixture;
    }
    return MaterialClass::Organic;
}

struct Shape {
    ShapeKind kind = ShapeKind::Rectangle;
    double cx = 0, cy = 0;  // center in pixels
    double rx = 0, ry = 0;  // half extents
    double alpha = 0.6;     // attenuation strength
};

inline bool shape_covers(const Shape& s, double px, double py) {
    const double dx = px - s.cx, dy = py - s.cy;
    switch (s.kind) {
        case ShapeKind::Rectangle:
            return std::abs(dx) <= s.rx && std::abs(dy) <= s.ry;
        case ShapeKind::Ellipse: {
            const double ex = dx / s.rx, ey = dy / s.ry;
            return ex * ex + ey * ey <= 1.0;
        }
        case ShapeKind::Capsule: {
            // stadium along the longer axis
            if (s.rx >= s.ry) {
                const double half = s.rx - s.ry;
                const double qx = std::max(0.0, std::abs(dx) - half);
                return qx * qx + dy * dy <= s.ry * s.ry;
            }
            const double half = s.ry - s.rx;
            const double qy = std::max(0.0, std::abs(dy) - half);
            return dx * dx + qy * qy <= s.rx * s.rx;
        }
    }
    return false;
}

// Renders the multiplicative composite. Per pixel the covering shapes'
// transmittance factors are multiplied in sorted value order, which makes
// the product independent of the order shapes are listed in.
inline Image8 render_scene(const std::vector<Shape>& shapes, int w, int h) {
    Image8 img;
    img.w = w;
    img.h = h;
    img.rgb.assign(static_cast<std::size_t>(w) * h * 3, 255);
    std::vector<std::array<double, 3>> trans;
    trans.reserve(shapes.size());
    for (const auto& s : shapes) {
        trans.push_back(shape_transmittance(material_for_kind(s.kind), s.alpha));
    }
    std::vector<double> factors;
    factors.reserve(shapes.size());
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const double px = x + 0.5, py = y + 0.5;
            for (int c = 0; c < 3; ++c) {
                factors.clear();
                for (std::size_t i = 0; i < shapes.size(); ++i) {
                    if (shape_covers(shapes[i], px, py)) factors.push_back(trans[i][c]);
                }
                if (factors.empty()) continue;
                std::sort(factors.begin(), factors.end());
                double t = 1.0;
                for (double f : factors) t *= f;
                img.pixel(x, y)[c] = static_cast<std::uint8_t>(std::lround(255.0 * t));
            }
        }
    }
    return img;
}

struct SceneSpec {
    int width = 128, height = 128;
    int num_shapes = 3;     // 1..10
    int num_classes = 3;    // uses the first num_classes shape kinds
    std::uint64_t seed = 0;
};

struct GeneratedScene {
    Image8 image;
    std::vector<Annotation> annotations;      // image field left to the writer
    std::vector<double> occlusion_fraction;   // per annotation, in [0,1]
    std::vector<Shape> shapes;
};

// Instance-count weights with the heavy-low-count decay seen in real
// security imagery (mean just above 2 instances per image).
inline const std::vector<double>& instance_count_weights() {
    static const std::vector<double> w = {0.352, 0.300, 0.189, 0.090, 0.041,
                                          0.016, 0.007, 0.003, 0.001, 0.0003};
    return w;
}

struct SceneGeometry {
    std::vector<Annotation> annotations;     // tight pixel hulls, clipped to bounds
    std::vector<double> occlusion_fraction;  // parallel to annotations
};

// Boxes are the tight axis-aligned hull of each shape's rendered pixels;
// the occlusion fraction is the share of an instance's pixels covered by
// any later-listed instance. Fully clipped-out shapes get no annotation.
inline SceneGeometry annotate_shapes(const std::vector<Shape>& shapes, int w, int h) {
    const std::size_t npix = static_cast<std::size_t>(w) * h;
    std::vector<std::vector<std::uint8_t>> masks(shapes.size());
    for (std::size_t i = 0; i < shapes.size(); ++i) {
        masks[i].assign(npix, 0);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                if (shape_covers(shapes[i], x + 0.5, y + 0.5))
                    masks[i][static_cast<std::size_t>(y) * w + x] = 1;
    }

    std::vector<std::uint8_t> later(npix, 0);
    std::vector<double> occ(shapes.size(), 0.0);
    for (int i = static_cast<int>(shapes.size()) - 1; i >= 0; --i) {
        std::size_t total = 0, overlapped = 0;
        for (std::size_t p = 0; p < npix; ++p) {
            if (masks[i][p]) {
                ++total;
                if (later[p]) ++overlapped;
            }
        }
        occ[i] = total == 0 ? 0.0 : static_cast<double>(overlapped) / static_cast<double>(total);
        for (std::size_t p = 0; p < npix; ++p) later[p] = later[p] | masks[i][p];
    }

    SceneGeometry out;
    for (std::size_t i = 0; i < shapes.size(); ++i) {
        int x1 = w, y1 = h, x2 = -1, y2 = -1;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                if (masks[i][static_cast<std::size_t>(y) * w + x]) {
                    x1 = std::min(x1, x);
                    y1 = std::min(y1, y);
                    x2 = std::max(x2, x);
                    y2 = std::max(y2, y);
                }
        if (x2 < 0) continue;
        Annotation a;
        a.category = shape_kind_name(shapes[i].kind);
        a.box = {static_cast<double>(x1), static_cast<double>(y1), static_cast<double>(x2 + 1),
                 static_cast<double>(y2 + 1)};
        out.annotations.push_back(std::move(a));
        out.occlusion_fraction.push_back(occ[i]);
    }
    return out;
}

inline GeneratedScene generate_scene(const SceneSpec& spec) {
    detail::require(spec.num_shapes >= 1 && spec.num_shapes <= 10,
                    "scene: shape count must be 1..10");
    detail::require(spec.num_classes >= 1 && spec.num_classes <= 3,
                    "scene: class count must be 1..3");
    Rng rng(spec.seed);
    GeneratedScene out;
    const int w = spec.width, h = spec.height;
    const double mind = std::min(w, h);
    for (int i = 0; i < spec.num_shapes; ++i) {
        Shape s;
        s.kind = static_cast<ShapeKind>(rng.uniform_int(0, spec.num_classes - 1));
        s.cx = rng.uniform(0.12 * w, 0.88 * w);
        s.cy = rng.uniform(0.12 * h, 0.88 * h);
        s.rx = rng.uniform(0.07, 0.16) * mind;
        s.ry = rng.uniform(0.07, 0.16) * mind;
        if (s.kind == ShapeKind::Capsule) {
            // stretch the long axis so the caps are visible
            if (s.rx >= s.ry) s.rx = std::max(s.rx, 1.6 * s.ry);
            else s.ry = std::max(s.ry, 1.6 * s.rx);
        }
        s.alpha = rng.uniform(0.5, 0.8);
        out.shapes.push_back(s);
    }

    out.image = render_scene(out.shapes, w, h);
    SceneGeometry geo = annotate_shapes(out.shapes, w, h);
    out.annotations = std::move(geo.annotations);
    out.occlusion_fraction = std::move(geo.occlusion_fraction);
    return out;
}

// ---------------------------------------------------------------------------
// Dataset writer
// ---------------------------------------------------------------------------

struct ManifestEntry {
    std::string filename;
    std::string split;  // "train" | "test"
    int instances = 0;
    std::vector<double> occlusion;
};

struct Manifest {
    std::vector<ManifestEntry> entries;
    int train_count = 0;
    int test_count = 0;
};

inline std::string scene_filename(int index) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%06d.ppm", index);
    return buf;
}

// n scenes as PPM + per-image annotation files + manifest. Split is 4:1 by
// index (every fifth image is test). Per-scene seeds derive from
// base_seed + index so scenes can be regenerated independently.
inline Manifest write_dataset(int n, const std::string& out_dir, std::uint64_t base_seed,
                              const SceneSpec& proto) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (!fs::is_directory(out_dir)) {
        throw std::runtime_error("write_dataset: cannot create directory " + out_dir);
    }
    Manifest mf;
    std::ofstream mos(out_dir + "/manifest.txt");
    if (!mos) throw std::runtime_error("write_dataset: cannot write manifest in " + out_dir);
    for (int i = 0; i < n; ++i) {
        SceneSpec spec = proto;
        spec.seed = base_seed + static_cast<std::uint64_t>(i);
        Rng count_rng(spec.seed ^ 0x636f756e74ull);
        spec.num_shapes = 1 + static_cast<int>(count_rng.weighted_index(instance_count_weights()));
        GeneratedScene scene = generate_scene(spec);

        const std::string name = scene_filename(i);
        write_ppm(scene.image, out_dir + "/" + name);

        std::string ann_name = name.substr(0, name.size() - 4) + ".txt";
        std::ofstream aos(out_dir + "/" + ann_name);
        for (auto& a : scene.annotations) {
            a.image = name;
            aos << format_annotation_line(a) << "\n";
        }
        aos.close();

        ManifestEntry e;
        e.filename = name;
        e.split = (i % 5 == 4) ? "test" : "train";
        e.instances = static_cast<int>(scene.annotations.size());
        e.occlusion = scene.occlusion_fraction;
        if (e.split == "train") ++mf.train_count;
        else ++mf.test_count;

        mos << e.filename << " " << e.split << " " << e.instances;
        char buf[16];
        for (double o : e.occlusion) {
            std::snprintf(buf, sizeof(buf), " %.4f", o);
            mos << buf;
        }
        mos << "\n";
        mf.entries.push_back(std::move(e));
    }
    if (!mos) throw std::runtime_error("write_dataset: manifest write failed");
    return mf;
}

inline Manifest read_manifest(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open manifest: " + path);
    Manifest mf;
    std::string line;
    while (std::getline(is, line)) {
        const auto toks = detail::split_ws(line);
        if (toks.empty()) continue;
        if (toks.size() < 3) throw std::runtime_error("manifest: malformed line: " + line);
        ManifestEntry e;
        e.filename = toks[0];
        e.split = toks[1];
        e.instances = std::stoi(toks[2]);
        for (std::size_t i = 3; i < toks.size(); ++i) e.occlusion.push_back(std::stod(toks[i]));
        if (e.split == "train") ++mf.train_count;
        else ++mf.test_count;
        mf.entries.push_back(std::move(e));
    }
    return mf;
}

// Detector input convention: attenuation maps (1 - v/255), so material is
// bright on a near-zero background.
template <typename S>
Tensor4<S> image_to_attenuation_tensor(const Image8& img) {
    Tensor4<S> t(1, 3, img.h, img.w);
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) {
            const std::uint8_t* p = img.pixel(x, y);
            for (int c = 0; c < 3; ++c) {
                t.at(0, c, y, x) = S(1) - static_cast<S>(p[c]) / S(255);
            }
        }
    return t;
}

}  // namespace lim
