// VOC-style evaluation toolkit: annotation ingestion, IoU, per-class
// average precision at IoU 0.5 (all-points interpolation), box-size
// classification and dataset statistics reports.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <stdexcept>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace lim {

struct BoundingBox {
    double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

    double area() const { return (x2 - x1) * (y2 - y1); }
    bool valid() const { return x1 < x2 && y1 < y2; }
};

struct Annotation {
    std::string image;
    std::string category;
    BoundingBox box;
};

struct Detection {
    std::string image;
    std::string category;
    double score = 0;
    BoundingBox box;
};

enum class SizeClass { Small, Medium, Large };

inline const char* size_class_name(SizeClass s) {
    switch (s) {
        case SizeClass::Small: return "small";
        case SizeClass::Medium: return "medium";
        case SizeClass::Large: return "large";
    }
    return "?";
}

// ---------------------------------------------------------------------------
// IoU
// ---------------------------------------------------------------------------

inline double iou(const BoundingBox& a, const BoundingBox& b) {
    const double ix = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
    const double iy = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
    const double inter = ix * iy;
    if (inter <= 0.0) return 0.0;
    return inter / (a.area() + b.area() - inter);
}

// ---------------------------------------------------------------------------
// Annotation / detection file parsing
// ---------------------------------------------------------------------------
// Annotation lines: "image_name category x1 y1 x2 y2"
// Detection lines:  "image_name category score x1 y1 x2 y2"

struct ParseDiagnostic {
    int line = 0;
    std::string message;
};

struct ParseResult {
    std::vector<Annotation> annotations;
    std::vector<ParseDiagnostic> errors;
};

struct DetectionParseResult {
    std::vector<Detection> detections;
    std::vector<ParseDiagnostic> errors;
};

namespace detail {

inline bool parse_double(const std::string& tok, double& out) {
    char* end = nullptr;
    out = std::strtod(tok.c_str(), &end);
    return end && *end == '\0' && end != tok.c_str() && std::isfinite(out);
}

inline std::vector<std::string> split_ws(const std::string& line) {
    std::istringstream is(line);
    std::vector<std::string> toks;
    std::string t;
    while (is >> t) toks.push_back(t);
    return toks;
}

}  // namespace detail

// Malformed lines are collected as diagnostics with their line numbers;
// parsing succeeds for the remaining lines. An empty label set accepts any
// category token.
inline ParseResult parse_annotation_lines(std::istream& is,
                                          const std::set<std::string>& labels = {}) {
    ParseResult r;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto toks = detail::split_ws(line);
        if (toks.empty()) continue;
        if (toks.size() != 6) {
            r.errors.push_back({lineno, "expected 6 fields, got " +
                                            std::to_string(toks.size())});
            continue;
        }
        Annotation a;
        a.image = toks[0];
        a.category = toks[1];
        double c[4];
        bool ok = true;
        for (int i = 0; i < 4; ++i) {
            if (!detail::parse_double(toks[2 + i], c[i])) {
                r.errors.push_back({lineno, "unparseable coordinate '" + toks[2 + i] + "'"});
                ok = false;
                break;
            }
        }
        if (!ok) continue;
        a.box = {c[0], c[1], c[2], c[3]};
        if (!a.box.valid()) {
            r.errors.push_back({lineno, "degenerate box (requires x1 < x2 and y1 < y2)"});
            continue;
        }
        if (!labels.empty() && labels.count(a.category) == 0) {
            r.errors.push_back({lineno, "unknown category '" + a.category + "'"});
            continue;
        }
        r.annotations.push_back(std::move(a));
    }
    return r;
}

inline ParseResult parse_annotation_file(const std::string& path,
                                         const std::set<std::string>& labels = {}) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open annotation file: " + path);
    return parse_annotation_lines(is, labels);
}

inline DetectionParseResult parse_detection_lines(std::istream& is) {
    DetectionParseResult r;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto toks = detail::split_ws(line);
        if (toks.empty()) continue;
        if (toks.size() != 7) {
            r.errors.push_back({lineno, "expected 7 fields, got " +
                                            std::to_string(toks.size())});
            continue;
        }
        Detection d;
        d.image = toks[0];
        d.category = toks[1];
        double vals[5];
        bool ok = true;
        for (int i = 0; i < 5; ++i) {
            if (!detail::parse_double(toks[2 + i], vals[i])) {
                r.errors.push_back({lineno, "unparseable number '" + toks[2 + i] + "'"});
                ok = false;
                break;
            }
        }
        if (!ok) continue;
        d.score = vals[0];
        d.box = {vals[1], vals[2], vals[3], vals[4]};
        if (!d.box.valid()) {
            r.errors.push_back({lineno, "degenerate box (requires x1 < x2 and y1 < y2)"});
            continue;
        }
        r.detections.push_back(std::move(d));
    }
    return r;
}

inline DetectionParseResult parse_detection_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open detections file: " + path);
    return parse_detection_lines(is);
}

inline std::string format_annotation_line(const Annotation& a) {
    std::ostringstream os;
    os << a.image << " " << a.category << " " << a.box.x1 << " " << a.box.y1 << " " << a.box.x2
       << " " << a.box.y2;
    return os.str();
}

// ---------------------------------------------------------------------------
// Average precision
// ---------------------------------------------------------------------------

struct ApResult {
    double ap = 0.0;
    bool no_ground_truth = false;  // flagged when detections exist but no GT
    int true_positives = 0;
    int detections = 0;
    int ground_truths = 0;
};

// Single-category AP. Detections are sorted by descending score (ties keep
// insertion order); each one greedily matches the still-unmatched ground
// truth of highest IoU >= iou_thresh within the same image. AP is the area
// under the precision envelope over recall (all-points interpolation).
inline ApResult average_precision(const std::vector<Detection>& dets,
                                  const std::vector<Annotation>& gts, double iou_thresh = 0.5) {
    ApResult r;
    r.detections = static_cast<int>(dets.size());
    r.ground_truths = static_cast<int>(gts.size());
    if (gts.empty()) {
        r.ap = 0.0;
        r.no_ground_truth = !dets.empty();
        return r;
    }

    std::map<std::string, std::vector<int>> gt_by_image;
    for (int i = 0; i < static_cast<int>(gts.size()); ++i) gt_by_image[gts[i].image].push_back(i);

    std::vector<int> order(dets.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return dets[a].score > dets[b].score; });

    std::vector<char> gt_used(gts.size(), 0);
    std::vector<double> precision, recall;
    int tp = 0, fp = 0;
    for (int di : order) {
        const Detection& d = dets[di];
        int best_gt = -1;
        double best_iou = 0.0;
        auto it = gt_by_image.find(d.image);
        if (it != gt_by_image.end()) {
            for (int gi : it->second) {
                if (gt_used[gi]) continue;
                const double v = iou(d.box, gts[gi].box);
                if (v >= iou_thresh && v > best_iou) {
                    best_iou = v;
                    best_gt = gi;
                }
            }
        }
        if (best_gt >= 0) {
            gt_used[best_gt] = 1;
            ++tp;
        } else {
            ++fp;
        }
        precision.push_back(static_cast<double>(tp) / (tp + fp));
        recall.push_back(static_cast<double>(tp) / static_cast<double>(gts.size()));
    }
    r.true_positives = tp;

    // precision envelope integrated over recall
    double ap = 0.0, env = 0.0, next_recall = 0.0;
    for (int i = static_cast<int>(precision.size()) - 1; i >= 0; --i) {
        env = std::max(env, precision[i]);
        const double prev_recall = i == 0 ? 0.0 : recall[i - 1];
        if (i == static_cast<int>(precision.size()) - 1) next_recall = recall[i];
        ap += env * (next_recall - prev_recall);
        next_recall = prev_recall;
    }
    r.ap = ap;
    return r;
}

inline double mean_ap(const std::vector<double>& per_category_ap) {
    if (per_category_ap.empty()) {
        throw std::invalid_argument("mean_ap: needs at least one category");
    }
    double s = 0.0;
    for (double v : per_category_ap) s += v;
    return s / static_cast<double>(per_category_ap.size());
}

// ---------------------------------------------------------------------------
// Size classification
// ---------------------------------------------------------------------------

// Small iff area ratio < 0.1%, Large iff > 0.2%, Medium otherwise; both
// boundaries are strict, so exact threshold ratios classify as Medium.
inline SizeClass classify_size(const BoundingBox& box, int image_w, int image_h) {
    const double ratio = box.area() / (static_cast<double>(image_w) * image_h);
    if (ratio < 0.001) return SizeClass::Small;
    if (ratio > 0.002) return SizeClass::Large;
    return SizeClass::Medium;
}

// ---------------------------------------------------------------------------
// Dataset statistics
// ---------------------------------------------------------------------------

struct ImageDims {
    int w = 0, h = 0;
};

struct StatsReport {
    std::map<std::string, int> per_category;
    std::map<int, int> instances_per_image_histogram;
    double mean_instances_per_image = 0.0;
    bool mean_defined = false;
    int image_count = 0;
    int instance_count = 0;
    // size-class counts per category; present when image dims were known
    std::map<std::string, std::array<int, 3>> size_by_category;
    int images_without_dims = 0;

    std::string to_table() const;
    std::string to_kv() const;
};

inline StatsReport dataset_stats(const std::vector<Annotation>& anns,
                                 const std::map<std::string, ImageDims>& dims = {}) {
    StatsReport r;
    std::map<std::string, int> per_image;
    for (const auto& a : anns) {
        r.per_category[a.category] += 1;
        per_image[a.image] += 1;
        auto it = dims.find(a.image);
        if (it != dims.end()) {
            const SizeClass sc = classify_size(a.box, it->second.w, it->second.h);
            auto& arr = r.size_by_category[a.category];
            arr[static_cast<int>(sc)] += 1;
        } else {
            r.images_without_dims += 1;
        }
    }
    for (const auto& [img, count] : per_image) {
        (void)img;
        r.instances_per_image_histogram[count] += 1;
    }
    r.image_count = static_cast<int>(per_image.size());
    r.instance_count = static_cast<int>(anns.size());
    if (r.image_count > 0) {
        r.mean_instances_per_image =
            static_cast<double>(r.instance_count) / static_cast<double>(r.image_count);
        r.mean_defined = true;
    }
    return r;
}

inline std::string StatsReport::to_table() const {
    std::ostringstream os;
    os << "category            instances     small    medium     large\n";
    for (const auto& [cat, count] : per_category) {
        os << std::left << std::setw(20) << cat << std::right << std::setw(9) << count;
        auto it = size_by_category.find(cat);
        if (it != size_by_category.end()) {
            os << std::setw(10) << it->second[0] << std::setw(10) << it->second[1]
               << std::setw(10) << it->second[2];
        }
        os << "\n";
    }
    os << "\nimages: " << image_count << "   instances: " << instance_count;
    if (mean_defined) {
        os << "   mean instances/image: " << std::fixed << std::setprecision(2)
           << mean_instances_per_image;
    } else {
        os << "   mean instances/image: undefined (no images)";
    }
    os << "\ninstances-per-image histogram:\n";
    for (const auto& [k, v] : instances_per_image_histogram) {
        os << "  " << std::setw(3) << k << " -> " << v << "\n";
    }
    return os.str();
}

inline std::string StatsReport::to_kv() const {
    std::ostringstream os;
    os << "images = " << image_count << "\n";
    os << "instances = " << instance_count << "\n";
    if (mean_defined) {
        os << "mean_instances_per_image = " << mean_instances_per_image << "\n";
    } else {
        os << "mean_instances_per_image = undefined\n";
    }
    for (const auto& [cat, count] : per_category) os << "count." << cat << " = " << count << "\n";
    for (const auto& [k, v] : instances_per_image_histogram)
        os << "histogram." << k << " = " << v << "\n";
    for (const auto& [cat, arr] : size_by_category) {
        os << "size." << cat << ".small = " << arr[0] << "\n";
        os << "size." << cat << ".medium = " << arr[1] << "\n";
        os << "size." << cat << ".large = " << arr[2] << "\n";
    }
    return os.str();
}

}  // namespace lim
