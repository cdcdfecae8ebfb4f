// Command-line entry point: verification, benchmarking, data generation,
// training and evaluation workflows.
//
// Exit codes: 0 success, 1 verification failure, 2 usage/config error.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <set>

#include <CLI11.hpp>

#include "lim/config.hpp"
#include "lim/detector.hpp"
#include "lim/gradcheck_suite.hpp"

namespace fs = std::filesystem;
using namespace lim;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitVerificationFailure = 1;
constexpr int kExitUsageError = 2;

// --- gradcheck ---------------------------------------------------------------

int cmd_gradcheck(std::uint64_t seed, int instances, const std::string& only, bool inject_fault) {
    auto cases = standard_gradcheck_cases();
    if (inject_fault) cases.push_back(broken_backward_case());
    if (!only.empty()) {
        std::vector<GradCheckCase> filtered;
        for (auto& c : cases) {
            if (c.name == only) filtered.push_back(std::move(c));
        }
        if (filtered.empty()) {
            std::cerr << "no gradcheck case named '" << only << "'\n";
            return kExitUsageError;
        }
        cases = std::move(filtered);
    }
    const double tolerance = 1e-4;
    bool all_pass = true;
    for (const auto& c : cases) {
        const double err = c.run(seed, instances);
        const bool pass = err < tolerance;
        all_pass = all_pass && pass;
        std::cout << c.name << ": " << (pass ? "PASS" : "FAIL") << " (max rel err "
                  << std::scientific << std::setprecision(2) << err << ", tolerance 1e-4, "
                  << instances << " instances)\n"
                  << std::defaultfloat;
        if (!pass) std::cerr << "gradient check failed for op: " << c.name << "\n";
    }
    return all_pass ? kExitOk : kExitVerificationFailure;
}

// --- scan benchmark ----------------------------------------------------------

int cmd_scan_bench(int channels, int height, int width, int repeats, std::uint64_t seed) {
    auto rep = run_scan_bench<float>(channels, height, width, repeats, seed);
    if (!rep.outputs_equal) {
        std::cerr << "scan-bench: bit-equality gate FAILED, benchmark aborted\n";
        return kExitVerificationFailure;
    }
    std::cout << "map: " << channels << " x " << height << " x " << width << ", " << repeats
              << " repeats\n"
              << rep.to_string() << "\n";
    return kExitOk;
}

// --- data generation ---------------------------------------------------------

int cmd_gen_data(int n, const std::string& out, std::uint64_t seed, int resolution, int classes) {
    SceneSpec proto;
    proto.width = resolution;
    proto.height = resolution;
    proto.num_classes = classes;
    auto mf = write_dataset(n, out, seed, proto);
    std::cout << "wrote " << n << " images to " << out << " (" << mf.train_count << " train / "
              << mf.test_count << " test)\n";
    return kExitOk;
}

// --- train/eval --------------------------------------------------------------

int cmd_train_eval(const std::string& data_dir, bool generate, int gen_n,
                   const std::string& out_dir, const std::string& variants_csv,
                   const DetectorConfig& base_cfg, TrainConfig tc) {
    fs::create_directories(out_dir);
    std::string dir = data_dir;
    if (generate) {
        dir = out_dir + "/data";
        SceneSpec proto;
        proto.width = base_cfg.resolution;
        proto.height = base_cfg.resolution;
        proto.num_classes = base_cfg.classes();
        write_dataset(gen_n, dir, tc.seed, proto);
    }
    if (dir.empty()) {
        std::cerr << "train-eval: provide --data or --generate\n";
        return kExitUsageError;
    }
    auto ds = load_dataset<float>(dir);
    std::cout << "dataset: " << ds.train.size() << " train / " << ds.test.size() << " test from "
              << dir << "\n";

    std::vector<std::string> variants;
    {
        std::stringstream ss(variants_csv);
        std::string item;
        while (std::getline(ss, item, ',')) {
            if (!item.empty()) variants.push_back(item);
        }
    }
    if (variants.empty()) {
        std::cerr << "train-eval: no variants requested\n";
        return kExitUsageError;
    }

    struct Row {
        std::string variant;
        bool failed = false;
        double map = 0, initial_loss = 0, final_loss = 0;
        double minutes = 0;
    };
    std::vector<Row> rows;
    for (const auto& vname : variants) {
        DetectorConfig cfg = base_cfg;
        cfg.variant = variant_from_name(vname);
        Row row;
        row.variant = vname;
        auto m = make_detector_model<float>(cfg, tc.seed);
        const auto t0 = std::chrono::steady_clock::now();
        try {
            auto r = train(m, ds, tc);
            row.map = r.final_map;
            row.initial_loss = r.initial_loss;
            row.final_loss = r.final_loss;

            std::ofstream lt(out_dir + "/" + vname + "_loss.txt");
            for (std::size_t i = 0; i < r.loss_trace.size(); ++i) {
                lt << i << " " << std::setprecision(17) << r.loss_trace[i] << "\n";
            }
            KvConfig metrics;
            metrics.values["variant"] = vname;
            metrics.values["map"] = std::to_string(r.final_map);
            metrics.values["initial_loss"] = std::to_string(r.initial_loss);
            metrics.values["final_loss"] = std::to_string(r.final_loss);
            metrics.values["steps"] = std::to_string(tc.steps);
            metrics.values["seed"] = std::to_string(tc.seed);
            for (const auto& [step, v] : r.map_trace) {
                metrics.values["map_at_" + std::to_string(step)] = std::to_string(v);
            }
            write_kv_file(metrics, out_dir + "/" + vname + "_metrics.txt");
            save_checkpoint(m, out_dir + "/" + vname + ".ckpt");
        } catch (const std::exception& e) {
            std::cerr << "variant " << vname << " FAILED: " << e.what() << "\n";
            row.failed = true;
        }
        row.minutes =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / 60.0;
        rows.push_back(row);
    }

    std::ostringstream table;
    table << std::left << std::setw(10) << "variant" << std::right << std::setw(10) << "mAP@0.5"
          << std::setw(14) << "initial_loss" << std::setw(12) << "final_loss" << std::setw(10)
          << "minutes" << "\n";
    for (const auto& r : rows) {
        table << std::left << std::setw(10) << r.variant;
        if (r.failed) {
            table << std::right << std::setw(10) << "FAILED" << "\n";
            continue;
        }
        table << std::right << std::fixed << std::setprecision(4) << std::setw(10) << r.map
              << std::setprecision(2) << std::setw(14) << r.initial_loss << std::setw(12)
              << r.final_loss << std::setw(10) << r.minutes << "\n";
    }
    std::cout << table.str();
    std::ofstream tf(out_dir + "/comparison.txt");
    tf << table.str();
    return kExitOk;
}

// --- stats / split -----------------------------------------------------------

std::map<std::string, ImageDims> collect_dims(const std::vector<Annotation>& anns,
                                              const std::string& images_dir,
                                              const std::string& dims_str) {
    std::map<std::string, ImageDims> dims;
    if (!dims_str.empty()) {
        const auto x = dims_str.find('x');
        if (x == std::string::npos) {
            throw std::invalid_argument("--dims expects WxH, e.g. 128x128");
        }
        ImageDims d{std::stoi(dims_str.substr(0, x)), std::stoi(dims_str.substr(x + 1))};
        for (const auto& a : anns) dims[a.image] = d;
    } else if (!images_dir.empty()) {
        for (const auto& a : anns) {
            if (dims.count(a.image)) continue;
            const auto [w, h] = read_ppm_dims(images_dir + "/" + a.image);
            dims[a.image] = ImageDims{w, h};
        }
    }
    return dims;
}

int cmd_stats(const std::string& ann_path, const std::string& images_dir,
              const std::string& dims_str, const std::string& out_path) {
    auto parsed = parse_annotation_file(ann_path);
    for (const auto& e : parsed.errors) {
        std::cerr << ann_path << ":" << e.line << ": " << e.message << "\n";
    }
    auto dims = collect_dims(parsed.annotations, images_dir, dims_str);
    auto report = dataset_stats(parsed.annotations, dims);
    std::cout << report.to_table() << "\n";
    if (!out_path.empty()) {
        std::ofstream os(out_path);
        os << report.to_kv();
    } else {
        std::cout << report.to_kv();
    }
    return kExitOk;
}

int cmd_split(const std::string& ann_path, const std::string& images_dir,
              const std::string& dims_str, const std::string& out_prefix) {
    auto parsed = parse_annotation_file(ann_path);
    for (const auto& e : parsed.errors) {
        std::cerr << ann_path << ":" << e.line << ": " << e.message << "\n";
    }
    auto dims = collect_dims(parsed.annotations, images_dir, dims_str);
    std::ofstream small(out_prefix + "_small.txt"), medium(out_prefix + "_medium.txt"),
        large(out_prefix + "_large.txt");
    int counts[3] = {0, 0, 0};
    for (const auto& a : parsed.annotations) {
        auto it = dims.find(a.image);
        if (it == dims.end()) {
            std::cerr << "split: no image dims for " << a.image << " (use --dims or --images-dir)\n";
            return kExitUsageError;
        }
        const SizeClass sc = classify_size(a.box, it->second.w, it->second.h);
        auto& os = sc == SizeClass::Small ? small : sc == SizeClass::Medium ? medium : large;
        os << format_annotation_line(a) << "\n";
        counts[static_cast<int>(sc)] += 1;
    }
    std::cout << "small " << counts[0] << "\nmedium " << counts[1] << "\nlarge " << counts[2]
              << "\n";
    return kExitOk;
}

// --- external detections evaluation -------------------------------------------

int cmd_eval(const std::string& det_path, const std::string& ann_path, double iou_thresh) {
    auto anns = parse_annotation_file(ann_path);
    for (const auto& e : anns.errors) {
        std::cerr << ann_path << ":" << e.line << ": " << e.message << "\n";
    }
    auto dets = parse_detection_file(det_path);
    for (const auto& e : dets.errors) {
        std::cerr << det_path << ":" << e.line << ": " << e.message << "\n";
    }
    std::set<std::string> categories;
    for (const auto& a : anns.annotations) categories.insert(a.category);
    for (const auto& d : dets.detections) categories.insert(d.category);
    if (categories.empty()) {
        std::cerr << "eval: no categories found\n";
        return kExitUsageError;
    }
    std::vector<double> aps;
    for (const auto& cat : categories) {
        std::vector<Detection> cd;
        std::vector<Annotation> cg;
        for (const auto& d : dets.detections)
            if (d.category == cat) cd.push_back(d);
        for (const auto& a : anns.annotations)
            if (a.category == cat) cg.push_back(a);
        auto r = average_precision(cd, cg, iou_thresh);
        aps.push_back(r.ap);
        std::cout << "AP[" << cat << "] = " << std::fixed << std::setprecision(4) << r.ap
                  << " (tp " << r.true_positives << ", det " << r.detections << ", gt "
                  << r.ground_truths << (r.no_ground_truth ? ", no-ground-truth" : "") << ")\n";
    }
    std::cout << "mAP@" << std::setprecision(2) << iou_thresh << " = " << std::setprecision(4)
              << mean_ap(aps) << "\n";
    return kExitOk;
}

// --- config file merging -------------------------------------------------------

// flat key = value file; command-line flags override file values
void merge_config_file(const std::string& path, DetectorConfig& dc, TrainConfig& tc) {
    static const std::set<std::string> valid = {
        "resolution", "levels", "width",      "classes",      "variant", "ba_mode",
        "lr",         "momentum", "weight_decay", "batch_size", "steps",   "seed",
        "eval_every", "score_thresh"};
    KvConfig kv = parse_kv_file(path);
    kv.require_known_keys(valid);
    dc.resolution = kv.get_int("resolution", dc.resolution);
    dc.levels = kv.get_int("levels", dc.levels);
    dc.width = kv.get_int("width", dc.width);
    if (kv.has("classes")) {
        dc.class_names.clear();
        std::stringstream ss(kv.get("classes", ""));
        std::string item;
        while (std::getline(ss, item, ',')) dc.class_names.push_back(item);
    }
    if (kv.has("variant")) dc.variant = variant_from_name(kv.get("variant", "full"));
    if (kv.has("ba_mode")) {
        dc.ba_mode = kv.get("ba_mode", "concat") == "max-fuse" ? BaMode::MaxFuse : BaMode::Concat;
    }
    tc.lr = kv.get_double("lr", tc.lr);
    tc.momentum = kv.get_double("momentum", tc.momentum);
    tc.weight_decay = kv.get_double("weight_decay", tc.weight_decay);
    tc.batch_size = kv.get_int("batch_size", tc.batch_size);
    tc.steps = kv.get_int("steps", tc.steps);
    tc.seed = static_cast<std::uint64_t>(kv.get_int("seed", static_cast<int>(tc.seed)));
    tc.eval_every = kv.get_int("eval_every", tc.eval_every);
    tc.score_thresh = kv.get_double("score_thresh", tc.score_thresh);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"lateral-inhibition feature pyramid toolkit"};
    app.require_subcommand(1);

    // gradcheck
    auto* gc = app.add_subcommand("gradcheck", "verify every backward rule by finite differences");
    std::uint64_t gc_seed = 12345;
    int gc_instances = 20;
    std::string gc_only;
    bool gc_fault = false;
    gc->add_option("--seed", gc_seed, "rng seed");
    gc->add_option("--instances", gc_instances, "random instances per op");
    gc->add_option("--only", gc_only, "run a single named case");
    gc->add_flag("--inject-fault", gc_fault, "add a deliberately broken op (negative control)");

    // scan-bench
    auto* sb = app.add_subcommand("scan-bench",
                                  "compare column-loop vs rotated row-wise vertical scans");
    int sb_c = 64, sb_h = 256, sb_w = 256, sb_r = 5;
    std::uint64_t sb_seed = 1;
    sb->add_option("--channels", sb_c, "channel count");
    sb->add_option("--height", sb_h, "map height");
    sb->add_option("--width", sb_w, "map width");
    sb->add_option("--repeats", sb_r, "timing repeats");
    sb->add_option("--seed", sb_seed, "rng seed");

    // gen-data
    auto* gd = app.add_subcommand("gen-data", "generate a synthetic pseudo-X-ray dataset");
    int gd_n = 100, gd_res = 64, gd_classes = 3;
    std::uint64_t gd_seed = 1;
    std::string gd_out = "data";
    gd->add_option("--n", gd_n, "image count");
    gd->add_option("--out", gd_out, "output directory")->required();
    gd->add_option("--seed", gd_seed, "base seed");
    gd->add_option("--resolution", gd_res, "square image size");
    gd->add_option("--classes", gd_classes, "class count (1..3)");

    // train-eval
    auto* te = app.add_subcommand("train-eval", "train detector variants and compare mAP");
    std::string te_data, te_out = "runs", te_variants = "baseline,full", te_config;
    bool te_generate = false;
    int te_gen_n = 625;
    DetectorConfig te_dc;
    te_dc.resolution = 64;
    te_dc.levels = 3;
    te_dc.width = 16;
    TrainConfig te_tc;
    te->add_option("--data", te_data, "dataset directory (with manifest.txt)");
    te->add_flag("--generate", te_generate, "generate the dataset first");
    te->add_option("--gen-n", te_gen_n, "images to generate with --generate");
    te->add_option("--out", te_out, "output directory");
    te->add_option("--variants", te_variants, "comma list: baseline,sp,bp,full");
    te->add_option("--config", te_config, "flat key = value config file");
    te->add_option("--steps", te_tc.steps, "sgd steps");
    te->add_option("--seed", te_tc.seed, "training + data seed");
    te->add_option("--resolution", te_dc.resolution, "input resolution");
    te->add_option("--levels", te_dc.levels, "pyramid level count");
    te->add_option("--width", te_dc.width, "pyramid width d");
    te->add_option("--eval-every", te_tc.eval_every, "periodic mAP interval (0 = off)");

    // stats
    auto* st = app.add_subcommand("stats", "dataset statistics report");
    std::string st_ann, st_imgdir, st_dims, st_out;
    st->add_option("--annotations", st_ann, "annotation file")->required();
    st->add_option("--images-dir", st_imgdir, "directory with PPM images (for dims)");
    st->add_option("--dims", st_dims, "uniform image dims WxH");
    st->add_option("--out", st_out, "write machine-readable key = value report here");

    // split
    auto* sp = app.add_subcommand("split", "split annotations into small/medium/large files");
    std::string sp_ann, sp_imgdir, sp_dims, sp_prefix = "split";
    sp->add_option("--annotations", sp_ann, "annotation file")->required();
    sp->add_option("--images-dir", sp_imgdir, "directory with PPM images (for dims)");
    sp->add_option("--dims", sp_dims, "uniform image dims WxH");
    sp->add_option("--out-prefix", sp_prefix, "output file prefix");

    // eval
    auto* ev = app.add_subcommand("eval", "score a detections file against annotations");
    std::string ev_det, ev_ann;
    double ev_iou = 0.5;
    ev->add_option("--detections", ev_det, "detections file")->required();
    ev->add_option("--annotations", ev_ann, "annotation file")->required();
    ev->add_option("--iou", ev_iou, "IoU threshold");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        app.exit(e);  // prints the message/help
        return e.get_exit_code() == 0 ? kExitOk : kExitUsageError;
    }

    try {
        if (gc->parsed()) return cmd_gradcheck(gc_seed, gc_instances, gc_only, gc_fault);
        if (sb->parsed()) return cmd_scan_bench(sb_c, sb_h, sb_w, sb_r, sb_seed);
        if (gd->parsed()) return cmd_gen_data(gd_n, gd_out, gd_seed, gd_res, gd_classes);
        if (te->parsed()) {
            if (!te_config.empty()) {
                // file values fill in anything not set by an explicit flag
                const DetectorConfig dc_flags = te_dc;
                const TrainConfig tc_flags = te_tc;
                merge_config_file(te_config, te_dc, te_tc);
                if (te->count("--steps")) te_tc.steps = tc_flags.steps;
                if (te->count("--seed")) te_tc.seed = tc_flags.seed;
                if (te->count("--eval-every")) te_tc.eval_every = tc_flags.eval_every;
                if (te->count("--resolution")) te_dc.resolution = dc_flags.resolution;
                if (te->count("--levels")) te_dc.levels = dc_flags.levels;
                if (te->count("--width")) te_dc.width = dc_flags.width;
            }
            return cmd_train_eval(te_data, te_generate, te_gen_n, te_out, te_variants, te_dc,
                                  te_tc);
        }
        if (st->parsed()) return cmd_stats(st_ann, st_imgdir, st_dims, st_out);
        if (sp->parsed()) return cmd_split(sp_ann, sp_imgdir, sp_dims, sp_prefix);
        if (ev->parsed()) return cmd_eval(ev_det, ev_ann, ev_iou);
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitUsageError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitVerificationFailure;
    }
    return kExitUsageError;
}
