// End-to-end lateral inhibition module: dense top-down pass, four-direction
// boundary activation, dense bottom-up pass, residual combine. Ablation
// switches select how much of the pipeline runs.
#pragma once

#include "lim/boundary_activation.hpp"
#include "lim/pyramid.hpp"

namespace lim {

enum class BaMode { Concat, MaxFuse };
enum class Ablation { SpOnly, BpOnly, Full };

inline const char* ablation_name(Ablation a) {
    switch (a) {
        case Ablation::SpOnly: return "sp";
        case Ablation::BpOnly: return "bp";
        case Ablation::Full: return "full";
    }
    return "?";
}

struct LimConfig {
    int levels = 3;
    int width = 32;                      // pyramid width d
    BaMode ba_mode = BaMode::Concat;     // Concat is the default pipeline
    Ablation ablation = Ablation::Full;  // SpOnly / BpOnly map to the ablation rows
};

inline void validate_lim_config(const LimConfig& cfg) {
    detail::require(cfg.levels >= 1, "lim config: levels must be >= 1");
    detail::require(cfg.width >= 1, "lim config: width must be >= 1");
}

// Input channel count of the bottom-up 1x1 projection for a given config:
// 4d after concat aggregation, d otherwise (max-fuse, or no BA stage).
inline int bottom_up_in_channels(const LimConfig& cfg) {
    return (cfg.ablation == Ablation::Full && cfg.ba_mode == BaMode::Concat) ? 4 * cfg.width
                                                                             : cfg.width;
}

template <typename S>
LimParams<S> make_lim_params(const LimConfig& cfg, const std::vector<int>& backbone_channels,
                             std::uint64_t seed) {
    detail::require(static_cast<int>(backbone_channels.size()) == cfg.levels,
                    "lim params: backbone channel list must have one entry per level");
    LimParams<S> p =
        make_lim_params<S>(backbone_channels, cfg.width, bottom_up_in_channels(cfg), seed);
    // The projection feeding the residual combine starts at zero, so the
    // module initially passes backbone features through unchanged and the
    // inhibition pathway only grows in through training.
    auto zero_out = [](std::vector<ConvWeights<S>>& ws) {
        for (auto& w : ws) w.kernel.fill(S(0));
    };
    if (cfg.ablation == Ablation::SpOnly) {
        zero_out(p.lateral);
    } else {
        zero_out(p.bottom_up);
    }
    return p;
}

template <typename S>
PyramidIds lim_forward(Graph<S>& g, const PyramidIds& backbone, const LimParamIds& p,
                       const LimConfig& cfg) {
    validate_lim_config(cfg);
    detail::require(backbone.level_count() == cfg.levels,
                    "lim_forward: pyramid has " + std::to_string(backbone.level_count()) +
                        " levels, config expects " + std::to_string(cfg.levels));
    // dims must support the full downsample chain of the bottom-up pass
    const auto& base = g.value(backbone.levels[0]);
    const int div = 1 << (cfg.levels - 1);
    detail::require(base.h % div == 0 && base.w % div == 0,
                    "lim_forward: base level " + base.shape_str() +
                        " not divisible by 2^(L-1)");

    PyramidIds a = top_down_dense(g, backbone, p);
    if (cfg.ablation == Ablation::SpOnly) {
        return residual_combine(g, a, backbone, p);
    }
    PyramidIds b;
    if (cfg.ablation == Ablation::BpOnly) {
        b = a;  // bottom-up consumes A directly through a d->d projection
    } else if (cfg.ba_mode == BaMode::Concat) {
        for (int id : a.levels) b.levels.push_back(g_ba_aggregate(g, id));
    } else {
        for (int id : a.levels) {
            std::vector<int> scans;
            for (ScanDirection d : kAllScanDirections)
                scans.push_back(g_directional_max_scan(g, id, d));
            b.levels.push_back(g_elementwise_max(g, scans));
        }
    }
    PyramidIds ct = bottom_up_dense(g, b, p);
    return residual_combine(g, ct, backbone, p);
}

template <typename S>
FeaturePyramid<S> lim_forward(const FeaturePyramid<S>& backbone, const LimParams<S>& p,
                              const LimConfig& cfg) {
    Graph<S> g;
    auto out = lim_forward(g, stage_pyramid(g, backbone, false), stage_lim_params(g, p, false),
                           cfg);
    return read_pyramid(g, out);
}

}  // namespace lim
