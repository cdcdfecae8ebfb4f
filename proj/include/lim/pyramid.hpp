// Dense bidirectional feature-pyramid propagation.
//
// Top-down:  A[l] = V_l(F[l]) + sum_{m=1..L-l} upsample^m(A[l+m])
// Bottom-up: Ct[l] = V_l(B[l]) + sum_{m=1..l-1} downsample^m(Ct[l-m])
// Residual:  C[l] = Ct[l] + F[l]   (projected when channel counts differ)
//
// The sums are literal and dense: every level receives a direct
// contribution from every preceding level of its pathway, and because each
// A[l+m] is itself a sum, nearer levels are weighted more. Levels are
// stored largest first (index 0 = finest resolution).
#pragma once

#include <optional>
#include <vector>

#include "lim/nn_ops.hpp"

namespace lim {

template <typename S>
struct FeaturePyramid {
    std::vector<Tensor4<S>> levels;  // index 0 = largest spatial extent
    int level_count() const { return static_cast<int>(levels.size()); }
};

template <typename S>
void validate_pyramid(const FeaturePyramid<S>& p) {
    const int L = p.level_count();
    detail::require(L >= 1, "pyramid: needs at least one level");
    const auto& base = p.levels[0];
    const int div = 1 << (L - 1);
    detail::require(base.h % div == 0 && base.w % div == 0,
                    "pyramid: base dims " + base.shape_str() + " not divisible by 2^(L-1)");
    for (int l = 1; l < L; ++l) {
        const auto& cur = p.levels[l];
        const auto& prev = p.levels[l - 1];
        detail::require(cur.n == base.n, "pyramid: batch extent differs across levels");
        detail::require(cur.h * 2 == prev.h && cur.w * 2 == prev.w,
                        "pyramid: level " + std::to_string(l + 1) + " dims " + cur.shape_str() +
                            " are not half of " + prev.shape_str());
    }
}

// All learnable weights of the propagation pathways, keyed by level.
template <typename S>
struct LimParams {
    std::vector<ConvWeights<S>> lateral;    // top-down 1x1: backbone channels -> d
    std::vector<ConvWeights<S>> bottom_up;  // bottom-up 1x1: (4d | d) -> d
    std::vector<std::optional<ConvWeights<S>>> out_proj;  // residual 1x1 when channels != d
    int level_count() const { return static_cast<int>(lateral.size()); }
};

template <typename S>
LimParams<S> make_lim_params(const std::vector<int>& backbone_channels, int d,
                             int bottom_up_in_channels, std::uint64_t seed) {
    LimParams<S> p;
    const int L = static_cast<int>(backbone_channels.size());
    // the dense pathways sum up to L contributions per level, so projection
    // inits are scaled by 1/L to keep output magnitudes level-independent
    const S scale = S(1) / static_cast<S>(L);
    const auto scaled = [&](ConvWeights<S> w) {
        for (auto& v : w.kernel.data) v *= scale;
        return w;
    };
    for (int l = 0; l < L; ++l) {
        p.lateral.push_back(
            scaled(make_conv_weights<S>(d, backbone_channels[l], 1, seed + 101 * l + 1)));
        p.bottom_up.push_back(
            scaled(make_conv_weights<S>(d, bottom_up_in_channels, 1, seed + 101 * l + 2)));
        if (backbone_channels[l] != d) {
            p.out_proj.push_back(make_conv_weights<S>(d, backbone_channels[l], 1,
                                                      seed + 101 * l + 3));
        } else {
            p.out_proj.push_back(std::nullopt);
        }
    }
    return p;
}

// --- tape-level pyramid handles ---------------------------------------------

struct ConvWeightIds {
    int kernel = -1;
    int bias = -1;
};

struct PyramidIds {
    std::vector<int> levels;
    int level_count() const { return static_cast<int>(levels.size()); }
};

struct LimParamIds {
    std::vector<ConvWeightIds> lateral;
    std::vector<ConvWeightIds> bottom_up;
    std::vector<std::optional<ConvWeightIds>> out_proj;
};

template <typename S>
ConvWeightIds stage_conv_weights(Graph<S>& g, const ConvWeights<S>& w, bool needs_grad = true) {
    return ConvWeightIds{g.leaf(w.kernel, needs_grad), g.leaf(w.bias, needs_grad)};
}

template <typename S>
LimParamIds stage_lim_params(Graph<S>& g, const LimParams<S>& p, bool needs_grad = true) {
    LimParamIds ids;
    for (const auto& w : p.lateral) ids.lateral.push_back(stage_conv_weights(g, w, needs_grad));
    for (const auto& w : p.bottom_up)
        ids.bottom_up.push_back(stage_conv_weights(g, w, needs_grad));
    for (const auto& w : p.out_proj) {
        if (w) {
            ids.out_proj.push_back(stage_conv_weights(g, *w, needs_grad));
        } else {
            ids.out_proj.push_back(std::nullopt);
        }
    }
    return ids;
}

template <typename S>
PyramidIds stage_pyramid(Graph<S>& g, const FeaturePyramid<S>& p, bool needs_grad = true) {
    validate_pyramid(p);
    PyramidIds ids;
    for (const auto& t : p.levels) ids.levels.push_back(g.leaf(t, needs_grad));
    return ids;
}

template <typename S>
FeaturePyramid<S> read_pyramid(const Graph<S>& g, const PyramidIds& ids) {
    FeaturePyramid<S> p;
    for (int id : ids.levels) p.levels.push_back(g.value(id));
    return p;
}

// --- pathways ----------------------------------------------------------------

// Dense top-down pathway, computed coarsest level first.
template <typename S>
PyramidIds top_down_dense(Graph<S>& g, const PyramidIds& backbone, const LimParamIds& p) {
    const int L = backbone.level_count();
    detail::require(static_cast<int>(p.lateral.size()) == L,
                    "top_down_dense: lateral projection count != level count");
    PyramidIds out;
    out.levels.assign(L, -1);
    for (int l = L - 1; l >= 0; --l) {
        int acc = g_conv2d(g, backbone.levels[l], p.lateral[l].kernel, p.lateral[l].bias);
        for (int m = 1; m <= L - 1 - l; ++m) {
            acc = g_add(g, acc, g_upsample_nearest(g, out.levels[l + m], m));
        }
        out.levels[l] = acc;
    }
    return out;
}

// Dense bottom-up pathway, computed finest level first.
template <typename S>
PyramidIds bottom_up_dense(Graph<S>& g, const PyramidIds& b, const LimParamIds& p) {
    const int L = b.level_count();
    detail::require(static_cast<int>(p.bottom_up.size()) == L,
                    "bottom_up_dense: projection count != level count");
    PyramidIds out;
    out.levels.assign(L, -1);
    for (int l = 0; l < L; ++l) {
        int acc = g_conv2d(g, b.levels[l], p.bottom_up[l].kernel, p.bottom_up[l].bias);
        for (int m = 1; m <= l; ++m) {
            acc = g_add(g, acc, g_downsample_max(g, out.levels[l - m], m));
        }
        out.levels[l] = acc;
    }
    return out;
}

// Residual combination with the backbone maps.
template <typename S>
PyramidIds residual_combine(Graph<S>& g, const PyramidIds& ct, const PyramidIds& backbone,
                            const LimParamIds& p) {
    const int L = ct.level_count();
    detail::require(backbone.level_count() == L, "residual_combine: level count mismatch");
    PyramidIds out;
    for (int l = 0; l < L; ++l) {
        const auto& cv = g.value(ct.levels[l]);
        const auto& fv = g.value(backbone.levels[l]);
        if (cv.h != fv.h || cv.w != fv.w || cv.n != fv.n) {
            throw std::invalid_argument("residual_combine: spatial mismatch " + cv.shape_str() +
                                        " vs " + fv.shape_str() + " at level " +
                                        std::to_string(l + 1));
        }
        int f = backbone.levels[l];
        if (cv.c != fv.c) {
            detail::require(l < static_cast<int>(p.out_proj.size()) && p.out_proj[l].has_value(),
                            "residual_combine: channel mismatch at level " + std::to_string(l + 1) +
                                " and no output projection configured");
            f = g_conv2d(g, f, p.out_proj[l]->kernel, p.out_proj[l]->bias);
        }
        out.levels.push_back(g_add(g, ct.levels[l], f));
    }
    return out;
}

// --- value-level convenience wrappers (scratch tape, forward only) -----------

template <typename S>
FeaturePyramid<S> top_down_dense(const FeaturePyramid<S>& backbone, const LimParams<S>& p) {
    Graph<S> g;
    auto ids = top_down_dense(g, stage_pyramid(g, backbone, false), stage_lim_params(g, p, false));
    return read_pyramid(g, ids);
}

template <typename S>
FeaturePyramid<S> bottom_up_dense(const FeaturePyramid<S>& b, const LimParams<S>& p) {
    Graph<S> g;
    PyramidIds ids;
    for (const auto& t : b.levels) ids.levels.push_back(g.leaf(t, false));
    auto out = bottom_up_dense(g, ids, stage_lim_params(g, p, false));
    return read_pyramid(g, out);
}

template <typename S>
FeaturePyramid<S> residual_combine(const FeaturePyramid<S>& ct, const FeaturePyramid<S>& backbone,
                                   const LimParams<S>& p) {
    Graph<S> g;
    PyramidIds cids, fids;
    for (const auto& t : ct.levels) cids.levels.push_back(g.leaf(t, false));
    for (const auto& t : backbone.levels) fids.levels.push_back(g.leaf(t, false));
    auto out = residual_combine(g, cids, fids, stage_lim_params(g, p, false));
    return read_pyramid(g, out);
}

}  // namespace lim
