// Desk-scale anchor-free detector: tiny pre-activation backbone with
// max-pool strides, optional lateral inhibition module, a shared per-cell
// prediction head, SGD training and greedy NMS decoding.
#pragma once

#include <algorithm>
#include <array>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <tuple>
#include <vector>

#include "lim/config.hpp"
#include "lim/eval.hpp"
#include "lim/lim.hpp"
#include "lim/synthetic.hpp"

namespace lim {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

enum class DetectorVariant { Baseline, SpOnly, BpOnly, Full };

inline const char* variant_name(DetectorVariant v) {
    switch (v) {
        case DetectorVariant::Baseline: return "baseline";
        case DetectorVariant::SpOnly: return "sp";
        case DetectorVariant::BpOnly: return "bp";
        case DetectorVariant::Full: return "full";
    }
    return "?";
}

inline DetectorVariant variant_from_name(const std::string& s) {
    if (s == "baseline") return DetectorVariant::Baseline;
    if (s == "sp") return DetectorVariant::SpOnly;
    if (s == "bp") return DetectorVariant::BpOnly;
    if (s == "full") return DetectorVariant::Full;
    throw std::invalid_argument("unknown variant '" + s +
                                "' (expected baseline, sp, bp or full)");
}

struct DetectorConfig {
    int resolution = 128;  // square input
    int levels = 3;        // pyramid levels, strides 4, 8, 16, ...
    int width = 32;        // pyramid width d
    std::vector<std::string> class_names = {"rectangle", "ellipse", "capsule"};
    DetectorVariant variant = DetectorVariant::Full;
    BaMode ba_mode = BaMode::Concat;

    int classes() const { return static_cast<int>(class_names.size()); }
    int stride(int level) const { return 4 << level; }
    int grid(int level) const { return resolution / stride(level); }
    // objectness + class logits + 4 box offsets
    int head_channels() const { return 1 + classes() + 4; }
    bool lim_enabled() const { return variant != DetectorVariant::Baseline; }

    LimConfig lim_config() const {
        LimConfig c;
        c.levels = levels;
        c.width = width;
        c.ba_mode = ba_mode;
        c.ablation = variant == DetectorVariant::SpOnly  ? Ablation::SpOnly
                     : variant == DetectorVariant::BpOnly ? Ablation::BpOnly
                                                          : Ablation::Full;
        return c;
    }

    int class_id(const std::string& name) const {
        for (int i = 0; i < classes(); ++i) {
            if (class_names[i] == name) return i;
        }
        return -1;
    }
};

inline void validate_detector_config(const DetectorConfig& cfg) {
    detail::require(cfg.levels >= 1 && cfg.width >= 1 && cfg.classes() >= 1,
                    "detector config: levels, width and classes must be positive");
    const int div = 1 << (cfg.levels + 1);
    detail::require(cfg.resolution % div == 0,
                    "detector config: resolution " + std::to_string(cfg.resolution) +
                        " must be divisible by " + std::to_string(div));
}

// Mirrors the cited training protocol: SGD, lr 0.0001, momentum 0.9,
// weight decay 0.0005, batch size 32 with shuffling.
struct TrainConfig {
    double lr = 0.0001;
    double momentum = 0.9;
    double weight_decay = 0.0005;
    int batch_size = 32;
    int steps = 2000;
    std::uint64_t seed = 1;
    int eval_every = 0;          // 0 disables periodic evaluation
    double score_thresh = 0.05;  // decode threshold for evaluation
};

inline void validate_train_config(const TrainConfig& tc) {
    detail::require(tc.lr > 0 && tc.momentum >= 0 && tc.weight_decay >= 0 && tc.batch_size > 0 &&
                        tc.steps > 0,
                    "train config: values must be positive");
}

// ---------------------------------------------------------------------------
// Model parameters
// ---------------------------------------------------------------------------

template <typename S>
struct DetectorModel {
    DetectorConfig cfg;
    std::vector<BatchNormState<S>> bn;   // one per backbone block
    std::vector<ConvWeights<S>> conv;    // 3x3 conv of each block
    LimParams<S> lim;                    // present when the variant uses LIM
    ConvWeights<S> head;                 // shared across levels
};

template <typename S>
DetectorModel<S> make_detector_model(const DetectorConfig& cfg, std::uint64_t seed) {
    validate_detector_config(cfg);
    DetectorModel<S> m;
    m.cfg = cfg;
    for (int l = 0; l < cfg.levels; ++l) {
        const int in_c = l == 0 ? 3 : cfg.width;
        m.bn.push_back(make_batch_norm<S>(in_c));
        m.conv.push_back(make_conv_weights<S>(cfg.width, in_c, 3, seed + 17 * l + 1));
    }
    if (cfg.lim_enabled()) {
        m.lim = make_lim_params<S>(cfg.lim_config(), std::vector<int>(cfg.levels, cfg.width),
                                   seed + 5000);
    }
    // zero-initialized head: every logit starts at 0, which keeps the first
    // optimizer steps off the saturated tails of the losses
    m.head = make_conv_weights<S>(cfg.head_channels(), cfg.width, 3, seed + 9000,
                                  InitScheme::Zeros);
    return m;
}

// Visits every learnable array in a fixed order (used by SGD state layout
// and the checkpoint format). fn(name, data, count, shape).
template <typename S, typename Fn>
void visit_params(DetectorModel<S>& m, Fn&& fn) {
    const auto visit_conv = [&](const std::string& name, ConvWeights<S>& w) {
        fn(name + ".kernel", w.kernel.data.data(), w.kernel.size(),
           std::array<int, 4>{w.kernel.n, w.kernel.c, w.kernel.h, w.kernel.w});
        fn(name + ".bias", w.bias.data.data(), w.bias.size(),
           std::array<int, 4>{w.bias.n, w.bias.c, w.bias.h, w.bias.w});
    };
    for (std::size_t l = 0; l < m.bn.size(); ++l) {
        const std::string p = "backbone.block" + std::to_string(l);
        auto& bn = m.bn[l];
        fn(p + ".bn.gamma", bn.gamma.data(), bn.gamma.size(),
           std::array<int, 4>{1, bn.channels, 1, 1});
        fn(p + ".bn.beta", bn.beta.data(), bn.beta.size(),
           std::array<int, 4>{1, bn.channels, 1, 1});
        visit_conv(p + ".conv", m.conv[l]);
    }
    for (std::size_t l = 0; l < m.lim.lateral.size(); ++l) {
        visit_conv("lim.lateral" + std::to_string(l), m.lim.lateral[l]);
    }
    for (std::size_t l = 0; l < m.lim.bottom_up.size(); ++l) {
        visit_conv("lim.bottom_up" + std::to_string(l), m.lim.bottom_up[l]);
    }
    for (std::size_t l = 0; l < m.lim.out_proj.size(); ++l) {
        if (m.lim.out_proj[l]) visit_conv("lim.out_proj" + std::to_string(l), *m.lim.out_proj[l]);
    }
    visit_conv("head", m.head);
}

// Running statistics are part of a checkpoint but not learnable.
template <typename S, typename Fn>
void visit_buffers(DetectorModel<S>& m, Fn&& fn) {
    for (std::size_t l = 0; l < m.bn.size(); ++l) {
        const std::string p = "backbone.block" + std::to_string(l);
        auto& bn = m.bn[l];
        fn(p + ".bn.running_mean", bn.running_mean.data(), bn.running_mean.size(),
           std::array<int, 4>{1, bn.channels, 1, 1});
        fn(p + ".bn.running_var", bn.running_var.data(), bn.running_var.size(),
           std::array<int, 4>{1, bn.channels, 1, 1});
    }
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

template <typename S>
struct StagedModel {
    std::vector<int> bn_gamma, bn_beta;
    std::vector<ConvWeightIds> conv;
    LimParamIds lim;
    ConvWeightIds head;
};

template <typename S>
StagedModel<S> stage_model(Graph<S>& g, DetectorModel<S>& m, bool needs_grad = true) {
    StagedModel<S> sm;
    for (std::size_t l = 0; l < m.bn.size(); ++l) {
        auto& bn = m.bn[l];
        Tensor4<S> gamma(1, bn.channels, 1, 1), beta(1, bn.channels, 1, 1);
        gamma.data = bn.gamma;
        beta.data = bn.beta;
        sm.bn_gamma.push_back(g.leaf(std::move(gamma), needs_grad));
        sm.bn_beta.push_back(g.leaf(std::move(beta), needs_grad));
        sm.conv.push_back(stage_conv_weights(g, m.conv[l], needs_grad));
    }
    if (m.cfg.lim_enabled()) sm.lim = stage_lim_params(g, m.lim, needs_grad);
    sm.head = stage_conv_weights(g, m.head, needs_grad);
    return sm;
}

// Backbone: stride-4 entry pool, then one composite block per level with a
// stride-2 pool between levels.
template <typename S>
PyramidIds backbone_forward(Graph<S>& g, int images, DetectorModel<S>& m,
                            const StagedModel<S>& sm) {
    const auto& iv = g.value(images);
    detail::require(iv.c == 3, "backbone: expected 3-channel input, got " + iv.shape_str());
    detail::require(iv.h == m.cfg.resolution && iv.w == m.cfg.resolution,
                    "backbone: input " + iv.shape_str() + " does not match configured resolution " +
                        std::to_string(m.cfg.resolution));
    PyramidIds f;
    int cur = g_downsample_max(g, images, 2);
    for (int l = 0; l < m.cfg.levels; ++l) {
        if (l > 0) cur = g_downsample_max(g, cur, 1);
        cur = g_conv_block(g, cur, sm.bn_gamma[l], sm.bn_beta[l], m.bn[l], sm.conv[l].kernel,
                           sm.conv[l].bias);
        f.levels.push_back(cur);
    }
    return f;
}

template <typename S>
FeaturePyramid<S> backbone_forward(const Tensor4<S>& images, DetectorModel<S>& m) {
    Graph<S> g;
    auto sm = stage_model(g, m, false);
    auto ids = backbone_forward(g, g.leaf(images, false), m, sm);
    return read_pyramid(g, ids);
}

// Full detector forward: backbone -> optional LIM -> shared head.
template <typename S>
PyramidIds detector_forward(Graph<S>& g, int images, DetectorModel<S>& m,
                            const StagedModel<S>& sm) {
    PyramidIds f = backbone_forward(g, images, m, sm);
    PyramidIds feats = f;
    if (m.cfg.lim_enabled()) feats = lim_forward(g, f, sm.lim, m.cfg.lim_config());
    PyramidIds preds;
    for (int id : feats.levels) preds.levels.push_back(g_conv2d(g, id, sm.head.kernel, sm.head.bias));
    return preds;
}

// ---------------------------------------------------------------------------
// Target assignment
// ---------------------------------------------------------------------------

template <typename S>
struct LevelTargets {
    Tensor4<S> objectness;  // (n,1,h,w)
    std::vector<int> cls;   // n*h*w, -1 where unassigned
    Tensor4<S> offsets;     // (n,4,h,w): dx, dy within cell; log size vs stride
};

template <typename S>
struct Targets {
    std::vector<LevelTargets<S>> levels;
    int positives = 0;
    int skipped_degenerate = 0;
};

// Each box goes to the cell containing its center at the level whose stride
// best matches its size: the largest stride <= sqrt(area), clamped to the
// available levels. Annotations are assigned in a canonical order (area
// descending, then coordinates), so the result is independent of the input
// list order; on a cell collision the canonically-first box wins.
template <typename S>
Targets<S> assign_targets(const std::vector<std::vector<Annotation>>& batch,
                          const DetectorConfig& cfg) {
    Targets<S> t;
    const int n = static_cast<int>(batch.size());
    for (int l = 0; l < cfg.levels; ++l) {
        LevelTargets<S> lt;
        const int gsz = cfg.grid(l);
        lt.objectness = Tensor4<S>::zeros(n, 1, gsz, gsz);
        lt.offsets = Tensor4<S>::zeros(n, 4, gsz, gsz);
        lt.cls.assign(static_cast<std::size_t>(n) * gsz * gsz, -1);
        t.levels.push_back(std::move(lt));
    }
    for (int b = 0; b < n; ++b) {
        std::vector<Annotation> anns = batch[b];
        std::sort(anns.begin(), anns.end(), [](const Annotation& a, const Annotation& c) {
            const double aa = a.box.area(), ca = c.box.area();
            if (aa != ca) return aa > ca;
            return std::tie(a.box.x1, a.box.y1, a.box.x2, a.box.y2, a.category) <
                   std::tie(c.box.x1, c.box.y1, c.box.x2, c.box.y2, c.category);
        });
        for (const auto& a : anns) {
            if (a.box.area() <= 0.0) {
                ++t.skipped_degenerate;
                continue;
            }
            const int cid = cfg.class_id(a.category);
            detail::require(cid >= 0, "assign_targets: unknown category '" + a.category + "'");
            const double side = std::sqrt(a.box.area());
            int level = 0;
            for (int l = cfg.levels - 1; l >= 0; --l) {
                if (cfg.stride(l) <= side) {
                    level = l;
                    break;
                }
            }
            const int stride = cfg.stride(level), gsz = cfg.grid(level);
            const double cx = 0.5 * (a.box.x1 + a.box.x2), cy = 0.5 * (a.box.y1 + a.box.y2);
            const int ix = std::clamp(static_cast<int>(cx / stride), 0, gsz - 1);
            const int iy = std::clamp(static_cast<int>(cy / stride), 0, gsz - 1);
            auto& lt = t.levels[level];
            if (lt.objectness.at(b, 0, iy, ix) > S(0)) continue;  // cell already taken
            lt.objectness.at(b, 0, iy, ix) = S(1);
            lt.cls[(static_cast<std::size_t>(b) * gsz + iy) * gsz + ix] = cid;
            lt.offsets.at(b, 0, iy, ix) = static_cast<S>(cx / stride - ix - 0.5);
            lt.offsets.at(b, 1, iy, ix) = static_cast<S>(cy / stride - iy - 0.5);
            lt.offsets.at(b, 2, iy, ix) = static_cast<S>(std::log((a.box.x2 - a.box.x1) / stride));
            lt.offsets.at(b, 3, iy, ix) = static_cast<S>(std::log((a.box.y2 - a.box.y1) / stride));
            ++t.positives;
        }
    }
    return t;
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

template <typename S>
struct LossBreakdown {
    int node = -1;
    double objectness = 0, classification = 0, box = 0;
    double total() const { return objectness + classification + box; }
};

namespace detail {

template <typename S>
S bce_with_logits(S z, S target) {
    // max(z,0) - z*t + log(1 + exp(-|z|))
    const S zpos = z > S(0) ? z : S(0);
    const S az = z > S(0) ? z : -z;
    return zpos - z * target + std::log(S(1) + std::exp(-az));
}

}  // namespace detail

// Binary cross-entropy on objectness over all cells, softmax cross-entropy
// on the class at positive cells, smooth-L1 on offsets at positive cells;
// the three sums are averaged over the batch. One fused tape node carries
// the hand-derived backward for all prediction tensors.
template <typename S>
LossBreakdown<S> detection_loss(Graph<S>& g, const PyramidIds& preds,
                                const std::shared_ptr<Targets<S>>& targets,
                                const DetectorConfig& cfg) {
    const int L = preds.level_count();
    detail::require(static_cast<int>(targets->levels.size()) == L,
                    "detection_loss: level count mismatch");
    const int K = cfg.classes();
    const int n = g.value(preds.levels[0]).n;
    LossBreakdown<S> out;

    double obj_sum = 0, cls_sum = 0, box_sum = 0;
    for (int l = 0; l < L; ++l) {
        const auto& p = g.value(preds.levels[l]);
        const auto& lt = targets->levels[l];
        detail::require(p.c == cfg.head_channels() && p.h == lt.objectness.h &&
                            p.w == lt.objectness.w && p.n == lt.objectness.n,
                        "detection_loss: prediction shape " + p.shape_str() +
                            " inconsistent with targets");
        for (int b = 0; b < p.n; ++b) {
            for (int y = 0; y < p.h; ++y) {
                for (int x = 0; x < p.w; ++x) {
                    const S tobj = lt.objectness.at(b, 0, y, x);
                    obj_sum += detail::bce_with_logits(p.at(b, 0, y, x), tobj);
                    const int cid = lt.cls[(static_cast<std::size_t>(b) * p.h + y) * p.w + x];
                    if (cid < 0) continue;
                    // log-sum-exp with max shift
                    S mx = p.at(b, 1, y, x);
                    for (int k = 1; k < K; ++k) mx = std::max(mx, p.at(b, 1 + k, y, x));
                    S lse = S(0);
                    for (int k = 0; k < K; ++k) lse += std::exp(p.at(b, 1 + k, y, x) - mx);
                    cls_sum += std::log(lse) + mx - p.at(b, 1 + cid, y, x);
                    for (int o = 0; o < 4; ++o) {
                        const S d = p.at(b, 1 + K + o, y, x) - lt.offsets.at(b, o, y, x);
                        const S ad = std::abs(d);
                        box_sum += ad < S(1) ? S(0.5) * d * d : ad - S(0.5);
                    }
                }
            }
        }
    }
    out.objectness = obj_sum / n;
    out.classification = cls_sum / n;
    out.box = box_sum / n;

    Tensor4<S> value(1, 1, 1, 1, static_cast<S>(out.objectness + out.classification + out.box));
    std::vector<int> parents = preds.levels;
    out.node = detail::push_op(g, std::move(value), "detection_loss", parents, [&](int self) {
        const int batch = n, classes = K;
        return [self, parents, targets, batch, classes](Graph<S>& gr) {
            const S u = gr.grad(self).data[0];
            for (int l = 0; l < static_cast<int>(parents.size()); ++l) {
                const auto& p = gr.value(parents[l]);
                if (!gr.needs_grad(parents[l])) continue;
                const auto& lt = targets->levels[l];
                Tensor4<S> dp = Tensor4<S>::zeros(p.n, p.c, p.h, p.w);
                const S scale = u / static_cast<S>(batch);
                for (int b = 0; b < p.n; ++b) {
                    for (int y = 0; y < p.h; ++y) {
                        for (int x = 0; x < p.w; ++x) {
                            const S z = p.at(b, 0, y, x);
                            const S sig = S(1) / (S(1) + std::exp(-z));
                            dp.at(b, 0, y, x) =
                                scale * (sig - lt.objectness.at(b, 0, y, x));
                            const int cid =
                                lt.cls[(static_cast<std::size_t>(b) * p.h + y) * p.w + x];
                            if (cid < 0) continue;
                            S mx = p.at(b, 1, y, x);
                            for (int k = 1; k < classes; ++k)
                                mx = std::max(mx, p.at(b, 1 + k, y, x));
                            S lse = S(0);
                            for (int k = 0; k < classes; ++k)
                                lse += std::exp(p.at(b, 1 + k, y, x) - mx);
                            for (int k = 0; k < classes; ++k) {
                                const S soft = std::exp(p.at(b, 1 + k, y, x) - mx) / lse;
                                dp.at(b, 1 + k, y, x) =
                                    scale * (soft - (k == cid ? S(1) : S(0)));
                            }
                            for (int o = 0; o < 4; ++o) {
                                const S d =
                                    p.at(b, 1 + classes + o, y, x) - lt.offsets.at(b, o, y, x);
                                dp.at(b, 1 + classes + o, y, x) =
                                    scale * std::clamp(d, S(-1), S(1));
                            }
                        }
                    }
                }
                gr.accumulate_grad(parents[l], dp);
            }
        };
    });
    return out;
}

// ---------------------------------------------------------------------------
// SGD with momentum and weight decay
// ---------------------------------------------------------------------------
// velocity = momentum * velocity + grad + weight_decay * param
// param   -= lr * velocity

template <typename S>
void sgd_update(S* param, const S* grad, S* velocity, std::size_t count, const TrainConfig& tc) {
    const S lr = static_cast<S>(tc.lr), mom = static_cast<S>(tc.momentum);
    const S wd = static_cast<S>(tc.weight_decay);
    for (std::size_t i = 0; i < count; ++i) {
        velocity[i] = mom * velocity[i] + grad[i] + wd * param[i];
        param[i] -= lr * velocity[i];
    }
}

template <typename S>
struct SgdState {
    std::vector<std::vector<S>> velocity;  // aligned with visit_params order
};

// Reads gradients off the tape (zero where a parameter was unused) and
// applies the update in the fixed visitation order.
template <typename S>
void apply_sgd_step(DetectorModel<S>& m, Graph<S>& g, const StagedModel<S>& sm, SgdState<S>& st,
                    const TrainConfig& tc) {
    std::vector<std::pair<int, S*>> slots;  // leaf id -> param data
    const auto bind = [&](int leaf, S* data) { slots.push_back({leaf, data}); };
    for (std::size_t l = 0; l < m.bn.size(); ++l) {
        bind(sm.bn_gamma[l], m.bn[l].gamma.data());
        bind(sm.bn_beta[l], m.bn[l].beta.data());
        bind(sm.conv[l].kernel, m.conv[l].kernel.data.data());
        bind(sm.conv[l].bias, m.conv[l].bias.data.data());
    }
    if (m.cfg.lim_enabled()) {
        for (std::size_t l = 0; l < m.lim.lateral.size(); ++l) {
            bind(sm.lim.lateral[l].kernel, m.lim.lateral[l].kernel.data.data());
            bind(sm.lim.lateral[l].bias, m.lim.lateral[l].bias.data.data());
        }
        for (std::size_t l = 0; l < m.lim.bottom_up.size(); ++l) {
            bind(sm.lim.bottom_up[l].kernel, m.lim.bottom_up[l].kernel.data.data());
            bind(sm.lim.bottom_up[l].bias, m.lim.bottom_up[l].bias.data.data());
        }
        for (std::size_t l = 0; l < m.lim.out_proj.size(); ++l) {
            if (m.lim.out_proj[l]) {
                bind(sm.lim.out_proj[l]->kernel, m.lim.out_proj[l]->kernel.data.data());
                bind(sm.lim.out_proj[l]->bias, m.lim.out_proj[l]->bias.data.data());
            }
        }
    }
    bind(sm.head.kernel, m.head.kernel.data.data());
    bind(sm.head.bias, m.head.bias.data.data());

    if (st.velocity.empty()) {
        st.velocity.resize(slots.size());
        for (std::size_t i = 0; i < slots.size(); ++i) {
            st.velocity[i].assign(g.value(slots[i].first).size(), S(0));
        }
    }
    detail::require(st.velocity.size() == slots.size(), "sgd: optimizer state layout mismatch");
    for (std::size_t i = 0; i < slots.size(); ++i) {
        const auto& [leaf, data] = slots[i];
        const std::size_t count = g.value(leaf).size();
        if (!g.grad_present(leaf)) continue;  // parameter unused this step
        sgd_update(data, g.grad(leaf).data.data(), st.velocity[i].data(), count, tc);
    }
}

// ---------------------------------------------------------------------------
// Decoding and NMS
// ---------------------------------------------------------------------------

// Greedy per-class NMS: highest score first (ties by insertion order),
// suppression is inclusive at the IoU threshold.
inline std::vector<Detection> greedy_nms(const std::vector<Detection>& dets, double iou_thresh) {
    std::vector<int> order(dets.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return dets[a].score > dets[b].score; });
    std::vector<Detection> kept;
    for (int oi : order) {
        const Detection& d = dets[oi];
        bool suppressed = false;
        for (const auto& k : kept) {
            if (k.image == d.image && k.category == d.category &&
                iou(k.box, d.box) >= iou_thresh) {
                suppressed = true;
                break;
            }
        }
        if (!suppressed) kept.push_back(d);
    }
    return kept;
}

// Decodes one batch of head outputs. score = sigmoid(objectness) * best
// class probability; boxes come from the cell center plus predicted
// offsets and are clipped to the image.
template <typename S>
std::vector<Detection> decode_and_nms(const std::vector<Tensor4<S>>& level_preds,
                                      const DetectorConfig& cfg,
                                      const std::vector<std::string>& image_names,
                                      double score_thresh, double iou_thresh = 0.5) {
    const int K = cfg.classes();
    std::vector<Detection> raw;
    for (int l = 0; l < static_cast<int>(level_preds.size()); ++l) {
        const auto& p = level_preds[l];
        const int stride = cfg.stride(l);
        for (int b = 0; b < p.n; ++b) {
            for (int y = 0; y < p.h; ++y) {
                for (int x = 0; x < p.w; ++x) {
                    const double obj =
                        1.0 / (1.0 + std::exp(-static_cast<double>(p.at(b, 0, y, x))));
                    double mx = p.at(b, 1, y, x);
                    for (int k = 1; k < K; ++k)
                        mx = std::max<double>(mx, p.at(b, 1 + k, y, x));
                    double lse = 0.0;
                    for (int k = 0; k < K; ++k)
                        lse += std::exp(static_cast<double>(p.at(b, 1 + k, y, x)) - mx);
                    int best_k = 0;
                    double best_p = 0.0;
                    for (int k = 0; k < K; ++k) {
                        const double soft =
                            std::exp(static_cast<double>(p.at(b, 1 + k, y, x)) - mx) / lse;
                        if (soft > best_p) {
                            best_p = soft;
                            best_k = k;
                        }
                    }
                    const double score = obj * best_p;
                    if (score <= score_thresh) continue;
                    const double cx = (x + 0.5 + p.at(b, 1 + K, y, x)) * stride;
                    const double cy = (y + 0.5 + p.at(b, 1 + K + 1, y, x)) * stride;
                    const double bw = std::exp(static_cast<double>(p.at(b, 1 + K + 2, y, x))) * stride;
                    const double bh = std::exp(static_cast<double>(p.at(b, 1 + K + 3, y, x))) * stride;
                    Detection d;
                    d.image = image_names[b];
                    d.category = cfg.class_names[best_k];
                    d.score = score;
                    d.box = {std::max(0.0, cx - bw / 2), std::max(0.0, cy - bh / 2),
                             std::min<double>(cfg.resolution, cx + bw / 2),
                             std::min<double>(cfg.resolution, cy + bh / 2)};
                    if (!d.box.valid()) continue;
                    raw.push_back(std::move(d));
                }
            }
        }
    }
    return greedy_nms(raw, iou_thresh);
}

// ---------------------------------------------------------------------------
// Dataset plumbing and training
// ---------------------------------------------------------------------------

template <typename S>
struct Sample {
    std::string name;
    Tensor4<S> image;  // (1,3,h,w) attenuation
    std::vector<Annotation> annotations;
};

template <typename S>
struct DetectionDataset {
    std::vector<Sample<S>> train, test;
};

template <typename S>
DetectionDataset<S> load_dataset(const std::string& dir) {
    const Manifest mf = read_manifest(dir + "/manifest.txt");
    DetectionDataset<S> ds;
    for (const auto& e : mf.entries) {
        Sample<S> s;
        s.name = e.filename;
        s.image = image_to_attenuation_tensor<S>(read_ppm(dir + "/" + e.filename));
        const std::string ann = dir + "/" + e.filename.substr(0, e.filename.size() - 4) + ".txt";
        auto parsed = parse_annotation_file(ann);
        s.annotations = std::move(parsed.annotations);
        (e.split == "train" ? ds.train : ds.test).push_back(std::move(s));
    }
    return ds;
}

template <typename S>
double evaluate_map(DetectorModel<S>& m, const std::vector<Sample<S>>& samples,
                    double score_thresh, std::map<std::string, double>* per_class = nullptr) {
    if (samples.empty()) return 0.0;
    for (auto& bn : m.bn) bn.mode = BnMode::Eval;
    std::vector<Detection> dets;
    std::vector<Annotation> gts;
    const int chunk = 16;
    for (std::size_t start = 0; start < samples.size(); start += chunk) {
        const int bsz = static_cast<int>(std::min<std::size_t>(chunk, samples.size() - start));
        Tensor4<S> batch(bsz, 3, m.cfg.resolution, m.cfg.resolution);
        std::vector<std::string> names;
        for (int b = 0; b < bsz; ++b) {
            const auto& s = samples[start + b];
            std::copy(s.image.data.begin(), s.image.data.end(), batch.plane(b, 0));
            names.push_back(s.name);
            for (const auto& a : s.annotations) gts.push_back(a);
        }
        Graph<S> g;
        auto sm = stage_model(g, m, false);
        auto preds = detector_forward(g, g.leaf(std::move(batch), false), m, sm);
        std::vector<Tensor4<S>> values;
        for (int id : preds.levels) values.push_back(g.value(id));
        auto batch_dets = decode_and_nms(values, m.cfg, names, score_thresh);
        dets.insert(dets.end(), batch_dets.begin(), batch_dets.end());
    }
    for (auto& bn : m.bn) bn.mode = BnMode::Train;

    std::vector<double> aps;
    for (const auto& cname : m.cfg.class_names) {
        std::vector<Detection> cd;
        std::vector<Annotation> cg;
        for (const auto& d : dets)
            if (d.category == cname) cd.push_back(d);
        for (const auto& a : gts)
            if (a.category == cname) cg.push_back(a);
        const double ap = average_precision(cd, cg).ap;
        if (per_class) (*per_class)[cname] = ap;
        aps.push_back(ap);
    }
    return mean_ap(aps);
}

struct TrainResult {
    std::vector<double> loss_trace;                 // one entry per step
    std::vector<std::pair<int, double>> map_trace;  // (step, mAP) checkpoints
    double initial_loss = 0, final_loss = 0;
    double final_map = 0;
};

// Deterministic given the seed: the shuffle permutation, batching and every
// kernel are fixed-order. Aborts with the offending step on non-finite loss.
template <typename S>
TrainResult train(DetectorModel<S>& m, const DetectionDataset<S>& ds, const TrainConfig& tc) {
    validate_train_config(tc);
    detail::require(!ds.train.empty(), "train: dataset is empty");
    TrainResult out;
    SgdState<S> sgd;
    Rng shuffle_rng(tc.seed * 0x9e3779b9ull + 0x7f4a7c15ull);
    std::vector<int> order(ds.train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    std::size_t cursor = order.size();  // forces a shuffle at step 0

    const int res = m.cfg.resolution;
    for (int step = 0; step < tc.steps; ++step) {
        const int bsz = static_cast<int>(std::min<std::size_t>(tc.batch_size, order.size()));
        Tensor4<S> batch(bsz, 3, res, res);
        std::vector<std::vector<Annotation>> anns(bsz);
        for (int b = 0; b < bsz; ++b) {
            if (cursor >= order.size()) {
                shuffle_rng.shuffle(order);
                cursor = 0;
            }
            const auto& s = ds.train[order[cursor++]];
            std::copy(s.image.data.begin(), s.image.data.end(), batch.plane(b, 0));
            anns[b] = s.annotations;
        }
        auto targets = std::make_shared<Targets<S>>(assign_targets<S>(anns, m.cfg));

        Graph<S> g;
        auto sm = stage_model(g, m, true);
        auto preds = detector_forward(g, g.leaf(std::move(batch), false), m, sm);
        auto loss = detection_loss(g, preds, targets, m.cfg);
        const double lv = loss.total();
        if (!std::isfinite(lv)) {
            throw std::runtime_error("train: non-finite loss at step " + std::to_string(step) +
                                     " (objectness " + std::to_string(loss.objectness) +
                                     ", class " + std::to_string(loss.classification) + ", box " +
                                     std::to_string(loss.box) + ")");
        }
        out.loss_trace.push_back(lv);
        g.backward(loss.node);
        apply_sgd_step(m, g, sm, sgd, tc);

        if (tc.eval_every > 0 && (step + 1) % tc.eval_every == 0) {
            out.map_trace.push_back({step + 1, evaluate_map(m, ds.test, tc.score_thresh)});
        }
    }
    out.initial_loss = out.loss_trace.front();
    out.final_loss = out.loss_trace.back();
    out.final_map = evaluate_map(m, ds.test, tc.score_thresh);
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoint format
// ---------------------------------------------------------------------------
// "LIMCKPT1", u32 entry count, then a manifest of (name, shape, offset)
// entries followed by little-endian f32 payloads. The config rides along
// as a flat key = value text file.

template <typename S>
void save_checkpoint(DetectorModel<S>& m, const std::string& path) {
    struct Entry {
        std::string name;
        const S* data;
        std::size_t count;
        std::array<int, 4> shape;
    };
    std::vector<Entry> entries;
    auto collect = [&](const std::string& name, S* data, std::size_t count,
                       std::array<int, 4> shape) {
        entries.push_back({name, data, count, shape});
    };
    visit_params(m, collect);
    visit_buffers(m, collect);

    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write checkpoint: " + path);
    os.write("LIMCKPT1", 8);
    detail::write_u32_le(os, static_cast<std::uint32_t>(entries.size()));
    std::uint64_t offset = 0;
    for (const auto& e : entries) {
        detail::require(e.name.size() < 65536, "checkpoint: name too long");
        const std::uint32_t len = static_cast<std::uint32_t>(e.name.size());
        detail::write_u32_le(os, len);
        os.write(e.name.data(), len);
        for (int d : e.shape) detail::write_u32_le(os, static_cast<std::uint32_t>(d));
        detail::write_u32_le(os, static_cast<std::uint32_t>(offset & 0xffffffffull));
        detail::write_u32_le(os, static_cast<std::uint32_t>(offset >> 32));
        offset += e.count * 4;
    }
    for (const auto& e : entries) {
        for (std::size_t i = 0; i < e.count; ++i) {
            const float v = static_cast<float>(e.data[i]);
            os.write(reinterpret_cast<const char*>(&v), 4);
        }
    }
    if (!os) throw std::runtime_error("checkpoint write failed: " + path);

    KvConfig cfg;
    cfg.values["resolution"] = std::to_string(m.cfg.resolution);
    cfg.values["levels"] = std::to_string(m.cfg.levels);
    cfg.values["width"] = std::to_string(m.cfg.width);
    cfg.values["variant"] = variant_name(m.cfg.variant);
    cfg.values["ba_mode"] = m.cfg.ba_mode == BaMode::Concat ? "concat" : "max-fuse";
    std::string classes;
    for (const auto& c : m.cfg.class_names) classes += (classes.empty() ? "" : ",") + c;
    cfg.values["classes"] = classes;
    write_kv_file(cfg, path + ".cfg");
}

// Loads payloads into an existing model with the same architecture.
template <typename S>
void load_checkpoint(DetectorModel<S>& m, const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::string(magic, 8) != "LIMCKPT1") {
        throw std::runtime_error("checkpoint: bad magic");
    }
    const std::uint32_t count = detail::read_u32_le(is);
    struct Entry {
        std::string name;
        std::array<int, 4> shape;
        std::uint64_t offset;
    };
    std::vector<Entry> entries;
    for (std::uint32_t i = 0; i < count; ++i) {
        Entry e;
        const std::uint32_t len = detail::read_u32_le(is);
        e.name.resize(len);
        is.read(e.name.data(), len);
        for (int d = 0; d < 4; ++d) e.shape[d] = static_cast<int>(detail::read_u32_le(is));
        const std::uint64_t lo = detail::read_u32_le(is);
        const std::uint64_t hi = detail::read_u32_le(is);
        e.offset = lo | (hi << 32);
        entries.push_back(std::move(e));
    }
    const std::streampos payload_start = is.tellg();
    std::map<std::string, Entry*> by_name;
    for (auto& e : entries) by_name[e.name] = &e;

    auto restore = [&](const std::string& name, S* data, std::size_t n,
                       std::array<int, 4> shape) {
        auto it = by_name.find(name);
        detail::require(it != by_name.end(), "checkpoint: missing tensor " + name);
        detail::require(it->second->shape == shape, "checkpoint: shape mismatch for " + name);
        is.seekg(payload_start + static_cast<std::streamoff>(it->second->offset));
        for (std::size_t i = 0; i < n; ++i) {
            float v;
            is.read(reinterpret_cast<char*>(&v), 4);
            data[i] = static_cast<S>(v);
        }
        if (!is) throw std::runtime_error("checkpoint: truncated payload for " + name);
    };
    visit_params(m, restore);
    visit_buffers(m, restore);
    for (auto& bn : m.bn) bn.stats_initialized = true;
}

}  // namespace lim
