// The standard gradient-check registry: every differentiable op in the
// library checked against central finite differences on random instances.
#pragma once

#include "lim/detector.hpp"
#include "lim/gradcheck.hpp"

namespace lim {

namespace detail {

template <typename DrawFn, typename BuildFn>
GradCheckCase make_case(std::string name, DrawFn draw, BuildFn build) {
    return GradCheckCase{
        std::move(name), [draw, build](std::uint64_t seed, int instances) {
            GradCheckOptions opt;
            Rng rng(seed);
            double worst = 0.0;
            for (int i = 0; i < instances; ++i) {
                worst = std::max(worst, gradcheck_instance(draw, build, rng, opt));
            }
            return worst;
        }};
}

}  // namespace detail

inline std::vector<GradCheckCase> standard_gradcheck_cases() {
    using T = Tensor4<double>;
    using Inputs = std::vector<T>;
    std::vector<GradCheckCase> cases;

    cases.push_back(detail::make_case(
        "elementwise_add",
        [](Rng& r) { return Inputs{rand_tensor(r, 1, 2, 3, 4), rand_tensor(r, 1, 2, 3, 4)}; },
        [](Graph<double>& g, const Inputs& in) {
            const int a = g.leaf(in[0]);
            const int b = g.leaf(in[1]);
            return g_add(g, a, b);
        }));

    for (int k : {1, 3}) {
        cases.push_back(detail::make_case(
            k == 1 ? "conv2d_1x1" : "conv2d_3x3",
            [k](Rng& r) {
                return Inputs{rand_tensor(r, 1, 2, 4, 5), rand_tensor(r, 3, 2, k, k),
                              rand_tensor(r, 1, 3, 1, 1)};
            },
            [](Graph<double>& g, const Inputs& in) {
                const int x = g.leaf(in[0]);
                const int kern = g.leaf(in[1]);
                const int bias = g.leaf(in[2]);
                return g_conv2d(g, x, kern, bias);
            }));
    }

    cases.push_back(detail::make_case(
        "batch_norm_train",
        [](Rng& r) {
            return Inputs{rand_tensor(r, 2, 3, 3, 3), rand_tensor(r, 1, 3, 1, 1, 0.5, 1.5),
                          rand_tensor(r, 1, 3, 1, 1, -0.5, 0.5)};
        },
        [](Graph<double>& g, const Inputs& in) {
            auto s = make_batch_norm<double>(3);
            const int x = g.leaf(in[0]);
            const int gamma = g.leaf(in[1]);
            const int beta = g.leaf(in[2]);
            return g_batch_norm(g, x, gamma, beta, s);
        }));

    cases.push_back(detail::make_case(
        "relu", [](Rng& r) { return Inputs{rand_away_from_zero(r, 1, 2, 3, 4)}; },
        [](Graph<double>& g, const Inputs& in) { return g_relu(g, g.leaf(in[0])); }));

    cases.push_back(detail::make_case(
        "upsample_nearest", [](Rng& r) { return Inputs{rand_tensor(r, 1, 2, 3, 3)}; },
        [](Graph<double>& g, const Inputs& in) {
            return g_upsample_nearest(g, g.leaf(in[0]), 2);
        }));

    cases.push_back(detail::make_case(
        "downsample_max", [](Rng& r) { return Inputs{rand_separated(r, 1, 2, 4, 4)}; },
        [](Graph<double>& g, const Inputs& in) { return g_downsample_max(g, g.leaf(in[0]), 1); }));

    for (ScanDirection d : kAllScanDirections) {
        cases.push_back(detail::make_case(
            std::string("ba_scan_") + scan_direction_name(d),
            [](Rng& r) { return Inputs{rand_separated(r, 1, 2, 4, 5)}; },
            [d](Graph<double>& g, const Inputs& in) {
                return g_directional_max_scan(g, g.leaf(in[0]), d);
            }));
    }

    cases.push_back(detail::make_case(
        "ba_aggregate", [](Rng& r) { return Inputs{rand_separated(r, 1, 2, 4, 4)}; },
        [](Graph<double>& g, const Inputs& in) { return g_ba_aggregate(g, g.leaf(in[0])); }));

    cases.push_back(detail::make_case(
        "conv_block",
        [](Rng& r) {
            return Inputs{rand_tensor(r, 1, 2, 4, 4), rand_tensor(r, 1, 2, 1, 1, 0.5, 1.5),
                          rand_tensor(r, 1, 2, 1, 1, -0.5, 0.5), rand_tensor(r, 2, 2, 3, 3),
                          rand_tensor(r, 1, 2, 1, 1)};
        },
        [](Graph<double>& g, const Inputs& in) {
            auto s = make_batch_norm<double>(2);
            const int x = g.leaf(in[0]);
            const int gamma = g.leaf(in[1]);
            const int beta = g.leaf(in[2]);
            const int kern = g.leaf(in[3]);
            const int bias = g.leaf(in[4]);
            return g_conv_block(g, x, gamma, beta, s, kern, bias);
        }));

    // pathway builders share this staging: inputs 0..1 are pyramid levels,
    // then kernel/bias pairs per level
    const auto stage_pair_params = [](Graph<double>& g, const Inputs& in, int first) {
        LimParamIds p;
        for (int l = 0; l < 2; ++l) {
            p.lateral.push_back(
                ConvWeightIds{g.leaf(in[first + 2 * l]), g.leaf(in[first + 2 * l + 1])});
            p.bottom_up.push_back(p.lateral.back());
            p.out_proj.push_back(std::nullopt);
        }
        return p;
    };

    cases.push_back(detail::make_case(
        "top_down_dense",
        [](Rng& r) {
            Inputs in{rand_tensor(r, 1, 2, 4, 4), rand_tensor(r, 1, 2, 2, 2)};
            for (int l = 0; l < 2; ++l) {
                in.push_back(rand_tensor(r, 2, 2, 1, 1));
                in.push_back(rand_tensor(r, 1, 2, 1, 1));
            }
            return in;
        },
        [stage_pair_params](Graph<double>& g, const Inputs& in) {
            PyramidIds f;
            f.levels = {g.leaf(in[0]), g.leaf(in[1])};
            auto p = stage_pair_params(g, in, 2);
            auto a = top_down_dense(g, f, p);
            return g_concat_channels(g, {a.levels[0], g_upsample_nearest(g, a.levels[1], 1)});
        }));

    cases.push_back(detail::make_case(
        "bottom_up_dense",
        [](Rng& r) {
            Inputs in{rand_separated(r, 1, 2, 4, 4), rand_separated(r, 1, 2, 2, 2)};
            for (int l = 0; l < 2; ++l) {
                in.push_back(rand_tensor(r, 2, 2, 1, 1));
                in.push_back(rand_tensor(r, 1, 2, 1, 1));
            }
            return in;
        },
        [stage_pair_params](Graph<double>& g, const Inputs& in) {
            PyramidIds b;
            b.levels = {g.leaf(in[0]), g.leaf(in[1])};
            auto p = stage_pair_params(g, in, 2);
            auto ct = bottom_up_dense(g, b, p);
            return g_concat_channels(g, {ct.levels[0], g_upsample_nearest(g, ct.levels[1], 1)});
        }));

    cases.push_back(detail::make_case(
        "residual_combine",
        [](Rng& r) {
            return Inputs{rand_tensor(r, 1, 2, 3, 3), rand_tensor(r, 1, 3, 3, 3),
                          rand_tensor(r, 2, 3, 1, 1), rand_tensor(r, 1, 2, 1, 1)};
        },
        [](Graph<double>& g, const Inputs& in) {
            PyramidIds ct, f;
            ct.levels = {g.leaf(in[0])};
            f.levels = {g.leaf(in[1])};
            LimParamIds p;
            p.lateral.push_back(ConvWeightIds{-1, -1});
            p.bottom_up.push_back(ConvWeightIds{-1, -1});
            const int pk = g.leaf(in[2]);
            const int pb = g.leaf(in[3]);
            p.out_proj.push_back(ConvWeightIds{pk, pb});
            return residual_combine(g, ct, f, p).levels[0];
        }));

    // full pipeline at the pinned verification size: L=2, d=4, 8x8 base
    cases.push_back(detail::make_case(
        "lim_forward",
        [](Rng& r) {
            Inputs in{rand_separated(r, 1, 4, 8, 8, 0.02), rand_separated(r, 1, 4, 4, 4, 0.02)};
            for (int l = 0; l < 2; ++l) {
                in.push_back(rand_tensor(r, 4, 4, 1, 1, -0.5, 0.5));   // lateral kernel
                in.push_back(rand_tensor(r, 1, 4, 1, 1, -0.5, 0.5));   // lateral bias
                in.push_back(rand_tensor(r, 4, 16, 1, 1, -0.5, 0.5));  // bottom-up kernel
                in.push_back(rand_tensor(r, 1, 4, 1, 1, -0.5, 0.5));   // bottom-up bias
            }
            return in;
        },
        [](Graph<double>& g, const Inputs& in) {
            LimConfig cfg;
            cfg.levels = 2;
            cfg.width = 4;
            PyramidIds f;
            f.levels = {g.leaf(in[0]), g.leaf(in[1])};
            LimParamIds p;
            for (int l = 0; l < 2; ++l) {
                p.lateral.push_back(ConvWeightIds{g.leaf(in[2 + 4 * l]), g.leaf(in[3 + 4 * l])});
                p.bottom_up.push_back(
                    ConvWeightIds{g.leaf(in[4 + 4 * l]), g.leaf(in[5 + 4 * l])});
                p.out_proj.push_back(std::nullopt);
            }
            auto c = lim_forward(g, f, p, cfg);
            return g_concat_channels(g, {c.levels[0], g_upsample_nearest(g, c.levels[1], 1)});
        }));

    cases.push_back(detail::make_case(
        "detection_loss",
        [](Rng& r) {
            DetectorConfig cfg;
            cfg.resolution = 32;
            cfg.levels = 2;
            cfg.width = 4;
            Inputs in;
            for (int l = 0; l < cfg.levels; ++l) {
                in.push_back(
                    rand_tensor(r, 1, cfg.head_channels(), cfg.grid(l), cfg.grid(l), -0.6, 0.6));
            }
            return in;
        },
        [](Graph<double>& g, const Inputs& in) {
            DetectorConfig cfg;
            cfg.resolution = 32;
            cfg.levels = 2;
            cfg.width = 4;
            std::vector<Annotation> anns = {
                Annotation{"img", "rectangle", {6, 6, 16, 16}},
                Annotation{"img", "capsule", {18, 20, 30, 28}},
            };
            auto targets =
                std::make_shared<Targets<double>>(assign_targets<double>({anns}, cfg));
            PyramidIds preds;
            for (const auto& t : in) preds.levels.push_back(g.leaf(t));
            return detection_loss(g, preds, targets, cfg).node;
        }));

    return cases;
}

// Negative control: an op whose registered backward is deliberately wrong,
// used to prove the harness catches bad gradients.
inline GradCheckCase broken_backward_case() {
    using Inputs = std::vector<Tensor4<double>>;
    return detail::make_case(
        "injected_broken_backward", [](Rng& r) { return Inputs{rand_tensor(r, 1, 1, 2, 2)}; },
        [](Graph<double>& g, const Inputs& in) {
            const int x = g.leaf(in[0]);
            Tensor4<double> out = g.value(x);
            for (auto& v : out.data) v *= 2.0;
            return detail::push_op(g, std::move(out), "broken_scale", {x}, [&](int self) {
                return [self, x](Graph<double>& gr) {
                    gr.accumulate_grad(x, gr.grad(self));  // wrong: forgets the factor 2
                };
            });
        });
}

}  // namespace lim
