#include <gtest/gtest.h>

#include "lim/gradcheck.hpp"
#include "lim/lim.hpp"

using namespace lim;

namespace {

FeaturePyramid<double> random_pyramid(Rng& rng, int L, int c, int base_h, int base_w,
                                      bool separated = false) {
    FeaturePyramid<double> f;
    for (int l = 0; l < L; ++l) {
        const int h = base_h >> l, w = base_w >> l;
        f.levels.push_back(separated ? rand_separated(rng, 1, c, h, w)
                                     : rand_tensor(rng, 1, c, h, w));
    }
    return f;
}

}  // namespace

TEST(LimForward, OutputExtentsEqualInputExtentsAllModes) {
    Rng rng(1);
    for (int L : {1, 2, 3}) {
        for (Ablation ab : {Ablation::SpOnly, Ablation::BpOnly, Ablation::Full}) {
            LimConfig cfg;
            cfg.levels = L;
            cfg.width = 3;
            cfg.ablation = ab;
            FeaturePyramid<double> f = random_pyramid(rng, L, 3, 8, 8);
            auto p = make_lim_params<double>(cfg, std::vector<int>(L, 3), 5);
            FeaturePyramid<double> c = lim_forward(f, p, cfg);
            ASSERT_EQ(c.level_count(), L);
            for (int l = 0; l < L; ++l) {
                EXPECT_EQ(c.levels[l].n, f.levels[l].n);
                EXPECT_EQ(c.levels[l].h, f.levels[l].h);
                EXPECT_EQ(c.levels[l].w, f.levels[l].w);
                EXPECT_EQ(c.levels[l].c, cfg.width);
                EXPECT_TRUE(all_finite(c.levels[l]));
            }
        }
    }
}

TEST(LimForward, FullModeEqualsManualComposition) {
    Rng rng(2);
    LimConfig cfg;
    cfg.levels = 3;
    cfg.width = 2;
    FeaturePyramid<double> f = random_pyramid(rng, 3, 2, 8, 8);
    // generic builder keeps all projections non-zero
    auto p = make_lim_params<double>({2, 2, 2}, 2, 8, 7);

    FeaturePyramid<double> via_lim = lim_forward(f, p, cfg);

    Graph<double> g;
    auto fids = stage_pyramid(g, f, false);
    auto pids = stage_lim_params(g, p, false);
    auto a = top_down_dense(g, fids, pids);
    PyramidIds b;
    for (int id : a.levels) b.levels.push_back(g_ba_aggregate(g, id));
    auto ct = bottom_up_dense(g, b, pids);
    auto c = residual_combine(g, ct, fids, pids);
    for (int l = 0; l < 3; ++l) {
        EXPECT_TRUE(bit_equal(via_lim.levels[l], g.value(c.levels[l])));
    }
}

TEST(LimForward, SingleLevelDominanceHandTrace) {
    // L=1, identity lateral, bottom-up kernel that sums the four scan
    // slices. With input >= 0, every scan dominates A = F, so
    // Ct >= 4F and C = Ct + F >= 5F.
    LimConfig cfg;
    cfg.levels = 1;
    cfg.width = 1;
    FeaturePyramid<double> f;
    Tensor4<double> base(1, 1, 2, 2);
    base.data = {0.5, 2.0, 1.0, 0.25};
    f.levels.push_back(base);

    LimParams<double> p;
    p.lateral.push_back(identity_conv1x1<double>(1));
    ConvWeights<double> vb;
    vb.kernel = Tensor4<double>(1, 4, 1, 1, 1.0);
    vb.bias = Tensor4<double>::zeros(1, 1, 1, 1);
    p.bottom_up.push_back(vb);
    p.out_proj.push_back(std::nullopt);

    FeaturePyramid<double> c = lim_forward(f, p, cfg);
    // hand values: scans of [[0.5,2],[1,0.25]]
    //   from-right: [[2,2],[1,0.25]], from-left: [[0.5,2],[1,1]]
    //   from-bottom: [[1,2],[1,0.25]], from-top: [[0.5,2],[1,2]]
    // sum = [[4,8],[4,3.5]]; C = sum + F
    Tensor4<double> expect(1, 1, 2, 2);
    expect.data = {4.0 + 0.5, 8.0 + 2.0, 4.0 + 1.0, 3.5 + 0.25};
    EXPECT_TRUE(bit_equal(c.levels[0], expect));
    for (std::size_t i = 0; i < base.size(); ++i) {
        EXPECT_GE(c.levels[0].data[i], 5.0 * base.data[i]);
    }
}

TEST(LimForward, BpOnlyAgreesWithMaxFuseOnConstantMaps) {
    // BA is the identity on fully constant maps, so with shared d->d
    // projections the BP-only and full/max-fuse pipelines coincide.
    LimConfig bp;
    bp.levels = 2;
    bp.width = 2;
    bp.ablation = Ablation::BpOnly;
    LimConfig fullmax = bp;
    fullmax.ablation = Ablation::Full;
    fullmax.ba_mode = BaMode::MaxFuse;

    FeaturePyramid<double> f;
    f.levels.push_back(Tensor4<double>(1, 2, 4, 4, 1.5));
    f.levels.push_back(Tensor4<double>(1, 2, 2, 2, -0.75));
    auto p = make_lim_params<double>({2, 2}, 2, 2, 11);  // non-zero d->d projections

    FeaturePyramid<double> c_bp = lim_forward(f, p, bp);
    FeaturePyramid<double> c_mf = lim_forward(f, p, fullmax);
    for (int l = 0; l < 2; ++l) EXPECT_TRUE(bit_equal(c_bp.levels[l], c_mf.levels[l]));
}

TEST(LimForward, DeterministicReplay) {
    Rng rng(4);
    LimConfig cfg;
    cfg.levels = 2;
    cfg.width = 2;
    FeaturePyramid<double> f = random_pyramid(rng, 2, 2, 4, 4);
    auto p = make_lim_params<double>({2, 2}, 2, 8, 13);
    EXPECT_TRUE(bit_equal(lim_forward(f, p, cfg).levels[0], lim_forward(f, p, cfg).levels[0]));
}

TEST(LimForward, ConfigPyramidInconsistencyRejected) {
    Rng rng(5);
    LimConfig cfg;
    cfg.levels = 3;
    cfg.width = 2;
    FeaturePyramid<double> f = random_pyramid(rng, 2, 2, 4, 4);  // only 2 levels
    auto p = make_lim_params<double>(cfg, {2, 2, 2}, 17);
    EXPECT_THROW(lim_forward(f, p, cfg), std::invalid_argument);
}

TEST(LimForward, FreshParamsActAsIdentityResidual) {
    // config-built params zero the projection feeding the residual, so an
    // untrained module passes backbone features through unchanged
    Rng rng(6);
    for (Ablation ab : {Ablation::SpOnly, Ablation::BpOnly, Ablation::Full}) {
        LimConfig cfg;
        cfg.levels = 3;
        cfg.width = 2;
        cfg.ablation = ab;
        FeaturePyramid<double> f = random_pyramid(rng, 3, 2, 8, 8);
        auto p = make_lim_params<double>(cfg, {2, 2, 2}, 31);
        FeaturePyramid<double> c = lim_forward(f, p, cfg);
        for (int l = 0; l < 3; ++l) {
            EXPECT_TRUE(bit_equal(c.levels[l], f.levels[l])) << ablation_name(ab) << " level " << l;
        }
    }
}

TEST(GradCheck, LimForwardEndToEnd) {
    // full pipeline at L=2, d=2 on a 6x6 base; the acceptance suite runs
    // the larger L=2, d=4, 8x8 configuration.
    GradCheckOptions opt;
    Rng rng(110);
    LimConfig cfg;
    cfg.levels = 2;
    cfg.width = 2;
    double worst = 0.0;
    for (int inst = 0; inst < 5; ++inst) {
        auto draw = [&](Rng& r) {
            std::vector<Tensor4<double>> in;
            in.push_back(rand_separated(r, 1, 2, 6, 6, 0.05));
            in.push_back(rand_separated(r, 1, 2, 3, 3, 0.05));
            for (int l = 0; l < 2; ++l) {
                in.push_back(rand_tensor(r, 2, 2, 1, 1));  // lateral kernel
                in.push_back(rand_tensor(r, 1, 2, 1, 1));  // lateral bias
                in.push_back(rand_tensor(r, 2, 8, 1, 1));  // bottom-up kernel (4d -> d)
                in.push_back(rand_tensor(r, 1, 2, 1, 1));  // bottom-up bias
            }
            return in;
        };
        auto build = [&](Graph<double>& g, const std::vector<Tensor4<double>>& in) {
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
        };
        worst = std::max(worst, gradcheck_instance(draw, build, rng, opt));
    }
    EXPECT_LT(worst, 1e-4);
}
