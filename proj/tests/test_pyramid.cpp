#include <gtest/gtest.h>

#include "lim/gradcheck.hpp"
#include "lim/pyramid.hpp"

using namespace lim;

namespace {

// identity projections at width `c` for every level
LimParams<double> identity_params(int levels, int c) {
    LimParams<double> p;
    for (int l = 0; l < levels; ++l) {
        p.lateral.push_back(identity_conv1x1<double>(c));
        p.bottom_up.push_back(identity_conv1x1<double>(c));
        p.out_proj.push_back(std::nullopt);
    }
    return p;
}

}  // namespace

TEST(FeaturePyramidType, ValidationCatchesBadShapes) {
    FeaturePyramid<double> p;
    p.levels.push_back(Tensor4<double>(1, 2, 4, 4, 0.0));
    p.levels.push_back(Tensor4<double>(1, 2, 2, 2, 0.0));
    EXPECT_NO_THROW(validate_pyramid(p));

    p.levels[1] = Tensor4<double>(1, 2, 3, 2, 0.0);  // not half
    EXPECT_THROW(validate_pyramid(p), std::invalid_argument);

    p.levels[1] = Tensor4<double>(2, 2, 2, 2, 0.0);  // batch mismatch
    EXPECT_THROW(validate_pyramid(p), std::invalid_argument);

    FeaturePyramid<double> odd;
    odd.levels.push_back(Tensor4<double>(1, 2, 6, 6, 0.0));
    odd.levels.push_back(Tensor4<double>(1, 2, 3, 3, 0.0));
    // base 6x6 is not divisible by 2^(L-1)=2... it is; but L=3 would need /4
    odd.levels.push_back(Tensor4<double>(1, 2, 1, 1, 0.0));
    EXPECT_THROW(validate_pyramid(odd), std::invalid_argument);
}

TEST(TopDownDense, SingleLevelIsJustProjection) {
    Rng rng(1);
    FeaturePyramid<double> f;
    f.levels.push_back(rand_tensor(rng, 1, 2, 3, 3));
    auto p = identity_params(1, 2);
    FeaturePyramid<double> a = top_down_dense(f, p);
    EXPECT_TRUE(bit_equal(a.levels[0], f.levels[0]));
}

TEST(TopDownDense, TwoLevelHandCase) {
    // F2 = 1x1 value 1, F1 = 2x2 zeros, identity V -> A1 = 2x2 ones
    FeaturePyramid<double> f;
    f.levels.push_back(Tensor4<double>::zeros(1, 1, 2, 2));
    f.levels.push_back(Tensor4<double>::ones(1, 1, 1, 1));
    auto p = identity_params(2, 1);
    FeaturePyramid<double> a = top_down_dense(f, p);
    EXPECT_TRUE(bit_equal(a.levels[1], f.levels[1]));
    EXPECT_TRUE(bit_equal(a.levels[0], Tensor4<double>::ones(1, 1, 2, 2)));
}

TEST(TopDownDense, ThreeLevelDenseDoubleCounting) {
    // Unit source at the coarsest level only. The dense sum delivers it to
    // the finest level twice: once directly (m=2) and once through the
    // middle level (m=1), so A1 is all 2.
    FeaturePyramid<double> f;
    f.levels.push_back(Tensor4<double>::zeros(1, 1, 4, 4));
    f.levels.push_back(Tensor4<double>::zeros(1, 1, 2, 2));
    f.levels.push_back(Tensor4<double>::ones(1, 1, 1, 1));
    auto p = identity_params(3, 1);
    FeaturePyramid<double> a = top_down_dense(f, p);
    EXPECT_TRUE(bit_equal(a.levels[2], Tensor4<double>::ones(1, 1, 1, 1)));
    EXPECT_TRUE(bit_equal(a.levels[1], Tensor4<double>::ones(1, 1, 2, 2)));
    EXPECT_TRUE(bit_equal(a.levels[0], Tensor4<double>(1, 1, 4, 4, 2.0)));
}

TEST(BottomUpDense, SingleLevelIsJustProjection) {
    Rng rng(2);
    FeaturePyramid<double> b;
    b.levels.push_back(rand_tensor(rng, 1, 2, 3, 3));
    auto p = identity_params(1, 2);
    FeaturePyramid<double> ct = bottom_up_dense(b, p);
    EXPECT_TRUE(bit_equal(ct.levels[0], b.levels[0]));
}

TEST(BottomUpDense, ConstantMapsWithAveragingProjection) {
    // V averages the two input channels into one; constant maps stay
    // constant through max pooling, so Ct2 = avg(B2) + avg(B1).
    LimParams<double> p;
    for (int l = 0; l < 2; ++l) {
        ConvWeights<double> v;
        v.kernel = Tensor4<double>(1, 2, 1, 1, 0.5);
        v.bias = Tensor4<double>::zeros(1, 1, 1, 1);
        p.lateral.push_back(v);
        p.bottom_up.push_back(v);
        p.out_proj.push_back(std::nullopt);
    }
    FeaturePyramid<double> b;
    Tensor4<double> b1(1, 2, 4, 4);
    for (int i = 0; i < 16; ++i) {
        b1.plane(0, 0)[i] = 3.0;
        b1.plane(0, 1)[i] = 5.0;
    }
    Tensor4<double> b2(1, 2, 2, 2);
    for (int i = 0; i < 4; ++i) {
        b2.plane(0, 0)[i] = 1.0;
        b2.plane(0, 1)[i] = 2.0;
    }
    b.levels = {b1, b2};
    FeaturePyramid<double> ct = bottom_up_dense(b, p);
    for (double v : ct.levels[0].data) EXPECT_DOUBLE_EQ(v, 4.0);        // avg(3,5)
    for (double v : ct.levels[1].data) EXPECT_DOUBLE_EQ(v, 1.5 + 4.0);  // avg(1,2) + pooled 4
}

TEST(BottomUpDense, MirrorsTopDownHandCase) {
    // Unit source at the finest level reaches the coarsest level twice.
    FeaturePyramid<double> b;
    b.levels.push_back(Tensor4<double>::ones(1, 1, 4, 4));
    b.levels.push_back(Tensor4<double>::zeros(1, 1, 2, 2));
    b.levels.push_back(Tensor4<double>::zeros(1, 1, 1, 1));
    auto p = identity_params(3, 1);
    FeaturePyramid<double> ct = bottom_up_dense(b, p);
    EXPECT_TRUE(bit_equal(ct.levels[0], Tensor4<double>::ones(1, 1, 4, 4)));
    EXPECT_TRUE(bit_equal(ct.levels[1], Tensor4<double>::ones(1, 1, 2, 2)));
    EXPECT_TRUE(bit_equal(ct.levels[2], Tensor4<double>(1, 1, 1, 1, 2.0)));
}

TEST(ResidualCombine, ZeroCasesAndScalarAddition) {
    Rng rng(3);
    FeaturePyramid<double> backbone;
    backbone.levels.push_back(rand_tensor(rng, 1, 2, 2, 2));
    auto p = identity_params(1, 2);

    FeaturePyramid<double> zeros;
    zeros.levels.push_back(Tensor4<double>::zeros(1, 2, 2, 2));
    EXPECT_TRUE(bit_equal(residual_combine(zeros, backbone, p).levels[0], backbone.levels[0]));

    FeaturePyramid<double> zb;
    zb.levels.push_back(Tensor4<double>::zeros(1, 2, 2, 2));
    FeaturePyramid<double> ct;
    ct.levels.push_back(rand_tensor(rng, 1, 2, 2, 2));
    EXPECT_TRUE(bit_equal(residual_combine(ct, zb, p).levels[0], ct.levels[0]));

    FeaturePyramid<double> one, two;
    one.levels.push_back(Tensor4<double>(1, 1, 1, 1, 1.0));
    two.levels.push_back(Tensor4<double>(1, 1, 1, 1, 2.0));
    auto p1 = identity_params(1, 1);
    EXPECT_DOUBLE_EQ(residual_combine(one, two, p1).levels[0].data[0], 3.0);
}

TEST(ResidualCombine, SpatialMismatchRejected) {
    FeaturePyramid<double> ct, backbone;
    ct.levels.push_back(Tensor4<double>::zeros(1, 1, 2, 2));
    backbone.levels.push_back(Tensor4<double>::zeros(1, 1, 4, 4));
    auto p = identity_params(1, 1);
    EXPECT_THROW(residual_combine(ct, backbone, p), std::invalid_argument);
}

TEST(ResidualCombine, ChannelMismatchUsesOutputProjection) {
    // backbone has 3 channels, pyramid width is 1: the residual needs the learned
    // 1x1 output projection
    FeaturePyramid<double> ct, backbone;
    ct.levels.push_back(Tensor4<double>::zeros(1, 1, 2, 2));
    backbone.levels.push_back(Tensor4<double>(1, 3, 2, 2, 1.0));
    LimParams<double> p;
    p.lateral.push_back(identity_conv1x1<double>(1));
    p.bottom_up.push_back(identity_conv1x1<double>(1));
    ConvWeights<double> proj;
    proj.kernel = Tensor4<double>(1, 3, 1, 1, 2.0);
    proj.bias = Tensor4<double>::zeros(1, 1, 1, 1);
    p.out_proj.push_back(proj);
    FeaturePyramid<double> c = residual_combine(ct, backbone, p);
    for (double v : c.levels[0].data) EXPECT_DOUBLE_EQ(v, 6.0);

    LimParams<double> noproj = identity_params(1, 1);
    EXPECT_THROW(residual_combine(ct, backbone, noproj), std::invalid_argument);
}

TEST(Pathways, LinearInBackboneWhenProjectionsLinear) {
    Rng rng(5);
    FeaturePyramid<double> f;
    f.levels.push_back(rand_tensor(rng, 1, 2, 4, 4));
    f.levels.push_back(rand_tensor(rng, 1, 2, 2, 2));
    auto p = make_lim_params<double>({2, 2}, 2, 2, 99);
    // zero biases keep V strictly linear
    for (auto& w : p.lateral) w.bias.fill(0.0);
    FeaturePyramid<double> a1 = top_down_dense(f, p);
    FeaturePyramid<double> f2 = f;
    for (auto& t : f2.levels)
        for (auto& v : t.data) v *= 3.0;
    FeaturePyramid<double> a2 = top_down_dense(f2, p);
    for (int l = 0; l < 2; ++l)
        for (std::size_t i = 0; i < a1.levels[l].size(); ++i)
            EXPECT_NEAR(a2.levels[l].data[i], 3.0 * a1.levels[l].data[i], 1e-9);
}

// --- gradient checks ---------------------------------------------------------

namespace {

// stages: inputs = [F1..FL, k1, b1, ..., kL, bL] as leaves, in order
LimParamIds stage_param_leaves(Graph<double>& g, const std::vector<Tensor4<double>>& in, int L,
                               int first) {
    LimParamIds ids;
    for (int l = 0; l < L; ++l) {
        ids.lateral.push_back(ConvWeightIds{g.leaf(in[first + 2 * l]),
                                            g.leaf(in[first + 2 * l + 1])});
        ids.bottom_up.push_back(ids.lateral.back());
        ids.out_proj.push_back(std::nullopt);
    }
    return ids;
}

}  // namespace

TEST(GradCheck, TopDownDenseMatchesFiniteDifferences) {
    GradCheckOptions opt;
    Rng rng(107);
    double worst = 0.0;
    for (int inst = 0; inst < 20; ++inst) {
        auto draw = [&](Rng& r) {
            std::vector<Tensor4<double>> in;
            in.push_back(rand_tensor(r, 1, 2, 4, 4));
            in.push_back(rand_tensor(r, 1, 2, 2, 2));
            for (int l = 0; l < 2; ++l) {
                in.push_back(rand_tensor(r, 2, 2, 1, 1));
                in.push_back(rand_tensor(r, 1, 2, 1, 1));
            }
            return in;
        };
        auto build = [&](Graph<double>& g, const std::vector<Tensor4<double>>& in) {
            PyramidIds f;
            f.levels = {g.leaf(in[0]), g.leaf(in[1])};
            auto p = stage_param_leaves(g, in, 2, 2);
            auto a = top_down_dense(g, f, p);
            return g_concat_channels(g, {a.levels[0], g_upsample_nearest(g, a.levels[1], 1)});
        };
        worst = std::max(worst, gradcheck_instance(draw, build, rng, opt));
    }
    EXPECT_LT(worst, 1e-4);
}

TEST(GradCheck, BottomUpDenseMatchesFiniteDifferences) {
    GradCheckOptions opt;
    Rng rng(108);
    double worst = 0.0;
    for (int inst = 0; inst < 20; ++inst) {
        auto draw = [&](Rng& r) {
            std::vector<Tensor4<double>> in;
            in.push_back(rand_separated(r, 1, 2, 4, 4, 0.05));
            in.push_back(rand_separated(r, 1, 2, 2, 2, 0.05));
            for (int l = 0; l < 2; ++l) {
                in.push_back(rand_tensor(r, 2, 2, 1, 1));
                in.push_back(rand_tensor(r, 1, 2, 1, 1));
            }
            return in;
        };
        auto build = [&](Graph<double>& g, const std::vector<Tensor4<double>>& in) {
            PyramidIds b;
            b.levels = {g.leaf(in[0]), g.leaf(in[1])};
            auto p = stage_param_leaves(g, in, 2, 2);
            auto ct = bottom_up_dense(g, b, p);
            return g_concat_channels(g, {g_upsample_nearest(g, ct.levels[1], 1), ct.levels[0]});
        };
        worst = std::max(worst, gradcheck_instance(draw, build, rng, opt));
    }
    EXPECT_LT(worst, 1e-4);
}

TEST(GradCheck, ResidualCombineMatchesFiniteDifferences) {
    GradCheckOptions opt;
    Rng rng(109);
    double worst = 0.0;
    for (int inst = 0; inst < 20; ++inst) {
        auto draw = [&](Rng& r) {
            std::vector<Tensor4<double>> in;
            in.push_back(rand_tensor(r, 1, 2, 3, 3));  // ct level
            in.push_back(rand_tensor(r, 1, 3, 3, 3));  // backbone level (3 ch -> proj)
            in.push_back(rand_tensor(r, 2, 3, 1, 1));  // projection kernel
            in.push_back(rand_tensor(r, 1, 2, 1, 1));  // projection bias
            return in;
        };
        auto build = [&](Graph<double>& g, const std::vector<Tensor4<double>>& in) {
            PyramidIds ct, f;
            ct.levels = {g.leaf(in[0])};
            f.levels = {g.leaf(in[1])};
            LimParamIds p;
            p.lateral.push_back(ConvWeightIds{-1, -1});
            p.bottom_up.push_back(ConvWeightIds{-1, -1});
            p.out_proj.push_back(ConvWeightIds{g.leaf(in[2]), g.leaf(in[3])});
            return residual_combine(g, ct, f, p).levels[0];
        };
        worst = std::max(worst, gradcheck_instance(draw, build, rng, opt));
    }
    EXPECT_LT(worst, 1e-4);
}
