#include <gtest/gtest.h>

#include <sstream>

#include "lim/eval.hpp"
#include "lim/rng.hpp"

using namespace lim;

namespace {

BoundingBox box(double x1, double y1, double x2, double y2) { return {x1, y1, x2, y2}; }

Detection det(const std::string& img, const std::string& cat, double score, BoundingBox b) {
    return Detection{img, cat, score, b};
}

Annotation ann(const std::string& img, const std::string& cat, BoundingBox b) {
    return Annotation{img, cat, b};
}

}  // namespace

TEST(Iou, IdenticalDisjointAndHandCase) {
    EXPECT_DOUBLE_EQ(iou(box(0, 0, 10, 10), box(0, 0, 10, 10)), 1.0);
    EXPECT_DOUBLE_EQ(iou(box(0, 0, 10, 10), box(20, 20, 30, 30)), 0.0);
    // intersection 5x10=50, union 100+100-50=150
    EXPECT_NEAR(iou(box(0, 0, 10, 10), box(5, 0, 15, 10)), 1.0 / 3.0, 1e-12);
}

TEST(Iou, SymmetricAndOneOnlyForIdentical) {
    Rng rng(1);
    for (int i = 0; i < 50; ++i) {
        BoundingBox a = box(rng.uniform(0, 50), rng.uniform(0, 50), rng.uniform(51, 100),
                            rng.uniform(51, 100));
        BoundingBox b = box(rng.uniform(0, 50), rng.uniform(0, 50), rng.uniform(51, 100),
                            rng.uniform(51, 100));
        EXPECT_DOUBLE_EQ(iou(a, b), iou(b, a));
        if (iou(a, b) == 1.0) {
            EXPECT_DOUBLE_EQ(a.x1, b.x1);
            EXPECT_DOUBLE_EQ(a.y2, b.y2);
        }
    }
}

TEST(ParseAnnotations, BasicAndEmpty) {
    std::istringstream is("img1 laptop 10 10 50 40\n");
    auto r = parse_annotation_lines(is);
    ASSERT_EQ(r.annotations.size(), 1u);
    EXPECT_TRUE(r.errors.empty());
    EXPECT_EQ(r.annotations[0].image, "img1");
    EXPECT_EQ(r.annotations[0].category, "laptop");
    EXPECT_DOUBLE_EQ(r.annotations[0].box.x2, 50.0);

    std::istringstream empty("");
    auto r2 = parse_annotation_lines(empty);
    EXPECT_TRUE(r2.annotations.empty());
    EXPECT_TRUE(r2.errors.empty());
}

TEST(ParseAnnotations, MalformedLinesKeepOthers) {
    std::istringstream is(
        "img1 a 0 0 10 10\n"
        "img1 a 5 5 5 9\n"       // x1 == x2
        "img2 b 0 0 nope 10\n"   // bad coordinate
        "img2 b 1 1 2\n"         // wrong field count
        "img3 c 2 2 8 8\n");
    auto r = parse_annotation_lines(is);
    EXPECT_EQ(r.annotations.size(), 2u);
    ASSERT_EQ(r.errors.size(), 3u);
    EXPECT_EQ(r.errors[0].line, 2);
    EXPECT_EQ(r.errors[1].line, 3);
    EXPECT_EQ(r.errors[2].line, 4);
}

TEST(ParseAnnotations, UnknownCategoryDiagnosed) {
    std::istringstream is("img1 dragon 0 0 4 4\nimg1 laptop 0 0 4 4\n");
    auto r = parse_annotation_lines(is, {"laptop", "phone"});
    EXPECT_EQ(r.annotations.size(), 1u);
    ASSERT_EQ(r.errors.size(), 1u);
    EXPECT_EQ(r.errors[0].line, 1);
    EXPECT_NE(r.errors[0].message.find("dragon"), std::string::npos);
}

TEST(AveragePrecision, PerfectSingleDetection) {
    auto r = average_precision({det("i", "c", 0.9, box(0, 0, 10, 10))},
                               {ann("i", "c", box(1, 0, 11, 10))});  // IoU 9/11 ~ 0.82
    EXPECT_DOUBLE_EQ(r.ap, 1.0);
    EXPECT_FALSE(r.no_ground_truth);
}

TEST(AveragePrecision, NoDetectionsGivesZero) {
    auto r = average_precision({}, {ann("i", "c", box(0, 0, 10, 10))});
    EXPECT_DOUBLE_EQ(r.ap, 0.0);
}

TEST(AveragePrecision, HandComputedTwoDetectionCase) {
    // higher-scored detection misses (IoU 0), lower-scored one hits:
    // PR points (0,0) then (1, 0.5) -> all-points AP = 0.5
    std::vector<Detection> dets = {det("i", "c", 0.9, box(50, 50, 60, 60)),
                                   det("i", "c", 0.5, box(0, 0, 10, 10))};
    std::vector<Annotation> gts = {ann("i", "c", box(0, 0, 10, 10))};
    auto r = average_precision(dets, gts);
    EXPECT_DOUBLE_EQ(r.ap, 0.5);
}

TEST(AveragePrecision, ZeroGroundTruthsFlagged) {
    auto r = average_precision({det("i", "c", 0.9, box(0, 0, 10, 10))}, {});
    EXPECT_DOUBLE_EQ(r.ap, 0.0);
    EXPECT_TRUE(r.no_ground_truth);
}

TEST(AveragePrecision, MatchingIsPerImage) {
    // same coordinates, different image: no match
    auto r = average_precision({det("a", "c", 0.9, box(0, 0, 10, 10))},
                               {ann("b", "c", box(0, 0, 10, 10))});
    EXPECT_DOUBLE_EQ(r.ap, 0.0);
}

TEST(AveragePrecision, OrderInvariantForDistinctScores) {
    Rng rng(3);
    std::vector<Detection> dets;
    std::vector<Annotation> gts;
    for (int i = 0; i < 8; ++i) {
        const double x = rng.uniform(0, 100), y = rng.uniform(0, 100);
        gts.push_back(ann("i", "c", box(x, y, x + 10, y + 10)));
        dets.push_back(det("i", "c", 0.1 + 0.1 * i,
                           box(x + rng.uniform(-3, 3), y + rng.uniform(-3, 3), x + 10, y + 10)));
    }
    auto base = average_precision(dets, gts).ap;
    std::vector<Detection> shuffled = dets;
    rng.shuffle(shuffled);
    EXPECT_DOUBLE_EQ(average_precision(shuffled, gts).ap, base);
}

TEST(AveragePrecision, RemovingFalsePositiveNeverHurts) {
    Rng rng(4);
    for (int trial = 0; trial < 30; ++trial) {
        std::vector<Annotation> gts;
        std::vector<Detection> dets;
        for (int i = 0; i < 4; ++i) {
            const double x = 20.0 * i;
            gts.push_back(ann("i", "c", box(x, 0, x + 10, 10)));
            if (rng.next_double() < 0.7) {
                dets.push_back(det("i", "c", rng.next_double(), box(x, 0, x + 10, 10)));
            }
        }
        // one guaranteed false positive far away from every GT
        dets.push_back(det("i", "c", rng.next_double(), box(500, 500, 510, 510)));
        const double with_fp = average_precision(dets, gts).ap;
        dets.pop_back();
        const double without_fp = dets.empty() ? 0.0 : average_precision(dets, gts).ap;
        EXPECT_GE(without_fp + 1e-12, with_fp);
    }
}

TEST(MeanAp, UnweightedMean) {
    EXPECT_DOUBLE_EQ(mean_ap({0.7}), 0.7);
    EXPECT_DOUBLE_EQ(mean_ap({1.0, 0.0}), 0.5);
    EXPECT_NEAR(mean_ap({0.8, 0.6, 0.7}), 0.7, 1e-12);
    EXPECT_THROW(mean_ap({}), std::invalid_argument);
}

TEST(ClassifySize, ThresholdTable) {
    // 30x30 on 1000x1000 -> ratio 0.0009 -> Small
    EXPECT_EQ(classify_size(box(0, 0, 30, 30), 1000, 1000), SizeClass::Small);
    // ratio 0.0015 -> Medium
    EXPECT_EQ(classify_size(box(0, 0, 50, 30), 1000, 1000), SizeClass::Medium);
    // ratio 0.003 -> Large
    EXPECT_EQ(classify_size(box(0, 0, 60, 50), 1000, 1000), SizeClass::Large);
}

TEST(ClassifySize, BoundariesAreStrictlyMedium) {
    // exactly 0.1% and 0.2% of a 1000x1000 image
    EXPECT_EQ(classify_size(box(0, 0, 40, 25), 1000, 1000), SizeClass::Medium);   // 0.001
    EXPECT_EQ(classify_size(box(0, 0, 40, 50), 1000, 1000), SizeClass::Medium);   // 0.002
    EXPECT_EQ(classify_size(box(0, 0, 40, 24.999), 1000, 1000), SizeClass::Small);
    EXPECT_EQ(classify_size(box(0, 0, 40, 50.001), 1000, 1000), SizeClass::Large);
}

TEST(ClassifySize, PartitionsEveryBox) {
    Rng rng(5);
    for (int i = 0; i < 100; ++i) {
        BoundingBox b = box(0, 0, rng.uniform(1, 100), rng.uniform(1, 100));
        const SizeClass s = classify_size(b, 1000, 1000);
        EXPECT_TRUE(s == SizeClass::Small || s == SizeClass::Medium || s == SizeClass::Large);
    }
}

TEST(DatasetStats, FixtureHistogramAndMean) {
    std::vector<Annotation> anns = {
        ann("a", "x", box(0, 0, 5, 5)),
        ann("b", "x", box(0, 0, 5, 5)),
        ann("b", "y", box(0, 0, 5, 5)),
        ann("c", "y", box(0, 0, 5, 5)),
        ann("c", "y", box(0, 0, 5, 5)),
        ann("c", "x", box(0, 0, 5, 5)),
    };
    auto r = dataset_stats(anns);
    EXPECT_EQ(r.instances_per_image_histogram[1], 1);
    EXPECT_EQ(r.instances_per_image_histogram[2], 1);
    EXPECT_EQ(r.instances_per_image_histogram[3], 1);
    EXPECT_TRUE(r.mean_defined);
    EXPECT_DOUBLE_EQ(r.mean_instances_per_image, 2.0);
    EXPECT_EQ(r.per_category["x"], 3);
    EXPECT_EQ(r.per_category["y"], 3);
}

TEST(DatasetStats, EmptyInputFlagsUndefinedMean) {
    auto r = dataset_stats({});
    EXPECT_FALSE(r.mean_defined);
    EXPECT_EQ(r.image_count, 0);
    EXPECT_NE(r.to_table().find("undefined"), std::string::npos);
    EXPECT_NE(r.to_kv().find("mean_instances_per_image = undefined"), std::string::npos);
}

TEST(DatasetStats, SizeClassCountsPerCategory) {
    std::map<std::string, ImageDims> dims;
    dims["a"] = {1000, 1000};
    std::vector<Annotation> anns = {
        ann("a", "x", box(0, 0, 10, 10)),    // ratio 1e-4 small
        ann("a", "x", box(0, 0, 40, 40)),    // 0.0016 medium
        ann("a", "x", box(0, 0, 100, 100)),  // 0.01 large
    };
    auto r = dataset_stats(anns, dims);
    EXPECT_EQ(r.size_by_category["x"][0], 1);
    EXPECT_EQ(r.size_by_category["x"][1], 1);
    EXPECT_EQ(r.size_by_category["x"][2], 1);
    const std::string kv = r.to_kv();
    EXPECT_NE(kv.find("size.x.small = 1"), std::string::npos);
}
