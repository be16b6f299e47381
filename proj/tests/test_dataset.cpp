#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ssanet/dataset.hpp"

using namespace ssanet;

namespace {

SyntheticDatasetSpec small_spec(unsigned seed = 7) {
    SyntheticDatasetSpec s;
    s.classes = 4;
    s.canvas = 56;
    s.images_per_class = 10;
    s.seed = seed;
    return s;
}

bool images_equal(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    for (std::size_t i = 0; i < a.numel(); ++i)
        if (a[i] != b[i]) return false;
    return true;
}

}  // namespace

TEST_CASE("identical seed regenerates byte-identical datasets") {
    Dataset d1 = generate_dataset(small_spec());
    Dataset d2 = generate_dataset(small_spec());
    REQUIRE(d1.train.size() == d2.train.size());
    REQUIRE(d1.test.size() == d2.test.size());
    for (std::size_t i = 0; i < d1.train.size(); ++i) {
        CHECK(images_equal(d1.train[i].image, d2.train[i].image));
        CHECK(d1.train[i].label == d2.train[i].label);
        REQUIRE(d1.train[i].keypoints.size() == d2.train[i].keypoints.size());
        for (std::size_t k = 0; k < d1.train[i].keypoints.size(); ++k) {
            CHECK(d1.train[i].keypoints[k].x == d2.train[i].keypoints[k].x);
            CHECK(d1.train[i].keypoints[k].y == d2.train[i].keypoints[k].y);
        }
    }
    Dataset d3 = generate_dataset(small_spec(8));
    bool any_diff = false;
    for (std::size_t i = 0; i < d1.train.size() && !any_diff; ++i)
        any_diff = !images_equal(d1.train[i].image, d3.train[i].image);
    CHECK(any_diff);
}

TEST_CASE("split sizes: 8 classes x 200 images -> 1600/400") {
    SyntheticDatasetSpec s = small_spec();
    s.classes = 8;
    s.images_per_class = 200;
    Dataset d = generate_dataset(s);
    CHECK(d.train.size() == 1280);  // 80% of 1600
    CHECK(d.test.size() == 320);
    // totals match the 8x200 corpus
    CHECK(d.train.size() + d.test.size() == 1600);
}

TEST_CASE("keypoints lie inside the placed glyph boxes (exhaustive scan)") {
    // Keypoints are glyph centers; the glyph box is within one quadrant, so a
    // keypoint must sit strictly inside its quadrant and inside the canvas.
    Dataset d = generate_dataset(small_spec(3));
    auto scan = [&](const std::vector<LabeledImage>& split) {
        for (const auto& img : split) {
            REQUIRE(img.keypoints.size() == 2);
            const double q = static_cast<double>(img.image.dim(0)) / 2.0;
            // slot 0 -> top-left quadrant, slot 1 -> bottom-right quadrant
            CHECK(img.keypoints[0].x > 0.0);
            CHECK(img.keypoints[0].x < q);
            CHECK(img.keypoints[0].y > 0.0);
            CHECK(img.keypoints[0].y < q);
            CHECK(img.keypoints[1].x > q);
            CHECK(img.keypoints[1].x < 2.0 * q);
            CHECK(img.keypoints[1].y > q);
            CHECK(img.keypoints[1].y < 2.0 * q);
            // the glyph itself must have deposited energy near the center:
            // scan a small window around the keypoint for above-noise pixels
            for (const Point& kp : img.keypoints) {
                double peak = 0.0;
                const std::size_t cy = static_cast<std::size_t>(kp.y);
                const std::size_t cx = static_cast<std::size_t>(kp.x);
                for (std::size_t y = cy >= 4 ? cy - 4 : 0; y < std::min<std::size_t>(cy + 4, 56); ++y)
                    for (std::size_t x = cx >= 4 ? cx - 4 : 0; x < std::min<std::size_t>(cx + 4, 56);
                         ++x)
                        peak = std::max(peak, img.image.at3(y, x, 0));
                CHECK(peak > 0.2);  // glyph amplitude is >= 0.7 before resize
            }
        }
    };
    scan(d.train);
    scan(d.test);
}

TEST_CASE("invalid specs are rejected") {
    SyntheticDatasetSpec s = small_spec();
    s.canvas = 20;  // smaller than 2 * glyph_size
    CHECK_THROWS_AS(generate_dataset(s), ConfigError);
    s = small_spec();
    s.classes = 1;
    CHECK_THROWS_AS(generate_dataset(s), ConfigError);
    s = small_spec();
    s.images_per_class = 2;
    CHECK_THROWS_AS(generate_dataset(s), ConfigError);
}

TEST_CASE("rotated split transforms pixels and keypoints consistently") {
    Dataset d = generate_dataset(small_spec(11));
    auto rot = rotated_split(d.test);
    REQUIRE(rot.size() == d.test.size());
    const std::size_t N = d.test[0].image.dim(0);
    for (std::size_t i = 0; i < d.test.size(); ++i) {
        CHECK(rot[i].label == d.test[i].label);
        // pixel identity: rot90 CCW maps (y, x) -> (N-1-x, y)
        const auto& src = d.test[i].image;
        const auto& dst = rot[i].image;
        bool ok = true;
        for (std::size_t y = 0; y < N && ok; ++y)
            for (std::size_t x = 0; x < N && ok; ++x)
                ok = dst.at3(N - 1 - x, y, 0) == src.at3(y, x, 0);
        CHECK(ok);
        // keypoint (x, y) -> (y, W - x)
        for (std::size_t k = 0; k < 2; ++k) {
            CHECK(rot[i].keypoints[k].x == doctest::Approx(d.test[i].keypoints[k].y));
            CHECK(rot[i].keypoints[k].y ==
                  doctest::Approx(static_cast<double>(N) - d.test[i].keypoints[k].x));
        }
    }
}

TEST_CASE("shrunk split scales keypoints toward the center") {
    Dataset d = generate_dataset(small_spec(13));
    auto shr = shrunk_split(d.test, 0.67);
    const double N = static_cast<double>(d.test[0].image.dim(0));
    const double s = std::round(0.67 * N);
    const double off = std::floor((N - s) / 2.0);
    for (std::size_t i = 0; i < d.test.size(); ++i) {
        CHECK(shr[i].image.dim(0) == d.test[i].image.dim(0));
        for (std::size_t k = 0; k < 2; ++k) {
            CHECK(shr[i].keypoints[k].x ==
                  doctest::Approx(d.test[i].keypoints[k].x * (s / N) + off));
            CHECK(shr[i].keypoints[k].y ==
                  doctest::Approx(d.test[i].keypoints[k].y * (s / N) + off));
        }
        // corners of the shrunk image are zero padding
        CHECK(shr[i].image.at3(0, 0, 0) == 0.0);
        CHECK(shr[i].image.at3(0, d.test[i].image.dim(1) - 1, 0) == 0.0);
    }
    CHECK_THROWS_AS(shrink_pad_image(d.test[0], 1.5), ConfigError);
}

TEST_CASE("class identity is independent of placement: labels repeat per class") {
    SyntheticDatasetSpec s = small_spec(17);
    Dataset d = generate_dataset(s);
    std::vector<std::size_t> train_counts(s.classes, 0), test_counts(s.classes, 0);
    for (const auto& img : d.train) train_counts[img.label]++;
    for (const auto& img : d.test) test_counts[img.label]++;
    for (std::size_t c = 0; c < s.classes; ++c) {
        CHECK(train_counts[c] == 8);
        CHECK(test_counts[c] == 2);
    }
}
