#pragma once

#include <cmath>
#include <cstddef>
#include <random>
#include <vector>

#include "ssanet/errors.hpp"
#include "ssanet/image.hpp"
#include "ssanet/proposals.hpp"
#include "ssanet/tensor.hpp"

namespace ssanet {

// Procedural fine-grained dataset: each class is identified by two small
// glyph patterns placed with position/scale jitter and quarter-turn rotation
// on a noisy canvas. Class identity never depends on placement. Glyph centers
// are emitted as keypoints for the proposal-distance metric.

struct SyntheticDatasetSpec {
    std::size_t classes = 4;
    std::size_t canvas = 56;  // square canvas, H = W
    std::size_t images_per_class = 200;
    std::size_t glyph_size = 14;  // base size before scale jitter
    double scale_min = 0.5;
    double scale_max = 2.0;
    double noise = 0.05;  // background gaussian sigma
    unsigned seed = 0;
};

struct LabeledImage {
    Tensor image;  // canvas x canvas x 1
    std::size_t label = 0;
    std::vector<Point> keypoints;  // class-glyph centers, pixel coords
};

struct Dataset {
    std::vector<LabeledImage> train;
    std::vector<LabeledImage> test;
    std::size_t classes = 0;
    std::size_t canvas = 0;
};

namespace detail {

// Deterministic glyph bank entry; independent of the dataset seed so class
// identity is stable across dataset instances.
inline Tensor make_glyph(std::size_t id, std::size_t size) {
    std::mt19937 rng(static_cast<unsigned>(0x5A17u + id * 2654435761u));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    // coarse 4x4 binary pattern upsampled: low-frequency structure survives
    // the 0.5x-2x scale jitter
    Tensor coarse({4, 4, 1});
    for (std::size_t i = 0; i < coarse.numel(); ++i) {
        const double mask = u(rng);
        const double amp = 0.7 + 0.5 * u(rng);
        coarse[i] = mask > 0.5 ? amp : 0.0;
    }
    return bilinear_resize(coarse, size, size);
}

inline void paste_add(Tensor& canvas, const Tensor& glyph, std::size_t y0, std::size_t x0) {
    const std::size_t gh = glyph.dim(0), gw = glyph.dim(1);
    for (std::size_t y = 0; y < gh; ++y)
        for (std::size_t x = 0; x < gw; ++x) canvas.at3(y0 + y, x0 + x, 0) += glyph.at3(y, x, 0);
}

}  // namespace detail

// One image: the class's two glyphs in the TL and BR quadrants, two shared
// distractor glyphs in the other quadrants, all with independent jitter.
inline LabeledImage make_image(const SyntheticDatasetSpec& spec, std::size_t cls,
                               std::mt19937& rng) {
    const std::size_t N = spec.canvas, q = N / 2;
    LabeledImage out;
    out.label = cls;
    out.image = Tensor({N, N, 1});
    std::normal_distribution<double> noise(0.0, spec.noise);
    for (double& v : out.image.vec()) v = noise(rng);

    std::uniform_real_distribution<double> sd(spec.scale_min, spec.scale_max);
    std::uniform_int_distribution<int> rd(0, 3);

    // slot -> (glyph id, quadrant origin); slots 0,1 are the class glyphs
    const std::size_t glyph_ids[4] = {cls * 2, cls * 2 + 1, 1000, 1001};
    const std::size_t qy[4] = {0, q, 0, q};
    const std::size_t qx[4] = {0, q, q, 0};

    for (int slot = 0; slot < 4; ++slot) {
        const double s = sd(rng);
        const int rot = rd(rng);
        std::size_t gs = static_cast<std::size_t>(
            std::lround(static_cast<double>(spec.glyph_size) * s));
        gs = std::min(std::max<std::size_t>(gs, 4), q);
        std::uniform_int_distribution<std::size_t> pd(0, q - gs);
        const std::size_t y0 = qy[slot] + pd(rng);
        const std::size_t x0 = qx[slot] + pd(rng);
        Tensor glyph = rot90(bilinear_resize(detail::make_glyph(glyph_ids[slot], spec.glyph_size),
                                             gs, gs),
                             rot);
        detail::paste_add(out.image, glyph, y0, x0);
        if (slot < 2)
            out.keypoints.push_back({static_cast<double>(x0) + static_cast<double>(gs) / 2.0,
                                     static_cast<double>(y0) + static_cast<double>(gs) / 2.0});
    }
    return out;
}

// 80/20 per-class split; identical seed regenerates byte-identical tensors.
inline Dataset generate_dataset(const SyntheticDatasetSpec& spec) {
    if (spec.classes < 2) throw ConfigError("generate_dataset: need at least 2 classes");
    if (spec.canvas < 2 * spec.glyph_size)
        throw ConfigError("generate_dataset: canvas smaller than glyph placement grid");
    if (spec.images_per_class < 5)
        throw ConfigError("generate_dataset: need at least 5 images per class");

    Dataset ds;
    ds.classes = spec.classes;
    ds.canvas = spec.canvas;
    std::mt19937 rng(spec.seed);
    const std::size_t ntr = (spec.images_per_class * 4) / 5;
    for (std::size_t cls = 0; cls < spec.classes; ++cls)
        for (std::size_t i = 0; i < spec.images_per_class; ++i) {
            LabeledImage img = make_image(spec, cls, rng);
            (i < ntr ? ds.train : ds.test).push_back(std::move(img));
        }
    return ds;
}

// Whole-image quarter turn (counterclockwise); keypoint (x, y) -> (y, W - x).
inline LabeledImage rotate_image(const LabeledImage& src) {
    LabeledImage out;
    out.label = src.label;
    out.image = rot90(src.image, 1);
    const double W = static_cast<double>(src.image.dim(1));
    for (const Point& k : src.keypoints) out.keypoints.push_back({k.y, W - k.x});
    return out;
}

// Shrink to `factor` of the canvas, then zero-pad back (centered).
inline LabeledImage shrink_pad_image(const LabeledImage& src, double factor = 0.67) {
    if (factor <= 0.0 || factor >= 1.0) throw ConfigError("shrink_pad_image: factor in (0,1)");
    const std::size_t N = src.image.dim(0);
    const std::size_t s =
        std::max<std::size_t>(4, static_cast<std::size_t>(std::lround(factor * static_cast<double>(N))));
    Tensor small = bilinear_resize(src.image, s, s);
    const std::size_t off = (N - s) / 2;
    LabeledImage out;
    out.label = src.label;
    out.image = Tensor({N, N, 1});
    for (std::size_t y = 0; y < s; ++y)
        for (std::size_t x = 0; x < s; ++x)
            out.image.at3(off + y, off + x, 0) = small.at3(y, x, 0);
    const double f = static_cast<double>(s) / static_cast<double>(N);
    const double o = static_cast<double>(off);
    for (const Point& k : src.keypoints) out.keypoints.push_back({k.x * f + o, k.y * f + o});
    return out;
}

inline std::vector<LabeledImage> rotated_split(const std::vector<LabeledImage>& split) {
    std::vector<LabeledImage> out;
    out.reserve(split.size());
    for (const auto& img : split) out.push_back(rotate_image(img));
    return out;
}

inline std::vector<LabeledImage> shrunk_split(const std::vector<LabeledImage>& split,
                                              double factor = 0.67) {
    std::vector<LabeledImage> out;
    out.reserve(split.size());
    for (const auto& img : split) out.push_back(shrink_pad_image(img, factor));
    return out;
}

}  // namespace ssanet
