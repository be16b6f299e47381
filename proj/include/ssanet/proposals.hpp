#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "ssanet/errors.hpp"
#include "ssanet/tensor.hpp"

namespace ssanet {

struct Point {
    double x = 0.0;
    double y = 0.0;
};

inline double point_distance(const Point& a, const Point& b) {
    return std::hypot(a.x - b.x, a.y - b.y);
}

struct Box {
    double x1 = 0.0, y1 = 0.0, x2 = 0.0, y2 = 0.0;

    double width() const { return x2 - x1; }
    double height() const { return y2 - y1; }
    double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
    Point center() const { return {(x1 + x2) / 2.0, (y1 + y2) / 2.0}; }

    Box clipped(double img_w, double img_h) const {
        return {std::clamp(x1, 0.0, img_w), std::clamp(y1, 0.0, img_h),
                std::clamp(x2, 0.0, img_w), std::clamp(y2, 0.0, img_h)};
    }

    // Corner order: TL, TR, BL, BR.
    Point corner(int idx) const {
        switch (idx) {
            case 0: return {x1, y1};
            case 1: return {x2, y1};
            case 2: return {x1, y2};
            default: return {x2, y2};
        }
    }
};

inline double iou(const Box& a, const Box& b) {
    const double ix = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
    const double iy = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
    const double inter = ix * iy;
    const double uni = a.area() + b.area() - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

struct AnchorConfig {
    std::vector<double> scales;         // side lengths in feature-map units
    std::vector<double> aspect_ratios;  // w/h
    std::size_t feature_w = 0;
    std::size_t feature_h = 0;
    double stride = 1.0;  // image pixels per feature cell
    double image_w = 0.0;
    double image_h = 0.0;
};

// One box per (cell, scale, ratio), cell-major (row-major over cells), then
// scale, then ratio. Area-preserving ratio convention:
// width = scale*sqrt(ratio), height = scale/sqrt(ratio).
inline std::vector<Box> generate_anchors(const AnchorConfig& cfg) {
    if (cfg.scales.empty() || cfg.aspect_ratios.empty())
        throw ConfigError("generate_anchors: scales and aspect_ratios must be nonempty");
    for (double s : cfg.scales)
        if (s <= 0.0) throw ConfigError("generate_anchors: nonpositive scale");
    for (double r : cfg.aspect_ratios)
        if (r <= 0.0) throw ConfigError("generate_anchors: nonpositive aspect ratio");
    std::vector<Box> out;
    out.reserve(cfg.feature_w * cfg.feature_h * cfg.scales.size() * cfg.aspect_ratios.size());
    for (std::size_t cy = 0; cy < cfg.feature_h; ++cy)
        for (std::size_t cx = 0; cx < cfg.feature_w; ++cx) {
            const double px = (static_cast<double>(cx) + 0.5) * cfg.stride;
            const double py = (static_cast<double>(cy) + 0.5) * cfg.stride;
            for (double s : cfg.scales)
                for (double r : cfg.aspect_ratios) {
                    const double w = s * cfg.stride * std::sqrt(r);
                    const double h = s * cfg.stride / std::sqrt(r);
                    Box b{px - w / 2.0, py - h / 2.0, px + w / 2.0, py + h / 2.0};
                    out.push_back(b.clipped(cfg.image_w, cfg.image_h));
                }
        }
    return out;
}

struct ScoredBox {
    Box box;
    double score = 0.0;
};

// Greedy descending-score suppression. Ties broken by box coordinates so the
// result is invariant to input order.
inline std::vector<ScoredBox> nms(std::vector<ScoredBox> boxes, double iou_threshold) {
    if (iou_threshold <= 0.0 || iou_threshold >= 1.0)
        throw ConfigError("nms: iou_threshold must be in (0, 1)");
    auto key_less = [](const ScoredBox& a, const ScoredBox& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.box.x1 != b.box.x1) return a.box.x1 < b.box.x1;
        if (a.box.y1 != b.box.y1) return a.box.y1 < b.box.y1;
        if (a.box.x2 != b.box.x2) return a.box.x2 < b.box.x2;
        return a.box.y2 < b.box.y2;
    };
    std::sort(boxes.begin(), boxes.end(), key_less);
    std::vector<ScoredBox> kept;
    for (const ScoredBox& cand : boxes) {
        bool suppressed = false;
        for (const ScoredBox& k : kept)
            if (iou(cand.box, k.box) > iou_threshold) {
                suppressed = true;
                break;
            }
        if (!suppressed) kept.push_back(cand);
    }
    return kept;
}

struct Proposal {
    Box box;
    double score = 0.0;
    Tensor feature;             // region feature map (resized crop)
    Point psi;                  // corner farthest from the batch center
    Point eta;                  // corner nearest to the batch center
    bool vertices_set = false;
    std::size_t region_index = 0;  // j, assigned by score rank (0-based)
    std::size_t image_id = 0;

    Point size() const { return {box.width(), box.height()}; }
};

// Rank by scorer output, keep K, assign region index j by rank. Ties broken
// by box coordinates (input-order invariant).
inline std::vector<Proposal> select_top_k(std::vector<Proposal> proposals,
                                          const std::function<double(const Proposal&)>& scorer,
                                          std::size_t K) {
    if (proposals.size() < K)
        throw SelectionError("select_top_k: need " + std::to_string(K) + " proposals, have " +
                             std::to_string(proposals.size()));
    for (Proposal& p : proposals) p.score = scorer(p);
    std::sort(proposals.begin(), proposals.end(), [](const Proposal& a, const Proposal& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.box.x1 != b.box.x1) return a.box.x1 < b.box.x1;
        if (a.box.y1 != b.box.y1) return a.box.y1 < b.box.y1;
        if (a.box.x2 != b.box.x2) return a.box.x2 < b.box.x2;
        return a.box.y2 < b.box.y2;
    });
    proposals.resize(K);
    for (std::size_t j = 0; j < K; ++j) proposals[j].region_index = j;
    return proposals;
}

// Batch center = mean of the selected proposal centers. Per proposal, psi is
// the corner farthest from that center and eta the nearest; the distance to a
// corner is coordinate-separable, so choosing the farther side per axis (ties
// toward the lower corner index, i.e. x1/y1) makes psi and eta opposite
// corners by construction.
inline void assign_vertices(std::vector<Proposal>& proposals) {
    if (proposals.empty()) return;
    Point c{0.0, 0.0};
    for (const Proposal& p : proposals) {
        const Point pc = p.box.center();
        c.x += pc.x;
        c.y += pc.y;
    }
    c.x /= static_cast<double>(proposals.size());
    c.y /= static_cast<double>(proposals.size());
    for (Proposal& p : proposals) {
        const bool far_x2 = std::fabs(c.x - p.box.x2) > std::fabs(c.x - p.box.x1);
        const bool far_y2 = std::fabs(c.y - p.box.y2) > std::fabs(c.y - p.box.y1);
        p.psi = {far_x2 ? p.box.x2 : p.box.x1, far_y2 ? p.box.y2 : p.box.y1};
        p.eta = {far_x2 ? p.box.x1 : p.box.x2, far_y2 ? p.box.y1 : p.box.y2};
        p.vertices_set = true;
    }
}

// Per proposal, Euclidean distance from the box center to the nearest key point.
inline std::vector<double> center_keypoint_distance(const std::vector<Proposal>& proposals,
                                                    const std::vector<Point>& keypoints) {
    if (keypoints.empty())
        throw ContractError("center_keypoint_distance: empty keypoint set");
    std::vector<double> out;
    out.reserve(proposals.size());
    for (const Proposal& p : proposals) {
        const Point c = p.box.center();
        double best = point_distance(c, keypoints[0]);
        for (std::size_t i = 1; i < keypoints.size(); ++i)
            best = std::min(best, point_distance(c, keypoints[i]));
        out.push_back(best);
    }
    return out;
}

// Dataset-level mean distance per region index j over many images.
inline std::vector<double> mean_distance_per_region(
    const std::vector<std::vector<Proposal>>& per_image_proposals,
    const std::vector<std::vector<Point>>& per_image_keypoints, std::size_t K) {
    std::vector<double> sums(K, 0.0);
    std::vector<std::size_t> counts(K, 0);
    for (std::size_t i = 0; i < per_image_proposals.size(); ++i) {
        const auto d = center_keypoint_distance(per_image_proposals[i], per_image_keypoints[i]);
        for (std::size_t p = 0; p < per_image_proposals[i].size(); ++p) {
            const std::size_t j = per_image_proposals[i][p].region_index;
            if (j < K) {
                sums[j] += d[p];
                counts[j] += 1;
            }
        }
    }
    for (std::size_t j = 0; j < K; ++j)
        if (counts[j] > 0) sums[j] /= static_cast<double>(counts[j]);
    return sums;
}

// JSON-lines record: {image_id, j, box:[x1,y1,x2,y2], score}; j is 1-based.
inline nlohmann::json proposal_to_json(const Proposal& p) {
    return nlohmann::json{{"image_id", p.image_id},
                          {"j", p.region_index + 1},
                          {"box", {p.box.x1, p.box.y1, p.box.x2, p.box.y2}},
                          {"score", p.score}};
}

}  // namespace ssanet
