#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include <json.hpp>

#include "ssanet/errors.hpp"
#include "ssanet/tensor.hpp"

namespace ssanet {

// Oriented pooling: overlapping patch grid, row/column elementwise max in
// four orientations, best-responding orientation kept.

// Within-patch descriptor. Flatten is the written form (K = h*w*C);
// channel_max (K = C) is the variant whose 90-degree rotation invariance is
// exact for h = w > 1.
enum class PatchDescriptor { kFlatten, kChannelMax };

inline PatchDescriptor patch_descriptor_from_string(const std::string& s) {
    if (s == "flatten") return PatchDescriptor::kFlatten;
    if (s == "channel_max") return PatchDescriptor::kChannelMax;
    throw ConfigError("unknown patch descriptor: " + s);
}

struct PatchGrid {
    std::size_t H = 0, W = 0, C = 0;
    std::size_t h = 0, w = 0;
    std::size_t NH = 0, NW = 0;
    std::size_t stride_y = 0, stride_x = 0;
    std::size_t K = 0;  // descriptor length
    PatchDescriptor descriptor = PatchDescriptor::kFlatten;
    // per patch (row-major over the grid): descriptor values and, per
    // element, the flat index into X it came from
    std::vector<double> values;        // NH*NW*K
    std::vector<std::size_t> sources;  // NH*NW*K

    const double* patch(std::size_t i, std::size_t j) const {
        return values.data() + (i * NW + j) * K;
    }
    const std::size_t* patch_src(std::size_t i, std::size_t j) const {
        return sources.data() + (i * NW + j) * K;
    }
};

inline PatchGrid extract_patches(const Tensor& X, std::size_t h, std::size_t w, std::size_t NH,
                                 std::size_t NW,
                                 PatchDescriptor descriptor = PatchDescriptor::kFlatten) {
    if (X.rank() != 3) throw DimensionError("extract_patches: expected H x W x C map");
    const std::size_t H = X.dim(0), W = X.dim(1), C = X.dim(2);
    if (h > H || w > W) throw ConfigError("extract_patches: patch larger than map");
    if (NH == 0 || NW == 0) throw ConfigError("extract_patches: empty grid");

    auto stride_for = [](std::size_t full, std::size_t patch, std::size_t n, const char* axis) {
        if (n == 1) return (full - patch) / 2;  // centered single patch
        const std::size_t span = full - patch;
        if (span % (n - 1) != 0)
            throw ConfigError(std::string("extract_patches: non-integer stride along ") + axis +
                              " (" + std::to_string(span) + "/" + std::to_string(n - 1) + ")");
        return span / (n - 1);
    };

    PatchGrid g;
    g.H = H; g.W = W; g.C = C;
    g.h = h; g.w = w;
    g.NH = NH; g.NW = NW;
    g.stride_y = stride_for(H, h, NH, "H");
    g.stride_x = stride_for(W, w, NW, "W");
    g.descriptor = descriptor;
    g.K = (descriptor == PatchDescriptor::kFlatten) ? h * w * C : C;
    g.values.assign(NH * NW * g.K, 0.0);
    g.sources.assign(NH * NW * g.K, 0);

    for (std::size_t i = 0; i < NH; ++i)
        for (std::size_t j = 0; j < NW; ++j) {
            const std::size_t y0 = i * g.stride_y, x0 = j * g.stride_x;
            double* out = g.values.data() + (i * NW + j) * g.K;
            std::size_t* src = g.sources.data() + (i * NW + j) * g.K;
            if (descriptor == PatchDescriptor::kFlatten) {
                std::size_t k = 0;
                for (std::size_t dy = 0; dy < h; ++dy)
                    for (std::size_t dx = 0; dx < w; ++dx)
                        for (std::size_t c = 0; c < C; ++c, ++k) {
                            const std::size_t flat = ((y0 + dy) * W + (x0 + dx)) * C + c;
                            out[k] = X[flat];
                            src[k] = flat;
                        }
            } else {
                for (std::size_t c = 0; c < C; ++c) {
                    double best = -std::numeric_limits<double>::infinity();
                    std::size_t best_src = 0;
                    for (std::size_t dy = 0; dy < h; ++dy)
                        for (std::size_t dx = 0; dx < w; ++dx) {
                            const std::size_t flat = ((y0 + dy) * W + (x0 + dx)) * C + c;
                            if (X[flat] > best) {  // ties keep the lowest flat index
                                best = X[flat];
                                best_src = flat;
                            }
                        }
                    out[c] = best;
                    src[c] = best_src;
                }
            }
        }
    return g;
}

struct OrientationSet {
    std::size_t NH = 0, NW = 0, K = 0;
    std::size_t x_numel = 0;  // provenance bound
    // pooled vectors: gamma_h (NH*K), gamma_v (NW*K) and their block reversals
    std::vector<double> gh, gv, ghr, gvr;
    // provenance: flat index into the original X per pooled element
    std::vector<std::size_t> gh_src, gv_src, ghr_src, gvr_src;
};

// p_i = elementwise max over row i's patches, q_j over column j's; the primed
// vectors are block reversals. Max ties pick the lowest patch index.
inline OrientationSet pool_orientations(const PatchGrid& g) {
    OrientationSet o;
    o.NH = g.NH;
    o.NW = g.NW;
    o.K = g.K;
    o.x_numel = g.H * g.W * g.C;
    o.gh.assign(g.NH * g.K, 0.0);
    o.gh_src.assign(g.NH * g.K, 0);
    o.gv.assign(g.NW * g.K, 0.0);
    o.gv_src.assign(g.NW * g.K, 0);

    for (std::size_t i = 0; i < g.NH; ++i)
        for (std::size_t k = 0; k < g.K; ++k) {
            double best = g.patch(i, 0)[k];
            std::size_t src = g.patch_src(i, 0)[k];
            for (std::size_t j = 1; j < g.NW; ++j)
                if (g.patch(i, j)[k] > best) {
                    best = g.patch(i, j)[k];
                    src = g.patch_src(i, j)[k];
                }
            o.gh[i * g.K + k] = best;
            o.gh_src[i * g.K + k] = src;
        }
    for (std::size_t j = 0; j < g.NW; ++j)
        for (std::size_t k = 0; k < g.K; ++k) {
            double best = g.patch(0, j)[k];
            std::size_t src = g.patch_src(0, j)[k];
            for (std::size_t i = 1; i < g.NH; ++i)
                if (g.patch(i, j)[k] > best) {
                    best = g.patch(i, j)[k];
                    src = g.patch_src(i, j)[k];
                }
            o.gv[j * g.K + k] = best;
            o.gv_src[j * g.K + k] = src;
        }

    auto block_reverse = [](const std::vector<double>& v, std::size_t K) {
        std::vector<double> r(v.size());
        const std::size_t n = v.size() / K;
        for (std::size_t b = 0; b < n; ++b)
            std::copy(v.begin() + static_cast<std::ptrdiff_t>(b * K),
                      v.begin() + static_cast<std::ptrdiff_t>((b + 1) * K),
                      r.begin() + static_cast<std::ptrdiff_t>((n - 1 - b) * K));
        return r;
    };
    auto block_reverse_idx = [](const std::vector<std::size_t>& v, std::size_t K) {
        std::vector<std::size_t> r(v.size());
        const std::size_t n = v.size() / K;
        for (std::size_t b = 0; b < n; ++b)
            std::copy(v.begin() + static_cast<std::ptrdiff_t>(b * K),
                      v.begin() + static_cast<std::ptrdiff_t>((b + 1) * K),
                      r.begin() + static_cast<std::ptrdiff_t>((n - 1 - b) * K));
        return r;
    };
    o.ghr = block_reverse(o.gh, g.K);
    o.ghr_src = block_reverse_idx(o.gh_src, g.K);
    o.gvr = block_reverse(o.gv, g.K);
    o.gvr_src = block_reverse_idx(o.gv_src, g.K);
    return o;
}

// Orientation order fixes the tie rule: h, v, h', v'.
enum Orientation : int { kOrientH = 0, kOrientV = 1, kOrientHRev = 2, kOrientVRev = 3 };

inline const char* orientation_name(int o) {
    static const char* names[4] = {"h", "v", "h'", "v'"};
    return names[o];
}

struct OPResponse {
    std::vector<double> y;        // per class
    std::vector<int> orientation; // selected orientation per class
};

namespace detail {

inline const std::vector<double>& gamma_of(const OrientationSet& o, int orient) {
    switch (orient) {
        case kOrientH: return o.gh;
        case kOrientV: return o.gv;
        case kOrientHRev: return o.ghr;
        default: return o.gvr;
    }
}

inline const std::vector<std::size_t>& gamma_src_of(const OrientationSet& o, int orient) {
    switch (orient) {
        case kOrientH: return o.gh_src;
        case kOrientV: return o.gv_src;
        case kOrientHRev: return o.ghr_src;
        default: return o.gvr_src;
    }
}

}  // namespace detail

// y_c = max over the four orientations of <w_c, Gamma>; weights is L x C with
// L = NH*K (a shared w requires NH == NW). A length-L vector is the C = 1
// case reshaped by the caller.
inline OPResponse op_response(const OrientationSet& o, const Tensor& weights) {
    if (o.NH != o.NW)
        throw ConfigError("op_response: shared weights require NH == NW, got " +
                          std::to_string(o.NH) + " vs " + std::to_string(o.NW));
    const std::size_t L = o.NH * o.K;
    if (weights.rank() != 2 || weights.dim(0) != L)
        throw DimensionError("op_response: weights " + shape_str(weights.shape()) +
                             " incompatible with pooled length " + std::to_string(L));
    const std::size_t C = weights.dim(1);
    OPResponse r;
    r.y.assign(C, 0.0);
    r.orientation.assign(C, kOrientH);
    for (std::size_t c = 0; c < C; ++c) {
        double best = 0.0;
        int best_o = -1;
        for (int orient = 0; orient < 4; ++orient) {
            const auto& gamma = detail::gamma_of(o, orient);
            double dot = 0.0;
            for (std::size_t l = 0; l < L; ++l) dot += weights.at2(l, c) * gamma[l];
            if (best_o < 0 || dot > best) {
                best = dot;
                best_o = orient;
            }
        }
        if (!std::isfinite(best)) throw NumericError("op_response produced a non-finite value");
        r.y[c] = best;
        r.orientation[c] = best_o;
    }
    return r;
}

struct OPGradients {
    Tensor d_weights;  // L x C
    Tensor d_input;    // original X shape
};

// Gradient flows only through the selected orientation per class, then
// through each pooled element's provenance to exactly one input element.
inline OPGradients op_backward(const OrientationSet& o, const Tensor& weights,
                               const OPResponse& resp, const std::vector<double>& delta,
                               const Shape& x_shape) {
    const std::size_t L = o.NH * o.K;
    const std::size_t C = weights.dim(1);
    if (resp.y.size() != C || delta.size() != C)
        throw ContractError("op_backward: response/delta class count mismatch");
    if (shape_numel(x_shape) != o.x_numel)
        throw ContractError("op_backward: stale provenance (input shape changed)");
    OPGradients g{Tensor({L, C}), Tensor(x_shape)};
    for (std::size_t c = 0; c < C; ++c) {
        if (delta[c] == 0.0) continue;
        const int orient = resp.orientation[c];
        if (orient < 0 || orient > 3) throw ContractError("op_backward: stale orientation");
        const auto& gamma = detail::gamma_of(o, orient);
        const auto& src = detail::gamma_src_of(o, orient);
        for (std::size_t l = 0; l < L; ++l) {
            g.d_weights.at2(l, c) = delta[c] * gamma[l];
            if (src[l] >= o.x_numel) throw ContractError("op_backward: stale provenance index");
            g.d_input[src[l]] += delta[c] * weights.at2(l, c);
        }
    }
    return g;
}

// Debug record used by the ablation report.
inline nlohmann::json op_debug_json(const OrientationSet& o, const OPResponse& r) {
    auto norm = [](const std::vector<double>& v) {
        double s = 0.0;
        for (double x : v) s += x * x;
        return std::sqrt(s);
    };
    return nlohmann::json{
        {"orientation_selected", r.orientation.empty() ? "h" : orientation_name(r.orientation[0])},
        {"gamma_norms", {norm(o.gh), norm(o.gv), norm(o.ghr), norm(o.gvr)}}};
}

}  // namespace ssanet
