#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "ssanet/errors.hpp"
#include "ssanet/fft.hpp"
#include "ssanet/image.hpp"
#include "ssanet/proposals.hpp"
#include "ssanet/tensor.hpp"

namespace ssanet {

// Discriminative scale mining: S scale candidates per proposal, per-element
// circulant structure over the candidate axis, best cyclic alignment kept.

struct ScaleCandidateSet {
    std::size_t proposal_id = 0;
    double alpha = 1.3;
    std::size_t S = 1;
    std::vector<Box> boxes;           // ordered by exponent m = -(S-1)/2 .. (S-1)/2
    std::vector<bool> degenerate;     // candidate clipped to the minimum box
    Tensor base;                      // K x S, base(k, n) = phi_i^n(k)
    std::size_t feat_h = 0, feat_w = 0, feat_c = 0;
};

struct CirculantResponse {
    double y = 0.0;
    std::size_t selected_shift = 0;
    std::vector<double> per_shift;
};

struct ScaleFilter {
    Tensor weights;  // K x S
};

enum class DsmMode { kFixed, kSingle, kFull };

inline DsmMode dsm_mode_from_string(const std::string& s) {
    if (s == "fixed") return DsmMode::kFixed;
    if (s == "single") return DsmMode::kSingle;
    if (s == "full") return DsmMode::kFull;
    throw ConfigError("unknown DSM mode: " + s);
}

// Candidate geometry. Expansion (m > 0) keeps the far vertex psi fixed and
// grows the box away from it; shrinking (m < 0) keeps the near vertex eta
// fixed. Exponent 0 reproduces the original box. Degenerate clipped boxes
// fall back to a min_size square at the fixed vertex and are flagged.
inline std::vector<Box> make_candidate_boxes(const Proposal& p, double alpha, std::size_t S,
                                             double img_w, double img_h,
                                             std::vector<bool>* degenerate_out = nullptr,
                                             double min_size = 1.0) {
    if (S % 2 == 0) throw ConfigError("make_candidate_boxes: S must be odd, got " + std::to_string(S));
    if (alpha <= 1.0) throw ConfigError("make_candidate_boxes: alpha must be > 1");
    if (!p.vertices_set) throw ContractError("make_candidate_boxes: psi/eta not assigned");

    const int half = static_cast<int>(S - 1) / 2;
    std::vector<Box> boxes;
    std::vector<bool> flags;
    for (int m = -half; m <= half; ++m) {
        Box b;
        if (m == 0) {
            b = p.box;
        } else {
            const double f = std::pow(alpha, m);
            const double w = p.box.width() * f;
            const double h = p.box.height() * f;
            // fixed corner and the per-axis direction toward the box interior
            const Point fixed = (m > 0) ? p.psi : p.eta;
            const Point other = (m > 0) ? p.eta : p.psi;
            const double sx = (other.x >= fixed.x) ? 1.0 : -1.0;
            const double sy = (other.y >= fixed.y) ? 1.0 : -1.0;
            const double ox = fixed.x + sx * w;
            const double oy = fixed.y + sy * h;
            b = Box{std::min(fixed.x, ox), std::min(fixed.y, oy), std::max(fixed.x, ox),
                    std::max(fixed.y, oy)};
        }
        Box clipped = b.clipped(img_w, img_h);
        bool flagged = false;
        if (clipped.area() <= 0.0) {
            const Point fixed = (m > 0) ? p.psi : (m < 0 ? p.eta : p.box.center());
            const double cx = std::clamp(fixed.x, min_size / 2.0, img_w - min_size / 2.0);
            const double cy = std::clamp(fixed.y, min_size / 2.0, img_h - min_size / 2.0);
            clipped = Box{cx - min_size / 2.0, cy - min_size / 2.0, cx + min_size / 2.0,
                          cy + min_size / 2.0};
            flagged = true;
        }
        boxes.push_back(clipped);
        flags.push_back(flagged);
    }
    if (degenerate_out) *degenerate_out = flags;
    return boxes;
}

// Full candidate set: geometry plus per-candidate features, each candidate
// crop of the feature map resized to feat_h x feat_w so the flattened length
// K is shared. Boxes are in image pixels; map_stride converts to map cells.
inline ScaleCandidateSet make_candidates(const Proposal& p, double alpha, std::size_t S,
                                         const Tensor& feature_map, double map_stride,
                                         std::size_t feat_h, std::size_t feat_w, double img_w,
                                         double img_h) {
    ScaleCandidateSet cs;
    cs.proposal_id = p.region_index;
    cs.alpha = alpha;
    cs.S = S;
    cs.boxes = make_candidate_boxes(p, alpha, S, img_w, img_h, &cs.degenerate);
    cs.feat_h = feat_h;
    cs.feat_w = feat_w;
    cs.feat_c = feature_map.dim(2);
    const std::size_t K = feat_h * feat_w * cs.feat_c;
    cs.base = Tensor({K, S});
    for (std::size_t n = 0; n < S; ++n) {
        const Box& b = cs.boxes[n];
        Box mb{b.x1 / map_stride, b.y1 / map_stride, b.x2 / map_stride, b.y2 / map_stride};
        Tensor crop = crop_resize(feature_map, mb, feat_h, feat_w);
        for (std::size_t k = 0; k < K; ++k) cs.base.at2(k, n) = crop[k];
    }
    return cs;
}

// Row r of the circulant matrix is the base vector cyclically right-shifted
// by r; row 0 is the base itself.
inline Tensor circulant_build(const std::vector<double>& base) {
    const std::size_t S = base.size();
    if (S == 0) throw DimensionError("circulant_build: empty base vector");
    Tensor C({S, S});
    for (std::size_t r = 0; r < S; ++r)
        for (std::size_t c = 0; c < S; ++c) C.at2(r, c) = base[(c + S - r) % S];
    return C;
}

namespace detail {

inline void check_dsm_shapes(const Tensor& base, const Tensor& filt) {
    if (base.rank() != 2 || filt.rank() != 2 || !base.same_shape(filt))
        throw DimensionError("dsm: base " + shape_str(base.shape()) + " vs filter " +
                             shape_str(filt.shape()));
}

inline CirculantResponse response_from_scores(std::vector<double> scores) {
    CirculantResponse r;
    r.per_shift = std::move(scores);
    r.selected_shift = 0;
    for (std::size_t s = 1; s < r.per_shift.size(); ++s)
        if (r.per_shift[s] > r.per_shift[r.selected_shift]) r.selected_shift = s;
    r.y = r.per_shift[r.selected_shift];
    return r;
}

}  // namespace detail

// Per-shift score s = sum_k <shift_s(psi_k), w_k>; O(K S^2).
inline CirculantResponse dsm_forward_direct(const Tensor& base, const Tensor& filt) {
    detail::check_dsm_shapes(base, filt);
    const std::size_t K = base.dim(0), S = base.dim(1);
    std::vector<double> scores(S, 0.0);
    for (std::size_t k = 0; k < K; ++k) {
        const double* b = base.data() + k * S;
        const double* w = filt.data() + k * S;
        for (std::size_t s = 0; s < S; ++s) {
            double acc = 0.0;
            for (std::size_t c = 0; c < S; ++c) acc += b[(c + S - s) % S] * w[c];
            scores[s] += acc;
        }
    }
    for (double v : scores)
        if (!std::isfinite(v)) throw NumericError("dsm_forward_direct produced a non-finite score");
    return detail::response_from_scores(std::move(scores));
}

// Same contract via the DFT diagonalization of the circulant structure:
// scores = IDFT( sum_k conj(DFT(psi_k)) .* DFT(w_k) ), real parts.
// O(K S log S).
inline CirculantResponse dsm_forward_fft(const Tensor& base, const Tensor& filt) {
    detail::check_dsm_shapes(base, filt);
    const std::size_t K = base.dim(0), S = base.dim(1);
    std::vector<fft::cplx> acc(S, fft::cplx(0.0, 0.0));
    for (std::size_t k = 0; k < K; ++k) {
        auto B = fft::dft_real(base.data() + k * S, S);
        auto W = fft::dft_real(filt.data() + k * S, S);
        for (std::size_t f = 0; f < S; ++f) acc[f] += std::conj(B[f]) * W[f];
    }
    fft::idft_inplace(acc);
    std::vector<double> scores(S);
    for (std::size_t s = 0; s < S; ++s) scores[s] = acc[s].real();
    for (double v : scores)
        if (!std::isfinite(v)) throw NumericError("dsm_forward_fft produced a non-finite score");
    return detail::response_from_scores(std::move(scores));
}

struct DsmGradients {
    Tensor d_filter;   // K x S
    Tensor d_base;     // K x S (scattered back through the inverse shift)
};

// Backward of the max-selected response: with s* the selected shift,
// dW(k,c) = delta * base(k, (c - s*) mod S) and
// dBase(k,t) = delta * w(k, (t + s*) mod S); non-selected shifts get zero.
inline DsmGradients dsm_backward(const Tensor& base, const Tensor& filt,
                                 const CirculantResponse& resp, double delta) {
    detail::check_dsm_shapes(base, filt);
    const std::size_t K = base.dim(0), S = base.dim(1);
    if (resp.selected_shift >= S || resp.per_shift.size() != S)
        throw ContractError("dsm_backward: stale response for this candidate set");
    DsmGradients g{Tensor({K, S}), Tensor({K, S})};
    if (delta == 0.0) return g;
    const std::size_t s = resp.selected_shift;
    for (std::size_t k = 0; k < K; ++k)
        for (std::size_t c = 0; c < S; ++c) {
            g.d_filter.at2(k, c) = delta * base.at2(k, (c + S - s) % S);
            g.d_base.at2(k, (c + S - s) % S) = delta * filt.at2(k, c);
        }
    return g;
}

// Ablation variants. kFixed sums all scales at shift 0 (multi-scale, no
// alignment); kSingle scores each candidate against the original-scale filter
// slot and keeps the best (alignment, no fusion); kFull is the circulant
// response above. For kSingle, selected_shift holds the winning candidate
// index and per_shift the per-candidate scores.
inline CirculantResponse dsm_forward(DsmMode mode, const Tensor& base, const Tensor& filt) {
    detail::check_dsm_shapes(base, filt);
    const std::size_t K = base.dim(0), S = base.dim(1);
    switch (mode) {
        case DsmMode::kFull:
            return dsm_forward_direct(base, filt);
        case DsmMode::kFixed: {
            double y = 0.0;
            for (std::size_t k = 0; k < K; ++k)
                for (std::size_t c = 0; c < S; ++c) y += base.at2(k, c) * filt.at2(k, c);
            CirculantResponse r;
            r.per_shift.assign(1, y);
            r.selected_shift = 0;
            r.y = y;
            if (!std::isfinite(y)) throw NumericError("dsm_forward(fixed) non-finite");
            return r;
        }
        case DsmMode::kSingle: {
            const std::size_t c0 = (S - 1) / 2;
            std::vector<double> scores(S, 0.0);
            for (std::size_t k = 0; k < K; ++k) {
                const double wk = filt.at2(k, c0);
                for (std::size_t n = 0; n < S; ++n) scores[n] += base.at2(k, n) * wk;
            }
            for (double v : scores)
                if (!std::isfinite(v)) throw NumericError("dsm_forward(single) non-finite");
            return detail::response_from_scores(std::move(scores));
        }
    }
    throw ConfigError("dsm_forward: invalid mode");
}

inline DsmGradients dsm_variant_backward(DsmMode mode, const Tensor& base, const Tensor& filt,
                                         const CirculantResponse& resp, double delta) {
    detail::check_dsm_shapes(base, filt);
    const std::size_t K = base.dim(0), S = base.dim(1);
    switch (mode) {
        case DsmMode::kFull:
            return dsm_backward(base, filt, resp, delta);
        case DsmMode::kFixed: {
            DsmGradients g{Tensor({K, S}), Tensor({K, S})};
            if (delta == 0.0) return g;
            for (std::size_t k = 0; k < K; ++k)
                for (std::size_t c = 0; c < S; ++c) {
                    g.d_filter.at2(k, c) = delta * base.at2(k, c);
                    g.d_base.at2(k, c) = delta * filt.at2(k, c);
                }
            return g;
        }
        case DsmMode::kSingle: {
            if (resp.selected_shift >= S)
                throw ContractError("dsm_variant_backward: stale response");
            DsmGradients g{Tensor({K, S}), Tensor({K, S})};
            if (delta == 0.0) return g;
            const std::size_t c0 = (S - 1) / 2;
            const std::size_t n = resp.selected_shift;
            for (std::size_t k = 0; k < K; ++k) {
                g.d_filter.at2(k, c0) = delta * base.at2(k, n);
                g.d_base.at2(k, n) = delta * filt.at2(k, c0);
            }
            return g;
        }
    }
    throw ConfigError("dsm_variant_backward: invalid mode");
}

}  // namespace ssanet
