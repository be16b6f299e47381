#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "ssanet/autograd.hpp"
#include "ssanet/errors.hpp"
#include "ssanet/tensor.hpp"

namespace ssanet {

// Morphological alignment loss over a K x K similarity matrix S,
// S_jn = <f_xi_j, f_tau_n> with unit-norm rows:
//   L_m = (1/K) sum_j log(1 + sum_{m != j} exp(S_jm - S_jj))

inline void check_similarity(const Tensor& S) {
    if (S.rank() != 2 || S.dim(0) != S.dim(1))
        throw DimensionError("similarity matrix must be K x K, got " + shape_str(S.shape()));
}

inline double mac_pair_loss(const Tensor& S) {
    check_similarity(S);
    const std::size_t K = S.dim(0);
    double total = 0.0;
    for (std::size_t j = 0; j < K; ++j) {
        // log(1 + sum_m e^{x_m}) with max-shift, x_m = S_jm - S_jj
        double mx = 0.0;  // the implicit "1" term has exponent 0
        for (std::size_t m = 0; m < K; ++m)
            if (m != j) mx = std::max(mx, S.at2(j, m) - S.at2(j, j));
        double acc = std::exp(-mx);
        for (std::size_t m = 0; m < K; ++m)
            if (m != j) acc += std::exp(S.at2(j, m) - S.at2(j, j) - mx);
        total += mx + std::log(acc);
    }
    const double lm = total / static_cast<double>(K);
    if (!std::isfinite(lm)) throw NumericError("mac_pair_loss produced a non-finite value");
    return lm;
}

// Closed-form pair-weight magnitudes:
//   omega^P_jj = 1 / (1/sum_{m != j} e^{S_jm - S_jj} + 1)
//   omega^N_jm = 1 / (e^{S_jj - S_jm} + sum_{m' != j} e^{S_jm' - S_jm})
// Returned as a K x K matrix; the diagonal holds omega^P. The sign is carried
// by the chain rule (dL_m/dS_jj = -omega^P/K, dL_m/dS_jm = +omega^N/K).
inline Tensor mac_pair_weights(const Tensor& S) {
    check_similarity(S);
    const std::size_t K = S.dim(0);
    Tensor w({K, K});
    for (std::size_t j = 0; j < K; ++j) {
        // denom = 1 + sum_{m != j} e^{S_jm - S_jj}, computed with max-shift
        double mx = 0.0;
        for (std::size_t m = 0; m < K; ++m)
            if (m != j) mx = std::max(mx, S.at2(j, m) - S.at2(j, j));
        double z = std::exp(-mx);
        for (std::size_t m = 0; m < K; ++m)
            if (m != j) z += std::exp(S.at2(j, m) - S.at2(j, j) - mx);
        // omega^N_jm = e^{S_jm - S_jj - mx} / z ; omega^P_jj = sum of them
        double pos = 0.0;
        for (std::size_t m = 0; m < K; ++m) {
            if (m == j) continue;
            const double neg = std::exp(S.at2(j, m) - S.at2(j, j) - mx) / z;
            w.at2(j, m) = neg;
            pos += neg;
        }
        w.at2(j, j) = pos;
    }
    w.check_finite("mac_pair_weights");
    return w;
}

// Tape route for L_m over two already-normalized K x D feature matrices.
// Built from primitive ops so its backward is an independent check of the
// analytic omega assembly.
inline Var mac_pair_loss_var(Tape& t, Var f_xi, Var f_tau) {
    const Tensor& a = t.value(f_xi);
    const Tensor& b = t.value(f_tau);
    if (a.rank() != 2 || !a.same_shape(b))
        throw DimensionError("mac_pair_loss_var: feature shape mismatch");
    const std::size_t K = a.dim(0);
    Var S = ops::matmul(t, f_xi, ops::transpose(t, f_tau));
    Var total;
    for (std::size_t j = 0; j < K; ++j) {
        Var row = ops::slice(t, S, {j, 0}, {1, K});
        Var sjj = ops::slice(t, S, {j, j}, {1, 1});
        Var shifted = ops::add_bscalar(t, row, ops::scale(t, sjj, -1.0));
        Tensor mask({1, K}, 1.0);
        mask.at2(0, j) = 0.0;
        Var terms = ops::mul(t, ops::exp(t, shifted), t.leaf(mask));
        Var lj = ops::log(t, ops::add_const(t, ops::sum(t, terms), 1.0));
        total = total.valid() ? ops::add(t, total, lj) : lj;
    }
    return ops::scale(t, total, 1.0 / static_cast<double>(K));
}

struct LossBreakdown {
    double ce = 0.0;     // summed region cross-entropy
    double lm = 0.0;     // summed pairwise alignment loss (unweighted)
    double total = 0.0;  // ce + lambda * lm
};

// Eq. 1 on the tape: region-wise CE through one shared FC plus lambda times
// the sum of L_m over ordered sample pairs (self-pairs excluded). features
// are raw K x D Vars; normalization happens here and its gradient is part of
// the graph. When same_class_only is set, only pairs with equal labels enter
// the alignment term.
inline Var total_loss_var(Tape& t, const std::vector<Var>& features,
                          const std::vector<std::size_t>& labels, Var fc_weights, double lambda,
                          bool same_class_only = false, LossBreakdown* breakdown = nullptr) {
    if (lambda < 0.0) throw ConfigError("total_loss_var: lambda must be >= 0");
    const std::size_t B = features.size();
    if (labels.size() != B) throw DimensionError("total_loss_var: label count mismatch");

    std::vector<Var> fnorm(B);
    Var ce_total;
    double ce_val = 0.0;
    for (std::size_t i = 0; i < B; ++i) {
        const Tensor& f = t.value(features[i]);
        if (f.rank() != 2) throw DimensionError("total_loss_var: features must be K x D");
        const std::size_t K = f.dim(0);
        fnorm[i] = ops::l2_normalize(t, features[i], 1);
        Var logits = ops::matmul(t, fnorm[i], fc_weights);
        std::vector<std::size_t> region_labels(K, labels[i]);
        // CE op averages over rows; Eq. 1 sums over regions
        Var ce = ops::scale(t, ops::softmax_cross_entropy(t, logits, region_labels),
                            static_cast<double>(K));
        ce_val += t.value(ce)[0];
        ce_total = ce_total.valid() ? ops::add(t, ce_total, ce) : ce;
    }

    Var lm_total;
    double lm_val = 0.0;
    if (lambda > 0.0)
        for (std::size_t xi = 0; xi < B; ++xi)
        for (std::size_t tau = 0; tau < B; ++tau) {
            if (xi == tau) continue;
            if (same_class_only && labels[xi] != labels[tau]) continue;
            Var lm = mac_pair_loss_var(t, fnorm[xi], fnorm[tau]);
            lm_val += t.value(lm)[0];
            lm_total = lm_total.valid() ? ops::add(t, lm_total, lm) : lm;
        }

    if (breakdown) {
        breakdown->ce = ce_val;
        breakdown->lm = lm_val;
        breakdown->total = ce_val + lambda * lm_val;
    }
    if (!lm_total.valid() || lambda == 0.0) return ce_total;
    return ops::add(t, ce_total, ops::scale(t, lm_total, lambda));
}

struct MacGradients {
    std::vector<Tensor> d_features;  // per sample, K x D (w.r.t. raw features)
    Tensor d_fc;                     // D x C
    LossBreakdown breakdown;
};

// Analytic assembly of the Eq. 1 gradient: CE via softmax-minus-onehot, the
// alignment term via the closed-form pair weights, both chained through the
// row L2 normalization. Must match backward() of total_loss_var.
inline MacGradients mac_backward(const std::vector<Tensor>& features,
                                 const std::vector<std::size_t>& labels, const Tensor& fc_weights,
                                 double lambda, bool same_class_only = false,
                                 double norm_eps = 1e-12) {
    const std::size_t B = features.size();
    if (labels.size() != B) throw DimensionError("mac_backward: label count mismatch");
    const std::size_t D = fc_weights.dim(0), C = fc_weights.dim(1);

    MacGradients out;
    out.d_fc = Tensor({D, C});
    out.d_features.reserve(B);

    // normalized features and their norms
    std::vector<Tensor> fn(B);
    std::vector<std::vector<double>> norms(B);
    for (std::size_t i = 0; i < B; ++i) {
        const Tensor& f = features[i];
        const std::size_t K = f.dim(0);
        fn[i] = Tensor({K, D});
        norms[i].resize(K);
        for (std::size_t j = 0; j < K; ++j) {
            double s = 0.0;
            for (std::size_t d = 0; d < D; ++d) s += f.at2(j, d) * f.at2(j, d);
            const double norm = std::sqrt(s) + norm_eps;
            norms[i][j] = norm;
            for (std::size_t d = 0; d < D; ++d) fn[i].at2(j, d) = f.at2(j, d) / norm;
        }
        out.d_features.emplace_back(Shape{K, D});
    }

    // gradients w.r.t. normalized features, assembled first
    std::vector<Tensor> d_fn(B);
    for (std::size_t i = 0; i < B; ++i) d_fn[i] = Tensor(fn[i].shape());

    // region-wise CE
    for (std::size_t i = 0; i < B; ++i) {
        const std::size_t K = fn[i].dim(0);
        for (std::size_t j = 0; j < K; ++j) {
            double mx = -std::numeric_limits<double>::infinity();
            std::vector<double> logits(C);
            for (std::size_t c = 0; c < C; ++c) {
                double v = 0.0;
                for (std::size_t d = 0; d < D; ++d) v += fn[i].at2(j, d) * fc_weights.at2(d, c);
                logits[c] = v;
                mx = std::max(mx, v);
            }
            double z = 0.0;
            for (std::size_t c = 0; c < C; ++c) z += std::exp(logits[c] - mx);
            out.breakdown.ce += -(logits[labels[i]] - mx - std::log(z));
            for (std::size_t c = 0; c < C; ++c) {
                double dlogit = std::exp(logits[c] - mx) / z - (c == labels[i] ? 1.0 : 0.0);
                for (std::size_t d = 0; d < D; ++d) {
                    d_fn[i].at2(j, d) += dlogit * fc_weights.at2(d, c);
                    out.d_fc.at2(d, c) += dlogit * fn[i].at2(j, d);
                }
            }
        }
    }

    // alignment term via the pair weights
    if (lambda > 0.0) {
        for (std::size_t xi = 0; xi < B; ++xi)
            for (std::size_t tau = 0; tau < B; ++tau) {
                if (xi == tau) continue;
                if (same_class_only && labels[xi] != labels[tau]) continue;
                const std::size_t K = fn[xi].dim(0);
                Tensor S({K, K});
                for (std::size_t j = 0; j < K; ++j)
                    for (std::size_t n = 0; n < K; ++n) {
                        double v = 0.0;
                        for (std::size_t d = 0; d < D; ++d)
                            v += fn[xi].at2(j, d) * fn[tau].at2(n, d);
                        S.at2(j, n) = v;
                    }
                out.breakdown.lm += mac_pair_loss(S);
                const Tensor w = mac_pair_weights(S);
                const double scale = lambda / static_cast<double>(K);
                for (std::size_t j = 0; j < K; ++j)
                    for (std::size_t z = 0; z < K; ++z) {
                        const double ds = (j == z ? -w.at2(j, j) : w.at2(j, z)) * scale;
                        if (ds == 0.0) continue;
                        for (std::size_t d = 0; d < D; ++d) {
                            d_fn[xi].at2(j, d) += ds * fn[tau].at2(z, d);
                            d_fn[tau].at2(z, d) += ds * fn[xi].at2(j, d);
                        }
                    }
            }
    }
    out.breakdown.total = out.breakdown.ce + lambda * out.breakdown.lm;

    // chain through the row normalization: dx = (g - y <g, y>) / ||x||
    for (std::size_t i = 0; i < B; ++i) {
        const std::size_t K = fn[i].dim(0);
        for (std::size_t j = 0; j < K; ++j) {
            double dot = 0.0;
            for (std::size_t d = 0; d < D; ++d) dot += d_fn[i].at2(j, d) * fn[i].at2(j, d);
            for (std::size_t d = 0; d < D; ++d)
                out.d_features[i].at2(j, d) =
                    (d_fn[i].at2(j, d) - fn[i].at2(j, d) * dot) / norms[i][j];
        }
    }
    return out;
}

}  // namespace ssanet
