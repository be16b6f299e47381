#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "ssanet/autograd.hpp"
#include "ssanet/checkpoint.hpp"
#include "ssanet/config.hpp"
#include "ssanet/dataset.hpp"
#include "ssanet/dsm.hpp"
#include "ssanet/image.hpp"
#include "ssanet/mac_loss.hpp"
#include "ssanet/oriented_pooling.hpp"
#include "ssanet/proposals.hpp"

namespace ssanet {

// The experiment model: a small conv backbone to a feat x feat x C map, a
// global head (GAP / GMP / oriented pooling), anchor-based part proposals
// with per-region features, a scale-mining head over proposal crops, and a
// proposal scorer trained from keypoint proximity. Head logits are summed.

struct Params {
    NamedTensors items;

    Tensor& get(const std::string& name) {
        for (auto& [n, t] : items)
            if (n == name) return t;
        throw ContractError("unknown parameter: " + name);
    }
    const Tensor& get(const std::string& name) const {
        for (const auto& [n, t] : items)
            if (n == name) return t;
        throw ContractError("unknown parameter: " + name);
    }
};

inline Params init_params(const ModelConfig& cfg, std::size_t classes, std::mt19937& rng) {
    if (cfg.channels % 4 != 0) throw ConfigError("model.channels must be divisible by 4");
    const std::size_t ch = cfg.channels;
    const std::size_t C = classes;
    const std::size_t op_desc_len = (cfg.op_descriptor == "flatten")
                                        ? cfg.op_patch * cfg.op_patch * ch
                                        : ch;
    const std::size_t kf = cfg.region_size * cfg.region_size * ch;

    auto he = [&rng](Shape s, std::size_t fan_in) {
        return Tensor::randn(s, rng, std::sqrt(2.0 / static_cast<double>(fan_in)));
    };
    Params p;
    p.items.emplace_back("conv1", he({3, 3, 1, ch / 4}, 9));
    p.items.emplace_back("conv2", he({3, 3, ch / 4, ch / 2}, 9 * (ch / 4)));
    p.items.emplace_back("conv3", he({3, 3, ch / 2, ch}, 9 * (ch / 2)));
    p.items.emplace_back("conv4", he({3, 3, ch, ch}, 9 * ch));
    p.items.emplace_back("w_global", he({ch, C}, ch));
    p.items.emplace_back("w_op", he({cfg.op_grid * op_desc_len, C}, cfg.op_grid * op_desc_len));
    p.items.emplace_back("w_region", he({ch, C}, ch));
    p.items.emplace_back("w_score", he({ch, 1}, ch));
    p.items.emplace_back("w_dsm",
                         he({cfg.parts, C, kf, cfg.scale_steps}, kf * cfg.scale_steps));
    return p;
}

// ---- custom tape ops -------------------------------------------------------

namespace mops {

// Mean over H and W of an H x W x C map -> (1, C).
inline Var gap_hwc(Tape& t, Var x) {
    const Tensor& v = t.value(x);
    const std::size_t H = v.dim(0), W = v.dim(1), C = v.dim(2);
    Tensor out({1, C});
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t xx = 0; xx < W; ++xx)
            for (std::size_t c = 0; c < C; ++c) out[c] += v.at3(y, xx, c);
    const double inv = 1.0 / static_cast<double>(H * W);
    for (std::size_t c = 0; c < C; ++c) out[c] *= inv;
    return t.record(std::move(out), "gap_hwc", [x, H, W, C, inv](Var o) {
        return [x, H, W, C, inv, o](Tape& tp) {
            const Tensor& g = tp.grad(o);
            Tensor dx({H, W, C});
            for (std::size_t y = 0; y < H; ++y)
                for (std::size_t xx = 0; xx < W; ++xx)
                    for (std::size_t c = 0; c < C; ++c) dx.at3(y, xx, c) = g[c] * inv;
            tp.accumulate(x, dx);
        };
    });
}

// Per-channel spatial max with argmax routing -> (1, C).
inline Var gmp_hwc(Tape& t, Var x) {
    const Tensor& v = t.value(x);
    const std::size_t H = v.dim(0), W = v.dim(1), C = v.dim(2);
    Tensor out({1, C});
    std::vector<std::size_t> arg(C, 0);
    for (std::size_t c = 0; c < C; ++c) {
        double best = v.at3(0, 0, c);
        std::size_t bi = c;
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t xx = 0; xx < W; ++xx) {
                const std::size_t flat = (y * W + xx) * C + c;
                if (v[flat] > best) {
                    best = v[flat];
                    bi = flat;
                }
            }
        out[c] = best;
        arg[c] = bi;
    }
    return t.record(std::move(out), "gmp_hwc", [x, arg, H, W, C](Var o) {
        return [x, arg, H, W, C, o](Tape& tp) {
            const Tensor& g = tp.grad(o);
            Tensor dx({H, W, C});
            for (std::size_t c = 0; c < g.numel(); ++c) dx[arg[c]] += g[c];
            tp.accumulate(x, dx);
        };
    });
}

// Mean over rows of a (K, C) matrix -> (1, C).
inline Var mean_rows(Tape& t, Var x) {
    const Tensor& v = t.value(x);
    const std::size_t K = v.dim(0), C = v.dim(1);
    Tensor out({1, C});
    for (std::size_t k = 0; k < K; ++k)
        for (std::size_t c = 0; c < C; ++c) out[c] += v.at2(k, c);
    const double inv = 1.0 / static_cast<double>(K);
    for (std::size_t c = 0; c < C; ++c) out[c] *= inv;
    return t.record(std::move(out), "mean_rows", [x, K, C, inv](Var o) {
        return [x, K, C, inv, o](Tape& tp) {
            const Tensor& g = tp.grad(o);
            Tensor dx({K, C});
            for (std::size_t k = 0; k < K; ++k)
                for (std::size_t c = 0; c < C; ++c) dx.at2(k, c) = g[c] * inv;
            tp.accumulate(x, dx);
        };
    });
}

// Stack (1, C) rows into a (K, C) matrix.
inline Var stack_rows(Tape& t, const std::vector<Var>& rows) {
    if (rows.empty()) throw DimensionError("stack_rows: no rows");
    const std::size_t C = t.value(rows[0]).dim(1);
    Tensor out({rows.size(), C});
    for (std::size_t k = 0; k < rows.size(); ++k) {
        const Tensor& r = t.value(rows[k]);
        if (r.rank() != 2 || r.dim(0) != 1 || r.dim(1) != C)
            throw DimensionError("stack_rows: row shape mismatch");
        for (std::size_t c = 0; c < C; ++c) out.at2(k, c) = r[c];
    }
    return t.record(std::move(out), "stack_rows", [rows, C](Var o) {
        return [rows, C, o](Tape& tp) {
            const Tensor& g = tp.grad(o);
            for (std::size_t k = 0; k < rows.size(); ++k) {
                Tensor gr({1, C});
                for (std::size_t c = 0; c < C; ++c) gr[c] = g.at2(k, c);
                tp.accumulate(rows[k], gr);
            }
        };
    });
}

// RoI crop (map coords) resized to r x r, then spatial mean -> (1, C).
inline Var crop_gap(Tape& t, Var map, Box map_box, std::size_t r) {
    const Tensor& v = t.value(map);
    const std::size_t C = v.dim(2);
    Tensor crop = crop_resize(v, map_box, r, r);
    Tensor out({1, C});
    for (std::size_t i = 0; i < r * r; ++i)
        for (std::size_t c = 0; c < C; ++c) out[c] += crop[i * C + c];
    const double inv = 1.0 / static_cast<double>(r * r);
    for (std::size_t c = 0; c < C; ++c) out[c] *= inv;
    return t.record(std::move(out), "crop_gap", [map, map_box, r, C, inv](Var o) {
        return [map, map_box, r, C, inv, o](Tape& tp) {
            const Tensor& g = tp.grad(o);
            Tensor gcrop({r, r, C});
            for (std::size_t i = 0; i < r * r; ++i)
                for (std::size_t c = 0; c < C; ++c) gcrop[i * C + c] = g[c] * inv;
            Tensor dmap(tp.value(map).shape());
            crop_resize_backward(gcrop, map_box, dmap);
            tp.accumulate(map, dmap);
        };
    });
}

// Oriented-pooling head over the full map -> (1, C) class responses.
inline Var op_logits(Tape& t, Var map, Var w, std::size_t patch, std::size_t grid,
                     PatchDescriptor desc) {
    const Tensor& v = t.value(map);
    auto o = std::make_shared<OrientationSet>(
        pool_orientations(extract_patches(v, patch, patch, grid, grid, desc)));
    auto resp = std::make_shared<OPResponse>(op_response(*o, t.value(w)));
    const std::size_t C = resp->y.size();
    Tensor out({1, C}, resp->y);
    return t.record(std::move(out), "op_logits", [map, w, o, resp](Var out_v) {
        return [map, w, o, resp, out_v](Tape& tp) {
            const Tensor& g = tp.grad(out_v);
            std::vector<double> delta(g.vec());
            auto grads = op_backward(*o, tp.value(w), *resp, delta, tp.value(map).shape());
            tp.accumulate(w, grads.d_weights);
            tp.accumulate(map, grads.d_input);
        };
    });
}

// Per-region scale-mining debug info: candidate boxes and, per class, the
// candidate index aligned to the original-scale filter slot.
struct DsmDebug {
    std::vector<std::vector<Box>> candidate_boxes;            // [region][n]
    std::vector<std::vector<std::size_t>> selected_candidate; // [region][class]
    // per region: the candidate box of the class with the strongest response,
    // i.e. the mined scale the region head reads its features from
    std::vector<Box> refined;
};

// Scale-mining head: per region, S scale-candidate crops scored against that
// region's per-class filters; class responses averaged over regions -> (1, C).
// w_dsm is (K, C, kf, S): each region index owns its own filter bank.
inline Var dsm_logits(Tape& t, Var map, Var w_dsm, const std::vector<Proposal>& props,
                      const ModelConfig& cfg, double map_stride, double img_w, double img_h,
                      std::shared_ptr<DsmDebug>* debug_out = nullptr) {
    const Tensor& v = t.value(map);
    const Tensor& wv = t.value(w_dsm);
    const std::size_t C = wv.dim(1), kf = wv.dim(2), S = wv.dim(3);
    const std::size_t K = props.size();
    const std::size_t r = cfg.region_size;
    if (kf != r * r * v.dim(2)) throw DimensionError("dsm_logits: filter length mismatch");
    if (K > wv.dim(0)) throw DimensionError("dsm_logits: more regions than filter banks");

    auto sets = std::make_shared<std::vector<ScaleCandidateSet>>();
    auto resps = std::make_shared<std::vector<std::vector<CirculantResponse>>>();
    // per (region, candidate): L2 norm of the raw crop features. Candidates
    // are unit-normalized before matching so the shift max compares patterns,
    // not magnitudes; the backward applies the normalization Jacobian.
    auto norms = std::make_shared<std::vector<std::vector<double>>>();
    auto dbg = std::make_shared<DsmDebug>();
    const std::size_t c0 = (S - 1) / 2;

    Tensor out({1, C});
    for (std::size_t j = 0; j < K; ++j) {
        sets->push_back(make_candidates(props[j], cfg.alpha, S, v, map_stride, r, r, img_w, img_h));
        ScaleCandidateSet& cs = sets->back();
        norms->emplace_back(S, 0.0);
        for (std::size_t n = 0; n < S; ++n) {
            double sq = 0.0;
            for (std::size_t k = 0; k < kf; ++k) sq += cs.base.at2(k, n) * cs.base.at2(k, n);
            const double nm = std::max(std::sqrt(sq), 1e-12);
            norms->back()[n] = nm;
            for (std::size_t k = 0; k < kf; ++k) cs.base.at2(k, n) /= nm;
        }
        dbg->candidate_boxes.push_back(cs.boxes);
        dbg->selected_candidate.emplace_back();
        resps->emplace_back();
        std::size_t best_c = 0;
        double best_y = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < C; ++c) {
            Tensor filt({kf, S});
            for (std::size_t k = 0; k < kf; ++k)
                for (std::size_t n = 0; n < S; ++n)
                    filt.at2(k, n) = wv[((j * C + c) * kf + k) * S + n];
            CirculantResponse resp = dsm_forward(cfg.dsm_mode, cs.base, filt);
            out[c] += resp.y / static_cast<double>(K);
            std::size_t sel = c0;  // fixed mode keeps the original box
            if (cfg.dsm_mode == DsmMode::kFull)
                sel = (c0 + S - resp.selected_shift % S) % S;
            else if (cfg.dsm_mode == DsmMode::kSingle)
                sel = resp.selected_shift;
            dbg->selected_candidate[j].push_back(sel);
            if (resp.y > best_y) {
                best_y = resp.y;
                best_c = c;
            }
            resps->back().push_back(std::move(resp));
        }
        dbg->refined.push_back(cs.boxes[dbg->selected_candidate[j][best_c]]);
    }
    if (debug_out) *debug_out = dbg;

    const DsmMode mode = cfg.dsm_mode;
    return t.record(std::move(out), "dsm_logits",
                    [map, w_dsm, sets, resps, norms, mode, map_stride, K, C, kf, S, r](Var o) {
        return [map, w_dsm, sets, resps, norms, mode, map_stride, K, C, kf, S, r, o](Tape& tp) {
            const Tensor& g = tp.grad(o);
            const Tensor& wv = tp.value(w_dsm);
            const Tensor& mv = tp.value(map);
            const std::size_t ch = mv.dim(2);
            Tensor dmap(mv.shape());
            Tensor dw(wv.shape());
            for (std::size_t j = 0; j < K; ++j) {
                const ScaleCandidateSet& cs = (*sets)[j];
                for (std::size_t c = 0; c < C; ++c) {
                    const double delta = g[c] / static_cast<double>(K);
                    if (delta == 0.0) continue;
                    Tensor filt({kf, S});
                    for (std::size_t k = 0; k < kf; ++k)
                        for (std::size_t n = 0; n < S; ++n)
                            filt.at2(k, n) = wv[((j * C + c) * kf + k) * S + n];
                    auto grads =
                        dsm_variant_backward(mode, cs.base, filt, (*resps)[j][c], delta);
                    for (std::size_t k = 0; k < kf; ++k)
                        for (std::size_t n = 0; n < S; ++n)
                            dw[((j * C + c) * kf + k) * S + n] += grads.d_filter.at2(k, n);
                    // each base column is a unit-normalized crop of the map;
                    // chain through the normalization Jacobian, then scatter
                    for (std::size_t n = 0; n < S; ++n) {
                        bool any = false;
                        double dot = 0.0;
                        for (std::size_t k = 0; k < kf; ++k) {
                            const double gv = grads.d_base.at2(k, n);
                            any = any || gv != 0.0;
                            dot += gv * cs.base.at2(k, n);
                        }
                        if (!any) continue;
                        const double inv_norm = 1.0 / (*norms)[j][n];
                        Tensor gcrop({r, r, ch});
                        for (std::size_t k = 0; k < kf; ++k)
                            gcrop[k] = (grads.d_base.at2(k, n) -
                                        cs.base.at2(k, n) * dot) *
                                       inv_norm;
                        const Box& b = cs.boxes[n];
                        Box mb{b.x1 / map_stride, b.y1 / map_stride, b.x2 / map_stride,
                               b.y2 / map_stride};
                        crop_resize_backward(gcrop, mb, dmap);
                    }
                }
            }
            tp.accumulate(map, dmap);
            tp.accumulate(w_dsm, dw);
        };
    });
}

// Weighted binary cross-entropy on anchor objectness scores; the anchor
// features are treated as constants, only the scorer weights learn.
inline Var scorer_loss(Tape& t, Var w_score, Tensor feats, std::vector<double> targets,
                       double pos_weight) {
    const Tensor& w = t.value(w_score);
    const std::size_t A = feats.dim(0), F = feats.dim(1);
    if (w.dim(0) != F || targets.size() != A)
        throw DimensionError("scorer_loss: shape mismatch");
    auto softplus = [](double x) { return std::log1p(std::exp(-std::fabs(x))) + std::max(x, 0.0); };
    std::vector<double> s(A, 0.0);
    double loss = 0.0;
    for (std::size_t a = 0; a < A; ++a) {
        for (std::size_t f = 0; f < F; ++f) s[a] += feats.at2(a, f) * w[f];
        loss += pos_weight * targets[a] * softplus(-s[a]) + (1.0 - targets[a]) * softplus(s[a]);
    }
    loss /= static_cast<double>(A);
    return t.record(Tensor::scalar(loss), "scorer_loss",
                    [w_score, feats = std::move(feats), targets = std::move(targets), s,
                     pos_weight, A, F](Var o) {
        return [w_score, feats, targets, s, pos_weight, A, F, o](Tape& tp) {
            const double g = tp.grad(o)[0];
            auto sigmoid = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
            Tensor dw({F, 1});
            for (std::size_t a = 0; a < A; ++a) {
                const double ds = g / static_cast<double>(A) *
                                  (-pos_weight * targets[a] * sigmoid(-s[a]) +
                                   (1.0 - targets[a]) * sigmoid(s[a]));
                if (ds == 0.0) continue;
                for (std::size_t f = 0; f < F; ++f) dw[f] += ds * feats.at2(a, f);
            }
            tp.accumulate(w_score, dw);
        };
    });
}

}  // namespace mops

// ---- model forward ---------------------------------------------------------

struct TapeModel {
    const ModelConfig* cfg = nullptr;
    std::size_t classes = 0, canvas = 0, feat = 0, ch = 0;
    double stride = 0.0;
    std::vector<Box> anchors;
    // parameter vars, bound once per tape
    Var conv1, conv2, conv3, conv4, w_global, w_op, w_region, w_score, w_dsm;
};

inline TapeModel bind_params(Tape& t, const ModelConfig& cfg, Params& p, std::size_t classes,
                             std::size_t canvas) {
    if (canvas % 8 != 0) throw ConfigError("canvas must be divisible by 8");
    TapeModel tm;
    tm.cfg = &cfg;
    tm.classes = classes;
    tm.canvas = canvas;
    tm.feat = canvas / 8;
    tm.ch = cfg.channels;
    tm.stride = 8.0;
    AnchorConfig ac;
    ac.scales = cfg.anchor_scales;
    ac.aspect_ratios = cfg.anchor_ratios;
    ac.feature_w = ac.feature_h = tm.feat;
    ac.stride = tm.stride;
    ac.image_w = ac.image_h = static_cast<double>(canvas);
    tm.anchors = generate_anchors(ac);
    tm.conv1 = t.leaf(p.get("conv1"));
    tm.conv2 = t.leaf(p.get("conv2"));
    tm.conv3 = t.leaf(p.get("conv3"));
    tm.conv4 = t.leaf(p.get("conv4"));
    tm.w_global = t.leaf(p.get("w_global"));
    tm.w_op = t.leaf(p.get("w_op"));
    tm.w_region = t.leaf(p.get("w_region"));
    tm.w_score = t.leaf(p.get("w_score"));
    tm.w_dsm = t.leaf(p.get("w_dsm"));
    return tm;
}

struct ModelOutput {
    Var logits;            // fused (1, C)
    Var map;               // feat x feat x ch
    Var region_features;   // (K, ch) when proposals are enabled
    std::vector<Proposal> proposals;
    Tensor anchor_features;  // (A, ch), value-only, for the scorer loss
    std::shared_ptr<mops::DsmDebug> dsm_debug;
};

// Mean channel vector of an RoI on a plain tensor (no tape).
inline void roi_mean_into(const Tensor& map, const Box& map_box, std::size_t r, double* out) {
    const std::size_t C = map.dim(2);
    Tensor crop = crop_resize(map, map_box, r, r);
    for (std::size_t c = 0; c < C; ++c) out[c] = 0.0;
    for (std::size_t i = 0; i < r * r; ++i)
        for (std::size_t c = 0; c < C; ++c) out[c] += crop[i * C + c];
    for (std::size_t c = 0; c < C; ++c) out[c] /= static_cast<double>(r * r);
}

// include_op_head: the oriented-pooling head enters the loss only once its
// training stage starts; evaluation always fuses every enabled head.
inline ModelOutput model_forward(Tape& t, const TapeModel& tm, const Tensor& image,
                                 bool include_op_head = true) {
    const ModelConfig& cfg = *tm.cfg;
    ModelOutput mo;

    Var x = t.leaf(image);
    Var h1 = ops::relu(t, ops::conv2d(t, x, tm.conv1, 2, 1));
    Var h2 = ops::relu(t, ops::conv2d(t, h1, tm.conv2, 2, 1));
    Var h3 = ops::relu(t, ops::conv2d(t, h2, tm.conv3, 2, 1));
    mo.map = ops::relu(t, ops::conv2d(t, h3, tm.conv4, 1, 1));

    // global head
    Var fused;
    switch (cfg.pooling) {
        case GlobalPooling::kGAP:
            fused = ops::matmul(t, mops::gap_hwc(t, mo.map), tm.w_global);
            break;
        case GlobalPooling::kGMP:
            fused = ops::matmul(t, mops::gmp_hwc(t, mo.map), tm.w_global);
            break;
        case GlobalPooling::kOP:
            if (include_op_head)
                fused = mops::op_logits(t, mo.map, tm.w_op, cfg.op_patch, cfg.op_grid,
                                        patch_descriptor_from_string(cfg.op_descriptor));
            break;
    }
    if (!fused.valid() && !cfg.use_proposals)
        throw ConfigError("model_forward: no active head (OP deferred without proposals)");

    if (cfg.use_proposals) {
        const Tensor& mapv = t.value(mo.map);
        const Tensor& ws = t.value(tm.w_score);
        const std::size_t A = tm.anchors.size();
        const std::size_t r = cfg.region_size;
        mo.anchor_features = Tensor({A, tm.ch});
        std::vector<ScoredBox> scored(A);
        for (std::size_t a = 0; a < A; ++a) {
            const Box& b = tm.anchors[a];
            Box mb{b.x1 / tm.stride, b.y1 / tm.stride, b.x2 / tm.stride, b.y2 / tm.stride};
            roi_mean_into(mapv, mb, r, mo.anchor_features.data() + a * tm.ch);
            double s = 0.0;
            for (std::size_t c = 0; c < tm.ch; ++c)
                s += mo.anchor_features.at2(a, c) * ws[c];
            scored[a] = {b, s};
        }
        std::vector<ScoredBox> kept = nms(scored, cfg.nms_iou);
        if (kept.size() < cfg.parts) {
            // pad from the full ranked list (rare: tiny maps, aggressive NMS)
            std::vector<ScoredBox> ranked = scored;
            std::sort(ranked.begin(), ranked.end(), [](const ScoredBox& a, const ScoredBox& b) {
                if (a.score != b.score) return a.score > b.score;
                return a.box.x1 < b.box.x1;
            });
            for (const ScoredBox& cand : ranked) {
                if (kept.size() >= cfg.parts) break;
                bool dup = false;
                for (const ScoredBox& k : kept)
                    dup = dup || (k.box.x1 == cand.box.x1 && k.box.y1 == cand.box.y1 &&
                                  k.box.x2 == cand.box.x2 && k.box.y2 == cand.box.y2);
                if (!dup) kept.push_back(cand);
            }
        }
        std::vector<Proposal> pool;
        for (const ScoredBox& k : kept) {
            Proposal p;
            p.box = k.box;
            p.score = k.score;
            pool.push_back(p);
        }
        mo.proposals = select_top_k(
            pool, [](const Proposal& p) { return p.score; }, cfg.parts);
        assign_vertices(mo.proposals);

        // scale mining runs first: the region head then reads each region's
        // features at the mined scale instead of the raw proposal box
        Var dsm;
        if (cfg.use_dsm)
            dsm = mops::dsm_logits(t, mo.map, tm.w_dsm, mo.proposals, cfg, tm.stride,
                                   static_cast<double>(tm.canvas),
                                   static_cast<double>(tm.canvas), &mo.dsm_debug);

        std::vector<Var> rows;
        for (std::size_t j = 0; j < mo.proposals.size(); ++j) {
            const Box& b = cfg.use_dsm ? mo.dsm_debug->refined[j] : mo.proposals[j].box;
            Box mb{b.x1 / tm.stride, b.y1 / tm.stride, b.x2 / tm.stride, b.y2 / tm.stride};
            rows.push_back(mops::crop_gap(t, mo.map, mb, r));
        }
        mo.region_features = mops::stack_rows(t, rows);
        Var part = mops::mean_rows(t, ops::matmul(t, mo.region_features, tm.w_region));
        fused = fused.valid() ? ops::add(t, fused, part) : part;
        if (dsm.valid()) fused = ops::add(t, fused, dsm);
    }
    mo.logits = fused;
    return mo;
}

// Anchor objectness targets: 1 when the anchor center is within `radius` of a
// keypoint.
inline std::vector<double> anchor_targets(const std::vector<Box>& anchors,
                                          const std::vector<Point>& keypoints, double radius) {
    std::vector<double> t(anchors.size(), 0.0);
    for (std::size_t a = 0; a < anchors.size(); ++a) {
        const Point c = anchors[a].center();
        for (const Point& k : keypoints)
            if (point_distance(c, k) <= radius) {
                t[a] = 1.0;
                break;
            }
    }
    return t;
}

struct Prediction {
    std::size_t label = 0;
    std::vector<Proposal> proposals;  // with scale-refined boxes when DSM is on
};

inline Prediction predict(const ModelConfig& cfg, Params& params, std::size_t classes,
                          std::size_t canvas, const Tensor& image) {
    Tape t;
    TapeModel tm = bind_params(t, cfg, params, classes, canvas);
    ModelOutput mo = model_forward(t, tm, image);
    const Tensor& logits = t.value(mo.logits);
    Prediction pred;
    for (std::size_t c = 1; c < logits.numel(); ++c)
        if (logits[c] > logits[pred.label]) pred.label = c;
    pred.proposals = mo.proposals;
    if (cfg.use_dsm && mo.dsm_debug) {
        for (std::size_t j = 0; j < pred.proposals.size(); ++j) {
            const std::size_t sel = mo.dsm_debug->selected_candidate[j][pred.label];
            pred.proposals[j].box = mo.dsm_debug->candidate_boxes[j][sel];
        }
    }
    return pred;
}

}  // namespace ssanet
