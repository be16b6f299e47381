#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "ssanet/checkpoint.hpp"
#include "ssanet/config.hpp"
#include "ssanet/dataset.hpp"
#include "ssanet/mac_loss.hpp"
#include "ssanet/model.hpp"

namespace ssanet {

// Training images are never rotated; the rotated split exists only at test
// time. Asserted here and echoed into reports.
constexpr bool kTrainRotationAugmentation = false;

inline std::size_t ssa_threads() {
    if (const char* env = std::getenv("SSA_THREADS")) {
        const long v = std::atol(env);
        if (v >= 1) return static_cast<std::size_t>(std::min<long>(v, 64));
    }
    const unsigned hc = std::thread::hardware_concurrency();
    return hc == 0 ? 1 : std::min<unsigned>(hc, 16);
}

struct MetricsRow {
    std::size_t step = 0;
    int stage = 0;
    double lr = 0.0;
    double ce = 0.0;
    double lm = 0.0;
    double total = 0.0;
    double acc = 0.0;  // batch accuracy
};

struct TrainResult {
    Params params;
    std::vector<MetricsRow> metrics;
};

namespace detail {

// Parameters a variant actually uses.
inline std::set<std::string> used_params(const ModelConfig& cfg) {
    std::set<std::string> u = {"conv1", "conv2", "conv3", "conv4"};
    if (cfg.pooling == GlobalPooling::kOP)
        u.insert("w_op");
    else
        u.insert("w_global");
    if (cfg.use_proposals) {
        u.insert("w_score");
        u.insert("w_region");
    }
    if (cfg.use_dsm) u.insert("w_dsm");
    return u;
}

struct StagePlan {
    std::set<std::string> active;                 // parameters updated this stage
    std::vector<std::pair<std::string, double>> lr_mult;  // per-param multiplier
    double mult_of(const std::string& n) const {
        for (const auto& [k, v] : lr_mult)
            if (k == n) return v;
        return 1.0;
    }
};

// Stage 1: backbone, proposal scorer, region/global classifiers, scale
// filters. Stage 2: the oriented-pooling head, with the global classifier at
// a third of the stage lr. Stage 3: part-net fine-tuning (proposal scorer +
// backbone tail) with scale filters and oriented pooling fixed.
inline StagePlan stage_plan(const ModelConfig& cfg, int stage, bool joint) {
    const std::set<std::string> used = used_params(cfg);
    StagePlan p;
    auto keep_used = [&](std::set<std::string> want) {
        std::set<std::string> out;
        for (const auto& n : want)
            if (used.count(n)) out.insert(n);
        return out;
    };
    if (joint) {
        p.active = used;
        return p;
    }
    switch (stage) {
        case 1:
            p.active = keep_used(
                {"conv1", "conv2", "conv3", "conv4", "w_global", "w_score", "w_region", "w_dsm"});
            break;
        case 2:
            p.active = keep_used({"w_op", "w_global"});
            p.lr_mult = {{"w_global", 1.0 / 3.0}};
            break;
        default:
            p.active = keep_used({"w_score", "conv4"});
            break;
    }
    return p;
}

}  // namespace detail

// Full 3-stage schedule (or the joint single-stage variant). Deterministic
// under (config, seed). On a numeric abort the last epoch-boundary parameters
// are saved (when out_dir is nonempty) and the error is rethrown.
inline TrainResult train_3stage(const ExperimentConfig& cfg, const Dataset& ds,
                                const std::string& out_dir = "") {
    static_assert(!kTrainRotationAugmentation, "training must not rotate images");
    const std::size_t B = std::max<std::size_t>(2, cfg.train.batch);
    const std::size_t E = cfg.train.epochs;
    if (E == 0) throw ConfigError("train.epochs must be >= 1");

    std::mt19937 init_rng(cfg.seed ^ 0x9E3779B9u);
    TrainResult res;
    res.params = init_params(cfg.model, ds.classes, init_rng);
    NamedTensors velocities = res.params.items;
    for (auto& [n, t] : velocities) t.fill(0.0);

    // stage boundaries in epochs
    const std::size_t b1 = static_cast<std::size_t>(
        std::lround(cfg.train.stage_fractions[0] * static_cast<double>(E)));
    const std::size_t b2 = static_cast<std::size_t>(std::lround(
        (cfg.train.stage_fractions[0] + cfg.train.stage_fractions[1]) * static_cast<double>(E)));
    const std::size_t decay_epoch =
        static_cast<std::size_t>(std::lround(cfg.train.decay_at * static_cast<double>(E)));
    const double kp_radius = static_cast<double>(ds.canvas) / 8.0;

    std::mt19937 shuffle_rng(cfg.seed * 7919u + 17u);
    std::vector<std::size_t> order(ds.train.size());
    std::iota(order.begin(), order.end(), 0);

    Params last_good = res.params;
    std::size_t step = 0;
    try {
        for (std::size_t epoch = 0; epoch < E; ++epoch) {
            const int stage = cfg.train.joint_single_stage ? 1
                              : (epoch < b1 ? 1 : (epoch < b2 ? 2 : 3));
            const detail::StagePlan plan =
                detail::stage_plan(cfg.model, stage, cfg.train.joint_single_stage);
            const double lr =
                cfg.train.lr * (epoch >= decay_epoch ? cfg.train.lr_decay : 1.0);
            std::shuffle(order.begin(), order.end(), shuffle_rng);

            for (std::size_t off = 0; off + B <= order.size(); off += B, ++step) {
                Tape t;
                TapeModel tm = bind_params(t, cfg.model, res.params, ds.classes, ds.canvas);
                Var ce_sum, sc_sum;
                std::vector<Var> norm_feats;
                std::vector<std::size_t> labels;
                std::size_t correct = 0;
                const bool include_op = cfg.train.joint_single_stage || stage >= 2;
                for (std::size_t i = 0; i < B; ++i) {
                    const LabeledImage& img = ds.train[order[off + i]];
                    ModelOutput mo = model_forward(t, tm, img.image, include_op);
                    Var ce = ops::softmax_cross_entropy(t, mo.logits, {img.label});
                    ce_sum = ce_sum.valid() ? ops::add(t, ce_sum, ce) : ce;
                    const Tensor& lg = t.value(mo.logits);
                    std::size_t am = 0;
                    for (std::size_t c = 1; c < lg.numel(); ++c)
                        if (lg[c] > lg[am]) am = c;
                    correct += (am == img.label);
                    labels.push_back(img.label);
                    if (cfg.model.use_proposals) {
                        norm_feats.push_back(ops::l2_normalize(t, mo.region_features, 1));
                        Var sc = mops::scorer_loss(t, tm.w_score, mo.anchor_features,
                                                   anchor_targets(tm.anchors, img.keypoints,
                                                                  kp_radius),
                                                   4.0);
                        sc_sum = sc_sum.valid() ? ops::add(t, sc_sum, sc) : sc;
                    }
                }
                const double inv_b = 1.0 / static_cast<double>(B);
                Var total = ops::scale(t, ce_sum, inv_b);
                const double ce_val = t.value(total)[0];
                double lm_val = 0.0;
                if (cfg.model.lambda > 0.0 && cfg.model.use_proposals && B >= 2) {
                    Var lm_sum;
                    std::size_t pairs = 0;
                    for (std::size_t xi = 0; xi < B; ++xi)
                        for (std::size_t tau = 0; tau < B; ++tau) {
                            if (xi == tau) continue;
                            if (cfg.model.mac_same_class_only && labels[xi] != labels[tau])
                                continue;
                            Var lm = mac_pair_loss_var(t, norm_feats[xi], norm_feats[tau]);
                            lm_sum = lm_sum.valid() ? ops::add(t, lm_sum, lm) : lm;
                            ++pairs;
                        }
                    if (pairs > 0) {
                        Var lm_mean = ops::scale(t, lm_sum, 1.0 / static_cast<double>(pairs));
                        lm_val = t.value(lm_mean)[0];
                        total = ops::add(t, total, ops::scale(t, lm_mean, cfg.model.lambda));
                    }
                }
                if (sc_sum.valid()) total = ops::add(t, total, ops::scale(t, sc_sum, inv_b));
                t.backward(total);

                const std::pair<const char*, Var> bound[] = {
                    {"conv1", tm.conv1},     {"conv2", tm.conv2},   {"conv3", tm.conv3},
                    {"conv4", tm.conv4},     {"w_global", tm.w_global}, {"w_op", tm.w_op},
                    {"w_region", tm.w_region}, {"w_score", tm.w_score}, {"w_dsm", tm.w_dsm}};
                for (const auto& [name, var] : bound) {
                    if (!plan.active.count(name)) continue;
                    Tensor& param = res.params.get(name);
                    Tensor* vel = nullptr;
                    for (auto& [vn, vt] : velocities)
                        if (vn == name) vel = &vt;
                    sgd_momentum_update(param, *vel, t.grad(var), lr * plan.mult_of(name),
                                        cfg.train.momentum, cfg.train.weight_decay);
                }
                res.metrics.push_back({step, stage, lr, ce_val, lm_val,
                                       t.value(total)[0],
                                       static_cast<double>(correct) * inv_b});
            }
            last_good = res.params;
        }
    } catch (const NumericError& e) {
        std::string ref;
        if (!out_dir.empty()) {
            const std::string path = out_dir + "/last_good.ckpt";
            save_checkpoint(path, last_good.items);
            ref = "; last good checkpoint: " + path;
        }
        throw NumericError(std::string(e.what()) + ref);
    }
    return res;
}

// ---- evaluation -------------------------------------------------------------

inline double evaluate_accuracy(const ModelConfig& cfg, Params& params, std::size_t classes,
                                std::size_t canvas, const std::vector<LabeledImage>& split,
                                std::size_t threads = 1) {
    if (split.empty()) throw ContractError("evaluate_accuracy: empty split");
    std::vector<unsigned char> ok(split.size(), 0);
    auto work = [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i)
            ok[i] = predict(cfg, params, classes, canvas, split[i].image).label == split[i].label;
    };
    threads = std::max<std::size_t>(1, std::min(threads, split.size()));
    if (threads == 1) {
        work(0, split.size());
    } else {
        std::vector<std::thread> pool;
        const std::size_t chunk = (split.size() + threads - 1) / threads;
        for (std::size_t t0 = 0; t0 < split.size(); t0 += chunk)
            pool.emplace_back(work, t0, std::min(t0 + chunk, split.size()));
        for (auto& th : pool) th.join();
    }
    std::size_t correct = 0;
    for (unsigned char v : ok) correct += v;
    return static_cast<double>(correct) / static_cast<double>(split.size());
}

struct RobustnessReport {
    double clean = 0.0, rotated = 0.0, shrunk = 0.0;
};

inline RobustnessReport evaluate_robustness(const ModelConfig& cfg, Params& params,
                                            std::size_t classes, std::size_t canvas,
                                            const std::vector<LabeledImage>& test,
                                            std::size_t threads = 1) {
    RobustnessReport r;
    r.clean = evaluate_accuracy(cfg, params, classes, canvas, test, threads);
    r.rotated = evaluate_accuracy(cfg, params, classes, canvas, rotated_split(test), threads);
    r.shrunk = evaluate_accuracy(cfg, params, classes, canvas, shrunk_split(test), threads);
    return r;
}

// Mean center-to-keypoint distance of the selected proposals over a split,
// plus the per-region means. Uses the scale-refined boxes when DSM is on.
struct ProposalDistance {
    double mean = 0.0;
    std::vector<double> per_region;
};

inline ProposalDistance proposal_distance(const ModelConfig& cfg, Params& params,
                                          std::size_t classes, std::size_t canvas,
                                          const std::vector<LabeledImage>& split) {
    if (!cfg.use_proposals) throw ContractError("proposal_distance: proposals disabled");
    std::vector<std::vector<Proposal>> props;
    std::vector<std::vector<Point>> kps;
    for (const LabeledImage& img : split) {
        props.push_back(predict(cfg, params, classes, canvas, img.image).proposals);
        kps.push_back(img.keypoints);
    }
    ProposalDistance out;
    out.per_region = mean_distance_per_region(props, kps, cfg.parts);
    double s = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < props.size(); ++i) {
        const auto d = center_keypoint_distance(props[i], kps[i]);
        for (double v : d) {
            s += v;
            ++n;
        }
    }
    out.mean = n ? s / static_cast<double>(n) : 0.0;
    return out;
}

// ---- ablation ----------------------------------------------------------------

struct VariantResult {
    std::string name;
    double clean = 0.0, rotated = 0.0, shrunk = 0.0;
    double prop_dist = -1.0;  // -1 when proposals are off
};

inline ModelConfig variant_config(const ModelConfig& base, const std::string& name) {
    ModelConfig m = base;
    m.use_proposals = false;
    m.use_dsm = false;
    m.pooling = GlobalPooling::kGAP;
    m.lambda = 0.0;
    m.dsm_mode = DsmMode::kFull;
    if (name == "backbone") return m;
    m.use_proposals = true;
    if (name == "proposals") return m;
    m.lambda = base.lambda;
    if (name == "mac") return m;
    if (name == "gmp") {
        m.pooling = GlobalPooling::kGMP;
        return m;
    }
    if (name == "mac_op") {
        m.pooling = GlobalPooling::kOP;
        return m;
    }
    m.use_dsm = true;
    if (name == "mac_dsm") return m;
    if (name == "dsm_fixed") {
        m.dsm_mode = DsmMode::kFixed;
        return m;
    }
    if (name == "dsm_single") {
        m.dsm_mode = DsmMode::kSingle;
        return m;
    }
    if (name == "full") {
        m.pooling = GlobalPooling::kOP;
        return m;
    }
    throw ConfigError("unknown ablation variant: " + name);
}

inline const std::vector<std::string>& ablation_variants() {
    static const std::vector<std::string> v = {"backbone", "proposals", "mac",       "mac_op",
                                               "mac_dsm",  "full",      "dsm_fixed", "dsm_single",
                                               "gmp"};
    return v;
}

inline VariantResult run_variant(const ExperimentConfig& base, const Dataset& ds,
                                 const std::string& name) {
    ExperimentConfig cfg = base;
    cfg.model = variant_config(base.model, name);
    TrainResult tr = train_3stage(cfg, ds);
    VariantResult out;
    out.name = name;
    RobustnessReport rb =
        evaluate_robustness(cfg.model, tr.params, ds.classes, ds.canvas, ds.test);
    out.clean = rb.clean;
    out.rotated = rb.rotated;
    out.shrunk = rb.shrunk;
    if (cfg.model.use_proposals)
        out.prop_dist =
            proposal_distance(cfg.model, tr.params, ds.classes, ds.canvas, ds.test).mean;
    return out;
}

struct AblationStats {
    std::vector<double> per_seed;
    double mean = 0.0, stderr_ = 0.0;
};

inline AblationStats make_stats(const std::vector<double>& xs) {
    AblationStats s;
    s.per_seed = xs;
    for (double v : xs) s.mean += v;
    s.mean /= static_cast<double>(xs.size());
    if (xs.size() > 1) {
        double var = 0.0;
        for (double v : xs) var += (v - s.mean) * (v - s.mean);
        var /= static_cast<double>(xs.size() - 1);
        s.stderr_ = std::sqrt(var / static_cast<double>(xs.size()));
    }
    return s;
}

// All (seed, variant) trainings, parallel up to `threads`, deterministic
// regardless of scheduling (every job owns its RNGs and dataset reference).
inline nlohmann::ordered_json run_ablation(const ExperimentConfig& base,
                                           const std::vector<unsigned>& seeds,
                                           std::size_t threads = 1) {
    const auto& variants = ablation_variants();
    std::vector<Dataset> datasets;
    for (unsigned seed : seeds) {
        SyntheticDatasetSpec spec = base.dataset;
        spec.seed = seed;
        datasets.push_back(generate_dataset(spec));
    }

    struct Job {
        std::size_t seed_idx, var_idx;
    };
    std::vector<Job> jobs;
    for (std::size_t s = 0; s < seeds.size(); ++s)
        for (std::size_t v = 0; v < variants.size(); ++v) jobs.push_back({s, v});
    std::vector<VariantResult> results(jobs.size());

    std::atomic<std::size_t> next{0};
    auto worker = [&]() {
        while (true) {
            const std::size_t i = next.fetch_add(1);
            if (i >= jobs.size()) return;
            ExperimentConfig cfg = base;
            cfg.seed = seeds[jobs[i].seed_idx];
            results[i] = run_variant(cfg, datasets[jobs[i].seed_idx], variants[jobs[i].var_idx]);
        }
    };
    threads = std::max<std::size_t>(1, std::min(threads, jobs.size()));
    if (threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t t0 = 0; t0 < threads; ++t0) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }

    auto collect = [&](const std::string& name, auto getter) {
        std::vector<double> xs;
        for (std::size_t s = 0; s < seeds.size(); ++s)
            for (std::size_t i = 0; i < jobs.size(); ++i)
                if (jobs[i].seed_idx == s && variants[jobs[i].var_idx] == name)
                    xs.push_back(getter(results[i]));
        return make_stats(xs);
    };
    auto stats_json = [](const AblationStats& s) {
        return nlohmann::ordered_json{
            {"mean", s.mean}, {"stderr", s.stderr_}, {"per_seed", s.per_seed}};
    };

    nlohmann::ordered_json rep;
    rep["seeds"] = seeds;
    rep["rotation_augmentation"] = kTrainRotationAugmentation;
    nlohmann::ordered_json main_tbl;
    for (const std::string name :
         {"backbone", "proposals", "mac", "mac_op", "mac_dsm", "full"})
        main_tbl[name] = stats_json(collect(name, [](const VariantResult& r) { return r.clean; }));
    rep["main"] = main_tbl;

    nlohmann::ordered_json dsm_tbl;
    dsm_tbl["fixed"] =
        stats_json(collect("dsm_fixed", [](const VariantResult& r) { return r.clean; }));
    dsm_tbl["single"] =
        stats_json(collect("dsm_single", [](const VariantResult& r) { return r.clean; }));
    dsm_tbl["full"] =
        stats_json(collect("mac_dsm", [](const VariantResult& r) { return r.clean; }));
    rep["dsm"] = dsm_tbl;

    nlohmann::ordered_json pool_tbl;
    pool_tbl["gap"] = stats_json(collect("mac", [](const VariantResult& r) { return r.clean; }));
    pool_tbl["gmp"] = stats_json(collect("gmp", [](const VariantResult& r) { return r.clean; }));
    pool_tbl["op"] = stats_json(collect("mac_op", [](const VariantResult& r) { return r.clean; }));
    rep["pooling"] = pool_tbl;

    nlohmann::ordered_json rob;
    for (const std::string name : {"backbone", "full"}) {
        auto clean = collect(name, [](const VariantResult& r) { return r.clean; });
        auto rot = collect(name, [](const VariantResult& r) { return r.rotated; });
        auto shr = collect(name, [](const VariantResult& r) { return r.shrunk; });
        rob[name] = nlohmann::ordered_json{{"clean", stats_json(clean)},
                                           {"rotated", stats_json(rot)},
                                           {"shrunk", stats_json(shr)},
                                           {"rotation_drop", clean.mean - rot.mean},
                                           {"scale_drop", clean.mean - shr.mean}};
    }
    rep["robustness"] = rob;

    nlohmann::ordered_json pd;
    pd["full"] = stats_json(collect("full", [](const VariantResult& r) { return r.prop_dist; }));
    pd["no_dsm"] =
        stats_json(collect("mac_op", [](const VariantResult& r) { return r.prop_dist; }));
    rep["proposal_distance"] = pd;
    return rep;
}

}  // namespace ssanet
