// Experiment driver: train / ablate / gradcheck / bench / report.
// Exit codes: 0 ok, 2 configuration error, 3 numeric failure.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ssanet/config.hpp"
#include "ssanet/gradcheck.hpp"
#include "ssanet/model.hpp"
#include "ssanet/trainer.hpp"

namespace fs = std::filesystem;
using namespace ssanet;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;

void write_atomic(const fs::path& path, const std::string& content) {
    fs::create_directories(path.parent_path().empty() ? "." : path.parent_path());
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw ConfigError("cannot write " + tmp.string());
        os << content;
    }
    fs::rename(tmp, path);
}

ExperimentConfig load_or_default(const std::string& config_path, long seed_override,
                                 const std::string& out_override) {
    ExperimentConfig cfg;
    if (!config_path.empty()) cfg = load_config(config_path);
    if (seed_override >= 0) cfg.seed = static_cast<unsigned>(seed_override);
    if (!out_override.empty()) cfg.out_dir = out_override;
    return cfg;
}

nlohmann::ordered_json eval_report_json(const ExperimentConfig& cfg, Params& params,
                                        const Dataset& ds) {
    RobustnessReport rb =
        evaluate_robustness(cfg.model, params, ds.classes, ds.canvas, ds.test, ssa_threads());
    nlohmann::ordered_json rep;
    rep["seed"] = cfg.seed;
    rep["rotation_augmentation"] = kTrainRotationAugmentation;
    rep["accuracy"] = nlohmann::ordered_json{
        {"clean", rb.clean}, {"rotated", rb.rotated}, {"shrunk", rb.shrunk}};
    if (cfg.model.use_proposals) {
        ProposalDistance pd =
            proposal_distance(cfg.model, params, ds.classes, ds.canvas, ds.test);
        rep["proposal_distance"] =
            nlohmann::ordered_json{{"mean", pd.mean}, {"per_region", pd.per_region}};
    }
    rep["config"] = config_to_json(cfg);
    return rep;
}

std::string metrics_csv(const std::vector<MetricsRow>& rows) {
    std::ostringstream os;
    os << "step,stage,lr,ce,lm,acc\n";
    os.precision(10);
    for (const MetricsRow& r : rows)
        os << r.step << "," << r.stage << "," << r.lr << "," << r.ce << "," << r.lm << ","
           << r.acc << "\n";
    return os.str();
}

int cmd_train(const std::string& config_path, long seed, const std::string& out, bool force) {
    ExperimentConfig cfg = load_or_default(config_path, seed, out);
    const fs::path dir(cfg.out_dir);
    const fs::path report_path = dir / "eval_report.json";
    if (fs::exists(report_path) && !force) {
        std::cerr << "refusing to overwrite completed run " << dir << " (use --force)\n";
        return kExitConfig;
    }
    fs::create_directories(dir);

    SyntheticDatasetSpec spec = cfg.dataset;
    spec.seed = cfg.seed;
    Dataset ds = generate_dataset(spec);
    TrainResult tr = train_3stage(cfg, ds, cfg.out_dir);

    write_atomic(dir / "metrics.csv", metrics_csv(tr.metrics));
    save_checkpoint((dir / "model.ckpt").string(), tr.params.items);

    if (cfg.model.use_proposals) {
        std::ostringstream os;
        for (std::size_t i = 0; i < ds.test.size(); ++i) {
            Prediction p = predict(cfg.model, tr.params, ds.classes, ds.canvas, ds.test[i].image);
            for (Proposal& pr : p.proposals) {
                pr.image_id = i;
                os << proposal_to_json(pr).dump() << "\n";
            }
        }
        write_atomic(dir / "proposals.jsonl", os.str());
    }
    nlohmann::ordered_json rep = eval_report_json(cfg, tr.params, ds);
    write_atomic(report_path, rep.dump(2) + "\n");
    std::cout << "run complete: " << report_path << "\n"
              << rep["accuracy"].dump() << "\n";
    return kExitOk;
}

int cmd_ablate(const std::string& config_path, long seed, const std::string& out,
               std::size_t trials, bool force) {
    ExperimentConfig cfg = load_or_default(config_path, seed, out);
    const fs::path dir(cfg.out_dir);
    const fs::path report_path = dir / "ablation.json";
    if (fs::exists(report_path) && !force) {
        std::cerr << "refusing to overwrite completed run " << dir << " (use --force)\n";
        return kExitConfig;
    }
    if (trials < 1) throw ConfigError("--trials must be >= 1");
    std::vector<unsigned> seeds;
    for (std::size_t i = 0; i < trials; ++i) seeds.push_back(cfg.seed + static_cast<unsigned>(i));
    nlohmann::ordered_json rep = run_ablation(cfg, seeds, ssa_threads());
    rep["config"] = config_to_json(cfg);
    write_atomic(report_path, rep.dump(2) + "\n");
    std::cout << "ablation complete: " << report_path << "\n";
    for (const auto& [name, stats] : rep["main"].items())
        std::printf("  %-10s %.4f +- %.4f\n", name.c_str(), stats["mean"].get<double>(),
                    stats["stderr"].get<double>());
    return kExitOk;
}

// ---- gradcheck ---------------------------------------------------------------

struct GradSuiteResult {
    std::string op;
    double max_rel_err = 0.0;
};

double check_dsm_mode(DsmMode mode, std::mt19937& rng, std::size_t trials) {
    double worst = 0.0;
    std::size_t done = 0;
    while (done < trials) {
        const std::size_t K = 3, S = 5;
        Tensor base = Tensor::randn({K, S}, rng);
        Tensor filt = Tensor::randn({K, S}, rng);
        auto fwd = dsm_forward(mode, base, filt);
        if (mode != DsmMode::kFixed) {
            // resample tie-adjacent instances
            std::vector<double> s = fwd.per_shift;
            std::sort(s.begin(), s.end());
            if (s.size() >= 2 && s.back() - s[s.size() - 2] < 1e-3) continue;
        }
        ++done;
        auto g = dsm_variant_backward(mode, base, filt, fwd, 1.0);
        auto f = [&](const std::vector<Tensor>& in) {
            return dsm_forward(mode, in[0], in[1]).y;
        };
        worst = std::max(worst,
                         finite_diff_max_rel_err(f, {base, filt}, {g.d_base, g.d_filter}));
    }
    return worst;
}

double check_op(std::mt19937& rng, std::size_t trials) {
    double worst = 0.0;
    std::size_t done = 0;
    while (done < trials) {
        Tensor X = Tensor::randn({5, 5, 2}, rng);
        Tensor w = Tensor::randn({5 * 2, 1}, rng);
        auto o = pool_orientations(extract_patches(X, 1, 1, 5, 5));
        auto r = op_response(o, w);
        double four[4];
        for (int orient = 0; orient < 4; ++orient) {
            const std::vector<double>* g = nullptr;
            switch (orient) {
                case 0: g = &o.gh; break;
                case 1: g = &o.gv; break;
                case 2: g = &o.ghr; break;
                default: g = &o.gvr; break;
            }
            four[orient] = 0.0;
            for (std::size_t l = 0; l < g->size(); ++l) four[orient] += w[l] * (*g)[l];
        }
        std::sort(four, four + 4);
        if (four[3] - four[2] < 1e-3) continue;
        ++done;
        auto g = op_backward(o, w, r, {1.0}, X.shape());
        auto f = [](const std::vector<Tensor>& in) {
            auto o = pool_orientations(extract_patches(in[0], 1, 1, 5, 5));
            return op_response(o, in[1]).y[0];
        };
        worst = std::max(worst, finite_diff_max_rel_err(f, {X, w}, {g.d_input, g.d_weights}));
    }
    return worst;
}

double check_mac(std::mt19937& rng, std::size_t trials) {
    double worst = 0.0;
    for (std::size_t i = 0; i < trials; ++i) {
        const std::size_t B = 2, K = 3, D = 4, C = 3;
        std::vector<Tensor> feats;
        for (std::size_t b = 0; b < B; ++b) feats.push_back(Tensor::randn({K, D}, rng));
        std::vector<std::size_t> labels = {0, 2};
        Tensor fc = Tensor::randn({D, C}, rng);
        auto g = mac_backward(feats, labels, fc, 0.5);
        auto f = [&](const std::vector<Tensor>& in) {
            Tape t;
            std::vector<Var> fv = {t.leaf(in[0]), t.leaf(in[1])};
            return t.value(total_loss_var(t, fv, labels, t.leaf(in[2]), 0.5))[0];
        };
        worst = std::max(worst, finite_diff_max_rel_err(f, {feats[0], feats[1], fc},
                                                        {g.d_features[0], g.d_features[1],
                                                         g.d_fc}));
    }
    return worst;
}

double check_tensor_ops(std::mt19937& rng, std::size_t trials) {
    double worst = 0.0;
    for (std::size_t i = 0; i < trials; ++i) {
        Tensor a = Tensor::randn({3, 4}, rng);
        Tensor b = Tensor::randn({4, 2}, rng);
        Tensor img = Tensor::randn({5, 5, 2}, rng);
        Tensor ker = Tensor::randn({3, 3, 2, 3}, rng);
        {
            auto f = [](const std::vector<Tensor>& in) {
                Tape t;
                Var m = ops::matmul(t, t.leaf(in[0]), t.leaf(in[1]));
                return t.value(ops::sum(t, ops::relu(t, m)))[0];
            };
            Tape t;
            Var av = t.leaf(a), bv = t.leaf(b);
            Var loss = ops::sum(t, ops::relu(t, ops::matmul(t, av, bv)));
            t.backward(loss);
            worst = std::max(worst,
                             finite_diff_max_rel_err(
                                 [&f](const std::vector<Tensor>& in) { return f(in); }, {a, b},
                                 {t.grad(av), t.grad(bv)}));
        }
        {
            auto f = [](const std::vector<Tensor>& in) {
                Tape t;
                Var c = ops::conv2d(t, t.leaf(in[0]), t.leaf(in[1]), 2, 1);
                Var n = ops::l2_normalize(t, ops::reshape(t, c, {9, 3}), 1);
                return t.value(ops::softmax_cross_entropy(t, ops::matmul(t, n, t.leaf(in[2])),
                                                          std::vector<std::size_t>(9, 1)))[0];
            };
            Tensor fc = Tensor::randn({3, 3}, rng);
            Tape t;
            Var iv = t.leaf(img), kv = t.leaf(ker), fv = t.leaf(fc);
            Var c = ops::conv2d(t, iv, kv, 2, 1);
            Var n = ops::l2_normalize(t, ops::reshape(t, c, {9, 3}), 1);
            Var loss = ops::softmax_cross_entropy(t, ops::matmul(t, n, fv),
                                                  std::vector<std::size_t>(9, 1));
            t.backward(loss);
            worst = std::max(worst, finite_diff_max_rel_err(f, {img, ker, fc},
                                                            {t.grad(iv), t.grad(kv), t.grad(fv)}));
        }
    }
    return worst;
}

int cmd_gradcheck(long seed, std::size_t trials) {
    if (trials < 1) throw ConfigError("--trials must be >= 1");
    std::mt19937 rng(seed < 0 ? 12345u : static_cast<unsigned>(seed));
    std::vector<GradSuiteResult> results;
    results.push_back({"tensor_core", check_tensor_ops(rng, trials)});
    results.push_back({"scale_mining_full", check_dsm_mode(DsmMode::kFull, rng, trials)});
    results.push_back({"scale_mining_fixed", check_dsm_mode(DsmMode::kFixed, rng, trials)});
    results.push_back({"scale_mining_single", check_dsm_mode(DsmMode::kSingle, rng, trials)});
    results.push_back({"oriented_pooling", check_op(rng, trials)});
    results.push_back({"alignment_loss", check_mac(rng, trials)});
    bool ok = true;
    for (const auto& r : results) {
        std::printf("%-20s max rel err %.3e %s\n", r.op.c_str(), r.max_rel_err,
                    r.max_rel_err < 1e-4 ? "ok" : "FAIL");
        ok = ok && r.max_rel_err < 1e-4;
    }
    return ok ? kExitOk : kExitNumeric;
}

// ---- bench -------------------------------------------------------------------

int cmd_bench(const std::string& out, std::size_t repeats) {
    std::vector<std::size_t> Ss = {16, 64, 256, 1024, 4096};
    std::vector<std::size_t> Ks = {8, 64};
    std::mt19937 rng(7);
    std::ostringstream csv;
    csv << "S,K,direct_ns,fft_ns,speedup\n";
    std::vector<double> log_s, log_fft;
    double speedup_4096_64 = 0.0;
    for (std::size_t S : Ss)
        for (std::size_t K : Ks) {
            Tensor base = Tensor::randn({K, S}, rng);
            Tensor filt = Tensor::randn({K, S}, rng);
            auto time_ns = [&](auto&& fn) {
                std::vector<double> samples;
                for (std::size_t r = 0; r < repeats; ++r) {
                    auto t0 = std::chrono::steady_clock::now();
                    volatile double sink = fn().y;
                    (void)sink;
                    auto t1 = std::chrono::steady_clock::now();
                    samples.push_back(
                        std::chrono::duration<double, std::nano>(t1 - t0).count());
                }
                std::sort(samples.begin(), samples.end());
                return samples[samples.size() / 2];
            };
            const double dn = time_ns([&] { return dsm_forward_direct(base, filt); });
            const double fn = time_ns([&] { return dsm_forward_fft(base, filt); });
            csv << S << "," << K << "," << dn << "," << fn << "," << dn / fn << "\n";
            if (K == Ks.back()) {
                log_s.push_back(std::log(static_cast<double>(S)));
                log_fft.push_back(std::log(fn));
            }
            if (S == 4096 && K == 64) speedup_4096_64 = dn / fn;
        }
    // least-squares slope of log(time) vs log(S)
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < log_s.size(); ++i) {
        mx += log_s[i];
        my += log_fft[i];
    }
    mx /= static_cast<double>(log_s.size());
    my /= static_cast<double>(log_s.size());
    double num = 0, den = 0;
    for (std::size_t i = 0; i < log_s.size(); ++i) {
        num += (log_s[i] - mx) * (log_fft[i] - my);
        den += (log_s[i] - mx) * (log_s[i] - mx);
    }
    const double slope = num / den;
    std::string body = csv.str();
    if (!out.empty()) {
        write_atomic(fs::path(out) / "bench.csv", body);
        std::cout << "wrote " << (fs::path(out) / "bench.csv") << "\n";
    } else {
        std::cout << body;
    }
    std::printf("fft log-log slope in S: %.3f (target < 1.5)\n", slope);
    std::printf("speedup at S=4096, K=64: %.1fx (target >= 10)\n", speedup_4096_64);
    return (slope < 1.5 && speedup_4096_64 >= 10.0) ? kExitOk : kExitNumeric;
}

// ---- report ------------------------------------------------------------------

int cmd_report(const std::string& run_dir) {
    const fs::path dir(run_dir);
    const fs::path eval_path = dir / "eval_report.json";
    const fs::path abl_path = dir / "ablation.json";
    if (!fs::exists(eval_path) && !fs::exists(abl_path)) {
        std::cerr << "no eval_report.json or ablation.json in " << dir << "\n";
        return kExitConfig;
    }
    if (fs::exists(eval_path)) {
        nlohmann::json rep;
        std::ifstream(eval_path) >> rep;
        std::printf("== accuracy ==\n");
        for (const auto& [k, v] : rep["accuracy"].items())
            std::printf("  %-8s %.4f\n", k.c_str(), v.get<double>());
        if (rep.contains("proposal_distance")) {
            const auto& pd = rep["proposal_distance"];
            std::printf("== proposal distance ==\n  mean %.3f\n", pd["mean"].get<double>());
            std::ostringstream csv;
            const auto& per = pd["per_region"];
            for (std::size_t j = 0; j < per.size(); ++j)
                csv << (j ? "," : "") << "region_" << (j + 1);
            csv << "\n";
            for (std::size_t j = 0; j < per.size(); ++j)
                csv << (j ? "," : "") << per[j].get<double>();
            csv << "\n";
            write_atomic(dir / "distance_series.csv", csv.str());
            std::printf("  wrote %s\n", (dir / "distance_series.csv").c_str());
        }
    }
    if (fs::exists(abl_path)) {
        nlohmann::json rep;
        std::ifstream(abl_path) >> rep;
        std::ostringstream csv;
        csv << "variant,mean,stderr\n";
        std::printf("== ablation ==\n");
        for (const auto& [name, stats] : rep["main"].items()) {
            std::printf("  %-10s %.4f +- %.4f\n", name.c_str(), stats["mean"].get<double>(),
                        stats["stderr"].get<double>());
            csv << name << "," << stats["mean"].get<double>() << ","
                << stats["stderr"].get<double>() << "\n";
        }
        write_atomic(dir / "ablation_table.csv", csv.str());
        std::printf("== robustness drops ==\n");
        for (const auto& [name, r] : rep["robustness"].items())
            std::printf("  %-10s rotation %.4f scale %.4f\n", name.c_str(),
                        r["rotation_drop"].get<double>(), r["scale_drop"].get<double>());
    }
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"scale/orientation-aligned part recognition experiments"};
    app.require_subcommand(1);

    std::string config_path, out_dir, run_dir;
    long seed = -1;
    std::size_t ablate_trials = 5;
    std::size_t grad_trials = 100;
    bool force = false;

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "JSON experiment config");
        cmd->add_option("--seed", seed, "seed override");
        cmd->add_option("--out", out_dir, "output directory override");
        cmd->add_flag("--force", force, "overwrite completed runs");
    };
    CLI::App* train = app.add_subcommand("train", "run the 3-stage training");
    add_common(train);
    CLI::App* ablate = app.add_subcommand("ablate", "train all ablation variants over seeds");
    add_common(ablate);
    ablate->add_option("--trials", ablate_trials, "number of seeds");
    CLI::App* grad = app.add_subcommand("gradcheck", "finite-difference gradient suites");
    grad->add_option("--seed", seed, "seed");
    grad->add_option("--trials", grad_trials, "trials per op");
    CLI::App* bench = app.add_subcommand("bench", "direct vs FFT scale-mining benchmark");
    bench->add_option("--out", out_dir, "output directory for bench.csv");
    std::size_t repeats = 3;
    bench->add_option("--trials", repeats, "timing repeats per size");
    CLI::App* report = app.add_subcommand("report", "summarize a completed run directory");
    report->add_option("--out", run_dir, "run directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (train->parsed()) return cmd_train(config_path, seed, out_dir, force);
        if (ablate->parsed()) return cmd_ablate(config_path, seed, out_dir, ablate_trials, force);
        if (grad->parsed()) return cmd_gradcheck(seed, grad_trials);
        if (bench->parsed()) return cmd_bench(out_dir, repeats);
        if (report->parsed()) return cmd_report(run_dir);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return kExitOk;
}
