#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "ssanet/gradcheck.hpp"
#include "ssanet/trainer.hpp"

using namespace ssanet;

namespace {

ExperimentConfig tiny_config(unsigned seed = 1) {
    ExperimentConfig c;
    c.seed = seed;
    c.dataset.images_per_class = 10;
    c.train.epochs = 3;
    c.train.batch = 4;
    c.train.lr = 0.01;
    return c;
}

bool tensors_equal(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    for (std::size_t i = 0; i < a.numel(); ++i)
        if (a[i] != b[i]) return false;
    return true;
}

Params initial_params(const ExperimentConfig& cfg, std::size_t classes) {
    std::mt19937 rng(cfg.seed ^ 0x9E3779B9u);
    return init_params(cfg.model, classes, rng);
}

}  // namespace

TEST_CASE("short training run completes and reports per-step metrics") {
    ExperimentConfig cfg = tiny_config();
    Dataset ds = generate_dataset([&] {
        auto s = cfg.dataset;
        s.seed = cfg.seed;
        return s;
    }());
    TrainResult tr = train_3stage(cfg, ds);
    CHECK(!tr.metrics.empty());
    for (const MetricsRow& r : tr.metrics) {
        CHECK(r.stage >= 1);
        CHECK(r.stage <= 3);
        CHECK(std::isfinite(r.total));
        CHECK(r.acc >= 0.0);
        CHECK(r.acc <= 1.0);
    }
    RobustnessReport rb = evaluate_robustness(cfg.model, tr.params, ds.classes, ds.canvas, ds.test);
    CHECK(rb.clean >= 0.0);
    CHECK(rb.clean <= 1.0);
    CHECK(rb.rotated >= 0.0);
    CHECK(rb.shrunk >= 0.0);
}

TEST_CASE("freeze correctness: frozen parameters are bit-identical per stage") {
    // Run each stage in isolation by zeroing the other stage fractions and
    // verify the parameters outside the stage's active set never move.
    struct Case {
        std::vector<double> fractions;
        std::vector<std::string> must_freeze;
    };
    const std::vector<Case> cases = {
        // stage 1 trains backbone + scorers; OP head is frozen
        {{1.0, 0.0, 0.0}, {"w_op"}},
        // stage 2 trains only the OP head (+ global classifier, unused here)
        {{0.0, 1.0, 0.0},
         {"conv1", "conv2", "conv3", "conv4", "w_score", "w_region", "w_dsm"}},
        // stage 3 fine-tunes scorer + conv4 only
        {{0.0, 0.0, 1.0},
         {"conv1", "conv2", "conv3", "w_region", "w_dsm", "w_op"}},
    };
    for (const Case& cs : cases) {
        ExperimentConfig cfg = tiny_config(5);
        cfg.train.stage_fractions = cs.fractions;
        cfg.train.epochs = 2;
        Dataset ds = generate_dataset([&] {
            auto s = cfg.dataset;
            s.seed = cfg.seed;
            return s;
        }());
        Params before = initial_params(cfg, ds.classes);
        TrainResult tr = train_3stage(cfg, ds);
        for (const std::string& name : cs.must_freeze)
            CHECK_MESSAGE(tensors_equal(tr.params.get(name), before.get(name)),
                          "parameter " << name << " moved during stages "
                                       << cs.fractions[0] << "/" << cs.fractions[1] << "/"
                                       << cs.fractions[2]);
        // and something must actually have trained
        bool any_moved = false;
        for (const auto& [name, t] : tr.params.items)
            any_moved = any_moved || !tensors_equal(t, before.get(name));
        CHECK(any_moved);
    }
}

TEST_CASE("fusion identity: the fused score is the sum of the enabled heads") {
    ExperimentConfig cfg = tiny_config(9);
    Dataset ds = generate_dataset([&] {
        auto s = cfg.dataset;
        s.seed = cfg.seed;
        return s;
    }());
    Params params = initial_params(cfg, ds.classes);
    const Tensor& image = ds.test[0].image;

    auto logits_with = [&](bool proposals, bool dsm, GlobalPooling pooling) {
        ModelConfig m = cfg.model;
        m.use_proposals = proposals || dsm;  // DSM needs proposals
        m.use_dsm = dsm;
        m.pooling = pooling;
        Tape t;
        TapeModel tm = bind_params(t, m, params, ds.classes, ds.canvas);
        return t.value(model_forward(t, tm, image).logits);
    };

    const Tensor g = logits_with(false, false, GlobalPooling::kGAP);
    const Tensor gp = logits_with(true, false, GlobalPooling::kGAP);
    const Tensor gd = logits_with(true, true, GlobalPooling::kGAP);
    const Tensor gpd = logits_with(true, true, GlobalPooling::kGAP);

    // additivity: (global+part+dsm) = global + (part) + (dsm)
    for (std::size_t c = 0; c < g.numel(); ++c) {
        const double part = gp[c] - g[c];
        const double dsm = gd[c] - gp[c];
        CHECK(gpd[c] == doctest::Approx(g[c] + part + dsm).epsilon(1e-12));
    }
    // disabling DSM exactly removes its head
    for (std::size_t c = 0; c < g.numel(); ++c) CHECK(gd[c] != doctest::Approx(gp[c]));
}

TEST_CASE("determinism: identical seed and config produce identical results") {
    ExperimentConfig cfg = tiny_config(3);
    Dataset ds = generate_dataset([&] {
        auto s = cfg.dataset;
        s.seed = cfg.seed;
        return s;
    }());
    TrainResult a = train_3stage(cfg, ds);
    TrainResult b = train_3stage(cfg, ds);
    REQUIRE(a.params.items.size() == b.params.items.size());
    for (std::size_t i = 0; i < a.params.items.size(); ++i) {
        CHECK(a.params.items[i].first == b.params.items[i].first);
        CHECK(tensors_equal(a.params.items[i].second, b.params.items[i].second));
    }
    REQUIRE(a.metrics.size() == b.metrics.size());
    for (std::size_t i = 0; i < a.metrics.size(); ++i)
        CHECK(a.metrics[i].total == b.metrics[i].total);
    RobustnessReport ra = evaluate_robustness(cfg.model, a.params, ds.classes, ds.canvas, ds.test);
    RobustnessReport rb = evaluate_robustness(cfg.model, b.params, ds.classes, ds.canvas, ds.test);
    CHECK(ra.clean == rb.clean);
    CHECK(ra.rotated == rb.rotated);
    CHECK(ra.shrunk == rb.shrunk);
}

TEST_CASE("joint single-stage variant trains every used parameter") {
    ExperimentConfig cfg = tiny_config(4);
    cfg.train.joint_single_stage = true;
    cfg.train.epochs = 2;
    Dataset ds = generate_dataset([&] {
        auto s = cfg.dataset;
        s.seed = cfg.seed;
        return s;
    }());
    Params before = initial_params(cfg, ds.classes);
    TrainResult tr = train_3stage(cfg, ds);
    for (const MetricsRow& r : tr.metrics) CHECK(r.stage == 1);
    // default config uses the OP pooling head, proposals, and DSM
    for (const char* name : {"conv1", "conv4", "w_op", "w_score", "w_region", "w_dsm"})
        CHECK(!tensors_equal(tr.params.get(name), before.get(name)));
    // w_global is unused under OP pooling and must stay at init
    CHECK(tensors_equal(tr.params.get("w_global"), before.get("w_global")));
}

TEST_CASE("untrained random model sits near chance on every split") {
    ExperimentConfig cfg = tiny_config(21);
    cfg.dataset.images_per_class = 20;
    Dataset ds = generate_dataset([&] {
        auto s = cfg.dataset;
        s.seed = cfg.seed;
        return s;
    }());
    Params params = initial_params(cfg, ds.classes);
    RobustnessReport rb = evaluate_robustness(cfg.model, params, ds.classes, ds.canvas, ds.test);
    // 4 balanced classes: an untrained model cannot beat chance by much more
    // than sampling noise (16 test images -> generous band)
    for (double acc : {rb.clean, rb.rotated, rb.shrunk}) {
        CHECK(acc >= 0.0);
        CHECK(acc <= 0.7);
    }
}

TEST_CASE("trained accuracy clears chance by five permutation sigmas (train split)") {
    ExperimentConfig cfg = tiny_config(2);
    cfg.model.use_proposals = false;
    cfg.model.use_dsm = false;
    cfg.model.pooling = GlobalPooling::kGAP;
    cfg.model.lambda = 0.0;
    cfg.dataset.images_per_class = 25;
    cfg.train.epochs = 20;
    cfg.train.lr = 0.01;
    Dataset ds = generate_dataset([&] {
        auto s = cfg.dataset;
        s.seed = cfg.seed;
        return s;
    }());
    TrainResult tr = train_3stage(cfg, ds);
    const double acc =
        evaluate_accuracy(cfg.model, tr.params, ds.classes, ds.canvas, ds.train);
    const double chance = 1.0 / static_cast<double>(ds.classes);
    const double sigma =
        std::sqrt(chance * (1.0 - chance) / static_cast<double>(ds.train.size()));
    CHECK(acc > chance + 5.0 * sigma);
}

TEST_CASE("numeric blow-up aborts with a last-good checkpoint reference") {
    ExperimentConfig cfg = tiny_config(6);
    cfg.train.lr = 1e9;  // guaranteed divergence
    cfg.train.epochs = 4;
    Dataset ds = generate_dataset([&] {
        auto s = cfg.dataset;
        s.seed = cfg.seed;
        return s;
    }());
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "ssanet_blowup_test";
    fs::create_directories(dir);
    fs::remove(dir / "last_good.ckpt");
    bool threw = false;
    try {
        train_3stage(cfg, ds, dir.string());
    } catch (const NumericError& e) {
        threw = true;
        CHECK(std::string(e.what()).find("last_good.ckpt") != std::string::npos);
        CHECK(fs::exists(dir / "last_good.ckpt"));
        // the checkpoint itself must be loadable
        CHECK(!load_checkpoint((dir / "last_good.ckpt").string()).empty());
    }
    CHECK(threw);
    fs::remove_all(dir);
}

TEST_CASE("scale-mining head gradient matches finite differences") {
    std::mt19937 rng(31);
    ModelConfig cfg;
    cfg.region_size = 3;
    cfg.scale_steps = 5;
    for (DsmMode mode : {DsmMode::kFull, DsmMode::kFixed, DsmMode::kSingle}) {
        cfg.dsm_mode = mode;
        Tensor map = Tensor::randn({7, 7, 4}, rng);
        Tensor w = Tensor::randn({2, 2, 36, 5}, rng, 0.3);
        std::vector<Proposal> props(2);
        props[0].box = {10, 10, 30, 26};
        props[1].box = {20, 24, 44, 48};
        for (auto& p : props) p.score = 1.0;
        assign_vertices(props);
        auto f = [&](const std::vector<Tensor>& in) {
            Tape t;
            Var m = t.leaf(in[0]), wd = t.leaf(in[1]);
            Var lg = mops::dsm_logits(t, m, wd, props, cfg, 8.0, 56.0, 56.0);
            return t.value(ops::sum(t, lg))[0];
        };
        Tape t;
        Var m = t.leaf(map), wd = t.leaf(w);
        Var lg = mops::dsm_logits(t, m, wd, props, cfg, 8.0, 56.0, 56.0);
        t.backward(ops::sum(t, lg));
        CHECK(finite_diff_max_rel_err(f, {map, w}, {t.grad(m), t.grad(wd)}) < 1e-4);
    }
}
