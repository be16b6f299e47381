#pragma once

#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "ssanet/dataset.hpp"
#include "ssanet/dsm.hpp"
#include "ssanet/errors.hpp"
#include "ssanet/oriented_pooling.hpp"

namespace ssanet {

enum class GlobalPooling { kGAP, kGMP, kOP };

inline GlobalPooling pooling_from_string(const std::string& s) {
    if (s == "gap") return GlobalPooling::kGAP;
    if (s == "gmp") return GlobalPooling::kGMP;
    if (s == "op") return GlobalPooling::kOP;
    throw ConfigError("unknown pooling mode: " + s);
}

inline std::string pooling_to_string(GlobalPooling p) {
    switch (p) {
        case GlobalPooling::kGAP: return "gap";
        case GlobalPooling::kGMP: return "gmp";
        default: return "op";
    }
}

inline std::string dsm_mode_to_string(DsmMode m) {
    switch (m) {
        case DsmMode::kFixed: return "fixed";
        case DsmMode::kSingle: return "single";
        default: return "full";
    }
}

struct ModelConfig {
    std::size_t channels = 32;     // backbone output channels
    std::size_t parts = 4;         // K selected proposals
    std::size_t scale_steps = 5;   // S, odd
    double alpha = 1.22;           // scale ladder base
    std::size_t region_size = 3;   // RoI crop side on the feature map
    std::size_t op_patch = 1;      // h = w; 1x1 cells keep full spatial detail
    std::size_t op_grid = 7;       // N_H = N_W, matches the 7x7 feature map
    std::string op_descriptor = "channel_max";  // exact quarter-turn invariance
    std::vector<double> anchor_scales = {1.5, 3.0};  // feature-map units
    std::vector<double> anchor_ratios = {1.0, 2.0};
    double nms_iou = 0.4;
    bool use_proposals = true;
    bool use_dsm = true;
    GlobalPooling pooling = GlobalPooling::kOP;
    DsmMode dsm_mode = DsmMode::kFull;
    double lambda = 0.5;
    bool mac_same_class_only = false;
};

struct TrainSchedule {
    std::size_t epochs = 80;
    std::size_t batch = 8;
    double lr = 0.01;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    double lr_decay = 0.1;
    double decay_at = 0.75;  // fraction of total epochs; aligned to the stage-2/3 boundary
    std::vector<double> stage_fractions = {0.5, 0.25, 0.25};
    bool joint_single_stage = false;
};

struct ExperimentConfig {
    unsigned seed = 0;
    std::string out_dir = "runs/default";
    SyntheticDatasetSpec dataset;
    ModelConfig model;
    TrainSchedule train;
};

namespace detail {

inline void reject_unknown(const nlohmann::json& j, const std::set<std::string>& allowed,
                           const std::string& section) {
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!allowed.count(it.key()))
            throw ConfigError("unknown config key \"" + it.key() + "\" in " + section);
}

template <class T>
void maybe(const nlohmann::json& j, const char* key, T& dst) {
    if (j.contains(key)) dst = j.at(key).get<T>();
}

}  // namespace detail

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
    return nlohmann::json{
        {"seed", c.seed},
        {"out_dir", c.out_dir},
        {"dataset",
         {{"classes", c.dataset.classes},
          {"canvas", c.dataset.canvas},
          {"images_per_class", c.dataset.images_per_class},
          {"glyph_size", c.dataset.glyph_size},
          {"scale_min", c.dataset.scale_min},
          {"scale_max", c.dataset.scale_max},
          {"noise", c.dataset.noise}}},
        {"model",
         {{"channels", c.model.channels},
          {"parts", c.model.parts},
          {"scale_steps", c.model.scale_steps},
          {"alpha", c.model.alpha},
          {"region_size", c.model.region_size},
          {"op_patch", c.model.op_patch},
          {"op_grid", c.model.op_grid},
          {"op_descriptor", c.model.op_descriptor},
          {"anchor_scales", c.model.anchor_scales},
          {"anchor_ratios", c.model.anchor_ratios},
          {"nms_iou", c.model.nms_iou},
          {"use_proposals", c.model.use_proposals},
          {"use_dsm", c.model.use_dsm},
          {"pooling", pooling_to_string(c.model.pooling)},
          {"dsm_mode", dsm_mode_to_string(c.model.dsm_mode)},
          {"lambda", c.model.lambda},
          {"mac_same_class_only", c.model.mac_same_class_only}}},
        {"train",
         {{"epochs", c.train.epochs},
          {"batch", c.train.batch},
          {"lr", c.train.lr},
          {"momentum", c.train.momentum},
          {"weight_decay", c.train.weight_decay},
          {"lr_decay", c.train.lr_decay},
          {"decay_at", c.train.decay_at},
          {"stage_fractions", c.train.stage_fractions},
          {"joint_single_stage", c.train.joint_single_stage}}}};
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
    ExperimentConfig c;
    detail::reject_unknown(j, {"seed", "out_dir", "dataset", "model", "train"}, "root");
    detail::maybe(j, "seed", c.seed);
    detail::maybe(j, "out_dir", c.out_dir);

    if (j.contains("dataset")) {
        const auto& d = j.at("dataset");
        detail::reject_unknown(d,
                               {"classes", "canvas", "images_per_class", "glyph_size", "scale_min",
                                "scale_max", "noise"},
                               "dataset");
        detail::maybe(d, "classes", c.dataset.classes);
        detail::maybe(d, "canvas", c.dataset.canvas);
        detail::maybe(d, "images_per_class", c.dataset.images_per_class);
        detail::maybe(d, "glyph_size", c.dataset.glyph_size);
        detail::maybe(d, "scale_min", c.dataset.scale_min);
        detail::maybe(d, "scale_max", c.dataset.scale_max);
        detail::maybe(d, "noise", c.dataset.noise);
    }
    if (j.contains("model")) {
        const auto& m = j.at("model");
        detail::reject_unknown(m,
                               {"channels", "parts", "scale_steps", "alpha", "region_size",
                                "op_patch", "op_grid", "op_descriptor", "anchor_scales",
                                "anchor_ratios", "nms_iou", "use_proposals", "use_dsm", "pooling",
                                "dsm_mode", "lambda", "mac_same_class_only"},
                               "model");
        detail::maybe(m, "channels", c.model.channels);
        detail::maybe(m, "parts", c.model.parts);
        detail::maybe(m, "scale_steps", c.model.scale_steps);
        detail::maybe(m, "alpha", c.model.alpha);
        detail::maybe(m, "region_size", c.model.region_size);
        detail::maybe(m, "op_patch", c.model.op_patch);
        detail::maybe(m, "op_grid", c.model.op_grid);
        detail::maybe(m, "op_descriptor", c.model.op_descriptor);
        detail::maybe(m, "anchor_scales", c.model.anchor_scales);
        detail::maybe(m, "anchor_ratios", c.model.anchor_ratios);
        detail::maybe(m, "nms_iou", c.model.nms_iou);
        detail::maybe(m, "use_proposals", c.model.use_proposals);
        detail::maybe(m, "use_dsm", c.model.use_dsm);
        if (m.contains("pooling")) c.model.pooling = pooling_from_string(m.at("pooling"));
        if (m.contains("dsm_mode")) c.model.dsm_mode = dsm_mode_from_string(m.at("dsm_mode"));
        detail::maybe(m, "lambda", c.model.lambda);
        detail::maybe(m, "mac_same_class_only", c.model.mac_same_class_only);
    }
    if (j.contains("train")) {
        const auto& t = j.at("train");
        detail::reject_unknown(t,
                               {"epochs", "batch", "lr", "momentum", "weight_decay", "lr_decay",
                                "decay_at", "stage_fractions", "joint_single_stage"},
                               "train");
        detail::maybe(t, "epochs", c.train.epochs);
        detail::maybe(t, "batch", c.train.batch);
        detail::maybe(t, "lr", c.train.lr);
        detail::maybe(t, "momentum", c.train.momentum);
        detail::maybe(t, "weight_decay", c.train.weight_decay);
        detail::maybe(t, "lr_decay", c.train.lr_decay);
        detail::maybe(t, "decay_at", c.train.decay_at);
        detail::maybe(t, "stage_fractions", c.train.stage_fractions);
        detail::maybe(t, "joint_single_stage", c.train.joint_single_stage);
    }

    if (c.model.lambda < 0.0) throw ConfigError("model.lambda must be >= 0");
    if (c.model.scale_steps % 2 == 0) throw ConfigError("model.scale_steps must be odd");
    if (c.train.stage_fractions.size() != 3)
        throw ConfigError("train.stage_fractions must have 3 entries");
    return c;
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file: " + path);
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config parse error in " + path + ": " + e.what());
    }
    try {
        return config_from_json(j);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config field error in " + path + ": " + e.what());
    }
}

}  // namespace ssanet
