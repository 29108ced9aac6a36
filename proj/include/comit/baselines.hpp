#pragma once

// Ablation harness: controlled arm pairs sharing seed and data, differing in
// exactly one declared hyperparameter set. Supported deltas: disabling the
// semantic alignment loss, removing local crops (single global observation),
// and alternate bottleneck sizes.

#include "comit/experiment.hpp"

#include <string>
#include <vector>

namespace comit::ablate {

using nlohmann::json;

enum class Delta { srepa_off, locals_off, bottleneck };

inline const char* delta_name(Delta d) {
    switch (d) {
        case Delta::srepa_off: return "srepa_off";
        case Delta::locals_off: return "locals_off";
        case Delta::bottleneck: return "bottleneck";
    }
    fail("delta_name: bad delta");
}

// desk-scale bottleneck presets: small / medium / large
struct BottleneckPreset {
    std::string name;
    fsq::FsqSpec fsq;
    int message_length;
};

inline std::vector<BottleneckPreset> bottleneck_presets() {
    return {{"S", fsq::FsqSpec{{5, 5, 4}}, 8},      // 100 codes, 8 tokens
            {"M", fsq::FsqSpec{{5, 5, 4, 4}}, 16},  // 400 codes, 16 tokens
            {"L", fsq::FsqSpec::desk(), 16}};       // 1600 codes, 16 tokens
}

struct AblationSpec {
    std::string name;
    train::TrainConfig base;
    Delta delta = Delta::srepa_off;
    BottleneckPreset bottleneck;  // used when delta == bottleneck

    train::TrainConfig ablated_config() const {
        train::TrainConfig cfg = base;
        switch (delta) {
            case Delta::srepa_off:
                cfg.align.lambda_srepa = 0.0;
                break;
            case Delta::locals_off:
                // always a single global observation: no recurrent refinement
                cfg.sampler.k_mode = 1;
                cfg.sampler.k_max = 1;
                cfg.regimes.p_global = 1.0;
                break;
            case Delta::bottleneck:
                cfg.backbone.fsq = bottleneck.fsq;
                cfg.backbone.message_length = bottleneck.message_length;
                break;
        }
        return cfg;
    }

    // config keys allowed to differ between the arms
    std::vector<std::string> declared_keys() const {
        switch (delta) {
            case Delta::srepa_off: return {"/align/lambda_srepa"};
            case Delta::locals_off: return {"/k_mode", "/k_max", "/p_global"};
            case Delta::bottleneck:
                return {"/backbone/fsq_levels", "/backbone/message_length", "/init_token_id"};
        }
        fail("declared_keys: bad delta");
    }
};

// flat list of JSON pointer paths whose values differ
inline void diff_json(const json& a, const json& b, const std::string& prefix,
                      std::vector<std::string>& out) {
    if (a.is_object() && b.is_object()) {
        for (auto it = a.begin(); it != a.end(); ++it) {
            const std::string path = prefix + "/" + it.key();
            if (!b.contains(it.key()))
                out.push_back(path);
            else
                diff_json(it.value(), b.at(it.key()), path, out);
        }
        for (auto it = b.begin(); it != b.end(); ++it)
            if (!a.contains(it.key())) out.push_back(prefix + "/" + it.key());
        return;
    }
    if (a != b) out.push_back(prefix);
}

inline void check_config_drift(const AblationSpec& spec) {
    json base = spec.base;
    json arm = spec.ablated_config();
    std::vector<std::string> changed;
    diff_json(base, arm, "", changed);
    auto allowed = spec.declared_keys();
    for (const std::string& path : changed) {
        bool ok = false;
        for (const std::string& k : allowed)
            if (path == k) ok = true;
        if (!ok)
            fail("ablation arms drift outside the declared delta: " + path);
    }
}

struct ArmMetrics {
    double probe_top1 = 0.0;
    double miou = 0.0;
    double final_fm = 0.0;
    double lambda_srepa = 0.0;
};

struct EvalSuite {
    exp::ProbeSuiteConfig probe;
    analysis::AttnAnalysisConfig attn;
    int probe_images = 1200;   // single-object scenes drawn for the probe
    int miou_images = 64;
    uint64_t data_seed = 9000;
};

// train one arm and evaluate it with the shared suite (probing and attention
// overlap both use single-global-crop encodings)
inline ArmMetrics evaluate_arm(train::TrainConfig cfg, const data::Dataset& train_ds,
                               const data::Dataset& probe_ds, const EvalSuite& suite) {
    align::OracleTeacher teacher(cfg.align.teacher_dim, cfg.backbone.grid_side(),
                                 cfg.backbone.image_size, derive_seed(cfg.seed, "teacher"));
    train::Trainer trainer(cfg);
    auto history = exp::run_training(trainer, train_ds, train::oracle_teacher_fn(teacher));

    model::Backbone<float> net = trainer.ema_net();

    policy::PolicySpec global;
    global.kind = policy::Kind::global_only;
    global.with_global = true;
    global.n_local = 0;
    global.crop_size = cfg.backbone.crop_size;

    auto class_ids = data::single_object_ids(probe_ds);
    auto messages = exp::tokenize_set(net, probe_ds, class_ids, global);
    auto outcome = exp::run_probe_task(probe::Task::classification, probe_ds, messages,
                                       cfg.backbone.fsq, cfg.backbone.message_length, suite.probe);

    std::vector<int> miou_ids;
    for (int id : class_ids) {
        miou_ids.push_back(id);
        if (static_cast<int>(miou_ids.size()) >= suite.miou_images) break;
    }
    ArmMetrics m;
    m.probe_top1 = outcome.accuracy;
    m.miou = exp::miou_eval(net, probe_ds, miou_ids, suite.attn);
    m.final_fm = exp::smoothed_fm(history, static_cast<int64_t>(history.size()));
    m.lambda_srepa = cfg.align.lambda_srepa;
    return m;
}

// paired comparison under identical seed and data; the drift check runs first
inline json run_ablation_pair(const AblationSpec& spec, const data::Dataset& train_ds,
                              const data::Dataset& probe_ds, const EvalSuite& suite) {
    check_config_drift(spec);
    ArmMetrics base = evaluate_arm(spec.base, train_ds, probe_ds, suite);
    ArmMetrics arm = evaluate_arm(spec.ablated_config(), train_ds, probe_ds, suite);

    json report;
    report["name"] = spec.name;
    report["delta"] = delta_name(spec.delta);
    report["base"] = {{"probe_top1", base.probe_top1},
                      {"miou", base.miou},
                      {"final_fm", base.final_fm},
                      {"lambda_srepa", base.lambda_srepa}};
    report["ablated"] = {{"probe_top1", arm.probe_top1},
                         {"miou", arm.miou},
                         {"final_fm", arm.final_fm},
                         {"lambda_srepa", arm.lambda_srepa}};
    report["deltas"] = {{"probe_top1", base.probe_top1 - arm.probe_top1},
                        {"miou", base.miou - arm.miou}};
    return report;
}

}  // namespace comit::ablate
