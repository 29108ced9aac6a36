#pragma once

// Orchestration shared by the command-line tool, the ablation harness and the
// acceptance suite: dataset tokenization under a policy, reconstruction
// quality evaluation, probe pipelines over frozen messages, and the epoch
// loop around Trainer::train_step.

#include "comit/analysis.hpp"
#include "comit/datagen.hpp"
#include "comit/policies.hpp"
#include "comit/probes.hpp"
#include "comit/trainer.hpp"

#include <filesystem>
#include <fstream>
#include <functional>
#include <map>

namespace comit::exp {

using nlohmann::json;

// encode every listed image under a fixed policy; optionally dump one COMT
// file (plus a crop-plan sidecar) per image id
inline std::map<int, fsq::LatentMessage> tokenize_set(
    const model::Backbone<float>& net, const data::Dataset& ds, const std::vector<int>& ids,
    const policy::PolicySpec& spec, const std::filesystem::path* dump_dir = nullptr) {
    namespace fs = std::filesystem;
    if (dump_dir) fs::create_directories(*dump_dir);
    std::vector<std::pair<int, fsq::LatentMessage>> results(ids.size());
#pragma omp parallel for schedule(static)
    for (int i = 0; i < static_cast<int>(ids.size()); ++i) {
        int id = ids[static_cast<size_t>(i)];
        auto r = policy::run_policy(net, ds.image<float>(id), spec);
        results[static_cast<size_t>(i)] = {id, std::move(r.message)};
        if (dump_dir) {
            fsq::save_message(*dump_dir / (data::scene_file_stem(id) + ".comt"),
                              results[static_cast<size_t>(i)].second);
            std::ofstream os(*dump_dir / (data::scene_file_stem(id) + ".plan.json"));
            os << geom::plan_to_json(r.plan).dump() << "\n";
        }
    }
    std::map<int, fsq::LatentMessage> out;
    for (auto& [id, msg] : results) out.emplace(id, std::move(msg));
    return out;
}

// read back a dump directory keyed by image id
inline std::map<int, fsq::LatentMessage> load_token_dumps(const std::filesystem::path& dir,
                                                          const fsq::FsqSpec& spec) {
    namespace fs = std::filesystem;
    std::map<int, fsq::LatentMessage> out;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (entry.path().extension() != ".comt") continue;
        int id = std::stoi(entry.path().stem().string());
        out.emplace(id, fsq::load_message(entry.path(), spec));
    }
    require(!out.empty(), "load_token_dumps: no .comt files under " + dir.string());
    return out;
}

// mean reconstruction quality of global-crop encodings through the sampler
inline double psnr_eval(const model::Backbone<float>& net, const data::Dataset& ds,
                        const std::vector<int>& ids, const flow::GuidanceConfig& guidance,
                        uint64_t seed) {
    require(!ids.empty(), "psnr_eval: empty id list");
    model::VelocityAdapter<float> adapter(net);
    auto uncond = enc::init_message(net.config().fsq, net.config().message_length,
                                    enc::default_init_id(net.config().fsq));
    std::vector<double> scores(ids.size());
#pragma omp parallel for schedule(static)
    for (int i = 0; i < static_cast<int>(ids.size()); ++i) {
        int id = ids[static_cast<size_t>(i)];
        ImageF image = ds.image<float>(id);
        fsq::LatentMessage msg = enc::encode_step(
            net, image, {0.0, 0.0},
            enc::init_message(net.config().fsq, net.config().message_length,
                              enc::default_init_id(net.config().fsq)));
        Rng rng(derive_seed(seed, "psnr-" + std::to_string(id)));
        ImageF recon = flow::decode<float>(adapter, msg, {0.0, 0.0}, guidance, uncond, rng);
        scores[static_cast<size_t>(i)] = image_psnr(recon, image);
    }
    double total = 0;
    for (double s : scores) total += s;
    return total / static_cast<double>(ids.size());
}

// best-token attention overlap over ground-truth masks with global-crop
// encodings
inline double miou_eval(const model::Backbone<float>& net, const data::Dataset& ds,
                        const std::vector<int>& ids, const analysis::AttnAnalysisConfig& cfg) {
    return analysis::miou_best_token(
        net, ds, ids, cfg, [&](int, const ImageF& image) {
            return enc::encode_step(net, image, {0.0, 0.0},
                                    enc::init_message(net.config().fsq,
                                                      net.config().message_length,
                                                      enc::default_init_id(net.config().fsq)));
        });
}

// ---- training loop -------------------------------------------------------------

struct TrainHooks {
    // called after every step with the breakdown
    std::function<void(const train::LossBreakdown&)> on_step;
    // called at listed steps (and at the final step) with the live trainer
    std::vector<int64_t> snapshot_steps;
    std::function<void(train::Trainer&, int64_t)> on_snapshot;
};

// epoch loop with deterministic shuffling; returns the per-step breakdowns
inline std::vector<train::LossBreakdown> run_training(train::Trainer& trainer,
                                                      const data::Dataset& ds,
                                                      const train::TeacherFn& teacher,
                                                      const TrainHooks& hooks = {},
                                                      std::ostream* metrics_stream = nullptr) {
    const auto& cfg = trainer.config();
    Rng order_rng(derive_seed(cfg.seed, "data-order"));
    std::vector<int> order(static_cast<size_t>(ds.size()));
    std::iota(order.begin(), order.end(), 0);
    size_t cursor = order.size();

    std::vector<train::LossBreakdown> history;
    history.reserve(static_cast<size_t>(cfg.steps));
    while (trainer.step() < cfg.steps) {
        std::vector<int> batch;
        for (int b = 0; b < cfg.batch_size; ++b) {
            if (cursor >= order.size()) {
                for (size_t i = order.size(); i > 1; --i)
                    std::swap(order[i - 1], order[static_cast<size_t>(order_rng.uniform_int(
                                                0, static_cast<int>(i) - 1))]);
                cursor = 0;
            }
            batch.push_back(order[cursor++]);
        }
        auto breakdown = trainer.train_step(ds, batch, teacher);
        if (metrics_stream) *metrics_stream << train::metrics_json(breakdown).dump() << "\n";
        if (hooks.on_step) hooks.on_step(breakdown);
        bool snapshot = trainer.step() == cfg.steps;
        for (int64_t s : hooks.snapshot_steps) snapshot = snapshot || s == trainer.step();
        if (snapshot && hooks.on_snapshot) hooks.on_snapshot(trainer, trainer.step());
        history.push_back(std::move(breakdown));
    }
    return history;
}

inline double smoothed_fm(const std::vector<train::LossBreakdown>& history, int64_t at_step,
                          int window = 50) {
    require(at_step >= 1 && at_step <= static_cast<int64_t>(history.size()),
            "smoothed_fm: step out of range");
    int64_t begin = std::max<int64_t>(0, at_step - window);
    double total = 0;
    int n = 0;
    for (int64_t i = begin; i < at_step; ++i) {
        total += history[static_cast<size_t>(i)].fm;
        ++n;
    }
    return total / n;
}

// ---- probe pipelines --------------------------------------------------------------

struct ProbeSuiteConfig {
    probe::ProbeTrainConfig train;
    int probe_dim = 64;
    double train_frac = 0.8;
    uint64_t split_seed = 0;
};

struct ProbeOutcome {
    double accuracy = 0.0;
    int64_t best_step = 0;
    int train_size = 0;
    int eval_size = 0;
};

// assemble task-appropriate splits from the dataset, train the probe on
// frozen messages, and report the best validation metric
inline ProbeOutcome run_probe_task(probe::Task task, const data::Dataset& ds,
                                   const std::map<int, fsq::LatentMessage>& messages,
                                   const fsq::FsqSpec& spec, int message_length,
                                   const ProbeSuiteConfig& cfg) {
    std::vector<int> ids;
    switch (task) {
        case probe::Task::classification: ids = data::single_object_ids(ds); break;
        case probe::Task::pairs: ids = data::two_category_ids(ds); break;
        case probe::Task::relations: ids = data::related_scene_ids(ds); break;
    }
    // keep only ids with messages
    std::vector<int> usable;
    for (int id : ids)
        if (messages.count(id)) usable.push_back(id);
    require(usable.size() >= 20, "run_probe_task: too few usable examples");

    data::SplitResult split;
    if (task == probe::Task::pairs)
        split = data::pair_disjoint_split(ds, usable, cfg.train_frac, cfg.split_seed);
    else
        split = data::image_disjoint_split(usable, cfg.train_frac, cfg.split_seed);

    auto train_examples = probe::make_examples(ds, messages, split.train_ids, task);
    auto eval_examples = probe::make_examples(ds, messages, split.eval_ids, task);

    probe::ProbeConfig pc;
    pc.model_dim = cfg.probe_dim;
    pc.token_dim = spec.token_dim();
    pc.max_tokens = message_length;
    pc.task = task;
    probe::ProbeNet<float> net(pc, derive_seed(cfg.train.seed, "probe-net"));

    probe::ProbeResult r = probe::train_probe(net, train_examples, eval_examples, cfg.train);
    ProbeOutcome out;
    out.accuracy = r.best_metric;
    out.best_step = r.best_step;
    out.train_size = static_cast<int>(train_examples.size());
    out.eval_size = static_cast<int>(eval_examples.size());
    return out;
}

}  // namespace comit::exp
