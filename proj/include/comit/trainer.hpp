#pragma once

// Full training loop: per batch, one shared crop count is drawn, every image
// runs the recurrent encoding (with the global-substitution and unconditional
// regimes), and the decoding pass is supervised with
//   total = fm + lambda_repa * repa + lambda_srepa * srepa.
// Gradients are clipped to a global norm, applied with Adam under a square
// root decay schedule, and an EMA copy of the backbone tracks the raw weights.
//
// Batch items are processed on independent tapes in parallel; per-thread
// gradient sinks are merged in a fixed order so a run is reproducible for a
// fixed seed and thread count.

#include "comit/align.hpp"
#include "comit/common.hpp"
#include "comit/datagen.hpp"
#include "comit/encoder.hpp"
#include "comit/flow.hpp"
#include "comit/geometry.hpp"
#include "comit/model.hpp"
#include "comit/serialize.hpp"

#include <nlohmann/json.hpp>
#include <omp.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <vector>

namespace comit::train {

using nlohmann::json;

struct TrainConfig {
    model::BackboneConfig backbone;
    align::AlignmentConfig align;
    enc::EncodeRegimes regimes;
    geom::CropCountSampler sampler;
    flow::FlowTimeConfig time;

    double lr_base = 3e-4;
    int warmup_steps = 100;
    double grad_clip = 1.0;
    double ema_decay = 0.999;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    int steps = 1200;
    int batch_size = 16;
    int threads = 2;
    uint64_t seed = 0;

    void validate() const {
        backbone.validate();
        align.validate();
        regimes.validate();
        sampler.validate();
        require(lr_base > 0 && warmup_steps >= 1 && grad_clip > 0, "TrainConfig: rates must be positive");
        require(ema_decay > 0 && ema_decay < 1, "TrainConfig: ema_decay must lie in (0,1)");
        require(steps >= 1 && batch_size >= 1 && threads >= 1, "TrainConfig: degenerate sizes");
        require(align.hidden == backbone.hidden, "TrainConfig: projector width must match backbone");
    }
};

inline void to_json(json& j, const TrainConfig& c) {
    j = json{{"backbone", c.backbone},
             {"align", c.align},
             {"p_cfg", c.regimes.p_cfg},
             {"p_global", c.regimes.p_global},
             {"init_token_id", c.regimes.init_token_id},
             {"k_mode", c.sampler.k_mode},
             {"k_max", c.sampler.k_max},
             {"k_noise_scale", c.sampler.noise_scale},
             {"k_shift", c.sampler.shift},
             {"time_mu", c.time.mu},
             {"time_sigma", c.time.sigma},
             {"lr_base", c.lr_base},
             {"warmup_steps", c.warmup_steps},
             {"grad_clip", c.grad_clip},
             {"ema_decay", c.ema_decay},
             {"beta1", c.beta1},
             {"beta2", c.beta2},
             {"adam_eps", c.adam_eps},
             {"steps", c.steps},
             {"batch_size", c.batch_size},
             {"threads", c.threads},
             {"seed", c.seed}};
}

inline void from_json(const json& j, TrainConfig& c) {
    j.at("backbone").get_to(c.backbone);
    j.at("align").get_to(c.align);
    j.at("p_cfg").get_to(c.regimes.p_cfg);
    j.at("p_global").get_to(c.regimes.p_global);
    j.at("init_token_id").get_to(c.regimes.init_token_id);
    j.at("k_mode").get_to(c.sampler.k_mode);
    j.at("k_max").get_to(c.sampler.k_max);
    j.at("k_noise_scale").get_to(c.sampler.noise_scale);
    j.at("k_shift").get_to(c.sampler.shift);
    j.at("time_mu").get_to(c.time.mu);
    j.at("time_sigma").get_to(c.time.sigma);
    j.at("lr_base").get_to(c.lr_base);
    j.at("warmup_steps").get_to(c.warmup_steps);
    j.at("grad_clip").get_to(c.grad_clip);
    j.at("ema_decay").get_to(c.ema_decay);
    j.at("beta1").get_to(c.beta1);
    j.at("beta2").get_to(c.beta2);
    j.at("adam_eps").get_to(c.adam_eps);
    j.at("steps").get_to(c.steps);
    j.at("batch_size").get_to(c.batch_size);
    j.at("threads").get_to(c.threads);
    j.at("seed").get_to(c.seed);
}

// linear warmup into square-root decay, peak lr_base at step == warmup
inline double lr_at(int64_t step, const TrainConfig& cfg) {
    require(step >= 1, "lr_at: steps are 1-based");
    double s = static_cast<double>(step), w = static_cast<double>(cfg.warmup_steps);
    return cfg.lr_base * std::min(s / w, std::sqrt(w / s));
}

// ---- optimizer primitives (free functions so tests can hit them directly) ----

template <typename T>
double grad_global_norm(const std::vector<std::vector<Mat<T>>*>& sink_groups) {
    double sq = 0.0;
    for (const auto* grads : sink_groups)
        for (const Mat<T>& g : *grads)
            if (g.size() > 0) sq += g.template cast<double>().squaredNorm();
    return std::sqrt(sq);
}

template <typename T>
void scale_grads(std::vector<Mat<T>>& grads, double factor) {
    for (Mat<T>& g : grads)
        if (g.size() > 0) g *= static_cast<T>(factor);
}

template <typename T>
void adam_step(ParamStore<T>& store, const std::vector<Mat<T>>& grads, double lr, double beta1,
               double beta2, double eps, int64_t step) {
    double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step));
    double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step));
    for (int i = 0; i < store.size(); ++i) {
        const Mat<T>& g = grads[static_cast<size_t>(i)];
        if (g.size() == 0) continue;
        auto& e = store.entry(i);
        e.m = static_cast<T>(beta1) * e.m + static_cast<T>(1.0 - beta1) * g;
        e.v = (static_cast<T>(beta2) * e.v.array() +
               static_cast<T>(1.0 - beta2) * g.array().square())
                  .matrix();
        e.w.array() -= static_cast<T>(lr) * (e.m.array() / static_cast<T>(bc1)) /
                       ((e.v.array() / static_cast<T>(bc2)).sqrt() + static_cast<T>(eps));
    }
}

template <typename T>
void ema_update(std::vector<Mat<T>>& ema, const ParamStore<T>& store, double decay) {
    for (int i = 0; i < store.size(); ++i)
        ema[static_cast<size_t>(i)] = static_cast<T>(decay) * ema[static_cast<size_t>(i)] +
                                      static_cast<T>(1.0 - decay) * store.entry(i).w;
}

struct LossBreakdown {
    double fm = 0.0;
    double repa = 0.0;
    double srepa = 0.0;
    double total = 0.0;
    double lr = 0.0;
    int crop_count = 0;
    int64_t step = 0;
    bool applied = true;
    std::string diagnostic;
};

inline json metrics_json(const LossBreakdown& b) {
    return json{{"step", b.step}, {"fm", b.fm},         {"repa", b.repa}, {"srepa", b.srepa},
                {"total", b.total}, {"lr", b.lr},       {"K", b.crop_count},
                {"applied", b.applied}};
}

// teacher accessor: image id + scene -> features
using TeacherFn = std::function<align::TeacherFeatures(int, const data::SpriteScene&)>;

inline TeacherFn oracle_teacher_fn(const align::OracleTeacher& teacher) {
    return [&teacher](int, const data::SpriteScene& scene) { return teacher.features(scene); };
}

class Trainer {
public:
    explicit Trainer(TrainConfig cfg)
        : cfg_(cfg),
          net_(cfg.backbone, derive_seed(cfg.seed, "model")),
          heads_(cfg.align, derive_seed(cfg.seed, "heads")),
          rng_(derive_seed(cfg.seed, "trainer")) {
        cfg_.validate();
        ema_.reserve(static_cast<size_t>(net_.params().size()));
        for (int i = 0; i < net_.params().size(); ++i) ema_.push_back(net_.params().entry(i).w);
    }

    const TrainConfig& config() const { return cfg_; }
    model::Backbone<float>& net() { return net_; }
    const model::Backbone<float>& net() const { return net_; }
    align::AlignmentHeads<float>& heads() { return heads_; }
    int64_t step() const { return step_; }

    // backbone copy carrying the EMA weights
    model::Backbone<float> ema_net() const {
        model::Backbone<float> copy = net_;
        for (int i = 0; i < copy.params().size(); ++i)
            copy.params().weight(i) = ema_[static_cast<size_t>(i)];
        return copy;
    }

    LossBreakdown train_step(const data::Dataset& ds, const std::vector<int>& indices,
                             const TeacherFn& teacher) {
        require(!indices.empty(), "train_step: empty batch");
        const int64_t step = step_ + 1;
        const int B = static_cast<int>(indices.size());
        const int crop_count = geom::sample_crop_count(cfg_.sampler, rng_);

        const int threads = std::min(cfg_.threads, B);
        std::vector<std::vector<MatF>> net_sinks(
            static_cast<size_t>(threads),
            std::vector<MatF>(static_cast<size_t>(net_.params().size())));
        std::vector<std::vector<MatF>> head_sinks(
            static_cast<size_t>(threads),
            std::vector<MatF>(static_cast<size_t>(heads_.params().size())));
        std::vector<double> fm_sum(static_cast<size_t>(threads), 0.0),
            repa_sum(static_cast<size_t>(threads), 0.0), srepa_sum(static_cast<size_t>(threads), 0.0);
        std::vector<std::string> errors(static_cast<size_t>(threads));
        bool finite = true;

#pragma omp parallel for schedule(static) num_threads(threads) reduction(&& : finite)
        for (int b = 0; b < B; ++b) {
            const int tid = omp_get_thread_num();
            const int idx = indices[static_cast<size_t>(b)];
            try {
                Rng sample_rng(derive_seed(cfg_.seed, "step-" + std::to_string(step) + "-slot-" +
                                                          std::to_string(b)));
                ImageF image = ds.image<float>(idx);
                auto plan = geom::random_plan(image, crop_count, cfg_.backbone.crop_size, false,
                                              sample_rng);

                Graph<float> g;
                auto enc = enc::encode_for_training(g, net_, image, plan, cfg_.regimes, sample_rng);

                auto sample = flow::draw_flow_sample<float>(image, sample_rng, cfg_.time);
                model::ForwardArgs<float> args;
                args.patches = patchify(sample.x_t, cfg_.backbone.patch_size);
                args.grid_h = args.grid_w = cfg_.backbone.grid_side();
                args.t = sample.t;
                args.offset = enc.global_offset;
                args.mode = model::Mode::decode;
                args.message_var = enc.message_values;
                auto vars = net_.forward(g, args);

                auto fm = g.mse(vars.velocity,
                                g.constant(patchify(sample.target, cfg_.backbone.patch_size)));
                align::TeacherFeatures feats = teacher(idx, ds.scenes[static_cast<size_t>(idx)]);
                auto repa = align::repa_loss(g, heads_, vars.tap_image, feats.spatial);
                auto srepa = align::srepa_loss(g, heads_, vars.tap_message, feats.global_vec);
                auto total =
                    g.add(fm, g.add(g.scale(repa, static_cast<float>(cfg_.align.lambda_repa)),
                                    g.scale(srepa, static_cast<float>(cfg_.align.lambda_srepa))));

                double fm_v = g.val(fm)(0, 0), repa_v = g.val(repa)(0, 0),
                       srepa_v = g.val(srepa)(0, 0);
                if (!std::isfinite(fm_v) || !std::isfinite(repa_v) || !std::isfinite(srepa_v)) {
                    errors[static_cast<size_t>(tid)] = "non-finite loss";
                    finite = false;
                    continue;
                }
                fm_sum[static_cast<size_t>(tid)] += fm_v;
                repa_sum[static_cast<size_t>(tid)] += repa_v;
                srepa_sum[static_cast<size_t>(tid)] += srepa_v;

                g.backward(total);
                g.collect_param_grads(net_sinks[static_cast<size_t>(tid)], &net_.params());
                g.collect_param_grads(head_sinks[static_cast<size_t>(tid)], &heads_.params());
            } catch (const std::exception& e) {
                // exceptions must not escape the parallel region; a failed
                // sample voids the whole step
                errors[static_cast<size_t>(tid)] = e.what();
                finite = false;
            }
        }

        LossBreakdown out;
        out.step = step;
        out.crop_count = crop_count;
        out.lr = lr_at(step, cfg_);
        double fm_total = 0, repa_total = 0, srepa_total = 0;
        for (int tid = 0; tid < threads; ++tid) {
            fm_total += fm_sum[static_cast<size_t>(tid)];
            repa_total += repa_sum[static_cast<size_t>(tid)];
            srepa_total += srepa_sum[static_cast<size_t>(tid)];
        }
        out.fm = fm_total / B;
        out.repa = repa_total / B;
        out.srepa = srepa_total / B;
        out.total = out.fm + cfg_.align.lambda_repa * out.repa + cfg_.align.lambda_srepa * out.srepa;

        if (!finite) {
            out.applied = false;
            out.diagnostic = "step skipped: ";
            for (const std::string& e : errors)
                if (!e.empty()) out.diagnostic += e + "; ";
            step_ = step;
            return out;
        }

        // merge per-thread sinks in thread order, then average over the batch
        std::vector<MatF>& net_grads = net_sinks[0];
        std::vector<MatF>& head_grads = head_sinks[0];
        for (int tid = 1; tid < threads; ++tid) {
            merge_sinks(net_grads, net_sinks[static_cast<size_t>(tid)]);
            merge_sinks(head_grads, head_sinks[static_cast<size_t>(tid)]);
        }
        scale_grads(net_grads, 1.0 / B);
        scale_grads(head_grads, 1.0 / B);

        double norm = grad_global_norm<float>({&net_grads, &head_grads});
        if (!std::isfinite(norm)) {
            out.applied = false;
            out.diagnostic = "non-finite gradient norm; step skipped";
            step_ = step;
            return out;
        }
        if (norm > cfg_.grad_clip) {
            scale_grads(net_grads, cfg_.grad_clip / norm);
            scale_grads(head_grads, cfg_.grad_clip / norm);
        }

        adam_step(net_.params(), net_grads, out.lr, cfg_.beta1, cfg_.beta2, cfg_.adam_eps, step);
        adam_step(heads_.params(), head_grads, out.lr, cfg_.beta1, cfg_.beta2, cfg_.adam_eps, step);
        ema_update(ema_, net_.params(), cfg_.ema_decay);
        step_ = step;
        return out;
    }

    // ---- checkpointing ----------------------------------------------------

    void save_checkpoint(const std::filesystem::path& dir) const {
        namespace fs = std::filesystem;
        fs::create_directories(dir);
        json config = cfg_;
        std::ofstream cfg_os(dir / "config.json");
        if (!cfg_os) fail("save_checkpoint: cannot write config at " + dir.string());
        cfg_os << config.dump(2) << "\n";

        serialize::save_archive(dir / "weights.bin", serialize::weights_to_archive(net_.params()));
        serialize::save_archive(dir / "heads.bin", serialize::weights_to_archive(heads_.params()));
        serialize::TensorArchive ema_ar;
        for (int i = 0; i < net_.params().size(); ++i)
            ema_ar.tensors[net_.params().entry(i).name] = ema_[static_cast<size_t>(i)];
        serialize::save_archive(dir / "ema.bin", ema_ar);

        serialize::TensorArchive opt;
        auto net_moments = serialize::moments_to_archive(net_.params());
        auto head_moments = serialize::moments_to_archive(heads_.params());
        for (auto& [k, v] : net_moments.tensors) opt.tensors["net/" + k] = std::move(v);
        for (auto& [k, v] : head_moments.tensors) opt.tensors["heads/" + k] = std::move(v);
        serialize::save_archive(dir / "optim.bin", opt);

        json state;
        state["step"] = step_;
        state["rng"] = rng_.save_state();
        std::ofstream st_os(dir / "state.json");
        st_os << state.dump(2) << "\n";
    }

    static Trainer load_checkpoint(const std::filesystem::path& dir) {
        std::ifstream cfg_is(dir / "config.json");
        if (!cfg_is) fail("load_checkpoint: missing config at " + dir.string());
        TrainConfig cfg = json::parse(cfg_is).get<TrainConfig>();
        Trainer t(cfg);
        t.restore_state(dir);
        return t;
    }

    // load weights/state from `dir` into this trainer; the stored model
    // geometry must match this trainer's configuration
    void restore_state(const std::filesystem::path& dir) {
        std::ifstream cfg_is(dir / "config.json");
        if (!cfg_is) fail("restore_state: missing config at " + dir.string());
        TrainConfig stored = json::parse(cfg_is).get<TrainConfig>();
        require(stored.backbone == cfg_.backbone,
                "restore_state: checkpoint backbone configuration mismatch");

        serialize::weights_from_archive(net_.params(), serialize::load_archive(dir / "weights.bin"));
        serialize::weights_from_archive(heads_.params(), serialize::load_archive(dir / "heads.bin"));
        auto ema_ar = serialize::load_archive(dir / "ema.bin");
        for (int i = 0; i < net_.params().size(); ++i)
            ema_[static_cast<size_t>(i)] = ema_ar.get(net_.params().entry(i).name);

        auto opt = serialize::load_archive(dir / "optim.bin");
        serialize::TensorArchive net_moments, head_moments;
        for (auto& [k, v] : opt.tensors) {
            if (k.rfind("net/", 0) == 0) net_moments.tensors[k.substr(4)] = v;
            if (k.rfind("heads/", 0) == 0) head_moments.tensors[k.substr(6)] = v;
        }
        serialize::moments_from_archive(net_.params(), net_moments);
        serialize::moments_from_archive(heads_.params(), head_moments);

        std::ifstream st_is(dir / "state.json");
        if (!st_is) fail("restore_state: missing state at " + dir.string());
        json state = json::parse(st_is);
        step_ = state.at("step").get<int64_t>();
        rng_.load_state(state.at("rng").get<std::string>());
    }

private:
    TrainConfig cfg_;
    model::Backbone<float> net_;
    align::AlignmentHeads<float> heads_;
    std::vector<MatF> ema_;
    Rng rng_;
    int64_t step_ = 0;

    static void merge_sinks(std::vector<MatF>& into, const std::vector<MatF>& from) {
        for (size_t i = 0; i < into.size(); ++i) {
            if (from[i].size() == 0) continue;
            if (into[i].size() == 0)
                into[i] = from[i];
            else
                into[i] += from[i];
        }
    }
};

}  // namespace comit::train
