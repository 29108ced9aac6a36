#pragma once

// Command-line entry points. Every artifact-producing command resolves its
// configuration (built-in defaults, then a JSON config file, then explicit
// flags), seeds all randomness from one root seed, and writes a run manifest
// next to its outputs.

#include "comit/baselines.hpp"
#include "comit/experiment.hpp"
#include "comit/png_io.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

namespace comit::cli {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr const char* kVersion = "comit 0.1.0";

inline fs::path output_root() {
    if (const char* env = std::getenv("COMIT_HOME")) return fs::path(env);
    return fs::path("runs");
}

// relative output paths land under the output root; absolute paths untouched
inline fs::path resolve_out(const std::string& path) {
    fs::path p(path);
    return p.is_absolute() ? p : output_root() / p;
}

inline std::string hex64(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

inline std::string config_hash(const json& config) { return hex64(fnv1a64(config.dump())); }

inline std::string timestamp_now() {
    auto now = std::chrono::system_clock::now();
    std::time_t t = std::chrono::system_clock::to_time_t(now);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
}

// one manifest per run directory; a second run in the same directory is an
// error, checked before any artifact is produced
inline void ensure_fresh_run_dir(const fs::path& run_dir) {
    if (fs::exists(run_dir / "manifest.json"))
        fail("run directory already holds a manifest: " + (run_dir / "manifest.json").string());
}

inline void write_manifest(const fs::path& run_dir, const std::string& command,
                           const json& config, uint64_t seed,
                           const std::string& started_at) {
    fs::create_directories(run_dir);
    fs::path manifest_path = run_dir / "manifest.json";
    if (fs::exists(manifest_path))
        fail("run directory already holds a manifest: " + manifest_path.string());
    std::ofstream cfg_os(run_dir / "config.json");
    cfg_os << config.dump(2) << "\n";
    json manifest;
    manifest["command"] = command;
    manifest["config_hash"] = config_hash(config);
    manifest["seed"] = seed;
    manifest["version"] = kVersion;
    manifest["output_dir"] = ".";
    manifest["started_at"] = started_at;
    manifest["finished_at"] = timestamp_now();
    std::ofstream os(manifest_path);
    os << manifest.dump(2) << "\n";
}

// defaults <- config file <- explicit flags
inline train::TrainConfig resolve_train_config(const std::string& config_file,
                                               const CLI::App* cmd) {
    train::TrainConfig cfg;
    if (!config_file.empty()) {
        std::ifstream is(config_file);
        if (!is) fail("cannot read config file: " + config_file);
        json merged = json(cfg);
        json overlay = json::parse(is);
        merged.merge_patch(overlay);
        cfg = merged.get<train::TrainConfig>();
    }
    auto maybe = [&](const std::string& flag, auto setter) {
        if (cmd->count(flag) > 0) setter();
    };
    maybe("--steps", [&] { cfg.steps = cmd->get_option("--steps")->as<int>(); });
    maybe("--batch", [&] { cfg.batch_size = cmd->get_option("--batch")->as<int>(); });
    maybe("--seed", [&] { cfg.seed = cmd->get_option("--seed")->as<uint64_t>(); });
    maybe("--lr", [&] { cfg.lr_base = cmd->get_option("--lr")->as<double>(); });
    maybe("--warmup", [&] { cfg.warmup_steps = cmd->get_option("--warmup")->as<int>(); });
    maybe("--threads", [&] { cfg.threads = cmd->get_option("--threads")->as<int>(); });
    maybe("--k-mode", [&] { cfg.sampler.k_mode = cmd->get_option("--k-mode")->as<int>(); });
    maybe("--k-max", [&] { cfg.sampler.k_max = cmd->get_option("--k-max")->as<int>(); });
    maybe("--p-cfg", [&] { cfg.regimes.p_cfg = cmd->get_option("--p-cfg")->as<double>(); });
    maybe("--p-global",
          [&] { cfg.regimes.p_global = cmd->get_option("--p-global")->as<double>(); });
    return cfg;
}

inline train::Trainer load_trainer(const std::string& checkpoint) {
    if (!fs::exists(fs::path(checkpoint) / "config.json"))
        fail("missing checkpoint at " + checkpoint);
    return train::Trainer::load_checkpoint(checkpoint);
}

inline model::Backbone<float> load_eval_net(const std::string& checkpoint, bool use_ema) {
    train::Trainer t = load_trainer(checkpoint);
    return use_ema ? t.ema_net() : t.net();
}

inline policy::PolicySpec policy_from_flags(const std::string& kind, bool with_global,
                                            int n_local, int grid, int crop_size, uint64_t seed) {
    policy::PolicySpec spec;
    spec.kind = policy::kind_from_name(kind);
    spec.with_global = spec.kind == policy::Kind::global_only ? true : with_global;
    spec.n_local = spec.kind == policy::Kind::global_only ? 0 : n_local;
    spec.grid = grid;
    spec.crop_size = crop_size;
    spec.seed = seed;
    spec.validate();
    return spec;
}

inline int dispatch(const std::vector<std::string>& args) {
    CLI::App app{"COMiT: iterative discrete image tokenization with a flow-matching decoder"};
    app.require_subcommand(1);

    // ---- make-data ----
    auto* cmd_data = app.add_subcommand("make-data", "generate the sprites dataset");
    int data_n = 10000;
    uint64_t data_seed = 0;
    std::string data_out;
    cmd_data->add_option("--n", data_n, "number of scenes");
    cmd_data->add_option("--seed", data_seed, "generation seed");
    cmd_data->add_option("--out", data_out, "output directory")->required();

    // ---- train ----
    auto* cmd_train = app.add_subcommand("train", "train the tokenizer");
    std::string train_data, train_out, train_config;
    bool train_dry = false;
    cmd_train->add_option("--data", train_data, "dataset directory")->required();
    cmd_train->add_option("--out", train_out, "run directory")->required();
    cmd_train->add_option("--config", train_config, "JSON config file");
    cmd_train->add_flag("--dry-run", train_dry, "resolve config and write the manifest only");
    cmd_train->add_option("--steps", "total optimizer steps");
    cmd_train->add_option("--batch", "batch size");
    cmd_train->add_option("--seed", "root seed");
    cmd_train->add_option("--lr", "base learning rate");
    cmd_train->add_option("--warmup", "warmup steps");
    cmd_train->add_option("--threads", "worker threads");
    cmd_train->add_option("--k-mode", "crop count mode");
    cmd_train->add_option("--k-max", "crop count maximum");
    cmd_train->add_option("--p-cfg", "unconditional-drop probability");
    cmd_train->add_option("--p-global", "global-substitution probability");

    // ---- encode ----
    auto* cmd_encode = app.add_subcommand("encode", "tokenize one image");
    std::string enc_ckpt, enc_image, enc_data, enc_out, enc_policy = "global";
    int enc_id = -1, enc_nlocal = 0, enc_grid = 3, enc_crop = 0;
    bool enc_with_global = true, enc_raw_weights = false;
    uint64_t enc_seed = 0;
    cmd_encode->add_option("--checkpoint", enc_ckpt)->required();
    cmd_encode->add_option("--image", enc_image, "input PNG");
    cmd_encode->add_option("--data", enc_data, "dataset directory (with --id)");
    cmd_encode->add_option("--id", enc_id, "image id within --data");
    cmd_encode->add_option("--policy", enc_policy, "global|random|raster|adaptive");
    cmd_encode->add_option("--with-global", enc_with_global);
    cmd_encode->add_option("--n-local", enc_nlocal);
    cmd_encode->add_option("--grid", enc_grid);
    cmd_encode->add_option("--crop-size", enc_crop, "local window size (default: model)");
    cmd_encode->add_option("--seed", enc_seed);
    cmd_encode->add_flag("--raw-weights", enc_raw_weights, "use raw instead of EMA weights");
    cmd_encode->add_option("--out", enc_out, "output message file")->required();

    // ---- decode ----
    auto* cmd_decode = app.add_subcommand("decode", "reconstruct an image from a message");
    std::string dec_ckpt, dec_msg, dec_out, dec_previews;
    int dec_nfe = 10;
    double dec_cfg = 7.5;
    uint64_t dec_seed = 0;
    bool dec_raw_weights = false;
    cmd_decode->add_option("--checkpoint", dec_ckpt)->required();
    cmd_decode->add_option("--message", dec_msg)->required();
    cmd_decode->add_option("--nfe", dec_nfe, "integration steps");
    cmd_decode->add_option("--cfg", dec_cfg, "guidance weight");
    cmd_decode->add_option("--seed", dec_seed);
    cmd_decode->add_option("--out", dec_out, "output PNG")->required();
    cmd_decode->add_option("--previews", dec_previews, "per-step preview strip PNG");
    cmd_decode->add_flag("--raw-weights", dec_raw_weights);

    // ---- probe ----
    auto* cmd_probe = app.add_subcommand("probe", "train a frozen-token probe");
    std::string probe_ckpt, probe_data, probe_out, probe_task = "classification", probe_tokens;
    uint64_t probe_seed = 0;
    int probe_steps = 3000;
    cmd_probe->add_option("--checkpoint", probe_ckpt)->required();
    cmd_probe->add_option("--data", probe_data)->required();
    cmd_probe->add_option("--task", probe_task, "classification|pairs|relations");
    cmd_probe->add_option("--tokens", probe_tokens, "pre-tokenized dump directory");
    cmd_probe->add_option("--seed", probe_seed);
    cmd_probe->add_option("--max-steps", probe_steps);
    cmd_probe->add_option("--out", probe_out, "run directory")->required();

    // ---- analyze-attn ----
    auto* cmd_attn = app.add_subcommand("analyze-attn", "token attention-map overlap");
    std::string attn_ckpt, attn_data, attn_out;
    double attn_q = 30.0, attn_t = 0.1;
    int attn_layer = 0, attn_n = 64;
    uint64_t attn_seed = 0;
    cmd_attn->add_option("--checkpoint", attn_ckpt)->required();
    cmd_attn->add_option("--data", attn_data)->required();
    cmd_attn->add_option("--q", attn_q, "top value percentage");
    cmd_attn->add_option("--layer", attn_layer, "tap layer (0 = penultimate)");
    cmd_attn->add_option("--t", attn_t, "analysis timestep");
    cmd_attn->add_option("--n", attn_n, "images to analyze");
    cmd_attn->add_option("--seed", attn_seed);
    cmd_attn->add_option("--out", attn_out, "run directory")->required();

    // ---- neighbors ----
    auto* cmd_nn = app.add_subcommand("neighbors", "nearest neighbors in message space");
    std::string nn_ckpt, nn_data, nn_out;
    int nn_k = 4, nn_gallery = 200;
    std::vector<int> nn_queries;
    uint64_t nn_seed = 0;
    cmd_nn->add_option("--checkpoint", nn_ckpt)->required();
    cmd_nn->add_option("--data", nn_data)->required();
    cmd_nn->add_option("--k", nn_k);
    cmd_nn->add_option("--gallery", nn_gallery, "gallery size");
    cmd_nn->add_option("--query", nn_queries, "query image ids (default: whole gallery)");
    cmd_nn->add_option("--seed", nn_seed);
    cmd_nn->add_option("--out", nn_out, "run directory")->required();

    // ---- reconstruct-grid ----
    auto* cmd_grid = app.add_subcommand("reconstruct-grid", "policy evolution panel strips");
    std::string grid_ckpt, grid_data, grid_out, grid_policy = "adaptive";
    std::vector<int> grid_ids;
    bool grid_with_global = false;
    int grid_nlocal = 3, grid_grid = 3;
    uint64_t grid_seed = 0;
    cmd_grid->add_option("--checkpoint", grid_ckpt)->required();
    cmd_grid->add_option("--data", grid_data)->required();
    cmd_grid->add_option("--ids", grid_ids, "image ids (empty: no-op)");
    cmd_grid->add_option("--policy", grid_policy);
    cmd_grid->add_option("--with-global", grid_with_global);
    cmd_grid->add_option("--n-local", grid_nlocal);
    cmd_grid->add_option("--grid", grid_grid);
    cmd_grid->add_option("--seed", grid_seed);
    cmd_grid->add_option("--out", grid_out, "output directory")->required();

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        const std::string started = timestamp_now();
        for (std::string* out : {&data_out, &train_out, &enc_out, &dec_out, &probe_out, &attn_out,
                                 &nn_out, &grid_out})
            if (!out->empty()) *out = resolve_out(*out).string();
        // run-directory commands refuse to reuse a directory with a manifest
        if (cmd_data->parsed()) ensure_fresh_run_dir(data_out);
        if (cmd_train->parsed()) ensure_fresh_run_dir(train_out);
        if (cmd_probe->parsed()) ensure_fresh_run_dir(probe_out);
        if (cmd_attn->parsed()) ensure_fresh_run_dir(attn_out);
        if (cmd_nn->parsed()) ensure_fresh_run_dir(nn_out);
        if (cmd_grid->parsed()) ensure_fresh_run_dir(grid_out);

        if (cmd_data->parsed()) {
            data::Dataset ds = data::generate(data_n, data_seed);
            data::save_dataset(ds, data_out);
            // task split files alongside the data
            fs::create_directories(fs::path(data_out) / "splits");
            auto pair_ids = data::two_category_ids(ds);
            try {
                auto split = data::pair_disjoint_split(ds, pair_ids, 0.8,
                                                       derive_seed(data_seed, "pairs"));
                data::save_split(split, fs::path(data_out) / "splits" / "pairs.json");
            } catch (const std::exception& e) {
                std::cerr << "pair split unavailable: " << e.what() << "\n";
            }
            auto class_ids = data::single_object_ids(ds);
            data::save_split(data::image_disjoint_split(class_ids, 0.8,
                                                        derive_seed(data_seed, "class")),
                             fs::path(data_out) / "splits" / "classification.json");
            auto rel_ids = data::related_scene_ids(ds);
            data::save_split(data::image_disjoint_split(rel_ids, 0.8,
                                                        derive_seed(data_seed, "relations")),
                             fs::path(data_out) / "splits" / "relations.json");
            write_manifest(data_out, "make-data",
                           json{{"n", data_n}, {"seed", data_seed}}, data_seed, started);
            return 0;
        }

        if (cmd_train->parsed()) {
            train::TrainConfig cfg = resolve_train_config(train_config, cmd_train);
            cfg.validate();
            write_manifest(train_out, "train", json(cfg), cfg.seed, started);
            if (train_dry) return 0;

            data::Dataset ds = data::load_dataset(train_data);
            align::OracleTeacher teacher(cfg.align.teacher_dim, cfg.backbone.grid_side(),
                                         cfg.backbone.image_size,
                                         derive_seed(cfg.seed, "teacher"));
            train::Trainer trainer(cfg);
            std::ofstream metrics(fs::path(train_out) / "metrics.jsonl");
            exp::TrainHooks hooks;
            hooks.on_step = [&](const train::LossBreakdown& b) {
                if (!b.applied) std::cerr << "step " << b.step << ": " << b.diagnostic << "\n";
                if (b.step % 50 == 0)
                    std::cout << "step " << b.step << " fm " << b.fm << " total " << b.total
                              << " lr " << b.lr << "\n";
            };
            exp::run_training(trainer, ds, train::oracle_teacher_fn(teacher), hooks, &metrics);
            trainer.save_checkpoint(fs::path(train_out) / "checkpoint");
            return 0;
        }

        if (cmd_encode->parsed()) {
            model::Backbone<float> net = load_eval_net(enc_ckpt, !enc_raw_weights);
            ImageF image;
            if (!enc_image.empty()) {
                auto png = pngio::read_rgb8(enc_image);
                require(png.width == net.config().image_size &&
                            png.height == net.config().image_size,
                        "encode: image extent does not match the model");
                image = image_from_u8<float>(png.data, png.height, png.width);
            } else {
                require(!enc_data.empty() && enc_id >= 0,
                        "encode: need --image or --data with --id");
                data::Dataset ds = data::load_dataset(enc_data);
                image = ds.image<float>(enc_id);
            }
            int crop = enc_crop > 0 ? enc_crop : net.config().crop_size;
            policy::PolicySpec spec = policy_from_flags(enc_policy, enc_with_global, enc_nlocal,
                                                        enc_grid, crop, enc_seed);
            auto result = policy::run_policy(net, image, spec);
            fsq::save_message(enc_out, result.message);
            std::ofstream plan_os(enc_out + ".plan.json");
            plan_os << geom::plan_to_json(result.plan).dump(2) << "\n";
            return 0;
        }

        if (cmd_decode->parsed()) {
            model::Backbone<float> net = load_eval_net(dec_ckpt, !dec_raw_weights);
            fsq::LatentMessage msg = fsq::load_message(dec_msg, net.config().fsq);
            Vec2 anchor{0.0, 0.0};
            if (fs::exists(dec_msg + ".plan.json")) {
                std::ifstream is(dec_msg + ".plan.json");
                auto plan = geom::plan_from_json<float>(json::parse(is));
                anchor = plan.global_offset;
            }
            flow::GuidanceConfig guidance;
            guidance.nfe = dec_nfe;
            guidance.weight = dec_cfg;
            auto uncond = enc::init_message(net.config().fsq, net.config().message_length,
                                            enc::default_init_id(net.config().fsq));
            model::VelocityAdapter<float> adapter(net);
            Rng rng(derive_seed(dec_seed, "decode"));
            std::vector<ImageF> previews;
            ImageF out = flow::decode<float>(adapter, msg, anchor, guidance, uncond, rng,
                                             dec_previews.empty() ? nullptr : &previews);
            out.pix = out.pix.cwiseMax(-1.0f).cwiseMin(1.0f);
            pngio::write_rgb8(dec_out, {out.width, out.height, image_to_u8(out)});
            if (!dec_previews.empty()) {
                for (auto& p : previews) p.pix = p.pix.cwiseMax(-1.0f).cwiseMin(1.0f);
                ImageF strip = analysis::hstack_images(previews);
                pngio::write_rgb8(dec_previews, {strip.width, strip.height, image_to_u8(strip)});
            }
            return 0;
        }

        if (cmd_probe->parsed()) {
            model::Backbone<float> net = load_eval_net(probe_ckpt, true);
            data::Dataset ds = data::load_dataset(probe_data);
            probe::Task task = probe::task_from_name(probe_task);

            std::map<int, fsq::LatentMessage> messages;
            if (!probe_tokens.empty()) {
                messages = exp::load_token_dumps(probe_tokens, net.config().fsq);
            } else {
                std::vector<int> ids;
                switch (task) {
                    case probe::Task::classification: ids = data::single_object_ids(ds); break;
                    case probe::Task::pairs: ids = data::two_category_ids(ds); break;
                    case probe::Task::relations: ids = data::related_scene_ids(ds); break;
                }
                policy::PolicySpec spec;
                spec.kind = policy::Kind::global_only;
                spec.n_local = 0;
                spec.crop_size = net.config().crop_size;
                fs::path dump_dir = fs::path(probe_out) / "tokens";
                messages = exp::tokenize_set(net, ds, ids, spec, &dump_dir);
            }
            exp::ProbeSuiteConfig suite;
            suite.train.seed = probe_seed;
            suite.train.max_steps = probe_steps;
            suite.split_seed = derive_seed(probe_seed, "split");
            auto outcome = exp::run_probe_task(task, ds, messages, net.config().fsq,
                                               net.config().message_length, suite);
            json results;
            results["task"] = probe::task_name(task);
            results["accuracy"] = outcome.accuracy;
            results["best_step"] = outcome.best_step;
            results["train_size"] = outcome.train_size;
            results["eval_size"] = outcome.eval_size;
            fs::create_directories(probe_out);
            std::ofstream os(fs::path(probe_out) / "results.json");
            os << results.dump(2) << "\n";
            write_manifest(probe_out, "probe",
                           json{{"task", probe_task}, {"seed", probe_seed}}, probe_seed, started);
            return 0;
        }

        if (cmd_attn->parsed()) {
            model::Backbone<float> net = load_eval_net(attn_ckpt, true);
            data::Dataset ds = data::load_dataset(attn_data);
            analysis::AttnAnalysisConfig acfg;
            acfg.layer = attn_layer;
            acfg.denoise_t = attn_t;
            acfg.threshold_q = attn_q;
            acfg.seed = attn_seed;
            acfg.validate();

            fs::create_directories(attn_out);
            std::ofstream csv(fs::path(attn_out) / "iou.csv");
            csv << "image_id,best_token,iou\n";
            double total = 0.0;
            int counted = 0;
            int limit = std::min(attn_n, ds.size());
            for (int id = 0; id < limit; ++id) {
                ImageF image = ds.image<float>(id);
                auto msg = enc::encode_step(
                    net, image, {0.0, 0.0},
                    enc::init_message(net.config().fsq, net.config().message_length,
                                      enc::default_init_id(net.config().fsq)));
                auto maps = analysis::token_attention_maps(net, image, msg, acfg);
                const auto& scene = ds.scenes[static_cast<size_t>(id)];
                for (const auto& obj : scene.objects) {
                    MatF gt = analysis::mask_to_patch_grid(obj.mask, ds.canvas,
                                                           net.config().patch_size);
                    double best = -1.0;
                    int best_token = 0;
                    for (size_t j = 0; j < maps.size(); ++j) {
                        double iou = analysis::threshold_iou(maps[j], gt, attn_q);
                        if (iou > best) {
                            best = iou;
                            best_token = static_cast<int>(j);
                        }
                    }
                    csv << id << "," << best_token << "," << best << "\n";
                    total += best;
                    ++counted;
                }
            }
            json summary;
            summary["miou"] = counted ? total / counted : 0.0;
            summary["images"] = limit;
            summary["objects"] = counted;
            summary["q"] = attn_q;
            std::ofstream os(fs::path(attn_out) / "summary.json");
            os << summary.dump(2) << "\n";
            write_manifest(attn_out, "analyze-attn",
                           json{{"q", attn_q}, {"layer", attn_layer}, {"t", attn_t}}, attn_seed,
                           started);
            return 0;
        }

        if (cmd_nn->parsed()) {
            model::Backbone<float> net = load_eval_net(nn_ckpt, true);
            data::Dataset ds = data::load_dataset(nn_data);
            int gallery_size = std::min(nn_gallery, ds.size());
            std::vector<int> gallery_ids;
            for (int i = 0; i < gallery_size; ++i) gallery_ids.push_back(i);
            policy::PolicySpec spec;
            spec.kind = policy::Kind::global_only;
            spec.n_local = 0;
            spec.crop_size = net.config().crop_size;
            auto messages = exp::tokenize_set(net, ds, gallery_ids, spec);
            std::vector<fsq::LatentMessage> gallery;
            for (int id : gallery_ids) gallery.push_back(messages.at(id));

            std::vector<int> queries = nn_queries.empty() ? gallery_ids : nn_queries;
            json results = json::object();
            for (int q : queries) {
                require(messages.count(q) > 0, "neighbors: query outside the gallery");
                auto top = analysis::nearest_neighbors(messages.at(q), gallery,
                                                       std::min(nn_k + 1, gallery_size));
                json list = json::array();
                for (int idx : top) {
                    if (gallery_ids[static_cast<size_t>(idx)] == q) continue;  // drop self
                    list.push_back(gallery_ids[static_cast<size_t>(idx)]);
                    if (static_cast<int>(list.size()) == nn_k) break;
                }
                results[std::to_string(q)] = list;
            }
            fs::create_directories(nn_out);
            std::ofstream os(fs::path(nn_out) / "neighbors.json");
            os << results.dump(2) << "\n";
            write_manifest(nn_out, "neighbors", json{{"k", nn_k}, {"gallery", gallery_size}},
                           nn_seed, started);
            return 0;
        }

        if (cmd_grid->parsed()) {
            model::Backbone<float> net = load_eval_net(grid_ckpt, true);
            data::Dataset ds = data::load_dataset(grid_data);
            fs::create_directories(grid_out);
            policy::PolicySpec spec = policy_from_flags(grid_policy, grid_with_global,
                                                        grid_nlocal, grid_grid,
                                                        net.config().crop_size, grid_seed);
            model::VelocityAdapter<float> adapter(net);
            auto uncond = enc::init_message(net.config().fsq, net.config().message_length,
                                            enc::default_init_id(net.config().fsq));
            for (int id : grid_ids) {
                ImageF image = ds.image<float>(id);
                auto result = policy::run_policy(net, image, spec);
                analysis::PanelConfig pcfg;
                pcfg.seed = derive_seed(grid_seed, "panel-" + std::to_string(id));
                ImageF strip = analysis::uncertainty_panel(
                    adapter, image, result.trace, result.plan.global_offset, uncond, pcfg);
                pngio::write_rgb8(fs::path(grid_out) /
                                      (data::scene_file_stem(id) + "_" + grid_policy + ".png"),
                                  {strip.width, strip.height, image_to_u8(strip)});
            }
            write_manifest(grid_out, "reconstruct-grid",
                           json{{"policy", grid_policy}, {"ids", grid_ids}}, grid_seed, started);
            return 0;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

}  // namespace comit::cli
