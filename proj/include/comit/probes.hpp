#pragma once

// Frozen-token probing: a shallow two-layer self-attention network reads a
// message's dequantized token values behind a learned CLS slot and answers
// one of three tasks:
//   - classification: single-label logits over categories (top-1)
//   - pairs: multi-label logits, success iff both truths are in the top five
//   - relations: one compatibility logit per (message, triplet); contrastive
//     training against negatives drawn from other images
// The probe never touches tokenizer weights; token dumps are read-only input.

#include "comit/common.hpp"
#include "comit/datagen.hpp"
#include "comit/fsq.hpp"
#include "comit/graph.hpp"
#include "comit/trainer.hpp"

#include <nlohmann/json.hpp>
#include <omp.h>

#include <algorithm>
#include <map>
#include <optional>
#include <vector>

namespace comit::probe {

using nlohmann::json;

enum class Task { classification, pairs, relations };

inline const char* task_name(Task t) {
    switch (t) {
        case Task::classification: return "classification";
        case Task::pairs: return "pairs";
        case Task::relations: return "relations";
    }
    fail("task_name: bad task");
}

inline Task task_from_name(const std::string& s) {
    if (s == "classification") return Task::classification;
    if (s == "pairs") return Task::pairs;
    if (s == "relations") return Task::relations;
    fail("unknown probe task: " + s);
}

struct ProbeConfig {
    int model_dim = 64;
    int depth = 2;  // fixed by the protocol
    int heads = 8;
    int token_dim = 4;       // FSQ channel count
    int max_tokens = 16;     // message length
    int num_categories = data::kNumCategories;
    int num_predicates = data::kNumPredicates;
    Task task = Task::classification;

    void validate() const {
        require(depth == 2, "ProbeConfig: the probe is a fixed two-layer encoder");
        require(model_dim % heads == 0, "ProbeConfig: heads must divide model_dim");
        require(model_dim >= 8 && max_tokens >= 1, "ProbeConfig: degenerate shape");
    }

    int type_vocab() const { return task == Task::relations ? 5 : 2; }
    int seq_len() const { return 1 + max_tokens + (task == Task::relations ? 3 : 0); }
    int head_dim() const { return model_dim / heads; }
};

struct Triplet {
    int subject_category = 0;
    int predicate = 0;
    int object_category = 0;

    bool operator==(const Triplet& o) const = default;
};

struct ProbeExample {
    MatD tokens;   // L x d dequantized message values (frozen)
    int label = -1;             // classification
    std::pair<int, int> labels{-1, -1};  // pairs (unordered categories)
    Triplet triplet;            // relations (the positive)
    int image_id = -1;
};

template <typename T>
class ProbeNet {
public:
    explicit ProbeNet(ProbeConfig cfg, uint64_t seed) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(derive_seed(seed, "probe-init"));
        const int m = cfg_.model_dim;
        auto dense = [&](const std::string& name, int r, int c) {
            Mat<T> w(r, c);
            for (Eigen::Index i = 0; i < w.rows(); ++i)
                for (Eigen::Index j = 0; j < w.cols(); ++j)
                    w(i, j) = static_cast<T>(0.02 * rng.normal());
            return store_.add(name, std::move(w));
        };
        auto zeros = [&](const std::string& name, int r, int c) {
            return store_.add(name, Mat<T>::Zero(r, c));
        };

        proj_w_ = dense("proj.w", cfg_.token_dim, m);
        proj_b_ = zeros("proj.b", 1, m);
        cls_ = dense("cls", 1, m);
        pos_ = dense("pos", cfg_.seq_len(), m);
        type_ = dense("type", cfg_.type_vocab(), m);
        if (cfg_.task == Task::relations) {
            cat_emb_ = dense("cat_emb", cfg_.num_categories, m);
            pred_emb_ = dense("pred_emb", cfg_.num_predicates, m);
        }
        for (int l = 0; l < cfg_.depth; ++l) {
            std::string p = "block" + std::to_string(l) + ".";
            Block b;
            b.qkv_w = dense(p + "qkv.w", m, 3 * m);
            b.qkv_b = zeros(p + "qkv.b", 1, 3 * m);
            b.out_w = dense(p + "out.w", m, m);
            b.out_b = zeros(p + "out.b", 1, m);
            b.mlp_w1 = dense(p + "mlp.w1", m, 4 * m);
            b.mlp_b1 = zeros(p + "mlp.b1", 1, 4 * m);
            b.mlp_w2 = dense(p + "mlp.w2", 4 * m, m);
            b.mlp_b2 = zeros(p + "mlp.b2", 1, m);
            blocks_.push_back(b);
        }
        int out_dim = cfg_.task == Task::classification ? cfg_.num_categories
                      : cfg_.task == Task::pairs        ? cfg_.num_categories
                                                        : 1;
        head_w_ = dense("head.w", m, out_dim);
        head_b_ = zeros("head.b", 1, out_dim);
    }

    const ProbeConfig& config() const { return cfg_; }
    ParamStore<T>& params() { return store_; }
    const ParamStore<T>& params() const { return store_; }

    // logits at the CLS position: 1 x C, or 1 x 1 for the relational task
    typename Graph<T>::Var forward(Graph<T>& g, const Mat<T>& tokens,
                                   const Triplet* triplet = nullptr) const {
        require(tokens.rows() == cfg_.max_tokens && tokens.cols() == cfg_.token_dim,
                "probe: token sequence length mismatch with trained positions");
        require((triplet != nullptr) == (cfg_.task == Task::relations),
                "probe: triplet required exactly for the relational task");

        const int L = cfg_.max_tokens;
        auto tok = g.add_rowvec(g.matmul(g.constant(tokens), g.param(store_m(), proj_w_)),
                                g.param(store_m(), proj_b_));
        std::vector<typename Graph<T>::Var> parts;
        parts.push_back(g.param(store_m(), cls_));
        parts.push_back(tok);
        std::vector<int> type_ids;
        type_ids.push_back(0);
        for (int j = 0; j < L; ++j) type_ids.push_back(1);
        if (cfg_.task == Task::relations) {
            parts.push_back(g.gather_rows(g.param(store_m(), cat_emb_),
                                          {triplet->subject_category}));
            parts.push_back(g.gather_rows(g.param(store_m(), pred_emb_), {triplet->predicate}));
            parts.push_back(g.gather_rows(g.param(store_m(), cat_emb_),
                                          {triplet->object_category}));
            type_ids.push_back(2);
            type_ids.push_back(3);
            type_ids.push_back(4);
        }
        auto x = g.vstack(parts);
        x = g.add(x, g.param(store_m(), pos_));
        x = g.add(x, g.gather_rows(g.param(store_m(), type_), type_ids));

        const int m = cfg_.model_dim;
        for (const Block& b : blocks_) {
            auto xn = g.layernorm_rows(x);
            auto qkv = g.add_rowvec(g.matmul(xn, g.param(store_m(), b.qkv_w)),
                                    g.param(store_m(), b.qkv_b));
            std::vector<typename Graph<T>::Var> head_outs;
            for (int hd = 0; hd < cfg_.heads; ++hd) {
                auto q = g.cols(qkv, hd * cfg_.head_dim(), cfg_.head_dim());
                auto k = g.cols(qkv, m + hd * cfg_.head_dim(), cfg_.head_dim());
                auto v = g.cols(qkv, 2 * m + hd * cfg_.head_dim(), cfg_.head_dim());
                auto att = g.softmax_rows(
                    g.scale(g.matmul_nt(q, k),
                            static_cast<T>(1.0 / std::sqrt(static_cast<double>(cfg_.head_dim())))));
                head_outs.push_back(g.matmul(att, v));
            }
            auto proj = g.add_rowvec(g.matmul(g.hstack(head_outs), g.param(store_m(), b.out_w)),
                                     g.param(store_m(), b.out_b));
            x = g.add(x, proj);
            auto xn2 = g.layernorm_rows(x);
            auto h1 = g.gelu(g.add_rowvec(g.matmul(xn2, g.param(store_m(), b.mlp_w1)),
                                          g.param(store_m(), b.mlp_b1)));
            auto h2 = g.add_rowvec(g.matmul(h1, g.param(store_m(), b.mlp_w2)),
                                   g.param(store_m(), b.mlp_b2));
            x = g.add(x, h2);
        }
        auto cls_row = g.rows(g.layernorm_rows(x), 0, 1);
        return g.add_rowvec(g.matmul(cls_row, g.param(store_m(), head_w_)),
                            g.param(store_m(), head_b_));
    }

    Mat<T> forward_eval(const Mat<T>& tokens, const Triplet* triplet = nullptr) const {
        Graph<T> g;
        return g.val(forward(g, tokens, triplet));
    }

private:
    struct Block {
        int qkv_w, qkv_b, out_w, out_b, mlp_w1, mlp_b1, mlp_w2, mlp_b2;
    };

    ProbeConfig cfg_;
    mutable ParamStore<T> store_;
    std::vector<Block> blocks_;
    int proj_w_, proj_b_, cls_, pos_, type_;
    int cat_emb_ = -1, pred_emb_ = -1;
    int head_w_, head_b_;

    ParamStore<T>& store_m() const { return store_; }
};

// ---- evaluation ------------------------------------------------------------------

inline bool both_in_top5(const MatF& logits, std::pair<int, int> truth) {
    std::vector<int> order(static_cast<size_t>(logits.cols()));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return logits(0, a) > logits(0, b); });
    bool a = false, b = false;
    for (int i = 0; i < 5 && i < static_cast<int>(order.size()); ++i) {
        if (order[static_cast<size_t>(i)] == truth.first) a = true;
        if (order[static_cast<size_t>(i)] == truth.second) b = true;
    }
    return a && b;
}

struct RelationCandidates {
    Triplet positive;
    std::vector<Triplet> negatives;
};

// negatives are triplets of other images; resampled deterministically per
// (seed, example)
inline RelationCandidates sample_negatives(const std::vector<ProbeExample>& pool,
                                           size_t example_idx, int n, uint64_t seed) {
    const ProbeExample& ex = pool[example_idx];
    std::vector<const ProbeExample*> others;
    for (size_t i = 0; i < pool.size(); ++i)
        if (pool[i].image_id != ex.image_id) others.push_back(&pool[i]);
    require(static_cast<int>(others.size()) >= n,
            "relations: fewer candidate negatives than requested");
    Rng rng(derive_seed(seed, "negatives-" + std::to_string(ex.image_id)));
    RelationCandidates out;
    out.positive = ex.triplet;
    std::vector<const ProbeExample*> pool_copy = others;
    for (int k = 0; k < n; ++k) {
        int pick = rng.uniform_int(0, static_cast<int>(pool_copy.size()) - 1);
        out.negatives.push_back(pool_copy[static_cast<size_t>(pick)]->triplet);
        pool_copy.erase(pool_copy.begin() + pick);
    }
    return out;
}

inline double eval_classification(const ProbeNet<float>& net,
                                  const std::vector<ProbeExample>& split) {
    require(!split.empty(), "eval_classification: empty split");
    int hits = 0;
#pragma omp parallel for schedule(static) reduction(+ : hits)
    for (int i = 0; i < static_cast<int>(split.size()); ++i) {
        MatF logits = net.forward_eval(split[static_cast<size_t>(i)].tokens.cast<float>());
        Eigen::Index best;
        logits.row(0).maxCoeff(&best);
        if (static_cast<int>(best) == split[static_cast<size_t>(i)].label) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(split.size());
}

inline double eval_pairs(const ProbeNet<float>& net, const std::vector<ProbeExample>& split) {
    require(!split.empty(), "eval_pairs: empty split");
    int hits = 0;
#pragma omp parallel for schedule(static) reduction(+ : hits)
    for (int i = 0; i < static_cast<int>(split.size()); ++i) {
        MatF logits = net.forward_eval(split[static_cast<size_t>(i)].tokens.cast<float>());
        if (both_in_top5(logits, split[static_cast<size_t>(i)].labels)) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(split.size());
}

inline double eval_relations(const ProbeNet<float>& net, const std::vector<ProbeExample>& split,
                             int negatives_per_image, uint64_t seed) {
    require(!split.empty(), "eval_relations: empty split");
    int hits = 0;
#pragma omp parallel for schedule(static) reduction(+ : hits)
    for (int i = 0; i < static_cast<int>(split.size()); ++i) {
        auto cands = sample_negatives(split, static_cast<size_t>(i), negatives_per_image, seed);
        MatF tokens = split[static_cast<size_t>(i)].tokens.cast<float>();
        double pos_score = net.forward_eval(tokens, &cands.positive)(0, 0);
        bool best = true;
        for (const Triplet& neg : cands.negatives)
            if (net.forward_eval(tokens, &neg)(0, 0) >= pos_score) best = false;
        if (best) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(split.size());
}

// ---- training --------------------------------------------------------------------

struct ProbeTrainConfig {
    double lr = 1e-4;  // constant rate
    double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
    int batch = 32;
    int max_steps = 3000;
    int eval_every = 150;
    int patience = 10;  // evaluations without improvement
    int negatives = 9;  // relational task
    int threads = 2;
    uint64_t seed = 0;
};

struct ProbeResult {
    double best_metric = 0.0;
    int64_t best_step = 0;
    int64_t steps_run = 0;
};

inline json result_json(Task task, const ProbeResult& r) {
    return json{{"task", task_name(task)},
                {"accuracy", r.best_metric},
                {"best_step", r.best_step},
                {"steps_run", r.steps_run}};
}

// early-stopped Adam training; returns the metric of the best validation
// checkpoint (whose weights are left installed in `net`)
inline ProbeResult train_probe(ProbeNet<float>& net, const std::vector<ProbeExample>& train_split,
                               const std::vector<ProbeExample>& val_split,
                               const ProbeTrainConfig& cfg) {
    require(!train_split.empty() && !val_split.empty(), "train_probe: empty split");
    const Task task = net.config().task;
    Rng order_rng(derive_seed(cfg.seed, "probe-order"));

    auto evaluate = [&] {
        switch (task) {
            case Task::classification: return eval_classification(net, val_split);
            case Task::pairs: return eval_pairs(net, val_split);
            case Task::relations: return eval_relations(net, val_split, cfg.negatives, cfg.seed);
        }
        fail("train_probe: bad task");
    };

    ProbeResult result;
    std::vector<MatF> best_weights;
    auto snapshot = [&] {
        best_weights.clear();
        for (int i = 0; i < net.params().size(); ++i) best_weights.push_back(net.params().weight(i));
    };
    result.best_metric = evaluate();
    snapshot();
    int stale = 0;

    std::vector<int> order(train_split.size());
    std::iota(order.begin(), order.end(), 0);
    size_t cursor = order.size();

    for (int64_t step = 1; step <= cfg.max_steps; ++step) {
        // epoch reshuffle
        std::vector<int> batch_idx;
        for (int b = 0; b < cfg.batch; ++b) {
            if (cursor >= order.size()) {
                for (size_t i = order.size(); i > 1; --i)
                    std::swap(order[i - 1],
                              order[static_cast<size_t>(order_rng.uniform_int(0, static_cast<int>(i) - 1))]);
                cursor = 0;
            }
            batch_idx.push_back(order[cursor++]);
        }

        const int threads = std::min(cfg.threads, static_cast<int>(batch_idx.size()));
        std::vector<std::vector<MatF>> sinks(
            static_cast<size_t>(threads),
            std::vector<MatF>(static_cast<size_t>(net.params().size())));

#pragma omp parallel for schedule(static) num_threads(threads)
        for (int b = 0; b < static_cast<int>(batch_idx.size()); ++b) {
            const int tid = omp_get_thread_num();
            const ProbeExample& ex = train_split[static_cast<size_t>(batch_idx[static_cast<size_t>(b)])];
            Graph<float> g;
            typename Graph<float>::Var loss;
            MatF tokens = ex.tokens.cast<float>();
            if (task == Task::classification) {
                auto logits = net.forward(g, tokens);
                loss = g.cross_entropy(logits, {ex.label});
            } else if (task == Task::pairs) {
                auto logits = net.forward(g, tokens);
                MatF target = MatF::Zero(1, net.config().num_categories);
                target(0, ex.labels.first) = 1.0f;
                target(0, ex.labels.second) = 1.0f;
                loss = g.bce_with_logits(logits, target);
            } else {
                auto cands = sample_negatives(train_split, static_cast<size_t>(batch_idx[static_cast<size_t>(b)]),
                                              cfg.negatives,
                                              derive_seed(cfg.seed, "train-" + std::to_string(step)));
                std::vector<typename Graph<float>::Var> scores;
                scores.push_back(net.forward(g, tokens, &cands.positive));
                for (const Triplet& neg : cands.negatives)
                    scores.push_back(net.forward(g, tokens, &neg));
                auto logits = g.hstack(scores);
                loss = g.cross_entropy(logits, {0});
            }
            g.backward(loss);
            g.collect_param_grads(sinks[static_cast<size_t>(tid)], &net.params());
        }

        std::vector<MatF>& grads = sinks[0];
        for (int tid = 1; tid < threads; ++tid)
            for (size_t i = 0; i < grads.size(); ++i) {
                if (sinks[static_cast<size_t>(tid)][i].size() == 0) continue;
                if (grads[i].size() == 0)
                    grads[i] = sinks[static_cast<size_t>(tid)][i];
                else
                    grads[i] += sinks[static_cast<size_t>(tid)][i];
            }
        train::scale_grads(grads, 1.0 / static_cast<double>(batch_idx.size()));
        train::adam_step(net.params(), grads, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, step);
        result.steps_run = step;

        if (step % cfg.eval_every == 0) {
            double metric = evaluate();
            if (metric > result.best_metric) {
                result.best_metric = metric;
                result.best_step = step;
                snapshot();
                stale = 0;
            } else if (++stale >= cfg.patience) {
                break;
            }
        }
    }

    for (int i = 0; i < net.params().size(); ++i)
        net.params().weight(i) = best_weights[static_cast<size_t>(i)];
    return result;
}

// ---- example assembly --------------------------------------------------------------

inline std::vector<ProbeExample> make_examples(const data::Dataset& ds,
                                               const std::map<int, fsq::LatentMessage>& messages,
                                               const std::vector<int>& ids, Task task) {
    std::vector<ProbeExample> out;
    for (int id : ids) {
        auto it = messages.find(id);
        if (it == messages.end()) fail("make_examples: missing message for image " + std::to_string(id));
        const data::SpriteScene& scene = ds.scenes[static_cast<size_t>(id)];
        ProbeExample ex;
        ex.tokens = it->second.tokens;
        ex.image_id = id;
        switch (task) {
            case Task::classification:
                require(scene.objects.size() == 1, "classification example needs one object");
                ex.label = scene.objects[0].category();
                break;
            case Task::pairs: {
                auto cats = scene.category_set();
                require(cats.size() == 2, "pairs example needs exactly two categories");
                ex.labels = {*cats.begin(), *std::next(cats.begin())};
                break;
            }
            case Task::relations: {
                require(!scene.relations.empty(), "relations example needs a relation");
                const data::Relation& r = scene.relations.front();
                ex.triplet = {scene.objects[static_cast<size_t>(r.subject)].category(), r.predicate,
                              scene.objects[static_cast<size_t>(r.object)].category()};
                break;
            }
        }
        out.push_back(std::move(ex));
    }
    return out;
}

}  // namespace comit::probe
