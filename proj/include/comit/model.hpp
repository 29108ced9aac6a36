#pragma once

// The shared speaker/listener transformer. One sequence model over
// [offset token | message tokens | buffer tokens | image patch tokens] with
// timestep-conditioned modulation (separate parameter sets for the image
// modality and the message-side modality) and two readouts: per-patch velocity
// and per-buffer-slot message values.
//
// Attention masking: buffer tokens attend causally among themselves and freely
// to everything else; no other token attends to a buffer token. This keeps the
// buffer write-only within a pass, so the readout at buffer slot j depends
// only on buffer inputs at slots <= j.

#include "comit/common.hpp"
#include "comit/fsq.hpp"
#include "comit/graph.hpp"
#include "comit/image.hpp"

#include <nlohmann/json.hpp>

#include <string>
#include <vector>

namespace comit::model {

using nlohmann::json;

struct BackboneConfig {
    int depth = 4;
    int hidden = 128;
    int heads = 4;
    double mlp_ratio = 4.0;
    int patch_size = 8;
    int image_size = 64;
    int crop_size = 24;
    int message_length = 16;
    fsq::FsqSpec fsq = fsq::FsqSpec::desk();
    int align_layer = 2;  // 1-indexed block whose output feeds alignment losses
    int time_freq_dim = 128;

    int grid_side() const { return image_size / patch_size; }
    int num_image_patches() const { return grid_side() * grid_side(); }
    int patch_dim() const { return 3 * patch_size * patch_size; }
    int mlp_hidden() const { return static_cast<int>(hidden * mlp_ratio); }

    void validate() const {
        require(depth >= 1 && hidden >= 8 && heads >= 1, "BackboneConfig: degenerate shape");
        require(hidden % heads == 0, "BackboneConfig: heads must divide hidden");
        require(image_size % patch_size == 0,
                "BackboneConfig: image size must be divisible by patch size");
        require(crop_size % patch_size == 0,
                "BackboneConfig: crop size must be divisible by patch size");
        require(crop_size <= image_size, "BackboneConfig: crop larger than image");
        require(align_layer >= 1 && align_layer <= depth,
                "BackboneConfig: align_layer out of range");
        require(message_length >= 1, "BackboneConfig: empty message");
        require(time_freq_dim % 2 == 0, "BackboneConfig: time_freq_dim must be even");
        fsq.validate();
    }

    bool operator==(const BackboneConfig& o) const = default;
};

inline void to_json(json& j, const BackboneConfig& c) {
    j = json{{"depth", c.depth},
             {"hidden", c.hidden},
             {"heads", c.heads},
             {"mlp_ratio", c.mlp_ratio},
             {"patch_size", c.patch_size},
             {"image_size", c.image_size},
             {"crop_size", c.crop_size},
             {"message_length", c.message_length},
             {"fsq_levels", c.fsq.levels},
             {"align_layer", c.align_layer},
             {"time_freq_dim", c.time_freq_dim}};
}

inline void from_json(const json& j, BackboneConfig& c) {
    j.at("depth").get_to(c.depth);
    j.at("hidden").get_to(c.hidden);
    j.at("heads").get_to(c.heads);
    j.at("mlp_ratio").get_to(c.mlp_ratio);
    j.at("patch_size").get_to(c.patch_size);
    j.at("image_size").get_to(c.image_size);
    j.at("crop_size").get_to(c.crop_size);
    j.at("message_length").get_to(c.message_length);
    j.at("fsq_levels").get_to(c.fsq.levels);
    j.at("align_layer").get_to(c.align_layer);
    j.at("time_freq_dim").get_to(c.time_freq_dim);
}

// 2D sine-cosine table for a gh x gw patch grid: per axis, hidden/4 frequency
// pairs; y encodings occupy the first half of the width
template <typename T>
Mat<T> sincos_grid(int gh, int gw, int hidden) {
    require(hidden % 4 == 0, "sincos_grid: hidden must be divisible by 4");
    int quarter = hidden / 4;
    Mat<T> table(gh * gw, hidden);
    for (int y = 0; y < gh; ++y)
        for (int x = 0; x < gw; ++x) {
            Eigen::Index row = y * gw + x;
            for (int i = 0; i < quarter; ++i) {
                double omega = 1.0 / std::pow(10000.0, static_cast<double>(i) / quarter);
                table(row, 2 * i) = static_cast<T>(std::sin(y * omega));
                table(row, 2 * i + 1) = static_cast<T>(std::cos(y * omega));
                table(row, hidden / 2 + 2 * i) = static_cast<T>(std::sin(x * omega));
                table(row, hidden / 2 + 2 * i + 1) = static_cast<T>(std::cos(x * omega));
            }
        }
    return table;
}

template <typename T>
Mat<T> sincos_time(double t, int dim) {
    Mat<T> emb(1, dim);
    int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        double omega = 1.0 / std::pow(10000.0, static_cast<double>(i) / half);
        emb(0, i) = static_cast<T>(std::cos(1000.0 * t * omega));
        emb(0, half + i) = static_cast<T>(std::sin(1000.0 * t * omega));
    }
    return emb;
}

enum class Mode { encode, decode };

template <typename T>
struct ForwardArgs {
    Mat<T> patches;  // P x patch_dim, raster order
    typename Graph<T>::Var patches_var{};  // optional on-graph patches; wins over `patches`
    int grid_h = 0;
    int grid_w = 0;
    double t = 1.0;
    Vec2 offset;
    Mode mode = Mode::encode;
    // message input: ids (constant embedding) or an on-graph L x d value matrix
    const fsq::LatentMessage* message = nullptr;
    typename Graph<T>::Var message_var{};
    bool capture_attention = false;
    bool capture_block1_modulated = false;
};

template <typename T>
struct ForwardVars {
    typename Graph<T>::Var velocity{};         // P x patch_dim
    typename Graph<T>::Var message_readout{};  // L x d, pre-quantization
    typename Graph<T>::Var tap_image{};        // P x hidden at the align layer
    typename Graph<T>::Var tap_message{};      // L x hidden at the align layer
    std::vector<std::vector<Mat<T>>> attention;  // [layer][head], rows = full sequence
    Mat<T> block1_modulated;  // pre-attention modulated input of block 1
    int seq_len = 0;
    int msg_begin = 0, buf_begin = 0, img_begin = 0;
};

template <typename T>
struct ForwardOutput {
    Mat<T> velocity;
    Mat<T> message_readout;
    Mat<T> tap_image;
    Mat<T> tap_message;
    std::vector<std::vector<Mat<T>>> attention;
    Mat<T> block1_modulated;
    int msg_begin = 0, buf_begin = 0, img_begin = 0;
};

template <typename T>
class Backbone {
public:
    explicit Backbone(BackboneConfig cfg, uint64_t init_seed = 0) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(derive_seed(init_seed, "backbone-init"));
        const int h = cfg_.hidden;
        const int d = cfg_.fsq.token_dim();
        const int mh = cfg_.mlp_hidden();

        patch_w_ = dense("patch.w", cfg_.patch_dim(), h, rng);
        patch_b_ = zeros("patch.b", 1, h);
        offset_w_ = dense("offset.w", 2, h, rng);
        offset_b_ = zeros("offset.b", 1, h);
        offset_pos_ = dense("offset.pos", 1, h, rng);
        msg_w1_ = dense("msg.w1", d, h, rng);
        msg_b1_ = zeros("msg.b1", 1, h);
        msg_w2_ = dense("msg.w2", h, h, rng);
        msg_b2_ = zeros("msg.b2", 1, h);
        msg_pos_ = dense("msg.pos", cfg_.message_length, h, rng);
        buffer_emb_ = dense("buffer.emb", 1, h, rng);
        buffer_pos_ = dense("buffer.pos", cfg_.message_length, h, rng);
        time_w1_ = dense("time.w1", cfg_.time_freq_dim, h, rng);
        time_b1_ = zeros("time.b1", 1, h);
        time_w2_ = dense("time.w2", h, h, rng);
        time_b2_ = zeros("time.b2", 1, h);

        blocks_.resize(static_cast<size_t>(cfg_.depth));
        for (int l = 0; l < cfg_.depth; ++l) {
            Block& b = blocks_[static_cast<size_t>(l)];
            std::string p = "block" + std::to_string(l) + ".";
            b.attn_qkv_w = dense(p + "attn.qkv.w", h, 3 * h, rng);
            b.attn_qkv_b = zeros(p + "attn.qkv.b", 1, 3 * h);
            b.attn_out_w = dense(p + "attn.out.w", h, h, rng);
            b.attn_out_b = zeros(p + "attn.out.b", 1, h);
            b.mlp_w1 = dense(p + "mlp.w1", h, mh, rng);
            b.mlp_b1 = zeros(p + "mlp.b1", 1, mh);
            b.mlp_w2 = dense(p + "mlp.w2", mh, h, rng);
            b.mlp_b2 = zeros(p + "mlp.b2", 1, h);
            // modulation starts at identity (zero shift/scale/gate)
            b.mod_img_w = zeros(p + "mod.img.w", h, 6 * h);
            b.mod_img_b = zeros(p + "mod.img.b", 1, 6 * h);
            b.mod_msg_w = zeros(p + "mod.msg.w", h, 6 * h);
            b.mod_msg_b = zeros(p + "mod.msg.b", 1, 6 * h);
        }

        final_mod_img_w_ = zeros("final.mod.img.w", h, 2 * h);
        final_mod_img_b_ = zeros("final.mod.img.b", 1, 2 * h);
        final_mod_msg_w_ = zeros("final.mod.msg.w", h, 2 * h);
        final_mod_msg_b_ = zeros("final.mod.msg.b", 1, 2 * h);
        // velocity head starts at zero so the initial field is the zero field
        head_v_w_ = zeros("head.velocity.w", h, cfg_.patch_dim());
        head_v_b_ = zeros("head.velocity.b", 1, cfg_.patch_dim());
        head_m_w_ = dense("head.message.w", h, d, rng);
        head_m_b_ = zeros("head.message.b", 1, d);

        pos2d_ = sincos_grid<T>(cfg_.grid_side(), cfg_.grid_side(), h);
    }

    const BackboneConfig& config() const { return cfg_; }
    ParamStore<T>& params() { return store_; }
    const ParamStore<T>& params() const { return store_; }

    // top-left block of the precomputed grid; crop location is carried by the
    // offset token, not by the position encodings
    Mat<T> positional_grid(int gh, int gw) const {
        int side = cfg_.grid_side();
        require(gh >= 1 && gw >= 1 && gh <= side && gw <= side,
                "positional_grid: extent exceeds maximum grid");
        Mat<T> block(gh * gw, cfg_.hidden);
        for (int y = 0; y < gh; ++y)
            for (int x = 0; x < gw; ++x) block.row(y * gw + x) = pos2d_.row(y * side + x);
        return block;
    }

    // embedding of a message given by vocabulary ids (constant with respect to
    // the tape); the on-graph variant runs inside forward()
    Mat<T> embed_message(const std::vector<int64_t>& ids) const {
        for (int64_t id : ids)
            require(id >= 0 && id < cfg_.fsq.vocab_size(), "embed_message: id out of vocabulary");
        require(static_cast<int>(ids.size()) == cfg_.message_length,
                "embed_message: wrong message length");
        fsq::LatentMessage m = fsq::message_from_ids(ids, cfg_.fsq);
        Graph<T> g;
        auto v = embed_message_var(g, g.constant(m.tokens.template cast<T>()));
        return g.val(v);
    }

    typename Graph<T>::Var embed_message_var(Graph<T>& g, typename Graph<T>::Var values) const {
        require(g.val(values).rows() == cfg_.message_length &&
                    g.val(values).cols() == cfg_.fsq.token_dim(),
                "embed_message: value shape mismatch");
        auto h1 = g.silu(g.add_rowvec(g.matmul(values, g.param(store_m(), msg_w1_)), g.param(store_m(), msg_b1_)));
        auto h2 = g.add_rowvec(g.matmul(h1, g.param(store_m(), msg_w2_)), g.param(store_m(), msg_b2_));
        return g.add(h2, g.param(store_m(), msg_pos_));
    }

    ForwardVars<T> forward(Graph<T>& g, const ForwardArgs<T>& args) const {
        require(args.t >= 0.0 && args.t <= 1.0, "forward: t outside [0,1]");
        require(args.grid_h >= 1 && args.grid_w >= 1, "forward: empty patch grid");
        typename Graph<T>::Var patches =
            args.patches_var.valid() ? args.patches_var : g.constant(args.patches);
        require(g.val(patches).rows() == args.grid_h * args.grid_w &&
                    g.val(patches).cols() == cfg_.patch_dim(),
                "forward: patch tensor shape mismatch");
        const int L = cfg_.message_length;
        const int P = args.grid_h * args.grid_w;
        const int S = 1 + 2 * L + P;
        const int h = cfg_.hidden;
        const int head_dim = h / cfg_.heads;

        // ---- token embeddings ----
        Mat<T> offset_in(1, 2);
        offset_in(0, 0) = static_cast<T>(args.offset.x);
        offset_in(0, 1) = static_cast<T>(args.offset.y);
        auto off_tok = g.add(g.add_rowvec(g.matmul(g.constant(offset_in), g.param(store_m(), offset_w_)),
                                          g.param(store_m(), offset_b_)),
                             g.param(store_m(), offset_pos_));

        typename Graph<T>::Var msg_values;
        if (args.message_var.valid()) {
            msg_values = args.message_var;
        } else {
            require(args.message != nullptr, "forward: missing message");
            require(args.message->length() == L, "forward: message length mismatch");
            msg_values = g.constant(args.message->tokens.template cast<T>());
        }
        auto msg_tok = embed_message_var(g, msg_values);

        auto buf_tok = g.add(g.gather_rows(g.param(store_m(), buffer_emb_), std::vector<int>(L, 0)),
                             g.param(store_m(), buffer_pos_));

        auto img_tok = g.add(g.add_rowvec(g.matmul(patches, g.param(store_m(), patch_w_)),
                                          g.param(store_m(), patch_b_)),
                             g.constant(positional_grid(args.grid_h, args.grid_w)));

        auto x = g.vstack({off_tok, msg_tok, buf_tok, img_tok});

        // ---- timestep conditioning ----
        auto t_emb = g.constant(sincos_time<T>(args.t, cfg_.time_freq_dim));
        auto t1 = g.silu(g.add_rowvec(g.matmul(t_emb, g.param(store_m(), time_w1_)), g.param(store_m(), time_b1_)));
        auto t2 = g.add_rowvec(g.matmul(t1, g.param(store_m(), time_w2_)), g.param(store_m(), time_b2_));
        auto cond = g.silu(t2);

        // ---- attention mask ----
        Mat<T> mask = build_mask(S, L, P);

        const int msg_side = 1 + 2 * L;  // offset + message + buffer rows
        ForwardVars<T> out;
        out.seq_len = S;
        out.msg_begin = 1;
        out.buf_begin = 1 + L;
        out.img_begin = 1 + 2 * L;
        if (args.capture_attention) out.attention.resize(static_cast<size_t>(cfg_.depth));

        auto modulate_split = [&](typename Graph<T>::Var xn, typename Graph<T>::Var mod_msg,
                                  typename Graph<T>::Var mod_img, int part) {
            // part 0 -> shift/scale for attention, part 1 -> shift/scale for mlp
            auto shift_m = g.cols(mod_msg, (3 * part) * h, h);
            auto scale_m = g.cols(mod_msg, (3 * part + 1) * h, h);
            auto shift_i = g.cols(mod_img, (3 * part) * h, h);
            auto scale_i = g.cols(mod_img, (3 * part + 1) * h, h);
            auto top = g.modulate_rows(g.rows(xn, 0, msg_side), scale_m, shift_m);
            auto bottom = g.modulate_rows(g.rows(xn, msg_side, P), scale_i, shift_i);
            return g.vstack({top, bottom});
        };
        auto gate_split = [&](typename Graph<T>::Var y, typename Graph<T>::Var mod_msg,
                              typename Graph<T>::Var mod_img, int part) {
            auto gate_m = g.cols(mod_msg, (3 * part + 2) * h, h);
            auto gate_i = g.cols(mod_img, (3 * part + 2) * h, h);
            auto top = g.hadamard_rowvec(g.rows(y, 0, msg_side), gate_m);
            auto bottom = g.hadamard_rowvec(g.rows(y, msg_side, P), gate_i);
            return g.vstack({top, bottom});
        };

        for (int l = 0; l < cfg_.depth; ++l) {
            const Block& b = blocks_[static_cast<size_t>(l)];
            auto mod_msg = g.add_rowvec(g.matmul(cond, g.param(store_m(), b.mod_msg_w)),
                                        g.param(store_m(), b.mod_msg_b));
            auto mod_img = g.add_rowvec(g.matmul(cond, g.param(store_m(), b.mod_img_w)),
                                        g.param(store_m(), b.mod_img_b));

            auto xn = g.layernorm_rows(x);
            auto xa = modulate_split(xn, mod_msg, mod_img, 0);
            if (l == 0 && args.capture_block1_modulated) out.block1_modulated = g.val(xa);

            auto qkv = g.add_rowvec(g.matmul(xa, g.param(store_m(), b.attn_qkv_w)),
                                    g.param(store_m(), b.attn_qkv_b));
            std::vector<typename Graph<T>::Var> head_outs;
            if (args.capture_attention)
                out.attention[static_cast<size_t>(l)].reserve(static_cast<size_t>(cfg_.heads));
            for (int hd = 0; hd < cfg_.heads; ++hd) {
                auto q = g.cols(qkv, hd * head_dim, head_dim);
                auto k = g.cols(qkv, h + hd * head_dim, head_dim);
                auto v = g.cols(qkv, 2 * h + hd * head_dim, head_dim);
                auto scores = g.scale(g.matmul_nt(q, k),
                                      static_cast<T>(1.0 / std::sqrt(static_cast<double>(head_dim))));
                auto att = g.softmax_rows(scores, &mask);
                if (args.capture_attention)
                    out.attention[static_cast<size_t>(l)].push_back(g.val(att));
                head_outs.push_back(g.matmul(att, v));
            }
            auto merged = g.hstack(head_outs);
            auto proj = g.add_rowvec(g.matmul(merged, g.param(store_m(), b.attn_out_w)),
                                     g.param(store_m(), b.attn_out_b));
            x = g.add(x, gate_split(proj, mod_msg, mod_img, 0));

            auto xn2 = g.layernorm_rows(x);
            auto xm = modulate_split(xn2, mod_msg, mod_img, 1);
            auto h1 = g.gelu(g.add_rowvec(g.matmul(xm, g.param(store_m(), b.mlp_w1)),
                                          g.param(store_m(), b.mlp_b1)));
            auto h2 = g.add_rowvec(g.matmul(h1, g.param(store_m(), b.mlp_w2)),
                                   g.param(store_m(), b.mlp_b2));
            x = g.add(x, gate_split(h2, mod_msg, mod_img, 1));

            if (l + 1 == cfg_.align_layer) {
                out.tap_message = g.rows(x, out.msg_begin, L);
                out.tap_image = g.rows(x, out.img_begin, P);
            }
        }

        // ---- readouts ----
        auto fin_msg = g.add_rowvec(g.matmul(cond, g.param(store_m(), final_mod_msg_w_)),
                                    g.param(store_m(), final_mod_msg_b_));
        auto fin_img = g.add_rowvec(g.matmul(cond, g.param(store_m(), final_mod_img_w_)),
                                    g.param(store_m(), final_mod_img_b_));
        auto xn = g.layernorm_rows(x);
        auto buf_rows = g.modulate_rows(g.rows(xn, out.buf_begin, L), g.cols(fin_msg, h, h),
                                        g.cols(fin_msg, 0, h));
        auto img_rows = g.modulate_rows(g.rows(xn, out.img_begin, P), g.cols(fin_img, h, h),
                                        g.cols(fin_img, 0, h));
        out.message_readout = g.add_rowvec(g.matmul(buf_rows, g.param(store_m(), head_m_w_)),
                                           g.param(store_m(), head_m_b_));
        out.velocity = g.add_rowvec(g.matmul(img_rows, g.param(store_m(), head_v_w_)),
                                    g.param(store_m(), head_v_b_));
        return out;
    }

    ForwardOutput<T> forward_eval(const ForwardArgs<T>& args) const {
        Graph<T> g;
        ForwardVars<T> vars = forward(g, args);
        ForwardOutput<T> out;
        out.velocity = g.val(vars.velocity);
        out.message_readout = g.val(vars.message_readout);
        out.tap_image = g.val(vars.tap_image);
        out.tap_message = g.val(vars.tap_message);
        out.attention = std::move(vars.attention);
        out.block1_modulated = std::move(vars.block1_modulated);
        out.msg_begin = vars.msg_begin;
        out.buf_begin = vars.buf_begin;
        out.img_begin = vars.img_begin;
        return out;
    }

    // velocity field over a full image tensor (decode-mode convenience)
    ImageT<T> velocity_image(const ImageT<T>& x_t, double t, Vec2 global_offset,
                             const fsq::LatentMessage& message) const {
        ForwardArgs<T> args;
        args.patches = patchify(x_t, cfg_.patch_size);
        args.grid_h = x_t.height / cfg_.patch_size;
        args.grid_w = x_t.width / cfg_.patch_size;
        args.t = t;
        args.offset = global_offset;
        args.mode = Mode::decode;
        args.message = &message;
        ForwardOutput<T> out = forward_eval(args);
        return unpatchify(out.velocity, cfg_.patch_size, args.grid_h, args.grid_w);
    }

private:
    struct Block {
        int attn_qkv_w, attn_qkv_b, attn_out_w, attn_out_b;
        int mlp_w1, mlp_b1, mlp_w2, mlp_b2;
        int mod_img_w, mod_img_b, mod_msg_w, mod_msg_b;
    };

    BackboneConfig cfg_;
    mutable ParamStore<T> store_;
    std::vector<Block> blocks_;
    int patch_w_, patch_b_, offset_w_, offset_b_, offset_pos_;
    int msg_w1_, msg_b1_, msg_w2_, msg_b2_, msg_pos_;
    int buffer_emb_, buffer_pos_;
    int time_w1_, time_b1_, time_w2_, time_b2_;
    int final_mod_img_w_, final_mod_img_b_, final_mod_msg_w_, final_mod_msg_b_;
    int head_v_w_, head_v_b_, head_m_w_, head_m_b_;
    Mat<T> pos2d_;

    // params are logically const during forward; the store is mutable so that
    // a const backbone can hand leaf references to the tape
    ParamStore<T>& store_m() const { return store_; }

    int dense(const std::string& name, int rows, int cols, Rng& rng) {
        Mat<T> w(rows, cols);
        for (Eigen::Index r = 0; r < w.rows(); ++r)
            for (Eigen::Index c = 0; c < w.cols(); ++c)
                w(r, c) = static_cast<T>(0.02 * rng.normal());
        return store_.add(name, std::move(w));
    }

    int zeros(const std::string& name, int rows, int cols) {
        return store_.add(name, Mat<T>::Zero(rows, cols));
    }

    // buffer columns are visible only to buffer rows at or after them
    Mat<T> build_mask(int S, int L, int P) const {
        (void)P;
        Mat<T> mask = Mat<T>::Zero(S, S);
        const T neg_inf = -std::numeric_limits<T>::infinity();
        int b0 = 1 + L, b1 = 1 + 2 * L;
        for (int r = 0; r < S; ++r)
            for (int c = b0; c < b1; ++c) {
                bool row_in_buffer = r >= b0 && r < b1;
                if (!row_in_buffer || c > r) mask(r, c) = neg_inf;
            }
        return mask;
    }
};

// bridges the backbone to samplers expecting a velocity-model concept
template <typename T>
class VelocityAdapter {
public:
    explicit VelocityAdapter(const Backbone<T>& net) : net_(&net) {}

    int image_size() const { return net_->config().image_size; }

    ImageT<T> velocity(const ImageT<T>& x_t, double t, Vec2 offset,
                       const fsq::LatentMessage& msg) const {
        return net_->velocity_image(x_t, t, offset, msg);
    }

private:
    const Backbone<T>* net_;
};

}  // namespace comit::model
