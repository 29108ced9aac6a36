#pragma once

// Recurrent message construction: starting from the init message, each step
// feeds the current crop, its offset and the previous (detached) message
// through the backbone at t = 1 and quantizes the buffer readout into the next
// message. Gradients flow only through the final update.
//
// Training regimes: with probability p_global the first crop is replaced by
// the full image at center (0,0) with offsets recomputed; with probability
// p_cfg the encoder is skipped and the init message is returned, which trains
// the unconditional decoder branch.

#include "comit/common.hpp"
#include "comit/fsq.hpp"
#include "comit/geometry.hpp"
#include "comit/graph.hpp"
#include "comit/image.hpp"
#include "comit/model.hpp"

#include <vector>

namespace comit::enc {

struct EncodeRegimes {
    double p_cfg = 0.18;
    double p_global = 0.55;
    int64_t init_token_id = -1;  // negative -> vocabulary midpoint

    void validate() const {
        require(p_cfg >= 0 && p_cfg <= 1 && p_global >= 0 && p_global <= 1,
                "EncodeRegimes: probabilities must lie in [0,1]");
    }
};

inline int64_t default_init_id(const fsq::FsqSpec& spec) { return spec.vocab_size() / 2; }

inline int64_t resolve_init_id(const EncodeRegimes& regimes, const fsq::FsqSpec& spec) {
    return regimes.init_token_id < 0 ? default_init_id(spec) : regimes.init_token_id;
}

inline fsq::LatentMessage init_message(const fsq::FsqSpec& spec, int length, int64_t init_token_id) {
    require(init_token_id >= 0 && init_token_id < spec.vocab_size(),
            "init_message: id out of vocabulary");
    return fsq::message_from_ids(std::vector<int64_t>(static_cast<size_t>(length), init_token_id),
                                 spec);
}

// one recurrent update (no tape): m' = quantize(readout(crop, t=1, offset, m))
template <typename T>
fsq::LatentMessage encode_step(const model::Backbone<T>& net, const ImageT<T>& crop, Vec2 offset,
                               const fsq::LatentMessage& prev) {
    const auto& cfg = net.config();
    model::ForwardArgs<T> args;
    args.patches = patchify(crop, cfg.patch_size);
    args.grid_h = crop.height / cfg.patch_size;
    args.grid_w = crop.width / cfg.patch_size;
    args.t = 1.0;
    args.offset = offset;
    args.mode = model::Mode::encode;
    args.message = &prev;
    model::ForwardOutput<T> out = net.forward_eval(args);
    return fsq::message_from_raw(out.message_readout.template cast<double>(), cfg.fsq);
}

// inference-path encode over a plan with pixel data attached; regimes fire only
// when `training` is set. Records intermediate messages when `trace` is given.
template <typename T>
fsq::LatentMessage encode(const model::Backbone<T>& net, const ImageT<T>& image,
                          const geom::CropPlan<T>& plan, const EncodeRegimes& regimes,
                          bool training, Rng& rng,
                          std::vector<fsq::LatentMessage>* trace = nullptr) {
    regimes.validate();
    const auto& cfg = net.config();
    require(plan.count() >= 1, "encode: empty plan");
    require(static_cast<int>(plan.crops.size()) == plan.count(), "encode: plan lacks pixel data");
    require(image.width == cfg.image_size && image.height == cfg.image_size,
            "encode: image extent does not match the model");

    geom::CropPlan<T> working = plan;
    if (training && rng.bernoulli(regimes.p_global) && !working.has_global) {
        std::vector<Vec2> centers = working.centers;
        centers[0] = {0.0, 0.0};
        auto rebuilt = geom::build_plan<T>(centers, true);
        rebuilt.crops = working.crops;
        rebuilt.crops[0] = image;
        rebuilt.crop_size = working.crop_size;
        working = std::move(rebuilt);
    }
    bool drop_to_init = training && rng.bernoulli(regimes.p_cfg);

    fsq::LatentMessage m =
        init_message(cfg.fsq, cfg.message_length, resolve_init_id(regimes, cfg.fsq));
    if (drop_to_init) {
        if (trace) trace->push_back(m);
        return m;
    }
    for (int k = 0; k < working.count(); ++k) {
        m = encode_step(net, working.crops[static_cast<size_t>(k)],
                        working.offsets[static_cast<size_t>(k)], m);
        if (trace) trace->push_back(m);
    }
    return m;
}

template <typename T>
struct TrainEncodeResult {
    typename Graph<T>::Var message_values{};  // L x d on the tape
    fsq::LatentMessage message;               // matching ids
    Vec2 global_offset;
    bool cfg_dropped = false;
    bool global_substituted = false;
    std::vector<typename Graph<T>::Var> crop_leaves;  // one per crop, in order
};

// training-path encode: all but the final update run off the tape (the
// stop-gradient), the final update contributes straight-through quantized
// values for the decoding pass. Crop pixels are registered as tape leaves so
// gradient probes can inspect them.
template <typename T>
TrainEncodeResult<T> encode_for_training(Graph<T>& g, const model::Backbone<T>& net,
                                         const ImageT<T>& image, const geom::CropPlan<T>& plan,
                                         const EncodeRegimes& regimes, Rng& rng,
                                         bool crops_need_grad = false) {
    regimes.validate();
    const auto& cfg = net.config();
    require(plan.count() >= 1, "encode: empty plan");
    require(static_cast<int>(plan.crops.size()) == plan.count(), "encode: plan lacks pixel data");
    require(image.width == cfg.image_size && image.height == cfg.image_size,
            "encode: image extent does not match the model");

    TrainEncodeResult<T> result;
    geom::CropPlan<T> working = plan;
    if (rng.bernoulli(regimes.p_global) && !working.has_global) {
        std::vector<Vec2> centers = working.centers;
        centers[0] = {0.0, 0.0};
        auto rebuilt = geom::build_plan<T>(centers, true);
        rebuilt.crops = working.crops;
        rebuilt.crops[0] = image;
        rebuilt.crop_size = working.crop_size;
        working = std::move(rebuilt);
        result.global_substituted = true;
    }
    result.global_offset = working.global_offset;

    const int K = working.count();
    for (int k = 0; k < K; ++k)
        result.crop_leaves.push_back(
            g.input(patchify(working.crops[static_cast<size_t>(k)], cfg.patch_size),
                    crops_need_grad));

    fsq::LatentMessage m =
        init_message(cfg.fsq, cfg.message_length, resolve_init_id(regimes, cfg.fsq));
    if (rng.bernoulli(regimes.p_cfg)) {
        result.cfg_dropped = true;
        result.message = m;
        result.message_values = g.constant(m.tokens.template cast<T>());
        return result;
    }

    // stop-gradient steps: values only
    for (int k = 0; k + 1 < K; ++k)
        m = encode_step(net, working.crops[static_cast<size_t>(k)],
                        working.offsets[static_cast<size_t>(k)], m);

    // final update on the tape; the previous message enters as a constant
    model::ForwardArgs<T> args;
    args.patches_var = result.crop_leaves.back();
    const ImageT<T>& last_crop = working.crops[static_cast<size_t>(K - 1)];
    args.grid_h = last_crop.height / cfg.patch_size;
    args.grid_w = last_crop.width / cfg.patch_size;
    args.t = 1.0;
    args.offset = working.offsets.back();
    args.mode = model::Mode::encode;
    args.message = &m;
    model::ForwardVars<T> vars = net.forward(g, args);

    result.message_values = fsq::straight_through(g, vars.message_readout, cfg.fsq);
    result.message =
        fsq::message_from_raw(g.val(vars.message_readout).template cast<double>(), cfg.fsq);
    return result;
}

}  // namespace comit::enc
