#pragma once

// Inference-time cropping policies over a fixed candidate grid: global-only,
// random order, raster-scan order, and the adaptive policy that decodes the
// current message with a single step and pursues the window with the largest
// mean reconstruction error.

#include "comit/common.hpp"
#include "comit/encoder.hpp"
#include "comit/flow.hpp"
#include "comit/geometry.hpp"
#include "comit/model.hpp"

#include <string>
#include <vector>

namespace comit::policy {

enum class Kind { global_only, random, raster, adaptive };

inline const char* kind_name(Kind k) {
    switch (k) {
        case Kind::global_only: return "global";
        case Kind::random: return "random";
        case Kind::raster: return "raster";
        case Kind::adaptive: return "adaptive";
    }
    fail("kind_name: bad kind");
}

inline Kind kind_from_name(const std::string& name) {
    if (name == "global") return Kind::global_only;
    if (name == "random") return Kind::random;
    if (name == "raster") return Kind::raster;
    if (name == "adaptive") return Kind::adaptive;
    fail("unknown policy kind: " + name);
}

struct PolicySpec {
    Kind kind = Kind::global_only;
    bool with_global = true;
    int n_local = 0;
    int grid = 3;
    int crop_size = 24;
    int preview_nfe = 1;       // adaptive previews
    double preview_cfg = 1.0;
    uint64_t seed = 0;

    void validate() const {
        require(grid >= 1, "PolicySpec: empty grid");
        require(n_local >= 0 && n_local <= grid * grid,
                "PolicySpec: n_local exceeds the candidate grid");
        if (kind == Kind::global_only)
            require(with_global, "PolicySpec: global-only requires the global crop");
        else
            require(n_local >= 1, "PolicySpec: local policies need at least one local crop");
        if (kind == Kind::adaptive)
            require(preview_nfe >= 1, "PolicySpec: adaptive policy requires a preview decoder");
    }
};

// evenly spaced in-bounds windows, left-to-right then top-to-bottom
inline std::vector<Vec2> raster_centers(int grid, int image_size, int crop_size) {
    require(grid >= 1, "raster_centers: empty grid");
    require(crop_size >= 1 && crop_size <= image_size, "raster_centers: crop too large for grid");
    std::vector<Vec2> centers;
    auto top_left = [&](int i) {
        if (grid == 1) return (image_size - crop_size) / 2;
        return static_cast<int>(std::lround(static_cast<double>(i) * (image_size - crop_size) /
                                            (grid - 1)));
    };
    for (int gy = 0; gy < grid; ++gy)
        for (int gx = 0; gx < grid; ++gx) {
            double cx = top_left(gx) + crop_size / 2.0;
            double cy = top_left(gy) + crop_size / 2.0;
            centers.push_back({geom::normalized_center(cx, image_size),
                               geom::normalized_center(cy, image_size)});
        }
    return centers;
}

// argmax of mean squared pixel error inside each candidate window, ties to the
// lowest index; `decoder(message, anchor)` yields the current reconstruction
template <typename T, typename Decoder>
Vec2 adaptive_next(const ImageT<T>& image, const fsq::LatentMessage& message,
                   const std::vector<Vec2>& candidates, int crop_size, Vec2 anchor,
                   Decoder&& decoder) {
    require(!candidates.empty(), "adaptive_next: no candidates");
    ImageT<T> preview = decoder(message, anchor);
    require(preview.same_shape(image), "adaptive_next: preview shape mismatch");

    int best = 0;
    double best_err = -1.0;
    for (size_t i = 0; i < candidates.size(); ++i) {
        geom::PixelBox box = geom::box_from_center(candidates[i], image.width, crop_size);
        ImageT<T> pred = geom::extract_crop(preview, box);
        ImageT<T> truth = geom::extract_crop(image, box);
        double err = image_mse(pred, truth);
        if (err > best_err) {
            best_err = err;
            best = static_cast<int>(i);
        }
    }
    return candidates[static_cast<size_t>(best)];
}

struct PolicyResult {
    fsq::LatentMessage message;
    geom::CropPlan<float> plan;
    std::vector<fsq::LatentMessage> trace;    // message after every step
    std::vector<ImageF> previews;             // adaptive previews, one per local choice
};

// run a policy against a backbone; deterministic given (weights, spec.seed)
inline PolicyResult run_policy(const model::Backbone<float>& net, const ImageF& image,
                               const PolicySpec& spec) {
    spec.validate();
    const auto& cfg = net.config();
    require(image.width == cfg.image_size && image.height == cfg.image_size,
            "run_policy: image extent mismatch");

    std::vector<Vec2> candidates = raster_centers(spec.grid, cfg.image_size, spec.crop_size);
    Rng rng(derive_seed(spec.seed, "policy"));

    enc::EncodeRegimes regimes;  // inference: no stochastic regime fires
    fsq::LatentMessage message =
        enc::init_message(cfg.fsq, cfg.message_length, enc::resolve_init_id(regimes, cfg.fsq));

    PolicyResult result;
    std::vector<Vec2> centers;
    std::vector<ImageF> crops;

    auto aggregate = [&](const ImageF& crop, Vec2 center) {
        Vec2 offset = centers.empty() ? Vec2{0.0, 0.0} : center - centers.back();
        message = enc::encode_step(net, crop, offset, message);
        centers.push_back(center);
        crops.push_back(crop);
        result.trace.push_back(message);
    };

    if (spec.with_global) aggregate(image, {0.0, 0.0});

    flow::GuidanceConfig preview_cfg;
    preview_cfg.weight = spec.preview_cfg;
    preview_cfg.nfe = std::max(spec.preview_nfe, 1);
    model::VelocityAdapter<float> adapter(net);
    int preview_counter = 0;
    auto preview_decode = [&](const fsq::LatentMessage& msg, Vec2 anchor) {
        Rng decode_rng(derive_seed(spec.seed, "preview-" + std::to_string(preview_counter++)));
        auto uncond =
            enc::init_message(cfg.fsq, cfg.message_length, enc::resolve_init_id(regimes, cfg.fsq));
        return flow::decode<float>(adapter, msg, anchor, preview_cfg, uncond, decode_rng);
    };

    switch (spec.kind) {
        case Kind::global_only:
            break;
        case Kind::raster: {
            for (int k = 0; k < spec.n_local; ++k) {
                Vec2 c = candidates[static_cast<size_t>(k)];
                aggregate(geom::extract_crop(image, geom::box_from_center(c, cfg.image_size,
                                                                          spec.crop_size)),
                          c);
            }
            break;
        }
        case Kind::random: {
            std::vector<Vec2> pool = candidates;
            for (int k = 0; k < spec.n_local; ++k) {
                int pick = rng.uniform_int(0, static_cast<int>(pool.size()) - 1);
                Vec2 c = pool[static_cast<size_t>(pick)];
                pool.erase(pool.begin() + pick);
                aggregate(geom::extract_crop(image, geom::box_from_center(c, cfg.image_size,
                                                                          spec.crop_size)),
                          c);
            }
            break;
        }
        case Kind::adaptive: {
            std::vector<Vec2> pool = candidates;
            for (int k = 0; k < spec.n_local; ++k) {
                Vec2 anchor = centers.empty() ? Vec2{0.0, 0.0} : -centers.back();
                ImageF preview;
                Vec2 chosen = adaptive_next<float>(
                    image, message, pool, spec.crop_size, anchor,
                    [&](const fsq::LatentMessage& msg, Vec2 a) {
                        preview = preview_decode(msg, a);
                        return preview;
                    });
                result.previews.push_back(preview);
                for (size_t i = 0; i < pool.size(); ++i)
                    if (pool[i] == chosen) {
                        pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(i));
                        break;
                    }
                aggregate(geom::extract_crop(image, geom::box_from_center(chosen, cfg.image_size,
                                                                          spec.crop_size)),
                          chosen);
            }
            break;
        }
    }

    result.plan = geom::build_plan<float>(centers, spec.with_global);
    result.plan.crops = std::move(crops);
    result.plan.crop_size = spec.crop_size;
    result.message = message;
    return result;
}

}  // namespace comit::policy
