#pragma once

// Frozen-model analysis: message-token attention maps on the patch grid,
// thresholded IoU against ground-truth masks, nearest neighbors in
// concatenated token space, and the uncertainty-evolution panel strips.

#include "comit/common.hpp"
#include "comit/datagen.hpp"
#include "comit/flow.hpp"
#include "comit/model.hpp"

#include <algorithm>
#include <numeric>
#include <vector>

namespace comit::analysis {

struct AttnAnalysisConfig {
    int layer = 0;            // 1-indexed; 0 -> penultimate layer of the model
    double denoise_t = 0.1;
    double threshold_q = 30.0;  // percent of top attention cells kept
    uint64_t seed = 0;

    void validate() const {
        require(threshold_q > 0.0 && threshold_q <= 100.0,
                "AttnAnalysisConfig: threshold percentage out of range");
    }

    int resolve_layer(int depth) const {
        int l = layer == 0 ? std::max(1, depth - 1) : layer;
        require(l >= 1 && l <= depth, "AttnAnalysisConfig: layer out of range");
        return l;
    }
};

// Head-averaged attention from each message slot to the image patches during
// one decoding forward at the analysis timestep. Returns L grids (gh x gw);
// each row's mass over image positions is at most one.
inline std::vector<MatF> token_attention_maps(const model::Backbone<float>& net,
                                              const ImageF& image,
                                              const fsq::LatentMessage& message,
                                              const AttnAnalysisConfig& cfg) {
    cfg.validate();
    const auto& bc = net.config();
    const int layer = cfg.resolve_layer(bc.depth);
    Rng rng(derive_seed(cfg.seed, "attn-eps"));
    auto sample = flow::make_flow_sample<float>(image, cfg.denoise_t,
                                                noise_image<float>(image.height, image.width, rng));

    model::ForwardArgs<float> args;
    args.patches = patchify(sample.x_t, bc.patch_size);
    args.grid_h = args.grid_w = bc.grid_side();
    args.t = cfg.denoise_t;
    args.offset = {0.0, 0.0};
    args.mode = model::Mode::decode;
    args.message = &message;
    args.capture_attention = true;
    auto out = net.forward_eval(args);

    const auto& heads = out.attention[static_cast<size_t>(layer - 1)];
    const int L = bc.message_length;
    const int P = bc.num_image_patches();
    std::vector<MatF> maps;
    maps.reserve(static_cast<size_t>(L));
    for (int j = 0; j < L; ++j) {
        MatF grid = MatF::Zero(bc.grid_side(), bc.grid_side());
        for (const MatF& att : heads) {
            for (int p = 0; p < P; ++p)
                grid(p / bc.grid_side(), p % bc.grid_side()) +=
                    att(out.msg_begin + j, out.img_begin + p);
        }
        grid /= static_cast<float>(heads.size());
        maps.push_back(std::move(grid));
    }
    return maps;
}

// binarize by keeping the ceil(q * cells / 100) largest values (ties resolved
// by cell index) and intersect with the mask; an empty mask yields 0
inline double threshold_iou(const MatF& map, const MatF& gt_mask, double q_percent,
                            bool* empty_mask_warning = nullptr) {
    require(map.rows() == gt_mask.rows() && map.cols() == gt_mask.cols(),
            "threshold_iou: grid mismatch");
    require(q_percent > 0.0 && q_percent <= 100.0, "threshold_iou: percentage out of range");
    const int cells = static_cast<int>(map.size());
    const int keep = static_cast<int>(std::ceil(q_percent * cells / 100.0));

    std::vector<int> order(static_cast<size_t>(cells));
    std::iota(order.begin(), order.end(), 0);
    auto value = [&](int i) { return map(i / map.cols(), i % map.cols()); };
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return value(a) > value(b); });

    int gt_count = 0;
    for (Eigen::Index r = 0; r < gt_mask.rows(); ++r)
        for (Eigen::Index c = 0; c < gt_mask.cols(); ++c)
            if (gt_mask(r, c) > 0.5f) ++gt_count;
    if (gt_count == 0) {
        if (empty_mask_warning) *empty_mask_warning = true;
        return 0.0;
    }

    int inter = 0;
    for (int i = 0; i < keep; ++i) {
        int cell = order[static_cast<size_t>(i)];
        if (gt_mask(cell / map.cols(), cell % map.cols()) > 0.5f) ++inter;
    }
    int uni = keep + gt_count - inter;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

// ground-truth object mask pooled to the patch grid (any covered pixel marks
// the patch)
inline MatF mask_to_patch_grid(const std::vector<uint8_t>& mask, int canvas, int patch) {
    require(canvas % patch == 0, "mask_to_patch_grid: patch must divide the canvas");
    int side = canvas / patch;
    MatF grid = MatF::Zero(side, side);
    for (int y = 0; y < canvas; ++y)
        for (int x = 0; x < canvas; ++x)
            if (mask[static_cast<size_t>(y) * canvas + x]) grid(y / patch, x / patch) = 1.0f;
    return grid;
}

// per image: the best token IoU against the union of its objects' choices;
// the scene mask used is each object's own (best token per object, best
// object per image)
inline double best_token_iou(const std::vector<MatF>& maps, const MatF& gt_grid,
                             double q_percent) {
    double best = 0.0;
    for (const MatF& map : maps) best = std::max(best, threshold_iou(map, gt_grid, q_percent));
    return best;
}

template <typename EncodeFn>
double miou_best_token(const model::Backbone<float>& net, const data::Dataset& ds,
                       const std::vector<int>& ids, const AttnAnalysisConfig& cfg,
                       EncodeFn&& encode_message) {
    require(!ids.empty(), "miou_best_token: empty id list");
    const auto& bc = net.config();
    double total = 0.0;
    int counted = 0;
    for (int id : ids) {
        ImageF image = ds.image<float>(id);
        fsq::LatentMessage msg = encode_message(id, image);
        auto maps = token_attention_maps(net, image, msg, cfg);
        const auto& scene = ds.scenes[static_cast<size_t>(id)];
        for (const auto& obj : scene.objects) {
            MatF gt = mask_to_patch_grid(obj.mask, ds.canvas, bc.patch_size);
            total += best_token_iou(maps, gt, cfg.threshold_q);
            ++counted;
        }
    }
    require(counted > 0, "miou_best_token: no objects");
    return total / counted;
}

// ---- nearest neighbors ----------------------------------------------------------

inline MatD message_vector(const fsq::LatentMessage& m) {
    MatD v(1, m.tokens.size());
    Eigen::Index i = 0;
    for (Eigen::Index r = 0; r < m.tokens.rows(); ++r)
        for (Eigen::Index c = 0; c < m.tokens.cols(); ++c) v(0, i++) = m.tokens(r, c);
    return v;
}

inline double cosine(const MatD& a, const MatD& b) {
    double na = a.norm(), nb = b.norm();
    if (na == 0.0 || nb == 0.0) return 0.0;
    return a.cwiseProduct(b).sum() / (na * nb);
}

// top-k gallery indices by cosine similarity of flattened token values,
// ties broken towards the lower index
inline std::vector<int> nearest_neighbors(const fsq::LatentMessage& query,
                                          const std::vector<fsq::LatentMessage>& gallery, int k) {
    require(!gallery.empty(), "nearest_neighbors: empty gallery");
    require(k >= 1 && k <= static_cast<int>(gallery.size()),
            "nearest_neighbors: k exceeds the gallery");
    MatD q = message_vector(query);
    std::vector<std::pair<double, int>> scored;
    scored.reserve(gallery.size());
    for (size_t i = 0; i < gallery.size(); ++i)
        scored.push_back({cosine(q, message_vector(gallery[i])), static_cast<int>(i)});
    std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    std::vector<int> out;
    for (int i = 0; i < k; ++i) out.push_back(scored[static_cast<size_t>(i)].second);
    return out;
}

// ---- panel strips ----------------------------------------------------------------

template <typename T>
ImageT<T> hstack_images(const std::vector<ImageT<T>>& panels, int separator = 2) {
    require(!panels.empty(), "hstack_images: nothing to stack");
    int h = panels[0].height;
    int total_w = 0;
    for (const auto& p : panels) {
        require(p.height == h, "hstack_images: height mismatch");
        total_w += p.width;
    }
    total_w += separator * (static_cast<int>(panels.size()) - 1);
    ImageT<T> strip = ImageT<T>::zeros(h, total_w);
    strip.pix.setConstant(static_cast<T>(1));  // white separators
    int x = 0;
    for (const auto& p : panels) {
        strip.pix.block(0, 3 * x, h, 3 * p.width) = p.pix;
        x += p.width + separator;
    }
    return strip;
}

struct PanelConfig {
    int preview_nfe = 1;
    double preview_cfg = 1.0;
    int final_nfe = 10;
    double final_cfg = 7.5;
    uint64_t seed = 0;
};

// input image, one single-step preview per intermediate message, and a full
// reconstruction: K + 2 panels left to right
template <typename Model>
ImageF uncertainty_panel(const Model& decoder_model, const ImageF& image,
                         const std::vector<fsq::LatentMessage>& trace, Vec2 anchor,
                         const fsq::LatentMessage& uncond, const PanelConfig& cfg = {}) {
    require(!trace.empty(), "uncertainty_panel: empty policy trace");
    std::vector<ImageF> panels;
    panels.push_back(image);

    flow::GuidanceConfig preview;
    preview.weight = cfg.preview_cfg;
    preview.nfe = cfg.preview_nfe;
    for (size_t i = 0; i < trace.size(); ++i) {
        Rng rng(derive_seed(cfg.seed, "panel-preview-" + std::to_string(i)));
        panels.push_back(flow::decode<float>(decoder_model, trace[i], anchor, preview, uncond, rng));
    }

    flow::GuidanceConfig full;
    full.weight = cfg.final_cfg;
    full.nfe = cfg.final_nfe;
    Rng rng(derive_seed(cfg.seed, "panel-final"));
    panels.push_back(flow::decode<float>(decoder_model, trace.back(), anchor, full, uncond, rng));

    for (auto& p : panels) p.pix = p.pix.cwiseMax(-1.0f).cwiseMin(1.0f);
    return hstack_images(panels);
}

}  // namespace comit::analysis
