#pragma once

// Crop geometry: window extraction with normalized center coordinates,
// offset bookkeeping for crop sequences, and the skewed crop-count sampler.
//
// Coordinates: a pixel window is addressed by its top-left corner (x right,
// y down). A window's center c maps to l = (2c - S) / S per axis for image
// side S, so the image center is 0 and corners reach +/-1.

#include "comit/common.hpp"
#include "comit/image.hpp"

#include <nlohmann/json.hpp>

#include <vector>

namespace comit::geom {

using nlohmann::json;

struct PixelBox {
    int x = 0;  // left
    int y = 0;  // top
    int size = 0;
};

// Crop sequence with centers l_k, step offsets a_k and the decoding anchor.
// Invariants: offsets[0] == 0; offsets[k] == centers[k] - centers[k-1];
// global_offset == -centers.back().
template <typename T>
struct CropPlan {
    std::vector<ImageT<T>> crops;
    std::vector<Vec2> centers;
    std::vector<Vec2> offsets;
    Vec2 global_offset;
    bool has_global = false;
    int crop_size = 0;  // local crop side in pixels

    int count() const { return static_cast<int>(centers.size()); }
};

struct CropCountSampler {
    int k_mode = 1;
    int k_max = 9;
    double noise_scale = 0.5;
    double shift = 0.125;

    void validate() const {
        require(k_mode >= 1 && k_mode <= k_max, "CropCountSampler: need 1 <= k_mode <= k_max");
    }
};

// K = clamp(xi + 1, 1, k_max), xi ~ Poisson(e^tau),
// tau = ln(k_mode) + eps * noise_scale - shift, eps ~ N(0,1)
inline int sample_crop_count(const CropCountSampler& s, Rng& rng) {
    s.validate();
    double tau = std::log(static_cast<double>(s.k_mode)) + rng.normal() * s.noise_scale - s.shift;
    double rate = std::exp(tau);
    // far above k_max the clamp is certain; skip the Poisson draw
    if (rate > 4.0 * s.k_max + 64.0) return s.k_max;
    int xi = rng.poisson(rate);
    return std::min(std::max(1, xi + 1), s.k_max);
}

inline double normalized_center(double center_px, int side_px) {
    return (2.0 * center_px - side_px) / side_px;
}

struct ExtractedCrop {
    Vec2 center;  // normalized
};

template <typename T>
ImageT<T> extract_crop(const ImageT<T>& img, PixelBox box, Vec2* center_out = nullptr) {
    require(box.size > 0, "extract_crop: non-positive size");
    require(box.x >= 0 && box.y >= 0 && box.x + box.size <= img.width &&
                box.y + box.size <= img.height,
            "extract_crop: window out of bounds");
    ImageT<T> crop;
    crop.height = box.size;
    crop.width = box.size;
    crop.pix = img.pix.block(box.y, 3 * box.x, box.size, 3 * box.size);
    if (center_out) {
        double cx = box.x + box.size / 2.0;
        double cy = box.y + box.size / 2.0;
        *center_out = {normalized_center(cx, img.width), normalized_center(cy, img.height)};
    }
    return crop;
}

template <typename T>
void paste_crop(ImageT<T>& img, const ImageT<T>& crop, PixelBox box) {
    require(crop.height == box.size && crop.width == box.size, "paste_crop: size mismatch");
    require(box.x >= 0 && box.y >= 0 && box.x + box.size <= img.width &&
                box.y + box.size <= img.height,
            "paste_crop: window out of bounds");
    img.pix.block(box.y, 3 * box.x, box.size, 3 * box.size) = crop.pix;
}

// top-left pixel of the window whose normalized center is l (exact for
// grid-realizable centers)
inline PixelBox box_from_center(Vec2 l, int image_side, int crop_size) {
    double cx = (l.x + 1.0) * image_side / 2.0;
    double cy = (l.y + 1.0) * image_side / 2.0;
    int x = static_cast<int>(std::lround(cx - crop_size / 2.0));
    int y = static_cast<int>(std::lround(cy - crop_size / 2.0));
    return {x, y, crop_size};
}

// offsets and the decoding anchor from a center sequence; crops not attached
template <typename T>
CropPlan<T> build_plan(const std::vector<Vec2>& centers, bool with_global) {
    require(!centers.empty(), "build_plan: empty center list");
    if (with_global)
        require(centers.front() == Vec2{0.0, 0.0}, "build_plan: global crop center must be (0,0)");
    CropPlan<T> plan;
    plan.centers = centers;
    plan.has_global = with_global;
    plan.offsets.resize(centers.size());
    plan.offsets[0] = {0.0, 0.0};
    for (size_t k = 1; k < centers.size(); ++k) plan.offsets[k] = centers[k] - centers[k - 1];
    plan.global_offset = -centers.back();
    return plan;
}

// full plan with pixel data; top-lefts address local crops, the optional
// leading global crop is the whole image
template <typename T>
CropPlan<T> plan_from_boxes(const ImageT<T>& img, const std::vector<PixelBox>& boxes,
                            bool with_global) {
    std::vector<Vec2> centers;
    std::vector<ImageT<T>> crops;
    if (with_global) {
        centers.push_back({0.0, 0.0});
        crops.push_back(img);
    }
    for (const PixelBox& b : boxes) {
        Vec2 c;
        crops.push_back(extract_crop(img, b, &c));
        centers.push_back(c);
    }
    CropPlan<T> plan = build_plan<T>(centers, with_global);
    plan.crops = std::move(crops);
    plan.crop_size = boxes.empty() ? img.width : boxes.front().size;
    return plan;
}

// uniformly random in-bounds local windows
template <typename T>
CropPlan<T> random_plan(const ImageT<T>& img, int count, int crop_size, bool with_global,
                        Rng& rng) {
    require(count >= 1, "random_plan: need at least one crop");
    require(crop_size <= img.width && crop_size <= img.height, "random_plan: crop too large");
    std::vector<PixelBox> boxes;
    int locals = with_global ? count - 1 : count;
    for (int k = 0; k < locals; ++k)
        boxes.push_back({rng.uniform_int(0, img.width - crop_size),
                         rng.uniform_int(0, img.height - crop_size), crop_size});
    return plan_from_boxes(img, boxes, with_global);
}

template <typename T>
json plan_to_json(const CropPlan<T>& plan) {
    json j;
    auto put = [](const Vec2& v) { return json::array({v.x, v.y}); };
    j["centers"] = json::array();
    for (const Vec2& c : plan.centers) j["centers"].push_back(put(c));
    j["offsets"] = json::array();
    for (const Vec2& o : plan.offsets) j["offsets"].push_back(put(o));
    j["global_offset"] = put(plan.global_offset);
    j["has_global"] = plan.has_global;
    j["crop_size"] = plan.crop_size;
    return j;
}

template <typename T>
CropPlan<T> plan_from_json(const json& j) {
    CropPlan<T> plan;
    auto get = [](const json& v) { return Vec2{v.at(0).get<double>(), v.at(1).get<double>()}; };
    for (const auto& c : j.at("centers")) plan.centers.push_back(get(c));
    for (const auto& o : j.at("offsets")) plan.offsets.push_back(get(o));
    plan.global_offset = get(j.at("global_offset"));
    plan.has_global = j.at("has_global").get<bool>();
    plan.crop_size = j.at("crop_size").get<int>();
    return plan;
}

}  // namespace comit::geom
