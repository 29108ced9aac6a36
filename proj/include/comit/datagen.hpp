#pragma once

// Synthetic multi-object sprite scenes: 64x64 RGB canvases with 1-3
// non-overlapping shapes from a 20-category vocabulary (5 shapes x 4 colors),
// per-object masks, and spatial relations between object centers.
// Generation is deterministic per (seed, index), so shards can be produced in
// any order or in parallel.

#include "comit/common.hpp"
#include "comit/image.hpp"
#include "comit/png_io.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace comit::data {

using nlohmann::json;

inline constexpr int kNumShapes = 5;
inline constexpr int kNumColors = 4;
inline constexpr int kNumCategories = kNumShapes * kNumColors;
inline constexpr int kNumPredicates = 4;

inline const char* shape_name(int s) {
    static const char* names[] = {"circle", "square", "triangle", "cross", "bar"};
    require(s >= 0 && s < kNumShapes, "shape_name: bad shape");
    return names[s];
}

inline const char* color_name(int c) {
    static const char* names[] = {"red", "green", "blue", "yellow"};
    require(c >= 0 && c < kNumColors, "color_name: bad color");
    return names[c];
}

inline std::array<uint8_t, 3> color_rgb(int c) {
    static const std::array<uint8_t, 3> palette[] = {
        {220, 60, 50}, {70, 200, 80}, {60, 110, 230}, {235, 200, 60}};
    require(c >= 0 && c < kNumColors, "color_rgb: bad color");
    return palette[c];
}

inline int category_of(int shape, int color) { return shape * kNumColors + color; }

inline std::string category_name(int category) {
    require(category >= 0 && category < kNumCategories, "category_name: bad category");
    return std::string(shape_name(category / kNumColors)) + "-" +
           color_name(category % kNumColors);
}

// left-of / right-of / above / below, judged by object centers
inline const char* predicate_name(int p) {
    static const char* names[] = {"left-of", "right-of", "above", "below"};
    require(p >= 0 && p < kNumPredicates, "predicate_name: bad predicate");
    return names[p];
}

struct BBox {
    int x = 0, y = 0, w = 0, h = 0;
};

struct SpriteObject {
    int shape = 0;
    int color = 0;
    BBox bbox;
    Vec2 center_px;
    std::vector<uint8_t> mask;  // canvas-sized binary mask, row-major

    int category() const { return category_of(shape, color); }
};

struct Relation {
    int subject = 0;
    int predicate = 0;
    int object = 0;

    bool operator==(const Relation& o) const = default;
};

struct SpriteScene {
    int id = 0;
    std::vector<SpriteObject> objects;
    std::vector<Relation> relations;

    std::set<int> category_set() const {
        std::set<int> s;
        for (const auto& o : objects) s.insert(o.category());
        return s;
    }
};

struct Dataset {
    int canvas = 64;
    std::vector<SpriteScene> scenes;
    std::vector<std::vector<uint8_t>> images;  // canvas*canvas*3 per scene

    int size() const { return static_cast<int>(scenes.size()); }

    template <typename T>
    ImageT<T> image(int i) const {
        return image_from_u8<T>(images[static_cast<size_t>(i)], canvas, canvas);
    }
};

// ---- rasterization -----------------------------------------------------------

namespace detail {

inline bool inside_shape(int shape, double u, double v) {
    // u, v in [-1, 1] relative to the object's bounding square
    switch (shape) {
        case 0: return u * u + v * v <= 1.0;                                  // circle
        case 1: return std::abs(u) <= 0.92 && std::abs(v) <= 0.92;            // square
        case 2: return v >= -0.95 && std::abs(u) <= (v + 1.0) * 0.5;          // triangle, apex at the top
        case 3: return std::abs(u) <= 0.34 || std::abs(v) <= 0.34;            // cross
        case 4: return std::abs(u) <= 0.95 && std::abs(v) <= 0.75;            // bar, rectangular box
        default: fail("inside_shape: bad shape");
    }
}

inline std::vector<uint8_t> render_mask(int canvas, int shape, BBox box) {
    std::vector<uint8_t> mask(static_cast<size_t>(canvas) * canvas, 0);
    for (int y = box.y; y < box.y + box.h; ++y)
        for (int x = box.x; x < box.x + box.w; ++x) {
            double u = (2.0 * (x - box.x) + 1.0) / box.w - 1.0;
            double v = (2.0 * (y - box.y) + 1.0) / box.h - 1.0;
            if (inside_shape(shape, u, v)) mask[static_cast<size_t>(y) * canvas + x] = 1;
        }
    return mask;
}

inline int mask_area(const std::vector<uint8_t>& mask) {
    int n = 0;
    for (uint8_t v : mask) n += v;
    return n;
}

inline bool boxes_overlap(BBox a, BBox b, int pad) {
    return a.x - pad < b.x + b.w && b.x - pad < a.x + a.w && a.y - pad < b.y + b.h &&
           b.y - pad < a.y + a.h;
}

}  // namespace detail

// a relation consistent with the two centers along the dominant axis
inline Relation relation_between(const SpriteScene& scene, int subject, int object) {
    Vec2 d = scene.objects[static_cast<size_t>(object)].center_px -
             scene.objects[static_cast<size_t>(subject)].center_px;
    int predicate;
    if (std::abs(d.x) > std::abs(d.y))
        predicate = d.x > 0 ? 0 : 1;  // object right of subject -> subject left-of object
    else
        predicate = d.y > 0 ? 2 : 3;
    return {subject, predicate, object};
}

inline SpriteScene generate_scene(int index, uint64_t seed, int canvas) {
    Rng rng(derive_seed(seed, "scene-" + std::to_string(index)));
    SpriteScene scene;
    scene.id = index;

    double roll = rng.uniform();
    int n_objects = roll < 0.4 ? 1 : roll < 0.8 ? 2 : 3;
    const int min_area = static_cast<int>(canvas * canvas * 0.05) + 1;

    // approximate fill fraction of the bounding box per shape, and the box
    // aspect (height / width); sizes are derived from a target mask area so
    // every category is equally easy to place
    static const double fill_frac[kNumShapes] = {0.785, 0.846, 0.49, 0.5644, 0.7125};
    static const double aspect[kNumShapes] = {1.0, 1.0, 1.0, 1.0, 0.45};

    for (int k = 0; k < n_objects; ++k) {
        // category fixed up front so the size/position rejection below cannot
        // skew the category marginals
        int shape = rng.uniform_int(0, kNumShapes - 1);
        int color = rng.uniform_int(0, kNumColors - 1);
        for (int attempt = 0; attempt < 200; ++attempt) {
            // every shape draws the same bounding-box area, so clash-driven
            // rejections cannot skew the category marginals; the lower bound
            // keeps even the least-filling shape above the area filter
            double box_area = rng.uniform_int(static_cast<int>(min_area / fill_frac[2]) + 24,
                                              static_cast<int>(min_area / fill_frac[2]) + 220);
            int w = static_cast<int>(std::lround(std::sqrt(box_area / aspect[shape])));
            int h = static_cast<int>(std::lround(w * aspect[shape]));
            w = std::clamp(w, 8, canvas / 2);
            h = std::clamp(h, 8, canvas / 2);
            if (w >= canvas - 2 || h >= canvas - 2) continue;
            BBox box{rng.uniform_int(1, canvas - w - 1), rng.uniform_int(1, canvas - h - 1), w, h};
            bool clash = false;
            for (const auto& other : scene.objects)
                if (detail::boxes_overlap(box, other.bbox, 2)) clash = true;
            if (clash) continue;
            auto mask = detail::render_mask(canvas, shape, box);
            if (detail::mask_area(mask) < min_area) continue;

            SpriteObject obj;
            obj.shape = shape;
            obj.color = color;
            obj.bbox = box;
            obj.center_px = {box.x + box.w / 2.0, box.y + box.h / 2.0};
            obj.mask = std::move(mask);
            scene.objects.push_back(std::move(obj));
            break;
        }
    }
    require(!scene.objects.empty(), "generate_scene: placement failed");

    if (scene.objects.size() == 2) {
        scene.relations.push_back(relation_between(scene, 0, 1));
    } else if (scene.objects.size() == 3) {
        scene.relations.push_back(relation_between(scene, 0, 1));
        scene.relations.push_back(relation_between(scene, 1, 2));
    }
    return scene;
}

inline std::vector<uint8_t> render_scene(const SpriteScene& scene, int canvas) {
    const std::array<uint8_t, 3> bg = {30, 30, 36};
    std::vector<uint8_t> img(static_cast<size_t>(canvas) * canvas * 3);
    for (int i = 0; i < canvas * canvas; ++i)
        for (int c = 0; c < 3; ++c) img[static_cast<size_t>(i) * 3 + c] = bg[static_cast<size_t>(c)];
    for (const auto& obj : scene.objects) {
        auto rgb = color_rgb(obj.color);
        for (int i = 0; i < canvas * canvas; ++i)
            if (obj.mask[static_cast<size_t>(i)])
                for (int c = 0; c < 3; ++c)
                    img[static_cast<size_t>(i) * 3 + c] = rgb[static_cast<size_t>(c)];
    }
    return img;
}

inline Dataset generate(int n, uint64_t seed, int canvas = 64) {
    require(n >= 1, "generate: need at least one scene");
    Dataset ds;
    ds.canvas = canvas;
    ds.scenes.resize(static_cast<size_t>(n));
    ds.images.resize(static_cast<size_t>(n));
#pragma omp parallel for schedule(static)
    for (int i = 0; i < n; ++i) {
        ds.scenes[static_cast<size_t>(i)] = generate_scene(i, seed, canvas);
        ds.images[static_cast<size_t>(i)] = render_scene(ds.scenes[static_cast<size_t>(i)], canvas);
    }
    return ds;
}

// ---- run-length mask codec ----------------------------------------------------
// alternating run counts starting with background, row-major; sums to h*w

inline std::vector<int> rle_encode(const std::vector<uint8_t>& mask) {
    std::vector<int> runs;
    uint8_t current = 0;
    int count = 0;
    for (uint8_t v : mask) {
        if ((v != 0) == (current != 0)) {
            ++count;
        } else {
            runs.push_back(count);
            current = v;
            count = 1;
        }
    }
    runs.push_back(count);
    return runs;
}

inline std::vector<uint8_t> rle_decode(const std::vector<int>& runs, size_t total) {
    std::vector<uint8_t> mask;
    mask.reserve(total);
    uint8_t current = 0;
    for (int run : runs) {
        require(run >= 0, "rle_decode: negative run");
        mask.insert(mask.end(), static_cast<size_t>(run), current);
        current = current ? 0 : 1;
    }
    require(mask.size() == total, "rle_decode: run lengths do not cover the mask");
    return mask;
}

// ---- on-disk layout ------------------------------------------------------------
// dir/images/NNNNNN.png, dir/metadata.jsonl (one scene per line)

inline std::string scene_file_stem(int id) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%06d", id);
    return buf;
}

inline json scene_to_json(const SpriteScene& scene, int canvas) {
    json j;
    j["id"] = scene.id;
    j["objects"] = json::array();
    for (const auto& o : scene.objects) {
        json jo;
        jo["shape"] = shape_name(o.shape);
        jo["color"] = color_name(o.color);
        jo["category"] = o.category();
        jo["bbox"] = {o.bbox.x, o.bbox.y, o.bbox.w, o.bbox.h};
        jo["center"] = {o.center_px.x, o.center_px.y};
        jo["mask_rle"] = rle_encode(o.mask);
        j["objects"].push_back(std::move(jo));
    }
    j["relations"] = json::array();
    for (const auto& r : scene.relations)
        j["relations"].push_back({r.subject, r.predicate, r.object});
    j["canvas"] = canvas;
    return j;
}

inline SpriteScene scene_from_json(const json& j) {
    SpriteScene scene;
    scene.id = j.at("id").get<int>();
    int canvas = j.at("canvas").get<int>();
    for (const auto& jo : j.at("objects")) {
        SpriteObject o;
        std::string shape = jo.at("shape").get<std::string>();
        std::string color = jo.at("color").get<std::string>();
        for (int s = 0; s < kNumShapes; ++s)
            if (shape == shape_name(s)) o.shape = s;
        for (int c = 0; c < kNumColors; ++c)
            if (color == color_name(c)) o.color = c;
        require(jo.at("category").get<int>() == o.category(), "scene_from_json: category mismatch");
        auto bb = jo.at("bbox");
        o.bbox = {bb.at(0).get<int>(), bb.at(1).get<int>(), bb.at(2).get<int>(), bb.at(3).get<int>()};
        o.center_px = {jo.at("center").at(0).get<double>(), jo.at("center").at(1).get<double>()};
        o.mask = rle_decode(jo.at("mask_rle").get<std::vector<int>>(),
                            static_cast<size_t>(canvas) * canvas);
        scene.objects.push_back(std::move(o));
    }
    for (const auto& jr : j.at("relations"))
        scene.relations.push_back({jr.at(0).get<int>(), jr.at(1).get<int>(), jr.at(2).get<int>()});
    return scene;
}

inline void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir / "images");
    std::ofstream meta(dir / "metadata.jsonl");
    if (!meta) fail("save_dataset: cannot write metadata at " + dir.string());
    for (int i = 0; i < ds.size(); ++i) {
        pngio::Rgb8 png{ds.canvas, ds.canvas, ds.images[static_cast<size_t>(i)]};
        pngio::write_rgb8(dir / "images" / (scene_file_stem(ds.scenes[static_cast<size_t>(i)].id) + ".png"),
                          png);
        meta << scene_to_json(ds.scenes[static_cast<size_t>(i)], ds.canvas).dump() << "\n";
    }
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
    std::ifstream meta(dir / "metadata.jsonl");
    if (!meta) fail("load_dataset: missing metadata at " + dir.string());
    Dataset ds;
    ds.canvas = 0;
    std::string line;
    while (std::getline(meta, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        if (ds.canvas == 0) ds.canvas = j.at("canvas").get<int>();
        SpriteScene scene = scene_from_json(j);
        pngio::Rgb8 png =
            pngio::read_rgb8(dir / "images" / (scene_file_stem(scene.id) + ".png"));
        require(png.width == ds.canvas && png.height == ds.canvas,
                "load_dataset: image extent mismatch");
        ds.images.push_back(std::move(png.data));
        ds.scenes.push_back(std::move(scene));
    }
    require(ds.size() > 0, "load_dataset: empty dataset");
    return ds;
}

// ---- splits --------------------------------------------------------------------

struct SplitResult {
    std::vector<int> train_ids;
    std::vector<int> eval_ids;
};

inline void save_split(const SplitResult& split, const std::filesystem::path& path) {
    json j;
    j["train"] = split.train_ids;
    j["eval"] = split.eval_ids;
    std::ofstream os(path);
    if (!os) fail("save_split: cannot write " + path.string());
    os << j.dump(2) << "\n";
}

inline SplitResult load_split(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) fail("load_split: cannot read " + path.string());
    json j = json::parse(is);
    return {j.at("train").get<std::vector<int>>(), j.at("eval").get<std::vector<int>>()};
}

// image-disjoint split by seeded shuffle
inline SplitResult image_disjoint_split(std::vector<int> ids, double train_frac, uint64_t seed) {
    require(!ids.empty(), "image_disjoint_split: empty id list");
    Rng rng(derive_seed(seed, "image-split"));
    for (size_t i = ids.size(); i > 1; --i)
        std::swap(ids[i - 1], ids[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(i) - 1))]);
    size_t cut = static_cast<size_t>(train_frac * static_cast<double>(ids.size()));
    cut = std::min(std::max<size_t>(cut, 1), ids.size() - 1);
    return {{ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(cut)},
            {ids.begin() + static_cast<std::ptrdiff_t>(cut), ids.end()}};
}

// Scenes with exactly two distinct categories split so that every unordered
// category pair lands in exactly one side while every category is present on
// both sides. Greedy assignment with a machine-checked postcondition.
inline SplitResult pair_disjoint_split(const Dataset& ds, const std::vector<int>& candidate_ids,
                                       double train_frac, uint64_t seed) {
    using Pair = std::pair<int, int>;
    std::map<Pair, std::vector<int>> by_pair;
    for (int id : candidate_ids) {
        const SpriteScene& scene = ds.scenes[static_cast<size_t>(id)];
        auto cats = scene.category_set();
        require(cats.size() == 2, "pair_disjoint_split: scene without exactly two categories");
        by_pair[{*cats.begin(), *std::next(cats.begin())}].push_back(id);
    }
    require(by_pair.size() >= 2, "pair_disjoint_split: need at least two distinct pairs");

    std::map<int, std::vector<Pair>> pairs_of_category;
    for (const auto& [pair, scene_ids] : by_pair) {
        pairs_of_category[pair.first].push_back(pair);
        pairs_of_category[pair.second].push_back(pair);
    }
    for (const auto& [cat, pairs] : pairs_of_category)
        if (pairs.size() < 2)
            fail("pair_disjoint_split: category " + category_name(cat) +
                 " appears in only one pair; it cannot occur in both splits");

    std::vector<Pair> order;
    for (const auto& [pair, scene_ids] : by_pair) order.push_back(pair);
    Rng rng(derive_seed(seed, "pair-split"));
    for (size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1], order[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(i) - 1))]);

    std::map<Pair, int> assignment;  // 0 -> train, 1 -> eval
    std::set<int> covered_train, covered_eval;
    // coverage passes: make sure every category reaches each side
    for (int side = 0; side < 2; ++side) {
        auto& covered = side == 0 ? covered_train : covered_eval;
        for (const auto& [cat, pairs] : pairs_of_category) {
            if (covered.count(cat)) continue;
            for (const Pair& p : order) {
                if (assignment.count(p)) continue;
                if (p.first == cat || p.second == cat) {
                    assignment[p] = side;
                    covered.insert(p.first);
                    covered.insert(p.second);
                    break;
                }
            }
        }
    }
    // remaining pairs fill the requested ratio
    for (const Pair& p : order)
        if (!assignment.count(p)) assignment[p] = rng.uniform() < train_frac ? 0 : 1;

    SplitResult split;
    std::set<int> final_train, final_eval;
    for (const auto& [pair, side] : assignment) {
        auto& dst = side == 0 ? split.train_ids : split.eval_ids;
        auto& cov = side == 0 ? final_train : final_eval;
        for (int id : by_pair[pair]) dst.push_back(id);
        cov.insert(pair.first);
        cov.insert(pair.second);
    }
    for (const auto& [cat, pairs] : pairs_of_category) {
        if (!final_train.count(cat))
            fail("pair_disjoint_split: infeasible, category " + category_name(cat) +
                 " missing from the train side");
        if (!final_eval.count(cat))
            fail("pair_disjoint_split: infeasible, category " + category_name(cat) +
                 " missing from the eval side");
    }
    std::sort(split.train_ids.begin(), split.train_ids.end());
    std::sort(split.eval_ids.begin(), split.eval_ids.end());
    return split;
}

// scene ids usable per probing task
inline std::vector<int> single_object_ids(const Dataset& ds) {
    std::vector<int> ids;
    for (int i = 0; i < ds.size(); ++i)
        if (ds.scenes[static_cast<size_t>(i)].objects.size() == 1) ids.push_back(i);
    return ids;
}

inline std::vector<int> two_category_ids(const Dataset& ds) {
    std::vector<int> ids;
    for (int i = 0; i < ds.size(); ++i)
        if (ds.scenes[static_cast<size_t>(i)].category_set().size() == 2) ids.push_back(i);
    return ids;
}

inline std::vector<int> related_scene_ids(const Dataset& ds) {
    std::vector<int> ids;
    for (int i = 0; i < ds.size(); ++i)
        if (!ds.scenes[static_cast<size_t>(i)].relations.empty() &&
            ds.scenes[static_cast<size_t>(i)].objects.size() == 2)
            ids.push_back(i);
    return ids;
}

}  // namespace comit::data
