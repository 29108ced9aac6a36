#include <catch2/catch_amalgamated.hpp>

#include "comit/policies.hpp"

#include <set>

using namespace comit;
using namespace comit::policy;

namespace {

model::BackboneConfig policy_config() {
    model::BackboneConfig cfg;
    cfg.depth = 2;
    cfg.hidden = 64;
    cfg.heads = 4;
    cfg.patch_size = 8;
    cfg.image_size = 64;
    cfg.crop_size = 24;
    cfg.message_length = 8;
    cfg.fsq = fsq::FsqSpec::desk();
    cfg.align_layer = 1;
    return cfg;
}

ImageF stripes_image(int side) {
    ImageF img = ImageF::zeros(side, side);
    for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x)
            for (int c = 0; c < 3; ++c)
                img.at(y, x, c) = ((x / 8) % 2) ? 0.6f : -0.6f;
    return img;
}

}  // namespace

TEST_CASE("raster centers of a 3x3 grid") {
    // 256px image with 96px windows and the desk-scale analogue share the
    // same normalized coordinate set
    for (auto [side, crop] : {std::pair{256, 96}, std::pair{64, 24}}) {
        auto centers = raster_centers(3, side, crop);
        REQUIRE(centers.size() == 9);
        std::set<double> xs, ys;
        for (const Vec2& c : centers) {
            xs.insert(c.x);
            ys.insert(c.y);
        }
        REQUIRE(xs == std::set<double>{-0.625, 0.0, 0.625});
        REQUIRE(ys == std::set<double>{-0.625, 0.0, 0.625});
        // ordering: left-to-right then top-to-bottom, first is top-left
        REQUIRE(centers[0] == Vec2{-0.625, -0.625});
        REQUIRE(centers[1] == Vec2{0.0, -0.625});
        REQUIRE(centers[3] == Vec2{-0.625, 0.0});
    }
    REQUIRE_THROWS(raster_centers(3, 64, 65));
}

TEST_CASE("adaptive choice equals the brute-force argmax") {
    Rng rng(9);
    ImageF image = stripes_image(64);
    auto candidates = raster_centers(3, 64, 24);
    auto message = fsq::message_from_ids({0, 1, 2, 3, 4, 5, 6, 7}, fsq::FsqSpec::desk());

    for (int trial = 0; trial < 1000; ++trial) {
        // synthetic preview: random perturbation of the image
        ImageF preview = image;
        for (int y = 0; y < 64; ++y)
            for (int i = 0; i < 64 * 3; ++i)
                preview.pix(y, i) += static_cast<float>(0.3 * rng.normal());

        Vec2 chosen = adaptive_next<float>(image, message, candidates, 24, {0, 0},
                                           [&](const fsq::LatentMessage&, Vec2) { return preview; });

        // independent reference: direct scan over candidate windows
        int best = -1;
        double best_err = -1.0;
        for (size_t i = 0; i < candidates.size(); ++i) {
            auto box = geom::box_from_center(candidates[i], 64, 24);
            double err = 0.0;
            for (int y = box.y; y < box.y + box.size; ++y)
                for (int x = box.x; x < box.x + box.size; ++x)
                    for (int c = 0; c < 3; ++c) {
                        double d = preview.at(y, x, c) - image.at(y, x, c);
                        err += d * d;
                    }
            err /= 24.0 * 24.0 * 3.0;
            if (err > best_err) {
                best_err = err;
                best = static_cast<int>(i);
            }
        }
        REQUIRE(chosen == candidates[static_cast<size_t>(best)]);
    }
}

TEST_CASE("adaptive tie-breaking and unique-argmax cases") {
    ImageF image = ImageF::zeros(64, 64);
    auto candidates = raster_centers(3, 64, 24);
    auto message = fsq::message_from_ids({0, 0, 0, 0, 0, 0, 0, 0}, fsq::FsqSpec::desk());

    // single-cell error: only the window around cell 4 (center) differs
    ImageF one_cell = image;
    auto box = geom::box_from_center(candidates[4], 64, 24);
    for (int y = box.y; y < box.y + box.size; ++y)
        for (int x = box.x; x < box.x + box.size; ++x) one_cell.at(y, x, 0) = 1.0f;
    Vec2 chosen = adaptive_next<float>(image, message, candidates, 24, {0, 0},
                                       [&](const fsq::LatentMessage&, Vec2) { return one_cell; });
    REQUIRE(chosen == candidates[4]);

    // equal error everywhere -> first candidate in raster order
    ImageF uniform = image;
    uniform.pix.setConstant(0.5f);
    chosen = adaptive_next<float>(image, message, candidates, 24, {0, 0},
                                  [&](const fsq::LatentMessage&, Vec2) { return uniform; });
    REQUIRE(chosen == candidates[0]);
}

TEST_CASE("policy crop counts match their specification") {
    model::Backbone<float> net(policy_config(), 7);
    ImageF image = stripes_image(64);

    PolicySpec global;
    global.kind = Kind::global_only;
    global.with_global = true;
    global.n_local = 0;
    auto r = run_policy(net, image, global);
    REQUIRE(r.plan.count() == 1);
    REQUIRE(r.plan.centers[0] == Vec2{0.0, 0.0});
    REQUIRE(r.trace.size() == 1);

    PolicySpec raster;
    raster.kind = Kind::raster;
    raster.with_global = true;
    raster.n_local = 9;
    r = run_policy(net, image, raster);
    REQUIRE(r.plan.count() == 10);

    PolicySpec adaptive;
    adaptive.kind = Kind::adaptive;
    adaptive.with_global = false;
    adaptive.n_local = 3;
    adaptive.seed = 5;
    r = run_policy(net, image, adaptive);
    REQUIRE(r.plan.count() == 3);
    REQUIRE(r.previews.size() == 3);
}

TEST_CASE("policies never repeat a local center within one plan") {
    model::Backbone<float> net(policy_config(), 11);
    ImageF image = stripes_image(64);

    for (Kind kind : {Kind::random, Kind::adaptive}) {
        PolicySpec spec;
        spec.kind = kind;
        spec.with_global = kind == Kind::random;
        spec.n_local = 5;
        spec.seed = 13;
        auto r = run_policy(net, image, spec);
        std::set<std::pair<double, double>> seen;
        size_t start = spec.with_global ? 1 : 0;
        for (size_t i = start; i < r.plan.centers.size(); ++i) {
            auto key = std::make_pair(r.plan.centers[i].x, r.plan.centers[i].y);
            REQUIRE(seen.count(key) == 0);
            seen.insert(key);
        }
    }
}

TEST_CASE("policies are deterministic; the global-only policy ignores the seed") {
    model::Backbone<float> net(policy_config(), 17);
    ImageF image = stripes_image(64);

    PolicySpec random;
    random.kind = Kind::random;
    random.with_global = false;
    random.n_local = 4;
    random.seed = 21;
    auto a = run_policy(net, image, random);
    auto b = run_policy(net, image, random);
    REQUIRE(a.message == b.message);
    REQUIRE(a.plan.centers == b.plan.centers);

    PolicySpec global;
    global.kind = Kind::global_only;
    global.n_local = 0;
    global.seed = 1;
    auto g1 = run_policy(net, image, global);
    global.seed = 999;
    auto g2 = run_policy(net, image, global);
    REQUIRE(g1.message == g2.message);
}

TEST_CASE("policy validation rejects inconsistent specifications") {
    PolicySpec spec;
    spec.kind = Kind::adaptive;
    spec.n_local = 3;
    spec.preview_nfe = 0;  // no decoder budget
    REQUIRE_THROWS(spec.validate());

    spec.preview_nfe = 1;
    spec.n_local = 10;  // exceeds the 3x3 grid
    REQUIRE_THROWS(spec.validate());

    PolicySpec raster;
    raster.kind = Kind::raster;
    raster.n_local = 0;
    REQUIRE_THROWS(raster.validate());
}
