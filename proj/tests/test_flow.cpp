#include <catch2/catch_amalgamated.hpp>

#include "comit/flow.hpp"

#include <algorithm>

using namespace comit;
using namespace comit::flow;

namespace {

// velocity model with a constant field; Euler integrates it exactly
template <typename T>
struct ConstantField {
    ImageT<T> field;
    mutable int cond_calls = 0;
    mutable int uncond_calls = 0;

    int image_size() const { return field.width; }
    ImageT<T> velocity(const ImageT<T>&, double, Vec2 offset,
                       const fsq::LatentMessage&) const {
        if (offset == Vec2{0.0, 0.0})
            ++uncond_calls;
        else
            ++cond_calls;
        return field;
    }
};

fsq::LatentMessage dummy_message() {
    return fsq::message_from_ids({1, 2, 3, 4}, fsq::FsqSpec::desk());
}

}  // namespace

TEST_CASE("timestep sampling follows the shifted logit-normal") {
    REQUIRE(timestep_from_normal(0.0) == Catch::Approx(0.2689414213699951).epsilon(1e-12));

    Rng rng(99);
    std::vector<double> draws;
    for (int i = 0; i < 100000; ++i) {
        double t = sample_timestep(rng);
        REQUIRE(t > 0.0);
        REQUIRE(t < 1.0);
        draws.push_back(t);
    }
    std::nth_element(draws.begin(), draws.begin() + draws.size() / 2, draws.end());
    double median = draws[draws.size() / 2];
    REQUIRE(median == Catch::Approx(0.2689414213699951).margin(0.02));
}

TEST_CASE("interpolant endpoints are exact") {
    Rng rng(5);
    ImageD x = noise_image<double>(16, 16, rng);
    ImageD eps = noise_image<double>(16, 16, rng);

    auto at_one = make_flow_sample<double>(x, 1.0, eps);
    REQUIRE((at_one.x_t.pix - x.pix).cwiseAbs().maxCoeff() == 0.0);
    auto at_zero = make_flow_sample<double>(x, 0.0, eps);
    REQUIRE((at_zero.x_t.pix - eps.pix).cwiseAbs().maxCoeff() == 0.0);
    auto mid = make_flow_sample<double>(x, 0.3, eps);
    REQUIRE((mid.target.pix - (x.pix - eps.pix)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("fm loss of a perfect oracle vanishes") {
    Rng rng(7);
    ImageD x = noise_image<double>(16, 16, rng);

    // knows the clean image, inverts the interpolant: x - eps = (x - x_t)/(1 - t)
    struct Oracle {
        ImageD clean;
        int image_size() const { return clean.width; }
        ImageD velocity(const ImageD& x_t, double t, Vec2, const fsq::LatentMessage&) const {
            ImageD v = clean;
            v.pix = (clean.pix - x_t.pix) / (1.0 - t);
            return v;
        }
    } oracle{x};

    Rng loss_rng(11);
    double loss = fm_loss<double>(oracle, x, dummy_message(), {0, 0}, loss_rng);
    REQUIRE(loss < 1e-20);
    REQUIRE(loss >= 0.0);
}

TEST_CASE("fm loss of the zero model on unit-variance data is near two") {
    struct ZeroModel {
        int side;
        int image_size() const { return side; }
        ImageD velocity(const ImageD& x_t, double, Vec2, const fsq::LatentMessage&) const {
            return ImageD::zeros(x_t.height, x_t.width);
        }
    } zero{32};

    Rng rng(13);
    double total = 0.0;
    const int reps = 8;
    for (int i = 0; i < reps; ++i) {
        ImageD x = noise_image<double>(32, 32, rng);
        total += fm_loss<double>(zero, x, dummy_message(), {0, 0}, rng);
    }
    REQUIRE(total / reps == Catch::Approx(2.0).margin(0.1));
}

TEST_CASE("batch-mean loss is order independent") {
    std::vector<double> losses = {0.3, 1.7, 0.9, 2.2, 0.05};
    auto mean_of = [](std::vector<double> v) {
        double s = 0;
        for (double x : v) s += x;
        return s / static_cast<double>(v.size());
    };
    std::vector<double> shuffled = {2.2, 0.05, 0.3, 0.9, 1.7};
    REQUIRE(mean_of(losses) == Catch::Approx(mean_of(shuffled)).epsilon(1e-15));
}

TEST_CASE("Euler decoding recovers the target exactly under a constant oracle field") {
    for (int nfe : {1, 4, 10}) {
        Rng seed_rng(21);
        ImageD x0 = noise_image<double>(16, 16, seed_rng);  // what decode will draw
        Rng probe(33);
        ImageD target = noise_image<double>(16, 16, probe);

        ConstantField<double> model;
        model.field = target;
        model.field.pix = target.pix - x0.pix;

        GuidanceConfig cfg;
        cfg.weight = 1.0;
        cfg.nfe = nfe;
        Rng decode_rng(21);  // decode draws the same x0 first
        ImageD out = decode<double>(model, dummy_message(), {0.5, 0.5}, cfg, dummy_message(),
                                    decode_rng);
        REQUIRE((out.pix - target.pix).cwiseAbs().maxCoeff() < 1e-6);
    }
}

TEST_CASE("guidance weight one runs the conditional branch only") {
    ConstantField<float> model;
    model.field = ImageF::zeros(16, 16);
    GuidanceConfig cfg;
    cfg.weight = 1.0;
    cfg.nfe = 10;
    Rng rng(3);
    decode<float>(model, dummy_message(), {0.5, 0.5}, cfg, dummy_message(), rng);
    REQUIRE(model.cond_calls == 10);
    REQUIRE(model.uncond_calls == 0);

    model.cond_calls = model.uncond_calls = 0;
    cfg.weight = 7.5;
    Rng rng2(3);
    decode<float>(model, dummy_message(), {0.5, 0.5}, cfg, dummy_message(), rng2);
    REQUIRE(model.cond_calls == 10);
    REQUIRE(model.uncond_calls == 10);
}

TEST_CASE("decode validates the step count and is deterministic") {
    ConstantField<float> model;
    model.field = ImageF::zeros(8, 8);
    GuidanceConfig cfg;
    cfg.nfe = 0;
    Rng rng(1);
    REQUIRE_THROWS(decode<float>(model, dummy_message(), {0, 0}, cfg, dummy_message(), rng));

    cfg.nfe = 4;
    cfg.weight = 1.0;
    Rng a(77), b(77);
    ImageF ia = decode<float>(model, dummy_message(), {0, 0}, cfg, dummy_message(), a);
    ImageF ib = decode<float>(model, dummy_message(), {0, 0}, cfg, dummy_message(), b);
    REQUIRE((ia.pix - ib.pix).cwiseAbs().maxCoeff() == 0.0f);
}

TEST_CASE("decode previews: one per step, deterministic") {
    ConstantField<float> model;
    model.field = ImageF::zeros(8, 8);
    model.field.pix.setConstant(0.25f);
    GuidanceConfig cfg;
    cfg.weight = 1.0;
    cfg.nfe = 5;
    Rng rng(123);
    std::vector<ImageF> previews;
    decode<float>(model, dummy_message(), {0, 0}, cfg, dummy_message(), rng, &previews);
    REQUIRE(previews.size() == 5);
}

TEST_CASE("guidance identity at unit weight is exact") {
    Rng rng(31);
    MatF vc = MatF::Random(4, 6), vu = MatF::Random(4, 6);
    GuidanceConfig cfg;
    cfg.weight = 1.0;
    ApgState<float> state;
    MatF out = apg_velocity<float>(vc, vu, cfg, state);
    REQUIRE((out - vc).cwiseAbs().maxCoeff() == 0.0f);
}

TEST_CASE("guidance rescaling halves an orthogonal difference of norm five") {
    // v_cond along the first axis; difference fully orthogonal with norm 5
    MatD vc = MatD::Zero(1, 4);
    vc(0, 0) = 1.0;
    MatD d = MatD::Zero(1, 4);
    d(0, 1) = 5.0;
    MatD vu = vc - d;

    GuidanceConfig cfg;
    cfg.weight = 3.0;
    cfg.rescale_threshold = 2.5;
    cfg.parallel_keep = 0.0;
    cfg.momentum = -0.5;  // irrelevant on the first step (zero state)
    ApgState<double> state;
    MatD out = apg_velocity<double>(vc, vu, cfg, state);

    // d rescaled to norm 2.5 then mixed with weight - 1 = 2
    MatD expected = vc;
    expected(0, 1) = 2.0 * 2.5;
    REQUIRE((out - expected).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("guidance degenerates to the vanilla mixture") {
    Rng rng(41);
    MatD vc = MatD::Random(3, 5), vu = MatD::Random(3, 5);
    GuidanceConfig cfg;
    cfg.weight = 4.0;
    cfg.rescale_threshold = std::numeric_limits<double>::infinity();
    cfg.parallel_keep = 1.0;
    cfg.momentum = 0.0;
    ApgState<double> state;
    MatD out = apg_velocity<double>(vc, vu, cfg, state);
    MatD vanilla = vu + cfg.weight * (vc - vu);
    REQUIRE((out - vanilla).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("guidance treats a vanishing conditional prediction as fully orthogonal") {
    MatD vc = MatD::Zero(1, 3);
    MatD vu = MatD::Constant(1, 3, -0.5);
    GuidanceConfig cfg;
    cfg.weight = 2.0;
    cfg.rescale_threshold = std::numeric_limits<double>::infinity();
    cfg.parallel_keep = 0.7;
    cfg.momentum = 0.0;
    ApgState<double> state;
    MatD out = apg_velocity<double>(vc, vu, cfg, state);
    // parallel part is zero, so the full difference survives
    MatD expected = vc + (cfg.weight - 1.0) * (vc - vu);
    REQUIRE((out - expected).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("guidance momentum feeds the previous raw difference forward") {
    MatD vc = MatD::Zero(1, 2), vu = MatD::Zero(1, 2);
    vc(0, 0) = 1.0;  // diff = (1, 0) every step
    GuidanceConfig cfg;
    cfg.weight = 2.0;
    cfg.rescale_threshold = std::numeric_limits<double>::infinity();
    cfg.parallel_keep = 1.0;
    cfg.momentum = -0.5;
    ApgState<double> state;
    MatD first = apg_velocity<double>(vc, vu, cfg, state);
    MatD second = apg_velocity<double>(vc, vu, cfg, state);
    // first step: d = diff; second step: d = diff - 0.5 * diff
    REQUIRE(first(0, 0) == Catch::Approx(2.0).epsilon(1e-12));
    REQUIRE(second(0, 0) == Catch::Approx(1.5).epsilon(1e-12));
}
