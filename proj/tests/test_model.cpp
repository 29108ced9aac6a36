#include <catch2/catch_amalgamated.hpp>

#include "comit/model.hpp"

using namespace comit;
using namespace comit::model;

namespace {

BackboneConfig small_config() {
    BackboneConfig cfg;
    cfg.depth = 3;
    cfg.hidden = 64;
    cfg.heads = 4;
    cfg.patch_size = 8;
    cfg.image_size = 64;
    cfg.crop_size = 24;
    cfg.message_length = 8;
    cfg.fsq = fsq::FsqSpec::desk();
    cfg.align_layer = 2;
    return cfg;
}

ForwardArgs<float> crop_args(const Backbone<float>& net, Rng& rng, double t = 1.0) {
    const auto& cfg = net.config();
    int gh = cfg.crop_size / cfg.patch_size;
    ForwardArgs<float> args;
    args.patches = MatF(gh * gh, cfg.patch_dim());
    for (Eigen::Index r = 0; r < args.patches.rows(); ++r)
        for (Eigen::Index c = 0; c < args.patches.cols(); ++c)
            args.patches(r, c) = static_cast<float>(rng.normal());
    args.grid_h = gh;
    args.grid_w = gh;
    args.t = t;
    args.offset = {0.25, -0.5};
    args.mode = t == 1.0 ? Mode::encode : Mode::decode;
    return args;
}

fsq::LatentMessage random_message(const BackboneConfig& cfg, Rng& rng) {
    std::vector<int64_t> ids;
    for (int j = 0; j < cfg.message_length; ++j)
        ids.push_back(rng.uniform_int(0, static_cast<int>(cfg.fsq.vocab_size()) - 1));
    return fsq::message_from_ids(ids, cfg.fsq);
}

}  // namespace

TEST_CASE("forward shape contracts") {
    BackboneConfig cfg = small_config();
    Backbone<float> net(cfg, 1);
    Rng rng(2);
    auto msg = random_message(cfg, rng);
    auto args = crop_args(net, rng);
    args.message = &msg;

    auto out = net.forward_eval(args);
    REQUIRE(out.message_readout.rows() == cfg.message_length);
    REQUIRE(out.message_readout.cols() == cfg.fsq.token_dim());
    REQUIRE(out.velocity.rows() == args.grid_h * args.grid_w);
    REQUIRE(out.velocity.cols() == cfg.patch_dim());
    REQUIRE(out.tap_message.rows() == cfg.message_length);
    REQUIRE(out.tap_message.cols() == cfg.hidden);
    REQUIRE(out.tap_image.rows() == args.grid_h * args.grid_w);
}

TEST_CASE("forward validates time and message length") {
    BackboneConfig cfg = small_config();
    Backbone<float> net(cfg, 1);
    Rng rng(3);
    auto msg = random_message(cfg, rng);
    auto args = crop_args(net, rng);
    args.message = &msg;

    args.t = 1.5;
    REQUIRE_THROWS(net.forward_eval(args));
    args.t = -0.1;
    REQUIRE_THROWS(net.forward_eval(args));

    args.t = 1.0;
    auto short_msg = fsq::message_from_ids({0, 1, 2}, cfg.fsq);
    args.message = &short_msg;
    REQUIRE_THROWS(net.forward_eval(args));
}

TEST_CASE("evaluation is deterministic bit-for-bit") {
    BackboneConfig cfg = small_config();
    Backbone<float> net(cfg, 5);
    Rng rng(7);
    auto msg = random_message(cfg, rng);
    auto args = crop_args(net, rng, 0.4);
    args.message = &msg;

    auto a = net.forward_eval(args);
    auto b = net.forward_eval(args);
    REQUIRE((a.velocity - b.velocity).cwiseAbs().maxCoeff() == 0.0f);
    REQUIRE((a.message_readout - b.message_readout).cwiseAbs().maxCoeff() == 0.0f);
}

TEST_CASE("attention rows are normalized and the buffer block is causal") {
    BackboneConfig cfg = small_config();
    Backbone<float> net(cfg, 9);
    Rng rng(11);
    auto msg = random_message(cfg, rng);
    auto args = crop_args(net, rng);
    args.message = &msg;
    args.capture_attention = true;

    auto out = net.forward_eval(args);
    REQUIRE(out.attention.size() == static_cast<size_t>(cfg.depth));
    const int L = cfg.message_length;
    const int buf0 = out.buf_begin;
    for (const auto& layer : out.attention) {
        REQUIRE(layer.size() == static_cast<size_t>(cfg.heads));
        for (const MatF& att : layer) {
            for (Eigen::Index r = 0; r < att.rows(); ++r)
                REQUIRE(att.row(r).sum() == Catch::Approx(1.0).margin(1e-5));
            // buffer slot i never attends to a later buffer slot j > i
            for (int i = 0; i < L; ++i)
                for (int j = i + 1; j < L; ++j) REQUIRE(att(buf0 + i, buf0 + j) == 0.0f);
            // no non-buffer token reads the buffer
            for (Eigen::Index r = 0; r < att.rows(); ++r) {
                if (r >= buf0 && r < buf0 + L) continue;
                for (int j = 0; j < L; ++j) REQUIRE(att(r, buf0 + j) == 0.0f);
            }
        }
    }
}

TEST_CASE("perturbing buffer slot j only moves message readouts at slots >= j") {
    BackboneConfig cfg = small_config();
    Backbone<float> net(cfg, 13);
    Rng rng(17);
    auto msg = random_message(cfg, rng);
    auto args = crop_args(net, rng);
    args.message = &msg;

    MatF base = net.forward_eval(args).message_readout;

    const int j = 3;
    int pos_id = net.params().find("buffer.pos");
    REQUIRE(pos_id >= 0);
    net.params().weight(pos_id).row(j).array() += 0.5f;
    MatF moved = net.forward_eval(args).message_readout;

    for (int s = 0; s < j; ++s)
        REQUIRE((moved.row(s) - base.row(s)).cwiseAbs().maxCoeff() == 0.0f);
    REQUIRE((moved.row(j) - base.row(j)).cwiseAbs().maxCoeff() > 0.0f);
}

TEST_CASE("image-modality modulation leaves message rows untouched before mixing") {
    BackboneConfig cfg = small_config();
    Backbone<float> net(cfg, 19);
    Rng rng(23);
    auto msg = random_message(cfg, rng);
    auto args = crop_args(net, rng);
    args.message = &msg;
    args.capture_block1_modulated = true;

    MatF base = net.forward_eval(args).block1_modulated;

    int mod_id = net.params().find("block0.mod.img.b");
    REQUIRE(mod_id >= 0);
    net.params().weight(mod_id).array() += 0.3f;
    MatF moved = net.forward_eval(args).block1_modulated;

    const int msg_side = 1 + 2 * cfg.message_length;
    for (int r = 0; r < msg_side; ++r)
        REQUIRE((moved.row(r) - base.row(r)).cwiseAbs().maxCoeff() == 0.0f);
    double image_delta = (moved.bottomRows(moved.rows() - msg_side) -
                          base.bottomRows(base.rows() - msg_side))
                             .cwiseAbs()
                             .maxCoeff();
    REQUIRE(image_delta > 0.0);
}

TEST_CASE("positional grid takes the top-left block regardless of crop location") {
    BackboneConfig cfg = small_config();
    Backbone<float> net(cfg, 29);

    MatF full = net.positional_grid(8, 8);
    MatF crop = net.positional_grid(3, 3);
    for (int y = 0; y < 3; ++y)
        for (int x = 0; x < 3; ++x)
            REQUIRE((crop.row(y * 3 + x) - full.row(y * 8 + x)).cwiseAbs().maxCoeff() == 0.0f);

    REQUIRE(full.maxCoeff() <= 1.0f);
    REQUIRE(full.minCoeff() >= -1.0f);
    REQUIRE_THROWS(net.positional_grid(9, 3));
}

TEST_CASE("message embedding separates slots and rejects bad ids") {
    BackboneConfig cfg = small_config();
    Backbone<float> net(cfg, 31);

    std::vector<int64_t> ids(static_cast<size_t>(cfg.message_length), 7);
    MatF emb = net.embed_message(ids);
    REQUIRE(emb.rows() == cfg.message_length);
    REQUIRE(emb.cols() == cfg.hidden);
    // identical ids at different slots differ through the positional term
    REQUIRE((emb.row(0) - emb.row(1)).cwiseAbs().maxCoeff() > 0.0f);
    // deterministic given fixed weights
    REQUIRE((emb - net.embed_message(ids)).cwiseAbs().maxCoeff() == 0.0f);

    ids[0] = cfg.fsq.vocab_size();
    REQUIRE_THROWS(net.embed_message(ids));
}

TEST_CASE("gradients reach every parameter family through both readouts") {
    BackboneConfig cfg = small_config();
    cfg.depth = 2;
    Backbone<double> net(cfg, 37);
    Rng rng(41);
    auto msg = random_message(cfg, rng);

    // modulation and the velocity head start at zero (identity blocks, closed
    // gates, zero field), which blocks gradients into the upstream weights;
    // open them as the first optimizer steps would
    for (int id = 0; id < net.params().size(); ++id) {
        const std::string& name = net.params().entry(id).name;
        if (name.find("mod.") != std::string::npos || name.find("head.velocity") != std::string::npos)
            net.params().weight(id).array() += 0.05;
    }

    Graph<double> g;
    ForwardArgs<double> args;
    int gh = cfg.crop_size / cfg.patch_size;
    args.patches = MatD(gh * gh, cfg.patch_dim());
    for (Eigen::Index r = 0; r < args.patches.rows(); ++r)
        for (Eigen::Index c = 0; c < args.patches.cols(); ++c) args.patches(r, c) = rng.normal();
    args.grid_h = args.grid_w = gh;
    args.t = 0.5;
    args.offset = {0.25, -0.5};
    args.mode = Mode::decode;
    args.message = &msg;

    auto vars = net.forward(g, args);
    MatD vel_target = MatD::Constant(gh * gh, cfg.patch_dim(), 0.7);
    MatD msg_target = MatD::Constant(cfg.message_length, cfg.fsq.token_dim(), -0.3);
    auto loss = g.add(g.mse(vars.velocity, g.constant(vel_target)),
                      g.mse(vars.message_readout, g.constant(msg_target)));
    g.backward(loss);

    std::vector<MatD> sink(static_cast<size_t>(net.params().size()));
    g.collect_param_grads(sink);
    int touched = 0;
    for (const auto& m : sink)
        if (m.size() > 0 && m.cwiseAbs().maxCoeff() > 0) ++touched;
    REQUIRE(touched == net.params().size());
}
