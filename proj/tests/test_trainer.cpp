#include <catch2/catch_amalgamated.hpp>

#include "comit/trainer.hpp"

#include <filesystem>

using namespace comit;
using namespace comit::train;

namespace {

TrainConfig tiny_train_config() {
    TrainConfig cfg;
    cfg.backbone.depth = 2;
    cfg.backbone.hidden = 64;
    cfg.backbone.heads = 4;
    cfg.backbone.message_length = 8;
    cfg.backbone.fsq = fsq::FsqSpec::desk();
    cfg.backbone.align_layer = 1;
    cfg.align.hidden = 64;
    cfg.align.projector_hidden = 64;
    cfg.align.teacher_dim = 16;
    cfg.sampler = {1, 4, 0.5, 0.125};
    cfg.warmup_steps = 10;
    cfg.steps = 4;
    cfg.batch_size = 3;
    cfg.threads = 2;
    cfg.seed = 12;
    return cfg;
}

struct Fixture {
    data::Dataset ds = data::generate(12, 77);
    align::OracleTeacher teacher{16, 8, 64, 5};
    TeacherFn fn = oracle_teacher_fn(teacher);
};

}  // namespace

TEST_CASE("learning-rate schedule hits its anchor points") {
    TrainConfig cfg;
    cfg.lr_base = 3e-4;
    cfg.warmup_steps = 100;
    REQUIRE(lr_at(100, cfg) == Catch::Approx(3e-4).epsilon(1e-12));
    REQUIRE(lr_at(50, cfg) == Catch::Approx(1.5e-4).epsilon(1e-12));
    REQUIRE(lr_at(400, cfg) == Catch::Approx(1.5e-4).epsilon(1e-12));
    REQUIRE_THROWS(lr_at(0, cfg));
}

TEST_CASE("EMA update arithmetic") {
    ParamStore<float> store;
    store.add("w", MatF::Constant(1, 1, 1.0f));
    std::vector<MatF> ema = {MatF::Zero(1, 1)};
    ema_update(ema, store, 0.999);
    REQUIRE(ema[0](0, 0) == Catch::Approx(0.001).epsilon(1e-6));

    // with fixed weights the EMA gap shrinks by exactly the decay factor
    double gap_before = std::abs(ema[0](0, 0) - 1.0);
    ema_update(ema, store, 0.999);
    double gap_after = std::abs(ema[0](0, 0) - 1.0);
    REQUIRE(gap_after / gap_before == Catch::Approx(0.999).epsilon(1e-6));
}

TEST_CASE("gradient clipping rescales to the target norm") {
    std::vector<MatF> grads = {MatF::Constant(2, 2, 5.0f)};  // norm 10
    double norm = grad_global_norm<float>({&grads});
    REQUIRE(norm == Catch::Approx(10.0).epsilon(1e-6));
    scale_grads(grads, 1.0 / norm);
    REQUIRE(grad_global_norm<float>({&grads}) == Catch::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("one train step: loss decomposition and metrics schema") {
    Fixture fx;
    TrainConfig cfg = tiny_train_config();
    Trainer trainer(cfg);

    auto b = trainer.train_step(fx.ds, {0, 1, 2}, fx.fn);
    REQUIRE(b.applied);
    REQUIRE(b.step == 1);
    REQUIRE(b.crop_count >= 1);
    REQUIRE(b.crop_count <= cfg.sampler.k_max);
    REQUIRE(b.fm >= 0.0);
    REQUIRE(b.srepa >= std::exp(-1.0) - 1e-6);
    REQUIRE(b.srepa <= std::exp(1.0) + 1e-6);
    REQUIRE(b.repa >= -1.0);
    REQUIRE(b.repa <= 1.0);
    // exact decomposition in double arithmetic
    REQUIRE(b.total == b.fm + cfg.align.lambda_repa * b.repa + cfg.align.lambda_srepa * b.srepa);

    json m = metrics_json(b);
    REQUIRE(m.at("step") == 1);
    REQUIRE(m.contains("fm"));
    REQUIRE(m.contains("lr"));
    REQUIRE(m.contains("K"));
}

TEST_CASE("zero alignment weights reduce the total to the flow loss") {
    Fixture fx;
    TrainConfig cfg = tiny_train_config();
    cfg.align.lambda_repa = 0.0;
    cfg.align.lambda_srepa = 0.0;
    Trainer trainer(cfg);
    auto b = trainer.train_step(fx.ds, {0, 1}, fx.fn);
    REQUIRE(b.total == b.fm);
}

TEST_CASE("training is reproducible for a fixed seed and thread count") {
    Fixture fx;
    TrainConfig cfg = tiny_train_config();
    Trainer a(cfg), b(cfg);
    for (int s = 0; s < 2; ++s) {
        auto ba = a.train_step(fx.ds, {0, 1, 2}, fx.fn);
        auto bb = b.train_step(fx.ds, {0, 1, 2}, fx.fn);
        REQUIRE(ba.fm == bb.fm);
        REQUIRE(ba.total == bb.total);
    }
}

TEST_CASE("checkpoint round-trip restores weights and resumes bit-compatibly") {
    namespace fs = std::filesystem;
    Fixture fx;
    TrainConfig cfg = tiny_train_config();
    fs::path dir = fs::temp_directory_path() / "comit_ckpt_test";
    fs::remove_all(dir);

    Trainer trainer(cfg);
    trainer.train_step(fx.ds, {0, 1, 2}, fx.fn);
    trainer.save_checkpoint(dir);

    // archive stores raw float32, so the reload is exact
    Trainer loaded = Trainer::load_checkpoint(dir);
    REQUIRE(loaded.step() == 1);
    for (int i = 0; i < trainer.net().params().size(); ++i)
        REQUIRE((loaded.net().params().weight(i) - trainer.net().params().weight(i))
                    .cwiseAbs()
                    .maxCoeff() == 0.0f);

    auto next_orig = trainer.train_step(fx.ds, {3, 4, 5}, fx.fn);
    auto next_loaded = loaded.train_step(fx.ds, {3, 4, 5}, fx.fn);
    REQUIRE(next_orig.fm == next_loaded.fm);
    REQUIRE(next_orig.total == next_loaded.total);
    REQUIRE(next_orig.crop_count == next_loaded.crop_count);
}

TEST_CASE("checkpoints reject mismatched model geometry") {
    namespace fs = std::filesystem;
    Fixture fx;
    TrainConfig cfg = tiny_train_config();
    fs::path dir = fs::temp_directory_path() / "comit_ckpt_mismatch";
    fs::remove_all(dir);
    Trainer trainer(cfg);
    trainer.save_checkpoint(dir);

    TrainConfig other = cfg;
    other.backbone.message_length = 4;
    Trainer wrong(other);
    REQUIRE_THROWS(wrong.restore_state(dir));
}

TEST_CASE("a non-finite loss aborts the step instead of the run") {
    Fixture fx;
    TrainConfig cfg = tiny_train_config();
    Trainer trainer(cfg);
    // poison one weight
    trainer.net().params().weight(0)(0, 0) = std::numeric_limits<float>::quiet_NaN();
    auto b = trainer.train_step(fx.ds, {0, 1}, fx.fn);
    REQUIRE_FALSE(b.applied);
    REQUIRE_FALSE(b.diagnostic.empty());
    REQUIRE(b.step == 1);  // the run continues with the next step
}

TEST_CASE("EMA copy tracks the raw weights after updates") {
    Fixture fx;
    TrainConfig cfg = tiny_train_config();
    cfg.ema_decay = 0.5;
    Trainer trainer(cfg);
    MatF before = trainer.net().params().weight(0);
    trainer.train_step(fx.ds, {0, 1, 2}, fx.fn);
    auto ema = trainer.ema_net();
    MatF raw = trainer.net().params().weight(0);
    MatF tracked = ema.params().weight(0);
    // ema = 0.5 * before + 0.5 * raw
    REQUIRE((tracked - (0.5f * before + 0.5f * raw)).cwiseAbs().maxCoeff() < 1e-6f);
}
