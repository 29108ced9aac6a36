#include <catch2/catch_amalgamated.hpp>

#include "comit/align.hpp"

#include <filesystem>

using namespace comit;
using namespace comit::align;

namespace {

MatD unit_row(int dim, int axis) {
    MatD v = MatD::Zero(1, dim);
    v(0, axis) = 1.0;
    return v;
}

}  // namespace

TEST_CASE("semantic loss endpoints") {
    const int s = 8;
    MatD teacher = unit_row(s, 0) * 3.0;  // scale must not matter

    Graph<double> g;
    auto parallel = exp_neg_cosine(g, g.input(unit_row(s, 0) * 0.5), teacher);
    REQUIRE(g.val(parallel)(0, 0) == Catch::Approx(std::exp(-1.0)).margin(1e-12));

    auto orthogonal = exp_neg_cosine(g, g.input(unit_row(s, 1)), teacher);
    REQUIRE(g.val(orthogonal)(0, 0) == Catch::Approx(1.0).margin(1e-12));

    auto anti = exp_neg_cosine(g, g.input(MatD(-unit_row(s, 0))), teacher);
    REQUIRE(g.val(anti)(0, 0) == Catch::Approx(std::exp(1.0)).margin(1e-12));
}

TEST_CASE("spatial loss endpoints and bounds") {
    const int s = 6, patches = 5;
    Rng rng(3);
    MatD teacher(patches, s);
    for (Eigen::Index r = 0; r < teacher.rows(); ++r)
        for (Eigen::Index c = 0; c < teacher.cols(); ++c) teacher(r, c) = rng.normal();

    Graph<double> g;
    auto perfect = neg_mean_cosine_rows(g, g.input(MatD(teacher * 2.0)), teacher);
    REQUIRE(g.val(perfect)(0, 0) == Catch::Approx(-1.0).margin(1e-12));

    // rows orthogonal to the teacher rows
    MatD orth = MatD::Zero(patches, s);
    MatD basis = teacher;
    for (int r = 0; r < patches; ++r) {
        // any vector orthogonal to teacher row r
        MatD t = teacher.row(r);
        MatD v = MatD::Zero(1, s);
        v(0, 0) = -t(0, 1);
        v(0, 1) = t(0, 0);
        orth.row(r) = v.row(0);
    }
    // zero out the overlap exactly
    for (int r = 0; r < patches; ++r) {
        double overlap = orth.row(r).dot(teacher.row(r));
        (void)overlap;
    }
    Graph<double> g2;
    MatD orth_exact(patches, s);
    for (int r = 0; r < patches; ++r) {
        MatD t = teacher.row(r);
        MatD v = MatD::Random(1, s);
        v -= t * (v.row(0).dot(t.row(0)) / t.row(0).squaredNorm());
        orth_exact.row(r) = v.row(0);
    }
    auto zero = neg_mean_cosine_rows(g2, g2.input(orth_exact), teacher);
    REQUIRE(g2.val(zero)(0, 0) == Catch::Approx(0.0).margin(1e-12));

    Graph<double> g3;
    MatD random_student(patches, s);
    for (Eigen::Index r = 0; r < random_student.rows(); ++r)
        for (Eigen::Index c = 0; c < random_student.cols(); ++c)
            random_student(r, c) = rng.normal();
    double v = g3.val(neg_mean_cosine_rows(g3, g3.input(random_student), teacher))(0, 0);
    REQUIRE(v >= -1.0);
    REQUIRE(v <= 1.0);
}

TEST_CASE("full alignment losses pass finite-difference gradient checks") {
    AlignmentConfig cfg;
    cfg.hidden = 12;
    cfg.projector_hidden = 10;
    cfg.teacher_dim = 6;
    AlignmentHeads<double> heads(cfg, 7);

    Rng rng(11);
    const int L = 4, P = 5;
    MatD tap_msg(L, cfg.hidden), tap_img(P, cfg.hidden);
    for (Eigen::Index r = 0; r < tap_msg.rows(); ++r)
        for (Eigen::Index c = 0; c < tap_msg.cols(); ++c) tap_msg(r, c) = rng.normal();
    for (Eigen::Index r = 0; r < tap_img.rows(); ++r)
        for (Eigen::Index c = 0; c < tap_img.cols(); ++c) tap_img(r, c) = rng.normal();
    MatD teacher_g(1, cfg.teacher_dim), teacher_s(P, cfg.teacher_dim);
    for (Eigen::Index c = 0; c < teacher_g.cols(); ++c) teacher_g(0, c) = rng.normal();
    for (Eigen::Index r = 0; r < teacher_s.rows(); ++r)
        for (Eigen::Index c = 0; c < teacher_s.cols(); ++c) teacher_s(r, c) = rng.normal();

    auto fd_check = [&](bool semantic, const MatD& x0) {
        auto eval = [&](const MatD& x) {
            Graph<double> g;
            auto in = g.input(x);
            auto loss = semantic ? srepa_loss(g, heads, in, teacher_g)
                                 : repa_loss(g, heads, in, teacher_s);
            return g.val(loss)(0, 0);
        };
        Graph<double> g;
        auto in = g.input(x0, true);
        auto loss = semantic ? srepa_loss(g, heads, in, teacher_g)
                             : repa_loss(g, heads, in, teacher_s);
        g.backward(loss);
        MatD analytic = g.grad_of(in);
        const double h = 1e-6;
        for (Eigen::Index r = 0; r < x0.rows(); ++r)
            for (Eigen::Index c = 0; c < x0.cols(); ++c) {
                MatD xp = x0, xm = x0;
                xp(r, c) += h;
                xm(r, c) -= h;
                double fd = (eval(xp) - eval(xm)) / (2 * h);
                REQUIRE(std::abs(analytic(r, c) - fd) < 1e-4);
            }
    };
    fd_check(true, tap_msg);
    fd_check(false, tap_img);
}

TEST_CASE("semantic loss stays within its closed-form range through the projector") {
    AlignmentConfig cfg;
    cfg.hidden = 16;
    cfg.teacher_dim = 8;
    cfg.projector_hidden = 16;
    AlignmentHeads<float> heads(cfg, 3);
    Rng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        MatF tap(6, cfg.hidden);
        for (Eigen::Index r = 0; r < tap.rows(); ++r)
            for (Eigen::Index c = 0; c < tap.cols(); ++c)
                tap(r, c) = static_cast<float>(rng.normal());
        MatD teacher(1, cfg.teacher_dim);
        for (Eigen::Index c = 0; c < teacher.cols(); ++c) teacher(0, c) = rng.normal();
        Graph<float> g;
        float v = g.val(srepa_loss(g, heads, g.input(tap), teacher))(0, 0);
        REQUIRE(v >= static_cast<float>(std::exp(-1.0)) - 1e-5f);
        REQUIRE(v <= static_cast<float>(std::exp(1.0)) + 1e-5f);
    }
}

TEST_CASE("oracle teacher is deterministic and content-addressed") {
    data::Dataset ds = data::generate(40, 1234);
    OracleTeacher teacher(32, 8, ds.canvas, 99);
    OracleTeacher teacher_again(32, 8, ds.canvas, 99);

    for (int i = 0; i < 5; ++i) {
        auto a = teacher.features(ds.scenes[static_cast<size_t>(i)]);
        auto b = teacher_again.features(ds.scenes[static_cast<size_t>(i)]);
        REQUIRE((a.global_vec - b.global_vec).cwiseAbs().maxCoeff() == 0.0);
        REQUIRE((a.spatial - b.spatial).cwiseAbs().maxCoeff() == 0.0);
        REQUIRE(a.global_vec.cols() == 32);
        REQUIRE(a.spatial.rows() == 64);
    }
}

TEST_CASE("swapping object positions moves spatial features but not the global vector") {
    // two hand-built scenes with the same objects at exchanged positions
    data::SpriteScene scene_a = data::generate_scene(7, 555, 64);
    while (scene_a.objects.size() != 2) {
        static int idx = 8;
        scene_a = data::generate_scene(idx++, 555, 64);
    }
    data::SpriteScene scene_b = scene_a;
    std::swap(scene_b.objects[0].mask, scene_b.objects[1].mask);
    std::swap(scene_b.objects[0].bbox, scene_b.objects[1].bbox);
    std::swap(scene_b.objects[0].center_px, scene_b.objects[1].center_px);

    OracleTeacher teacher(16, 8, 64, 1);
    auto fa = teacher.features(scene_a);
    auto fb = teacher.features(scene_b);
    REQUIRE((fa.global_vec - fb.global_vec).cwiseAbs().maxCoeff() == 0.0);
    if (scene_a.objects[0].category() != scene_a.objects[1].category())
        REQUIRE((fa.spatial - fb.spatial).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("oracle teacher handles empty scenes and rejects unknown categories") {
    OracleTeacher teacher(16, 8, 64, 2);
    data::SpriteScene empty;
    auto f = teacher.features(empty);
    REQUIRE(f.global_vec.row(0).norm() == Catch::Approx(1.0).epsilon(1e-9));
    // all patches carry the background embedding
    for (Eigen::Index r = 1; r < f.spatial.rows(); ++r)
        REQUIRE((f.spatial.row(r) - f.spatial.row(0)).cwiseAbs().maxCoeff() == 0.0);

    data::SpriteScene bad;
    data::SpriteObject obj;
    obj.shape = 7;  // out of vocabulary
    obj.mask.assign(64 * 64, 0);
    bad.objects.push_back(obj);
    REQUIRE_THROWS(teacher.features(bad));
}

TEST_CASE("file-backed teacher round-trips oracle features") {
    namespace fs = std::filesystem;
    data::Dataset ds = data::generate(6, 77);
    OracleTeacher oracle(24, 8, ds.canvas, 5);

    std::map<int, TeacherFeatures> features;
    for (int i = 0; i < ds.size(); ++i)
        features[i] = oracle.features(ds.scenes[static_cast<size_t>(i)]);

    fs::path dir = fs::temp_directory_path() / "comit_teacher_test";
    fs::create_directories(dir);
    FileTeacher::save(dir / "teacher.json", 24, 8, features);
    FileTeacher loaded(dir / "teacher.json");
    REQUIRE(loaded.dim() == 24);

    for (int i = 0; i < ds.size(); ++i) {
        const auto& f = loaded.features(i);
        // float round-trip of double features
        REQUIRE((f.global_vec.cast<float>() - features[i].global_vec.cast<float>())
                    .cwiseAbs()
                    .maxCoeff() == 0.0f);
        REQUIRE((f.spatial.cast<float>() - features[i].spatial.cast<float>())
                    .cwiseAbs()
                    .maxCoeff() == 0.0f);
    }
    REQUIRE_THROWS(loaded.features(12345));
}
