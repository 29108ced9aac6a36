#include <catch2/catch_amalgamated.hpp>

#include "comit/probes.hpp"

using namespace comit;
using namespace comit::probe;

namespace {

ProbeConfig small_probe(Task task) {
    ProbeConfig cfg;
    cfg.model_dim = 32;
    cfg.heads = 8;
    cfg.token_dim = 4;
    cfg.max_tokens = 8;
    cfg.task = task;
    return cfg;
}

// oracle tokens: the label is written into token 0 as a scaled channel value
ProbeExample oracle_example(int label, int num_classes, Rng& rng) {
    ProbeExample ex;
    ex.tokens = MatD::Zero(8, 4);
    for (Eigen::Index r = 0; r < 8; ++r)
        for (Eigen::Index c = 0; c < 4; ++c) ex.tokens(r, c) = 0.1 * rng.normal();
    ex.tokens(0, 0) = -1.0 + 2.0 * label / (num_classes - 1);
    ex.tokens(0, 1) = 1.0;
    ex.label = label;
    ex.image_id = rng.uniform_int(0, 1 << 20);
    return ex;
}

}  // namespace

TEST_CASE("probe head shapes per task") {
    Rng rng(3);
    MatF tokens = MatF::Zero(8, 4);

    ProbeNet<float> cls(small_probe(Task::classification), 1);
    REQUIRE(cls.forward_eval(tokens).cols() == data::kNumCategories);

    ProbeNet<float> rel(small_probe(Task::relations), 2);
    Triplet t{3, 1, 7};
    MatF logit = rel.forward_eval(tokens, &t);
    REQUIRE(logit.rows() == 1);
    REQUIRE(logit.cols() == 1);

    // a triplet is required exactly for the relational task
    REQUIRE_THROWS(rel.forward_eval(tokens));
    REQUIRE_THROWS(cls.forward_eval(tokens, &t));

    // wrong sequence length is rejected
    MatF short_tokens = MatF::Zero(5, 4);
    REQUIRE_THROWS(cls.forward_eval(short_tokens));
}

TEST_CASE("token order changes the logits through positional embeddings") {
    ProbeNet<float> net(small_probe(Task::classification), 5);
    Rng rng(7);
    MatF tokens(8, 4);
    for (Eigen::Index r = 0; r < 8; ++r)
        for (Eigen::Index c = 0; c < 4; ++c) tokens(r, c) = static_cast<float>(rng.normal());
    MatF shuffled = tokens;
    shuffled.row(0).swap(shuffled.row(7));

    MatF a = net.forward_eval(tokens);
    MatF b = net.forward_eval(shuffled);
    REQUIRE((a - b).cwiseAbs().maxCoeff() > 0.0f);
}

TEST_CASE("a constant predictor scores at chance on a balanced split") {
    // untrained probe with zeroed head always prefers the same class
    ProbeConfig cfg = small_probe(Task::classification);
    ProbeNet<float> net(cfg, 9);
    int head = net.params().find("head.w");
    net.params().weight(head).setZero();
    int bias = net.params().find("head.b");
    net.params().weight(bias).setZero();
    net.params().weight(bias)(0, 0) = 1.0f;  // always class 0

    Rng rng(11);
    std::vector<ProbeExample> split;
    for (int label = 0; label < 20; ++label)
        for (int i = 0; i < 3; ++i) split.push_back(oracle_example(label, 20, rng));
    REQUIRE(eval_classification(net, split) == Catch::Approx(1.0 / 20.0).epsilon(1e-9));
}

TEST_CASE("top-5 membership is monotone in the true logits") {
    MatF logits(1, 20);
    for (int i = 0; i < 20; ++i) logits(0, i) = -static_cast<float>(i);
    std::pair<int, int> truth{3, 9};
    REQUIRE_FALSE(both_in_top5(logits, truth));  // rank of 9 is below five
    logits(0, 9) += 100.0f;                      // raising a true logit can only help
    REQUIRE(both_in_top5(logits, truth));
    logits(0, 3) += 100.0f;
    REQUIRE(both_in_top5(logits, truth));
}

TEST_CASE("degenerate five-category vocabulary always succeeds at top-5") {
    ProbeConfig cfg = small_probe(Task::pairs);
    cfg.num_categories = 5;
    ProbeNet<float> net(cfg, 13);
    Rng rng(15);
    std::vector<ProbeExample> split;
    for (int i = 0; i < 10; ++i) {
        ProbeExample ex;
        ex.tokens = MatD::Zero(8, 4);
        ex.labels = {rng.uniform_int(0, 4), 0};
        if (ex.labels.first == 0) ex.labels.second = 1;
        ex.image_id = i;
        split.push_back(ex);
    }
    REQUIRE(eval_pairs(net, split) == 1.0);
}

TEST_CASE("random pair logits live near the hypergeometric baseline") {
    // C(18,3)/C(20,5) with 20 categories and both truths required in the top 5
    double expected = 816.0 / 15504.0;
    Rng rng(17);
    int hits = 0;
    const int trials = 20000;
    for (int i = 0; i < trials; ++i) {
        MatF logits(1, 20);
        for (int c = 0; c < 20; ++c) logits(0, c) = static_cast<float>(rng.normal());
        int a = rng.uniform_int(0, 19), b = rng.uniform_int(0, 19);
        while (b == a) b = rng.uniform_int(0, 19);
        if (both_in_top5(logits, {a, b})) ++hits;
    }
    REQUIRE(static_cast<double>(hits) / trials == Catch::Approx(expected).margin(0.01));
}

TEST_CASE("relation negatives come from other images and shuffle-invariant scoring") {
    Rng rng(19);
    std::vector<ProbeExample> pool;
    for (int i = 0; i < 30; ++i) {
        ProbeExample ex;
        ex.tokens = MatD::Zero(8, 4);
        ex.image_id = i;
        ex.triplet = {rng.uniform_int(0, 19), rng.uniform_int(0, 3), rng.uniform_int(0, 19)};
        pool.push_back(ex);
    }
    auto cands = sample_negatives(pool, 4, 9, 7);
    REQUIRE(cands.negatives.size() == 9);

    // requesting more negatives than available images fails
    std::vector<ProbeExample> tiny(pool.begin(), pool.begin() + 5);
    REQUIRE_THROWS(sample_negatives(tiny, 0, 9, 7));
}

TEST_CASE("random relational scoring sits at one in ten with nine negatives") {
    ProbeConfig cfg = small_probe(Task::relations);
    ProbeNet<float> net(cfg, 21);
    Rng rng(23);
    std::vector<ProbeExample> split;
    for (int i = 0; i < 400; ++i) {
        ProbeExample ex;
        ex.tokens = MatD::Zero(8, 4);
        for (Eigen::Index r = 0; r < 8; ++r)
            for (Eigen::Index c = 0; c < 4; ++c) ex.tokens(r, c) = rng.normal();
        ex.image_id = i;
        ex.triplet = {rng.uniform_int(0, 19), rng.uniform_int(0, 3), rng.uniform_int(0, 19)};
        split.push_back(ex);
    }
    double acc = eval_relations(net, split, 9, 3);
    REQUIRE(acc == Catch::Approx(0.1).margin(0.06));
}

TEST_CASE("oracle tokens train the classification probe to high accuracy") {
    ProbeConfig cfg = small_probe(Task::classification);
    ProbeNet<float> net(cfg, 25);
    Rng rng(27);
    std::vector<ProbeExample> train_split, val_split;
    for (int i = 0; i < 400; ++i) train_split.push_back(oracle_example(i % 20, 20, rng));
    for (int i = 0; i < 100; ++i) val_split.push_back(oracle_example(i % 20, 20, rng));

    ProbeTrainConfig tc;
    tc.lr = 3e-4;
    tc.batch = 32;
    tc.max_steps = 1200;
    tc.eval_every = 100;
    tc.seed = 5;
    ProbeResult result = train_probe(net, train_split, val_split, tc);
    REQUIRE(result.best_metric > 0.9);
    // the returned metric matches the reinstalled best checkpoint
    REQUIRE(eval_classification(net, val_split) == Catch::Approx(result.best_metric));
}

TEST_CASE("probe training never touches the frozen tokens") {
    ProbeConfig cfg = small_probe(Task::classification);
    ProbeNet<float> net(cfg, 29);
    Rng rng(31);
    std::vector<ProbeExample> split;
    for (int i = 0; i < 40; ++i) split.push_back(oracle_example(i % 20, 20, rng));
    std::vector<MatD> before;
    for (const auto& ex : split) before.push_back(ex.tokens);

    ProbeTrainConfig tc;
    tc.max_steps = 50;
    tc.eval_every = 25;
    train_probe(net, split, split, tc);
    for (size_t i = 0; i < split.size(); ++i)
        REQUIRE((split[i].tokens - before[i]).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("result records task name and best step") {
    ProbeResult r;
    r.best_metric = 0.42;
    r.best_step = 300;
    json j = result_json(Task::pairs, r);
    REQUIRE(j.at("task") == "pairs");
    REQUIRE(j.at("accuracy") == 0.42);
    REQUIRE(j.at("best_step") == 300);
}
