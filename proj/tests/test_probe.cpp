#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "piilab/probe.hpp"

using namespace piilab;

namespace {

// Two well-separated 2-d gaussian blobs.
void make_blobs(int n_per_class, double gap, uint64_t seed, std::vector<Tensor>& x, std::vector<int>& y) {
    Rng rng(seed);
    for (int c = 0; c < 2; ++c) {
        for (int i = 0; i < n_per_class; ++i) {
            Tensor f({2});
            f.data[0] = rng.normal() + (c ? gap : -gap);
            f.data[1] = rng.normal();
            x.push_back(std::move(f));
            y.push_back(c);
        }
    }
}

}  // namespace

TEST_CASE("train_probe: linearly separable data reaches 100% validation accuracy") {
    std::vector<Tensor> x;
    std::vector<int> y;
    make_blobs(60, 6.0, 1, x, y);
    ProbeMetrics m;
    train_probe(x, y, 5, &m);
    CHECK(m.val_acc == 100.0);
}

TEST_CASE("train_probe: shuffled labels score near chance") {
    std::vector<Tensor> x;
    std::vector<int> y;
    make_blobs(300, 4.0, 2, x, y);
    Rng rng(77);
    rng.shuffle(y);
    ProbeMetrics m;
    train_probe(x, y, 5, &m);
    CHECK(m.val_acc > 40.0);
    CHECK(m.val_acc < 60.0);
}

TEST_CASE("train_probe: single-class input is a data error") {
    std::vector<Tensor> x{Tensor::from({2}, {1, 2}), Tensor::from({2}, {2, 1})};
    std::vector<int> y{1, 1};
    CHECK_THROWS_AS(train_probe(x, y, 1), DataError);
}

TEST_CASE("probe_direction: normalization and degenerate input") {
    ProbeModel p;
    p.theta = Tensor::from({2}, {3.0, 4.0});
    Tensor d = probe_direction(p);
    CHECK(d.data[0] == doctest::Approx(0.6));
    CHECK(d.data[1] == doctest::Approx(0.8));

    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        ProbeModel q;
        q.theta = Tensor::randn({16}, rng, 2.0);
        Tensor dir = probe_direction(q);
        double sq = 0.0;
        for (double v : dir.data) sq += v * v;
        CHECK(std::abs(std::sqrt(sq) - 1.0) < 1e-12);

        // Positive rescaling leaves the direction unchanged.
        ProbeModel scaled = q;
        for (auto& v : scaled.theta.data) v *= 7.5;
        Tensor dir2 = probe_direction(scaled);
        for (size_t i = 0; i < dir.data.size(); ++i) CHECK(dir.data[i] == doctest::Approx(dir2.data[i]));
    }

    ProbeModel zero;
    zero.theta = Tensor::zeros({4});
    CHECK_THROWS_AS(probe_direction(zero), DataError);
}

TEST_CASE("probe decisions are invariant under joint positive rescaling") {
    std::vector<Tensor> x;
    std::vector<int> y;
    make_blobs(40, 3.0, 9, x, y);
    ProbeModel p = train_probe(x, y, 2);
    ProbeModel scaled = p;
    for (auto& v : scaled.theta.data) v *= 12.0;
    scaled.bias *= 12.0;
    for (const auto& f : x) CHECK(p.predict(f) == scaled.predict(f));
}

TEST_CASE("probe_layer_features: planted signal layer wins in 10/10 seeded trials") {
    const int n_layers = 6, d = 16, n_docs = 200, planted = 3;
    for (uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(mix_seed(seed, 404));
        std::vector<std::vector<Tensor>> features(n_layers);
        std::vector<int> labels;
        for (int i = 0; i < n_docs; ++i) labels.push_back(i % 2);
        for (int l = 0; l < n_layers; ++l) {
            for (int i = 0; i < n_docs; ++i) {
                Tensor f = Tensor::randn({d}, rng, 1.0);
                if (l == planted && labels[i] == 1)
                    for (int j = 0; j < 4; ++j) f.data[j] += 2.5;
                features[l].push_back(std::move(f));
            }
        }
        auto report = probe_layer_features(features, labels, seed);
        CHECK(report.selected_layer == planted);
    }
}

TEST_CASE("probe_layer_features: identical layers tie to layer 0") {
    std::vector<Tensor> x;
    std::vector<int> y;
    make_blobs(40, 5.0, 4, x, y);
    std::vector<std::vector<Tensor>> features{x, x, x};
    auto report = probe_layer_features(features, y, 11);
    CHECK(report.selected_layer == 0);
    CHECK(report.rows.size() == 3);
    CHECK(report.to_table().find("<- selected") != std::string::npos);
}

TEST_CASE("probe_all_layers: runs on model activations and is deterministic") {
    Vocab vocab = build_vocab();
    auto subjects = generate_subjects(12, 8);
    auto docs = build_corpus(subjects, 40, 0.5, 8, vocab);
    LmConfig cfg;
    cfg.vocab_size = vocab.size();
    cfg.d_emb = 32;
    cfg.n_layers = 3;
    cfg.n_heads = 4;
    cfg.seed = 8;
    LmModel m = LmModel::init(cfg);
    auto r1 = probe_all_layers(m, docs, 3);
    auto r2 = probe_all_layers(m, docs, 3);
    CHECK(r1.selected_layer == r2.selected_layer);
    REQUIRE(r1.rows.size() == 3);
    for (size_t i = 0; i < r1.rows.size(); ++i) {
        CHECK(r1.rows[i].val_acc == r2.rows[i].val_acc);
        CHECK(r1.rows[i].val_acc >= 0.0);
        CHECK(r1.rows[i].val_acc <= 100.0);
    }
}
