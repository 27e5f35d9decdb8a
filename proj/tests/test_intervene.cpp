#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "piilab/intervene.hpp"

using namespace piilab;

namespace {

SaeParams tiny_sae(uint64_t seed, int d = 4, int h = 8, int k = 3) {
    Rng rng(seed);
    SaeParams p;
    p.h = h;
    p.k = k;
    p.k_aux = 2;
    p.w_enc = Tensor::randn({h, d}, rng, 0.8);
    p.w_dec = Tensor::randn({d, h}, rng, 0.8);
    p.b_pre = Tensor::randn({d}, rng, 0.5);
    return p;
}

}  // namespace

TEST_CASE("ablate: zeroing, identity, and bounds") {
    Tensor z = Tensor::from({4}, {5, 0, 2, 7});
    CHECK(ablate(z, {0, 3}).data == std::vector<double>{0, 0, 2, 0});
    CHECK(ablate(z, {}).data == z.data);
    CHECK_THROWS_AS(ablate(z, {4}), ParamError);
    CHECK_THROWS_AS(ablate(z, {-1}), ParamError);
}

TEST_CASE("ablate all active latents, then decode, returns the pre-encoder bias") {
    SaeParams p = tiny_sae(5);
    Rng rng(7);
    Tensor a = Tensor::randn({4}, rng, 1.0);
    Tensor z = encode(p, a);
    std::vector<int> all_idx(p.h);
    for (int i = 0; i < p.h; ++i) all_idx[i] = i;
    Tensor wiped = ablate(z, all_idx);
    CHECK(decode(p, wiped).data == p.b_pre.data);
}

TEST_CASE("steer: alpha 0 is identity; inactive slots untouched") {
    Tensor z = Tensor::from({2}, {2, 0});
    Tensor v = Tensor::from({2}, {1, 1});
    CHECK(steer(z, v, 0.0).data == z.data);
    CHECK(steer(z, v, -1.0).data == std::vector<double>{1, 0});

    Rng rng(11);
    for (int trial = 0; trial < 200; ++trial) {
        const int h = 1 + rng.below_int(16);
        Tensor zz = Tensor::zeros({h});
        for (int i = 0; i < h; ++i)
            if (rng.uniform01() < 0.4) zz.data[i] = rng.uniform(-2, 2);
        Tensor vv = Tensor::randn({h}, rng, 1.0);
        const double alpha = rng.uniform(-3, 3);
        Tensor out = steer(zz, vv, alpha);
        for (int i = 0; i < h; ++i) {
            if (zz.data[i] == 0.0)
                CHECK(out.data[i] == 0.0);  // support never grows
            else
                CHECK(out.data[i] == zz.data[i] + alpha * vv.data[i]);
        }
    }
}

TEST_CASE("build_steering_vector: mean-diff arithmetic, probe norms, top-k support") {
    std::vector<Tensor> feats{Tensor::from({2}, {1, 0}), Tensor::from({2}, {3, 0}), Tensor::from({2}, {0, 2}),
                              Tensor::from({2}, {0, 4})};
    std::vector<int> labels{1, 1, 0, 0};
    SteeringVector md = build_steering_vector(SteeringVector::Source::MeanDiff, feats, labels);
    CHECK(md.v.data == std::vector<double>{2, -3});

    // Probe-sourced vectors have unit norm.
    Rng rng(3);
    std::vector<Tensor> f2;
    std::vector<int> l2;
    for (int i = 0; i < 80; ++i) {
        Tensor f = Tensor::randn({12}, rng, 1.0);
        const int label = i % 2;
        if (label) f.data[3] += 3.0;
        f2.push_back(std::move(f));
        l2.push_back(label);
    }
    SteeringVector pv = build_steering_vector(SteeringVector::Source::Probe, f2, l2, nullptr, 9);
    CHECK(std::abs(pv.norm() - 1.0) < 1e-12);

    // Top-k probe vectors are zero outside their support and unit over it.
    std::vector<int> topk{3, 7, 9};
    SteeringVector tv = build_steering_vector(SteeringVector::Source::TopkProbe, f2, l2, &topk, 9);
    CHECK(std::abs(tv.norm() - 1.0) < 1e-12);
    for (int j = 0; j < 12; ++j) {
        if (j != 3 && j != 7 && j != 9) CHECK(tv.v.data[j] == 0.0);
    }

    CHECK_THROWS_AS(build_steering_vector(SteeringVector::Source::TopkProbe, f2, l2, nullptr, 9), ConfigError);
    std::vector<int> ones(labels.size(), 1);
    CHECK_THROWS_AS(build_steering_vector(SteeringVector::Source::MeanDiff, feats, ones), DataError);
}

TEST_CASE("make_interventor: pure SAE splice equals decode(encode(.))") {
    SaeParams p = tiny_sae(13);
    InterventionSpec spec;
    spec.method = Method::None;
    spec.use_sae = true;
    spec.layer = 0;
    Interventor iv = make_interventor(spec, &p);
    Rng rng(17);
    for (int trial = 0; trial < 50; ++trial) {
        Tensor a = Tensor::randn({4}, rng, 1.2);
        CHECK(iv.fn(a.data) == decode(p, encode(p, a)).data);
    }
}

TEST_CASE("make_interventor: identity without SAE, b_pre under full ablation") {
    InterventionSpec none;
    none.method = Method::None;
    none.use_sae = false;
    none.layer = 1;
    Interventor id = make_interventor(none);
    std::vector<double> a{0.5, -1.0, 2.0, 0.0};
    CHECK(id.fn(a) == a);

    SaeParams p = tiny_sae(19);
    FeatureRanking r;
    for (int i = 0; i < p.h; ++i) r.entries.emplace_back(i, static_cast<double>(p.h - i));
    InterventionSpec full;
    full.method = Method::Ablation;
    full.k = p.h;
    full.use_sae = true;
    full.layer = 0;
    Interventor wipe = make_interventor(full, &p, nullptr, &r);
    Rng rng(23);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor x = Tensor::randn({4}, rng, 1.0);
        CHECK(wipe.fn(x.data) == p.b_pre.data);
    }
}

TEST_CASE("make_interventor: configuration errors") {
    InterventionSpec spec;
    spec.method = Method::Ablation;
    spec.k = 4;
    spec.use_sae = true;
    spec.layer = 0;
    CHECK_THROWS_AS(make_interventor(spec, nullptr), ConfigError);  // missing SAE

    SaeParams p = tiny_sae(29);
    CHECK_THROWS_AS(make_interventor(spec, &p), ConfigError);  // missing ranking

    InterventionSpec steer_spec;
    steer_spec.method = Method::SteerProbe;
    steer_spec.layer = 0;
    steer_spec.alpha = -2.0;
    CHECK_THROWS_AS(make_interventor(steer_spec, nullptr, nullptr), ConfigError);  // missing vector

    InterventionSpec no_k;
    no_k.method = Method::Ablation;
    no_k.layer = 0;
    CHECK_THROWS_AS(make_interventor(no_k), ConfigError);

    InterventionSpec no_alpha;
    no_alpha.method = Method::SteerMeanDiff;
    no_alpha.layer = 0;
    CHECK_THROWS_AS(make_interventor(no_alpha), ConfigError);
}

TEST_CASE("generate with identity-style interventors matches baseline bit-exactly") {
    Vocab vocab = build_vocab();
    LmConfig cfg;
    cfg.vocab_size = vocab.size();
    cfg.d_emb = 32;
    cfg.n_layers = 2;
    cfg.n_heads = 4;
    cfg.seed = 31;
    LmModel m = LmModel::init(cfg);
    std::vector<int> prompt = vocab.tokenize("The email address of Karen Arnold is");
    prompt.insert(prompt.begin(), vocab.bos);
    auto baseline = generate(m, prompt, 10, nullptr, vocab.eos);

    InterventionSpec none;
    none.method = Method::None;
    none.use_sae = false;
    none.layer = 1;
    Interventor id = make_interventor(none);
    CHECK(generate(m, prompt, 10, &id, vocab.eos) == baseline);
}
