#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "piilab/actcache.hpp"

using namespace piilab;

namespace {

struct Fixture {
    Vocab vocab = build_vocab();
    std::vector<CorpusDoc> docs;
    LmModel model;

    Fixture() {
        auto subjects = generate_subjects(10, 3);
        docs = build_corpus(subjects, 12, 0.4, 3, vocab);
        LmConfig cfg;
        cfg.vocab_size = vocab.size();
        cfg.d_emb = 32;
        cfg.n_layers = 3;
        cfg.n_heads = 4;
        cfg.seed = 3;
        model = LmModel::init(cfg);
    }
};

}  // namespace

TEST_CASE("harvest: one record per (doc, token), matching hook output bit-exactly") {
    Fixture f;
    auto cache = harvest(f.model, f.docs, 1);
    int64_t expect = 0;
    for (const auto& d : f.docs) expect += static_cast<int64_t>(d.tokens.size());
    CHECK(cache.count() == expect);

    const auto& doc = f.docs[2];
    auto hooked = forward_with_hooks(f.model, doc.tokens, {1});
    const auto [first, last] = cache.doc_index.at(doc.id);
    REQUIRE(last - first == static_cast<int>(doc.tokens.size()));
    for (int t = 0; t < last - first; ++t)
        CHECK(cache.record_tensor(first + t).data == hooked.activations.at(1)[t].data);

    CHECK_THROWS_AS(harvest(f.model, f.docs, 99), InputError);
}

TEST_CASE("mean_pool: identity on single token, exact mean on pairs, oracle on docs") {
    ActCache c;
    c.layer = 0;
    c.d_emb = 2;
    c.doc_ids = {7, 8, 8};
    c.token_indices = {0, 0, 1};
    c.data = {5.0, -1.0, 1.0, 1.0, 3.0, 3.0};
    c.doc_index[7] = {0, 1};
    c.doc_index[8] = {1, 3};
    CHECK(mean_pool(c, 7).data == std::vector<double>{5.0, -1.0});
    CHECK(mean_pool(c, 8).data == std::vector<double>{2.0, 2.0});
    CHECK_THROWS_AS(mean_pool(c, 99), LookupError);

    Fixture f;
    auto cache = harvest(f.model, f.docs, 0);
    for (const auto& d : f.docs) {
        Tensor got = mean_pool(cache, d.id);
        // Naive summation oracle.
        const auto [first, last] = cache.doc_index.at(d.id);
        for (int j = 0; j < cache.d_emb; ++j) {
            double s = 0.0;
            for (int r = first; r < last; ++r) s += cache.record(r)[j];
            CHECK(std::abs(got.data[j] - s / (last - first)) < 1e-12);
        }
    }
}

TEST_CASE("stream_batches: sizes, coverage, determinism") {
    ActCache c;
    c.layer = 0;
    c.d_emb = 1;
    for (int i = 0; i < 10; ++i) {
        c.doc_ids.push_back(i);
        c.token_indices.push_back(0);
        c.data.push_back(static_cast<double>(i));
        c.doc_index[i] = {i, i + 1};
    }
    auto s = stream_batches(c, 4, 99);
    std::vector<int> sizes;
    std::multiset<double> seen;
    while (auto b = s.next()) {
        sizes.push_back(b->rows());
        for (double v : b->data) seen.insert(v);
    }
    CHECK(sizes == std::vector<int>{4, 4, 2});
    CHECK(seen == std::multiset<double>(c.data.begin(), c.data.end()));

    auto s1 = stream_batches(c, 3, 7);
    auto s2 = stream_batches(c, 3, 7);
    CHECK(s1.order() == s2.order());
    auto s3 = stream_batches(c, 3, 8);
    CHECK(s1.order() != s3.order());

    CHECK_THROWS_AS(stream_batches(c, 0, 1), ParamError);
}

TEST_CASE("actcache file: write-then-read round trip is bit-exact") {
    Fixture f;
    auto cache = harvest(f.model, f.docs, 2);
    cache.model_hash = "abc123";
    cache.corpus_hash = "def456";
    write_actcache("cache_tmp.actcache", cache);
    auto back = read_actcache("cache_tmp.actcache");
    CHECK(back.layer == cache.layer);
    CHECK(back.d_emb == cache.d_emb);
    CHECK(back.doc_ids == cache.doc_ids);
    CHECK(back.token_indices == cache.token_indices);
    CHECK(back.data == cache.data);
    CHECK(back.doc_index == cache.doc_index);
    CHECK(back.model_hash == "abc123");

    // Re-harvest and re-write: byte-identical file.
    auto cache2 = harvest(f.model, f.docs, 2);
    cache2.model_hash = cache.model_hash;
    cache2.corpus_hash = cache.corpus_hash;
    write_actcache("cache_tmp2.actcache", cache2);
    std::ifstream a("cache_tmp.actcache", std::ios::binary), b("cache_tmp2.actcache", std::ios::binary);
    std::string sa((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
    std::string sb((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
    CHECK(sa == sb);
    std::remove("cache_tmp.actcache");
    std::remove("cache_tmp2.actcache");
}

TEST_CASE("pooled vectors are storage-order invariant within tolerance") {
    Fixture f;
    auto cache = harvest(f.model, f.docs, 0);
    const int doc = f.docs[1].id;
    const auto [first, last] = cache.doc_index.at(doc);
    Tensor fwd = mean_pool(cache, doc);
    // Reverse the doc's records in place and pool again.
    ActCache rev = cache;
    for (int r = first, s = last - 1; r < s; ++r, --s)
        for (int j = 0; j < cache.d_emb; ++j)
            std::swap(rev.data[static_cast<size_t>(r) * cache.d_emb + j],
                      rev.data[static_cast<size_t>(s) * cache.d_emb + j]);
    Tensor bwd = mean_pool(rev, doc);
    for (int j = 0; j < cache.d_emb; ++j) CHECK(std::abs(fwd.data[j] - bwd.data[j]) < 1e-12);
}
