#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "piilab/common.hpp"
#include "piilab/lm.hpp"

namespace piilab {

// Residual activations harvested from one layer, persisted so probe and SAE
// training can iterate without re-running the model. Records are fixed-width
// and ordered (doc order, then token order); vectors live in one flat array.
struct ActCache {
    int layer = -1;
    int d_emb = 0;
    std::vector<int> doc_ids;        // per record
    std::vector<int> token_indices;  // per record
    std::vector<double> data;        // n_records x d_emb
    std::map<int, std::pair<int, int>> doc_index;  // doc_id -> [first, last) record
    std::string model_hash;
    std::string corpus_hash;

    int64_t count() const { return static_cast<int64_t>(doc_ids.size()); }

    const double* record(int64_t i) const { return &data[static_cast<size_t>(i) * d_emb]; }

    Tensor record_tensor(int64_t i) const {
        Tensor t({d_emb});
        std::copy(record(i), record(i) + d_emb, t.data.begin());
        return t;
    }
};

inline ActCache harvest(const LmModel& model, const std::vector<CorpusDoc>& docs, int layer) {
    if (layer < 0 || layer >= model.cfg.n_layers)
        throw InputError("harvest: layer " + std::to_string(layer) + " out of range");
    ActCache cache;
    cache.layer = layer;
    cache.d_emb = model.cfg.d_emb;
    for (const auto& doc : docs) {
        if (static_cast<int>(doc.tokens.size()) > model.cfg.context_length)
            throw InputError("harvest: doc " + std::to_string(doc.id) + " exceeds context length");
        auto hooked = forward_with_hooks(model, doc.tokens, {layer});
        const auto& rows = hooked.activations.at(layer);
        const int first = static_cast<int>(cache.count());
        for (size_t t = 0; t < rows.size(); ++t) {
            cache.doc_ids.push_back(doc.id);
            cache.token_indices.push_back(static_cast<int>(t));
            cache.data.insert(cache.data.end(), rows[t].data.begin(), rows[t].data.end());
        }
        cache.doc_index[doc.id] = {first, static_cast<int>(cache.count())};
    }
    return cache;
}

// Arithmetic mean of a doc's per-token vectors.
inline Tensor mean_pool(const ActCache& cache, int doc_id) {
    auto it = cache.doc_index.find(doc_id);
    if (it == cache.doc_index.end()) throw LookupError("mean_pool: unknown doc id " + std::to_string(doc_id));
    const auto [first, last] = it->second;
    Tensor out({cache.d_emb});
    for (int r = first; r < last; ++r) {
        const double* v = cache.record(r);
        for (int j = 0; j < cache.d_emb; ++j) out.data[j] += v[j];
    }
    const double inv = 1.0 / (last - first);
    for (auto& v : out.data) v *= inv;
    return out;
}

// Deterministic shuffled batches; every record appears exactly once per pass.
class BatchStream {
public:
    BatchStream(const ActCache& cache, int batch_size, uint64_t shuffle_seed) : cache_(cache), batch_(batch_size) {
        if (batch_size < 1) throw ParamError("stream_batches: batch_size must be >= 1");
        order_.resize(cache.count());
        for (int64_t i = 0; i < cache.count(); ++i) order_[i] = i;
        Rng rng(mix_seed(shuffle_seed, 0xBA7C4));
        rng.shuffle(order_);
    }

    std::optional<Tensor> next() {
        if (pos_ >= static_cast<int64_t>(order_.size())) return std::nullopt;
        const int64_t take = std::min<int64_t>(batch_, static_cast<int64_t>(order_.size()) - pos_);
        Tensor out({static_cast<int>(take), cache_.d_emb});
        for (int64_t i = 0; i < take; ++i) {
            const double* src = cache_.record(order_[pos_ + i]);
            std::copy(src, src + cache_.d_emb, out.data.begin() + i * cache_.d_emb);
        }
        pos_ += take;
        return out;
    }

    const std::vector<int64_t>& order() const { return order_; }

private:
    const ActCache& cache_;
    int batch_;
    int64_t pos_ = 0;
    std::vector<int64_t> order_;
};

inline BatchStream stream_batches(const ActCache& cache, int batch_size, uint64_t shuffle_seed) {
    return BatchStream(cache, batch_size, shuffle_seed);
}

// ---------------------------- .actcache file -------------------------------
// JSON-line header, then fixed-width binary records:
//   doc_id (u32) | token_index (u32) | d_emb doubles (little-endian)

inline void write_actcache(const std::string& path, const ActCache& cache) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    nlohmann::json header{{"layer", cache.layer},
                          {"d_emb", cache.d_emb},
                          {"count", cache.count()},
                          {"model_hash", cache.model_hash},
                          {"corpus_hash", cache.corpus_hash}};
    out << header.dump() << '\n';
    for (int64_t i = 0; i < cache.count(); ++i) {
        const uint32_t doc = static_cast<uint32_t>(cache.doc_ids[i]);
        const uint32_t tok = static_cast<uint32_t>(cache.token_indices[i]);
        out.write(reinterpret_cast<const char*>(&doc), 4);
        out.write(reinterpret_cast<const char*>(&tok), 4);
        out.write(reinterpret_cast<const char*>(cache.record(i)), static_cast<std::streamsize>(8) * cache.d_emb);
    }
    if (!out) throw IoError("short write on " + path);
}

inline ActCache read_actcache(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path);
    std::string header_line;
    std::getline(in, header_line);
    const auto header = nlohmann::json::parse(header_line);
    ActCache cache;
    cache.layer = header.at("layer").get<int>();
    cache.d_emb = header.at("d_emb").get<int>();
    cache.model_hash = header.value("model_hash", "");
    cache.corpus_hash = header.value("corpus_hash", "");
    const int64_t count = header.at("count").get<int64_t>();
    cache.doc_ids.resize(count);
    cache.token_indices.resize(count);
    cache.data.resize(count * cache.d_emb);
    for (int64_t i = 0; i < count; ++i) {
        uint32_t doc = 0, tok = 0;
        in.read(reinterpret_cast<char*>(&doc), 4);
        in.read(reinterpret_cast<char*>(&tok), 4);
        in.read(reinterpret_cast<char*>(&cache.data[static_cast<size_t>(i) * cache.d_emb]),
                static_cast<std::streamsize>(8) * cache.d_emb);
        cache.doc_ids[i] = static_cast<int>(doc);
        cache.token_indices[i] = static_cast<int>(tok);
    }
    if (!in) throw IoError("truncated actcache " + path);
    // Rebuild the doc index from record order.
    for (int64_t i = 0; i < count; ++i) {
        auto [it, fresh] = cache.doc_index.try_emplace(cache.doc_ids[i], static_cast<int>(i), static_cast<int>(i + 1));
        if (!fresh) it->second.second = static_cast<int>(i + 1);
    }
    return cache;
}

}  // namespace piilab
