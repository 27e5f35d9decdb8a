#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "piilab/actcache.hpp"
#include "piilab/common.hpp"
#include "piilab/lm.hpp"
#include "piilab/tensor.hpp"

namespace piilab {

// ---------------------------------------------------------------------------
// k-sparse autoencoder over residual activations:
//   z     = TopK(W_enc (a - b_pre))
//   a_hat = W_dec z + b_pre
// trained on reconstruction MSE plus a small auxiliary term that reconstructs
// the residual error with the top inactive ("dead") latents, reviving them.
// ---------------------------------------------------------------------------

struct SaeConfig {
    int d_emb = 64;
    int h = 512;        // latent dimension (overcomplete)
    int k = 32;         // active latents per token
    int k_aux = 32;     // dead latents recruited by the aux loss
    double alpha_aux = 1.0 / 32.0;
    int64_t dead_threshold = 10000;  // tokens without firing before "dead"
    double lr = 1e-4;
    double clip = 1.0;
    int batch = 128;
    int epochs = 8;
    double heldout_fraction = 0.1;
    uint64_t seed = 0;

    void validate() const {
        if (h < d_emb) throw ParamError("SaeConfig: latent dim must be >= d_emb (overcomplete)");
        if (k < 1 || k > h) throw ParamError("SaeConfig: k outside [1, h]");
        if (k_aux < 1 || k_aux > h) throw ParamError("SaeConfig: k_aux outside [1, h]");
    }
};

struct SaeParams {
    Tensor w_enc;  // [h x d]
    Tensor w_dec;  // [d x h]
    Tensor b_pre;  // [d]
    int h = 0;
    int k = 0;
    int k_aux = 0;
    double alpha_aux = 0.0;
};

struct DeadLatentTracker {
    std::vector<int64_t> tokens_since_fire;
    int64_t threshold = 10000;

    explicit DeadLatentTracker(int h = 0, int64_t thr = 10000) : tokens_since_fire(h, 0), threshold(thr) {}

    bool dead(int i) const { return tokens_since_fire[i] >= threshold; }

    int64_t dead_count() const {
        int64_t n = 0;
        for (size_t i = 0; i < tokens_since_fire.size(); ++i) n += dead(static_cast<int>(i));
        return n;
    }

    std::vector<uint8_t> dead_mask() const {
        std::vector<uint8_t> m(tokens_since_fire.size(), 0);
        for (size_t i = 0; i < m.size(); ++i) m[i] = dead(static_cast<int>(i));
        return m;
    }

    // Batch update: latents firing anywhere in the batch reset; the rest age
    // by the number of tokens seen.
    void update(const Tensor& z_batch) {
        const int n = z_batch.rows(), h = z_batch.cols();
        std::vector<uint8_t> fired(h, 0);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < h; ++j)
                if (z_batch.at(i, j) != 0.0) fired[j] = 1;
        for (int j = 0; j < h; ++j) tokens_since_fire[j] = fired[j] ? 0 : tokens_since_fire[j] + n;
    }
};

// ------------------------------ inference ----------------------------------

inline Tensor encode_batch(const SaeParams& p, const Tensor& a) {
    const int n = a.rows(), d = a.cols();
    Tensor xc = a;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) xc.at(i, j) -= p.b_pre.data[j];
    Tensor z_pre({n, p.h});
    kern::gemm(n, p.h, d, xc.data.data(), p.w_enc.data.data(), z_pre.data.data(), false, true, false);
    Tensor z({n, p.h});
    std::vector<int> sel;
    for (int i = 0; i < n; ++i) {
        kern::topk_select(&z_pre.data[static_cast<size_t>(i) * p.h], p.h, p.k, nullptr, sel);
        for (int j : sel) z.at(i, j) = z_pre.at(i, j);
    }
    return z;
}

inline Tensor decode_batch(const SaeParams& p, const Tensor& z) {
    const int n = z.rows();
    Tensor out({n, static_cast<int>(p.b_pre.numel())});
    kern::gemm(n, out.cols(), p.h, z.data.data(), p.w_dec.data.data(), out.data.data(), false, true, false);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < out.cols(); ++j) out.at(i, j) += p.b_pre.data[j];
    return out;
}

// Single-vector forms (the spec-level encode/decode operations).
inline Tensor encode(const SaeParams& p, const Tensor& a) {
    if (a.numel() != p.b_pre.numel()) throw ShapeError("encode: input width " + a.shape_str());
    Tensor row({1, static_cast<int>(a.numel())});
    row.data = a.data;
    Tensor z = encode_batch(p, row);
    Tensor out({p.h});
    out.data = std::move(z.data);
    return out;
}

inline Tensor decode(const SaeParams& p, const Tensor& z) {
    if (z.numel() != p.h) throw ShapeError("decode: latent width " + z.shape_str());
    Tensor row({1, p.h});
    row.data = z.data;
    Tensor a = decode_batch(p, row);
    Tensor out({static_cast<int>(p.b_pre.numel())});
    out.data = std::move(a.data);
    return out;
}

// ------------------------------- training ----------------------------------

struct TrainSaeLog {
    double initial_mse = 0.0;
    double final_mse = 0.0;
    std::vector<double> epoch_mse;
    double heldout_fvu = 0.0;     // sum ||a-a_hat||^2 / sum ||a-b_pre||^2
    double dead_fraction = 0.0;   // at end of training
    int64_t steps = 0;
};

namespace saedetail {

inline void renormalize_decoder_columns(Tensor& w_dec) {
    const int d = w_dec.rows(), h = w_dec.cols();
    for (int j = 0; j < h; ++j) {
        double sq = 0.0;
        for (int i = 0; i < d; ++i) sq += w_dec.at(i, j) * w_dec.at(i, j);
        const double norm = std::sqrt(sq);
        if (norm > 0.0) {
            const double inv = 1.0 / norm;
            for (int i = 0; i < d; ++i) w_dec.at(i, j) *= inv;
        }
    }
}

inline double batch_mse(const SaeParams& p, const Tensor& batch) {
    Tensor z = encode_batch(p, batch);
    Tensor recon = decode_batch(p, z);
    double total = 0.0;
    for (size_t i = 0; i < batch.data.size(); ++i) {
        const double diff = batch.data[i] - recon.data[i];
        total += diff * diff;
    }
    return total / batch.rows();
}

}  // namespace saedetail

inline SaeParams train_sae(const ActCache& cache, const SaeConfig& cfg, TrainSaeLog* log = nullptr) {
    cfg.validate();
    if (cache.d_emb != cfg.d_emb)
        throw ShapeError("train_sae: cache width " + std::to_string(cache.d_emb) + " vs config d_emb " +
                         std::to_string(cfg.d_emb));
    if (cache.count() < 2) throw DataError("train_sae: cache too small");

    const int d = cfg.d_emb, h = cfg.h;
    const int64_t n = cache.count();

    // Deterministic held-out slice: every (1/fraction)-th record.
    const int64_t stride = cfg.heldout_fraction > 0.0
                               ? std::max<int64_t>(2, static_cast<int64_t>(std::llround(1.0 / cfg.heldout_fraction)))
                               : n + 1;
    std::vector<int64_t> train_idx, held_idx;
    for (int64_t i = 0; i < n; ++i) (i % stride == stride - 1 ? held_idx : train_idx).push_back(i);

    SaeParams p;
    p.h = h;
    p.k = cfg.k;
    p.k_aux = cfg.k_aux;
    p.alpha_aux = cfg.alpha_aux;
    // b_pre: mean cached activation. W_dec: transposed W_enc, renormalized.
    p.b_pre = Tensor::zeros({d});
    for (int64_t i : train_idx) {
        const double* r = cache.record(i);
        for (int j = 0; j < d; ++j) p.b_pre.data[j] += r[j];
    }
    for (auto& v : p.b_pre.data) v /= static_cast<double>(train_idx.size());
    Rng rng(mix_seed(cfg.seed, 0x5AE));
    p.w_enc = Tensor::randn({h, d}, rng, 1.0 / std::sqrt(static_cast<double>(d)));
    p.w_dec = Tensor({d, h});
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < h; ++j) p.w_dec.at(i, j) = p.w_enc.at(j, i);
    saedetail::renormalize_decoder_columns(p.w_dec);

    AdamState st_enc = AdamState::for_param(p.w_enc, cfg.lr);
    AdamState st_dec = AdamState::for_param(p.w_dec, cfg.lr);
    AdamState st_b = AdamState::for_param(p.b_pre, cfg.lr);
    DeadLatentTracker tracker(h, cfg.dead_threshold);

    auto gather = [&](const std::vector<int64_t>& idx, int64_t from, int64_t to) {
        Tensor batch({static_cast<int>(to - from), d});
        for (int64_t i = from; i < to; ++i) {
            const double* src = cache.record(idx[i]);
            std::copy(src, src + d, batch.data.begin() + static_cast<size_t>(i - from) * d);
        }
        return batch;
    };

    if (log && !train_idx.empty())
        log->initial_mse = saedetail::batch_mse(p, gather(train_idx, 0, std::min<int64_t>(512, train_idx.size())));

    int64_t step = 0;
    std::vector<int64_t> order = train_idx;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng shuffle_rng(mix_seed(cfg.seed, 0xE90C + epoch));
        shuffle_rng.shuffle(order);
        double epoch_mse_sum = 0.0;
        int64_t epoch_batches = 0;
        for (int64_t start = 0; start < static_cast<int64_t>(order.size()); start += cfg.batch) {
            const int64_t end = std::min<int64_t>(order.size(), start + cfg.batch);
            Tensor batch = gather(order, start, end);
            const int nb = batch.rows();

            const auto dead = tracker.dead_mask();
            const int64_t n_dead = std::count(dead.begin(), dead.end(), uint8_t{1});

            Tape tape;
            Var w_enc = tape.param(p.w_enc), w_dec = tape.param(p.w_dec), b_pre = tape.param(p.b_pre);
            Var x = tape.constant(batch);
            Var xc = sub_row(tape, x, b_pre);
            Var z_pre = matmul_nt(tape, xc, w_enc);
            Var z = topk_rows(tape, z_pre, cfg.k);
            Var recon = add_row(tape, matmul_nt(tape, z, w_dec), b_pre);
            Var diff = sub(tape, x, recon);
            Var mse = scale(tape, sqnorm(tape, diff), 1.0 / nb);
            Var total = mse;
            if (cfg.alpha_aux > 0.0 && n_dead > 0) {
                // Aux loss: reconstruct the (detached) residual error with the
                // top inactive latents only; no b_pre on this path.
                Var z_aux = topk_rows(tape, z_pre, std::min<int>(cfg.k_aux, static_cast<int>(n_dead)), &dead);
                Var e_hat = matmul_nt(tape, z_aux, w_dec);
                Var e_const = tape.constant(tape.val(diff));
                Var aux = scale(tape, sqnorm(tape, sub(tape, e_const, e_hat)), 1.0 / nb);
                total = add(tape, mse, scale(tape, aux, cfg.alpha_aux));
            }
            const double loss_value = tape.val(total).data[0];
            if (!std::isfinite(loss_value))
                throw TrainingError("sae loss diverged (non-finite) at step " + std::to_string(step));
            tape.backward(total);
            if (cfg.clip > 0.0) clip_grad_norm({&p.w_enc, &p.w_dec, &p.b_pre}, cfg.clip);
            adam_step(p.w_enc, st_enc);
            adam_step(p.w_dec, st_dec);
            adam_step(p.b_pre, st_b);
            saedetail::renormalize_decoder_columns(p.w_dec);
            tracker.update(tape.val(z));

            epoch_mse_sum += tape.val(mse).data[0];
            ++epoch_batches;
            ++step;
        }
        if (log) log->epoch_mse.push_back(epoch_mse_sum / std::max<int64_t>(1, epoch_batches));
    }

    if (log) {
        log->steps = step;
        log->final_mse = log->epoch_mse.empty() ? 0.0 : log->epoch_mse.back();
        log->dead_fraction = static_cast<double>(tracker.dead_count()) / h;
        // Fraction of variance unexplained on the held-out records.
        double num = 0.0, den = 0.0;
        if (!held_idx.empty()) {
            Tensor held = gather(held_idx, 0, static_cast<int64_t>(held_idx.size()));
            Tensor z = encode_batch(p, held);
            Tensor recon = decode_batch(p, z);
            for (int i = 0; i < held.rows(); ++i)
                for (int j = 0; j < d; ++j) {
                    const double e = held.at(i, j) - recon.at(i, j);
                    const double c = held.at(i, j) - p.b_pre.data[j];
                    num += e * e;
                    den += c * c;
                }
            log->heldout_fvu = den > 0.0 ? num / den : 0.0;
        }
    }
    return p;
}

// ------------------------------- ranking -----------------------------------

struct FeatureRanking {
    // (latent index, aggregate |activation|), sorted descending; ties break to
    // the lower index.
    std::vector<std::pair<int, double>> entries;

    std::vector<int> top_indices(int k) const {
        std::vector<int> out;
        for (int i = 0; i < k && i < static_cast<int>(entries.size()); ++i) out.push_back(entries[i].first);
        return out;
    }
};

namespace saedetail {

inline FeatureRanking rank_from_aggregates(std::vector<double> agg) {
    FeatureRanking r;
    r.entries.reserve(agg.size());
    for (size_t i = 0; i < agg.size(); ++i) r.entries.emplace_back(static_cast<int>(i), agg[i]);
    std::stable_sort(r.entries.begin(), r.entries.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    return r;
}

// Sum of |feature| over every email-span token of every ranking doc.
// `transform` maps a residual vector to the feature space being ranked.
template <typename Fn>
FeatureRanking rank_spans(const LmModel& model, const std::vector<CorpusDoc>& d_topk, int layer, int width,
                          Fn&& transform) {
    std::vector<double> agg(width, 0.0);
    for (const auto& doc : d_topk) {
        if (doc.email_start < 0 || doc.email_end < doc.email_start)
            throw DataError("rank: doc " + std::to_string(doc.id) + " lacks an email span");
        auto hooked = forward_with_hooks(model, doc.tokens, {layer});
        const auto& rows = hooked.activations.at(layer);
        for (int t = doc.email_start; t <= doc.email_end && t < static_cast<int>(rows.size()); ++t) {
            Tensor f = transform(rows[t]);
            for (int j = 0; j < width; ++j) agg[j] += std::abs(f.data[j]);
        }
    }
    return rank_from_aggregates(std::move(agg));
}

}  // namespace saedetail

// Latent-space ranking: encode email-span activations, aggregate magnitudes.
inline FeatureRanking rank_pii_features(const SaeParams& p, const LmModel& model,
                                        const std::vector<CorpusDoc>& d_topk, int layer) {
    return saedetail::rank_spans(model, d_topk, layer, p.h, [&](const Tensor& a) { return encode(p, a); });
}

// Residual-space analog used by the no-SAE baselines: same aggregation, raw
// coordinates instead of latents.
inline FeatureRanking rank_pii_neurons(const LmModel& model, const std::vector<CorpusDoc>& d_topk, int layer) {
    return saedetail::rank_spans(model, d_topk, layer, model.cfg.d_emb, [](const Tensor& a) { return a; });
}

// ------------------------------ persistence --------------------------------

inline void save_sae(const std::string& path, const SaeParams& p, const std::string& config_json) {
    ckpt::write(path, config_json, {{"w_enc", &p.w_enc}, {"w_dec", &p.w_dec}, {"b_pre", &p.b_pre}});
}

inline std::string load_sae(const std::string& path, SaeParams& p) {
    std::vector<std::pair<std::string, Tensor*>> tensors{{"w_enc", &p.w_enc}, {"w_dec", &p.w_dec}, {"b_pre", &p.b_pre}};
    std::string cfg = ckpt::read(path, tensors);
    p.h = p.w_enc.rows();
    return cfg;
}

inline void write_ranking(const std::string& path, const FeatureRanking& r) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    char buf[64];
    for (const auto& [idx, agg] : r.entries) {
        std::snprintf(buf, sizeof(buf), "%d\t%.17g\n", idx, agg);
        out << buf;
    }
}

inline FeatureRanking read_ranking(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path);
    FeatureRanking r;
    int idx;
    double agg;
    while (in >> idx >> agg) r.entries.emplace_back(idx, agg);
    return r;
}

}  // namespace piilab
