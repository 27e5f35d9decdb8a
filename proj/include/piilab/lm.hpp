#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "piilab/common.hpp"
#include "piilab/corpus.hpp"
#include "piilab/serialize.hpp"
#include "piilab/tensor.hpp"

namespace piilab {

// ---------------------------------------------------------------------------
// Small decoder-only transformer: pre-norm blocks, learned positional
// embeddings, weight-tied unembedding. The residual stream after every block
// is a hook point that can be read (harvesting) or rewritten (interventions).
// ---------------------------------------------------------------------------

struct LmConfig {
    int vocab_size = 0;
    int d_emb = 64;
    int n_layers = 6;
    int n_heads = 4;
    int context_length = 64;
    uint64_t seed = 0;

    void validate() const {
        if (vocab_size < 2) throw ParamError("LmConfig: vocab_size must be >= 2");
        if (d_emb % n_heads != 0) throw ParamError("LmConfig: d_emb must be divisible by n_heads");
        if (n_layers < 1) throw ParamError("LmConfig: need at least one layer");
    }
};

struct ResidualActivation {
    int layer = -1;
    int token_index = -1;
    Tensor vector;  // [d_emb]
};

// Per-step rewrite of the residual stream at one layer. During generation the
// callback sees the last token's vector at each timestep before the remaining
// blocks run; prefix_mode extends it to every position (experimental, off by
// default).
struct Interventor {
    int layer = -1;
    std::function<std::vector<double>(const std::vector<double>&)> fn;
    bool prefix_mode = false;

    bool active() const { return layer >= 0 && static_cast<bool>(fn); }
};

struct LmModel {
    LmConfig cfg;
    Tensor tok_emb;  // [V x d], tied unembedding
    Tensor pos_emb;  // [ctx x d]
    struct Block {
        Tensor ln1_g, ln1_b, wq, wk, wv, wo;
        Tensor ln2_g, ln2_b, w1, b1, w2, b2;
    };
    std::vector<Block> blocks;
    Tensor lnf_g, lnf_b;

    static LmModel init(const LmConfig& cfg) {
        cfg.validate();
        LmModel m;
        m.cfg = cfg;
        Rng rng(mix_seed(cfg.seed, 0x11A1));
        const int d = cfg.d_emb, hidden = 4 * cfg.d_emb;
        const double w_std = 0.05;
        m.tok_emb = Tensor::randn({cfg.vocab_size, d}, rng, w_std);
        m.pos_emb = Tensor::randn({cfg.context_length, d}, rng, w_std);
        m.blocks.resize(cfg.n_layers);
        for (auto& b : m.blocks) {
            b.ln1_g = Tensor::from({d}, std::vector<double>(d, 1.0));
            b.ln1_b = Tensor::zeros({d});
            b.wq = Tensor::randn({d, d}, rng, w_std);
            b.wk = Tensor::randn({d, d}, rng, w_std);
            b.wv = Tensor::randn({d, d}, rng, w_std);
            b.wo = Tensor::randn({d, d}, rng, w_std);
            b.ln2_g = Tensor::from({d}, std::vector<double>(d, 1.0));
            b.ln2_b = Tensor::zeros({d});
            b.w1 = Tensor::randn({d, hidden}, rng, w_std);
            b.b1 = Tensor::zeros({hidden});
            b.w2 = Tensor::randn({hidden, d}, rng, w_std);
            b.b2 = Tensor::zeros({d});
        }
        m.lnf_g = Tensor::from({d}, std::vector<double>(d, 1.0));
        m.lnf_b = Tensor::zeros({d});
        return m;
    }

    std::vector<std::pair<std::string, Tensor*>> named_params() {
        std::vector<std::pair<std::string, Tensor*>> out;
        out.emplace_back("tok_emb", &tok_emb);
        out.emplace_back("pos_emb", &pos_emb);
        for (size_t l = 0; l < blocks.size(); ++l) {
            auto& b = blocks[l];
            const std::string p = "block" + std::to_string(l) + ".";
            out.emplace_back(p + "ln1_g", &b.ln1_g);
            out.emplace_back(p + "ln1_b", &b.ln1_b);
            out.emplace_back(p + "wq", &b.wq);
            out.emplace_back(p + "wk", &b.wk);
            out.emplace_back(p + "wv", &b.wv);
            out.emplace_back(p + "wo", &b.wo);
            out.emplace_back(p + "ln2_g", &b.ln2_g);
            out.emplace_back(p + "ln2_b", &b.ln2_b);
            out.emplace_back(p + "w1", &b.w1);
            out.emplace_back(p + "b1", &b.b1);
            out.emplace_back(p + "w2", &b.w2);
            out.emplace_back(p + "b2", &b.b2);
        }
        out.emplace_back("lnf_g", &lnf_g);
        out.emplace_back("lnf_b", &lnf_b);
        return out;
    }

    std::vector<Tensor*> params() {
        std::vector<Tensor*> out;
        for (auto& [name, t] : named_params()) out.push_back(t);
        return out;
    }
};

// ------------------------------ raw forward --------------------------------
// No-grad path used for harvesting, evaluation, and generation. Shares the
// kernels with the training graph, so values agree bit-exactly.

namespace lmdetail {

inline void check_tokens(const LmModel& m, const std::vector<int>& tokens) {
    if (static_cast<int>(tokens.size()) > m.cfg.context_length)
        throw InputError("sequence length " + std::to_string(tokens.size()) + " exceeds context " +
                         std::to_string(m.cfg.context_length));
    for (int t : tokens)
        if (t < 0 || t >= m.cfg.vocab_size) throw InputError("token id " + std::to_string(t) + " out of vocab");
}

// x: [T x d] residual stream, updated in place by one block. Mirrors the
// training-graph op sequence exactly so values agree bit-for-bit with it.
inline void block_forward_raw(const LmModel::Block& b, int n_heads, Tensor& x) {
    const int t = x.rows(), d = x.cols(), hd = d / n_heads;
    Tensor h({t, d});
    for (int i = 0; i < t; ++i)
        kern::layernorm_row(&x.data[static_cast<size_t>(i) * d], d, b.ln1_g.data.data(), b.ln1_b.data.data(),
                            &h.data[static_cast<size_t>(i) * d], nullptr, nullptr);
    Tensor q({t, d}), k({t, d}), v({t, d});
    kern::gemm(t, d, d, h.data.data(), b.wq.data.data(), q.data.data(), false, false, false);
    kern::gemm(t, d, d, h.data.data(), b.wk.data.data(), k.data.data(), false, false, false);
    kern::gemm(t, d, d, h.data.data(), b.wv.data.data(), v.data.data(), false, false, false);
    Tensor mix({t, d});
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
    Tensor qh({t, hd}), kh({t, hd}), vh({t, hd}), scores({t, t}), probs({t, t}), mixh({t, hd});
    for (int head = 0; head < n_heads; ++head) {
        const int off = head * hd;
        for (int i = 0; i < t; ++i)
            for (int p = 0; p < hd; ++p) {
                qh.at(i, p) = q.at(i, off + p);
                kh.at(i, p) = k.at(i, off + p);
                vh.at(i, p) = v.at(i, off + p);
            }
        kern::gemm(t, t, hd, qh.data.data(), kh.data.data(), scores.data.data(), false, true, false);
        for (auto& s : scores.data) s *= inv_sqrt;
        kern::causal_softmax_rows(scores.data.data(), t, probs.data.data());
        kern::gemm(t, hd, t, probs.data.data(), vh.data.data(), mixh.data.data(), false, false, false);
        for (int i = 0; i < t; ++i)
            for (int p = 0; p < hd; ++p) mix.at(i, off + p) = mixh.at(i, p);
    }
    Tensor attn({t, d});
    kern::gemm(t, d, d, mix.data.data(), b.wo.data.data(), attn.data.data(), false, false, false);
    for (size_t i = 0; i < x.data.size(); ++i) x.data[i] += attn.data[i];

    Tensor h2({t, d});
    for (int i = 0; i < t; ++i)
        kern::layernorm_row(&x.data[static_cast<size_t>(i) * d], d, b.ln2_g.data.data(), b.ln2_b.data.data(),
                            &h2.data[static_cast<size_t>(i) * d], nullptr, nullptr);
    const int hidden = b.w1.cols();
    Tensor act({t, hidden});
    kern::gemm(t, hidden, d, h2.data.data(), b.w1.data.data(), act.data.data(), false, false, false);
    for (int i = 0; i < t; ++i)
        for (int j = 0; j < hidden; ++j)
            act.at(i, j) = kern::gelu_one(act.at(i, j) + b.b1.data[j]);
    Tensor mlp({t, d});
    kern::gemm(t, d, hidden, act.data.data(), b.w2.data.data(), mlp.data.data(), false, false, false);
    for (int i = 0; i < t; ++i)
        for (int j = 0; j < d; ++j) x.at(i, j) += mlp.at(i, j) + b.b2.data[j];
}

}  // namespace lmdetail

// Forward pass capturing the post-block residual stream at requested layers.
// Registering hooks never changes the logits.
inline Tensor lm_forward(const LmModel& m, const std::vector<int>& tokens,
                         const std::vector<int>* hook_layers = nullptr,
                         std::map<int, std::vector<Tensor>>* captured = nullptr,
                         const Interventor* iv = nullptr) {
    lmdetail::check_tokens(m, tokens);
    const int t = static_cast<int>(tokens.size()), d = m.cfg.d_emb;
    if (t == 0) throw InputError("empty token sequence");
    Tensor x({t, d});
    for (int i = 0; i < t; ++i)
        for (int j = 0; j < d; ++j)
            x.at(i, j) = m.tok_emb.at(tokens[i], j) + m.pos_emb.at(i, j);
    for (int l = 0; l < m.cfg.n_layers; ++l) {
        lmdetail::block_forward_raw(m.blocks[l], m.cfg.n_heads, x);
        if (iv && iv->active() && iv->layer == l) {
            const int row0 = iv->prefix_mode ? 0 : t - 1;
            for (int i = row0; i < t; ++i) {
                std::vector<double> in(x.data.begin() + static_cast<size_t>(i) * d,
                                       x.data.begin() + static_cast<size_t>(i + 1) * d);
                std::vector<double> out = iv->fn(in);
                if (static_cast<int>(out.size()) != d) throw ShapeError("interventor returned wrong width");
                std::copy(out.begin(), out.end(), x.data.begin() + static_cast<size_t>(i) * d);
            }
        }
        if (hook_layers && captured) {
            for (int hl : *hook_layers) {
                if (hl == l) {
                    auto& rows = (*captured)[l];
                    for (int i = 0; i < t; ++i) {
                        Tensor row({d});
                        std::copy(x.data.begin() + static_cast<size_t>(i) * d,
                                  x.data.begin() + static_cast<size_t>(i + 1) * d, row.data.begin());
                        rows.push_back(std::move(row));
                    }
                }
            }
        }
    }
    Tensor h({t, d});
    for (int i = 0; i < t; ++i)
        kern::layernorm_row(&x.data[static_cast<size_t>(i) * d], d, m.lnf_g.data.data(), m.lnf_b.data.data(),
                            &h.data[static_cast<size_t>(i) * d], nullptr, nullptr);
    Tensor logits({t, m.cfg.vocab_size});
    kern::gemm(t, m.cfg.vocab_size, d, h.data.data(), m.tok_emb.data.data(), logits.data.data(), false, true,
               false);
    return logits;
}

struct HookedForward {
    Tensor logits;
    std::map<int, std::vector<Tensor>> activations;  // layer -> per-token vectors
};

inline HookedForward forward_with_hooks(const LmModel& m, const std::vector<int>& tokens,
                                        const std::vector<int>& hook_layers) {
    for (int l : hook_layers)
        if (l < 0 || l >= m.cfg.n_layers) throw InputError("hook layer " + std::to_string(l) + " out of range");
    HookedForward out;
    out.logits = lm_forward(m, tokens, &hook_layers, &out.activations, nullptr);
    return out;
}

// Greedy decoding; ties resolve to the lowest token id. Stops early at <eos>
// when `eos_id` >= 0. Returns only the continuation.
inline std::vector<int> generate(const LmModel& m, const std::vector<int>& prompt_tokens, int max_new,
                                 const Interventor* iv = nullptr, int eos_id = -1) {
    lmdetail::check_tokens(m, prompt_tokens);
    std::vector<int> seq = prompt_tokens;
    std::vector<int> continuation;
    for (int step = 0; step < max_new; ++step) {
        // Crop to the most recent context window.
        std::vector<int> window = seq;
        if (static_cast<int>(window.size()) > m.cfg.context_length)
            window.assign(seq.end() - m.cfg.context_length, seq.end());
        Tensor logits = lm_forward(m, window, nullptr, nullptr, iv);
        const int t = logits.rows(), v = logits.cols();
        const double* last = &logits.data[static_cast<size_t>(t - 1) * v];
        int best = 0;
        for (int j = 1; j < v; ++j)
            if (last[j] > last[best]) best = j;
        seq.push_back(best);
        continuation.push_back(best);
        if (best == eos_id) break;
    }
    return continuation;
}

// ------------------------------ training -----------------------------------

namespace lmdetail {

// Training-graph forward for one document; returns per-position mean CE.
inline Var doc_loss(Tape& tape, const std::vector<Var>& pv, const LmConfig& cfg, const std::vector<int>& tokens) {
    // pv layout must match LmModel::named_params order.
    const int d = cfg.d_emb;
    const int t = static_cast<int>(tokens.size()) - 1;
    std::vector<int> inputs(tokens.begin(), tokens.end() - 1);
    std::vector<int> targets(tokens.begin() + 1, tokens.end());
    std::vector<int> positions(t);
    for (int i = 0; i < t; ++i) positions[i] = i;

    size_t pi = 0;
    Var tok_emb = pv[pi++], pos_emb = pv[pi++];
    Var x = add(tape, embed_rows(tape, tok_emb, inputs), embed_rows(tape, pos_emb, positions));
    for (int l = 0; l < cfg.n_layers; ++l) {
        Var ln1_g = pv[pi++], ln1_b = pv[pi++], wq = pv[pi++], wk = pv[pi++], wv_ = pv[pi++], wo = pv[pi++];
        Var ln2_g = pv[pi++], ln2_b = pv[pi++], w1 = pv[pi++], b1 = pv[pi++], w2 = pv[pi++], b2 = pv[pi++];
        Var h = layernorm(tape, x, ln1_g, ln1_b);
        Var q = matmul(tape, h, wq), k = matmul(tape, h, wk), vv = matmul(tape, h, wv_);
        const int hd = d / cfg.n_heads;
        std::vector<Var> heads;
        for (int head = 0; head < cfg.n_heads; ++head) {
            Var qh = slice_cols(tape, q, head * hd, (head + 1) * hd);
            Var kh = slice_cols(tape, k, head * hd, (head + 1) * hd);
            Var vh = slice_cols(tape, vv, head * hd, (head + 1) * hd);
            Var scores = scale(tape, matmul_nt(tape, qh, kh), 1.0 / std::sqrt(double(hd)));
            Var probs = causal_softmax(tape, scores);
            heads.push_back(matmul(tape, probs, vh));
        }
        Var mix = concat_cols(tape, heads);
        x = add(tape, x, matmul(tape, mix, wo));
        Var h2 = layernorm(tape, x, ln2_g, ln2_b);
        Var act = gelu(tape, add_row(tape, matmul(tape, h2, w1), b1));
        x = add(tape, x, add_row(tape, matmul(tape, act, w2), b2));
    }
    Var lnf_g = pv[pi++], lnf_b = pv[pi++];
    Var h = layernorm(tape, x, lnf_g, lnf_b);
    Var logits = matmul_nt(tape, h, tok_emb);
    return cross_entropy_mean(tape, logits, targets);
}

}  // namespace lmdetail

// Mean next-token cross entropy of the model over docs (no-grad path).
inline double lm_corpus_loss(const LmModel& m, const std::vector<CorpusDoc>& docs) {
    double total = 0.0;
    int64_t count = 0;
    for (const auto& doc : docs) {
        const int t = static_cast<int>(doc.tokens.size()) - 1;
        if (t < 1) continue;
        std::vector<int> inputs(doc.tokens.begin(), doc.tokens.end() - 1);
        Tensor logits = lm_forward(m, inputs);
        const int v = logits.cols();
        for (int i = 0; i < t; ++i) {
            const double* row = &logits.data[static_cast<size_t>(i) * v];
            double mx = row[0];
            for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
            double z = 0.0;
            for (int j = 0; j < v; ++j) z += std::exp(row[j] - mx);
            total += mx + std::log(z) - row[doc.tokens[i + 1]];
            ++count;
        }
    }
    return count ? total / count : 0.0;
}

struct TrainLmOptions {
    int epochs = 8;
    int batch_docs = 16;
    double lr = 2e-3;
    double clip = 1.0;
    uint64_t seed = 0;
};

struct TrainLmLog {
    double init_heldout_loss = 0.0;
    std::vector<double> epoch_train_loss;
    std::vector<double> epoch_heldout_loss;
};

inline LmModel train_lm(const LmConfig& cfg, const std::vector<CorpusDoc>& train_corpus,
                        const std::vector<CorpusDoc>& heldout, const TrainLmOptions& opt,
                        TrainLmLog* log = nullptr) {
    if (train_corpus.empty()) throw ParamError("train_lm: empty corpus");
    LmModel m = LmModel::init(cfg);
    auto params = m.params();
    std::vector<AdamState> states;
    states.reserve(params.size());
    for (Tensor* p : params) states.push_back(AdamState::for_param(*p, opt.lr));

    if (log) log->init_heldout_loss = lm_corpus_loss(m, heldout);

    Rng shuffler(mix_seed(opt.seed, 0x7121));
    std::vector<int> order(train_corpus.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

    int64_t step = 0;
    for (int epoch = 0; epoch < opt.epochs; ++epoch) {
        shuffler.shuffle(order);
        double epoch_loss = 0.0;
        int64_t epoch_batches = 0;
        for (size_t start = 0; start < order.size(); start += opt.batch_docs) {
            const size_t end = std::min(order.size(), start + opt.batch_docs);
            Tape tape;
            std::vector<Var> pv;
            pv.reserve(params.size());
            for (Tensor* p : params) pv.push_back(tape.param(*p));
            // Token-weighted mean over the batch.
            int64_t total_targets = 0;
            for (size_t i = start; i < end; ++i) total_targets += train_corpus[order[i]].tokens.size() - 1;
            Var loss{-1};
            for (size_t i = start; i < end; ++i) {
                const auto& doc = train_corpus[order[i]];
                Var dl = lmdetail::doc_loss(tape, pv, cfg, doc.tokens);
                Var weighted = scale(tape, dl, static_cast<double>(doc.tokens.size() - 1) / total_targets);
                loss = (loss.id < 0) ? weighted : add(tape, loss, weighted);
            }
            const double loss_value = tape.val(loss).data[0];
            if (!std::isfinite(loss_value))
                throw TrainingError("loss diverged (non-finite) at step " + std::to_string(step));
            tape.backward(loss);
            if (opt.clip > 0.0) clip_grad_norm(params, opt.clip);
            for (size_t i = 0; i < params.size(); ++i) adam_step(*params[i], states[i]);
            epoch_loss += loss_value;
            ++epoch_batches;
            ++step;
        }
        if (log) {
            log->epoch_train_loss.push_back(epoch_loss / std::max<int64_t>(1, epoch_batches));
            log->epoch_heldout_loss.push_back(lm_corpus_loss(m, heldout));
        }
    }
    return m;
}

// ------------------------------ checkpoints --------------------------------

inline void save_lm(const std::string& path, LmModel& m, const std::string& config_json) {
    std::vector<std::pair<std::string, const Tensor*>> tensors;
    for (auto& [name, t] : m.named_params()) tensors.emplace_back(name, t);
    ckpt::write(path, config_json, tensors);
}

inline std::string load_lm(const std::string& path, LmModel& m) {
    auto named = m.named_params();
    return ckpt::read(path, named);
}

}  // namespace piilab
