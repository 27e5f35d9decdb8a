#pragma once

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "piilab/actcache.hpp"
#include "piilab/common.hpp"
#include "piilab/lm.hpp"
#include "piilab/tensor.hpp"

namespace piilab {

// Linear probe p(x) = sigmoid(<theta, x> + b). The bias helps training but is
// excluded from steering directions; only theta is normalized and reused.
struct ProbeModel {
    enum class Space { Residual, LatentFull, LatentTopk };

    Tensor theta;  // [d]
    double bias = 0.0;
    Space space = Space::Residual;
    std::vector<int> topk_indices;  // ascending; LatentTopk only

    double logit(const Tensor& x) const {
        double z = bias;
        for (size_t i = 0; i < x.data.size(); ++i) z += theta.data[i] * x.data[i];
        return z;
    }
    bool predict(const Tensor& x) const { return logit(x) > 0.0; }
};

struct ProbeMetrics {
    double val_loss = 0.0;
    double val_acc = 0.0;  // percent
};

struct ProbeOptions {
    double lr = 0.2;
    int max_epochs = 600;
    int patience = 10;
    double train_fraction = 0.8;
};

// Full-batch logistic regression with early stopping on validation loss.
// The 80/20 split is deterministic under split_seed.
inline ProbeModel train_probe(const std::vector<Tensor>& features, const std::vector<int>& labels,
                              uint64_t split_seed, ProbeMetrics* metrics = nullptr,
                              const ProbeOptions& opt = {}) {
    if (features.size() != labels.size() || features.empty()) throw DataError("train_probe: bad feature/label sizes");
    const int n = static_cast<int>(features.size());
    const int d = static_cast<int>(features[0].numel());

    const bool any_pos = std::count(labels.begin(), labels.end(), 1) > 0;
    const bool any_neg = std::count(labels.begin(), labels.end(), 0) > 0;
    if (!any_pos || !any_neg) throw DataError("train_probe: input contains a single class");

    std::vector<int> order(n);
    for (int i = 0; i < n; ++i) order[i] = i;
    Rng rng(mix_seed(split_seed, 0x9A0BE));
    rng.shuffle(order);
    const int n_train = std::min(n, std::max(1, static_cast<int>(std::lround(n * opt.train_fraction))));

    auto slice = [&](int from, int to, Tensor& x, std::vector<double>& y) {
        if (to == from) return;
        x = Tensor({to - from, d});
        y.resize(to - from);
        for (int i = from; i < to; ++i) {
            const auto& f = features[order[i]];
            if (static_cast<int>(f.numel()) != d) throw ShapeError("train_probe: ragged features");
            std::copy(f.data.begin(), f.data.end(), x.data.begin() + static_cast<size_t>(i - from) * d);
            y[i - from] = labels[order[i]];
        }
    };
    Tensor x_train, x_val;
    std::vector<double> y_train, y_val;
    slice(0, n_train, x_train, y_train);
    slice(n_train, n, x_val, y_val);

    const bool has_pos = std::count(y_train.begin(), y_train.end(), 1.0) > 0;
    const bool has_neg = std::count(y_train.begin(), y_train.end(), 0.0) > 0;
    if (!has_pos || !has_neg) throw DataError("train_probe: training split contains a single class");

    Tensor theta = Tensor::zeros({d, 1});
    Tensor bias = Tensor::zeros({1});
    AdamState st_theta = AdamState::for_param(theta, opt.lr);
    AdamState st_bias = AdamState::for_param(bias, opt.lr);

    auto eval_loss = [&](const Tensor& x, const std::vector<double>& y) {
        if (y.empty()) return 0.0;
        double total = 0.0;
        for (size_t i = 0; i < y.size(); ++i) {
            double z = bias.data[0];
            for (int j = 0; j < d; ++j) z += x.data[i * d + j] * theta.data[j];
            total += std::max(z, 0.0) - z * y[i] + std::log1p(std::exp(-std::abs(z)));
        }
        return total / static_cast<double>(y.size());
    };

    Tensor best_theta = theta, best_bias = bias;
    double best_val = eval_loss(x_val, y_val);
    int since_best = 0;
    for (int epoch = 0; epoch < opt.max_epochs; ++epoch) {
        Tape tape;
        Var vt = tape.param(theta), vb = tape.param(bias);
        Var logits = add_row(tape, matmul(tape, tape.constant(x_train), vt), vb);
        Var loss = bce_with_logits_mean(tape, logits, y_train);
        tape.backward(loss);
        adam_step(theta, st_theta);
        adam_step(bias, st_bias);
        const double val = eval_loss(x_val, y_val);
        if (val < best_val - 1e-9) {
            best_val = val;
            best_theta = theta;
            best_bias = bias;
            since_best = 0;
        } else if (++since_best >= opt.patience) {
            break;
        }
    }

    ProbeModel probe;
    probe.theta = Tensor({d});
    std::copy(best_theta.data.begin(), best_theta.data.end(), probe.theta.data.begin());
    probe.bias = best_bias.data[0];
    if (metrics) {
        metrics->val_loss = best_val;
        int correct = 0;
        for (size_t i = 0; i < y_val.size(); ++i) {
            double z = probe.bias;
            for (int j = 0; j < d; ++j) z += x_val.data[i * d + j] * probe.theta.data[j];
            correct += (z > 0.0) == (y_val[i] > 0.5);
        }
        metrics->val_acc = y_val.empty() ? 0.0 : 100.0 * correct / static_cast<double>(y_val.size());
    }
    return probe;
}

// Unit-norm direction of a trained probe.
inline Tensor probe_direction(const ProbeModel& p) {
    double sq = 0.0;
    for (double v : p.theta.data) sq += v * v;
    const double norm = std::sqrt(sq);
    if (norm <= 0.0) throw DataError("probe_direction: degenerate probe with zero direction");
    Tensor out = p.theta;
    for (auto& v : out.data) v /= norm;
    return out;
}

// ------------------------- per-layer layer selection -----------------------

struct LayerReport {
    struct Row {
        int layer;
        double val_loss;
        double val_acc;  // percent
    };
    std::vector<Row> rows;
    int selected_layer = -1;

    std::string to_table() const {
        std::ostringstream os;
        os << std::left << std::setw(10) << "block" << std::right << std::setw(12) << "val loss" << std::setw(12)
           << "val acc" << "\n";
        for (const auto& r : rows) {
            os << std::left << std::setw(10) << ("block" + std::to_string(r.layer)) << std::right << std::fixed
               << std::setprecision(4) << std::setw(12) << r.val_loss << std::setprecision(3) << std::setw(12)
               << r.val_acc << (r.layer == selected_layer ? "  <- selected" : "") << "\n";
        }
        return os.str();
    }
};

// Core selection rule over precomputed per-layer features: one probe per
// layer, argmax validation accuracy, ties to the lowest layer.
inline LayerReport probe_layer_features(const std::vector<std::vector<Tensor>>& features_by_layer,
                                        const std::vector<int>& labels, uint64_t split_seed,
                                        std::vector<ProbeModel>* probes_out = nullptr,
                                        const ProbeOptions& opt = {}) {
    if (features_by_layer.empty()) throw DataError("probe_layer_features: no layers");
    LayerReport report;
    double best_acc = -1.0;
    for (size_t l = 0; l < features_by_layer.size(); ++l) {
        ProbeMetrics m;
        ProbeModel p = train_probe(features_by_layer[l], labels, split_seed, &m, opt);
        if (probes_out) probes_out->push_back(std::move(p));
        report.rows.push_back({static_cast<int>(l), m.val_loss, m.val_acc});
        if (m.val_acc > best_acc) {
            best_acc = m.val_acc;
            report.selected_layer = static_cast<int>(l);
        }
    }
    return report;
}

// Mean-pooled residual features for each doc at every layer, then selection.
inline LayerReport probe_all_layers(const LmModel& model, const std::vector<CorpusDoc>& d_prob,
                                    uint64_t split_seed, std::vector<ProbeModel>* probes_out = nullptr,
                                    const ProbeOptions& opt = {}) {
    if (d_prob.empty()) throw DataError("probe_all_layers: empty probing set");
    std::vector<int> hooks(model.cfg.n_layers);
    for (int l = 0; l < model.cfg.n_layers; ++l) hooks[l] = l;
    std::vector<std::vector<Tensor>> features(model.cfg.n_layers);
    std::vector<int> labels;
    for (const auto& doc : d_prob) {
        auto hooked = forward_with_hooks(model, doc.tokens, hooks);
        for (int l = 0; l < model.cfg.n_layers; ++l) {
            const auto& rows = hooked.activations.at(l);
            Tensor pooled({model.cfg.d_emb});
            for (const auto& r : rows)
                for (int j = 0; j < model.cfg.d_emb; ++j) pooled.data[j] += r.data[j];
            for (auto& v : pooled.data) v /= static_cast<double>(rows.size());
            features[l].push_back(std::move(pooled));
        }
        labels.push_back(doc.contains_pii ? 1 : 0);
    }
    return probe_layer_features(features, labels, split_seed, probes_out, opt);
}

}  // namespace piilab
