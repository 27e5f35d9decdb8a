#pragma once

#include <cmath>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "piilab/common.hpp"
#include "piilab/lm.hpp"
#include "piilab/probe.hpp"
#include "piilab/sae.hpp"

namespace piilab {

// ---------------------------------------------------------------------------
// Defense methods, applied to the residual stream of the last token at each
// generation timestep. With the SAE in the loop the activation is encoded,
// modified in latent space, and decoded back; without it the same operations
// act directly on residual coordinates.
// ---------------------------------------------------------------------------

enum class Method { None, Ablation, SteerProbe, SteerTopkProbe, SteerMeanDiff };

inline std::string method_name(Method m) {
    switch (m) {
        case Method::None: return "none";
        case Method::Ablation: return "ablation";
        case Method::SteerProbe: return "steer_probe";
        case Method::SteerTopkProbe: return "steer_topk_probe";
        case Method::SteerMeanDiff: return "steer_mean_diff";
    }
    return "?";
}

struct InterventionSpec {
    Method method = Method::None;
    std::optional<int> k;         // ablation size / top-k probe support
    std::optional<double> alpha;  // steering coefficient (negative pushes away)
    bool use_sae = false;
    int layer = -1;
    bool prefix_mode = false;  // experimental: rewrite every position, not just the last

    void validate() const {
        if (method == Method::Ablation && !k) throw ConfigError("ablation requires k");
        if ((method == Method::SteerProbe || method == Method::SteerTopkProbe || method == Method::SteerMeanDiff) &&
            !alpha)
            throw ConfigError("steering requires alpha");
        if (method == Method::SteerTopkProbe && !k) throw ConfigError("top-k probe steering requires k");
        if (layer < 0) throw ConfigError("intervention layer unset");
    }
};

inline Method method_from_name(const std::string& name) {
    for (Method m : {Method::None, Method::Ablation, Method::SteerProbe, Method::SteerTopkProbe,
                     Method::SteerMeanDiff})
        if (method_name(m) == name) return m;
    throw ConfigError("unknown intervention method '" + name + "'");
}

struct SteeringVector {
    enum class Source { Probe, TopkProbe, MeanDiff };
    Tensor v;
    Source source = Source::Probe;
    double norm() const {
        double sq = 0.0;
        for (double x : v.data) sq += x * x;
        return std::sqrt(sq);
    }
};

// Zeroes the listed latent indices; everything else passes through.
inline Tensor ablate(const Tensor& z, const std::vector<int>& indices) {
    Tensor out = z;
    for (int i : indices) {
        if (i < 0 || i >= static_cast<int>(z.numel()))
            throw ParamError("ablate: index " + std::to_string(i) + " outside [0, " + std::to_string(z.numel()) + ")");
        out.data[i] = 0.0;
    }
    return out;
}

// z' = z + alpha * v on active (nonzero) coordinates only; inactive ones are
// preserved bit-exactly, keeping the sparse support.
inline Tensor steer(const Tensor& z, const Tensor& v, double alpha) {
    if (z.numel() != v.numel())
        throw ShapeError("steer: latent width " + z.shape_str() + " vs vector " + v.shape_str());
    Tensor out = z;
    for (size_t i = 0; i < out.data.size(); ++i)
        if (out.data[i] != 0.0) out.data[i] += alpha * v.data[i];
    return out;
}

// Builds a steering direction from per-sentence mean features (latent or
// residual space) and their PII labels.
inline SteeringVector build_steering_vector(SteeringVector::Source source, const std::vector<Tensor>& features,
                                            const std::vector<int>& labels,
                                            const std::vector<int>* topk_indices = nullptr, uint64_t seed = 0) {
    if (features.size() != labels.size() || features.empty())
        throw DataError("build_steering_vector: bad features/labels");
    const int width = static_cast<int>(features[0].numel());
    const bool has_pos = std::count(labels.begin(), labels.end(), 1) > 0;
    const bool has_neg = std::count(labels.begin(), labels.end(), 0) > 0;
    if (!has_pos || !has_neg) throw DataError("build_steering_vector: both classes required");

    SteeringVector out;
    out.source = source;
    switch (source) {
        case SteeringVector::Source::MeanDiff: {
            Tensor pii = Tensor::zeros({width}), non = Tensor::zeros({width});
            int n_pii = 0, n_non = 0;
            for (size_t i = 0; i < features.size(); ++i) {
                Tensor& acc = labels[i] ? pii : non;
                (labels[i] ? n_pii : n_non) += 1;
                for (int j = 0; j < width; ++j) acc.data[j] += features[i].data[j];
            }
            out.v = Tensor::zeros({width});
            for (int j = 0; j < width; ++j) out.v.data[j] = pii.data[j] / n_pii - non.data[j] / n_non;
            break;  // Left unnormalized; magnitudes are not comparable across methods.
        }
        case SteeringVector::Source::Probe: {
            ProbeModel p = train_probe(features, labels, seed);
            p.space = ProbeModel::Space::LatentFull;
            out.v = probe_direction(p);
            break;
        }
        case SteeringVector::Source::TopkProbe: {
            if (!topk_indices || topk_indices->empty())
                throw ConfigError("top-k probe steering requires ranked feature indices");
            const int k = static_cast<int>(topk_indices->size());
            std::vector<Tensor> sliced;
            sliced.reserve(features.size());
            for (const auto& f : features) {
                Tensor s({k});
                for (int j = 0; j < k; ++j) s.data[j] = f.data[(*topk_indices)[j]];
                sliced.push_back(std::move(s));
            }
            ProbeModel p = train_probe(sliced, labels, seed);
            p.space = ProbeModel::Space::LatentTopk;
            Tensor dir = probe_direction(p);  // normalized over the support
            out.v = Tensor::zeros({width});
            for (int j = 0; j < k; ++j) out.v.data[(*topk_indices)[j]] = dir.data[j];
            break;
        }
    }
    return out;
}

// Assembles the per-step residual-stream callback for `generate`.
inline Interventor make_interventor(const InterventionSpec& spec, const SaeParams* sae = nullptr,
                                    const SteeringVector* steering = nullptr,
                                    const FeatureRanking* ranking = nullptr) {
    if (spec.method != Method::None || spec.use_sae) spec.validate();
    Interventor iv;
    iv.layer = spec.layer;
    iv.prefix_mode = spec.prefix_mode;
    if (spec.use_sae && !sae) throw ConfigError("with-SAE intervention requires trained SAE parameters");

    const bool needs_ranking = spec.method == Method::Ablation;
    if (needs_ranking && (!ranking || ranking->entries.empty()))
        throw ConfigError("ablation requires a feature ranking");
    const bool needs_vector = spec.method == Method::SteerProbe || spec.method == Method::SteerTopkProbe ||
                              spec.method == Method::SteerMeanDiff;
    if (needs_vector && !steering) throw ConfigError("steering requires a steering vector");

    std::vector<int> ablate_idx;
    if (needs_ranking) ablate_idx = ranking->top_indices(*spec.k);

    const SaeParams sae_copy = spec.use_sae ? *sae : SaeParams{};
    const Tensor v = needs_vector ? steering->v : Tensor{};
    const double alpha = spec.alpha.value_or(0.0);
    const Method method = spec.method;
    const bool use_sae = spec.use_sae;

    iv.fn = [sae_copy, v, alpha, method, use_sae, ablate_idx](const std::vector<double>& a) {
        Tensor x({static_cast<int>(a.size())});
        x.data = a;
        Tensor feat = use_sae ? encode(sae_copy, x) : x;
        switch (method) {
            case Method::None: break;
            case Method::Ablation: feat = ablate(feat, ablate_idx); break;
            case Method::SteerProbe:
            case Method::SteerTopkProbe:
            case Method::SteerMeanDiff: feat = steer(feat, v, alpha); break;
        }
        Tensor out = use_sae ? decode(sae_copy, feat) : feat;
        return out.data;
    };
    return iv;
}

}  // namespace piilab
