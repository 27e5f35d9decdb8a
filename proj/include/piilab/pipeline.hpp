#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "piilab/actcache.hpp"
#include "piilab/corpus.hpp"
#include "piilab/eval.hpp"
#include "piilab/intervene.hpp"
#include "piilab/lm.hpp"
#include "piilab/probe.hpp"
#include "piilab/sae.hpp"
#include "piilab/sha256.hpp"

namespace piilab {

// ---------------------------------------------------------------------------
// Reproducible, resumable pipeline: every stage writes artifacts plus a
// manifest entry (path, sha256, config hash, timestamp), and verifies its
// upstream artifacts against the manifest before running.
// ---------------------------------------------------------------------------

struct RunConfig {
    uint64_t seed = 1;
    CorpusConfig corpus;

    struct Lm {
        int d_emb = 64;
        int n_layers = 6;
        int n_heads = 4;
        int epochs = 12;
        int batch_docs = 16;
        double lr = 2e-3;
        double clip = 1.0;
    } lm;

    struct Probe {
        double lr = 0.2;
        int max_epochs = 600;
        int patience = 10;
    } probe;

    struct Sae {
        int h_multiple = 8;  // h = h_multiple * d_emb
        int k_divisor = 8;   // k = h / k_divisor; keeps the spliced model faithful
        double alpha_aux = 1.0 / 32.0;
        int64_t dead_threshold = 10000;
        double lr = 1e-3;
        double clip = 1.0;
        int batch = 128;
        int epochs = 16;
    } sae;

    struct Eval {
        int max_new = 24;
        std::vector<int> ablation_k_sae{16, 64, 256};
        std::vector<int> ablation_k_raw{4, 16, 48};
        std::vector<double> alpha_probe{-16, -32, -64};
        std::vector<double> alpha_topk_probe{-8, -16, -32};
        std::vector<double> alpha_mean_diff{-1, -2, -4};
        int topk_probe_k_sae = 64;
        int topk_probe_k_raw = 16;
        double subsample_fraction = 1.0;  // applied to d_topk and steering features
        int n_threads = 0;                // 0 = hardware
        // When non-empty, replaces the built-in grid. One record per cell:
        // {"method": "...", "k": .., "alpha": .., "use_sae": ..}
        std::vector<nlohmann::json> custom_grid;
    } eval;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["seed"] = seed;
        j["corpus"] = {{"n_subjects", corpus.n_subjects},       {"adv_fraction", corpus.adv_fraction},
                       {"n_docs", corpus.n_docs},               {"pii_fraction", corpus.pii_fraction},
                       {"n_heldout", corpus.n_heldout},         {"n_prob_per_class", corpus.n_prob_per_class},
                       {"n_topk", corpus.n_topk},               {"context_length", corpus.context_length}};
        j["lm"] = {{"d_emb", lm.d_emb},   {"n_layers", lm.n_layers}, {"n_heads", lm.n_heads}, {"epochs", lm.epochs},
                   {"batch_docs", lm.batch_docs}, {"lr", lm.lr},     {"clip", lm.clip}};
        j["probe"] = {{"lr", probe.lr}, {"max_epochs", probe.max_epochs}, {"patience", probe.patience}};
        j["sae"] = {{"h_multiple", sae.h_multiple}, {"k_divisor", sae.k_divisor}, {"alpha_aux", sae.alpha_aux},
                    {"dead_threshold", sae.dead_threshold}, {"lr", sae.lr},       {"clip", sae.clip},
                    {"batch", sae.batch},           {"epochs", sae.epochs}};
        j["eval"] = {{"max_new", eval.max_new},
                     {"ablation_k_sae", eval.ablation_k_sae},
                     {"ablation_k_raw", eval.ablation_k_raw},
                     {"alpha_probe", eval.alpha_probe},
                     {"alpha_topk_probe", eval.alpha_topk_probe},
                     {"alpha_mean_diff", eval.alpha_mean_diff},
                     {"topk_probe_k_sae", eval.topk_probe_k_sae},
                     {"topk_probe_k_raw", eval.topk_probe_k_raw},
                     {"subsample_fraction", eval.subsample_fraction},
                     {"n_threads", eval.n_threads},
                     {"custom_grid", eval.custom_grid}};
        return j;
    }

    static RunConfig from_json(const nlohmann::json& j) {
        RunConfig c;
        c.seed = j.value("seed", c.seed);
        if (j.contains("corpus")) {
            const auto& s = j.at("corpus");
            c.corpus.n_subjects = s.value("n_subjects", c.corpus.n_subjects);
            c.corpus.adv_fraction = s.value("adv_fraction", c.corpus.adv_fraction);
            c.corpus.n_docs = s.value("n_docs", c.corpus.n_docs);
            c.corpus.pii_fraction = s.value("pii_fraction", c.corpus.pii_fraction);
            c.corpus.n_heldout = s.value("n_heldout", c.corpus.n_heldout);
            c.corpus.n_prob_per_class = s.value("n_prob_per_class", c.corpus.n_prob_per_class);
            c.corpus.n_topk = s.value("n_topk", c.corpus.n_topk);
            c.corpus.context_length = s.value("context_length", c.corpus.context_length);
        }
        if (j.contains("lm")) {
            const auto& s = j.at("lm");
            c.lm.d_emb = s.value("d_emb", c.lm.d_emb);
            c.lm.n_layers = s.value("n_layers", c.lm.n_layers);
            c.lm.n_heads = s.value("n_heads", c.lm.n_heads);
            c.lm.epochs = s.value("epochs", c.lm.epochs);
            c.lm.batch_docs = s.value("batch_docs", c.lm.batch_docs);
            c.lm.lr = s.value("lr", c.lm.lr);
            c.lm.clip = s.value("clip", c.lm.clip);
        }
        if (j.contains("probe")) {
            const auto& s = j.at("probe");
            c.probe.lr = s.value("lr", c.probe.lr);
            c.probe.max_epochs = s.value("max_epochs", c.probe.max_epochs);
            c.probe.patience = s.value("patience", c.probe.patience);
        }
        if (j.contains("sae")) {
            const auto& s = j.at("sae");
            c.sae.h_multiple = s.value("h_multiple", c.sae.h_multiple);
            c.sae.k_divisor = s.value("k_divisor", c.sae.k_divisor);
            c.sae.alpha_aux = s.value("alpha_aux", c.sae.alpha_aux);
            c.sae.dead_threshold = s.value("dead_threshold", c.sae.dead_threshold);
            c.sae.lr = s.value("lr", c.sae.lr);
            c.sae.clip = s.value("clip", c.sae.clip);
            c.sae.batch = s.value("batch", c.sae.batch);
            c.sae.epochs = s.value("epochs", c.sae.epochs);
        }
        if (j.contains("eval")) {
            const auto& s = j.at("eval");
            c.eval.max_new = s.value("max_new", c.eval.max_new);
            c.eval.ablation_k_sae = s.value("ablation_k_sae", c.eval.ablation_k_sae);
            c.eval.ablation_k_raw = s.value("ablation_k_raw", c.eval.ablation_k_raw);
            c.eval.alpha_probe = s.value("alpha_probe", c.eval.alpha_probe);
            c.eval.alpha_topk_probe = s.value("alpha_topk_probe", c.eval.alpha_topk_probe);
            c.eval.alpha_mean_diff = s.value("alpha_mean_diff", c.eval.alpha_mean_diff);
            c.eval.topk_probe_k_sae = s.value("topk_probe_k_sae", c.eval.topk_probe_k_sae);
            c.eval.topk_probe_k_raw = s.value("topk_probe_k_raw", c.eval.topk_probe_k_raw);
            c.eval.subsample_fraction = s.value("subsample_fraction", c.eval.subsample_fraction);
            c.eval.n_threads = s.value("n_threads", c.eval.n_threads);
            c.eval.custom_grid = s.value("custom_grid", c.eval.custom_grid);
        }
        return c;
    }

    static RunConfig load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw IoError("cannot read config " + path);
        return from_json(nlohmann::json::parse(in));
    }

    // nlohmann::json objects are key-sorted, so the dump is canonical.
    std::string canonical_json() const { return to_json().dump(2); }
    std::string hash() const { return sha256_hex(canonical_json()); }

    int sae_h() const { return sae.h_multiple * lm.d_emb; }
    int sae_k() const { return std::max(1, sae_h() / sae.k_divisor); }
    int sae_k_aux() const { return std::max(1, lm.d_emb / 2); }
};

// ------------------------------- manifest ----------------------------------

struct ManifestEntry {
    std::string path;  // relative to the run dir
    std::string sha256;
    std::string config_hash;
    std::string timestamp;
};

class Manifest {
public:
    static std::string file_path(const std::string& dir) { return dir + "/manifest.jsonl"; }

    static Manifest load(const std::string& dir) {
        Manifest m;
        std::ifstream in(file_path(dir));
        if (!in) return m;
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            auto j = nlohmann::json::parse(line);
            ManifestEntry e{j.at("path"), j.at("sha256"), j.at("config_hash"), j.at("timestamp")};
            m.entries_[e.path] = e;
        }
        return m;
    }

    void record(const std::string& dir, const std::string& rel_path, const std::string& config_hash) {
        ManifestEntry e;
        e.path = rel_path;
        e.sha256 = sha256_file(dir + "/" + rel_path);
        e.config_hash = config_hash;
        const auto now = std::chrono::system_clock::now();
        const std::time_t t = std::chrono::system_clock::to_time_t(now);
        char buf[32];
        std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
        e.timestamp = buf;
        entries_[rel_path] = e;
        save(dir);
    }

    // Verifies an upstream artifact: present, hash-stable, produced by this
    // config. Names the stage to re-run on mismatch.
    void verify(const std::string& dir, const std::string& rel_path, const std::string& config_hash,
                const std::string& producer_stage) const {
        auto it = entries_.find(rel_path);
        if (it == entries_.end())
            throw StalenessError("artifact " + rel_path + " not in manifest; re-run stage '" + producer_stage + "'");
        if (!std::filesystem::exists(dir + "/" + rel_path))
            throw StalenessError("artifact " + rel_path + " missing on disk; re-run stage '" + producer_stage + "'");
        if (it->second.config_hash != config_hash)
            throw StalenessError("artifact " + rel_path + " was produced by config " + it->second.config_hash.substr(0, 12) +
                                 ", current config is " + config_hash.substr(0, 12) + "; re-run stage '" +
                                 producer_stage + "'");
        const std::string actual = sha256_file(dir + "/" + rel_path);
        if (actual != it->second.sha256)
            throw StalenessError("artifact " + rel_path + " changed on disk since it was recorded; re-run stage '" +
                                 producer_stage + "'");
    }

    const std::map<std::string, ManifestEntry>& entries() const { return entries_; }

private:
    void save(const std::string& dir) const {
        std::ofstream out(file_path(dir), std::ios::binary);
        if (!out) throw IoError("cannot write manifest in " + dir);
        for (const auto& [path, e] : entries_) {
            nlohmann::json j{{"path", e.path}, {"sha256", e.sha256}, {"config_hash", e.config_hash},
                             {"timestamp", e.timestamp}};
            out << j.dump() << '\n';
        }
    }

    std::map<std::string, ManifestEntry> entries_;
};

// One stage process at a time per output directory.
class StageLock {
public:
    explicit StageLock(const std::string& dir) : path_(dir + "/.lock") {
        std::filesystem::create_directories(dir);
        FILE* f = std::fopen(path_.c_str(), "wx");
        if (!f)
            throw ConfigError("output directory " + dir + " is locked by another stage (remove " + path_ +
                              " if that process is gone)");
        std::fclose(f);
    }
    ~StageLock() { std::remove(path_.c_str()); }
    StageLock(const StageLock&) = delete;
    StageLock& operator=(const StageLock&) = delete;

private:
    std::string path_;
};

// ----------------------------- pipeline steps -------------------------------
// Shared by the disk stages and the in-memory pipeline, so both routes give
// identical results for identical (config, seed).

struct SteeringSet {
    std::map<std::pair<int, int>, SteeringVector> vectors;  // (source, use_sae)
};

inline DatasetSplit step_split(const RunConfig& cfg, const Vocab& vocab) {
    return build_dataset_split(cfg.corpus, cfg.seed, vocab);
}

inline LmModel step_train_lm(const RunConfig& cfg, const Vocab& vocab, const DatasetSplit& split,
                             TrainLmLog* log = nullptr) {
    LmConfig lmc;
    lmc.vocab_size = vocab.size();
    lmc.d_emb = cfg.lm.d_emb;
    lmc.n_layers = cfg.lm.n_layers;
    lmc.n_heads = cfg.lm.n_heads;
    lmc.context_length = cfg.corpus.context_length;
    lmc.seed = cfg.seed;
    TrainLmOptions opt;
    opt.epochs = cfg.lm.epochs;
    opt.batch_docs = cfg.lm.batch_docs;
    opt.lr = cfg.lm.lr;
    opt.clip = cfg.lm.clip;
    opt.seed = cfg.seed;
    return train_lm(lmc, split.train_corpus, split.heldout_docs, opt, log);
}

namespace pipedetail {

inline std::map<int, const CorpusDoc*> doc_index(const DatasetSplit& split) {
    std::map<int, const CorpusDoc*> by_id;
    for (const auto& d : split.train_corpus) by_id[d.id] = &d;
    return by_id;
}

inline std::vector<CorpusDoc> docs_by_ids(const DatasetSplit& split, const std::vector<int>& ids) {
    auto by_id = doc_index(split);
    std::vector<CorpusDoc> out;
    out.reserve(ids.size());
    for (int id : ids) out.push_back(*by_id.at(id));
    return out;
}

// Deterministic subsample of at least one element.
template <typename T>
std::vector<T> subsample(const std::vector<T>& items, double fraction, uint64_t seed) {
    if (fraction >= 1.0) return items;
    const int keep = std::max(1, static_cast<int>(std::ceil(items.size() * fraction)));
    Rng rng(mix_seed(seed, 0x5b5a));
    std::vector<int> idx(items.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
    rng.shuffle(idx);
    idx.resize(keep);
    std::sort(idx.begin(), idx.end());
    std::vector<T> out;
    out.reserve(keep);
    for (int i : idx) out.push_back(items[i]);
    return out;
}

}  // namespace pipedetail

// Per-layer caches over the probing docs.
inline std::vector<ActCache> step_harvest_prob(const RunConfig& cfg, const LmModel& model,
                                               const DatasetSplit& split) {
    auto docs = pipedetail::docs_by_ids(split, split.d_prob_ids);
    std::vector<ActCache> caches;
    for (int l = 0; l < cfg.lm.n_layers; ++l) caches.push_back(harvest(model, docs, l));
    return caches;
}

inline LayerReport step_probe(const RunConfig& cfg, const DatasetSplit& split,
                              const std::vector<ActCache>& prob_caches) {
    auto docs = pipedetail::docs_by_ids(split, split.d_prob_ids);
    std::vector<int> labels;
    for (const auto& d : docs) labels.push_back(d.contains_pii ? 1 : 0);
    std::vector<std::vector<Tensor>> features(prob_caches.size());
    for (size_t l = 0; l < prob_caches.size(); ++l)
        for (const auto& d : docs) features[l].push_back(mean_pool(prob_caches[l], d.id));
    ProbeOptions opt;
    opt.lr = cfg.probe.lr;
    opt.max_epochs = cfg.probe.max_epochs;
    opt.patience = cfg.probe.patience;
    return probe_layer_features(features, labels, cfg.seed, nullptr, opt);
}

inline ActCache step_harvest_sae(const RunConfig& cfg, const LmModel& model, const DatasetSplit& split, int layer) {
    (void)cfg;
    return harvest(model, pipedetail::docs_by_ids(split, split.sae_doc_ids), layer);
}

inline SaeParams step_train_sae(const RunConfig& cfg, const ActCache& cache, TrainSaeLog* log = nullptr) {
    SaeConfig scfg;
    scfg.d_emb = cfg.lm.d_emb;
    scfg.h = cfg.sae_h();
    scfg.k = cfg.sae_k();
    scfg.k_aux = cfg.sae_k_aux();
    scfg.alpha_aux = cfg.sae.alpha_aux;
    scfg.dead_threshold = cfg.sae.dead_threshold;
    scfg.lr = cfg.sae.lr;
    scfg.clip = cfg.sae.clip;
    scfg.batch = cfg.sae.batch;
    scfg.epochs = cfg.sae.epochs;
    scfg.seed = cfg.seed;
    return train_sae(cache, scfg, log);
}

struct Rankings {
    FeatureRanking sae;
    FeatureRanking neurons;
};

inline Rankings step_rank(const RunConfig& cfg, const LmModel& model, const SaeParams& sae,
                          const DatasetSplit& split, int layer) {
    auto d_topk = pipedetail::docs_by_ids(split, split.d_topk_ids);
    d_topk = pipedetail::subsample(d_topk, cfg.eval.subsample_fraction, cfg.seed);
    Rankings r;
    r.sae = rank_pii_features(sae, model, d_topk, layer);
    r.neurons = rank_pii_neurons(model, d_topk, layer);
    return r;
}

// Steering directions in both spaces from the probing docs' activations.
inline SteeringSet step_steering(const RunConfig& cfg, const DatasetSplit& split, const ActCache& prob_cache,
                                 const SaeParams& sae, const Rankings& rankings) {
    auto docs = pipedetail::docs_by_ids(split, split.d_prob_ids);
    docs = pipedetail::subsample(docs, cfg.eval.subsample_fraction, mix_seed(cfg.seed, 1));
    std::vector<Tensor> latent_means, residual_means;
    std::vector<int> labels;
    for (const auto& d : docs) {
        const auto [first, last] = prob_cache.doc_index.at(d.id);
        Tensor zsum = Tensor::zeros({sae.h});
        for (int r = first; r < last; ++r) {
            Tensor z = encode(sae, prob_cache.record_tensor(r));
            for (int j = 0; j < sae.h; ++j) zsum.data[j] += z.data[j];
        }
        for (auto& v : zsum.data) v /= static_cast<double>(last - first);
        latent_means.push_back(std::move(zsum));
        residual_means.push_back(mean_pool(prob_cache, d.id));
        labels.push_back(d.contains_pii ? 1 : 0);
    }
    SteeringSet out;
    const auto topk_sae = rankings.sae.top_indices(cfg.eval.topk_probe_k_sae);
    const auto topk_raw = rankings.neurons.top_indices(cfg.eval.topk_probe_k_raw);
    using Src = SteeringVector::Source;
    out.vectors[{static_cast<int>(Src::Probe), 1}] =
        build_steering_vector(Src::Probe, latent_means, labels, nullptr, cfg.seed);
    out.vectors[{static_cast<int>(Src::Probe), 0}] =
        build_steering_vector(Src::Probe, residual_means, labels, nullptr, cfg.seed);
    out.vectors[{static_cast<int>(Src::TopkProbe), 1}] =
        build_steering_vector(Src::TopkProbe, latent_means, labels, &topk_sae, cfg.seed);
    out.vectors[{static_cast<int>(Src::TopkProbe), 0}] =
        build_steering_vector(Src::TopkProbe, residual_means, labels, &topk_raw, cfg.seed);
    out.vectors[{static_cast<int>(Src::MeanDiff), 1}] =
        build_steering_vector(Src::MeanDiff, latent_means, labels, nullptr, cfg.seed);
    out.vectors[{static_cast<int>(Src::MeanDiff), 0}] =
        build_steering_vector(Src::MeanDiff, residual_means, labels, nullptr, cfg.seed);
    return out;
}

// One grid cell from its config record.
inline InterventionSpec spec_from_record(const nlohmann::json& j, int default_layer) {
    InterventionSpec s;
    s.method = method_from_name(j.at("method").get<std::string>());
    if (j.contains("k") && !j.at("k").is_null()) s.k = j.at("k").get<int>();
    if (j.contains("alpha") && !j.at("alpha").is_null()) s.alpha = j.at("alpha").get<double>();
    s.use_sae = j.value("use_sae", false);
    s.layer = j.value("layer", default_layer);
    s.prefix_mode = j.value("prefix_mode", false);
    return s;
}

// The grid: no-defense rows for both SAE states, then each method ladder.
// A non-empty eval.custom_grid replaces the built-in ladders.
inline std::vector<InterventionSpec> default_grid(const RunConfig& cfg, int layer) {
    if (!cfg.eval.custom_grid.empty()) {
        std::vector<InterventionSpec> specs;
        for (const auto& j : cfg.eval.custom_grid) specs.push_back(spec_from_record(j, layer));
        return specs;
    }
    std::vector<InterventionSpec> specs;
    auto push = [&](Method m, std::optional<int> k, std::optional<double> alpha, bool use_sae) {
        InterventionSpec s;
        s.method = m;
        s.k = k;
        s.alpha = alpha;
        s.use_sae = use_sae;
        s.layer = layer;
        specs.push_back(s);
    };
    push(Method::None, std::nullopt, std::nullopt, false);
    push(Method::None, std::nullopt, std::nullopt, true);
    for (int k : cfg.eval.ablation_k_sae) push(Method::Ablation, k, std::nullopt, true);
    for (int k : cfg.eval.ablation_k_raw) push(Method::Ablation, k, std::nullopt, false);
    for (double a : cfg.eval.alpha_probe) {
        push(Method::SteerProbe, std::nullopt, a, true);
        push(Method::SteerProbe, std::nullopt, a, false);
    }
    for (double a : cfg.eval.alpha_topk_probe) {
        push(Method::SteerTopkProbe, cfg.eval.topk_probe_k_sae, a, true);
        push(Method::SteerTopkProbe, cfg.eval.topk_probe_k_raw, a, false);
    }
    for (double a : cfg.eval.alpha_mean_diff) {
        push(Method::SteerMeanDiff, std::nullopt, a, true);
        push(Method::SteerMeanDiff, std::nullopt, a, false);
    }
    return specs;
}

inline EvalReport step_eval(const RunConfig& cfg, const LmModel& model, const Vocab& vocab, const SaeParams& sae,
                            const Rankings& rankings, const SteeringSet& steering, const DatasetSplit& split,
                            int layer, const std::vector<InterventionSpec>* custom_specs = nullptr) {
    GridInputs in;
    in.model = &model;
    in.vocab = &vocab;
    in.sae = &sae;
    in.ranking_sae = &rankings.sae;
    in.ranking_neurons = &rankings.neurons;
    in.steering = steering.vectors;
    in.d_adv = &split.d_adv;
    in.heldout = &split.heldout_docs;
    const std::vector<ClozeItem> cloze = build_cloze_items(split.heldout_docs, vocab);
    in.cloze = &cloze;
    in.layer = layer;
    in.max_new = cfg.eval.max_new;
    in.n_threads = cfg.eval.n_threads;
    const auto specs = custom_specs ? *custom_specs : default_grid(cfg, layer);
    return run_grid(in, specs);
}

// ------------------------- in-memory full pipeline --------------------------

struct PipelineArtifacts {
    Vocab vocab;
    DatasetSplit split;
    TrainLmLog lm_log;
    LmModel model;
    LayerReport layer_report;
    ActCache prob_cache_selected;  // probing docs at the selected layer
    TrainSaeLog sae_log;
    SaeParams sae;
    Rankings rankings;
    SteeringSet steering;
    EvalReport report;
};

inline PipelineArtifacts run_pipeline(const RunConfig& cfg) {
    PipelineArtifacts art;
    art.vocab = build_vocab();
    art.split = step_split(cfg, art.vocab);
    const auto violations = check_disjointness(art.split);
    if (!violations.empty())
        throw DataError("dataset split failed disjointness: " + violations.front().detail);
    art.model = step_train_lm(cfg, art.vocab, art.split, &art.lm_log);
    auto prob_caches = step_harvest_prob(cfg, art.model, art.split);
    art.layer_report = step_probe(cfg, art.split, prob_caches);
    const int layer = art.layer_report.selected_layer;
    art.prob_cache_selected = std::move(prob_caches[layer]);
    ActCache sae_cache = step_harvest_sae(cfg, art.model, art.split, layer);
    art.sae = step_train_sae(cfg, sae_cache, &art.sae_log);
    art.rankings = step_rank(cfg, art.model, art.sae, art.split, layer);
    art.steering = step_steering(cfg, art.split, art.prob_cache_selected, art.sae, art.rankings);
    art.report = step_eval(cfg, art.model, art.vocab, art.sae, art.rankings, art.steering, art.split, layer);
    return art;
}

// ------------------------------ disk stages ---------------------------------

namespace paths {
inline const char* config_file = "run_config.json";
inline const char* subjects = "subjects.tsv";
inline const char* train_corpus = "train_corpus.tsv";
inline const char* heldout = "heldout.tsv";
inline const char* d_adv = "d_adv.tsv";
inline const char* split_meta = "split.json";
inline const char* lm_ckpt = "lm.ckpt";
inline const char* lm_log = "lm_train_log.json";
inline std::string prob_cache(int layer) { return "cache_prob_L" + std::to_string(layer) + ".actcache"; }
inline const char* probe_report = "probe_report.json";
inline const char* probe_table = "probe_report.txt";
inline const char* sae_cache = "cache_sae.actcache";
inline const char* sae_ckpt = "sae.ckpt";
inline const char* sae_log = "sae_train_log.json";
inline const char* ranking_sae = "ranking_sae.tsv";
inline const char* ranking_neurons = "ranking_neurons.tsv";
inline const char* steering_meta = "steering.json";
inline const char* report_records = "report.tsv";
inline const char* report_table = "report.txt";
}  // namespace paths

namespace pipedetail {

inline void require_fresh(const std::string& dir, const std::string& rel, bool force) {
    if (!force && std::filesystem::exists(dir + "/" + rel))
        throw ConfigError("artifact " + rel + " already exists in " + dir + "; pass --force to overwrite");
}

inline void write_config_copy(const RunConfig& cfg, const std::string& dir) {
    const std::string path = dir + "/" + paths::config_file;
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    out << cfg.canonical_json() << '\n';
}

inline void check_config_matches(const RunConfig& cfg, const std::string& dir) {
    const std::string path = dir + "/" + paths::config_file;
    if (!std::filesystem::exists(path))
        throw StalenessError("no run_config.json in " + dir + "; run stage 'gen-corpus' first");
    std::ifstream in(path);
    std::stringstream ss;
    ss << in.rdbuf();
    RunConfig stored = RunConfig::from_json(nlohmann::json::parse(ss.str()));
    if (stored.hash() != cfg.hash())
        throw StalenessError("config in " + dir + " differs from the requested config; re-run stage 'gen-corpus'");
}

inline DatasetSplit load_split(const RunConfig& cfg, const std::string& dir, const Vocab& vocab) {
    DatasetSplit sp;
    std::ifstream subj(dir + "/" + paths::subjects);
    if (!subj) throw IoError("cannot read subjects");
    std::string line;
    while (std::getline(subj, line)) {
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        sp.subjects.push_back({line.substr(0, tab), line.substr(tab + 1)});
    }
    sp.train_corpus = read_docs_tsv(dir + "/" + paths::train_corpus, vocab, cfg.corpus.context_length);
    sp.heldout_docs = read_docs_tsv(dir + "/" + paths::heldout, vocab, cfg.corpus.context_length);
    sp.d_adv = read_prompts_tsv(dir + "/" + paths::d_adv);
    std::ifstream meta(dir + "/" + paths::split_meta);
    auto j = nlohmann::json::parse(meta);
    sp.adv_subject_ids = j.at("adv_subject_ids").get<std::vector<int>>();
    sp.d_prob_ids = j.at("d_prob_ids").get<std::vector<int>>();
    sp.d_topk_ids = j.at("d_topk_ids").get<std::vector<int>>();
    sp.sae_doc_ids = j.at("sae_doc_ids").get<std::vector<int>>();
    return sp;
}

inline LmModel load_lm_checkpoint(const RunConfig& cfg, const std::string& dir, const Vocab& vocab) {
    LmConfig lmc;
    lmc.vocab_size = vocab.size();
    lmc.d_emb = cfg.lm.d_emb;
    lmc.n_layers = cfg.lm.n_layers;
    lmc.n_heads = cfg.lm.n_heads;
    lmc.context_length = cfg.corpus.context_length;
    lmc.seed = cfg.seed;
    LmModel m = LmModel::init(lmc);
    load_lm(dir + "/" + paths::lm_ckpt, m);
    return m;
}

inline int load_selected_layer(const std::string& dir) {
    std::ifstream in(dir + "/" + paths::probe_report);
    if (!in) throw IoError("cannot read probe report");
    return nlohmann::json::parse(in).at("selected_layer").get<int>();
}

}  // namespace pipedetail

inline void stage_gen_corpus(const RunConfig& cfg, const std::string& dir, bool force) {
    StageLock lock(dir);
    pipedetail::require_fresh(dir, paths::train_corpus, force);
    Vocab vocab = build_vocab();
    DatasetSplit sp = step_split(cfg, vocab);
    const auto violations = check_disjointness(sp);
    if (!violations.empty()) throw DataError("split disjointness violated: " + violations.front().detail);

    pipedetail::write_config_copy(cfg, dir);
    {
        std::ofstream out(dir + "/" + paths::subjects, std::ios::binary);
        for (const auto& s : sp.subjects) out << s.name << '\t' << s.email << '\n';
    }
    write_docs_tsv(dir + "/" + paths::train_corpus, sp.train_corpus);
    write_docs_tsv(dir + "/" + paths::heldout, sp.heldout_docs);
    write_prompts_tsv(dir + "/" + paths::d_adv, sp.d_adv);
    {
        nlohmann::json j{{"adv_subject_ids", sp.adv_subject_ids},
                         {"d_prob_ids", sp.d_prob_ids},
                         {"d_topk_ids", sp.d_topk_ids},
                         {"sae_doc_ids", sp.sae_doc_ids}};
        std::ofstream out(dir + "/" + paths::split_meta, std::ios::binary);
        out << j.dump(2) << '\n';
    }
    Manifest m = Manifest::load(dir);
    const std::string h = cfg.hash();
    for (const char* p : {paths::config_file, paths::subjects, paths::train_corpus, paths::heldout, paths::d_adv,
                          paths::split_meta})
        m.record(dir, p, h);
}

inline void stage_train_lm(const RunConfig& cfg, const std::string& dir, bool force) {
    StageLock lock(dir);
    pipedetail::check_config_matches(cfg, dir);
    pipedetail::require_fresh(dir, paths::lm_ckpt, force);
    Manifest m = Manifest::load(dir);
    const std::string h = cfg.hash();
    for (const char* p : {paths::train_corpus, paths::heldout}) m.verify(dir, p, h, "gen-corpus");

    Vocab vocab = build_vocab();
    DatasetSplit sp = pipedetail::load_split(cfg, dir, vocab);
    TrainLmLog log;
    LmModel model = step_train_lm(cfg, vocab, sp, &log);
    save_lm(dir + "/" + paths::lm_ckpt, model, cfg.canonical_json());
    {
        nlohmann::json j{{"init_heldout_loss", log.init_heldout_loss},
                         {"epoch_train_loss", log.epoch_train_loss},
                         {"epoch_heldout_loss", log.epoch_heldout_loss}};
        std::ofstream out(dir + "/" + paths::lm_log, std::ios::binary);
        out << j.dump(2) << '\n';
    }
    m.record(dir, paths::lm_ckpt, h);
    m.record(dir, paths::lm_log, h);
}

inline void stage_harvest(const RunConfig& cfg, const std::string& dir, bool force) {
    StageLock lock(dir);
    pipedetail::check_config_matches(cfg, dir);
    pipedetail::require_fresh(dir, paths::prob_cache(0), force);
    Manifest m = Manifest::load(dir);
    const std::string h = cfg.hash();
    m.verify(dir, paths::train_corpus, h, "gen-corpus");
    m.verify(dir, paths::lm_ckpt, h, "train-lm");

    Vocab vocab = build_vocab();
    DatasetSplit sp = pipedetail::load_split(cfg, dir, vocab);
    LmModel model = pipedetail::load_lm_checkpoint(cfg, dir, vocab);
    auto caches = step_harvest_prob(cfg, model, sp);
    const std::string model_hash = m.entries().at(paths::lm_ckpt).sha256;
    for (int l = 0; l < cfg.lm.n_layers; ++l) {
        caches[l].model_hash = model_hash;
        caches[l].corpus_hash = m.entries().at(paths::train_corpus).sha256;
        write_actcache(dir + "/" + paths::prob_cache(l), caches[l]);
        m.record(dir, paths::prob_cache(l), h);
    }
}

inline void stage_probe(const RunConfig& cfg, const std::string& dir, bool force) {
    StageLock lock(dir);
    pipedetail::check_config_matches(cfg, dir);
    pipedetail::require_fresh(dir, paths::probe_report, force);
    Manifest m = Manifest::load(dir);
    const std::string h = cfg.hash();
    for (int l = 0; l < cfg.lm.n_layers; ++l) m.verify(dir, paths::prob_cache(l), h, "harvest");

    Vocab vocab = build_vocab();
    DatasetSplit sp = pipedetail::load_split(cfg, dir, vocab);
    std::vector<ActCache> caches;
    for (int l = 0; l < cfg.lm.n_layers; ++l) caches.push_back(read_actcache(dir + "/" + paths::prob_cache(l)));
    LayerReport report = step_probe(cfg, sp, caches);
    {
        nlohmann::json rows = nlohmann::json::array();
        for (const auto& r : report.rows)
            rows.push_back({{"layer", r.layer}, {"val_loss", r.val_loss}, {"val_acc", r.val_acc}});
        nlohmann::json j{{"selected_layer", report.selected_layer}, {"rows", rows}};
        std::ofstream out(dir + "/" + paths::probe_report, std::ios::binary);
        out << j.dump(2) << '\n';
    }
    {
        std::ofstream out(dir + "/" + paths::probe_table, std::ios::binary);
        out << report.to_table();
    }
    m.record(dir, paths::probe_report, h);
    m.record(dir, paths::probe_table, h);
}

inline void stage_train_sae(const RunConfig& cfg, const std::string& dir, bool force) {
    StageLock lock(dir);
    pipedetail::check_config_matches(cfg, dir);
    pipedetail::require_fresh(dir, paths::sae_ckpt, force);
    Manifest m = Manifest::load(dir);
    const std::string h = cfg.hash();
    m.verify(dir, paths::lm_ckpt, h, "train-lm");
    m.verify(dir, paths::probe_report, h, "probe");

    Vocab vocab = build_vocab();
    DatasetSplit sp = pipedetail::load_split(cfg, dir, vocab);
    LmModel model = pipedetail::load_lm_checkpoint(cfg, dir, vocab);
    const int layer = pipedetail::load_selected_layer(dir);
    ActCache cache = step_harvest_sae(cfg, model, sp, layer);
    cache.model_hash = m.entries().at(paths::lm_ckpt).sha256;
    cache.corpus_hash = m.entries().at(paths::train_corpus).sha256;
    write_actcache(dir + "/" + paths::sae_cache, cache);
    TrainSaeLog log;
    SaeParams sae = step_train_sae(cfg, cache, &log);
    save_sae(dir + "/" + paths::sae_ckpt, sae, cfg.canonical_json());
    {
        nlohmann::json j{{"initial_mse", log.initial_mse},       {"final_mse", log.final_mse},
                         {"epoch_mse", log.epoch_mse},           {"heldout_fvu", log.heldout_fvu},
                         {"dead_fraction", log.dead_fraction},   {"steps", log.steps},
                         {"h", cfg.sae_h()},                     {"k", cfg.sae_k()},
                         {"k_aux", cfg.sae_k_aux()}};
        std::ofstream out(dir + "/" + paths::sae_log, std::ios::binary);
        out << j.dump(2) << '\n';
    }
    m.record(dir, paths::sae_cache, h);
    m.record(dir, paths::sae_ckpt, h);
    m.record(dir, paths::sae_log, h);
}

inline void stage_rank(const RunConfig& cfg, const std::string& dir, bool force) {
    StageLock lock(dir);
    pipedetail::check_config_matches(cfg, dir);
    pipedetail::require_fresh(dir, paths::ranking_sae, force);
    Manifest m = Manifest::load(dir);
    const std::string h = cfg.hash();
    m.verify(dir, paths::lm_ckpt, h, "train-lm");
    m.verify(dir, paths::sae_ckpt, h, "train-sae");
    m.verify(dir, paths::probe_report, h, "probe");

    Vocab vocab = build_vocab();
    DatasetSplit sp = pipedetail::load_split(cfg, dir, vocab);
    LmModel model = pipedetail::load_lm_checkpoint(cfg, dir, vocab);
    SaeParams sae;
    load_sae(dir + "/" + paths::sae_ckpt, sae);
    sae.k = cfg.sae_k();
    sae.k_aux = cfg.sae_k_aux();
    const int layer = pipedetail::load_selected_layer(dir);
    Rankings r = step_rank(cfg, model, sae, sp, layer);
    write_ranking(dir + "/" + paths::ranking_sae, r.sae);
    write_ranking(dir + "/" + paths::ranking_neurons, r.neurons);
    m.record(dir, paths::ranking_sae, h);
    m.record(dir, paths::ranking_neurons, h);
}

inline void stage_eval(const RunConfig& cfg, const std::string& dir, bool force) {
    StageLock lock(dir);
    pipedetail::check_config_matches(cfg, dir);
    pipedetail::require_fresh(dir, paths::report_records, force);
    Manifest m = Manifest::load(dir);
    const std::string h = cfg.hash();
    m.verify(dir, paths::lm_ckpt, h, "train-lm");
    m.verify(dir, paths::sae_ckpt, h, "train-sae");
    m.verify(dir, paths::probe_report, h, "probe");
    m.verify(dir, paths::ranking_sae, h, "rank");
    m.verify(dir, paths::ranking_neurons, h, "rank");

    Vocab vocab = build_vocab();
    DatasetSplit sp = pipedetail::load_split(cfg, dir, vocab);
    LmModel model = pipedetail::load_lm_checkpoint(cfg, dir, vocab);
    SaeParams sae;
    load_sae(dir + "/" + paths::sae_ckpt, sae);
    sae.k = cfg.sae_k();
    sae.k_aux = cfg.sae_k_aux();
    const int layer = pipedetail::load_selected_layer(dir);
    const std::string prob_cache_path = dir + "/" + paths::prob_cache(layer);
    m.verify(dir, paths::prob_cache(layer), h, "harvest");
    ActCache prob_cache = read_actcache(prob_cache_path);
    Rankings rankings;
    rankings.sae = read_ranking(dir + "/" + paths::ranking_sae);
    rankings.neurons = read_ranking(dir + "/" + paths::ranking_neurons);
    SteeringSet steering = step_steering(cfg, sp, prob_cache, sae, rankings);
    EvalReport report = step_eval(cfg, model, vocab, sae, rankings, steering, sp, layer);
    write_report(dir + "/" + paths::report_records, dir + "/" + paths::report_table, report);
    {
        nlohmann::json vecs = nlohmann::json::array();
        for (const auto& [key, v] : steering.vectors)
            vecs.push_back({{"source", key.first}, {"use_sae", key.second == 1}, {"norm", v.norm()}});
        nlohmann::json j{{"selected_layer", layer}, {"vectors", vecs}};
        std::ofstream out(dir + "/" + paths::steering_meta, std::ios::binary);
        out << j.dump(2) << '\n';
    }
    m.record(dir, paths::report_records, h);
    m.record(dir, paths::report_table, h);
    m.record(dir, paths::steering_meta, h);
}

// All stages in order against one directory.
inline void run_pipeline_to_dir(const RunConfig& cfg, const std::string& dir, bool force) {
    stage_gen_corpus(cfg, dir, force);
    stage_train_lm(cfg, dir, force);
    stage_harvest(cfg, dir, force);
    stage_probe(cfg, dir, force);
    stage_train_sae(cfg, dir, force);
    stage_rank(cfg, dir, force);
    stage_eval(cfg, dir, force);
}

}  // namespace piilab
