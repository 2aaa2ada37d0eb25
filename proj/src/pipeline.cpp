#include "steerlab/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <filesystem>
#include <map>
#include <mutex>
#include <set>
#include <thread>

#include <json.hpp>

#include "steerlab/io.hpp"

namespace steerlab::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// worker pool
// ---------------------------------------------------------------------------

void parallel_for(int n, int jobs, const std::function<void(int)>& fn) {
    jobs = std::max(1, std::min(jobs, n));
    if (jobs == 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<int> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    for (int t = 0; t < jobs; ++t) {
        pool.emplace_back([&] {
            for (;;) {
                const int i = next.fetch_add(1);
                if (i >= n) return;
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_mutex);
                    if (!error) error = std::current_exception();
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

// ---------------------------------------------------------------------------
// method sets
// ---------------------------------------------------------------------------

namespace {

const std::set<std::string> kSubspaceMethods = {"diffmean", "pca", "lat",
                                                "probe",    "ssv", "reft_r1"};
const std::set<std::string> kDetectMethods = {"diffmean", "pca", "lat", "probe", "ssv",
                                              "reft_r1",  "bow", "sae", "sae_a", "ixg", "ig"};
const std::set<std::string> kSteerMethods = {"diffmean", "pca",     "lat", "probe",
                                             "ssv",      "reft_r1", "sae", "sae_a"};

struct Paths {
    fs::path out;
    explicit Paths(const RunConfig& cfg) : out(cfg.out_dir) {}

    std::string model_header() const { return (out / "model.json").string(); }
    std::string model_blob() const { return (out / "model.f64").string(); }
    std::string corpus_dir() const { return (out / "corpus").string(); }
    std::string train_seqs(const std::string& cid) const {
        return (out / "corpus" / (cid + ".train.jsonl")).string();
    }
    std::string eval_seqs(const std::string& cid) const {
        return (out / "corpus" / (cid + ".eval.jsonl")).string();
    }
    std::string steer_seqs(const std::string& cid) const {
        return (out / "corpus" / (cid + ".steer.jsonl")).string();
    }
    std::string extra_negs() const { return (out / "corpus" / "extra_negatives.jsonl").string(); }
    std::string acts_dir(const std::string& cid, const std::string& split) const {
        return (out / "acts" / cid / split).string();
    }
    std::string extra_acts_dir() const { return (out / "acts" / "extra_negatives").string(); }
    std::string dict_header(const std::string& method) const {
        return (out / "dicts" / (method + ".json")).string();
    }
    std::string dict_blob(const std::string& method) const {
        return (out / "dicts" / (method + ".w.f32")).string();
    }
    std::string bow_file() const { return (out / "dicts" / "bow.json").string(); }
    std::string head_file(const std::string& cid) const {
        return (out / "heads" / (cid + ".json")).string();
    }
    std::string sae_header() const { return (out / "sae" / "sae.json").string(); }
    std::string sae_blob() const { return (out / "sae" / "sae.f32").string(); }
    std::string sae_selection() const { return (out / "sae" / "selection.json").string(); }
    std::string detection_jsonl() const { return (out / "reports" / "detection.jsonl").string(); }
    std::string detection_csv() const {
        return (out / "reports" / "detection_summary.csv").string();
    }
    std::string steering_jsonl() const { return (out / "reports" / "steering.jsonl").string(); }
    std::string steering_csv() const {
        return (out / "reports" / "steering_summary.csv").string();
    }
    std::string selection_csv() const {
        return (out / "reports" / "steering_selection.csv").string();
    }
    std::string winrate_csv() const { return (out / "reports" / "winrate.csv").string(); }
    std::string projection_csv(const std::string& method) const {
        return (out / "projections" / (method + "_pca2.csv")).string();
    }
    std::string manifest() const { return (out / "MANIFEST.json").string(); }
    std::string resolved_config() const { return (out / "resolved_config.json").string(); }
};

uint64_t concept_seed(uint64_t base, const std::string& cid) {
    return base ^ numkit::fnv1a(cid);
}

}  // namespace

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

std::vector<double> RunConfig::resolved_factor_grid() const {
    if (!factor_grid.empty()) return factor_grid;
    if (factor_preset == "clamp") return steer_eval::clamp_factor_grid();
    return steer_eval::default_factor_grid();
}

void RunConfig::validate() const {
    if (concepts.empty()) throw ConfigError("config: no concepts");
    std::set<std::string> ids;
    for (const auto& c : concepts) {
        if (c.concept_id.empty()) throw ConfigError("config: concept with empty id");
        if (!ids.insert(c.concept_id).second)
            throw ConfigError("config: duplicate concept id " + c.concept_id);
    }
    if (layer < 1 || layer > model.layers) throw ConfigError("config: layer out of range");
    if (n_train <= 0 || n_eval <= 0 || n_train % 2 || n_eval % 2)
        throw ConfigError("config: n_train and n_eval must be positive and even");
    if (extra_negatives < 0) throw ConfigError("config: extra_negatives must be >= 0");
    if (steer_instructions < 2) throw ConfigError("config: need at least 2 steer instructions");
    if (steer_max_new < 1) throw ConfigError("config: steer_max_new must be >= 1");
    if (ig_steps < 1) throw ConfigError("config: ig_steps must be >= 1");
    for (const auto& m : detect_methods)
        if (!kDetectMethods.count(m)) throw RunError("unknown detection method: " + m);
    for (const auto& m : steer_methods)
        if (!kSteerMethods.count(m)) throw RunError("unknown steering method: " + m);
    if (!winrate_baseline.empty() &&
        std::find(steer_methods.begin(), steer_methods.end(), winrate_baseline) ==
            steer_methods.end())
        throw ConfigError("config: winrate baseline is not a steered method");
    const auto grid = resolved_factor_grid();
    for (size_t i = 1; i < grid.size(); ++i)
        if (grid[i] <= grid[i - 1]) throw ConfigError("config: factor grid must ascend");
    if (sae_header.empty() != sae_blob.empty())
        throw ConfigError("config: sae_header and sae_blob must be given together");
}

RunConfig default_desk_config() {
    RunConfig cfg;
    cfg.seed = 7;
    cfg.model.seed = 12;
    cfg.layer = 1;
    const corpus::Genre genres[3] = {corpus::Genre::text, corpus::Genre::code,
                                     corpus::Genre::math};
    for (int c = 0; c < 8; ++c) {
        corpus::ConceptSpec spec;
        spec.concept_id = "c" + std::to_string(c);
        spec.genre = genres[c % 3];
        spec.planted_tokens = {40 + 3 * c, 41 + 3 * c, 42 + 3 * c};
        spec.plant_rate = spec.genre == corpus::Genre::text ? 0.45 : 0.35;
        cfg.concepts.push_back(spec);
    }
    cfg.detect_methods = {"diffmean", "pca", "lat", "probe", "ssv", "reft_r1", "bow",
                          "sae",      "sae_a", "ixg", "ig"};
    cfg.steer_methods = {"diffmean", "reft_r1", "sae"};
    cfg.winrate_baseline = "sae";

    cfg.probe_cfg = {20, 256, 2e-2, 1e-3, 0.0, 4, 100};
    cfg.reft_cfg = {10, 3, 2e-2, 0.0, 5e-3, 4, 100};
    cfg.ssv_cfg = {6, 6, 1e-2, 0.0, 0.0, 4, 100};
    cfg.bow_c = 100.0;
    cfg.head_cfg = {16, 60, 16, 1e-2, 100};
    return cfg;
}

namespace {

learners::TrainConfig parse_train_cfg(const json& j, learners::TrainConfig base) {
    if (j.contains("epochs")) base.epochs = j.at("epochs").get<int>();
    if (j.contains("batch")) base.batch = j.at("batch").get<int>();
    if (j.contains("lr")) base.lr = j.at("lr").get<double>();
    if (j.contains("weight_decay")) base.weight_decay = j.at("weight_decay").get<double>();
    if (j.contains("l1")) base.l1 = j.at("l1").get<double>();
    if (j.contains("k")) base.k = j.at("k").get<int>();
    if (j.contains("seed")) base.seed = j.at("seed").get<uint64_t>();
    return base;
}

}  // namespace

RunConfig parse_config_json(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const std::exception& e) {
        throw ConfigError(std::string("config: invalid JSON: ") + e.what());
    }
    RunConfig cfg = default_desk_config();
    try {
        if (j.contains("seed")) cfg.seed = j.at("seed").get<uint64_t>();
        if (j.contains("out")) cfg.out_dir = j.at("out").get<std::string>();
        if (j.contains("jobs")) cfg.jobs = j.at("jobs").get<int>();
        if (j.contains("model")) {
            const auto& m = j.at("model");
            if (m.contains("vocab_size")) cfg.model.vocab_size = m.at("vocab_size").get<int>();
            if (m.contains("dim")) cfg.model.dim = m.at("dim").get<int>();
            if (m.contains("layers")) cfg.model.layers = m.at("layers").get<int>();
            if (m.contains("heads")) cfg.model.heads = m.at("heads").get<int>();
            if (m.contains("max_seq")) cfg.model.max_seq = m.at("max_seq").get<int>();
            if (m.contains("seed")) cfg.model.seed = m.at("seed").get<uint64_t>();
        }
        if (j.contains("layer")) cfg.layer = j.at("layer").get<int>();
        if (j.contains("concepts_file")) {
            const auto path = j.at("concepts_file").get<std::string>();
            json file_json;
            try {
                file_json = json::parse(io::read_text_file(path));
            } catch (const std::exception& e) {
                throw ConfigError("config: concepts_file " + path + ": " + e.what());
            }
            j["concepts"] = file_json;
        }
        if (j.contains("concepts")) {
            cfg.concepts.clear();
            for (const auto& c : j.at("concepts")) {
                corpus::ConceptSpec spec;
                spec.concept_id = c.at("id").get<std::string>();
                spec.genre = corpus::genre_from_string(c.value("genre", "text"));
                spec.planted_tokens = c.at("planted_tokens").get<std::vector<int>>();
                if (c.contains("contrast_tokens"))
                    spec.contrast_tokens = c.at("contrast_tokens").get<std::vector<int>>();
                spec.plant_rate = c.value("plant_rate", 0.35);
                cfg.concepts.push_back(std::move(spec));
            }
        }
        if (j.contains("n_train")) cfg.n_train = j.at("n_train").get<int>();
        if (j.contains("n_eval")) cfg.n_eval = j.at("n_eval").get<int>();
        if (j.contains("hard_negative_quota"))
            cfg.hard_negative_quota = j.at("hard_negative_quota").get<double>();
        if (j.contains("extra_negatives")) cfg.extra_negatives = j.at("extra_negatives").get<int>();
        if (j.contains("detect_methods"))
            cfg.detect_methods = j.at("detect_methods").get<std::vector<std::string>>();
        if (j.contains("steer_methods"))
            cfg.steer_methods = j.at("steer_methods").get<std::vector<std::string>>();
        if (j.contains("winrate_baseline"))
            cfg.winrate_baseline = j.at("winrate_baseline").get<std::string>();
        if (j.contains("pooling"))
            cfg.pooling = detect_eval::pooling_from_string(j.at("pooling").get<std::string>());
        if (j.contains("factor_preset")) cfg.factor_preset = j.at("factor_preset").get<std::string>();
        if (j.contains("factor_grid"))
            cfg.factor_grid = j.at("factor_grid").get<std::vector<double>>();
        if (j.contains("sae_intervention"))
            cfg.sae_intervention = j.at("sae_intervention").get<std::string>();
        if (j.contains("steer")) {
            const auto& s = j.at("steer");
            if (s.contains("instructions")) cfg.steer_instructions = s.at("instructions").get<int>();
            if (s.contains("max_new")) cfg.steer_max_new = s.at("max_new").get<int>();
        }
        if (j.contains("ig_steps")) cfg.ig_steps = j.at("ig_steps").get<int>();
        if (j.contains("sae")) {
            const auto& s = j.at("sae");
            if (s.contains("z")) cfg.sae_z = s.at("z").get<int>();
            if (s.contains("header")) cfg.sae_header = s.at("header").get<std::string>();
            if (s.contains("blob")) cfg.sae_blob = s.at("blob").get<std::string>();
        }
        if (j.contains("judge_endpoint") && !j.at("judge_endpoint").is_null())
            cfg.judge_endpoint = j.at("judge_endpoint").get<std::string>();
        if (j.contains("train")) {
            const auto& t = j.at("train");
            if (t.contains("probe")) cfg.probe_cfg = parse_train_cfg(t.at("probe"), cfg.probe_cfg);
            if (t.contains("reft_r1")) cfg.reft_cfg = parse_train_cfg(t.at("reft_r1"), cfg.reft_cfg);
            if (t.contains("ssv")) cfg.ssv_cfg = parse_train_cfg(t.at("ssv"), cfg.ssv_cfg);
            if (t.contains("bow") && t.at("bow").contains("c"))
                cfg.bow_c = t.at("bow").at("c").get<double>();
            if (t.contains("head")) {
                const auto& h = t.at("head");
                if (h.contains("hidden")) cfg.head_cfg.hidden = h.at("hidden").get<int>();
                if (h.contains("epochs")) cfg.head_cfg.epochs = h.at("epochs").get<int>();
                if (h.contains("batch")) cfg.head_cfg.batch = h.at("batch").get<int>();
                if (h.contains("lr")) cfg.head_cfg.lr = h.at("lr").get<double>();
                if (h.contains("seed")) cfg.head_cfg.seed = h.at("seed").get<uint64_t>();
            }
        }
    } catch (const ConfigError&) {
        throw;
    } catch (const RunError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    return cfg;
}

RunConfig load_config(const std::string& path) {
    std::string text;
    try {
        text = io::read_text_file(path);
    } catch (const std::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    return parse_config_json(text);
}

namespace {

json config_to_json(const RunConfig& cfg) {
    json concepts = json::array();
    for (const auto& c : cfg.concepts) {
        concepts.push_back({{"id", c.concept_id},
                            {"genre", corpus::to_string(c.genre)},
                            {"planted_tokens", c.planted_tokens},
                            {"contrast_tokens", c.contrast_tokens},
                            {"plant_rate", c.plant_rate}});
    }
    auto train_cfg = [](const learners::TrainConfig& t) {
        return json{{"epochs", t.epochs},   {"batch", t.batch}, {"lr", t.lr},
                    {"weight_decay", t.weight_decay}, {"l1", t.l1},  {"k", t.k},
                    {"seed", t.seed}};
    };
    // the output directory and worker count are environmental, not part of
    // the experiment; omitting them keeps re-runs bit-identical anywhere
    return json{
        {"seed", cfg.seed},
        {"model",
         {{"vocab_size", cfg.model.vocab_size},
          {"dim", cfg.model.dim},
          {"layers", cfg.model.layers},
          {"heads", cfg.model.heads},
          {"max_seq", cfg.model.max_seq},
          {"seed", cfg.model.seed}}},
        {"layer", cfg.layer},
        {"concepts", concepts},
        {"n_train", cfg.n_train},
        {"n_eval", cfg.n_eval},
        {"hard_negative_quota", cfg.hard_negative_quota},
        {"extra_negatives", cfg.extra_negatives},
        {"detect_methods", cfg.detect_methods},
        {"steer_methods", cfg.steer_methods},
        {"winrate_baseline", cfg.winrate_baseline},
        {"pooling", detect_eval::to_string(cfg.pooling)},
        {"factor_preset", cfg.factor_preset},
        {"factor_grid", cfg.factor_grid},
        {"sae_intervention", cfg.sae_intervention},
        {"steer", {{"instructions", cfg.steer_instructions}, {"max_new", cfg.steer_max_new}}},
        {"ig_steps", cfg.ig_steps},
        {"sae", {{"z", cfg.sae_z}, {"header", cfg.sae_header}, {"blob", cfg.sae_blob}}},
        {"judge_endpoint", cfg.judge_endpoint},
        {"train",
         {{"probe", train_cfg(cfg.probe_cfg)},
          {"reft_r1", train_cfg(cfg.reft_cfg)},
          {"ssv", train_cfg(cfg.ssv_cfg)},
          {"bow", {{"c", cfg.bow_c}}},
          {"head",
           {{"hidden", cfg.head_cfg.hidden},
            {"epochs", cfg.head_cfg.epochs},
            {"batch", cfg.head_cfg.batch},
            {"lr", cfg.head_cfg.lr},
            {"seed", cfg.head_cfg.seed}}}}},
    };
}

}  // namespace

// ---------------------------------------------------------------------------
// stage: gen
// ---------------------------------------------------------------------------

void stage_gen(const RunConfig& cfg) {
    cfg.validate();
    Paths paths(cfg);
    fs::create_directories(paths.corpus_dir());
    io::write_file(paths.resolved_config(), config_to_json(cfg).dump(2) + "\n");

    const auto model = toylm::build_toy_lm(cfg.model);
    toylm::save_model(model, paths.model_header(), paths.model_blob());
    const auto layout = corpus::VocabLayout::for_vocab(cfg.model.vocab_size);

    parallel_for(static_cast<int>(cfg.concepts.size()), cfg.jobs, [&](int i) {
        const auto& spec = cfg.concepts[i];
        try {
            auto corp = corpus::plant_concept_corpus(model, layout, spec, cfg.n_train,
                                                     cfg.n_eval, cfg.seed,
                                                     cfg.hard_negative_quota);
            corpus::save_sequences(corp.train, paths.train_seqs(spec.concept_id));
            corpus::save_sequences(corp.eval, paths.eval_seqs(spec.concept_id));
            auto instr = corpus::steering_instructions(layout, spec.genre, spec.concept_id,
                                                       cfg.steer_instructions, cfg.seed);
            corpus::save_sequences(instr, paths.steer_seqs(spec.concept_id));
        } catch (const std::exception& e) {
            throw RunError("corpus: concept " + spec.concept_id + ": " + e.what());
        }
    });

    auto extra = corpus::shared_negative_pool(model, layout, cfg.extra_negatives, cfg.seed);
    corpus::save_sequences(extra, paths.extra_negs());
}

// ---------------------------------------------------------------------------
// stage: collect
// ---------------------------------------------------------------------------

void stage_collect(const RunConfig& cfg) {
    cfg.validate();
    Paths paths(cfg);
    const auto model = toylm::load_model(paths.model_header(), paths.model_blob());

    parallel_for(static_cast<int>(cfg.concepts.size()), cfg.jobs, [&](int i) {
        const auto& cid = cfg.concepts[i].concept_id;
        try {
            auto train = corpus::load_sequences(paths.train_seqs(cid));
            auto eval = corpus::load_sequences(paths.eval_seqs(cid));
            corpus::save_dataset(corpus::collect_activations(model, train, cfg.layer, "train"),
                                 paths.acts_dir(cid, "train"));
            corpus::save_dataset(corpus::collect_activations(model, eval, cfg.layer, "eval"),
                                 paths.acts_dir(cid, "eval"));
        } catch (const std::exception& e) {
            throw RunError("collect: concept " + cid + ": " + e.what());
        }
    });

    auto extra = corpus::load_sequences(paths.extra_negs());
    if (!extra.empty())
        corpus::save_dataset(corpus::collect_activations(model, extra, cfg.layer, "eval"),
                             paths.extra_acts_dir());
}

// ---------------------------------------------------------------------------
// stage: train
// ---------------------------------------------------------------------------

namespace {

bool wants(const RunConfig& cfg, const std::string& method) {
    return std::find(cfg.detect_methods.begin(), cfg.detect_methods.end(), method) !=
               cfg.detect_methods.end() ||
           std::find(cfg.steer_methods.begin(), cfg.steer_methods.end(), method) !=
               cfg.steer_methods.end();
}

void save_head(const attribution::ClsHead& head, const std::string& path) {
    json j = {{"hidden", head.hidden_dim()}, {"in_dim", head.in_dim()},
              {"w1", head.w1.data},          {"b1", head.b1},
              {"w2", head.w2},               {"b2", head.b2}};
    io::write_file(path, j.dump() + "\n");
}

attribution::ClsHead load_head(const std::string& path) {
    const auto j = json::parse(io::read_text_file(path));
    attribution::ClsHead head;
    const int d = j.at("in_dim").get<int>();
    const int hidden = j.at("hidden").get<int>();
    head.w1 = numkit::Matrix(d, hidden, j.at("w1").get<std::vector<double>>());
    head.b1 = j.at("b1").get<std::vector<double>>();
    head.w2 = j.at("w2").get<std::vector<double>>();
    head.b2 = j.at("b2").get<double>();
    return head;
}

void save_bow(const std::vector<learners::BowClassifier>& classifiers,
              const std::vector<std::string>& cids, const std::string& path) {
    json per_concept = json::object();
    for (size_t i = 0; i < classifiers.size(); ++i) {
        const auto& cls = classifiers[i];
        json vocab = json::array();
        std::vector<const std::string*> by_index(cls.vocabulary.size());
        for (const auto& [word, idx] : cls.vocabulary) by_index[idx] = &word;
        for (const auto* w : by_index) vocab.push_back(*w);
        per_concept[cids[i]] = {{"vocabulary", vocab},
                                {"weights", cls.weights},
                                {"bias", cls.bias},
                                {"c", cls.c}};
    }
    io::write_file(path, json{{"format", "bow-v1"}, {"concepts", per_concept}}.dump() + "\n");
}

std::map<std::string, learners::BowClassifier> load_bow(const std::string& path) {
    const auto j = json::parse(io::read_text_file(path));
    std::map<std::string, learners::BowClassifier> out;
    for (const auto& [cid, rec] : j.at("concepts").items()) {
        learners::BowClassifier cls;
        const auto vocab = rec.at("vocabulary").get<std::vector<std::string>>();
        for (size_t i = 0; i < vocab.size(); ++i) cls.vocabulary[vocab[i]] = static_cast<int>(i);
        cls.weights = rec.at("weights").get<std::vector<double>>();
        cls.bias = rec.at("bias").get<double>();
        cls.c = rec.at("c").get<double>();
        out[cid] = std::move(cls);
    }
    return out;
}

}  // namespace

void stage_train(const RunConfig& cfg) {
    cfg.validate();
    Paths paths(cfg);
    fs::create_directories((paths.out / "dicts").string());
    const auto model = toylm::load_model(paths.model_header(), paths.model_blob());
    const auto layout = corpus::VocabLayout::for_vocab(cfg.model.vocab_size);
    const int n = static_cast<int>(cfg.concepts.size());

    // per-concept fits, merged in concept order afterwards
    std::map<std::string, std::vector<learners::ConceptSubspace>> dicts;
    for (const auto& m : kSubspaceMethods)
        if (wants(cfg, m)) dicts[m].resize(n);
    std::vector<learners::BowClassifier> bows(wants(cfg, "bow") ? n : 0);
    const bool want_head = wants(cfg, "ixg") || wants(cfg, "ig");

    parallel_for(n, cfg.jobs, [&](int i) {
        const auto& spec = cfg.concepts[i];
        const auto& cid = spec.concept_id;
        std::string where = "train";
        try {
            auto train_ds = corpus::load_dataset(paths.acts_dir(cid, "train"));
            auto train_seqs = corpus::load_sequences(paths.train_seqs(cid));

            for (const auto& [method, _] : dicts) {
                where = method;
                learners::ConceptSubspace sub;
                if (method == "diffmean") sub = learners::fit_diffmean(train_ds);
                else if (method == "pca") sub = learners::fit_pca_subspace(train_ds);
                else if (method == "lat")
                    sub = learners::fit_lat(train_ds, concept_seed(cfg.seed, cid));
                else if (method == "probe") {
                    auto c = cfg.probe_cfg;
                    c.seed = concept_seed(c.seed, cid);
                    sub = learners::fit_probe(train_ds, c);
                } else if (method == "ssv") {
                    auto c = cfg.ssv_cfg;
                    c.seed = concept_seed(c.seed, cid);
                    sub = learners::fit_ssv(model, train_seqs, cfg.layer, c);
                } else if (method == "reft_r1") {
                    auto c = cfg.reft_cfg;
                    c.seed = concept_seed(c.seed, cid);
                    sub = learners::fit_reft_r1(model, train_seqs, cfg.layer, c);
                }
                dicts[method][i] = std::move(sub);
            }
            if (!bows.empty()) {
                where = "bow";
                bows[i] = learners::fit_bow(layout, train_seqs, cfg.bow_c,
                                            concept_seed(cfg.seed, cid));
            }
            if (want_head) {
                where = "cls_head";
                auto hc = cfg.head_cfg;
                hc.seed = concept_seed(hc.seed, cid);
                fs::create_directories((paths.out / "heads").string());
                save_head(attribution::train_cls_head(model, train_seqs, hc),
                          paths.head_file(cid));
            }
        } catch (const std::exception& e) {
            throw RunError("train: method " + where + " concept " + cid + ": " + e.what());
        }
    });

    for (const auto& [method, subs] : dicts)
        learners::save_dictionary(subs, paths.dict_header(method), paths.dict_blob(method));
    if (!bows.empty()) {
        std::vector<std::string> cids;
        for (const auto& c : cfg.concepts) cids.push_back(c.concept_id);
        save_bow(bows, cids, paths.bow_file());
    }

    // SAE: external file or a planted dictionary with m from the pooled eval rows
    if (wants(cfg, "sae") || wants(cfg, "sae_a")) {
        fs::create_directories((paths.out / "sae").string());
        json selection = json::object();
        if (!cfg.sae_header.empty()) {
            auto dict = saekit::load_sae(cfg.sae_header, cfg.sae_blob);
            saekit::save_sae(dict, paths.sae_header(), paths.sae_blob());
            selection["source"] = "file";
        } else {
            // each concept's "true feature": the normalized mean embedding of
            // its planted tokens (the generative ground-truth direction)
            std::map<std::string, std::vector<double>> directions;
            long total_rows = 0;
            std::vector<corpus::ActivationDataset> evals;
            for (const auto& spec : cfg.concepts) {
                std::vector<double> dir(cfg.model.dim, 0.0);
                for (int t : spec.planted_tokens)
                    for (int i = 0; i < cfg.model.dim; ++i) dir[i] += model.emb(t, i);
                numkit::normalize(dir);
                directions[spec.concept_id] = std::move(dir);
                evals.push_back(corpus::load_dataset(paths.acts_dir(spec.concept_id, "eval")));
                total_rows += evals.back().row_count_total();
            }
            numkit::Matrix reference(static_cast<int>(total_rows), cfg.model.dim);
            long row = 0;
            for (const auto& ds : evals)
                for (long r = 0; r < ds.row_count_total(); ++r, ++row)
                    std::copy(ds.rows.row_ptr(static_cast<int>(r)),
                              ds.rows.row_ptr(static_cast<int>(r)) + ds.rows.cols,
                              reference.row_ptr(static_cast<int>(row)));
            auto planted = saekit::plant_sae(concept_seed(cfg.seed, "sae"), cfg.model.dim,
                                             cfg.sae_z, directions, &reference);
            saekit::save_sae(planted.dict, paths.sae_header(), paths.sae_blob());
            selection["source"] = "planted";
            json latents = json::object();
            for (const auto& [cid, f] : planted.latent_of_concept) latents[cid] = f;
            selection["planted_latents"] = latents;
        }
        io::write_file(paths.sae_selection(), selection.dump(2) + "\n");
    }
}

// ---------------------------------------------------------------------------
// stage: detect
// ---------------------------------------------------------------------------

namespace {

learners::ConceptSubspace sae_latent_subspace(const saekit::SaeDictionary& dict, int f,
                                              const std::string& cid,
                                              const std::string& method) {
    learners::ConceptSubspace sub;
    sub.concept_id = cid;
    sub.method = method;
    sub.unit_norm = false;
    sub.activation = learners::DetectionActivation::jumprelu;
    sub.jump_theta = dict.theta[f];
    sub.bias = dict.b_enc[f];
    sub.w.resize(dict.d());
    for (int i = 0; i < dict.d(); ++i) sub.w[i] = dict.w_enc(i, f);
    return sub;
}

std::vector<double> bow_sequence_scores(const learners::BowClassifier& cls,
                                        const corpus::VocabLayout& layout,
                                        const std::vector<corpus::LabeledSequence>& seqs) {
    std::vector<double> out;
    out.reserve(seqs.size());
    for (const auto& s : seqs) out.push_back(cls.score_tokens(layout, s.full()));
    return out;
}

// Token scores for a whole dataset through a per-sequence scorer.
std::vector<double> attribution_token_scores(
    const corpus::ActivationDataset& ds,
    const std::function<std::vector<double>(std::span<const int>)>& scorer) {
    std::vector<double> out;
    out.reserve(ds.row_count_total());
    for (int s = 0; s < ds.seq_count(); ++s) {
        auto scores = scorer(ds.seq_tokens[s]);
        if (static_cast<int>(scores.size()) != ds.row_counts[s])
            throw RunError("attribution: score count != token count");
        out.insert(out.end(), scores.begin(), scores.end());
    }
    return out;
}

}  // namespace

void stage_detect(const RunConfig& cfg) {
    cfg.validate();
    Paths paths(cfg);
    fs::create_directories((paths.out / "reports").string());
    const auto model = toylm::load_model(paths.model_header(), paths.model_blob());
    const auto layout = corpus::VocabLayout::for_vocab(cfg.model.vocab_size);
    const int n = static_cast<int>(cfg.concepts.size());

    // shared eval-side inputs
    std::vector<corpus::ActivationDataset> evals(n);
    std::vector<std::vector<corpus::LabeledSequence>> eval_seqs(n);
    parallel_for(n, cfg.jobs, [&](int i) {
        evals[i] = corpus::load_dataset(paths.acts_dir(cfg.concepts[i].concept_id, "eval"));
        eval_seqs[i] = corpus::load_sequences(paths.eval_seqs(cfg.concepts[i].concept_id));
    });
    corpus::ActivationDataset extra_pool;
    std::vector<corpus::LabeledSequence> extra_seqs;
    const bool has_extra = cfg.extra_negatives > 0;
    if (has_extra) {
        extra_pool = corpus::load_dataset(paths.extra_acts_dir());
        extra_seqs = corpus::load_sequences(paths.extra_negs());
    }

    saekit::SaeDictionary sae;
    json sae_selection;
    const bool want_sae = wants(cfg, "sae") || wants(cfg, "sae_a");
    if (want_sae) {
        sae = saekit::load_sae(paths.sae_header(), paths.sae_blob());
        sae_selection = json::parse(io::read_text_file(paths.sae_selection()));
    }

    std::vector<detect_eval::DetectionReport> reports;
    json selection_out = sae_selection.is_null() ? json::object() : sae_selection;
    json sae_mc = json::object();
    json sae_a_mc = json::object();

    for (const auto& method : cfg.detect_methods) {
        std::vector<detect_eval::DetectionReport> method_reports(n);
        if (kSubspaceMethods.count(method)) {
            auto dict = learners::load_dictionary(paths.dict_header(method),
                                                  paths.dict_blob(method));
            if (static_cast<int>(dict.size()) != n)
                throw RunError("detect: dictionary " + method + " count mismatch");
            parallel_for(n, cfg.jobs, [&](int i) {
                try {
                    method_reports[i] = detect_eval::evaluate_subspace(
                        dict[i], evals[i], cfg.pooling, has_extra ? &extra_pool : nullptr);
                } catch (const std::exception& e) {
                    throw RunError("detect: method " + method + " concept " +
                                   cfg.concepts[i].concept_id + ": " + e.what());
                }
            });
            // m_c is now known; refresh the stored dictionary
            learners::save_dictionary(dict, paths.dict_header(method), paths.dict_blob(method));
        } else if (method == "bow") {
            auto bows = load_bow(paths.bow_file());
            parallel_for(n, cfg.jobs, [&](int i) {
                const auto& cid = cfg.concepts[i].concept_id;
                try {
                    const auto& cls = bows.at(cid);
                    auto seq_scores = bow_sequence_scores(cls, layout, eval_seqs[i]);
                    std::vector<int> labels;
                    for (const auto& s : eval_seqs[i])
                        labels.push_back(corpus::label_binary(s.label));
                    std::vector<double> extra_scores;
                    if (has_extra) extra_scores = bow_sequence_scores(cls, layout, extra_seqs);
                    method_reports[i] = detect_eval::evaluate_scores(
                        cid, "bow", "sequence", std::move(seq_scores), std::move(labels), {},
                        extra_scores);
                } catch (const std::exception& e) {
                    throw RunError("detect: method bow concept " + cid + ": " + e.what());
                }
            });
        } else if (method == "sae" || method == "sae_a") {
            std::vector<json> latent_recs(n);
            parallel_for(n, cfg.jobs, [&](int i) {
                const auto& cid = cfg.concepts[i].concept_id;
                try {
                    int latent = -1;
                    if (method == "sae") {
                        if (sae_selection.contains("planted_latents"))
                            latent = sae_selection.at("planted_latents").at(cid).get<int>();
                        else
                            throw RunError("sae: no planted latent map; configure sae_a or "
                                           "provide per-concept latents");
                    } else {
                        auto train_ds =
                            corpus::load_dataset(paths.acts_dir(cid, "train"));
                        latent = saekit::select_feature_auroc(sae, train_ds);
                    }
                    auto sub = sae_latent_subspace(sae, latent, cid, method);
                    method_reports[i] = detect_eval::evaluate_subspace(
                        sub, evals[i], cfg.pooling, has_extra ? &extra_pool : nullptr);
                    latent_recs[i] = {{"latent", latent}, {"m_c", sub.max_activation}};
                } catch (const std::exception& e) {
                    throw RunError("detect: method " + method + " concept " + cid + ": " +
                                   e.what());
                }
            });
            for (int i = 0; i < n; ++i)
                (method == "sae" ? sae_mc : sae_a_mc)[cfg.concepts[i].concept_id] =
                    latent_recs[i];
        } else if (method == "ixg" || method == "ig") {
            parallel_for(n, cfg.jobs, [&](int i) {
                const auto& cid = cfg.concepts[i].concept_id;
                try {
                    auto head = load_head(paths.head_file(cid));
                    auto scorer = [&](std::span<const int> toks) {
                        return method == "ixg"
                                   ? attribution::ixg_scores(model, head, toks, cfg.layer)
                                   : attribution::ig_scores(model, head, toks, cfg.layer,
                                                            cfg.ig_steps);
                    };
                    auto token_scores = attribution_token_scores(evals[i], scorer);
                    auto seq_scores =
                        detect_eval::pool_scores(evals[i], token_scores, cfg.pooling);
                    std::vector<int> labels;
                    for (auto l : evals[i].seq_labels)
                        labels.push_back(corpus::label_binary(l));
                    std::vector<double> extra_scores;
                    if (has_extra) {
                        auto extra_token = attribution_token_scores(extra_pool, scorer);
                        extra_scores =
                            detect_eval::pool_scores(extra_pool, extra_token, cfg.pooling);
                    }
                    method_reports[i] = detect_eval::evaluate_scores(
                        cid, method, detect_eval::to_string(cfg.pooling),
                        std::move(seq_scores), std::move(labels), token_scores, extra_scores);
                } catch (const std::exception& e) {
                    throw RunError("detect: method " + method + " concept " + cid + ": " +
                                   e.what());
                }
            });
        }
        for (auto& r : method_reports) reports.push_back(std::move(r));
    }

    if (want_sae) {
        selection_out["sae_m_c"] = sae_mc;
        selection_out["sae_a"] = sae_a_mc;
        io::write_file(paths.sae_selection(), selection_out.dump(2) + "\n");
    }
    detect_eval::write_reports_jsonl(reports, paths.detection_jsonl());
    detect_eval::write_summary_csv(reports, paths.detection_csv());
}

// ---------------------------------------------------------------------------
// stage: steer
// ---------------------------------------------------------------------------

void stage_steer(const RunConfig& cfg) {
    cfg.validate();
    if (cfg.steer_methods.empty()) return;
    Paths paths(cfg);
    fs::create_directories((paths.out / "reports").string());
    const auto model = toylm::load_model(paths.model_header(), paths.model_blob());
    const auto layout = corpus::VocabLayout::for_vocab(cfg.model.vocab_size);
    const int n = static_cast<int>(cfg.concepts.size());
    const auto grid = cfg.resolved_factor_grid();

    saekit::SaeDictionary sae;
    json sae_selection;
    const bool want_sae =
        std::find(cfg.steer_methods.begin(), cfg.steer_methods.end(), "sae") !=
            cfg.steer_methods.end() ||
        std::find(cfg.steer_methods.begin(), cfg.steer_methods.end(), "sae_a") !=
            cfg.steer_methods.end();
    if (want_sae) {
        sae = saekit::load_sae(paths.sae_header(), paths.sae_blob());
        sae_selection = json::parse(io::read_text_file(paths.sae_selection()));
    }

    steer_eval::JudgeFn judge;
    if (cfg.judge_endpoint.empty()) {
        judge = [](std::span<const int> gen, const corpus::ConceptSpec& spec,
                   const corpus::LabeledSequence& instr) {
            return steer_eval::mock_judge(gen, spec, instr);
        };
    } else {
        const std::string endpoint = cfg.judge_endpoint;
        judge = [endpoint, &layout](std::span<const int> gen, const corpus::ConceptSpec& spec,
                                    const corpus::LabeledSequence& instr) {
            std::string concept_text = spec.concept_id + " planted:";
            for (int t : spec.planted_tokens) concept_text += " " + layout.symbol(t);
            return steer_eval::external_judge(endpoint, layout.detokenize(gen), concept_text,
                                              layout.detokenize(instr.instruction));
        };
    }

    std::vector<steer_eval::GenerationRecord> all_records;
    std::vector<steer_eval::ConceptSteeringSummary> summaries;
    std::map<std::string, std::map<std::string, double>> holdout_scores;  // method -> concept

    for (const auto& method : cfg.steer_methods) {
        std::vector<std::vector<steer_eval::GenerationRecord>> per_concept(n);
        std::vector<steer_eval::SelectResult> selections(n);

        std::vector<learners::ConceptSubspace> dict;
        if (kSubspaceMethods.count(method))
            dict = learners::load_dictionary(paths.dict_header(method), paths.dict_blob(method));

        parallel_for(n, cfg.jobs, [&](int i) {
            const auto& spec = cfg.concepts[i];
            try {
                steer_eval::SteeringPlan plan;
                plan.concept_id = spec.concept_id;
                plan.method = method;
                plan.layer = cfg.layer;
                plan.factor_grid = grid;
                plan.instructions = corpus::load_sequences(paths.steer_seqs(spec.concept_id));
                steer_eval::split_instructions(static_cast<int>(plan.instructions.size()),
                                               concept_seed(cfg.seed, spec.concept_id),
                                               plan.selection_idx, plan.holdout_idx);
                if (kSubspaceMethods.count(method)) {
                    plan.subspace = dict[i];
                    plan.has_subspace = true;
                    if (plan.subspace.max_activation < 0.0)
                        throw RunError("m_c unset; run the detect stage first");
                } else {  // sae / sae_a
                    const char* key = method == "sae" ? "sae_m_c" : "sae_a";
                    if (!sae_selection.contains(key))
                        throw RunError("SAE selection missing; run the detect stage first");
                    const auto& rec = sae_selection.at(key).at(spec.concept_id);
                    plan.sae = &sae;
                    plan.sae_latent = rec.at("latent").get<int>();
                    plan.kind = steer_eval::intervention_from_string(cfg.sae_intervention);
                    if (plan.kind == steer_eval::InterventionKind::addition) {
                        // addition steers with the decoder row at alpha = factor * m_c
                        plan.has_subspace = true;
                        plan.subspace.concept_id = spec.concept_id;
                        plan.subspace.method = method;
                        plan.subspace.unit_norm = false;
                        plan.subspace.w.assign(sae.w_dec.row_ptr(plan.sae_latent),
                                               sae.w_dec.row_ptr(plan.sae_latent) + sae.d());
                        plan.subspace.max_activation = rec.at("m_c").get<double>();
                    }
                }

                auto records = steer_eval::run_factor_sweep(model, plan, cfg.steer_max_new,
                                                            cfg.seed, /*include_baseline=*/true);
                steer_eval::judge_records(records, spec, plan, judge);
                selections[i] = steer_eval::select_and_score(records, grid);
                per_concept[i] = std::move(records);
            } catch (const std::exception& e) {
                throw RunError("steer: method " + method + " concept " + spec.concept_id +
                               ": " + e.what());
            }
        });

        for (int i = 0; i < n; ++i) {
            const auto& cid = cfg.concepts[i].concept_id;
            all_records.insert(all_records.end(), per_concept[i].begin(), per_concept[i].end());
            summaries.push_back({cid, method, selections[i].factor,
                                 selections[i].holdout_overall});
            holdout_scores[method][cid] = selections[i].holdout_overall;
        }
    }

    steer_eval::write_records_jsonl(all_records, paths.steering_jsonl());
    steer_eval::write_summary_csv(all_records, paths.steering_csv());
    steer_eval::write_selection_csv(summaries, paths.selection_csv());

    std::string baseline = cfg.winrate_baseline;
    if (baseline.empty())
        baseline = holdout_scores.count("sae") ? "sae" : cfg.steer_methods.front();
    std::string csv = "method,baseline,winrate_percent\n";
    char buf[160];
    for (const auto& method : cfg.steer_methods) {
        const double w = steer_eval::winrate(holdout_scores.at(method),
                                             holdout_scores.at(baseline));
        std::snprintf(buf, sizeof(buf), "%s,%s,%.4f\n", method.c_str(), baseline.c_str(), w);
        csv += buf;
    }
    io::write_file(paths.winrate_csv(), csv);
}

// ---------------------------------------------------------------------------
// stage: report (projections + manifest)
// ---------------------------------------------------------------------------

void emit_projection(const std::vector<learners::ConceptSubspace>& dict,
                     const std::string& csv_path) {
    if (dict.size() < 2)
        throw numkit::DegenerateInput("emit_projection: need at least 2 subspaces");
    const int d = dict.front().dim();
    numkit::Matrix rows(static_cast<int>(dict.size()), d);
    std::vector<double> mean(d, 0.0);
    for (size_t i = 0; i < dict.size(); ++i)
        for (int j = 0; j < d; ++j) {
            rows(static_cast<int>(i), j) = dict[i].w[j];
            mean[j] += dict[i].w[j] / static_cast<double>(dict.size());
        }
    for (int i = 0; i < rows.rows; ++i)
        for (int j = 0; j < d; ++j) rows(i, j) -= mean[j];

    const auto pcs = numkit::top_principal_components(rows, 2);
    std::string csv = "concept_id,pc1,pc2\n";
    char buf[160];
    for (size_t i = 0; i < dict.size(); ++i) {
        double p1 = 0.0, p2 = 0.0;
        for (int j = 0; j < d; ++j) {
            p1 += rows(static_cast<int>(i), j) * pcs[0][j];
            p2 += rows(static_cast<int>(i), j) * pcs[1][j];
        }
        std::snprintf(buf, sizeof(buf), "%s,%.9g,%.9g\n", dict[i].concept_id.c_str(), p1, p2);
        csv += buf;
    }
    io::write_file(csv_path, csv);
}

namespace {

void write_manifest(const RunConfig& cfg, bool complete, const std::string& error) {
    Paths paths(cfg);
    fs::create_directories(paths.out);
    std::vector<std::string> files;
    for (const auto& entry : fs::recursive_directory_iterator(paths.out)) {
        if (!entry.is_regular_file()) continue;
        const auto rel = fs::relative(entry.path(), paths.out).generic_string();
        if (rel == "MANIFEST.json") continue;
        files.push_back(rel);
    }
    std::sort(files.begin(), files.end());
    json artifacts = json::array();
    for (const auto& rel : files) {
        const auto bytes = io::read_file((paths.out / rel).string());
        char hex[32];
        std::snprintf(hex, sizeof(hex), "%016llx",
                      static_cast<unsigned long long>(
                          numkit::fnv1a(bytes.data(), bytes.size())));
        artifacts.push_back({{"path", rel}, {"bytes", bytes.size()}, {"fnv1a64", hex}});
    }
    json manifest = {{"complete", complete}, {"artifacts", artifacts}};
    if (!error.empty()) manifest["error"] = error;
    io::write_file(paths.manifest(), manifest.dump(2) + "\n");
}

}  // namespace

void stage_report(const RunConfig& cfg) {
    cfg.validate();
    Paths paths(cfg);
    fs::create_directories((paths.out / "projections").string());
    for (const auto& method : cfg.detect_methods) {
        if (!kSubspaceMethods.count(method)) continue;
        auto dict = learners::load_dictionary(paths.dict_header(method), paths.dict_blob(method));
        if (dict.size() >= 2) emit_projection(dict, paths.projection_csv(method));
    }
    write_manifest(cfg, true, "");
}

void run_pipeline(const RunConfig& cfg) {
    cfg.validate();
    try {
        stage_gen(cfg);
        stage_collect(cfg);
        stage_train(cfg);
        stage_detect(cfg);
        stage_steer(cfg);
        stage_report(cfg);
    } catch (const std::exception& e) {
        write_manifest(cfg, false, e.what());
        throw;
    }
}

}  // namespace steerlab::pipeline
