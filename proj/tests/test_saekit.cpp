#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "steerlab/detect_eval.hpp"
#include "steerlab/io.hpp"
#include "steerlab/saekit.hpp"

using namespace steerlab;
using namespace steerlab::saekit;
using numkit::Matrix;

namespace {

SaeDictionary random_dict(uint64_t seed, int d, int z) {
    numkit::Rng rng(seed);
    SaeDictionary dict;
    dict.w_enc = Matrix(d, z);
    dict.w_dec = Matrix(z, d);
    for (double& x : dict.w_enc.data) x = rng.normal(0.0, 0.4);
    for (double& x : dict.w_dec.data) x = rng.normal(0.0, 0.4);
    dict.b_enc.assign(z, 0.0);
    for (double& x : dict.b_enc) x = 0.1 * rng.normal();
    dict.theta.assign(z, 0.0);
    for (double& x : dict.theta) x = 0.2 * rng.uniform();
    dict.max_act.assign(z, 1.0);
    return dict;
}

std::vector<double> random_vec(numkit::Rng& rng, int d, double scale = 1.0) {
    std::vector<double> v(d);
    for (double& x : v) x = scale * rng.normal();
    return v;
}

struct PlantedWorld {
    toylm::ToyLM model;
    corpus::VocabLayout layout;
    std::vector<corpus::ConceptSpec> specs;
    PlantedSae sae;
    std::vector<corpus::ConceptCorpus> corpora;
};

PlantedWorld make_world(int concepts = 3, int z = 32) {
    PlantedWorld w{toylm::build_toy_lm({}), corpus::VocabLayout::for_vocab(64), {}, {}, {}};
    std::map<std::string, std::vector<double>> dirs;
    for (int c = 0; c < concepts; ++c) {
        corpus::ConceptSpec spec;
        spec.concept_id = "c" + std::to_string(c);
        spec.genre = static_cast<corpus::Genre>(c % 3);
        spec.planted_tokens = {40 + 3 * c, 41 + 3 * c, 42 + 3 * c};
        spec.plant_rate = spec.genre == corpus::Genre::text ? 0.45 : 0.35;
        w.specs.push_back(spec);
        w.corpora.push_back(corpus::plant_concept_corpus(w.model, w.layout, spec, 32, 16, 7));

        // the planted direction: mean difference of the training activations
        auto ds = corpus::collect_activations(w.model, w.corpora.back().train, 1, "train");
        auto dm = learners::fit_diffmean(ds);
        dirs[spec.concept_id] = dm.w;
    }
    w.sae = plant_sae(99, w.model.cfg.dim, z, dirs);
    return w;
}

}  // namespace

TEST_CASE("sae_detect: JumpReLU gate") {
    SaeDictionary dict = random_dict(1, 4, 3);
    dict.w_enc = Matrix(4, 3);
    dict.w_enc(0, 0) = 1.0;  // latent 0 reads h[0]
    dict.b_enc = {0.0, 0.0, 0.0};
    dict.theta = {1.0, 0.0, 0.0};
    std::vector<double> h = {0.5, 0, 0, 0};
    CHECK(sae_detect(dict, 0, h) == 0.0);  // below threshold
    h[0] = 2.5;
    CHECK(sae_detect(dict, 0, h) == doctest::Approx(2.5));  // pass-through above
    CHECK_THROWS_AS(sae_detect(dict, 7, h), IndexOutOfRange);
}

TEST_CASE("clamp: target = z_f returns h exactly") {
    numkit::Rng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        auto dict = random_dict(100 + trial, 8, 12);
        auto h = random_vec(rng, 8);
        const int f = static_cast<int>(rng.below(12));
        const double zf = sae_latent(dict, f, h);
        auto out = sae_clamp_intervene(dict, f, h, zf);
        for (int i = 0; i < 8; ++i) CHECK(std::fabs(out[i] - h[i]) <= 1e-9);
    }
}

TEST_CASE("clamp: zero latent reduces to decoder-row addition") {
    auto dict = random_dict(3, 6, 4);
    // make h orthogonal to encoder column 2 so z_2 = 0
    std::vector<double> h(6, 0.0);
    std::vector<double> col(6);
    for (int i = 0; i < 6; ++i) col[i] = dict.w_enc(i, 2);
    numkit::Rng rng(9);
    auto v = random_vec(rng, 6);
    const double proj = numkit::dot(v, col) / numkit::dot(col, col);
    for (int i = 0; i < 6; ++i) h[i] = v[i] - proj * col[i];
    CHECK(std::fabs(sae_latent(dict, 2, h)) < 1e-12);

    const double t = 1.7;
    auto out = sae_clamp_intervene(dict, 2, h, t);
    for (int i = 0; i < 6; ++i)
        CHECK(out[i] == doctest::Approx(h[i] + t * dict.w_dec(2, i)).epsilon(1e-9));
}

TEST_CASE("clamp: full formula equals the simplification") {
    numkit::Rng rng(17);
    for (int trial = 0; trial < 30; ++trial) {
        auto dict = random_dict(300 + trial, 10, 16);
        auto h = random_vec(rng, 10);
        const int f = static_cast<int>(rng.below(16));
        const double target = 3.0 * rng.normal();
        auto full = sae_clamp_intervene(dict, f, h, target);
        auto simple = sae_clamp_simplified(dict, f, h, target);
        for (int i = 0; i < 10; ++i) CHECK(std::fabs(full[i] - simple[i]) <= 1e-9);
    }
}

TEST_CASE("min-clamp: identity when z_f >= target, clamp otherwise, continuous in target") {
    numkit::Rng rng(23);
    auto dict = random_dict(7, 8, 10);
    auto h = random_vec(rng, 8);
    const int f = 4;
    const double zf = sae_latent(dict, f, h);

    auto ident = sae_min_clamp_intervene(dict, f, h, zf - 1.0);
    for (int i = 0; i < 8; ++i) CHECK(std::fabs(ident[i] - h[i]) <= 1e-9);

    auto clamped = sae_min_clamp_intervene(dict, f, h, zf + 2.0);
    auto expect = sae_clamp_intervene(dict, f, h, zf + 2.0);
    for (int i = 0; i < 8; ++i) CHECK(clamped[i] == doctest::Approx(expect[i]).epsilon(1e-12));

    // grid sweep: piecewise {h, clamp result}, continuous at the knee
    std::vector<double> prev;
    for (double t = zf - 1.0; t <= zf + 1.0; t += 0.05) {
        auto out = sae_min_clamp_intervene(dict, f, h, t);
        if (t <= zf) {
            for (int i = 0; i < 8; ++i) CHECK(std::fabs(out[i] - h[i]) <= 1e-9);
        }
        if (!prev.empty()) {
            double step = 0.0;
            for (int i = 0; i < 8; ++i) step = std::max(step, std::fabs(out[i] - prev[i]));
            CHECK(step < 0.2);  // no jumps along the sweep
        }
        prev = out;
    }
}

TEST_CASE("min-clamp never decreases the latent on an orthonormal planted dictionary") {
    // planted dictionaries have encoder column == decoder row == unit direction
    numkit::Rng rng(31);
    std::map<std::string, std::vector<double>> dirs;
    for (int c = 0; c < 4; ++c) {
        auto v = random_vec(rng, 12);
        numkit::normalize(v);
        dirs["c" + std::to_string(c)] = v;
    }
    auto planted = plant_sae(5, 12, 8, dirs);
    for (int trial = 0; trial < 40; ++trial) {
        auto h = random_vec(rng, 12);
        const int f = planted.latent_of_concept["c" + std::to_string(trial % 4)];
        const double zf = sae_latent(planted.dict, f, h);
        const double target = zf + 3.0 * rng.normal();
        auto out = sae_min_clamp_intervene(planted.dict, f, h, target);
        CHECK(sae_latent(planted.dict, f, out) >= zf - 1e-9);
    }
}

TEST_CASE("select_feature_auroc: tie rule and permutation equivariance") {
    // all-zero encoder: every latent scores 0, AUROC 0.5, index 0 wins
    SaeDictionary zero;
    zero.w_enc = Matrix(4, 5);
    zero.w_dec = Matrix(5, 4);
    zero.b_enc.assign(5, 0.0);
    zero.theta.assign(5, 0.0);
    zero.max_act.assign(5, 1.0);

    corpus::ActivationDataset ds;
    ds.concept_id = "t";
    ds.rows = Matrix(4, 4, {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1});
    ds.offsets = {0, 1, 2, 3};
    ds.row_counts = {1, 1, 1, 1};
    ds.seq_labels = {corpus::Label::positive, corpus::Label::positive, corpus::Label::negative,
                     corpus::Label::negative};
    ds.seq_tokens = {{1}, {1}, {1}, {1}};
    ds.row_labels = {1, 1, 0, 0};
    CHECK(select_feature_auroc(zero, ds) == 0);

    // one aligned feature: detects rows 0/1 (e0+e1 direction)
    SaeDictionary dict = zero;
    dict.w_enc(0, 3) = 1.0;
    dict.w_enc(1, 3) = 1.0;
    dict.w_dec(3, 0) = 1.0;
    CHECK(select_feature_auroc(dict, ds) == 3);

    // permuting latent columns moves the winning index accordingly
    SaeDictionary perm = zero;
    perm.w_enc(0, 1) = 1.0;
    perm.w_enc(1, 1) = 1.0;
    perm.w_dec(1, 0) = 1.0;
    CHECK(select_feature_auroc(perm, ds) == 1);
}

TEST_CASE("plant_sae: unit dot pass-through, determinism, slot assignment") {
    numkit::Rng rng(2);
    auto v = random_vec(rng, 16);
    numkit::normalize(v);
    std::map<std::string, std::vector<double>> dirs = {{"c0", v}};
    auto a = plant_sae(42, 16, 24, dirs);
    auto b = plant_sae(42, 16, 24, dirs);
    CHECK(a.latent_of_concept["c0"] == b.latent_of_concept["c0"]);
    CHECK(a.dict.w_enc.data == b.dict.w_enc.data);

    const int f = a.latent_of_concept["c0"];
    std::vector<double> h(16);
    for (int i = 0; i < 16; ++i) h[i] = 2.5 * v[i];  // c = 2.5 > theta = 0
    CHECK(sae_detect(a.dict, f, h) == doctest::Approx(2.5).epsilon(1e-12));

    std::map<std::string, std::vector<double>> too_many;
    for (int i = 0; i < 5; ++i) too_many["c" + std::to_string(i)] = v;
    CHECK_THROWS_AS(plant_sae(1, 16, 4, too_many), TooManyPlants);
}

TEST_CASE("planted dictionary separates planted corpora; SAE-A recovers the index") {
    auto w = make_world(3, 32);
    for (size_t c = 0; c < w.specs.size(); ++c) {
        auto eval = corpus::collect_activations(w.model, w.corpora[c].eval, 1, "eval");
        const int f = w.sae.latent_of_concept[w.specs[c].concept_id];

        double pos_mean = 0, neg_mean = 0;
        int np = 0, nn = 0;
        for (int s = 0; s < eval.seq_count(); ++s) {
            double mx = -1e300;
            for (int r = 0; r < eval.row_counts[s]; ++r) {
                const double* hp = eval.rows.row_ptr(static_cast<int>(eval.offsets[s] + r));
                mx = std::max(mx, sae_detect(w.sae.dict, f,
                                             {hp, static_cast<size_t>(eval.rows.cols)}));
            }
            if (eval.seq_labels[s] == corpus::Label::positive) {
                pos_mean += mx;
                ++np;
            } else {
                neg_mean += mx;
                ++nn;
            }
        }
        CHECK(pos_mean / np > neg_mean / nn);

        auto train = corpus::collect_activations(w.model, w.corpora[c].train, 1, "train");
        CHECK(select_feature_auroc(w.sae.dict, train) == f);
    }
}

TEST_CASE("sae io: round trip preserves all blobs") {
    namespace fs = std::filesystem;
    auto dict = random_dict(77, 8, 12);
    const auto dir = fs::temp_directory_path() / "steerlab_sae";
    fs::create_directories(dir);
    save_sae(dict, (dir / "sae.json").string(), (dir / "sae.f32").string());
    auto loaded = load_sae((dir / "sae.json").string(), (dir / "sae.f32").string());
    CHECK(loaded.d() == 8);
    CHECK(loaded.z() == 12);
    for (size_t i = 0; i < dict.w_enc.size(); ++i)
        CHECK(loaded.w_enc.data[i] == static_cast<double>(static_cast<float>(dict.w_enc.data[i])));
    // truncated blob raises with byte counts
    auto blob = steerlab::io::read_file((dir / "sae.f32").string());
    blob.pop_back();
    steerlab::io::write_file((dir / "sae.f32").string(), blob);
    CHECK_THROWS_AS(load_sae((dir / "sae.json").string(), (dir / "sae.f32").string()),
                    corpus::FormatError);
    fs::remove_all(dir);
}
