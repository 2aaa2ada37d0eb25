#include "steerlab/saekit.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <json.hpp>

#include "steerlab/detect_eval.hpp"
#include "steerlab/io.hpp"

namespace steerlab::saekit {

using numkit::Rng;

void SaeDictionary::validate() const {
    const int dd = d(), zz = z();
    if (w_dec.rows != zz || w_dec.cols != dd)
        throw corpus::FormatError("sae: W_dec shape inconsistent with W_enc");
    if (static_cast<int>(b_enc.size()) != zz || static_cast<int>(theta.size()) != zz ||
        static_cast<int>(max_act.size()) != zz)
        throw corpus::FormatError("sae: per-latent vector lengths inconsistent");
    for (double t : theta)
        if (t < 0.0) throw corpus::FormatError("sae: negative threshold");
}

namespace {

void check_latent(const SaeDictionary& dict, int f) {
    if (f < 0 || f >= dict.z())
        throw IndexOutOfRange("sae latent " + std::to_string(f) + " out of range [0, " +
                              std::to_string(dict.z()) + ")");
}

void check_dim(const SaeDictionary& dict, std::span<const double> h) {
    if (static_cast<int>(h.size()) != dict.d())
        throw IndexOutOfRange("sae: vector dimension mismatch");
}

}  // namespace

double sae_latent(const SaeDictionary& dict, int f, std::span<const double> h) {
    check_latent(dict, f);
    check_dim(dict, h);
    double x = 0.0;
    for (int i = 0; i < dict.d(); ++i) x += h[i] * dict.w_enc(i, f);
    return x;
}

double sae_detect(const SaeDictionary& dict, int f, std::span<const double> h) {
    const double x = sae_latent(dict, f, h) + dict.b_enc[f];
    return x > dict.theta[f] ? x : 0.0;
}

std::vector<double> sae_clamp_intervene(const SaeDictionary& dict, int f,
                                        std::span<const double> h, double target) {
    check_latent(dict, f);
    check_dim(dict, h);
    const int d = dict.d(), z = dict.z();
    std::vector<double> lat(z, 0.0);  // W_enc^T h
    for (int j = 0; j < z; ++j) {
        double x = 0.0;
        for (int i = 0; i < d; ++i) x += h[i] * dict.w_enc(i, j);
        lat[j] = x;
    }
    // recon(h) = (W_enc^T h) W_dec, reused bit-identically inside Err(h)
    std::vector<double> recon(d, 0.0);
    for (int j = 0; j < z; ++j) {
        const double lj = lat[j];
        if (lj == 0.0) continue;
        const double* dec = dict.w_dec.row_ptr(j);
        for (int i = 0; i < d; ++i) recon[i] += lj * dec[i];
    }
    const double delta = target - lat[f];
    std::vector<double> out(d);
    const double* dec_f = dict.w_dec.row_ptr(f);
    for (int i = 0; i < d; ++i) {
        const double recon_clamped = recon[i] + delta * dec_f[i];
        const double err = h[i] - recon[i];
        out[i] = recon_clamped + err;
    }
    return out;
}

std::vector<double> sae_clamp_simplified(const SaeDictionary& dict, int f,
                                         std::span<const double> h, double target) {
    check_latent(dict, f);
    check_dim(dict, h);
    const double delta = target - sae_latent(dict, f, h);
    std::vector<double> out(h.begin(), h.end());
    const double* dec_f = dict.w_dec.row_ptr(f);
    for (int i = 0; i < dict.d(); ++i) out[i] += delta * dec_f[i];
    return out;
}

std::vector<double> sae_min_clamp_intervene(const SaeDictionary& dict, int f,
                                            std::span<const double> h, double target) {
    const double zf = sae_latent(dict, f, h);
    return sae_clamp_intervene(dict, f, h, std::max(target, zf));
}

int select_feature_auroc(const SaeDictionary& dict, const ActivationDataset& ds) {
    if (ds.rows.cols != dict.d())
        throw IndexOutOfRange("select_feature_auroc: dataset dimension mismatch");
    std::vector<int> labels;
    labels.reserve(ds.seq_count());
    bool pos = false, neg = false;
    for (auto l : ds.seq_labels) {
        labels.push_back(corpus::label_binary(l));
        (labels.back() ? pos : neg) = true;
    }
    if (!pos || !neg) throw learners::MissingClass("select_feature_auroc: need both classes");

    int best_f = 0;
    double best_auroc = -1.0;
    std::vector<double> pooled(ds.seq_count());
    for (int f = 0; f < dict.z(); ++f) {
        for (int s = 0; s < ds.seq_count(); ++s) {
            double mx = -1e300;
            for (int r = 0; r < ds.row_counts[s]; ++r) {
                const long row = ds.offsets[s] + r;
                const double* hp = ds.rows.row_ptr(static_cast<int>(row));
                mx = std::max(mx,
                              sae_detect(dict, f, {hp, static_cast<size_t>(ds.rows.cols)}));
            }
            pooled[s] = mx;
        }
        const double a = detect_eval::auroc(pooled, labels);
        if (a > best_auroc) {  // strict: ties keep the lowest index
            best_auroc = a;
            best_f = f;
        }
    }
    return best_f;
}

PlantedSae plant_sae(uint64_t seed, int d, int z,
                     const std::map<std::string, std::vector<double>>& planted,
                     const Matrix* reference_rows) {
    if (static_cast<int>(planted.size()) > z)
        throw TooManyPlants("plant_sae: more planted concepts than latents");
    for (const auto& [id, dir] : planted) {
        if (static_cast<int>(dir.size()) != d)
            throw TooManyPlants("plant_sae: direction dimension mismatch for " + id);
        if (std::fabs(numkit::norm(dir) - 1.0) > 1e-6)
            throw TooManyPlants("plant_sae: direction for " + id + " is not unit-norm");
    }

    PlantedSae out;
    out.dict.w_enc = Matrix(d, z);
    out.dict.w_dec = Matrix(z, d);
    out.dict.b_enc.assign(z, 0.0);
    out.dict.theta.assign(z, 0.0);
    out.dict.max_act.assign(z, 1.0);

    Rng rng(seed);
    std::vector<int> slots(z);
    std::iota(slots.begin(), slots.end(), 0);
    rng.shuffle(slots);

    std::vector<char> taken(z, 0);
    int next = 0;
    for (const auto& [id, dir] : planted) {  // std::map: deterministic id order
        const int f = slots[next++];
        taken[f] = 1;
        out.latent_of_concept[id] = f;
        for (int i = 0; i < d; ++i) {
            out.dict.w_enc(i, f) = dir[i];
            out.dict.w_dec(f, i) = dir[i];
        }
    }
    for (int f = 0; f < z; ++f) {
        if (taken[f]) continue;
        std::vector<double> noise(d);
        for (double& x : noise) x = rng.normal();
        numkit::normalize(noise, 0.0);
        for (int i = 0; i < d; ++i) {
            out.dict.w_enc(i, f) = noise[i];
            out.dict.w_dec(f, i) = noise[i];
        }
    }

    if (reference_rows) {
        if (reference_rows->cols != d) throw TooManyPlants("plant_sae: reference rows dim");
        for (int f = 0; f < z; ++f) {
            double mx = 0.0;
            for (int r = 0; r < reference_rows->rows; ++r)
                mx = std::max(mx, sae_detect(out.dict, f,
                                             {reference_rows->row_ptr(r),
                                              static_cast<size_t>(d)}));
            out.dict.max_act[f] = mx;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// persistence
// ---------------------------------------------------------------------------

void save_sae(const SaeDictionary& dict, const std::string& header_path,
              const std::string& blob_path) {
    dict.validate();
    nlohmann::json header = {
        {"format", "sae-v1"},
        {"d", dict.d()},
        {"z", dict.z()},
        {"has_thresholds", true},
        {"order", "w_enc,w_dec,b_enc,theta,m"},
    };
    io::write_file(header_path, header.dump(2) + "\n");
    std::vector<unsigned char> blob;
    auto put = [&](const std::vector<double>& v) {
        for (double x : v) io::append_f32_le(blob, static_cast<float>(x));
    };
    put(dict.w_enc.data);
    put(dict.w_dec.data);
    put(dict.b_enc);
    put(dict.theta);
    put(dict.max_act);
    io::write_file(blob_path, blob);
}

SaeDictionary load_sae(const std::string& header_path, const std::string& blob_path) {
    const auto header = nlohmann::json::parse(io::read_text_file(header_path));
    const int d = header.at("d").get<int>();
    const int z = header.at("z").get<int>();
    const auto blob = io::read_file(blob_path);
    const size_t expected = (2ull * d * z + 3ull * z) * 4;
    if (blob.size() != expected)
        throw corpus::FormatError("sae blob: expected " + std::to_string(expected) +
                                  " bytes, got " + std::to_string(blob.size()));
    size_t off = 0;
    auto take = [&](size_t n) {
        std::vector<double> v(n);
        for (size_t i = 0; i < n; ++i, off += 4)
            v[i] = static_cast<double>(io::read_f32_le(&blob[off]));
        return v;
    };
    SaeDictionary dict;
    dict.w_enc = Matrix(d, z, take(static_cast<size_t>(d) * z));
    dict.w_dec = Matrix(z, d, take(static_cast<size_t>(d) * z));
    dict.b_enc = take(z);
    dict.theta = take(z);
    dict.max_act = take(z);
    dict.validate();
    return dict;
}

}  // namespace steerlab::saekit
