#pragma once

// SAE dictionary loading, JumpReLU detection, clamping interventions, AUROC
// feature selection, and planted-dictionary synthesis for tests.

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "steerlab/corpus.hpp"
#include "steerlab/numkit.hpp"

namespace steerlab::saekit {

using corpus::ActivationDataset;
using numkit::Matrix;

struct IndexOutOfRange : std::runtime_error {
    explicit IndexOutOfRange(const std::string& what) : std::runtime_error(what) {}
};
struct TooManyPlants : std::runtime_error {
    explicit TooManyPlants(const std::string& what) : std::runtime_error(what) {}
};

struct SaeDictionary {
    Matrix w_enc;                    // [d, z]
    Matrix w_dec;                    // [z, d]
    std::vector<double> b_enc;       // z
    std::vector<double> theta;      // z, JumpReLU thresholds, >= 0
    std::vector<double> max_act;     // z, per-latent max activations (m)

    int d() const { return w_enc.rows; }
    int z() const { return w_enc.cols; }
    void validate() const;
};

// JumpReLU detection for latent f: x = h . W_enc[:,f] + b_enc[f], score =
// x * 1[x > theta_f].
double sae_detect(const SaeDictionary& dict, int f, std::span<const double> h);

// Raw latent used by the clamping math: z_f = (W_enc^T h)_f, no bias, no gate.
double sae_latent(const SaeDictionary& dict, int f, std::span<const double> h);

// Clamp latent f to `target` through the full reconstruction-plus-error
// formula: (W_enc^T h + (target - z_f) e_f^T) W_dec + Err(h) with
// Err(h) = h - (W_enc^T h) W_dec.
std::vector<double> sae_clamp_intervene(const SaeDictionary& dict, int f,
                                        std::span<const double> h, double target);

// The algebraic simplification h + (target - z_f) * W_dec[f,:]; kept public so
// the two routes can be checked against each other.
std::vector<double> sae_clamp_simplified(const SaeDictionary& dict, int f,
                                         std::span<const double> h, double target);

// Clamp only upward: effective target is max(target, z_f).
std::vector<double> sae_min_clamp_intervene(const SaeDictionary& dict, int f,
                                            std::span<const double> h, double target);

// SAE-A: per latent, max-pool sae_detect over each sequence, compute AUROC
// against the sequence labels, return the argmax latent (ties: lowest index).
int select_feature_auroc(const SaeDictionary& dict, const ActivationDataset& ds);

// Planted dictionary: each concept's latent gets encoder column = decoder row
// = its (unit-norm) direction with theta = 0; remaining latents are random
// unit noise. Latent slots are assigned by a seeded shuffle. When
// `reference_rows` is given, m is filled with the max detection activation
// over those rows, else 1.
struct PlantedSae {
    SaeDictionary dict;
    std::map<std::string, int> latent_of_concept;
};
PlantedSae plant_sae(uint64_t seed, int d, int z,
                     const std::map<std::string, std::vector<double>>& planted,
                     const Matrix* reference_rows = nullptr);

// header JSON (d, z, threshold presence) + one blob: W_enc, W_dec, b_enc,
// theta, m in fixed order, little-endian f32.
void save_sae(const SaeDictionary& dict, const std::string& header_path,
              const std::string& blob_path);
SaeDictionary load_sae(const std::string& header_path, const std::string& blob_path);

}  // namespace steerlab::saekit
