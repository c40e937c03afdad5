#pragma once

#include <cstdint>
#include <vector>

#include "dpdcan/linalg.hpp"
#include "dpdcan/losses.hpp"

namespace dpdcan::model {

struct ModelDims {
    std::size_t input_dim = 0;                      // d
    std::vector<std::size_t> encoder_hidden = {256, 64};
    std::size_t latent_dim = 32;
    std::size_t n_clusters = 1;                     // s
};

struct Affine {
    Matrix weight;  // out x in, row-major
    Vec bias;
};

// Autoencoder parameters plus trainable cluster centers. The encoder stack
// is the protected partition (it is the released artifact); decoder trunk,
// ZINB heads and centers are exposed. Flat vectors over the two partitions
// follow declaration order: per layer weight then bias, centers last.
struct ModelParams {
    ModelDims dims;
    std::vector<Affine> encoder;          // d -> hidden... -> latent
    std::vector<Affine> decoder;          // latent -> reversed hidden
    Affine head_mean, head_dispersion, head_dropout;  // last hidden -> d
    Matrix cluster_centers;               // s x latent

    std::size_t protected_size() const;
    std::size_t exposed_size() const;
    std::size_t total_size() const { return protected_size() + exposed_size(); }

    // Flat layout: [protected | exposed].
    Vec to_flat() const;
    void from_flat(const Vec& flat);
};

// Fan-in-scaled uniform weights, zero biases, zero centers (k-means fills
// them in before the cluster stage). Deterministic in the seed.
ModelParams init_params(const ModelDims& dims, std::uint64_t seed);

// Row-wise forward passes.
Matrix encode(const ModelParams& params, const Matrix& x);

struct DecodedOutputs {
    Matrix mean;        // s_i * exp(head), clamped to [1e-5, 1e6] before scaling
    Matrix dispersion;  // softplus, clamped to [1e-4, 1e4]
    Matrix dropout;     // logistic, in (0, 1)
};
DecodedOutputs decode(const ModelParams& params, const Matrix& z,
                      const Vec& size_factors);

enum class LossMode { instance, cluster };

// Everything a per-sample loss needs beyond the parameters. Augmented views
// are indexed by lot position; the target P by dataset row.
struct LossBindings {
    LossMode mode = LossMode::instance;
    losses::LossWeights weights;
    const Matrix* features = nullptr;     // n x d encoder inputs
    const Matrix* raw_counts = nullptr;   // n x d ZINB targets
    const Vec* size_factors = nullptr;    // n
    const Matrix* aug1 = nullptr;         // |B| x d (instance stage)
    const Matrix* aug2 = nullptr;
    const Matrix* target_p = nullptr;     // n x s (cluster stage)
    bool stop_gradient = false;
};

struct PerSampleGradient {
    Vec protected_part;
    Vec exposed_part;
    std::size_t sample_index = 0;
};

// Reusable per-step buffers: row i holds the gradient of sample batch[i].
struct GradBatch {
    Matrix protected_parts;  // |B| x protected_size
    Matrix exposed_parts;    // |B| x exposed_size
    Vec loss;                // |B|
};

double per_sample_loss(const ModelParams& params, const LossBindings& bindings,
                       std::size_t sample_index, std::size_t lot_position);

void per_sample_gradients(const ModelParams& params, const LossBindings& bindings,
                          const std::vector<std::size_t>& batch, GradBatch& out);

std::vector<PerSampleGradient> per_sample_gradients(
    const ModelParams& params, const LossBindings& bindings,
    const std::vector<std::size_t>& batch);

struct OptimizerState {
    enum class Kind { sgd, adam, adadelta };
    Kind kind = Kind::sgd;
    double learning_rate = 0.001;
    long step = 0;
    Vec m;  // adam first moment / adadelta E[g^2]
    Vec v;  // adam second moment / adadelta E[dx^2]

    static OptimizerState sgd(double lr);
    static OptimizerState adam(double lr);       // beta1=0.9 beta2=0.999 eps=1e-8
    static OptimizerState adadelta(double lr);   // rho=0.95 eps=1e-6
};

// Applies one update (flat [protected | exposed]) in place.
void optimizer_step(OptimizerState& state, ModelParams& params, const Vec& update);

// [begin, end) offset of each encoder layer inside the protected flat
// vector, in layer order.
std::vector<std::pair<std::size_t, std::size_t>> protected_layer_ranges(
    const ModelParams& params);

// Within-step parallelism cap; reads DPDCAN_THREADS once (default: all cores).
unsigned thread_cap();

// Slot-parallel loop under thread_cap(); exceptions from workers rethrow.
void parallel_for(std::size_t count, const std::function<void(std::size_t)>& fn);

}  // namespace dpdcan::model
