#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dpdcan/accountant.hpp"
#include "dpdcan/dp_engine.hpp"
#include "dpdcan/linalg.hpp"
#include "dpdcan/losses.hpp"
#include "dpdcan/model.hpp"
#include "dpdcan/rng.hpp"

namespace dpdcan::pipeline {

struct CountMatrix {
    std::vector<std::string> cell_ids;
    std::vector<std::string> gene_ids;
    Matrix counts;  // cells x genes, nonnegative

    void validate() const;
};

struct PreprocessedData {
    std::vector<std::string> cell_ids;
    std::vector<std::string> gene_ids;          // names of the selected genes
    std::vector<std::size_t> selected_genes;    // indices into the input gene list
    Matrix raw_selected;                        // n x d raw counts (ZINB target)
    Vec size_factors;                           // n, positive
    Matrix features;                            // n x d z-scored log-normalized
};

// Gene filtering (expressed in >= 3 cells), median-of-totals size factors,
// top-variance selection of log-normalized genes, per-gene z-scoring.
PreprocessedData preprocess(const CountMatrix& raw, std::size_t n_hvg = 2000);

struct AugmentParams {
    double mask_prob = 0.2;
    double jitter_std = 0.1;
};

// Two independent views: per-coordinate zero-masking, then Gaussian jitter.
void augment(const double* x, std::size_t d, const AugmentParams& params,
             RngStream& rng, double* view1, double* view2);

struct KmeansResult {
    Matrix centers;                // s x dim
    std::vector<int> assignments;  // n
};

// k-means++ seeding, Lloyd iterations to 1e-6 movement or 300 rounds; empty
// clusters are reseeded to the point farthest from its center.
KmeansResult kmeans(const Matrix& z, std::size_t s, std::uint64_t seed);

struct Seeds {
    std::uint64_t init = 1;
    std::uint64_t data = 2;
    std::uint64_t noise = 3;
    std::uint64_t augment = 4;
};

// Step-level observability for tests: `shadow` is the same step evaluated
// from the same state under the alternate noise stream (only when
// TrainPlan::shadow_noise_seed is set).
struct StepEvent {
    int stage = 1;
    long epoch = 0;
    long global_step = 0;
    const std::vector<std::size_t>* batch = nullptr;
    const dp_engine::StepResult* primary = nullptr;
    const dp_engine::StepResult* shadow = nullptr;
};

struct TrainPlan {
    long t1_epochs = 100;
    long t2_epochs = 100;
    double lot_fraction = 0.1;
    std::size_t lot_size = 0;  // 0: round(lot_fraction * n)
    losses::LossWeights weights;
    dp_engine::DpConfig dp;    // lot_size and sample_rate are filled in by train
    double delta = 1e-5;
    std::size_t n_clusters = 1;
    Seeds seeds;
    long target_refresh_epochs = 1;
    AugmentParams augment;
    std::vector<std::size_t> encoder_hidden = {256, 64};
    std::size_t latent_dim = 32;
    model::OptimizerState::Kind opt1_kind = model::OptimizerState::Kind::adam;
    double opt1_lr = 0.001;
    model::OptimizerState::Kind opt2_kind = model::OptimizerState::Kind::adadelta;
    double opt2_lr = 1.0;
    bool stop_gradient = false;
    bool log_epochs = false;  // per-epoch line to the log callback
    std::function<void(const std::string&)> log;
    std::function<void(const StepEvent&)> observer;
    std::optional<std::uint64_t> shadow_noise_seed;
};

struct ClusterResult {
    std::vector<int> assignments;  // argmax_j q_ij
    Matrix embeddings;             // n x latent
    Matrix centers;                // s x latent
    accountant::PrivacyReport privacy;
    model::ModelParams params;
    long steps_stage1 = 0;  // executed (non-empty) DPAN steps
    long steps_stage2 = 0;
};

// Lot geometry shared by train and by ahead-of-time calibration.
struct LotPlan {
    std::size_t lot_size = 1;
    double sample_rate = 1.0;
    long steps_per_epoch = 1;
};
LotPlan resolve_lot(std::size_t n, const TrainPlan& plan);

// Algorithm: instance-stage DPAN training, k-means center initialization,
// cluster-stage DPAN training with periodic target refresh, final soft
// assignment, RDP accounting across both stages.
ClusterResult train(const PreprocessedData& data, const TrainPlan& plan);

// ZINB cluster generator standing in for real datasets: per-gene base
// log-means and dispersions, per-cluster Gaussian offsets scaled by
// `separation`, gamma-Poisson counts, independent dropout zeroing.
std::pair<CountMatrix, std::vector<int>> generate_synthetic(
    std::size_t n, std::size_t d, std::size_t s, double separation,
    double dropout_rate, std::uint64_t seed);

}  // namespace dpdcan::pipeline
