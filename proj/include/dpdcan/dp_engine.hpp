#pragma once

#include <vector>

#include "dpdcan/accountant.hpp"
#include "dpdcan/linalg.hpp"
#include "dpdcan/model.hpp"
#include "dpdcan/rng.hpp"

namespace dpdcan::dp_engine {

struct DpConfig {
    double clip_bound = 0.1;   // C; +inf disables clipping
    double noise_scale = 2.0;  // sigma in units of C; 0 runs noiseless
    std::size_t lot_size = 1;  // L, the fixed divisor for the averaged update
    double sample_rate = 1.0;  // q = L/N, recorded in the RDP increment
    // Encoder layer indices receiving noise; empty means every encoder layer
    // (the default). A strict subset voids the encoder-release guarantee but
    // stays runnable for the perturbation-scope ablation.
    std::vector<int> perturb_scope;
    bool entire_network = false;  // DPE ablation: noise the exposed sum too
    bool clip_exposed = true;     // Algorithm-2 behavior; optional to disable

    void validate(std::size_t encoder_layers) const;
    bool full_scope(std::size_t encoder_layers) const;
};

struct NoisyUpdate {
    Vec protected_update;  // noised, scaled by 1/L
    Vec exposed_update;    // noise-free in partial mode, scaled by 1/L
    accountant::SgmParams rdp_increment;  // (q, sigma, 1) or (q, sigma, 2)
};

struct StepResult {
    NoisyUpdate update;
    bool skipped = false;      // empty lot: parameters untouched, zero RDP
    double mean_loss = 0.0;
    double max_clipped_protected_norm = 0.0;
    double max_clipped_exposed_norm = 0.0;
    long clip_violations = 0;  // post-clip norms beyond C + 1e-9
};

// g / max(1, |g|/C); direction preserved, output norm <= C.
Vec clip(Vec gradient, double clip_bound);

// Poisson subsampling: each index joins independently with probability
// sample_rate. Ascending order.
std::vector<std::size_t> sample_lot(std::size_t n, double sample_rate,
                                    RngStream& rng);

// One DPAN step: per-sample gradients, separate l2 clipping of the two
// partitions, Gaussian noise on the protected sum (both sums in
// entire-network mode), division by the configured lot size, and one
// optimizer step over the concatenated update.
StepResult dpan_step(model::ModelParams& params, model::OptimizerState& state,
                     const std::vector<std::size_t>& batch,
                     const model::LossBindings& bindings, const DpConfig& cfg,
                     RngStream& noise_rng);

// Same, with caller-owned gradient buffers for reuse across steps.
StepResult dpan_step(model::ModelParams& params, model::OptimizerState& state,
                     const std::vector<std::size_t>& batch,
                     const model::LossBindings& bindings, const DpConfig& cfg,
                     RngStream& noise_rng, model::GradBatch& scratch);

}  // namespace dpdcan::dp_engine
