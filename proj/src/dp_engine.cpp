#include "dpdcan/dp_engine.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "dpdcan/errors.hpp"

namespace dpdcan::dp_engine {

namespace {

// In-place clip of one gradient row; returns the post-clip norm.
double clip_row(double* g, std::size_t n, double clip_bound) {
    double norm = norm2(g, n);
    if (!std::isfinite(norm))
        throw DivergenceError("non-finite gradient encountered while clipping");
    if (norm > clip_bound) {
        double scale = clip_bound / norm;
        for (std::size_t i = 0; i < n; ++i) g[i] *= scale;
        return clip_bound;
    }
    return norm;
}

}  // namespace

void DpConfig::validate(std::size_t encoder_layers) const {
    if (!(clip_bound > 0.0))
        throw std::invalid_argument("clip_bound must be positive");
    if (!(noise_scale >= 0.0))
        throw std::invalid_argument("noise_scale must be nonnegative");
    if (noise_scale > 0.0 && !std::isfinite(clip_bound))
        throw std::invalid_argument("noise requires a finite clip_bound");
    if (lot_size < 1) throw std::invalid_argument("lot_size must be >= 1");
    if (!(sample_rate > 0.0 && sample_rate <= 1.0))
        throw std::invalid_argument("sample_rate must be in (0, 1]");
    for (int l : perturb_scope)
        if (l < 0 || static_cast<std::size_t>(l) >= encoder_layers)
            throw std::invalid_argument("perturb_scope layer " + std::to_string(l) +
                                        " out of range");
}

bool DpConfig::full_scope(std::size_t encoder_layers) const {
    if (perturb_scope.empty()) return true;
    std::vector<int> sorted = perturb_scope;
    std::sort(sorted.begin(), sorted.end());
    sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
    return sorted.size() == encoder_layers;
}

Vec clip(Vec gradient, double clip_bound) {
    if (!(clip_bound > 0.0))
        throw std::invalid_argument("clip_bound must be positive");
    clip_row(gradient.data(), gradient.size(), clip_bound);
    return gradient;
}

std::vector<std::size_t> sample_lot(std::size_t n, double sample_rate,
                                    RngStream& rng) {
    if (!(sample_rate > 0.0 && sample_rate <= 1.0))
        throw std::invalid_argument("sample_rate must be in (0, 1]");
    std::vector<std::size_t> lot;
    for (std::size_t i = 0; i < n; ++i)
        if (rng.uniform() < sample_rate) lot.push_back(i);
    return lot;
}

StepResult dpan_step(model::ModelParams& params, model::OptimizerState& state,
                     const std::vector<std::size_t>& batch,
                     const model::LossBindings& bindings, const DpConfig& cfg,
                     RngStream& noise_rng) {
    model::GradBatch scratch;
    return dpan_step(params, state, batch, bindings, cfg, noise_rng, scratch);
}

StepResult dpan_step(model::ModelParams& params, model::OptimizerState& state,
                     const std::vector<std::size_t>& batch,
                     const model::LossBindings& bindings, const DpConfig& cfg,
                     RngStream& noise_rng, model::GradBatch& scratch) {
    cfg.validate(params.encoder.size());

    StepResult result;
    result.update.rdp_increment = {cfg.sample_rate, cfg.noise_scale, 0};
    if (batch.empty()) {
        result.skipped = true;
        return result;
    }

    model::per_sample_gradients(params, bindings, batch, scratch);
    const std::size_t p_size = scratch.protected_parts.cols;
    const std::size_t e_size = scratch.exposed_parts.cols;

    // Per-sample clipping, both partitions against the same bound.
    for (std::size_t i = 0; i < batch.size(); ++i) {
        double pn = clip_row(scratch.protected_parts.row(i), p_size, cfg.clip_bound);
        result.max_clipped_protected_norm =
            std::max(result.max_clipped_protected_norm, pn);
        if (pn > cfg.clip_bound + 1e-9) ++result.clip_violations;
        if (cfg.clip_exposed) {
            double en = clip_row(scratch.exposed_parts.row(i), e_size, cfg.clip_bound);
            result.max_clipped_exposed_norm =
                std::max(result.max_clipped_exposed_norm, en);
            if (en > cfg.clip_bound + 1e-9) ++result.clip_violations;
        }
    }

    // Deterministic reduction in ascending lot order.
    Vec prot_sum(p_size, 0.0), exp_sum(e_size, 0.0);
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const double* pr = scratch.protected_parts.row(i);
        for (std::size_t k = 0; k < p_size; ++k) prot_sum[k] += pr[k];
        const double* er = scratch.exposed_parts.row(i);
        for (std::size_t k = 0; k < e_size; ++k) exp_sum[k] += er[k];
    }

    if (cfg.noise_scale > 0.0) {
        const double stddev = cfg.noise_scale * cfg.clip_bound;
        if (cfg.entire_network) {
            for (std::size_t k = 0; k < p_size; ++k)
                prot_sum[k] += stddev * noise_rng.normal();
            for (std::size_t k = 0; k < e_size; ++k)
                exp_sum[k] += stddev * noise_rng.normal();
        } else {
            auto ranges = model::protected_layer_ranges(params);
            std::vector<int> scope = cfg.perturb_scope;
            if (scope.empty())
                for (std::size_t l = 0; l < ranges.size(); ++l)
                    scope.push_back(static_cast<int>(l));
            std::sort(scope.begin(), scope.end());
            scope.erase(std::unique(scope.begin(), scope.end()), scope.end());
            for (int l : scope)
                for (std::size_t k = ranges[l].first; k < ranges[l].second; ++k)
                    prot_sum[k] += stddev * noise_rng.normal();
        }
        result.update.rdp_increment.steps = cfg.entire_network ? 2 : 1;
    }

    const double lot = static_cast<double>(cfg.lot_size);
    for (auto& v : prot_sum) v /= lot;
    for (auto& v : exp_sum) v /= lot;

    Vec update;
    update.reserve(p_size + e_size);
    update.insert(update.end(), prot_sum.begin(), prot_sum.end());
    update.insert(update.end(), exp_sum.begin(), exp_sum.end());
    model::optimizer_step(state, params, update);

    result.update.protected_update = std::move(prot_sum);
    result.update.exposed_update = std::move(exp_sum);
    double total = 0.0;
    for (double l : scratch.loss) total += l;
    result.mean_loss = total / static_cast<double>(batch.size());
    return result;
}

}  // namespace dpdcan::dp_engine
