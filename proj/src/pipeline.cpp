#include "dpdcan/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <stdexcept>
#include <string>

#include "dpdcan/errors.hpp"

namespace dpdcan::pipeline {

namespace {

double median(Vec values) {
    std::sort(values.begin(), values.end());
    const std::size_t n = values.size();
    if (n % 2 == 1) return values[n / 2];
    return 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

model::OptimizerState make_optimizer(model::OptimizerState::Kind kind, double lr) {
    switch (kind) {
        case model::OptimizerState::Kind::sgd:
            return model::OptimizerState::sgd(lr);
        case model::OptimizerState::Kind::adam:
            return model::OptimizerState::adam(lr);
        case model::OptimizerState::Kind::adadelta:
            return model::OptimizerState::adadelta(lr);
    }
    throw std::invalid_argument("unknown optimizer kind");
}

std::vector<int> argmax_rows(const Matrix& q) {
    std::vector<int> out(q.rows, 0);
    for (std::size_t i = 0; i < q.rows; ++i) {
        const double* row = q.row(i);
        out[i] = static_cast<int>(std::max_element(row, row + q.cols) - row);
    }
    return out;
}

}  // namespace

void CountMatrix::validate() const {
    if (counts.rows != cell_ids.size())
        throw DataError("count matrix rows do not match cell id count");
    if (counts.cols != gene_ids.size())
        throw DataError("count matrix columns do not match gene id count");
    std::set<std::string> seen;
    for (const auto& id : cell_ids)
        if (!seen.insert(id).second) throw DataError("duplicate cell id: " + id);
    seen.clear();
    for (const auto& id : gene_ids)
        if (!seen.insert(id).second) throw DataError("duplicate gene id: " + id);
    for (double v : counts.data)
        if (!std::isfinite(v) || v < 0.0)
            throw DataError("counts must be finite and nonnegative");
}

PreprocessedData preprocess(const CountMatrix& raw, std::size_t n_hvg) {
    raw.validate();
    const std::size_t n = raw.counts.rows, g_total = raw.counts.cols;
    if (n < 2) throw DataError("preprocess: need at least 2 cells");
    if (n_hvg < 1) throw DataError("preprocess: n_hvg must be >= 1");

    // Genes expressed in fewer than 3 cells carry mostly technical noise.
    std::vector<std::size_t> kept;
    for (std::size_t g = 0; g < g_total; ++g) {
        std::size_t expressed = 0;
        for (std::size_t i = 0; i < n; ++i)
            if (raw.counts(i, g) > 0.0) ++expressed;
        if (expressed >= 3) kept.push_back(g);
    }
    if (kept.empty())
        throw DataError("preprocess: no gene passes the expression filter");

    Vec totals(n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t g : kept) totals[i] += raw.counts(i, g);
    for (std::size_t i = 0; i < n; ++i)
        if (totals[i] <= 0.0)
            throw DataError("cell '" + raw.cell_ids[i] + "' has zero total counts");

    const double med = median(totals);
    Vec size_factors(n);
    for (std::size_t i = 0; i < n; ++i) size_factors[i] = totals[i] / med;

    // Highly variable genes scored by variance of ln(1 + count/size_factor).
    Matrix lognorm(n, kept.size());
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < kept.size(); ++k)
            lognorm(i, k) = std::log1p(raw.counts(i, kept[k]) / size_factors[i]);

    const double inv_n = 1.0 / static_cast<double>(n);
    std::vector<double> mean(kept.size(), 0.0), variance(kept.size(), 0.0);
    for (std::size_t k = 0; k < kept.size(); ++k) {
        for (std::size_t i = 0; i < n; ++i) mean[k] += lognorm(i, k);
        mean[k] *= inv_n;
        for (std::size_t i = 0; i < n; ++i) {
            double dv = lognorm(i, k) - mean[k];
            variance[k] += dv * dv;
        }
        variance[k] *= inv_n;
    }

    const std::size_t d = std::min(n_hvg, kept.size());
    std::vector<std::size_t> order(kept.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (variance[a] != variance[b]) return variance[a] > variance[b];
        return a < b;
    });
    std::vector<std::size_t> pick(order.begin(), order.begin() + d);
    std::sort(pick.begin(), pick.end());

    PreprocessedData out;
    out.cell_ids = raw.cell_ids;
    out.size_factors = std::move(size_factors);
    out.raw_selected = Matrix(n, d);
    out.features = Matrix(n, d);
    for (std::size_t k = 0; k < d; ++k) {
        const std::size_t col = pick[k];
        out.selected_genes.push_back(kept[col]);
        out.gene_ids.push_back(raw.gene_ids[kept[col]]);
        double sd = std::sqrt(variance[col]);
        if (sd < 1e-12) sd = 1.0;
        for (std::size_t i = 0; i < n; ++i) {
            out.raw_selected(i, k) = raw.counts(i, kept[col]);
            out.features(i, k) = (lognorm(i, col) - mean[col]) / sd;
        }
    }
    return out;
}

void augment(const double* x, std::size_t d, const AugmentParams& params,
             RngStream& rng, double* view1, double* view2) {
    if (!(params.mask_prob >= 0.0 && params.mask_prob <= 1.0))
        throw std::invalid_argument("mask_prob must be in [0, 1]");
    if (!(params.jitter_std >= 0.0))
        throw std::invalid_argument("jitter_std must be nonnegative");
    for (double* view : {view1, view2}) {
        for (std::size_t j = 0; j < d; ++j) {
            double v = x[j];
            if (params.mask_prob > 0.0 && rng.uniform() < params.mask_prob) v = 0.0;
            if (params.jitter_std > 0.0) v += params.jitter_std * rng.normal();
            view[j] = v;
        }
    }
}

KmeansResult kmeans(const Matrix& z, std::size_t s, std::uint64_t seed) {
    const std::size_t n = z.rows, dim = z.cols;
    if (s < 1) throw std::invalid_argument("kmeans: need at least one cluster");
    if (n < s) throw std::invalid_argument("kmeans: fewer points than clusters");

    RngStream rng(seed, /*salt=*/0x6b6d);
    Matrix centers(s, dim);

    // k-means++ seeding.
    std::size_t first = rng.index(n);
    std::copy(z.row(first), z.row(first) + dim, centers.row(0));
    Vec dist2(n);
    for (std::size_t c = 1; c < s; ++c) {
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double best = std::numeric_limits<double>::infinity();
            for (std::size_t k = 0; k < c; ++k)
                best = std::min(best, sq_dist(z.row(i), centers.row(k), dim));
            dist2[i] = best;
            total += best;
        }
        std::size_t chosen;
        if (total <= 0.0) {
            chosen = rng.index(n);
        } else {
            double target = rng.uniform() * total;
            double acc = 0.0;
            chosen = n - 1;
            for (std::size_t i = 0; i < n; ++i) {
                acc += dist2[i];
                if (acc >= target) {
                    chosen = i;
                    break;
                }
            }
        }
        std::copy(z.row(chosen), z.row(chosen) + dim, centers.row(c));
    }

    std::vector<int> assign(n, 0);
    auto assign_all = [&] {
        for (std::size_t i = 0; i < n; ++i) {
            int best = 0;
            double best_d = sq_dist(z.row(i), centers.row(0), dim);
            for (std::size_t k = 1; k < s; ++k) {
                double dk = sq_dist(z.row(i), centers.row(k), dim);
                if (dk < best_d) {
                    best_d = dk;
                    best = static_cast<int>(k);
                }
            }
            assign[i] = best;
        }
    };

    for (int iter = 0; iter < 300; ++iter) {
        assign_all();
        Matrix next(s, dim);
        std::vector<std::size_t> count(s, 0);
        for (std::size_t i = 0; i < n; ++i) {
            ++count[assign[i]];
            for (std::size_t j = 0; j < dim; ++j) next(assign[i], j) += z(i, j);
        }
        for (std::size_t k = 0; k < s; ++k) {
            if (count[k] == 0) {
                // Reseed an empty cluster to the point farthest from its
                // assigned center.
                std::size_t far = 0;
                double far_d = -1.0;
                for (std::size_t i = 0; i < n; ++i) {
                    double di = sq_dist(z.row(i), centers.row(assign[i]), dim);
                    if (di > far_d) {
                        far_d = di;
                        far = i;
                    }
                }
                std::copy(z.row(far), z.row(far) + dim, next.row(k));
            } else {
                for (std::size_t j = 0; j < dim; ++j)
                    next(k, j) /= static_cast<double>(count[k]);
            }
        }
        double movement = 0.0;
        for (std::size_t k = 0; k < s; ++k)
            movement = std::max(
                movement, std::sqrt(sq_dist(next.row(k), centers.row(k), dim)));
        centers = std::move(next);
        if (movement < 1e-6) break;
    }
    assign_all();
    return {std::move(centers), std::move(assign)};
}

LotPlan resolve_lot(std::size_t n, const TrainPlan& plan) {
    std::size_t lot = plan.lot_size;
    if (lot == 0)
        lot = std::max<std::size_t>(
            1, static_cast<std::size_t>(std::llround(plan.lot_fraction * n)));
    if (lot > n) throw std::invalid_argument("train: lot size exceeds dataset");
    LotPlan lp;
    lp.lot_size = lot;
    lp.sample_rate = static_cast<double>(lot) / static_cast<double>(n);
    lp.steps_per_epoch = std::max<long>(
        1, std::llround(static_cast<double>(n) / static_cast<double>(lot)));
    return lp;
}

ClusterResult train(const PreprocessedData& data, const TrainPlan& plan) {
    const std::size_t n = data.features.rows;
    const std::size_t d = data.features.cols;
    if (n < 1) throw DataError("train: empty dataset");
    if (plan.n_clusters < 1 || plan.n_clusters > n)
        throw std::invalid_argument("train: n_clusters must be in [1, n]");
    if (plan.t1_epochs < 0 || plan.t2_epochs < 0)
        throw std::invalid_argument("train: epoch counts must be nonnegative");
    if (plan.target_refresh_epochs < 1)
        throw std::invalid_argument("train: target_refresh_epochs must be >= 1");
    plan.weights.validate();

    const LotPlan lp = resolve_lot(n, plan);
    const double q = lp.sample_rate;
    const long steps_per_epoch = lp.steps_per_epoch;

    dp_engine::DpConfig cfg = plan.dp;
    cfg.lot_size = lp.lot_size;
    cfg.sample_rate = q;

    model::ModelDims dims;
    dims.input_dim = d;
    dims.encoder_hidden = plan.encoder_hidden;
    dims.latent_dim = plan.latent_dim;
    dims.n_clusters = plan.n_clusters;
    auto params = model::init_params(dims, plan.seeds.init);
    cfg.validate(params.encoder.size());

    RngStream data_rng(plan.seeds.data, 0xda7a);
    RngStream noise_rng(plan.seeds.noise, 0x701e);
    RngStream aug_rng(plan.seeds.augment, 0xa06);
    std::optional<RngStream> shadow_rng;
    if (plan.shadow_noise_seed) shadow_rng.emplace(*plan.shadow_noise_seed, 0x701e);

    // One SGM step per executed DPAN call at fixed (q, sigma); the curve is
    // the per-order step values scaled by the accumulated step count.
    Vec per_step;
    if (cfg.noise_scale > 0.0)
        for (int order : accountant::default_orders())
            per_step.push_back(
                accountant::sgm_rdp_step({q, cfg.noise_scale, 1}, order));
    long total_sgm_steps = 0;

    ClusterResult result;
    model::GradBatch scratch;
    Matrix aug1, aug2, target_p;
    long global_step = 0;

    auto run_epoch = [&](int stage, long epoch, long total_epochs,
                         model::OptimizerState& opt, long& executed_steps) {
        double epoch_loss = 0.0;
        long epoch_batches = 0;
        for (long step = 0; step < steps_per_epoch; ++step) {
            model::LossBindings bindings;
            bindings.mode = stage == 1 ? model::LossMode::instance
                                       : model::LossMode::cluster;
            bindings.weights = plan.weights;
            bindings.features = &data.features;
            bindings.raw_counts = &data.raw_selected;
            bindings.size_factors = &data.size_factors;
            bindings.stop_gradient = plan.stop_gradient;
            if (stage == 2) bindings.target_p = &target_p;

            auto batch = dp_engine::sample_lot(n, q, data_rng);
            if (bindings.mode == model::LossMode::instance &&
                bindings.weights.rho < 1.0) {
                aug1 = Matrix(batch.size(), d);
                aug2 = Matrix(batch.size(), d);
                for (std::size_t i = 0; i < batch.size(); ++i)
                    augment(data.features.row(batch[i]), d, plan.augment, aug_rng,
                            aug1.row(i), aug2.row(i));
                bindings.aug1 = &aug1;
                bindings.aug2 = &aug2;
            }
            ++global_step;

            // Probe step from the identical state under the alternate noise
            // stream; the trajectory stays with the primary stream.
            std::optional<dp_engine::StepResult> shadow;
            if (shadow_rng && !batch.empty()) {
                auto params_copy = params;
                auto opt_copy = opt;
                model::GradBatch shadow_scratch;
                shadow = dp_engine::dpan_step(params_copy, opt_copy, batch, bindings,
                                              cfg, *shadow_rng, shadow_scratch);
            }

            dp_engine::StepResult res;
            try {
                res = dp_engine::dpan_step(params, opt, batch, bindings, cfg,
                                           noise_rng, scratch);
            } catch (const DivergenceError& e) {
                throw DivergenceError("stage " + std::to_string(stage) + " step " +
                                      std::to_string(global_step) + ": " + e.what());
            }
            if (!res.skipped) {
                if (!std::isfinite(res.mean_loss))
                    throw DivergenceError("stage " + std::to_string(stage) +
                                          " step " + std::to_string(global_step) +
                                          ": non-finite loss");
                ++executed_steps;
                total_sgm_steps += res.update.rdp_increment.steps;
                epoch_loss += res.mean_loss;
                ++epoch_batches;
            }
            if (plan.observer) {
                StepEvent ev;
                ev.stage = stage;
                ev.epoch = epoch;
                ev.global_step = global_step;
                ev.batch = &batch;
                ev.primary = &res;
                ev.shadow = shadow ? &*shadow : nullptr;
                plan.observer(ev);
            }
        }
        if (plan.log_epochs && plan.log) {
            double avg = epoch_batches > 0
                             ? epoch_loss / static_cast<double>(epoch_batches)
                             : 0.0;
            plan.log("stage " + std::to_string(stage) + " epoch " +
                     std::to_string(epoch) + "/" + std::to_string(total_epochs) +
                     " mean_loss " + std::to_string(avg));
        }
    };

    // Stage 1: reconstruction + instance contrast.
    auto opt1 = make_optimizer(plan.opt1_kind, plan.opt1_lr);
    for (long epoch = 1; epoch <= plan.t1_epochs; ++epoch)
        run_epoch(1, epoch, plan.t1_epochs, opt1, result.steps_stage1);

    // Center initialization on the current embeddings.
    Matrix z = model::encode(params, data.features);
    auto km = kmeans(z, plan.n_clusters, plan.seeds.init);
    params.cluster_centers = km.centers;

    // Stage 2: reconstruction + self-training KL + center contrast. The
    // target distribution refreshes on a schedule and is constant (no
    // gradient) in between.
    auto opt2 = make_optimizer(plan.opt2_kind, plan.opt2_lr);
    for (long epoch = 1; epoch <= plan.t2_epochs; ++epoch) {
        if ((epoch - 1) % plan.target_refresh_epochs == 0) {
            Matrix ze = model::encode(params, data.features);
            Matrix qm = losses::soft_assign(ze, params.cluster_centers);
            try {
                target_p = losses::target_distribution(qm);
            } catch (const std::runtime_error& e) {
                throw DivergenceError("stage 2 epoch " + std::to_string(epoch) +
                                      ": " + e.what());
            }
        }
        run_epoch(2, epoch, plan.t2_epochs, opt2, result.steps_stage2);
    }

    result.embeddings = model::encode(params, data.features);
    result.centers = params.cluster_centers;
    Matrix q_final = losses::soft_assign(result.embeddings, params.cluster_centers);
    result.assignments = argmax_rows(q_final);

    accountant::PrivacyReport report;
    report.delta = plan.delta;
    report.sigma = cfg.noise_scale;
    report.sample_rate = q;
    report.steps_stage1 = result.steps_stage1;
    report.steps_stage2 = result.steps_stage2;
    auto curve = accountant::RdpCurve::zero();
    for (std::size_t i = 0; i < per_step.size(); ++i)
        curve.values[i] = per_step[i] * static_cast<double>(total_sgm_steps);
    report.rdp_curve = curve;
    if (cfg.noise_scale > 0.0) {
        auto budget = accountant::rdp_to_dp(curve, plan.delta);
        report.epsilon = budget.epsilon;
        report.best_order = budget.best_order;
        report.status = cfg.entire_network || cfg.full_scope(params.encoder.size())
                            ? "ok"
                            : "non-private-scope";
    } else {
        report.epsilon = std::numeric_limits<double>::infinity();
        report.best_order = 0;
        report.status = "non-private";
    }
    result.privacy = report;
    result.params = std::move(params);
    return result;
}

std::pair<CountMatrix, std::vector<int>> generate_synthetic(
    std::size_t n, std::size_t d, std::size_t s, double separation,
    double dropout_rate, std::uint64_t seed) {
    if (s < 2) throw std::invalid_argument("generate_synthetic: need s >= 2");
    if (n < s) throw std::invalid_argument("generate_synthetic: need n >= s");
    if (d < 1) throw std::invalid_argument("generate_synthetic: need d >= 1");
    if (!(dropout_rate >= 0.0 && dropout_rate <= 1.0))
        throw std::invalid_argument("generate_synthetic: dropout_rate in [0, 1]");

    RngStream rng(seed, /*salt=*/0x5e7);

    Vec base(d), dispersion(d);
    for (std::size_t g = 0; g < d; ++g) {
        base[g] = rng.uniform(std::log(0.5), std::log(8.0));
        dispersion[g] = rng.uniform(2.0, 10.0);
    }
    Matrix log_mean(s, d);
    const double lo = std::log(0.01), hi = std::log(500.0);
    for (std::size_t c = 0; c < s; ++c)
        for (std::size_t g = 0; g < d; ++g)
            log_mean(c, g) = std::clamp(base[g] + separation * rng.normal(), lo, hi);

    CountMatrix out;
    out.counts = Matrix(n, d);
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
        labels[i] = static_cast<int>(i % s);
        out.cell_ids.push_back("cell_" + std::to_string(i));
        for (std::size_t g = 0; g < d; ++g) {
            // NB(mu, theta) as a gamma-Poisson mixture.
            double mu = std::exp(log_mean(labels[i], g));
            double lambda = rng.gamma(dispersion[g], mu / dispersion[g]);
            double count =
                lambda > 1e-12 ? static_cast<double>(rng.poisson(lambda)) : 0.0;
            if (dropout_rate > 0.0 && rng.uniform() < dropout_rate) count = 0.0;
            out.counts(i, g) = count;
        }
    }
    for (std::size_t g = 0; g < d; ++g)
        out.gene_ids.push_back("gene_" + std::to_string(g));
    return {std::move(out), std::move(labels)};
}

}  // namespace dpdcan::pipeline
