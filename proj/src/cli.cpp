#include "dpdcan/cli.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "dpdcan/accountant.hpp"
#include "dpdcan/config.hpp"
#include "dpdcan/errors.hpp"
#include "dpdcan/io.hpp"
#include "dpdcan/metrics.hpp"
#include "dpdcan/pipeline.hpp"

namespace dpdcan::cli {

namespace {

namespace fs = std::filesystem;

// Smallest 9-significant-digit decimal >= sigma, so the serialized value is
// still feasible for the calibrated target.
double round_sigma_up(double sigma) {
    double x = sigma;
    for (int i = 0; i < 64; ++i) {
        double p = std::stod(io::fmt_double(x));
        if (p >= sigma) return p;
        x = std::nextafter(x * (1.0 + 1e-9),
                           std::numeric_limits<double>::infinity());
    }
    return sigma;
}

model::OptimizerState::Kind optimizer_kind(const std::string& name) {
    if (name == "sgd") return model::OptimizerState::Kind::sgd;
    if (name == "adam") return model::OptimizerState::Kind::adam;
    if (name == "adadelta") return model::OptimizerState::Kind::adadelta;
    throw ConfigError("unknown optimizer: " + name);
}

pipeline::CountMatrix load_counts(const config::RunConfig& cfg,
                                  const std::string& input) {
    if (cfg.format == "csv") return io::read_counts_table(input, ',');
    if (cfg.format == "tsv") return io::read_counts_table(input, '\t');
    if (cfg.format == "mtx") {
        if (cfg.genes.empty() || cfg.barcodes.empty())
            throw ConfigError("mtx format needs data.genes and data.barcodes");
        return io::read_counts_mtx(input, cfg.genes, cfg.barcodes);
    }
    throw ConfigError("data.format must be csv|tsv|mtx, got '" + cfg.format + "'");
}

pipeline::TrainPlan plan_from_config(const config::RunConfig& cfg) {
    pipeline::TrainPlan plan;
    plan.t1_epochs = cfg.t1_epochs;
    plan.t2_epochs = cfg.t2_epochs;
    plan.lot_fraction = cfg.lot_fraction;
    plan.lot_size = cfg.lot_size;
    plan.weights.rho = cfg.rho;
    plan.weights.beta1 = cfg.beta1;
    plan.weights.beta2 = cfg.beta2;
    plan.weights.beta3 = cfg.beta3;
    plan.dp.clip_bound = cfg.clip_bound;
    plan.dp.noise_scale = cfg.sigma.value_or(0.0);
    plan.dp.entire_network = cfg.entire_network;
    plan.dp.perturb_scope = cfg.perturb_scope;
    plan.dp.clip_exposed = cfg.clip_exposed;
    plan.delta = cfg.delta;
    plan.n_clusters = cfg.n_clusters;
    plan.seeds = {cfg.seed_init, cfg.seed_data, cfg.seed_noise, cfg.seed_augment};
    plan.target_refresh_epochs = cfg.target_refresh_epochs;
    plan.augment.mask_prob = cfg.augment_mask_prob;
    plan.augment.jitter_std = cfg.augment_jitter_std;
    plan.encoder_hidden = cfg.hidden;
    plan.latent_dim = cfg.latent;
    plan.opt1_kind = optimizer_kind(cfg.optimizer1);
    plan.opt1_lr = cfg.lr1;
    plan.opt2_kind = optimizer_kind(cfg.optimizer2);
    plan.opt2_lr = cfg.lr2;
    plan.stop_gradient = cfg.stop_gradient;
    return plan;
}

int cmd_synth(std::size_t cells, std::size_t genes, std::size_t clusters,
              double separation, double dropout, std::uint64_t seed,
              const std::string& out_counts, const std::string& out_labels) {
    auto [counts, labels] =
        pipeline::generate_synthetic(cells, genes, clusters, separation, dropout,
                                     seed);
    io::write_counts_table(out_counts, counts);
    io::write_labels_csv(out_labels, counts.cell_ids, labels, "cell_id,label");
    std::cout << "wrote " << out_counts << " (" << cells << "x" << genes
              << ") and " << out_labels << "\n";
    return 0;
}

int cmd_preprocess(const config::RunConfig& cfg, const std::string& input,
                   const std::string& output) {
    auto counts = load_counts(cfg, input);
    auto prep = pipeline::preprocess(counts, cfg.hvg);
    io::write_prep(output, prep);
    std::cout << "wrote " << output << " (" << prep.features.rows << " cells, "
              << prep.features.cols << " genes)\n";
    return 0;
}

int cmd_train(config::RunConfig cfg, const std::string& outdir) {
    cfg.validate();
    if (cfg.input.empty()) throw ConfigError("train needs data.input (--input)");
    auto data = io::read_prep(cfg.input);

    auto plan = plan_from_config(cfg);
    const auto lot = pipeline::resolve_lot(data.features.rows, plan);

    if (cfg.epsilon) {
        long planned_steps = lot.steps_per_epoch * (cfg.t1_epochs + cfg.t2_epochs) *
                             (cfg.entire_network ? 2 : 1);
        if (planned_steps < 1)
            throw ConfigError("epsilon given but no training steps planned");
        double sigma = accountant::calibrate_sigma(*cfg.epsilon, cfg.delta,
                                                   lot.sample_rate, planned_steps);
        cfg.sigma = round_sigma_up(sigma);
        plan.dp.noise_scale = *cfg.sigma;
    }

    fs::create_directories(outdir);
    std::ostringstream log;
    plan.log_epochs = true;
    plan.log = [&log](const std::string& line) {
        log << line << '\n';
        std::cerr << line << '\n';
    };

    auto result = pipeline::train(data, plan);

    io::write_checkpoint((fs::path(outdir) / "checkpoint.json").string(),
                         result.params, /*encoder_only=*/false);
    io::write_checkpoint((fs::path(outdir) / "encoder.json").string(),
                         result.params, /*encoder_only=*/true);
    io::write_embeddings_csv((fs::path(outdir) / "embeddings.csv").string(),
                             data.cell_ids, result.embeddings);
    io::write_labels_csv((fs::path(outdir) / "assignments.csv").string(),
                         data.cell_ids, result.assignments, "cell_id,cluster");
    io::write_privacy_report((fs::path(outdir) / "privacy_report.json").string(),
                             result.privacy);
    io::write_text((fs::path(outdir) / "run_log.txt").string(), log.str());
    io::write_text((fs::path(outdir) / "manifest.toml").string(), cfg.to_toml());

    std::cout << io::privacy_report_json(result.privacy) << "\n";
    return 0;
}

int cmd_evaluate(const std::string& labels_path, const std::string& pred_path,
                 const std::string& output) {
    auto [true_ids, true_labels] = io::read_labels_csv(labels_path);
    auto [pred_ids, pred_labels] = io::read_labels_csv(pred_path);
    if (true_ids.size() != pred_ids.size())
        throw DataError("evaluate: " + labels_path + " has " +
                        std::to_string(true_ids.size()) + " rows, " + pred_path +
                        " has " + std::to_string(pred_ids.size()));

    std::map<std::string, int> by_id;
    for (std::size_t i = 0; i < true_ids.size(); ++i)
        if (!by_id.emplace(true_ids[i], true_labels[i]).second)
            throw DataError("evaluate: duplicate cell id '" + true_ids[i] + "'");
    std::vector<int> aligned_true;
    for (const auto& id : pred_ids) {
        auto it = by_id.find(id);
        if (it == by_id.end())
            throw DataError("evaluate: cell id '" + id + "' missing from " +
                            labels_path);
        aligned_true.push_back(it->second);
    }

    io::MetricsReport report;
    report.nmi = 100.0 * metrics::nmi(aligned_true, pred_labels);
    report.ari = 100.0 * metrics::ari(aligned_true, pred_labels);
    report.n = pred_labels.size();
    report.clusters_true =
        static_cast<int>(std::set<int>(aligned_true.begin(), aligned_true.end()).size());
    report.clusters_pred =
        static_cast<int>(std::set<int>(pred_labels.begin(), pred_labels.end()).size());

    std::string json = io::metrics_json(report);
    std::cout << json << "\n";
    if (!output.empty()) io::write_text(output, json + "\n");
    return 0;
}

int cmd_account(double q, double sigma, long steps, long steps2, double delta) {
    accountant::PrivacyReport report;
    report.delta = delta;
    report.sigma = sigma;
    report.sample_rate = q;
    report.steps_stage1 = steps;
    report.steps_stage2 = steps2;
    report.rdp_curve = accountant::accumulate(accountant::RdpCurve::zero(),
                                              {q, sigma, steps + steps2});
    auto budget = accountant::rdp_to_dp(report.rdp_curve, delta);
    report.epsilon = budget.epsilon;
    report.best_order = budget.best_order;
    std::cout << io::privacy_report_json(report) << "\n";
    return 0;
}

int cmd_calibrate(double epsilon, double delta, double q, long steps) {
    double sigma = round_sigma_up(accountant::calibrate_sigma(epsilon, delta, q, steps));
    accountant::PrivacyReport report;
    report.delta = delta;
    report.sigma = sigma;
    report.sample_rate = q;
    report.steps_stage1 = steps;
    report.rdp_curve =
        accountant::accumulate(accountant::RdpCurve::zero(), {q, sigma, steps});
    auto budget = accountant::rdp_to_dp(report.rdp_curve, delta);
    report.epsilon = budget.epsilon;
    report.best_order = budget.best_order;
    std::cout << io::privacy_report_json(report) << "\n";
    return 0;
}

}  // namespace

int run(std::vector<std::string> args) {
    CLI::App app{"dpdcan: differentially private contrastive autoencoder "
                 "clustering for single-cell counts"};
    app.require_subcommand(1);

    // synth
    auto* synth = app.add_subcommand("synth", "generate a synthetic ZINB dataset");
    std::size_t cells = 300, genes = 200, clusters = 3;
    double separation = 2.0, dropout = 0.3;
    std::uint64_t synth_seed = 1;
    std::string out_counts = "counts.csv", out_labels = "labels.csv";
    synth->add_option("--cells", cells, "number of cells");
    synth->add_option("--genes", genes, "number of genes");
    synth->add_option("--clusters", clusters, "number of clusters (>= 2)");
    synth->add_option("--separation", separation, "cluster log-mean separation");
    synth->add_option("--dropout", dropout, "dropout zeroing probability");
    synth->add_option("--seed", synth_seed, "generator seed");
    synth->add_option("--out-counts", out_counts, "counts CSV path");
    synth->add_option("--out-labels", out_labels, "labels CSV path");

    // preprocess
    auto* prep = app.add_subcommand("preprocess", "filter, normalize and select genes");
    std::string prep_input, prep_output = "prep.json", prep_format = "csv";
    std::string prep_genes, prep_barcodes;
    std::size_t hvg = 2000;
    prep->add_option("--input", prep_input, "counts file")->required();
    prep->add_option("--format", prep_format, "csv|tsv|mtx");
    prep->add_option("--genes", prep_genes, "gene list (mtx)");
    prep->add_option("--barcodes", prep_barcodes, "barcode list (mtx)");
    prep->add_option("--hvg", hvg, "highly variable genes to keep");
    prep->add_option("--output", prep_output, "output bundle path");

    // train
    auto* train = app.add_subcommand("train", "run the two-stage DPAN training");
    std::string train_config, train_input, train_outdir;
    double f_epsilon = 0, f_sigma = 0, f_delta = 0, f_clip = 0, f_lot_fraction = 0;
    long f_t1 = 0, f_t2 = 0, f_refresh = 0;
    std::size_t f_clusters = 0, f_lot_size = 0;
    bool f_entire = false;
    std::vector<int> f_scope;
    std::uint64_t f_seed_init = 0, f_seed_data = 0, f_seed_noise = 0,
                  f_seed_augment = 0;
    train->add_option("--config", train_config, "TOML run config");
    train->add_option("--input", train_input, "preprocessed bundle");
    train->add_option("--outdir", train_outdir, "output directory")->required();
    auto* opt_eps = train->add_option("--epsilon", f_epsilon, "target epsilon");
    auto* opt_sigma = train->add_option("--sigma", f_sigma, "noise scale (0 = non-private)");
    auto* opt_delta = train->add_option("--delta", f_delta, "delta");
    auto* opt_clip = train->add_option("--clip", f_clip, "clipping bound C");
    auto* opt_t1 = train->add_option("--t1", f_t1, "stage-1 epochs");
    auto* opt_t2 = train->add_option("--t2", f_t2, "stage-2 epochs");
    auto* opt_clusters = train->add_option("--clusters", f_clusters, "cluster count");
    auto* opt_lot_fraction =
        train->add_option("--lot-fraction", f_lot_fraction, "lot fraction of n");
    auto* opt_lot_size = train->add_option("--lot-size", f_lot_size, "fixed lot size");
    auto* opt_entire = train->add_flag("--entire", f_entire, "perturb the whole network");
    auto* opt_scope =
        train->add_option("--scope", f_scope, "encoder layers to perturb");
    auto* opt_refresh =
        train->add_option("--refresh", f_refresh, "target refresh period (epochs)");
    auto* opt_si = train->add_option("--seed-init", f_seed_init, "init seed");
    auto* opt_sd = train->add_option("--seed-data", f_seed_data, "data-order seed");
    auto* opt_sn = train->add_option("--seed-noise", f_seed_noise, "noise seed");
    auto* opt_sa = train->add_option("--seed-augment", f_seed_augment, "augment seed");

    // evaluate
    auto* eval = app.add_subcommand("evaluate", "NMI/ARI against reference labels");
    std::string eval_labels, eval_pred, eval_output;
    eval->add_option("--labels", eval_labels, "reference labels CSV")->required();
    eval->add_option("--pred", eval_pred, "predicted assignments CSV")->required();
    eval->add_option("--output", eval_output, "metrics JSON path");

    // account
    auto* account = app.add_subcommand("account", "epsilon for a step budget");
    double acc_q = 0, acc_sigma = 0, acc_delta = 1e-5;
    long acc_steps = 0, acc_steps2 = 0;
    account->add_option("--q", acc_q, "sample rate")->required();
    account->add_option("--sigma", acc_sigma, "noise scale")->required();
    account->add_option("--steps", acc_steps, "stage-1 SGM steps")->required();
    account->add_option("--steps2", acc_steps2, "stage-2 SGM steps");
    account->add_option("--delta", acc_delta, "delta");

    // calibrate
    auto* calibrate = app.add_subcommand("calibrate", "sigma for a target epsilon");
    double cal_eps = 0, cal_delta = 1e-5, cal_q = 0;
    long cal_steps = 0;
    calibrate->add_option("--epsilon", cal_eps, "target epsilon")->required();
    calibrate->add_option("--delta", cal_delta, "delta");
    calibrate->add_option("--q", cal_q, "sample rate")->required();
    calibrate->add_option("--steps", cal_steps, "total SGM steps")->required();

    std::reverse(args.begin(), args.end());
    try {
        app.parse(args);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (synth->parsed())
            return cmd_synth(cells, genes, clusters, separation, dropout, synth_seed,
                             out_counts, out_labels);
        if (prep->parsed()) {
            config::RunConfig cfg;
            cfg.format = prep_format;
            cfg.genes = prep_genes;
            cfg.barcodes = prep_barcodes;
            cfg.hvg = hvg;
            return cmd_preprocess(cfg, prep_input, prep_output);
        }
        if (train->parsed()) {
            config::RunConfig cfg;
            if (!train_config.empty()) cfg = config::parse_toml_file(train_config);
            if (!train_input.empty()) cfg.input = train_input;
            if (*opt_eps) {
                cfg.epsilon = f_epsilon;
                cfg.sigma.reset();
            }
            if (*opt_sigma) {
                cfg.sigma = f_sigma;
                cfg.epsilon.reset();
            }
            if (*opt_eps && *opt_sigma)
                throw ConfigError("give exactly one of --epsilon / --sigma");
            if (*opt_delta) cfg.delta = f_delta;
            if (*opt_clip) cfg.clip_bound = f_clip;
            if (*opt_t1) cfg.t1_epochs = f_t1;
            if (*opt_t2) cfg.t2_epochs = f_t2;
            if (*opt_clusters) cfg.n_clusters = f_clusters;
            if (*opt_lot_fraction) cfg.lot_fraction = f_lot_fraction;
            if (*opt_lot_size) cfg.lot_size = f_lot_size;
            if (*opt_entire) cfg.entire_network = true;
            if (*opt_scope) cfg.perturb_scope = f_scope;
            if (*opt_refresh) cfg.target_refresh_epochs = f_refresh;
            if (*opt_si) cfg.seed_init = f_seed_init;
            if (*opt_sd) cfg.seed_data = f_seed_data;
            if (*opt_sn) cfg.seed_noise = f_seed_noise;
            if (*opt_sa) cfg.seed_augment = f_seed_augment;
            return cmd_train(std::move(cfg), train_outdir);
        }
        if (eval->parsed()) return cmd_evaluate(eval_labels, eval_pred, eval_output);
        if (account->parsed())
            return cmd_account(acc_q, acc_sigma, acc_steps, acc_steps2, acc_delta);
        if (calibrate->parsed())
            return cmd_calibrate(cal_eps, cal_delta, cal_q, cal_steps);
        throw ConfigError("no command given");
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const DivergenceError& e) {
        std::cerr << "numerical divergence: " << e.what() << "\n";
        return 3;
    } catch (const CalibrationError& e) {
        std::cerr << "calibration failure: " << e.what() << "\n";
        return 4;
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace dpdcan::cli
