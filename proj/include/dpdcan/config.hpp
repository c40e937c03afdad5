#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace dpdcan::config {

// Resolved run configuration; sections mirror the config file layout.
struct RunConfig {
    // [data]
    std::string input;
    std::string labels;
    std::string format = "csv";  // csv | tsv | mtx
    std::string genes;           // mtx companion files
    std::string barcodes;

    // [model]
    std::vector<std::size_t> hidden = {256, 64};
    std::size_t latent = 32;
    std::size_t n_clusters = 0;

    // [privacy] — exactly one of epsilon/sigma; sigma = 0 runs non-private.
    std::optional<double> epsilon;
    std::optional<double> sigma;
    double delta = 1e-5;
    double clip_bound = 0.1;  // "inf" disables clipping
    bool entire_network = false;
    std::vector<int> perturb_scope;  // empty: all encoder layers
    bool clip_exposed = true;

    // [train]
    long t1_epochs = 100;
    long t2_epochs = 100;
    double lot_fraction = 0.1;
    std::size_t lot_size = 0;  // 0: use lot_fraction
    double rho = 0.5;
    double beta1 = 0.5, beta2 = 0.3, beta3 = 0.2;
    std::string optimizer1 = "adam";
    double lr1 = 0.001;
    std::string optimizer2 = "adadelta";
    double lr2 = 1.0;
    long target_refresh_epochs = 1;
    double augment_mask_prob = 0.2;
    double augment_jitter_std = 0.1;
    bool stop_gradient = false;
    std::size_t hvg = 2000;

    // [seeds]
    std::uint64_t seed_init = 1;
    std::uint64_t seed_data = 2;
    std::uint64_t seed_noise = 3;
    std::uint64_t seed_augment = 4;

    void validate() const;
    // Full resolved config as the manifest; sigma is written resolved and a
    // requested epsilon becomes a comment.
    std::string to_toml() const;
};

RunConfig parse_toml(const std::string& text);
RunConfig parse_toml_file(const std::string& path);

}  // namespace dpdcan::config
