#include "dpdcan/cli.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "doctest.h"
#include "dpdcan/accountant.hpp"
#include "dpdcan/config.hpp"
#include "dpdcan/errors.hpp"
#include "json.hpp"

using namespace dpdcan;
namespace fs = std::filesystem;

namespace {

struct CaptureCout {
    std::stringstream ss;
    std::streambuf* old;
    CaptureCout() : old(std::cout.rdbuf(ss.rdbuf())) {}
    ~CaptureCout() { std::cout.rdbuf(old); }
    std::string str() const { return ss.str(); }
};

fs::path fresh_dir(const std::string& tag) {
    static int counter = 0;
    auto dir = fs::temp_directory_path() /
               ("dpdcan_test_" + tag + "_" + std::to_string(counter++));
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    REQUIRE(in.good());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

int count_lines(const std::string& text) {
    int n = 0;
    for (char c : text) n += c == '\n';
    return n;
}

}  // namespace

TEST_CASE("synth writes deterministic CSVs and validates flags") {
    auto dir = fresh_dir("synth");
    auto counts = (dir / "counts.csv").string();
    auto labels = (dir / "labels.csv").string();
    std::vector<std::string> args{"synth",        "--cells",      "300",
                                  "--genes",      "200",          "--clusters",
                                  "3",            "--seed",       "1",
                                  "--out-counts", counts,         "--out-labels",
                                  labels};
    {
        CaptureCout cap;
        CHECK(cli::run(args) == 0);
    }
    auto counts_text = slurp(counts);
    auto labels_text = slurp(labels);
    CHECK(count_lines(counts_text) == 301);  // header + 300 rows
    CHECK(count_lines(labels_text) == 301);

    {
        CaptureCout cap;
        CHECK(cli::run(args) == 0);
    }
    CHECK(slurp(counts) == counts_text);
    CHECK(slurp(labels) == labels_text);

    CaptureCout cap;
    CHECK(cli::run({"synth", "--clusters", "1", "--out-counts", counts,
                    "--out-labels", labels}) == 1);
}

TEST_CASE("account matches the direct grid minimum") {
    CaptureCout cap;
    REQUIRE(cli::run({"account", "--q", "1.0", "--sigma", "2.0", "--steps", "10",
                      "--delta", "1e-5"}) == 0);
    auto j = nlohmann::json::parse(cap.str());

    double oracle = std::numeric_limits<double>::infinity();
    for (int alpha : accountant::default_orders()) {
        double r = 10.0 * alpha / 8.0;
        double eps = r + std::log((alpha - 1.0) / alpha) -
                     (std::log(1e-5) + std::log(static_cast<double>(alpha))) /
                         (alpha - 1.0);
        oracle = std::min(oracle, eps);
    }
    CHECK(j["epsilon"].get<double>() == doctest::Approx(oracle).epsilon(1e-9));
    CHECK(j["steps_stage1"].get<long>() == 10);
    CHECK(j["status"] == "ok");
}

TEST_CASE("calibrate emits a feasible sigma that accounts back to target") {
    CaptureCout cap;
    REQUIRE(cli::run({"calibrate", "--epsilon", "8.0", "--delta", "1e-5", "--q",
                      "0.1", "--steps", "2000"}) == 0);
    auto j = nlohmann::json::parse(cap.str());
    double sigma = j["sigma"].get<double>();
    double eps = j["epsilon"].get<double>();
    CHECK(eps <= 8.0);
    CHECK(eps >= 8.0 - 1e-3);

    // The reported epsilon is recomputable offline from the reported inputs.
    CaptureCout cap2;
    REQUIRE(cli::run({"account", "--q", "0.1", "--sigma",
                      nlohmann::json(sigma).dump(), "--steps", "2000", "--delta",
                      "1e-5"}) == 0);
    auto j2 = nlohmann::json::parse(cap2.str());
    CHECK(j2["epsilon"].get<double>() == doctest::Approx(eps).epsilon(1e-12));

    CaptureCout cap3;
    CHECK(cli::run({"calibrate", "--epsilon", "1e-9", "--delta", "1e-5", "--q",
                    "1.0", "--steps", "100000"}) == 4);
}

TEST_CASE("full chain: synth, preprocess, train, evaluate") {
    auto dir = fresh_dir("chain");
    auto counts = (dir / "counts.csv").string();
    auto labels = (dir / "labels.csv").string();
    auto prep = (dir / "prep.json").string();
    auto outdir = (dir / "run").string();

    {
        CaptureCout cap;
        REQUIRE(cli::run({"synth", "--cells", "120", "--genes", "60", "--clusters",
                          "3", "--separation", "2.5", "--dropout", "0.2", "--seed",
                          "2", "--out-counts", counts, "--out-labels", labels}) == 0);
        REQUIRE(cli::run({"preprocess", "--input", counts, "--hvg", "50",
                          "--output", prep}) == 0);
    }

    auto cfg_path = (dir / "run.toml").string();
    {
        std::ofstream cfg(cfg_path);
        cfg << "[data]\ninput = \"" << prep << "\"\n";
        cfg << "[model]\nhidden = [32, 16]\nlatent = 8\nn_clusters = 3\n";
        cfg << "[privacy]\nepsilon = 8.0\ndelta = 1e-5\nclip_bound = 0.1\n";
        cfg << "[train]\nt1_epochs = 3\nt2_epochs = 3\nlot_fraction = 0.2\n";
    }

    std::string stdout_text;
    {
        CaptureCout cap;
        REQUIRE(cli::run({"train", "--config", cfg_path, "--outdir", outdir}) == 0);
        stdout_text = cap.str();
    }
    for (const char* f :
         {"checkpoint.json", "encoder.json", "embeddings.csv", "assignments.csv",
          "privacy_report.json", "run_log.txt", "manifest.toml"})
        CHECK(fs::exists(fs::path(outdir) / f));

    auto report = nlohmann::json::parse(slurp(fs::path(outdir) / "privacy_report.json"));
    CHECK(report["epsilon"].get<double>() <= 8.0);
    CHECK(report["status"] == "ok");
    CHECK(report["steps_stage1"].get<long>() == 3 * 5);

    // Encoder-only export holds exactly the protected tensors.
    auto encoder = nlohmann::json::parse(slurp(fs::path(outdir) / "encoder.json"));
    CHECK(encoder["tensors"].contains("encoder.0.weight"));
    CHECK(!encoder["tensors"].contains("decoder.0.weight"));
    CHECK(!encoder["tensors"].contains("cluster_centers"));
    auto full = nlohmann::json::parse(slurp(fs::path(outdir) / "checkpoint.json"));
    CHECK(full["tensors"].contains("decoder.0.weight"));
    CHECK(full["tensors"].contains("cluster_centers"));
    CHECK(full["format"] == "dpdcan-ckpt-1");

    // evaluate: labels against themselves give 100/100.
    {
        CaptureCout cap;
        REQUIRE(cli::run({"evaluate", "--labels", labels, "--pred", labels}) == 0);
        auto m = nlohmann::json::parse(cap.str());
        CHECK(m["nmi"].get<double>() == doctest::Approx(100.0));
        CHECK(m["ari"].get<double>() == doctest::Approx(100.0));
    }

    // evaluate the run's assignments; metrics exist and are in range.
    {
        CaptureCout cap;
        auto metrics_path = (dir / "metrics.json").string();
        REQUIRE(cli::run({"evaluate", "--labels", labels, "--pred",
                          (fs::path(outdir) / "assignments.csv").string(),
                          "--output", metrics_path}) == 0);
        auto m = nlohmann::json::parse(slurp(metrics_path));
        CHECK(m["n"].get<int>() == 120);
        CHECK(m["ari"].get<double>() >= -50.0);
        CHECK(m["ari"].get<double>() <= 100.0);
        CHECK(m["clusters_true"].get<int>() == 3);
    }
}

TEST_CASE("manifest reruns reproduce every artifact bitwise") {
    auto dir = fresh_dir("manifest");
    auto counts = (dir / "counts.csv").string();
    auto labels = (dir / "labels.csv").string();
    auto prep = (dir / "prep.json").string();
    {
        CaptureCout cap;
        REQUIRE(cli::run({"synth", "--cells", "80", "--genes", "40", "--clusters",
                          "2", "--seed", "4", "--out-counts", counts,
                          "--out-labels", labels}) == 0);
        REQUIRE(cli::run({"preprocess", "--input", counts, "--hvg", "30",
                          "--output", prep}) == 0);
    }

    auto out_a = (dir / "runA").string();
    auto out_b = (dir / "runB").string();
    {
        CaptureCout cap;
        REQUIRE(cli::run({"train", "--input", prep, "--outdir", out_a, "--sigma",
                          "2.0", "--clusters", "2", "--t1", "2", "--t2", "2"}) == 0);
        REQUIRE(cli::run({"train", "--config",
                          (fs::path(out_a) / "manifest.toml").string(), "--outdir",
                          out_b}) == 0);
    }
    for (const char* f :
         {"checkpoint.json", "encoder.json", "embeddings.csv", "assignments.csv",
          "privacy_report.json", "run_log.txt", "manifest.toml"})
        CHECK(slurp(fs::path(out_a) / f) == slurp(fs::path(out_b) / f));
}

TEST_CASE("config parsing round trip and validation") {
    config::RunConfig cfg;
    cfg.input = "prep.json";
    cfg.n_clusters = 4;
    cfg.sigma = 1.75;
    cfg.perturb_scope = {0, 1};
    cfg.hidden = {32, 16};
    cfg.t1_epochs = 7;
    auto text = cfg.to_toml();
    auto parsed = config::parse_toml(text);
    CHECK(parsed.input == "prep.json");
    CHECK(parsed.n_clusters == 4);
    REQUIRE(parsed.sigma.has_value());
    CHECK(*parsed.sigma == doctest::Approx(1.75));
    CHECK(!parsed.epsilon.has_value());
    CHECK(parsed.perturb_scope == std::vector<int>{0, 1});
    CHECK(parsed.hidden == std::vector<std::size_t>{32, 16});
    CHECK(parsed.t1_epochs == 7);

    CHECK_THROWS_AS(config::parse_toml("[privacy]\nepsilon = 1\nsigma = 2\n"),
                    ConfigError);
    CHECK_THROWS_AS(config::parse_toml("[privacy]\nmystery = 1\n"), ConfigError);

    config::RunConfig both;
    both.n_clusters = 2;
    both.epsilon = 1.0;
    both.sigma = 2.0;
    CHECK_THROWS_AS(both.validate(), ConfigError);
    config::RunConfig neither;
    neither.n_clusters = 2;
    CHECK_THROWS_AS(neither.validate(), ConfigError);
}

TEST_CASE("exit codes name the error family") {
    CaptureCout cap;
    // Missing data file.
    CHECK(cli::run({"preprocess", "--input", "/nonexistent/file.csv", "--output",
                    "/tmp/never.json"}) == 2);
    // Unknown config key.
    auto dir = fresh_dir("codes");
    auto bad_cfg = (dir / "bad.toml").string();
    {
        std::ofstream out(bad_cfg);
        out << "[train]\nnot_a_key = 3\n";
    }
    CHECK(cli::run({"train", "--config", bad_cfg, "--outdir",
                    (dir / "out").string()}) == 1);
    // Unknown subcommand.
    CHECK(cli::run({"frobnicate"}) == 1);
}
