#include "dpdcan/config.hpp"

#include <cctype>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "dpdcan/errors.hpp"
#include "dpdcan/io.hpp"

namespace dpdcan::config {

namespace {

std::string trim(const std::string& s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

double to_number(const std::string& key, const std::string& v) {
    if (v == "inf") return std::numeric_limits<double>::infinity();
    try {
        std::size_t pos = 0;
        double x = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': not a number: '" + v + "'");
    }
}

long to_long(const std::string& key, const std::string& v) {
    double x = to_number(key, v);
    if (x != std::floor(x))
        throw ConfigError("key '" + key + "': expected an integer, got '" + v + "'");
    return static_cast<long>(x);
}

bool to_bool(const std::string& key, const std::string& v) {
    if (v == "true") return true;
    if (v == "false") return false;
    throw ConfigError("key '" + key + "': expected true/false, got '" + v + "'");
}

std::string unquote(const std::string& key, const std::string& v) {
    if (v.size() >= 2 && v.front() == '"' && v.back() == '"')
        return v.substr(1, v.size() - 2);
    throw ConfigError("key '" + key + "': expected a quoted string, got " + v);
}

std::vector<std::string> parse_array(const std::string& key, const std::string& v) {
    if (v.size() < 2 || v.front() != '[' || v.back() != ']')
        throw ConfigError("key '" + key + "': expected [ ... ] array, got " + v);
    std::vector<std::string> items;
    std::string body = v.substr(1, v.size() - 2);
    std::stringstream ss(body);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) items.push_back(item);
    }
    return items;
}

}  // namespace

RunConfig parse_toml(const std::string& text) {
    RunConfig cfg;
    bool saw_epsilon = false, saw_sigma = false;

    std::istringstream in(text);
    std::string line, section;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        // Strip comments outside quotes.
        bool quoted = false;
        for (std::size_t i = 0; i < line.size(); ++i) {
            if (line[i] == '"') quoted = !quoted;
            if (line[i] == '#' && !quoted) {
                line = line.substr(0, i);
                break;
            }
        }
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw ConfigError("line " + std::to_string(lineno) +
                                  ": malformed section header " + line);
            section = trim(line.substr(1, line.size() - 2));
            continue;
        }
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("line " + std::to_string(lineno) +
                              ": expected key = value, got '" + line + "'");
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        std::string full = section.empty() ? key : section + "." + key;

        if (full == "data.input")
            cfg.input = unquote(full, value);
        else if (full == "data.labels")
            cfg.labels = unquote(full, value);
        else if (full == "data.format")
            cfg.format = unquote(full, value);
        else if (full == "data.genes")
            cfg.genes = unquote(full, value);
        else if (full == "data.barcodes")
            cfg.barcodes = unquote(full, value);
        else if (full == "model.hidden") {
            cfg.hidden.clear();
            for (const auto& item : parse_array(full, value))
                cfg.hidden.push_back(static_cast<std::size_t>(to_long(full, item)));
        } else if (full == "model.latent")
            cfg.latent = static_cast<std::size_t>(to_long(full, value));
        else if (full == "model.n_clusters")
            cfg.n_clusters = static_cast<std::size_t>(to_long(full, value));
        else if (full == "privacy.epsilon") {
            cfg.epsilon = to_number(full, value);
            saw_epsilon = true;
        } else if (full == "privacy.sigma") {
            cfg.sigma = to_number(full, value);
            saw_sigma = true;
        } else if (full == "privacy.delta")
            cfg.delta = to_number(full, value);
        else if (full == "privacy.clip_bound")
            cfg.clip_bound = to_number(full, value);
        else if (full == "privacy.entire_network")
            cfg.entire_network = to_bool(full, value);
        else if (full == "privacy.perturb_scope") {
            cfg.perturb_scope.clear();
            for (const auto& item : parse_array(full, value))
                cfg.perturb_scope.push_back(static_cast<int>(to_long(full, item)));
        } else if (full == "privacy.clip_exposed")
            cfg.clip_exposed = to_bool(full, value);
        else if (full == "train.t1_epochs")
            cfg.t1_epochs = to_long(full, value);
        else if (full == "train.t2_epochs")
            cfg.t2_epochs = to_long(full, value);
        else if (full == "train.lot_fraction")
            cfg.lot_fraction = to_number(full, value);
        else if (full == "train.lot_size")
            cfg.lot_size = static_cast<std::size_t>(to_long(full, value));
        else if (full == "train.rho")
            cfg.rho = to_number(full, value);
        else if (full == "train.beta") {
            auto items = parse_array(full, value);
            if (items.size() != 3)
                throw ConfigError("key 'train.beta': expected 3 weights");
            cfg.beta1 = to_number(full, items[0]);
            cfg.beta2 = to_number(full, items[1]);
            cfg.beta3 = to_number(full, items[2]);
        } else if (full == "train.optimizer1")
            cfg.optimizer1 = unquote(full, value);
        else if (full == "train.lr1")
            cfg.lr1 = to_number(full, value);
        else if (full == "train.optimizer2")
            cfg.optimizer2 = unquote(full, value);
        else if (full == "train.lr2")
            cfg.lr2 = to_number(full, value);
        else if (full == "train.target_refresh_epochs")
            cfg.target_refresh_epochs = to_long(full, value);
        else if (full == "train.augment_mask_prob")
            cfg.augment_mask_prob = to_number(full, value);
        else if (full == "train.augment_jitter_std")
            cfg.augment_jitter_std = to_number(full, value);
        else if (full == "train.stop_gradient")
            cfg.stop_gradient = to_bool(full, value);
        else if (full == "train.hvg")
            cfg.hvg = static_cast<std::size_t>(to_long(full, value));
        else if (full == "seeds.init")
            cfg.seed_init = static_cast<std::uint64_t>(to_long(full, value));
        else if (full == "seeds.data")
            cfg.seed_data = static_cast<std::uint64_t>(to_long(full, value));
        else if (full == "seeds.noise")
            cfg.seed_noise = static_cast<std::uint64_t>(to_long(full, value));
        else if (full == "seeds.augment")
            cfg.seed_augment = static_cast<std::uint64_t>(to_long(full, value));
        else
            throw ConfigError("unknown config key '" + full + "' (line " +
                              std::to_string(lineno) + ")");
    }

    if (saw_epsilon && saw_sigma)
        throw ConfigError("give exactly one of privacy.epsilon / privacy.sigma");
    return cfg;
}

RunConfig parse_toml_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_toml(buf.str());
}

void RunConfig::validate() const {
    if (epsilon && sigma)
        throw ConfigError("give exactly one of privacy.epsilon / privacy.sigma");
    if (!epsilon && !sigma)
        throw ConfigError(
            "privacy requires epsilon or sigma (use sigma = 0 for a non-private run)");
    if (epsilon && !(*epsilon > 0.0))
        throw ConfigError("privacy.epsilon must be positive");
    if (sigma && !(*sigma >= 0.0))
        throw ConfigError("privacy.sigma must be nonnegative");
    if (!(delta > 0.0 && delta < 1.0))
        throw ConfigError("privacy.delta must be in (0, 1)");
    if (!(clip_bound > 0.0)) throw ConfigError("privacy.clip_bound must be positive");
    if (n_clusters < 1) throw ConfigError("model.n_clusters must be >= 1");
    if (latent < 1) throw ConfigError("model.latent must be >= 1");
    if (t1_epochs < 0 || t2_epochs < 0)
        throw ConfigError("train epochs must be nonnegative");
    if (lot_size == 0 && !(lot_fraction > 0.0 && lot_fraction <= 1.0))
        throw ConfigError("train.lot_fraction must be in (0, 1]");
    if (!(rho >= 0.0 && rho <= 1.0)) throw ConfigError("train.rho must be in [0, 1]");
    if (std::abs(beta1 + beta2 + beta3 - 1.0) > 1e-9)
        throw ConfigError("train.beta weights must sum to 1");
    if (optimizer1 != "adam" && optimizer1 != "sgd" && optimizer1 != "adadelta")
        throw ConfigError("train.optimizer1 must be adam|sgd|adadelta");
    if (optimizer2 != "adam" && optimizer2 != "sgd" && optimizer2 != "adadelta")
        throw ConfigError("train.optimizer2 must be adam|sgd|adadelta");
    if (target_refresh_epochs < 1)
        throw ConfigError("train.target_refresh_epochs must be >= 1");
    if (!(augment_mask_prob >= 0.0 && augment_mask_prob <= 1.0))
        throw ConfigError("train.augment_mask_prob must be in [0, 1]");
    if (!(augment_jitter_std >= 0.0))
        throw ConfigError("train.augment_jitter_std must be nonnegative");
    if (hvg < 1) throw ConfigError("train.hvg must be >= 1");
}

std::string RunConfig::to_toml() const {
    std::ostringstream out;
    out << "# dpdcan run manifest (resolved configuration)\n";
    out << "[data]\n";
    out << "input = \"" << input << "\"\n";
    if (!labels.empty()) out << "labels = \"" << labels << "\"\n";
    out << "format = \"" << format << "\"\n";
    if (!genes.empty()) out << "genes = \"" << genes << "\"\n";
    if (!barcodes.empty()) out << "barcodes = \"" << barcodes << "\"\n";
    out << "\n[model]\n";
    out << "hidden = [";
    for (std::size_t i = 0; i < hidden.size(); ++i)
        out << (i ? ", " : "") << hidden[i];
    out << "]\n";
    out << "latent = " << latent << "\n";
    out << "n_clusters = " << n_clusters << "\n";
    out << "\n[privacy]\n";
    if (epsilon) out << "# requested epsilon = " << io::fmt_double(*epsilon) << "\n";
    out << "sigma = " << io::fmt_double(sigma ? *sigma : 0.0) << "\n";
    out << "delta = " << io::fmt_double(delta) << "\n";
    out << "clip_bound = "
        << (std::isinf(clip_bound) ? "inf" : io::fmt_double(clip_bound)) << "\n";
    out << "entire_network = " << (entire_network ? "true" : "false") << "\n";
    if (!perturb_scope.empty()) {
        out << "perturb_scope = [";
        for (std::size_t i = 0; i < perturb_scope.size(); ++i)
            out << (i ? ", " : "") << perturb_scope[i];
        out << "]\n";
    }
    out << "clip_exposed = " << (clip_exposed ? "true" : "false") << "\n";
    out << "\n[train]\n";
    out << "t1_epochs = " << t1_epochs << "\n";
    out << "t2_epochs = " << t2_epochs << "\n";
    if (lot_size > 0)
        out << "lot_size = " << lot_size << "\n";
    else
        out << "lot_fraction = " << io::fmt_double(lot_fraction) << "\n";
    out << "rho = " << io::fmt_double(rho) << "\n";
    out << "beta = [" << io::fmt_double(beta1) << ", " << io::fmt_double(beta2)
        << ", " << io::fmt_double(beta3) << "]\n";
    out << "optimizer1 = \"" << optimizer1 << "\"\n";
    out << "lr1 = " << io::fmt_double(lr1) << "\n";
    out << "optimizer2 = \"" << optimizer2 << "\"\n";
    out << "lr2 = " << io::fmt_double(lr2) << "\n";
    out << "target_refresh_epochs = " << target_refresh_epochs << "\n";
    out << "augment_mask_prob = " << io::fmt_double(augment_mask_prob) << "\n";
    out << "augment_jitter_std = " << io::fmt_double(augment_jitter_std) << "\n";
    out << "stop_gradient = " << (stop_gradient ? "true" : "false") << "\n";
    out << "hvg = " << hvg << "\n";
    out << "\n[seeds]\n";
    out << "init = " << seed_init << "\n";
    out << "data = " << seed_data << "\n";
    out << "noise = " << seed_noise << "\n";
    out << "augment = " << seed_augment << "\n";
    return out.str();
}

}  // namespace dpdcan::config
