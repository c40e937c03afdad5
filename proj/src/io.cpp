#include "dpdcan/io.hpp"

#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "dpdcan/errors.hpp"
#include "json.hpp"

namespace dpdcan::io {

namespace {

using nlohmann::json;

std::vector<std::string> split(const std::string& line, char delim) {
    std::vector<std::string> out;
    std::string field;
    std::stringstream ss(line);
    while (std::getline(ss, field, delim)) out.push_back(field);
    if (!line.empty() && line.back() == delim) out.push_back("");
    return out;
}

std::string strip_cr(std::string s) {
    if (!s.empty() && s.back() == '\r') s.pop_back();
    return s;
}

double parse_number(const std::string& s, const std::string& context) {
    try {
        std::size_t pos = 0;
        double v = std::stod(s, &pos);
        while (pos < s.size() && std::isspace(static_cast<unsigned char>(s[pos])))
            ++pos;
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw DataError(context + ": not a number: '" + s + "'");
    }
}

std::ifstream open_in(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open file: " + path);
    return in;
}

std::ofstream open_out(const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write file: " + path);
    return out;
}

void append_tensor(json& tensors, const std::string& name, const Matrix& m) {
    tensors[name] = m.data;
}

json affine_json(const model::Affine& a, const std::string& name, json& tensors) {
    tensors[name + ".weight"] = a.weight.data;
    tensors[name + ".bias"] = a.bias;
    return tensors;
}

// json emits shortest-round-trip doubles; reserialize numbers at 9
// significant digits for the emitted artifacts.
void write_number_array(std::ostream& out, const std::vector<double>& v) {
    out << '[';
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out << ',';
        out << fmt_double(v[i]);
    }
    out << ']';
}

}  // namespace

std::string fmt_double(double v) {
    if (std::isinf(v)) return v > 0 ? "1e308" : "-1e308";
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

pipeline::CountMatrix read_counts_table(const std::string& path, char delim) {
    auto in = open_in(path);
    std::string line;
    if (!std::getline(in, line)) throw DataError(path + ": empty file");
    auto header = split(strip_cr(line), delim);
    if (header.size() < 2) throw DataError(path + ": header must list gene ids");

    pipeline::CountMatrix m;
    m.gene_ids.assign(header.begin() + 1, header.end());
    std::vector<Vec> rows;
    while (std::getline(in, line)) {
        line = strip_cr(line);
        if (line.empty()) continue;
        auto fields = split(line, delim);
        if (fields.size() != header.size())
            throw DataError(path + ": row '" + fields[0] + "' has " +
                            std::to_string(fields.size() - 1) + " values, expected " +
                            std::to_string(header.size() - 1));
        m.cell_ids.push_back(fields[0]);
        Vec row(fields.size() - 1);
        for (std::size_t j = 1; j < fields.size(); ++j)
            row[j - 1] = parse_number(fields[j], path + " row " + fields[0]);
        rows.push_back(std::move(row));
    }
    if (rows.empty()) throw DataError(path + ": no data rows");
    m.counts = Matrix(rows.size(), m.gene_ids.size());
    for (std::size_t i = 0; i < rows.size(); ++i)
        std::copy(rows[i].begin(), rows[i].end(), m.counts.row(i));
    m.validate();
    return m;
}

void write_counts_table(const std::string& path, const pipeline::CountMatrix& m,
                        char delim) {
    auto out = open_out(path);
    out << "cell_id";
    for (const auto& g : m.gene_ids) out << delim << g;
    out << '\n';
    for (std::size_t i = 0; i < m.counts.rows; ++i) {
        out << m.cell_ids[i];
        for (std::size_t j = 0; j < m.counts.cols; ++j)
            out << delim << fmt_double(m.counts(i, j));
        out << '\n';
    }
}

pipeline::CountMatrix read_counts_mtx(const std::string& matrix_path,
                                      const std::string& genes_path,
                                      const std::string& barcodes_path) {
    auto read_lines = [](const std::string& path) {
        auto in = open_in(path);
        std::vector<std::string> lines;
        std::string line;
        while (std::getline(in, line)) {
            line = strip_cr(line);
            if (line.empty()) continue;
            // cellranger gene files are tab-separated; keep the first token
            auto tab = line.find('\t');
            lines.push_back(tab == std::string::npos ? line : line.substr(0, tab));
        }
        return lines;
    };

    auto in = open_in(matrix_path);
    std::string line;
    if (!std::getline(in, line) || line.rfind("%%MatrixMarket", 0) != 0)
        throw DataError(matrix_path + ": missing MatrixMarket banner");
    do {
        if (!std::getline(in, line)) throw DataError(matrix_path + ": truncated");
    } while (!line.empty() && line[0] == '%');

    std::istringstream dims(line);
    std::size_t n_genes = 0, n_cells = 0, nnz = 0;
    if (!(dims >> n_genes >> n_cells >> nnz))
        throw DataError(matrix_path + ": bad size line");

    pipeline::CountMatrix m;
    m.gene_ids = read_lines(genes_path);
    m.cell_ids = read_lines(barcodes_path);
    if (m.gene_ids.size() != n_genes)
        throw DataError(genes_path + ": " + std::to_string(m.gene_ids.size()) +
                        " genes, matrix declares " + std::to_string(n_genes));
    if (m.cell_ids.size() != n_cells)
        throw DataError(barcodes_path + ": " + std::to_string(m.cell_ids.size()) +
                        " barcodes, matrix declares " + std::to_string(n_cells));

    m.counts = Matrix(n_cells, n_genes);
    std::size_t seen = 0;
    while (std::getline(in, line)) {
        line = strip_cr(line);
        if (line.empty() || line[0] == '%') continue;
        std::istringstream entry(line);
        std::size_t g = 0, c = 0;
        double v = 0.0;
        if (!(entry >> g >> c >> v))
            throw DataError(matrix_path + ": bad entry '" + line + "'");
        if (g < 1 || g > n_genes || c < 1 || c > n_cells)
            throw DataError(matrix_path + ": entry out of range: " + line);
        m.counts(c - 1, g - 1) = v;
        ++seen;
    }
    if (seen != nnz)
        throw DataError(matrix_path + ": expected " + std::to_string(nnz) +
                        " entries, found " + std::to_string(seen));
    m.validate();
    return m;
}

void write_labels_csv(const std::string& path,
                      const std::vector<std::string>& cell_ids,
                      const std::vector<int>& labels, const std::string& header) {
    auto out = open_out(path);
    out << header << '\n';
    for (std::size_t i = 0; i < cell_ids.size(); ++i)
        out << cell_ids[i] << ',' << labels[i] << '\n';
}

std::pair<std::vector<std::string>, std::vector<int>> read_labels_csv(
    const std::string& path) {
    auto in = open_in(path);
    std::string line;
    if (!std::getline(in, line)) throw DataError(path + ": empty file");
    std::vector<std::string> ids;
    std::vector<int> labels;
    while (std::getline(in, line)) {
        line = strip_cr(line);
        if (line.empty()) continue;
        auto fields = split(line, ',');
        if (fields.size() != 2)
            throw DataError(path + ": expected 'id,label' rows, got '" + line + "'");
        ids.push_back(fields[0]);
        labels.push_back(
            static_cast<int>(parse_number(fields[1], path + " row " + fields[0])));
    }
    if (ids.empty()) throw DataError(path + ": no data rows");
    return {std::move(ids), std::move(labels)};
}

void write_prep(const std::string& path, const pipeline::PreprocessedData& data) {
    auto out = open_out(path);
    out << "{\"format\":\"dpdcan-prep-1\",";
    json ids = data.cell_ids;
    json genes = data.gene_ids;
    out << "\"cell_ids\":" << ids.dump() << ",";
    out << "\"gene_ids\":" << genes.dump() << ",";
    out << "\"selected_genes\":" << json(data.selected_genes).dump() << ",";
    out << "\"size_factors\":";
    write_number_array(out, data.size_factors);
    out << ",\"raw_selected\":";
    write_number_array(out, data.raw_selected.data);
    out << ",\"features\":";
    write_number_array(out, data.features.data);
    out << ",\"n\":" << data.features.rows << ",\"d\":" << data.features.cols << "}";
    out << '\n';
}

pipeline::PreprocessedData read_prep(const std::string& path) {
    auto in = open_in(path);
    json j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        throw DataError(path + ": invalid JSON: " + e.what());
    }
    if (j.value("format", "") != "dpdcan-prep-1")
        throw DataError(path + ": not a dpdcan-prep-1 bundle");
    pipeline::PreprocessedData data;
    try {
        data.cell_ids = j.at("cell_ids").get<std::vector<std::string>>();
        data.gene_ids = j.at("gene_ids").get<std::vector<std::string>>();
        data.selected_genes = j.at("selected_genes").get<std::vector<std::size_t>>();
        data.size_factors = j.at("size_factors").get<Vec>();
        std::size_t n = j.at("n").get<std::size_t>();
        std::size_t d = j.at("d").get<std::size_t>();
        data.raw_selected = Matrix(n, d);
        data.raw_selected.data = j.at("raw_selected").get<Vec>();
        data.features = Matrix(n, d);
        data.features.data = j.at("features").get<Vec>();
        if (data.raw_selected.data.size() != n * d ||
            data.features.data.size() != n * d || data.cell_ids.size() != n ||
            data.size_factors.size() != n || data.gene_ids.size() != d)
            throw DataError(path + ": inconsistent bundle dimensions");
    } catch (const json::exception& e) {
        throw DataError(path + ": malformed bundle: " + e.what());
    }
    return data;
}

void write_checkpoint(const std::string& path, const model::ModelParams& params,
                      bool encoder_only) {
    json tensors = json::object();
    for (std::size_t l = 0; l < params.encoder.size(); ++l)
        affine_json(params.encoder[l], "encoder." + std::to_string(l), tensors);
    if (!encoder_only) {
        for (std::size_t l = 0; l < params.decoder.size(); ++l)
            affine_json(params.decoder[l], "decoder." + std::to_string(l), tensors);
        affine_json(params.head_mean, "head_mean", tensors);
        affine_json(params.head_dispersion, "head_dispersion", tensors);
        affine_json(params.head_dropout, "head_dropout", tensors);
        append_tensor(tensors, "cluster_centers", params.cluster_centers);
    }

    std::vector<std::size_t> dims;
    dims.push_back(params.dims.input_dim);
    for (auto h : params.dims.encoder_hidden) dims.push_back(h);
    dims.push_back(params.dims.latent_dim);

    auto out = open_out(path);
    out << "{\"format\":\"dpdcan-ckpt-1\",\"dims\":" << json(dims).dump()
        << ",\"n_clusters\":" << params.dims.n_clusters << ",\"tensors\":{";
    bool first = true;
    for (auto& [name, values] : tensors.items()) {
        if (!first) out << ',';
        first = false;
        out << json(name).dump() << ':';
        write_number_array(out, values.get<Vec>());
    }
    out << "}}\n";
}

void write_embeddings_csv(const std::string& path,
                          const std::vector<std::string>& cell_ids,
                          const Matrix& embeddings) {
    auto out = open_out(path);
    out << "cell_id";
    for (std::size_t j = 0; j < embeddings.cols; ++j) out << ",z" << j;
    out << '\n';
    for (std::size_t i = 0; i < embeddings.rows; ++i) {
        out << cell_ids[i];
        for (std::size_t j = 0; j < embeddings.cols; ++j)
            out << ',' << fmt_double(embeddings(i, j));
        out << '\n';
    }
}

std::string privacy_report_json(const accountant::PrivacyReport& report) {
    std::ostringstream out;
    out << "{\"epsilon\":";
    if (std::isfinite(report.epsilon))
        out << fmt_double(report.epsilon);
    else
        out << "null";
    out << ",\"delta\":" << fmt_double(report.delta);
    out << ",\"sigma\":" << fmt_double(report.sigma);
    out << ",\"sample_rate\":" << fmt_double(report.sample_rate);
    out << ",\"steps_stage1\":" << report.steps_stage1;
    out << ",\"steps_stage2\":" << report.steps_stage2;
    out << ",\"best_order\":" << report.best_order;
    out << ",\"rdp_curve\":[";
    for (std::size_t i = 0; i < report.rdp_curve.orders.size(); ++i) {
        if (i) out << ',';
        out << '[' << report.rdp_curve.orders[i] << ','
            << fmt_double(report.rdp_curve.values[i]) << ']';
    }
    out << "],\"status\":\"" << report.status << "\"}";
    return out.str();
}

void write_privacy_report(const std::string& path,
                          const accountant::PrivacyReport& report) {
    auto out = open_out(path);
    out << privacy_report_json(report) << '\n';
}

std::string metrics_json(const MetricsReport& m) {
    std::ostringstream out;
    out << "{\"nmi\":" << fmt_double(m.nmi) << ",\"ari\":" << fmt_double(m.ari)
        << ",\"n\":" << m.n << ",\"clusters_true\":" << m.clusters_true
        << ",\"clusters_pred\":" << m.clusters_pred << "}";
    return out.str();
}

void write_text(const std::string& path, const std::string& text) {
    auto out = open_out(path);
    out << text;
}

}  // namespace dpdcan::io
