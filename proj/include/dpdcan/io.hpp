#pragma once

#include <string>
#include <utility>
#include <vector>

#include "dpdcan/accountant.hpp"
#include "dpdcan/model.hpp"
#include "dpdcan/pipeline.hpp"

namespace dpdcan::io {

// All emitted numbers use decimal with 9 significant digits.
std::string fmt_double(double v);

// Counts table: first column is the cell id, header row carries gene ids.
pipeline::CountMatrix read_counts_table(const std::string& path, char delim);
void write_counts_table(const std::string& path, const pipeline::CountMatrix& m,
                        char delim = ',');

// Matrix-Market sparse triple (genes x cells, cellranger orientation).
pipeline::CountMatrix read_counts_mtx(const std::string& matrix_path,
                                      const std::string& genes_path,
                                      const std::string& barcodes_path);

// Two-column id,label tables (synth labels and train assignments share it).
void write_labels_csv(const std::string& path,
                      const std::vector<std::string>& cell_ids,
                      const std::vector<int>& labels, const std::string& header);
std::pair<std::vector<std::string>, std::vector<int>> read_labels_csv(
    const std::string& path);

// Preprocessed bundle.
void write_prep(const std::string& path, const pipeline::PreprocessedData& data);
pipeline::PreprocessedData read_prep(const std::string& path);

// Checkpoint JSON; encoder_only restricts to the protected tensors.
void write_checkpoint(const std::string& path, const model::ModelParams& params,
                      bool encoder_only);

void write_embeddings_csv(const std::string& path,
                          const std::vector<std::string>& cell_ids,
                          const Matrix& embeddings);

std::string privacy_report_json(const accountant::PrivacyReport& report);
void write_privacy_report(const std::string& path,
                          const accountant::PrivacyReport& report);

struct MetricsReport {
    double nmi = 0.0;  // x100 scale
    double ari = 0.0;  // x100 scale
    std::size_t n = 0;
    int clusters_true = 0;
    int clusters_pred = 0;
};
std::string metrics_json(const MetricsReport& m);

void write_text(const std::string& path, const std::string& text);

}  // namespace dpdcan::io
