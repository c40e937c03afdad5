#pragma once

#include <cstddef>
#include <vector>

namespace dpdcan::metrics {

struct ContingencyTable {
    std::size_t rows = 0, cols = 0;
    std::vector<long long> counts;       // rows x cols
    std::vector<long long> row_marginals;
    std::vector<long long> col_marginals;
    long long n = 0;

    long long at(std::size_t i, std::size_t j) const { return counts[i * cols + j]; }

    static ContingencyTable from_labels(const std::vector<int>& a,
                                        const std::vector<int>& b);
};

// Normalized mutual information with geometric-mean normalization; natural
// logs. 1.0 when both partitions are single-cluster, 0.0 when exactly one
// entropy is zero.
double nmi(const std::vector<int>& labels, const std::vector<int>& pred);

// Adjusted Rand index; 1.0 for identical partitions including the
// single-cluster edge case.
double ari(const std::vector<int>& labels, const std::vector<int>& pred);

}  // namespace dpdcan::metrics
