#include "dpdcan/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

namespace dpdcan::metrics {

namespace {

std::vector<int> compact(const std::vector<int>& labels) {
    std::map<int, int> ids;
    for (int l : labels) ids.emplace(l, 0);
    int next = 0;
    for (auto& [key, id] : ids) id = next++;
    std::vector<int> out(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) out[i] = ids[labels[i]];
    return out;
}

// Identical as set partitions (same co-membership structure).
bool same_partition(const std::vector<int>& a, const std::vector<int>& b) {
    std::map<int, int> fwd, rev;
    for (std::size_t i = 0; i < a.size(); ++i) {
        auto [fit, fnew] = fwd.emplace(a[i], b[i]);
        if (!fnew && fit->second != b[i]) return false;
        auto [rit, rnew] = rev.emplace(b[i], a[i]);
        if (!rnew && rit->second != a[i]) return false;
    }
    return true;
}

double choose2(double x) { return x * (x - 1.0) / 2.0; }

}  // namespace

ContingencyTable ContingencyTable::from_labels(const std::vector<int>& a,
                                               const std::vector<int>& b) {
    if (a.size() != b.size())
        throw std::invalid_argument("label vectors have different lengths");
    if (a.empty()) throw std::invalid_argument("label vectors are empty");
    auto ca = compact(a), cb = compact(b);
    ContingencyTable t;
    t.rows = static_cast<std::size_t>(*std::max_element(ca.begin(), ca.end())) + 1;
    t.cols = static_cast<std::size_t>(*std::max_element(cb.begin(), cb.end())) + 1;
    t.counts.assign(t.rows * t.cols, 0);
    t.row_marginals.assign(t.rows, 0);
    t.col_marginals.assign(t.cols, 0);
    t.n = static_cast<long long>(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        ++t.counts[static_cast<std::size_t>(ca[i]) * t.cols + cb[i]];
        ++t.row_marginals[ca[i]];
        ++t.col_marginals[cb[i]];
    }
    return t;
}

double nmi(const std::vector<int>& labels, const std::vector<int>& pred) {
    auto t = ContingencyTable::from_labels(labels, pred);
    const double n = static_cast<double>(t.n);

    auto entropy = [n](const std::vector<long long>& marginals) {
        double h = 0.0;
        for (long long m : marginals)
            if (m > 0) h -= (m / n) * std::log(m / n);
        return h;
    };
    double ha = entropy(t.row_marginals);
    double hb = entropy(t.col_marginals);
    if (ha == 0.0 && hb == 0.0) return 1.0;  // both single-cluster
    if (ha == 0.0 || hb == 0.0) return 0.0;

    double mi = 0.0;
    for (std::size_t i = 0; i < t.rows; ++i)
        for (std::size_t j = 0; j < t.cols; ++j) {
            long long c = t.at(i, j);
            if (c == 0) continue;
            mi += (c / n) * std::log(c * n / (static_cast<double>(t.row_marginals[i]) *
                                              t.col_marginals[j]));
        }
    return mi / std::sqrt(ha * hb);
}

double ari(const std::vector<int>& labels, const std::vector<int>& pred) {
    auto t = ContingencyTable::from_labels(labels, pred);

    double sum_cells = 0.0;
    for (long long c : t.counts) sum_cells += choose2(static_cast<double>(c));
    double sum_a = 0.0, sum_b = 0.0;
    for (long long m : t.row_marginals) sum_a += choose2(static_cast<double>(m));
    for (long long m : t.col_marginals) sum_b += choose2(static_cast<double>(m));

    double pairs = choose2(static_cast<double>(t.n));
    double expected = pairs > 0.0 ? sum_a * sum_b / pairs : 0.0;
    double max_index = 0.5 * (sum_a + sum_b);
    double denom = max_index - expected;
    if (denom == 0.0) return same_partition(labels, pred) ? 1.0 : 0.0;
    return (sum_cells - expected) / denom;
}

}  // namespace dpdcan::metrics
