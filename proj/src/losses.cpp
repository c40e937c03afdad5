#include "dpdcan/losses.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include "dpdcan/mathfn.hpp"

namespace dpdcan::losses {

namespace {

constexpr double kNormFloor = 1e-12;

double clamp_mag(double x) {
    if (x > kLossCap) return kLossCap;
    if (x < -kLossCap) return -kLossCap;
    return x;
}

void check_zinb_domain(double x, double mean, double dispersion, double dropout) {
    if (!(x >= 0.0) || !std::isfinite(x))
        throw std::domain_error("zinb_nll: count must be finite and >= 0");
    if (!(mean > 0.0) || !std::isfinite(mean))
        throw std::domain_error("zinb_nll: mean must be positive");
    if (!(dispersion > 0.0) || !std::isfinite(dispersion))
        throw std::domain_error("zinb_nll: dispersion must be positive");
    if (!(dropout >= 0.0 && dropout <= 1.0))
        throw std::domain_error("zinb_nll: dropout must be in [0, 1]");
}

// log NB(x | mu, theta) via log-Gamma.
double log_nb(double x, double mu, double theta) {
    double log_ratio = std::log(theta) - std::log(theta + mu);
    double r = theta * log_ratio;
    if (x > 0.0)
        r += std::lgamma(x + theta) - std::lgamma(x + 1.0) - std::lgamma(theta) +
             x * (std::log(mu) - std::log(theta + mu));
    return r;
}

}  // namespace

void LossWeights::validate() const {
    if (!(rho >= 0.0 && rho <= 1.0))
        throw std::invalid_argument("rho must be in [0, 1]");
    for (double b : {beta1, beta2, beta3})
        if (!(b >= 0.0 && b <= 1.0))
            throw std::invalid_argument("beta weights must be in [0, 1]");
    if (std::abs(beta1 + beta2 + beta3 - 1.0) > 1e-9)
        throw std::invalid_argument("beta1 + beta2 + beta3 must equal 1, got " +
                                    std::to_string(beta1 + beta2 + beta3));
}

double zinb_nll(double x, double mean, double dispersion, double dropout) {
    ZinbGrad unused;
    return zinb_nll(x, mean, dispersion, dropout, unused);
}

double zinb_nll(double x, double mean, double dispersion, double dropout,
                ZinbGrad& grad) {
    check_zinb_domain(x, mean, dispersion, dropout);
    const double mu = mean, theta = dispersion, pi = dropout;
    grad = ZinbGrad{};

    if (x > 0.0) {
        // Zero-inflation contributes only the (1 - pi) factor.
        if (pi >= 1.0) return kLossCap;  // probability 0; flat cap
        double lp = std::log1p(-pi) + log_nb(x, mu, theta);
        double loss = std::min(-lp, kLossCap);
        grad.d_dropout = clamp_mag(1.0 / (1.0 - pi));
        grad.d_mean = clamp_mag((theta + x) / (theta + mu) - x / mu);
        grad.d_dispersion = clamp_mag(
            -(digamma(x + theta) - digamma(theta) + std::log(theta) -
              std::log(theta + mu) + 1.0 - (theta + x) / (theta + mu)));
        return loss;
    }

    // x = 0: mixture of the point mass and NB(0).
    double log_nb0 = theta * (std::log(theta) - std::log(theta + mu));
    double log_pi = pi > 0.0 ? std::log(pi) : -std::numeric_limits<double>::infinity();
    double log_1mpi =
        pi < 1.0 ? std::log1p(-pi) : -std::numeric_limits<double>::infinity();
    double lp0 = log_add_exp(log_pi, log_1mpi + log_nb0);
    double loss = std::min(-lp0, kLossCap);

    // w = posterior weight of the NB branch.
    double w = pi < 1.0 ? std::exp(log_1mpi + log_nb0 - lp0) : 0.0;
    grad.d_mean = clamp_mag(w * theta / (theta + mu));
    grad.d_dispersion = clamp_mag(
        -w * (std::log(theta) - std::log(theta + mu) + mu / (theta + mu)));
    double nb0 = std::exp(log_nb0);
    grad.d_dropout = clamp_mag(-(1.0 - nb0) * std::exp(-lp0));
    return loss;
}

double zinb_nll(const Matrix& counts, const Matrix& mean, const Matrix& dispersion,
                const Matrix& dropout) {
    if (!counts.same_shape(mean) || !counts.same_shape(dispersion) ||
        !counts.same_shape(dropout))
        throw std::invalid_argument("zinb_nll: shape mismatch");
    double total = 0.0;
    for (std::size_t i = 0; i < counts.data.size(); ++i)
        total += zinb_nll(counts.data[i], mean.data[i], dispersion.data[i],
                          dropout.data[i]);
    return counts.data.empty() ? 0.0 : total / static_cast<double>(counts.data.size());
}

double instance_loss(const Vec& z1, const Vec& z2) {
    if (z1.size() != z2.size())
        throw std::invalid_argument("instance_loss: size mismatch");
    double n1 = norm2(z1), n2 = norm2(z2);
    if (n1 <= kNormFloor || n2 <= kNormFloor)
        throw std::domain_error("instance_loss: degenerate (near-zero) embedding");
    return -dot(z1.data(), z2.data(), z1.size()) / (n1 * n2);
}

double instance_loss(const Vec& z1, const Vec& z2, Vec& grad_z1, Vec& grad_z2) {
    double n1 = norm2(z1), n2 = norm2(z2);
    if (n1 <= kNormFloor || n2 <= kNormFloor)
        throw std::domain_error("instance_loss: degenerate (near-zero) embedding");
    const std::size_t d = z1.size();
    double c = -dot(z1.data(), z2.data(), d) / (n1 * n2);  // loss = -cos
    grad_z1.assign(d, 0.0);
    grad_z2.assign(d, 0.0);
    for (std::size_t i = 0; i < d; ++i) {
        double u = z1[i] / n1, v = z2[i] / n2;
        // d(-u.v)/dz1 = (-v + (u.v) u)/|z1| ; note u.v = -c
        grad_z1[i] = (-v - c * u) / n1;
        grad_z2[i] = (-u - c * v) / n2;
    }
    return c;
}

double cluster_loss(const Matrix& centers) {
    Matrix g(centers.rows, centers.cols);
    return cluster_loss(centers, g);
}

double cluster_loss(const Matrix& centers, Matrix& grad_centers) {
    const std::size_t s = centers.rows, d = centers.cols;
    if (s < 1) throw std::invalid_argument("cluster_loss: need at least one center");

    // sum_{i,j} cos(c_i, c_j) = |sum_i c_i/|c_i||^2
    Matrix unit(s, d);
    Vec m(d, 0.0);
    for (std::size_t i = 0; i < s; ++i) {
        double n = norm2(centers.row(i), d);
        if (n <= kNormFloor)
            throw std::domain_error("cluster_loss: degenerate center " +
                                    std::to_string(i));
        for (std::size_t k = 0; k < d; ++k) {
            unit(i, k) = centers(i, k) / n;
            m[k] += unit(i, k);
        }
    }
    double s2 = static_cast<double>(s) * static_cast<double>(s);
    double loss = dot(m.data(), m.data(), d) / s2;

    grad_centers = Matrix(s, d);
    for (std::size_t i = 0; i < s; ++i) {
        double n = norm2(centers.row(i), d);
        double um = dot(unit.row(i), m.data(), d);
        for (std::size_t k = 0; k < d; ++k)
            grad_centers(i, k) = 2.0 * (m[k] - um * unit(i, k)) / (s2 * n);
    }
    return loss;
}

void soft_assign_row(const double* z, const Matrix& centers, double* q_out) {
    const std::size_t s = centers.rows, d = centers.cols;
    double total = 0.0;
    for (std::size_t j = 0; j < s; ++j) {
        double w = 1.0 / (1.0 + sq_dist(z, centers.row(j), d));
        q_out[j] = w;
        total += w;
    }
    for (std::size_t j = 0; j < s; ++j) q_out[j] /= total;
}

Matrix soft_assign(const Matrix& embeddings, const Matrix& centers) {
    if (embeddings.cols != centers.cols)
        throw std::invalid_argument("soft_assign: dimension mismatch");
    if (centers.rows < 1) throw std::invalid_argument("soft_assign: no centers");
    Matrix q(embeddings.rows, centers.rows);
    for (std::size_t i = 0; i < embeddings.rows; ++i)
        soft_assign_row(embeddings.row(i), centers, q.row(i));
    return q;
}

Matrix target_distribution(const Matrix& q) {
    const std::size_t n = q.rows, s = q.cols;
    Vec freq(s, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < s; ++j) freq[j] += q(i, j);
    for (std::size_t j = 0; j < s; ++j)
        if (freq[j] < 1e-12)
            throw std::runtime_error("target_distribution: empty cluster " +
                                     std::to_string(j));
    Matrix p(n, s);
    for (std::size_t i = 0; i < n; ++i) {
        double total = 0.0;
        for (std::size_t j = 0; j < s; ++j) {
            p(i, j) = q(i, j) * q(i, j) / freq[j];
            total += p(i, j);
        }
        for (std::size_t j = 0; j < s; ++j) p(i, j) /= total;
    }
    return p;
}

double kl_row(const double* p, const double* q, std::size_t s) {
    double kl = 0.0;
    for (std::size_t j = 0; j < s; ++j) {
        if (p[j] <= 0.0) continue;  // 0 ln 0 = 0
        if (q[j] <= 0.0)
            throw std::domain_error("kl: P has mass where Q is zero");
        kl += p[j] * std::log(p[j] / q[j]);
    }
    return kl;
}

double kl_clustering(const Matrix& p, const Matrix& q) {
    if (!p.same_shape(q)) throw std::invalid_argument("kl_clustering: shape mismatch");
    if (p.rows == 0) return 0.0;
    double total = 0.0;
    for (std::size_t i = 0; i < p.rows; ++i) total += kl_row(p.row(i), q.row(i), p.cols);
    return total / static_cast<double>(p.rows);
}

double kl_cluster_grad(const double* z, const Matrix& centers, const double* p_row,
                       double scale, Vec& grad_z, Matrix& grad_centers) {
    const std::size_t s = centers.rows, d = centers.cols;
    // Unnormalized Student-t kernels and their normalizer.
    Vec w(s);
    double total = 0.0;
    for (std::size_t j = 0; j < s; ++j) {
        w[j] = 1.0 / (1.0 + sq_dist(z, centers.row(j), d));
        total += w[j];
    }
    double kl = 0.0;
    grad_z.assign(d, 0.0);
    for (std::size_t j = 0; j < s; ++j) {
        double qj = w[j] / total;
        if (p_row[j] > 0.0) kl += p_row[j] * std::log(p_row[j] / qj);
        // dKL/dz = 2 sum_j w_j (p_j - q_j)(z - c_j); centers get the negative.
        double coef = 2.0 * w[j] * (p_row[j] - qj);
        for (std::size_t k = 0; k < d; ++k) {
            double diff = z[k] - centers(j, k);
            grad_z[k] += coef * diff;
            grad_centers(j, k) -= scale * coef * diff;
        }
    }
    return kl;
}

double hybrid_instance(double zinb, double inst, const LossWeights& w) {
    if (!(w.rho >= 0.0 && w.rho <= 1.0))
        throw std::invalid_argument("rho must be in [0, 1]");
    return w.rho * zinb + (1.0 - w.rho) * inst;
}

double hybrid_cluster(double zinb, double cls, double cc, const LossWeights& w) {
    w.validate();
    return w.beta1 * zinb + w.beta2 * cls + w.beta3 * cc;
}

}  // namespace dpdcan::losses
