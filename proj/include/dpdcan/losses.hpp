#pragma once

#include "dpdcan/linalg.hpp"

namespace dpdcan::losses {

// Mixing weights for the two hybrid losses. beta's must sum to 1.
struct LossWeights {
    double rho = 0.5;
    double beta1 = 0.5;
    double beta2 = 0.3;
    double beta3 = 0.2;

    void validate() const;
};

// Losses are capped here when the modeled probability underflows to zero.
inline constexpr double kLossCap = 1e10;

struct ZinbGrad {
    double d_mean = 0.0;
    double d_dispersion = 0.0;
    double d_dropout = 0.0;
};

// -ln[ pi 1{x=0} + (1-pi) NB(x|mean, dispersion) ], log-Gamma evaluation.
double zinb_nll(double x, double mean, double dispersion, double dropout);

// Value plus analytic partials wrt (mean, dispersion, dropout).
double zinb_nll(double x, double mean, double dispersion, double dropout,
                ZinbGrad& grad);

// Mean over all entries of counts.
double zinb_nll(const Matrix& counts, const Matrix& mean, const Matrix& dispersion,
                const Matrix& dropout);

// Negative cosine similarity of two embeddings; in [-1, 1].
double instance_loss(const Vec& z1, const Vec& z2);
double instance_loss(const Vec& z1, const Vec& z2, Vec& grad_z1, Vec& grad_z2);

// Mean pairwise cosine over all ordered center pairs (diagonal included);
// minimizing it pushes clusters apart.
double cluster_loss(const Matrix& centers);
double cluster_loss(const Matrix& centers, Matrix& grad_centers);

// Student-t soft assignment of each embedding row to each center; rows sum
// to 1.
Matrix soft_assign(const Matrix& embeddings, const Matrix& centers);
void soft_assign_row(const double* z, const Matrix& centers, double* q_out);

// Squared-and-frequency-normalized self-training target.
Matrix target_distribution(const Matrix& q);

// KL(P||Q), mean over rows (the per-sample form).
double kl_clustering(const Matrix& p, const Matrix& q);
double kl_row(const double* p, const double* q, std::size_t s);

// Per-sample clustering gradient: recomputes the soft assignment of z
// against the centers, returns the row KL against p_row, and writes the
// adjoints wrt z (overwritten) and the centers (accumulated, pre-scaled by
// `scale`).
double kl_cluster_grad(const double* z, const Matrix& centers, const double* p_row,
                       double scale, Vec& grad_z, Matrix& grad_centers);

double hybrid_instance(double zinb, double inst, const LossWeights& w);
double hybrid_cluster(double zinb, double cls, double cc, const LossWeights& w);

}  // namespace dpdcan::losses
