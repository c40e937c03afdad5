#pragma once

#include <string>
#include <vector>

namespace dpdcan::accountant {

// Sampled-Gaussian-mechanism parameters for one or more identical steps.
// noise_scale is in units of the clipping bound.
struct SgmParams {
    double sample_rate = 1.0;  // q = L/N
    double noise_scale = 1.0;  // sigma
    long steps = 0;            // T
};

// Per-order Renyi divergence bounds R(alpha), composable by elementwise
// addition over a shared order grid.
struct RdpCurve {
    std::vector<int> orders;
    std::vector<double> values;

    static RdpCurve zero();
    static RdpCurve zero(std::vector<int> orders);
};

struct DpBudget {
    double epsilon = 0.0;
    double delta = 0.0;
    int best_order = 0;
};

// Integer alpha grid {2..64} u {80, 96, 128, 256}; brackets all practical
// (q, sigma) regimes for integer-order accounting.
const std::vector<int>& default_orders();

// RDP of a single SGM step at integer order alpha:
//   (1/(alpha-1)) * ln( sum_k C(alpha,k) (1-q)^(alpha-k) q^k exp((k^2-k)/(2 sigma^2)) )
// evaluated in log space so large alpha does not overflow.
double sgm_rdp_step(const SgmParams& params, int order);

// curve + steps * per-step RDP, elementwise over the grid.
RdpCurve accumulate(RdpCurve curve, const SgmParams& params);

// Elementwise composition of two curves on the same grid.
RdpCurve compose(const RdpCurve& a, const RdpCurve& b);

// Optimal conversion over the grid:
//   eps(alpha) = R(alpha) + ln((alpha-1)/alpha) - (ln delta + ln alpha)/(alpha-1)
DpBudget rdp_to_dp(const RdpCurve& curve, double delta);

// Smallest sigma in [0.3, 1000] whose accounted epsilon over total_steps is
// <= target_epsilon. Bisection; throws CalibrationError when the target is
// unreachable at sigma = 1000.
double calibrate_sigma(double target_epsilon, double delta, double sample_rate,
                       long total_steps);

// The released privacy claim. status is "ok", "non-private" (no noise was
// added) or "non-private-scope" (noise restricted to a strict subset of the
// encoder, voiding the encoder-release guarantee).
struct PrivacyReport {
    double epsilon = 0.0;
    double delta = 0.0;
    double sigma = 0.0;
    double sample_rate = 0.0;
    long steps_stage1 = 0;
    long steps_stage2 = 0;
    int best_order = 0;
    RdpCurve rdp_curve;
    std::string status = "ok";
};

}  // namespace dpdcan::accountant
