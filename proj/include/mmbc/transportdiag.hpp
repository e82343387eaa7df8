#pragma once

#include "mmbc/modemetrics.hpp"
#include "mmbc/policies.hpp"

#include <functional>
#include <utility>
#include <vector>

namespace mmbc {

// Tolerance used when matching decoded trajectories to templates and when
// converting template distances into mode-set separations.
constexpr double kEpsTol = 0.05;

// Template separation under the RMS metric with tolerance slack:
// max(0, d_traj(T_i, T_j) - 2 * eps_tol).
double delta_ij(const TaskSpec& task, int i, int j);

// Batched deterministic base-noise decoder (the sampler G_{theta,s}).
using NoiseDecoder = std::function<std::vector<Trajectory>(const Tensor& noise)>;
NoiseDecoder policy_noise_decoder(const PolicyState& policy, Point obs);

struct BridgePath {
    std::vector<float> u1, u2;
    int mode_i = 0, mode_j = 0; // 1-based endpoint modes; differ by construction
    std::vector<uint8_t> valid; // per interpolation point
    double bridge_fraction = 0.0;
    bool transition_found = false;
    double lambda_minus = 0.0, lambda_plus = 0.0;
    double w = 0.0;     // base-space width of the transition segment
    double s_seg = 0.0; // d_traj across the segment / w
    double delta = 0.0; // Delta_ij of the endpoint modes
};

struct BridgeCollection {
    std::vector<BridgePath> paths;
    int n_noise = 0;
    int n_valid_base = 0;
    int n_pairs_requested = 0; // fewer found pairs is reported, not an error
};

// App-level protocol: sample base noises, keep decodes that are valid and
// within eps_tol (RMS) of their success-mode template, pick cross-mode pairs,
// decode 51 interpolation points per pair.
BridgeCollection collect_bridge_paths(const NoiseDecoder& decoder, const TaskSpec& task,
                                      double mean_expert_len, int noise_dim, int n_noise,
                                      int n_pairs, int n_interp, uint64_t seed);

// Standard normal CDF / quantile (rational approximation polished by Newton).
double normal_cdf(double x);
double normal_quantile(double p);

// Proposition-2 mode-count bound: 1 + floor(2 Phi^{-1}(1 - tau/2) L / Delta).
int prop2_bound(double tau, double lipschitz, double delta);

// Piecewise-linear scalar generator with constant extension beyond the
// breakpoints; the closed-form pushforward oracle for the Prop-2 check.
struct PiecewiseLinear {
    std::vector<double> xs; // ascending breakpoints
    std::vector<double> ys;

    double operator()(double u) const;
    double lipschitz() const;
};

using Interval = std::pair<double, double>;

// Exact N(0,1) mass of gen^{-1}([lo, hi]).
double pushforward_mass_exact(const PiecewiseLinear& gen, double lo, double hi);

int count_tau_modes_exact(const PiecewiseLinear& gen, const std::vector<Interval>& modes,
                          double tau);

int count_tau_modes_mc(const std::function<double(double)>& gen,
                       const std::vector<Interval>& modes, double tau, int n_mc, Rng& rng);

// Finite-difference Lipschitz quotient of the sampler along a unit ray in
// base space; a lower bound on the true constant.
double empirical_lipschitz_1d(const NoiseDecoder& decoder, const std::vector<float>& direction,
                              double range, int n_grid);

} // namespace mmbc
