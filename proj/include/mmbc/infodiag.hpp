#pragma once

#include "mmbc/policies.hpp"

#include <vector>

namespace mmbc {

// Diagonal Gaussian posterior parameters for one demonstration.
struct DiagGaussian {
    std::vector<double> mu;
    std::vector<double> logvar;
};

// Fano-corrected lower bound: h_mode - [H_b(rho) + rho log(K-1)], with the
// bracket zero when K = 1 and H_b(0) = 0 by convention.
double fano_bound(double h_mode, double rho, int K);
double binary_entropy(double p);

// Per-mode full-covariance Gaussian class-conditionals with shrinkage
// (cov + lambda I), used for both the Bayes classifier and the plug-in
// mode-information estimate.
class ModeClassifier {
public:
    static ModeClassifier fit(const std::vector<std::vector<double>>& latents,
                              const std::vector<int>& labels, int K, double shrinkage = 1e-3);

    int classify(const std::vector<double>& z) const;
    // log p(m | z) for m = 1..K
    std::vector<double> log_posterior(const std::vector<double>& z) const;
    int K() const { return K_; }

private:
    struct Fit {
        std::vector<double> mean;
        std::vector<double> chol; // lower Cholesky of (cov + lambda I), row-major d x d
        double log_norm = 0.0;    // -0.5 d log(2 pi) - sum log chol_ii
        double log_prior = 0.0;
    };
    double log_lik(const Fit& f, const std::vector<double>& z) const;

    int K_ = 0;
    int d_ = 0;
    std::vector<Fit> fits_;
};

struct BayesClassifierResult {
    ModeClassifier classifier; // fit on all data
    double rho_z = 0.0;        // 5-fold held-out misclassification rate
};

// Requires >= 2 modes present and >= d+2 samples per mode.
BayesClassifierResult bayes_mode_classifier(const std::vector<std::vector<double>>& latents,
                                            const std::vector<int>& labels, int K,
                                            uint64_t seed, int folds = 5);

// Plug-in mode information: H(M) minus the held-out cross-entropy of the
// fitted Bayes posterior (a consistent upper bound on H(M|Z), so the
// estimate cannot be inflated by overconfident fits), clipped at zero.
double estimate_i_mode(const std::vector<std::vector<double>>& latents,
                       const std::vector<int>& labels, int K, uint64_t seed, int folds = 5);

// Monte-Carlo I(A;Z|S): mean over demos/draws of log q(z|a) - log qbar(z),
// where qbar is the equal-weight mixture of all dataset posteriors.
double estimate_i_action(const std::vector<DiagGaussian>& posteriors, int n_mc, Rng& rng);

// Dataset mean of the closed-form KL(q(.|a) || N(0, I)).
double pointwise_kl_average(const std::vector<DiagGaussian>& posteriors);

// Monte-Carlo KL(aggregate posterior || N(0, I)) for the surgery identity.
double mixture_prior_kl_mc(const std::vector<DiagGaussian>& posteriors, int n_samples, Rng& rng);

struct InfoChain {
    double h_mode = 0.0;   // H(M|S), nats
    double b_fano = 0.0;   // Fano bound at the Bayes classifier error
    double i_mode = 0.0;   // plug-in I(M;Z|S)
    double i_action = 0.0; // Monte-Carlo I(A;Z|S)
    double k_pt = 0.0;     // mean pointwise KL to the prior
    double rho_z = 0.0;    // Bayes classifier error
    int n_samples = 0;
};

// Full chain for a KL-CVAE checkpoint. The synthetic layout has a single
// conditioning state; when start jitter is enabled the estimate bins by the
// 16 nearest start-cluster centroids and averages the per-bin chains.
InfoChain info_chain(const PolicyState& policy, const Dataset& ds, int n_mc, uint64_t seed);

// Posterior parameters for every demo under the policy's encoder (diagonal
// Gaussian for KL-CVAE; deterministic encoders get logvar = -inf surrogate of
// a point mass and are rejected by estimators that need stochasticity).
std::vector<DiagGaussian> encode_dataset_posteriors(const PolicyState& policy, const Dataset& ds);

struct ValidMassReport {
    double posterior_valid = 0.0;
    double prior_valid = 0.0;
    double delta_valid = 0.0;
};

// Fraction of decoded posterior / prior latents passing the success
// criterion; the deployment-side coverage gap of aggregate matching.
ValidMassReport valid_mass_gap(const PolicyState& policy, const Dataset& ds, const TaskSpec& task,
                               int n_samples, uint64_t seed);

} // namespace mmbc
