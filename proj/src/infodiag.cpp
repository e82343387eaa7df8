#include "mmbc/infodiag.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace mmbc {

double binary_entropy(double p) {
    if (p <= 0.0 || p >= 1.0) return 0.0;
    return -p * std::log(p) - (1.0 - p) * std::log(1.0 - p);
}

double fano_bound(double h_mode, double rho, int K) {
    if (K < 1) throw std::invalid_argument("fano_bound: K must be >= 1");
    if (K == 1) return h_mode;
    if (rho < 0.0 || rho > 1.0 - 1.0 / double(K))
        throw std::invalid_argument("fano_bound: rho outside [0, 1 - 1/K]");
    return h_mode - (binary_entropy(rho) + rho * std::log(double(K - 1)));
}

namespace {

// Lower-triangular Cholesky of a small SPD matrix (row-major d x d).
std::vector<double> cholesky(const std::vector<double>& a, int d) {
    std::vector<double> L(size_t(d) * size_t(d), 0.0);
    for (int i = 0; i < d; ++i) {
        for (int j = 0; j <= i; ++j) {
            double s = a[size_t(i) * size_t(d) + size_t(j)];
            for (int k = 0; k < j; ++k)
                s -= L[size_t(i) * size_t(d) + size_t(k)] * L[size_t(j) * size_t(d) + size_t(k)];
            if (i == j) {
                if (s <= 0.0)
                    throw NumericsError("mode covariance fit is singular even after shrinkage");
                L[size_t(i) * size_t(d) + size_t(j)] = std::sqrt(s);
            } else {
                L[size_t(i) * size_t(d) + size_t(j)] = s / L[size_t(j) * size_t(d) + size_t(j)];
            }
        }
    }
    return L;
}

// Solve L y = b for lower-triangular L.
void forward_solve(const std::vector<double>& L, int d, std::vector<double>& b) {
    for (int i = 0; i < d; ++i) {
        double s = b[size_t(i)];
        for (int k = 0; k < i; ++k) s -= L[size_t(i) * size_t(d) + size_t(k)] * b[size_t(k)];
        b[size_t(i)] = s / L[size_t(i) * size_t(d) + size_t(i)];
    }
}

double log_sum_exp(const std::vector<double>& xs) {
    const double mx = *std::max_element(xs.begin(), xs.end());
    if (!std::isfinite(mx)) return mx;
    double s = 0.0;
    for (double x : xs) s += std::exp(x - mx);
    return mx + std::log(s);
}

std::vector<int> shuffled_indices(size_t n, uint64_t seed) {
    std::vector<int> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(seed);
    for (size_t i = n; i > 1; --i)
        std::swap(idx[i - 1], idx[size_t(rng.uniform_index(uint64_t(i)))]);
    return idx;
}

} // namespace

ModeClassifier ModeClassifier::fit(const std::vector<std::vector<double>>& latents,
                                   const std::vector<int>& labels, int K, double shrinkage) {
    if (latents.empty() || latents.size() != labels.size())
        throw std::invalid_argument("ModeClassifier::fit: empty or mismatched inputs");
    ModeClassifier mc;
    mc.K_ = K;
    mc.d_ = int(latents[0].size());
    const int d = mc.d_;
    for (int m = 1; m <= K; ++m) {
        std::vector<const std::vector<double>*> members;
        for (size_t i = 0; i < labels.size(); ++i)
            if (labels[i] == m) members.push_back(&latents[i]);
        Fit f;
        f.log_prior = members.empty()
                          ? -1e30
                          : std::log(double(members.size()) / double(labels.size()));
        f.mean.assign(size_t(d), 0.0);
        if (members.size() < 2) {
            // degenerate class; unit covariance fallback keeps the classifier total
            f.chol = cholesky(std::vector<double>(size_t(d) * size_t(d), 0.0), 0); // empty
            f.chol.assign(size_t(d) * size_t(d), 0.0);
            for (int i = 0; i < d; ++i) f.chol[size_t(i) * size_t(d) + size_t(i)] = 1.0;
            f.log_norm = -0.5 * d * std::log(2.0 * M_PI);
            mc.fits_.push_back(std::move(f));
            continue;
        }
        for (const auto* z : members)
            for (int c = 0; c < d; ++c) f.mean[size_t(c)] += (*z)[size_t(c)];
        for (double& v : f.mean) v /= double(members.size());
        std::vector<double> cov(size_t(d) * size_t(d), 0.0);
        for (const auto* z : members)
            for (int i = 0; i < d; ++i)
                for (int j = 0; j < d; ++j)
                    cov[size_t(i) * size_t(d) + size_t(j)] +=
                        ((*z)[size_t(i)] - f.mean[size_t(i)]) *
                        ((*z)[size_t(j)] - f.mean[size_t(j)]);
        for (double& v : cov) v /= double(members.size() - 1);
        for (int i = 0; i < d; ++i) cov[size_t(i) * size_t(d) + size_t(i)] += shrinkage;
        f.chol = cholesky(cov, d);
        double log_det_half = 0.0;
        for (int i = 0; i < d; ++i)
            log_det_half += std::log(f.chol[size_t(i) * size_t(d) + size_t(i)]);
        f.log_norm = -0.5 * d * std::log(2.0 * M_PI) - log_det_half;
        mc.fits_.push_back(std::move(f));
    }
    return mc;
}

double ModeClassifier::log_lik(const Fit& f, const std::vector<double>& z) const {
    std::vector<double> r(static_cast<size_t>(d_));
    for (int i = 0; i < d_; ++i) r[size_t(i)] = z[size_t(i)] - f.mean[size_t(i)];
    forward_solve(f.chol, d_, r);
    double q = 0.0;
    for (double v : r) q += v * v;
    return f.log_norm - 0.5 * q;
}

int ModeClassifier::classify(const std::vector<double>& z) const {
    int best = 1;
    double best_score = -1e300;
    for (int m = 1; m <= K_; ++m) {
        const Fit& f = fits_[size_t(m - 1)];
        const double s = log_lik(f, z) + f.log_prior;
        if (s > best_score) {
            best_score = s;
            best = m;
        }
    }
    return best;
}

std::vector<double> ModeClassifier::log_posterior(const std::vector<double>& z) const {
    std::vector<double> scores(static_cast<size_t>(K_));
    for (int m = 1; m <= K_; ++m) {
        const Fit& f = fits_[size_t(m - 1)];
        scores[size_t(m - 1)] = log_lik(f, z) + f.log_prior;
    }
    const double lse = log_sum_exp(scores);
    for (double& s : scores) s -= lse;
    return scores;
}

BayesClassifierResult bayes_mode_classifier(const std::vector<std::vector<double>>& latents,
                                            const std::vector<int>& labels, int K, uint64_t seed,
                                            int folds) {
    if (latents.size() != labels.size() || latents.empty())
        throw std::invalid_argument("bayes_mode_classifier: mismatched inputs");
    const int d = int(latents[0].size());
    std::vector<int> per_mode(size_t(K), 0);
    for (int m : labels) {
        if (m < 1 || m > K) throw std::invalid_argument("bayes_mode_classifier: bad label");
        ++per_mode[size_t(m - 1)];
    }
    int present = 0;
    for (int c : per_mode)
        if (c > 0) ++present;
    if (present < 2)
        throw std::invalid_argument("bayes_mode_classifier: need at least 2 modes present");
    for (int c : per_mode)
        if (c > 0 && c < d + 2)
            throw std::invalid_argument("bayes_mode_classifier: need >= d+2 samples per mode");

    const std::vector<int> idx = shuffled_indices(latents.size(), seed);
    int errors = 0, total = 0;
    for (int f = 0; f < folds; ++f) {
        std::vector<std::vector<double>> train_z;
        std::vector<int> train_y, test_i;
        for (size_t pos = 0; pos < idx.size(); ++pos) {
            if (int(pos) % folds == f)
                test_i.push_back(idx[pos]);
            else {
                train_z.push_back(latents[size_t(idx[pos])]);
                train_y.push_back(labels[size_t(idx[pos])]);
            }
        }
        const ModeClassifier mc = ModeClassifier::fit(train_z, train_y, K);
        for (int i : test_i) {
            if (mc.classify(latents[size_t(i)]) != labels[size_t(i)]) ++errors;
            ++total;
        }
    }
    BayesClassifierResult res{ModeClassifier::fit(latents, labels, K),
                              double(errors) / double(total)};
    return res;
}

double estimate_i_mode(const std::vector<std::vector<double>>& latents,
                       const std::vector<int>& labels, int K, uint64_t seed, int folds) {
    const std::vector<int> idx = shuffled_indices(latents.size(), seed);
    double entropy_sum = 0.0;
    int total = 0;
    for (int f = 0; f < folds; ++f) {
        std::vector<std::vector<double>> train_z;
        std::vector<int> train_y, test_i;
        for (size_t pos = 0; pos < idx.size(); ++pos) {
            if (int(pos) % folds == f)
                test_i.push_back(idx[pos]);
            else {
                train_z.push_back(latents[size_t(idx[pos])]);
                train_y.push_back(labels[size_t(idx[pos])]);
            }
        }
        const ModeClassifier mc = ModeClassifier::fit(train_z, train_y, K);
        for (int i : test_i) {
            const auto lp = mc.log_posterior(latents[size_t(i)]);
            // held-out cross-entropy of the true label: a consistent upper
            // bound on H(M|Z), so the difference below cannot be inflated by
            // overconfident fits
            entropy_sum += -lp[size_t(labels[size_t(i)] - 1)];
            ++total;
        }
    }
    std::vector<int> hist(size_t(K), 0);
    for (int m : labels) ++hist[size_t(m - 1)];
    double h_mode = 0.0;
    for (int c : hist) {
        if (c == 0) continue;
        const double p = double(c) / double(labels.size());
        h_mode -= p * std::log(p);
    }
    return std::max(0.0, h_mode - entropy_sum / double(total));
}

namespace {

double diag_log_pdf(const DiagGaussian& g, const std::vector<double>& z) {
    double lp = 0.0;
    for (size_t c = 0; c < z.size(); ++c) {
        const double v = std::exp(g.logvar[c]);
        const double dm = z[c] - g.mu[c];
        lp += -0.5 * (std::log(2.0 * M_PI) + g.logvar[c] + dm * dm / v);
    }
    return lp;
}

double mixture_log_pdf(const std::vector<DiagGaussian>& posteriors, const std::vector<double>& z) {
    std::vector<double> lps(posteriors.size());
    for (size_t j = 0; j < posteriors.size(); ++j) lps[j] = diag_log_pdf(posteriors[j], z);
    return log_sum_exp(lps) - std::log(double(posteriors.size()));
}

std::vector<double> draw_from(const DiagGaussian& g, Rng& rng) {
    std::vector<double> z(g.mu.size());
    for (size_t c = 0; c < z.size(); ++c)
        z[c] = g.mu[c] + std::exp(0.5 * g.logvar[c]) * rng.normal();
    return z;
}

} // namespace

double estimate_i_action(const std::vector<DiagGaussian>& posteriors, int n_mc, Rng& rng) {
    if (posteriors.empty()) throw std::invalid_argument("estimate_i_action: empty posterior set");
    double acc = 0.0;
    for (const auto& q : posteriors) {
        for (int s = 0; s < n_mc; ++s) {
            const auto z = draw_from(q, rng);
            acc += diag_log_pdf(q, z) - mixture_log_pdf(posteriors, z);
        }
    }
    return acc / (double(posteriors.size()) * double(n_mc));
}

double pointwise_kl_average(const std::vector<DiagGaussian>& posteriors) {
    double acc = 0.0;
    for (const auto& q : posteriors) {
        const std::vector<double> zero(q.mu.size(), 0.0);
        acc += gaussian_kl(q.mu, q.logvar, zero, zero);
    }
    return acc / double(posteriors.size());
}

double mixture_prior_kl_mc(const std::vector<DiagGaussian>& posteriors, int n_samples, Rng& rng) {
    double acc = 0.0;
    for (int s = 0; s < n_samples; ++s) {
        const auto& comp = posteriors[size_t(rng.uniform_index(uint64_t(posteriors.size())))];
        const auto z = draw_from(comp, rng);
        double prior_lp = 0.0;
        for (double v : z) prior_lp += -0.5 * (std::log(2.0 * M_PI) + v * v);
        acc += mixture_log_pdf(posteriors, z) - prior_lp;
    }
    return acc / double(n_samples);
}

std::vector<DiagGaussian> encode_dataset_posteriors(const PolicyState& policy, const Dataset& ds) {
    if (!policy.has_encoder())
        throw std::invalid_argument("encode_dataset_posteriors: family has no encoder");
    std::vector<int> idx(ds.demos.size());
    std::iota(idx.begin(), idx.end(), 0);
    const Batch full = make_batch(ds, idx);
    Tensor in({full.obs.dim(0), full.chunk.dim(1) + 2});
    for (int64_t r = 0; r < in.dim(0); ++r) {
        float* row = in.data() + r * in.dim(1);
        for (int64_t c = 0; c < full.chunk.dim(1); ++c) row[c] = full.chunk.at2(r, c);
        row[full.chunk.dim(1)] = full.obs.at2(r, 0);
        row[full.chunk.dim(1) + 1] = full.obs.at2(r, 1);
    }
    const Tensor out = policy.encoder.forward_plain(policy.params, in);
    std::vector<DiagGaussian> res(ds.demos.size());
    const int dz = policy.d_z;
    const bool stochastic = policy.family == Family::KlCvae;
    for (size_t i = 0; i < res.size(); ++i) {
        res[i].mu.resize(size_t(dz));
        res[i].logvar.assign(size_t(dz), stochastic ? 0.0 : -40.0); // point mass surrogate
        for (int c = 0; c < dz; ++c) {
            res[i].mu[size_t(c)] = out.at2(int64_t(i), c);
            if (stochastic) res[i].logvar[size_t(c)] = out.at2(int64_t(i), dz + c);
        }
    }
    return res;
}

namespace {

InfoChain chain_from_posteriors(const std::vector<DiagGaussian>& posteriors,
                                const std::vector<int>& labels, int K, int n_mc, uint64_t seed) {
    InfoChain chain;
    chain.n_samples = int(posteriors.size());

    std::vector<int> hist(size_t(K), 0);
    for (int m : labels) ++hist[size_t(m - 1)];
    for (int c : hist) {
        if (c == 0) continue;
        const double p = double(c) / double(labels.size());
        chain.h_mode -= p * std::log(p);
    }

    Rng draw_rng(derive_stream_seed(seed, "diag:latents"));
    std::vector<std::vector<double>> latents(posteriors.size());
    for (size_t i = 0; i < posteriors.size(); ++i) latents[i] = draw_from(posteriors[i], draw_rng);

    const auto bayes =
        bayes_mode_classifier(latents, labels, K, derive_stream_seed(seed, "diag:folds"));
    chain.rho_z = bayes.rho_z;
    const double rho_clamped =
        std::clamp(bayes.rho_z, 0.0, K > 1 ? 1.0 - 1.0 / double(K) : 0.0);
    chain.b_fano = fano_bound(chain.h_mode, rho_clamped, K);

    chain.i_mode = estimate_i_mode(latents, labels, K, derive_stream_seed(seed, "diag:folds"));

    Rng mc_rng(derive_stream_seed(seed, "diag:mc"));
    chain.i_action = estimate_i_action(posteriors, n_mc, mc_rng);
    chain.k_pt = pointwise_kl_average(posteriors);
    return chain;
}

} // namespace

InfoChain info_chain(const PolicyState& policy, const Dataset& ds, int n_mc, uint64_t seed) {
    if (policy.family != Family::KlCvae)
        throw std::invalid_argument("info_chain: requires a stochastic Gaussian posterior "
                                    "(KL-CVAE)");
    const auto posteriors = encode_dataset_posteriors(policy, ds);
    std::vector<int> labels(ds.demos.size());
    for (size_t i = 0; i < labels.size(); ++i) labels[i] = ds.demos[i].mode;

    // detect start jitter: multiple distinct observations -> bin by start
    bool jittered = false;
    for (size_t i = 1; i < ds.demos.size() && !jittered; ++i)
        if (ds.demos[i].obs[0] != ds.demos[0].obs[0] || ds.demos[i].obs[1] != ds.demos[0].obs[1])
            jittered = true;
    if (!jittered) return chain_from_posteriors(posteriors, labels, ds.K, n_mc, seed);

    // k-means over starts, 16 centroids, fixed small iteration budget
    const int n_bins = 16;
    Rng km_rng(derive_stream_seed(seed, "diag:kmeans"));
    std::vector<Point> centroids;
    for (int c = 0; c < n_bins; ++c) {
        const auto& d = ds.demos[size_t(km_rng.uniform_index(uint64_t(ds.demos.size())))];
        centroids.push_back({d.obs[0], d.obs[1]});
    }
    std::vector<int> assign(ds.demos.size(), 0);
    for (int it = 0; it < 10; ++it) {
        for (size_t i = 0; i < ds.demos.size(); ++i) {
            double best = 1e300;
            for (int c = 0; c < n_bins; ++c) {
                const double dx = ds.demos[i].obs[0] - centroids[size_t(c)].x;
                const double dy = ds.demos[i].obs[1] - centroids[size_t(c)].y;
                if (dx * dx + dy * dy < best) {
                    best = dx * dx + dy * dy;
                    assign[i] = c;
                }
            }
        }
        std::vector<Point> sums(static_cast<size_t>(n_bins));
        std::vector<int> counts(static_cast<size_t>(n_bins), 0);
        for (size_t i = 0; i < ds.demos.size(); ++i) {
            sums[size_t(assign[i])].x += ds.demos[i].obs[0];
            sums[size_t(assign[i])].y += ds.demos[i].obs[1];
            ++counts[size_t(assign[i])];
        }
        for (int c = 0; c < n_bins; ++c)
            if (counts[size_t(c)] > 0)
                centroids[size_t(c)] = {sums[size_t(c)].x / counts[size_t(c)],
                                        sums[size_t(c)].y / counts[size_t(c)]};
    }
    InfoChain total;
    double weight = 0.0;
    for (int c = 0; c < n_bins; ++c) {
        std::vector<DiagGaussian> bin_post;
        std::vector<int> bin_labels;
        for (size_t i = 0; i < ds.demos.size(); ++i)
            if (assign[i] == c) {
                bin_post.push_back(posteriors[i]);
                bin_labels.push_back(labels[i]);
            }
        if (bin_post.size() < size_t(2 * (policy.d_z + 2))) continue; // too small to estimate
        InfoChain bin;
        try {
            bin = chain_from_posteriors(bin_post, bin_labels, ds.K, n_mc,
                                        derive_stream_seed(seed, "diag:bin" + std::to_string(c)));
        } catch (const std::invalid_argument&) {
            continue;
        }
        const double w = double(bin_post.size());
        total.h_mode += w * bin.h_mode;
        total.b_fano += w * bin.b_fano;
        total.i_mode += w * bin.i_mode;
        total.i_action += w * bin.i_action;
        total.k_pt += w * bin.k_pt;
        total.rho_z += w * bin.rho_z;
        total.n_samples += int(w);
        weight += w;
    }
    if (weight == 0.0) throw std::runtime_error("info_chain: no start bin was estimable");
    total.h_mode /= weight;
    total.b_fano /= weight;
    total.i_mode /= weight;
    total.i_action /= weight;
    total.k_pt /= weight;
    total.rho_z /= weight;
    return total;
}

ValidMassReport valid_mass_gap(const PolicyState& policy, const Dataset& ds, const TaskSpec& task,
                               int n_samples, uint64_t seed) {
    if (!policy.has_encoder())
        throw std::invalid_argument("valid_mass_gap: family has no posterior encoder");
    const double mean_len = ds.mean_expert_length();
    const auto posteriors = encode_dataset_posteriors(policy, ds);

    Rng rng(derive_stream_seed(seed, "validmass"));
    // posterior side: decode z ~ q(.|a_i, s_i) round-robin over demos
    int post_ok = 0;
    {
        Tensor z({int64_t(n_samples), int64_t(policy.d_z)});
        Tensor obs({int64_t(n_samples), 2});
        for (int s = 0; s < n_samples; ++s) {
            const size_t i = size_t(s) % ds.demos.size();
            const auto draw = draw_from(posteriors[i], rng);
            for (int c = 0; c < policy.d_z; ++c) z.at2(s, c) = float(draw[size_t(c)]);
            obs.at2(s, 0) = ds.norm.nx(ds.demos[i].obs[0]);
            obs.at2(s, 1) = ds.norm.ny(ds.demos[i].obs[1]);
        }
        Tensor in({int64_t(n_samples), int64_t(policy.d_z) + 2});
        for (int64_t r = 0; r < in.dim(0); ++r) {
            float* row = in.data() + r * in.dim(1);
            for (int c = 0; c < policy.d_z; ++c) row[c] = z.at2(r, c);
            row[policy.d_z] = obs.at2(r, 0);
            row[policy.d_z + 1] = obs.at2(r, 1);
        }
        const Tensor out = policy.decoder.forward_plain(policy.params, in);
        for (int64_t r = 0; r < out.dim(0); ++r) {
            const Trajectory traj = denormalize_chunk(policy, out.data() + r * out.dim(1));
            if (evaluate_success(traj, task, mean_len).success) ++post_ok;
        }
    }

    // prior side: deployment sampling path
    int prior_ok = 0;
    {
        Rng prior_rng(derive_stream_seed(seed, "validmass:prior"));
        const auto trajs = sample_policy(policy, task.start, prior_rng, n_samples);
        for (const auto& t : trajs)
            if (evaluate_success(t, task, mean_len).success) ++prior_ok;
    }

    ValidMassReport rep;
    rep.posterior_valid = double(post_ok) / double(n_samples);
    rep.prior_valid = double(prior_ok) / double(n_samples);
    rep.delta_valid = rep.posterior_valid - rep.prior_valid;
    return rep;
}

} // namespace mmbc
