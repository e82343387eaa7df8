#include "mmbc/transportdiag.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace mmbc {

double delta_ij(const TaskSpec& task, int i, int j) {
    if (i < 1 || j < 1 || i > task.K || j > task.K)
        throw std::invalid_argument("delta_ij: mode index out of range");
    if (i == j) return 0.0;
    const double d = traj_distance(task.templates[size_t(i - 1)], task.templates[size_t(j - 1)]);
    return std::max(0.0, d - 2.0 * kEpsTol);
}

NoiseDecoder policy_noise_decoder(const PolicyState& policy, Point obs) {
    return [&policy, obs](const Tensor& noise) { return decode_noise(policy, obs, noise); };
}

namespace {

// Valid decode whose RMS distance to its success-mode template is within
// eps_tol; returns 0 when the point is part of the bridge for pair purposes.
int tolerant_mode_label(const Trajectory& chunk, const TaskSpec& task, double mean_expert_len,
                        bool* valid_out) {
    const SuccessResult r = evaluate_success(chunk, task, mean_expert_len);
    if (valid_out) *valid_out = r.success;
    if (!r.success) return 0;
    const int m = r.mode.value();
    if (traj_distance(chunk, task.templates[size_t(m - 1)]) <= kEpsTol) return m;
    return 0;
}

} // namespace

BridgeCollection collect_bridge_paths(const NoiseDecoder& decoder, const TaskSpec& task,
                                      double mean_expert_len, int noise_dim, int n_noise,
                                      int n_pairs, int n_interp, uint64_t seed) {
    BridgeCollection col;
    col.n_noise = n_noise;
    col.n_pairs_requested = n_pairs;

    Rng rng = named_stream(seed, "bridge");
    Tensor noise({int64_t(n_noise), int64_t(noise_dim)});
    for (int64_t i = 0; i < noise.size(); ++i) noise.at(i) = float(rng.normal());

    // decode in batches to bound memory
    std::vector<int> labels(size_t(n_noise), 0);
    const int64_t batch = 512;
    for (int64_t off = 0; off < n_noise; off += batch) {
        const int64_t hi = std::min<int64_t>(n_noise, off + batch);
        Tensor part({hi - off, int64_t(noise_dim)});
        for (int64_t r = 0; r < hi - off; ++r)
            for (int64_t c = 0; c < noise_dim; ++c) part.at2(r, c) = noise.at2(off + r, c);
        const auto chunks = decoder(part);
        for (int64_t r = 0; r < hi - off; ++r)
            labels[size_t(off + r)] = tolerant_mode_label(chunks[size_t(r)], task,
                                                          mean_expert_len, nullptr);
    }
    std::vector<int> candidates;
    for (int i = 0; i < n_noise; ++i)
        if (labels[size_t(i)] > 0) ++col.n_valid_base, candidates.push_back(i);

    // deterministic cross-mode pair selection from the sorted candidate list
    std::set<std::pair<int, int>> seen;
    std::vector<std::pair<int, int>> pairs;
    const int max_attempts = 200 * std::max(1, n_pairs);
    for (int attempt = 0; attempt < max_attempts && int(pairs.size()) < n_pairs; ++attempt) {
        if (candidates.size() < 2) break;
        int a = candidates[size_t(rng.uniform_index(uint64_t(candidates.size())))];
        int b = candidates[size_t(rng.uniform_index(uint64_t(candidates.size())))];
        if (a == b || labels[size_t(a)] == labels[size_t(b)]) continue;
        if (a > b) std::swap(a, b);
        if (!seen.insert({a, b}).second) continue;
        pairs.push_back({a, b});
    }

    for (const auto& [ia, ib] : pairs) {
        BridgePath path;
        path.mode_i = labels[size_t(ia)];
        path.mode_j = labels[size_t(ib)];
        path.delta = delta_ij(task, path.mode_i, path.mode_j);
        path.u1.resize(size_t(noise_dim));
        path.u2.resize(size_t(noise_dim));
        for (int c = 0; c < noise_dim; ++c) {
            path.u1[size_t(c)] = noise.at2(ia, c);
            path.u2[size_t(c)] = noise.at2(ib, c);
        }
        Tensor grid({int64_t(n_interp), int64_t(noise_dim)});
        for (int g = 0; g < n_interp; ++g) {
            const double lam = double(g) / double(n_interp - 1);
            for (int c = 0; c < noise_dim; ++c)
                grid.at2(g, c) = float((1.0 - lam) * path.u1[size_t(c)] +
                                       lam * path.u2[size_t(c)]);
        }
        const auto chunks = decoder(grid);
        std::vector<int> glabels(size_t(n_interp), 0);
        path.valid.resize(size_t(n_interp));
        int interior_invalid = 0;
        for (int g = 0; g < n_interp; ++g) {
            bool valid = false;
            glabels[size_t(g)] = tolerant_mode_label(chunks[size_t(g)], task, mean_expert_len,
                                                     &valid);
            path.valid[size_t(g)] = valid ? 1 : 0;
            if (g > 0 && g + 1 < n_interp && !valid) ++interior_invalid;
        }
        path.bridge_fraction = double(interior_invalid) / double(n_interp - 2);

        int lm = -1;
        for (int g = 0; g < n_interp; ++g)
            if (glabels[size_t(g)] == path.mode_i) lm = g;
        int lp = -1;
        if (lm >= 0)
            for (int g = lm + 1; g < n_interp; ++g)
                if (glabels[size_t(g)] == path.mode_j) {
                    lp = g;
                    break;
                }
        if (lm >= 0 && lp >= 0) {
            path.transition_found = true;
            path.lambda_minus = double(lm) / double(n_interp - 1);
            path.lambda_plus = double(lp) / double(n_interp - 1);
            double w2 = 0.0;
            for (int c = 0; c < noise_dim; ++c) {
                const double diff = double(grid.at2(lp, c)) - double(grid.at2(lm, c));
                w2 += diff * diff;
            }
            path.w = std::sqrt(w2);
            path.s_seg = traj_distance(chunks[size_t(lp)], chunks[size_t(lm)]) / path.w;
        }
        col.paths.push_back(std::move(path));
    }
    return col;
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

double normal_quantile(double p) {
    if (p <= 0.0 || p >= 1.0)
        throw std::invalid_argument("normal_quantile: p must be in (0, 1)");
    // Acklam's rational approximation, then two Newton polish steps.
    static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                               -2.759285104469687e+02, 1.383577518672690e+02,
                               -3.066479806614716e+01, 2.506628277459239e+00};
    static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                               -1.556989798598866e+02, 6.680131188771972e+01,
                               -1.328068155288572e+01};
    static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                               -2.400758277161838e+00, -2.549732539343734e+00,
                               4.374664141464968e+00,  2.938163982698783e+00};
    static const double dd[] = {7.784695709041462e-03, 3.224671290700398e-01,
                                2.445134137142996e+00, 3.754408661907416e+00};
    const double plow = 0.02425, phigh = 1.0 - plow;
    double x;
    if (p < plow) {
        const double q = std::sqrt(-2.0 * std::log(p));
        x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((dd[0] * q + dd[1]) * q + dd[2]) * q + dd[3]) * q + 1.0);
    } else if (p <= phigh) {
        const double q = p - 0.5, r = q * q;
        x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
            (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
    } else {
        const double q = std::sqrt(-2.0 * std::log(1.0 - p));
        x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((dd[0] * q + dd[1]) * q + dd[2]) * q + dd[3]) * q + 1.0);
    }
    for (int it = 0; it < 2; ++it) {
        const double err = normal_cdf(x) - p;
        const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
        if (pdf <= 0.0) break;
        x -= err / pdf;
    }
    return x;
}

int prop2_bound(double tau, double lipschitz, double delta) {
    if (!(tau > 0.0 && tau < 1.0))
        throw std::invalid_argument("prop2_bound: tau must be in (0, 1)");
    if (lipschitz <= 0.0 || delta <= 0.0)
        throw std::invalid_argument("prop2_bound: L and Delta must be positive");
    const double r = normal_quantile(1.0 - tau / 2.0);
    return 1 + int(std::floor(2.0 * r * lipschitz / delta));
}

double PiecewiseLinear::operator()(double u) const {
    if (xs.empty() || xs.size() != ys.size())
        throw std::invalid_argument("PiecewiseLinear: malformed breakpoints");
    if (u <= xs.front()) return ys.front();
    if (u >= xs.back()) return ys.back();
    const auto it = std::upper_bound(xs.begin(), xs.end(), u);
    const size_t hi = size_t(it - xs.begin());
    const size_t lo = hi - 1;
    const double t = (u - xs[lo]) / (xs[hi] - xs[lo]);
    return ys[lo] + t * (ys[hi] - ys[lo]);
}

double PiecewiseLinear::lipschitz() const {
    double L = 0.0;
    for (size_t i = 0; i + 1 < xs.size(); ++i)
        L = std::max(L, std::fabs(ys[i + 1] - ys[i]) / (xs[i + 1] - xs[i]));
    return L;
}

double pushforward_mass_exact(const PiecewiseLinear& gen, double lo, double hi) {
    double mass = 0.0;
    // constant tails
    if (gen.ys.front() >= lo && gen.ys.front() <= hi) mass += normal_cdf(gen.xs.front());
    if (gen.ys.back() >= lo && gen.ys.back() <= hi) mass += 1.0 - normal_cdf(gen.xs.back());
    for (size_t i = 0; i + 1 < gen.xs.size(); ++i) {
        const double x0 = gen.xs[i], x1 = gen.xs[i + 1];
        const double y0 = gen.ys[i], y1 = gen.ys[i + 1];
        if (y0 == y1) {
            if (y0 >= lo && y0 <= hi) mass += normal_cdf(x1) - normal_cdf(x0);
            continue;
        }
        // u-interval where the segment value lies in [lo, hi]
        double ua = x0 + (lo - y0) / (y1 - y0) * (x1 - x0);
        double ub = x0 + (hi - y0) / (y1 - y0) * (x1 - x0);
        if (ua > ub) std::swap(ua, ub);
        ua = std::max(ua, x0);
        ub = std::min(ub, x1);
        if (ub > ua) mass += normal_cdf(ub) - normal_cdf(ua);
    }
    return mass;
}

int count_tau_modes_exact(const PiecewiseLinear& gen, const std::vector<Interval>& modes,
                          double tau) {
    int count = 0;
    for (const auto& [lo, hi] : modes)
        if (pushforward_mass_exact(gen, lo, hi) > tau) ++count;
    return count;
}

int count_tau_modes_mc(const std::function<double(double)>& gen,
                       const std::vector<Interval>& modes, double tau, int n_mc, Rng& rng) {
    if (modes.empty()) return 0;
    std::vector<int64_t> hits(modes.size(), 0);
    for (int s = 0; s < n_mc; ++s) {
        const double y = gen(rng.normal());
        for (size_t m = 0; m < modes.size(); ++m)
            if (y >= modes[m].first && y <= modes[m].second) ++hits[m];
    }
    int count = 0;
    for (int64_t h : hits)
        if (double(h) / double(n_mc) > tau) ++count;
    return count;
}

double empirical_lipschitz_1d(const NoiseDecoder& decoder, const std::vector<float>& direction,
                              double range, int n_grid) {
    if (n_grid < 2) throw std::invalid_argument("empirical_lipschitz_1d: need >= 2 grid points");
    double dn = 0.0;
    for (float v : direction) dn += double(v) * double(v);
    dn = std::sqrt(dn);
    if (dn <= 0.0) throw std::invalid_argument("empirical_lipschitz_1d: zero direction");

    const int64_t D = int64_t(direction.size());
    Tensor grid({int64_t(n_grid), D});
    for (int g = 0; g < n_grid; ++g) {
        const double t = -range + 2.0 * range * double(g) / double(n_grid - 1);
        for (int64_t c = 0; c < D; ++c)
            grid.at2(g, c) = float(t * double(direction[size_t(c)]) / dn);
    }
    const auto chunks = decoder(grid);
    const double h = 2.0 * range / double(n_grid - 1);
    double L = 0.0;
    for (int g = 0; g + 1 < n_grid; ++g)
        L = std::max(L, traj_distance(chunks[size_t(g + 1)], chunks[size_t(g)]) / h);
    return L;
}

} // namespace mmbc
