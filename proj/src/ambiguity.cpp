#include "mmbc/ambiguity.hpp"

#include "mmbc/rng.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace mmbc {

EpisodeDataset episodes_from_dataset(const Dataset& ds) {
    EpisodeDataset ep;
    ep.d_s = 2;
    for (size_t i = 0; i < ds.demos.size(); ++i) {
        const Demo& d = ds.demos[i];
        for (int t = 0; t < d.chunk.H; ++t) {
            ep.episode.push_back(int(i));
            ep.states.push_back(d.obs[0]);
            ep.states.push_back(d.obs[1]);
            ep.actions.push_back(d.chunk.xy[size_t(2 * t)]);
            ep.actions.push_back(d.chunk.xy[size_t(2 * t) + 1]);
        }
    }
    return ep;
}

EpisodeDataset read_episode_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open episode csv: " + path);
    std::string header;
    if (!std::getline(is, header)) throw std::runtime_error("empty episode csv: " + path);
    int cols = 1;
    for (char c : header)
        if (c == ',') ++cols;
    const int d_s = cols - 4; // episode, t, s..., a_x, a_y
    if (d_s < 1) throw std::runtime_error("episode csv needs columns episode,t,s_*,a_x,a_y");
    EpisodeDataset ep;
    ep.d_s = d_s;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string cell;
        std::vector<double> vals;
        while (std::getline(ls, cell, ',')) vals.push_back(std::stod(cell));
        if (int(vals.size()) != cols)
            throw std::runtime_error("episode csv row has wrong column count");
        ep.episode.push_back(int(vals[0]));
        for (int c = 0; c < d_s; ++c) ep.states.push_back(float(vals[size_t(2 + c)]));
        ep.actions.push_back(float(vals[size_t(2 + d_s)]));
        ep.actions.push_back(float(vals[size_t(3 + d_s)]));
    }
    return ep;
}

namespace {

struct Prepared {
    std::vector<int64_t> valid;      // rows with a full in-episode future chunk
    std::vector<float> std_states;   // standardized copy
    double global_spread = 0.0;      // G
    std::vector<double> chunk_mean;  // global mean chunk (horizon*2)
};

Prepared prepare(const EpisodeDataset& ds, int horizon) {
    Prepared p;
    const int64_t n = ds.rows();
    for (int64_t i = 0; i < n; ++i) {
        if (i + horizon > n) break;
        bool ok = true;
        for (int t = 1; t < horizon; ++t)
            if (ds.episode[size_t(i + t)] != ds.episode[size_t(i)]) {
                ok = false;
                break;
            }
        if (ok) p.valid.push_back(i);
    }
    if (p.valid.empty()) throw std::runtime_error("ambiguity: no valid query rows at horizon");

    // componentwise standardization over all rows
    p.std_states.assign(ds.states.size(), 0.0f);
    for (int c = 0; c < ds.d_s; ++c) {
        double mean = 0.0;
        for (int64_t i = 0; i < n; ++i) mean += ds.state(i)[c];
        mean /= double(n);
        double var = 0.0;
        for (int64_t i = 0; i < n; ++i) {
            const double d = ds.state(i)[c] - mean;
            var += d * d;
        }
        var /= double(n);
        const double scale = var > 1e-24 ? 1.0 / std::sqrt(var) : 1.0;
        for (int64_t i = 0; i < n; ++i)
            p.std_states[size_t(i * ds.d_s + c)] = float((ds.state(i)[c] - mean) * scale);
    }

    const int D = 2 * horizon;
    p.chunk_mean.assign(size_t(D), 0.0);
    for (int64_t i : p.valid)
        for (int t = 0; t < horizon; ++t) {
            p.chunk_mean[size_t(2 * t)] += ds.action(i + t)[0];
            p.chunk_mean[size_t(2 * t) + 1] += ds.action(i + t)[1];
        }
    for (double& v : p.chunk_mean) v /= double(p.valid.size());
    double g = 0.0;
    for (int64_t i : p.valid) {
        double s = 0.0;
        for (int t = 0; t < horizon; ++t) {
            const double dx = ds.action(i + t)[0] - p.chunk_mean[size_t(2 * t)];
            const double dy = ds.action(i + t)[1] - p.chunk_mean[size_t(2 * t) + 1];
            s += dx * dx + dy * dy;
        }
        g += s;
    }
    p.global_spread = g / double(p.valid.size());
    if (p.global_spread <= 0.0)
        throw std::runtime_error("ambiguity: zero global action spread");
    return p;
}

double state_dist2(const Prepared& p, int d_s, int64_t a, int64_t b) {
    double s = 0.0;
    const float* pa = p.std_states.data() + a * d_s;
    const float* pb = p.std_states.data() + b * d_s;
    for (int c = 0; c < d_s; ++c) {
        const double d = double(pa[c]) - double(pb[c]);
        s += d * d;
    }
    return s;
}

// local spread of the neighbor chunks around their own mean, 1/k normalized
double local_spread(const EpisodeDataset& ds, const std::vector<int64_t>& nbrs, int horizon) {
    const int D = 2 * horizon;
    std::vector<double> mean(size_t(D), 0.0);
    for (int64_t j : nbrs)
        for (int t = 0; t < horizon; ++t) {
            mean[size_t(2 * t)] += ds.action(j + t)[0];
            mean[size_t(2 * t) + 1] += ds.action(j + t)[1];
        }
    for (double& v : mean) v /= double(nbrs.size());
    double acc = 0.0;
    for (int64_t j : nbrs)
        for (int t = 0; t < horizon; ++t) {
            const double dx = ds.action(j + t)[0] - mean[size_t(2 * t)];
            const double dy = ds.action(j + t)[1] - mean[size_t(2 * t) + 1];
            acc += dx * dx + dy * dy;
        }
    return acc / double(nbrs.size());
}

double median_of(std::vector<double> v) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double percentile_of(std::vector<double> v, double q) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const double pos = q * double(v.size() - 1);
    const size_t lo = size_t(pos);
    const size_t hi = std::min(v.size() - 1, lo + 1);
    const double frac = pos - double(lo);
    return v[lo] * (1.0 - frac) + v[hi] * frac;
}

} // namespace

AmbiguityReport ambiguity_knn(const EpisodeDataset& ds, const AmbiguityConfig& cfg) {
    if (cfg.k < 1 || cfg.horizon < 1)
        throw std::invalid_argument("ambiguity_knn: k and horizon must be >= 1");
    const Prepared prep = prepare(ds, cfg.horizon);
    Rng rng = named_stream(cfg.seed, "ambiguity");

    std::vector<double> ratios, baseline;
    ratios.reserve(size_t(cfg.n_queries));
    for (int qi = 0; qi < cfg.n_queries; ++qi) {
        const int64_t q = prep.valid[size_t(rng.uniform_index(uint64_t(prep.valid.size())))];
        // exact scan over cross-episode candidates; exact distance ties (e.g.
        // constant states) break by a seeded per-query hash so degenerate
        // state spaces still sample unbiased neighbor sets
        std::vector<std::pair<std::pair<double, uint64_t>, int64_t>> dists;
        dists.reserve(prep.valid.size());
        for (int64_t j : prep.valid) {
            if (ds.episode[size_t(j)] == ds.episode[size_t(q)]) continue;
            uint64_t tie = cfg.seed ^ (uint64_t(q) * 0x9e3779b97f4a7c15ULL) ^ uint64_t(j);
            tie = splitmix64(tie);
            dists.push_back({{state_dist2(prep, ds.d_s, q, j), tie}, j});
        }
        if (int(dists.size()) < cfg.k)
            throw std::runtime_error("ambiguity_knn: fewer than k cross-episode candidates");
        std::partial_sort(dists.begin(), dists.begin() + cfg.k, dists.end());
        std::vector<int64_t> nbrs;
        for (int j = 0; j < cfg.k; ++j) nbrs.push_back(dists[size_t(j)].second);
        ratios.push_back(local_spread(ds, nbrs, cfg.horizon) / prep.global_spread);

        std::vector<int64_t> rnd;
        while (int(rnd.size()) < cfg.k) {
            const int64_t j = prep.valid[size_t(rng.uniform_index(uint64_t(prep.valid.size())))];
            if (ds.episode[size_t(j)] != ds.episode[size_t(q)]) rnd.push_back(j);
        }
        baseline.push_back(local_spread(ds, rnd, cfg.horizon) / prep.global_spread);
    }

    AmbiguityReport rep;
    rep.median_ratio = median_of(ratios);
    rep.p90_ratio = percentile_of(ratios, 0.9);
    rep.random_baseline_median = median_of(baseline);
    rep.n_queries_used = int(ratios.size());
    return rep;
}

std::vector<AmbiguityReport> ambiguity_radius(const EpisodeDataset& ds,
                                              const AmbiguityConfig& cfg) {
    if (cfg.radii.empty())
        throw std::invalid_argument("ambiguity_radius: no radii configured");
    const Prepared prep = prepare(ds, cfg.horizon);
    Rng rng = named_stream(cfg.seed, "ambiguity");

    // shared query set across radii so that coverage is comparable
    std::vector<int64_t> queries;
    for (int qi = 0; qi < cfg.n_queries; ++qi)
        queries.push_back(prep.valid[size_t(rng.uniform_index(uint64_t(prep.valid.size())))]);

    std::vector<AmbiguityReport> reports;
    for (double radius : cfg.radii) {
        const double r2 = radius * radius * double(ds.d_s); // undo the sqrt(d_s) normalization
        std::vector<double> ratios;
        int covered = 0;
        for (int64_t q : queries) {
            std::vector<int64_t> nbrs;
            for (int64_t j : prep.valid) {
                if (ds.episode[size_t(j)] == ds.episode[size_t(q)]) continue;
                if (state_dist2(prep, ds.d_s, q, j) <= r2) nbrs.push_back(j);
            }
            if (int(nbrs.size()) < cfg.n_min) continue;
            ++covered;
            ratios.push_back(local_spread(ds, nbrs, cfg.horizon) / prep.global_spread);
        }
        AmbiguityReport rep;
        rep.radius = radius;
        rep.coverage = double(covered) / double(queries.size());
        rep.median_ratio = median_of(ratios);
        rep.p90_ratio = percentile_of(ratios, 0.9);
        rep.n_queries_used = covered;
        reports.push_back(rep);
    }
    return reports;
}

} // namespace mmbc
