#pragma once

#include "mmbc/tasklab.hpp"

#include <string>
#include <vector>

namespace mmbc {

// Per-timestep view of demonstrations: rows of (episode, state, action).
struct EpisodeDataset {
    int d_s = 0;
    std::vector<int> episode;   // one id per row
    std::vector<float> states;  // [n, d_s] row-major
    std::vector<float> actions; // [n, 2]

    int64_t rows() const { return int64_t(episode.size()); }
    const float* state(int64_t i) const { return states.data() + i * d_s; }
    const float* action(int64_t i) const { return actions.data() + i * 2; }
};

// Each demo becomes its own episode; the state of every row is the demo
// observation.
EpisodeDataset episodes_from_dataset(const Dataset& ds);

// Generic ingestion schema: header "episode,t,s_1,...,s_d,a_x,a_y".
EpisodeDataset read_episode_csv(const std::string& path);

struct AmbiguityConfig {
    int horizon = 10; // future chunk length
    int k = 25;
    int n_queries = 10000;
    int n_min = 5;
    std::vector<double> radii; // radius-controlled mode
    uint64_t seed = 0;
};

struct AmbiguityReport {
    double radius = 0.0; // 0 for the kNN variant
    double median_ratio = 0.0;
    double p90_ratio = 0.0;
    double random_baseline_median = 0.0;
    double coverage = 1.0; // fraction of queries with >= n_min neighbors
    int n_queries_used = 0;
};

// Fixed-k conditional ambiguity: local chunk variance around the k nearest
// cross-episode states over global chunk variance.
AmbiguityReport ambiguity_knn(const EpisodeDataset& ds, const AmbiguityConfig& cfg);

// Radius-controlled variant, one report per configured radius; distances are
// normalized by sqrt(d_s).
std::vector<AmbiguityReport> ambiguity_radius(const EpisodeDataset& ds,
                                              const AmbiguityConfig& cfg);

} // namespace mmbc
