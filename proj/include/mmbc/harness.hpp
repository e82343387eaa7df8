#pragma once

#include "mmbc/config.hpp"
#include "mmbc/infodiag.hpp"
#include "mmbc/transportdiag.hpp"

#include <functional>
#include <string>
#include <vector>

namespace mmbc {

uint64_t fnv1a64_bytes(const void* data, size_t size);
std::string hash_hex(uint64_t h);
std::string dataset_hash(const Dataset& ds);

struct CheckpointReport {
    int epoch = 0;
    double train_loss = 0.0;
    ModeMetrics metrics;
    bool has_info = false;
    InfoChain info;
    bool has_valid_mass = false;
    ValidMassReport valid_mass;
};

struct RunRecord {
    std::string config_hash;
    std::string data_hash;
    std::string task;
    std::string family;
    uint64_t seed = 0;
    double beta = 0.0; // family regularization weight actually used
    std::vector<CheckpointReport> checkpoints;
    double wall_time_sec = 0.0;
    std::string record_hash() const; // hash of all metric payloads
};

void write_run_record(const RunRecord& run, const std::string& path);
RunRecord read_run_record(const std::string& path);

// Full pipeline for one cell: generate data, train, evaluate 200 rollouts per
// checkpoint, attach diagnostics. `keep` optionally receives the trained
// policy and its checkpoints for further diagnostics.
struct RunArtifacts {
    PolicyState policy;
    std::vector<Checkpoint> checkpoints;
    Dataset dataset;
    TaskSpec task;
};
RunRecord run_experiment(const ExperimentConfig& cfg, RunArtifacts* keep = nullptr);

// Mean SR/Cov/MER over the last (up to) five evaluated checkpoints; sets
// `short_history` when fewer than five were available.
struct FinalMetrics {
    ModeMetrics metrics;
    bool short_history = false;
    int checkpoints_used = 0;
};
FinalMetrics final_metrics(const RunRecord& run);

// KL-CVAE beta sweep: trains per (beta, seed) on the configured task, runs
// the information diagnostics per checkpoint.
struct SweepConfig {
    ExperimentConfig base;
    std::vector<double> betas = {0.001, 0.01, 0.1, 1.0};
    int n_seeds = 3;
};
std::vector<RunRecord> sweep_beta(const SweepConfig& sweep);

// Worker cap for sweep cells: MMBC_THREADS, default 1.
int worker_count();

// CSV emission (schemas documented in the README).
void write_metrics_csv(const RunRecord& run, const std::string& path);
void write_info_csv(const std::vector<RunRecord>& runs, const std::string& path);
void write_bridge_csv(const std::string& task, const std::string& sampler,
                      const BridgeCollection& col, const std::string& path);

} // namespace mmbc
