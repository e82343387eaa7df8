#pragma once

#include "mmbc/tasklab.hpp"

#include <optional>
#include <vector>

namespace mmbc {

// Mode-assignment: index of the tube containing the chunk, if any. Tubes use
// max pointwise distance to the time-aligned template; disjointness makes the
// answer unique.
std::optional<int> assign_mode(const Trajectory& chunk, const TaskSpec& task);

// True iff any chunk point, or any sub-step sample along a segment (step
// length <= tube_radius/2), lies inside an obstacle.
bool collides(const Trajectory& chunk, const TaskSpec& task);

// Success criteria: no collision, final point within 0.1 of some template
// endpoint, and path length >= 0.8 * mean expert length. The returned mode is
// the nearest-endpoint template; exact endpoint ties (shared goals) are
// broken by full trajectory distance.
struct SuccessResult {
    bool success = false;
    std::optional<int> mode;
};
SuccessResult evaluate_success(const Trajectory& chunk, const TaskSpec& task,
                               double mean_expert_len);

struct RolloutBatch {
    TaskId task_id = TaskId::Circle;
    std::vector<Trajectory> chunks;
    std::vector<std::optional<int>> labels;
    std::vector<bool> success_flags;
};

struct ModeMetrics {
    double success_rate = 0.0;
    double coverage = 0.0;
    double mer = 0.0; // entropy of the successful-mode histogram over log K
    std::vector<int> per_mode_counts;
};

// Evaluate a set of rollout chunks against the task.
RolloutBatch evaluate_batch(const std::vector<Trajectory>& chunks, const TaskSpec& task,
                            double mean_expert_len);

ModeMetrics compute_metrics(const RolloutBatch& batch, int K);

// Min over mode pairs of max(0, d_traj(T_i, T_j) - 2 * tube_radius).
double mode_separation(const TaskSpec& task);

constexpr double kEndpointTolerance = 0.1;
constexpr double kLengthFactor = 0.8;

} // namespace mmbc
