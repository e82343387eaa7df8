#include "mmbc/modemetrics.hpp"

#include <cmath>

namespace mmbc {

std::optional<int> assign_mode(const Trajectory& chunk, const TaskSpec& task) {
    if (chunk.H != task.H) throw std::invalid_argument("assign_mode: chunk length mismatch");
    for (int k = 0; k < task.K; ++k)
        if (traj_max_distance(chunk, task.templates[size_t(k)]) <= task.tube_radius)
            return k + 1;
    return std::nullopt;
}

bool collides(const Trajectory& chunk, const TaskSpec& task) {
    const double step = task.tube_radius / 2.0;
    for (int t = 0; t < chunk.H; ++t) {
        const Point p = chunk.point(t);
        for (const auto& r : task.obstacles)
            if (r.contains(p)) return true;
        if (t + 1 < chunk.H) {
            const Point q = chunk.point(t + 1);
            const double seg = norm(q - p);
            const int nsub = std::max(1, int(std::ceil(seg / step)));
            for (int s = 1; s < nsub; ++s) {
                const Point m = p + (double(s) / double(nsub)) * (q - p);
                for (const auto& r : task.obstacles)
                    if (r.contains(m)) return true;
            }
        }
    }
    return false;
}

SuccessResult evaluate_success(const Trajectory& chunk, const TaskSpec& task,
                               double mean_expert_len) {
    if (mean_expert_len <= 0.0)
        throw std::invalid_argument("evaluate_success: mean_expert_len must be positive");
    SuccessResult res;

    const Point last = chunk.endpoint();
    double best_end = 1e30;
    int best_mode = -1;
    for (int k = 0; k < task.K; ++k) {
        const double d = norm(last - task.templates[size_t(k)].endpoint());
        if (d < best_end) {
            best_end = d;
            best_mode = k;
        } else if (d == best_end && best_mode >= 0) {
            // shared-endpoint tie: prefer the template nearest in chunk space
            const double cur = traj_distance(chunk, task.templates[size_t(best_mode)]);
            const double alt = traj_distance(chunk, task.templates[size_t(k)]);
            if (alt < cur) best_mode = k;
        }
    }
    if (best_end > kEndpointTolerance) return res;
    if (collides(chunk, task)) return res;
    if (polyline_length(chunk) < kLengthFactor * mean_expert_len) return res;
    res.success = true;
    res.mode = best_mode + 1;
    return res;
}

RolloutBatch evaluate_batch(const std::vector<Trajectory>& chunks, const TaskSpec& task,
                            double mean_expert_len) {
    RolloutBatch batch;
    batch.task_id = task.task_id;
    batch.chunks = chunks;
    batch.labels.reserve(chunks.size());
    batch.success_flags.reserve(chunks.size());
    for (const auto& c : chunks) {
        const SuccessResult r = evaluate_success(c, task, mean_expert_len);
        batch.labels.push_back(r.mode);
        batch.success_flags.push_back(r.success);
    }
    return batch;
}

ModeMetrics compute_metrics(const RolloutBatch& batch, int K) {
    ModeMetrics m;
    m.per_mode_counts.assign(size_t(K), 0);
    int successes = 0;
    for (size_t i = 0; i < batch.chunks.size(); ++i) {
        if (!batch.success_flags[i]) continue;
        ++successes;
        const int mode = batch.labels[i].value();
        if (mode >= 1 && mode <= K) ++m.per_mode_counts[size_t(mode - 1)];
    }
    m.success_rate = batch.chunks.empty() ? 0.0 : double(successes) / double(batch.chunks.size());
    if (successes == 0) return m; // coverage and MER stay zero
    int covered = 0;
    double entropy = 0.0;
    for (int c : m.per_mode_counts) {
        if (c == 0) continue;
        ++covered;
        const double p = double(c) / double(successes);
        entropy -= p * std::log(p);
    }
    m.coverage = double(covered) / double(K);
    m.mer = K > 1 ? entropy / std::log(double(K)) : 0.0;
    return m;
}

double mode_separation(const TaskSpec& task) {
    double best = 1e30;
    for (int i = 0; i < task.K; ++i)
        for (int j = i + 1; j < task.K; ++j)
            best = std::min(best, traj_distance(task.templates[size_t(i)],
                                                task.templates[size_t(j)]));
    if (task.K < 2) return 0.0;
    return std::max(0.0, best - 2.0 * task.tube_radius);
}

} // namespace mmbc
