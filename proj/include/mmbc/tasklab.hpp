#pragma once

#include "mmbc/geometry.hpp"
#include "mmbc/rng.hpp"

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace mmbc {

enum class TaskId : uint8_t { Circle = 0, Sequential = 1, Radial = 2, Corridor = 3 };

const char* task_name(TaskId id);
std::optional<TaskId> parse_task(const std::string& name);

// A synthetic benchmark's geometry. Mode set C_k is the tube of radius
// `tube_radius` (max pointwise metric) around template k.
struct TaskSpec {
    TaskId task_id = TaskId::Circle;
    int K = 0;
    int H = 60;
    double tube_radius = 0.0;
    Point start;
    std::vector<Rect> obstacles;
    std::vector<Rect> goals;
    std::vector<Trajectory> templates; // K noise-free mode templates
};

// Deterministic construction of the frozen task geometry.
TaskSpec build_task(TaskId id);

struct Demo {
    float obs[2] = {0.0f, 0.0f}; // start position, optionally jittered
    Trajectory chunk;            // raw [0,1]^2 coordinates
    int mode = 0;                // 1..K
};

// Per-coordinate min/max over stored chunks; actions map to [-1,1] at the
// policy boundary via a_norm = 2*(a - min)/(max - min) - 1.
struct NormBounds {
    float min_x = 0.0f, min_y = 0.0f, max_x = 1.0f, max_y = 1.0f;

    float nx(float x) const { return 2.0f * (x - min_x) / (max_x - min_x) - 1.0f; }
    float ny(float y) const { return 2.0f * (y - min_y) / (max_y - min_y) - 1.0f; }
    float ix(float x) const { return min_x + (x + 1.0f) * 0.5f * (max_x - min_x); }
    float iy(float y) const { return min_y + (y + 1.0f) * 0.5f * (max_y - min_y); }
};

struct Dataset {
    TaskId task_id = TaskId::Circle;
    int K = 0;
    int H = 60;
    std::vector<Demo> demos;
    NormBounds norm;
    uint64_t seed = 0; // generation metadata; not persisted in the file format

    double mean_expert_length() const;
};

struct DemoConfig {
    double start_jitter = 0.0;     // sigma of N(0, sigma^2) start jitter; 0 = fixed layout
    double noise_amplitude = 0.6;  // fraction of tube_radius available to the sine harmonics
    int max_retries = 16;
};

class TaskGeometryError : public std::runtime_error {
public:
    explicit TaskGeometryError(const std::string& what) : std::runtime_error(what) {}
};

// Template k plus a smooth 3-harmonic normal perturbation, tapered to zero at
// both endpoints, kept inside the mode tube.
Demo sample_demo(const TaskSpec& task, int mode, Rng& rng, const DemoConfig& cfg = {});

// n demos, modes balanced round-robin, per-demo independent streams.
Dataset generate_dataset(const TaskSpec& task, int n, uint64_t seed, const DemoConfig& cfg = {});

// --- dataset file I/O (format in the project README) ---

class DatasetIoError : public std::runtime_error {
public:
    explicit DatasetIoError(const std::string& what) : std::runtime_error(what) {}
};
class MagicMismatchError : public DatasetIoError {
public:
    explicit MagicMismatchError(const std::string& what) : DatasetIoError(what) {}
};
class MalformedHeaderError : public DatasetIoError {
public:
    explicit MalformedHeaderError(const std::string& what) : DatasetIoError(what) {}
};
class TruncatedPayloadError : public DatasetIoError {
public:
    explicit TruncatedPayloadError(const std::string& what) : DatasetIoError(what) {}
};

void write_dataset(const Dataset& ds, std::ostream& os);
void write_dataset(const Dataset& ds, const std::string& path);
Dataset read_dataset(std::istream& is, const std::string& what = "<stream>");
Dataset read_dataset(const std::string& path);
void export_dataset_csv(const Dataset& ds, const std::string& path);

bool datasets_equal(const Dataset& a, const Dataset& b);

} // namespace mmbc
