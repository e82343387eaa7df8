#include "mmbc/tasklab.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace mmbc {

namespace {

constexpr int kChunkLen = 60;

double smoothstep(double u) {
    u = std::clamp(u, 0.0, 1.0);
    return u * u * (3.0 - 2.0 * u);
}

// x-profile transition helper: value moves from `a` to `b` while y crosses
// [y0, y1], holding outside.
double transition(double y, double y0, double y1, double a, double b) {
    if (y <= y0) return a;
    if (y >= y1) return b;
    return a + (b - a) * smoothstep((y - y0) / (y1 - y0));
}

Trajectory circle_arc(bool right) {
    const double cx = 0.5, cy = 0.5, R = 0.35;
    Trajectory traj(kChunkLen);
    for (int t = 0; t < kChunkLen; ++t) {
        const double th = -M_PI / 2.0 + M_PI * double(t) / double(kChunkLen - 1);
        const double x = right ? cx + R * std::cos(th) : cx - R * std::cos(th);
        traj.set_point(t, {x, cy + R * std::sin(th)});
    }
    return traj;
}

TaskSpec make_circle() {
    TaskSpec spec;
    spec.task_id = TaskId::Circle;
    spec.K = 2;
    spec.tube_radius = 0.05;
    spec.start = {0.5, 0.15};
    spec.obstacles = {{0.38, 0.38, 0.62, 0.62}};
    spec.goals = {{0.44, 0.79, 0.56, 0.91}};
    spec.templates = {circle_arc(true), circle_arc(false)};
    return spec;
}

TaskSpec make_sequential() {
    TaskSpec spec;
    spec.task_id = TaskId::Sequential;
    spec.K = 4;
    spec.tube_radius = 0.05;
    spec.start = {0.5, 0.05};
    // first decision around the center block, second around the branch blocks
    spec.obstacles = {
        {0.40, 0.20, 0.60, 0.36},
        {0.22, 0.50, 0.28, 0.66},
        {0.72, 0.50, 0.78, 0.66},
    };
    const double lane1[2] = {0.25, 0.75};         // L, R
    const double lane2[4] = {0.04, 0.62, 0.38, 0.96}; // LL, LR, RL, RR
    for (int m = 0; m < 4; ++m) {
        const double l1 = lane1[m / 2];
        const double l2 = lane2[m];
        Trajectory traj(kChunkLen);
        for (int t = 0; t < kChunkLen; ++t) {
            const double y = 0.05 + 0.90 * double(t) / double(kChunkLen - 1);
            double x;
            if (y < 0.38)
                x = transition(y, 0.07, 0.18, 0.5, l1);
            else
                x = transition(y, 0.38, 0.52, l1, l2);
            traj.set_point(t, {x, y});
        }
        spec.templates.push_back(traj);
        spec.goals.push_back({l2 - 0.05, 0.90, l2 + 0.05, 1.00});
    }
    return spec;
}

TaskSpec make_radial() {
    TaskSpec spec;
    spec.task_id = TaskId::Radial;
    spec.K = 16;
    spec.tube_radius = 0.02;
    spec.start = {0.5, 0.5};
    const double R = 0.45;
    for (int k = 0; k < 16; ++k) {
        const double ang = 2.0 * M_PI * double(k) / 16.0;
        const double cx = std::cos(ang), sy = std::sin(ang);
        Trajectory traj(kChunkLen);
        for (int t = 0; t < kChunkLen; ++t) {
            // cube-root radial speed: most of the chunk is spent far from the
            // shared start, which keeps the modes RMS-separated
            const double r = R * std::cbrt(double(t) / double(kChunkLen - 1));
            traj.set_point(t, {0.5 + r * cx, 0.5 + r * sy});
        }
        spec.templates.push_back(traj);
        const double gx = 0.5 + R * cx, gy = 0.5 + R * sy;
        spec.goals.push_back({gx - 0.03, gy - 0.03, gx + 0.03, gy + 0.03});
        // obstacle pips between neighboring directions
        const double pang = 2.0 * M_PI * (double(k) + 0.5) / 16.0;
        const double px = 0.5 + 0.30 * std::cos(pang), py = 0.5 + 0.30 * std::sin(pang);
        spec.obstacles.push_back({px - 0.015, py - 0.015, px + 0.015, py + 0.015});
    }
    return spec;
}

TaskSpec make_corridor() {
    TaskSpec spec;
    spec.task_id = TaskId::Corridor;
    spec.K = 16;
    spec.tube_radius = 0.02;
    spec.start = {0.5, 0.04};
    spec.goals = {{0.46, 0.92, 0.54, 1.00}}; // common endpoint (0.5, 0.96)
    for (int k = 1; k <= 15; ++k) {
        const double wx = double(k) / 16.0;
        spec.obstacles.push_back({wx - 0.011, 0.20, wx + 0.011, 0.77});
    }
    // Every route swings through the same total lateral motion (0.47 per fan)
    // via an overshoot staging point, so expert path lengths stay nearly equal.
    // Inside its corridor each route crawls through a mode-specific depth
    // window; the stride-5 depth permutation keeps index-adjacent corridors
    // far apart in chunk space.
    const double kLateral = 0.47;
    for (int k = 0; k < 16; ++k) {
        const double xk = (double(k) + 0.5) / 16.0;
        const double dx = xk - 0.5;
        const double sgn = dx >= 0.0 ? 1.0 : -1.0;
        const double stage_in = xk + sgn * (kLateral - std::fabs(dx)) / 2.0;
        const double stage_out = 0.5 - sgn * (kLateral - std::fabs(dx)) / 2.0;
        const double h = 0.25 + 0.03 * double((5 * k) % 16);
        // knots: (time index, x, y), linearly interpolated
        const struct {
            double t, x, y;
        } knots[] = {
            {0.0, 0.5, 0.04},      {3.0, stage_in, 0.10},  {6.0, xk, 0.18},
            {12.0, xk, h - 0.02},  {48.0, xk, h + 0.02},   {54.0, xk, 0.79},
            {57.0, stage_out, 0.88}, {59.0, 0.5, 0.96},
        };
        Trajectory traj(kChunkLen);
        size_t seg = 0;
        for (int t = 0; t < kChunkLen; ++t) {
            const double td = double(t);
            while (seg + 2 < std::size(knots) && td > knots[seg + 1].t) ++seg;
            const auto& a = knots[seg];
            const auto& b = knots[seg + 1];
            const double u = (td - a.t) / (b.t - a.t);
            traj.set_point(t, {a.x + u * (b.x - a.x), a.y + u * (b.y - a.y)});
        }
        spec.templates.push_back(traj);
    }
    return spec;
}

} // namespace

const char* task_name(TaskId id) {
    switch (id) {
        case TaskId::Circle: return "circle";
        case TaskId::Sequential: return "sequential";
        case TaskId::Radial: return "radial";
        case TaskId::Corridor: return "corridor";
    }
    return "unknown";
}

std::optional<TaskId> parse_task(const std::string& name) {
    if (name == "circle") return TaskId::Circle;
    if (name == "sequential") return TaskId::Sequential;
    if (name == "radial") return TaskId::Radial;
    if (name == "corridor") return TaskId::Corridor;
    return std::nullopt;
}

TaskSpec build_task(TaskId id) {
    switch (id) {
        case TaskId::Circle: return make_circle();
        case TaskId::Sequential: return make_sequential();
        case TaskId::Radial: return make_radial();
        case TaskId::Corridor: return make_corridor();
    }
    throw std::invalid_argument("build_task: bad task id");
}

double Dataset::mean_expert_length() const {
    double s = 0.0;
    for (const auto& d : demos) s += polyline_length(d.chunk);
    return demos.empty() ? 0.0 : s / double(demos.size());
}

namespace {

// Declared in modemetrics but needed here for the in-tube/no-collision checks;
// kept as internal helpers to avoid a dependency cycle.
bool chunk_hits_obstacles(const Trajectory& chunk, const TaskSpec& task) {
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

} // namespace

Demo sample_demo(const TaskSpec& task, int mode, Rng& rng, const DemoConfig& cfg) {
    if (mode < 1 || mode > task.K)
        throw std::invalid_argument("sample_demo: mode out of range");
    const Trajectory& tmpl = task.templates[size_t(mode - 1)];
    const double amp = cfg.noise_amplitude * task.tube_radius / 3.0;

    Demo demo;
    demo.mode = mode;
    demo.obs[0] = static_cast<float>(task.start.x);
    demo.obs[1] = static_cast<float>(task.start.y);
    if (cfg.start_jitter > 0.0) {
        demo.obs[0] += static_cast<float>(cfg.start_jitter * rng.normal());
        demo.obs[1] += static_cast<float>(cfg.start_jitter * rng.normal());
    }

    for (int attempt = 0; attempt < cfg.max_retries; ++attempt) {
        double c[3];
        for (double& ch : c) ch = amp * rng.uniform(-1.0, 1.0);

        Trajectory chunk(tmpl.H);
        Point prev_n{1.0, 0.0};
        for (int t = 0; t < tmpl.H; ++t) {
            const int t0 = std::max(0, t - 1), t1 = std::min(tmpl.H - 1, t + 1);
            Point tang = tmpl.point(t1) - tmpl.point(t0);
            const double len = norm(tang);
            Point n = prev_n;
            if (len > 1e-12) {
                n = {-tang.y / len, tang.x / len};
                prev_n = n;
            }
            const double u = double(t) / double(tmpl.H - 1);
            double delta = 0.0;
            for (int h = 0; h < 3; ++h) delta += c[h] * std::sin(M_PI * double(h + 1) * u);
            chunk.set_point(t, tmpl.point(t) + delta * n);
        }

        const bool in_tube = traj_max_distance(chunk, tmpl) <= task.tube_radius;
        if (in_tube && !chunk_hits_obstacles(chunk, task)) {
            demo.chunk = std::move(chunk);
            return demo;
        }
    }
    throw TaskGeometryError("sample_demo: could not place a demo inside the tube of mode " +
                            std::to_string(mode) + " on task " + task_name(task.task_id) +
                            " (geometry misconfiguration)");
}

Dataset generate_dataset(const TaskSpec& task, int n, uint64_t seed, const DemoConfig& cfg) {
    if (n < task.K) throw std::invalid_argument("generate_dataset: n must be >= K");
    Dataset ds;
    ds.task_id = task.task_id;
    ds.K = task.K;
    ds.H = task.H;
    ds.seed = seed;
    ds.demos.reserve(size_t(n));
    for (int i = 0; i < n; ++i) {
        Rng demo_rng(derive_stream_seed(seed, "demo:" + std::to_string(i)));
        ds.demos.push_back(sample_demo(task, (i % task.K) + 1, demo_rng, cfg));
    }
    float mnx = 1e30f, mny = 1e30f, mxx = -1e30f, mxy = -1e30f;
    for (const auto& d : ds.demos) {
        for (int t = 0; t < d.chunk.H; ++t) {
            mnx = std::min(mnx, d.chunk.xy[2 * size_t(t)]);
            mxx = std::max(mxx, d.chunk.xy[2 * size_t(t)]);
            mny = std::min(mny, d.chunk.xy[2 * size_t(t) + 1]);
            mxy = std::max(mxy, d.chunk.xy[2 * size_t(t) + 1]);
        }
    }
    ds.norm = {mnx, mny, mxx, mxy};
    return ds;
}

namespace {

constexpr char kMagic[4] = {'M', 'M', 'B', 'C'};
constexpr uint16_t kFormatVersion = 1;

template <typename T>
void put(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T)); // little-endian host
}

template <typename T>
T get(std::istream& is, const char* what) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw MalformedHeaderError(std::string("dataset header ends inside field: ") + what);
    return v;
}

} // namespace

void write_dataset(const Dataset& ds, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DatasetIoError("cannot open for write: " + path);
    write_dataset(ds, os);
    if (!os) throw DatasetIoError("short write: " + path);
}

void write_dataset(const Dataset& ds, std::ostream& os) {
    os.write(kMagic, 4);
    put<uint16_t>(os, kFormatVersion);
    put<uint8_t>(os, static_cast<uint8_t>(ds.task_id));
    put<uint8_t>(os, static_cast<uint8_t>(ds.K));
    put<uint32_t>(os, static_cast<uint32_t>(ds.demos.size()));
    put<uint16_t>(os, static_cast<uint16_t>(ds.H));
    put<uint16_t>(os, 2); // d_a
    put<float>(os, ds.norm.min_x);
    put<float>(os, ds.norm.min_y);
    put<float>(os, ds.norm.max_x);
    put<float>(os, ds.norm.max_y);
    for (const auto& d : ds.demos) {
        put<uint16_t>(os, static_cast<uint16_t>(d.mode));
        put<float>(os, d.obs[0]);
        put<float>(os, d.obs[1]);
        os.write(reinterpret_cast<const char*>(d.chunk.xy.data()),
                 static_cast<std::streamsize>(d.chunk.xy.size() * sizeof(float)));
    }
}

Dataset read_dataset(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DatasetIoError("cannot open for read: " + path);
    return read_dataset(is, path);
}

Dataset read_dataset(std::istream& is, const std::string& what) {
    char magic[4] = {};
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw MagicMismatchError("not a MMBC dataset: " + what);
    const auto version = get<uint16_t>(is, "version");
    if (version != kFormatVersion)
        throw MalformedHeaderError("unsupported dataset format version " +
                                   std::to_string(version));
    Dataset ds;
    const auto task_raw = get<uint8_t>(is, "task_id");
    if (task_raw > 3) throw MalformedHeaderError("bad task id in header");
    ds.task_id = static_cast<TaskId>(task_raw);
    ds.K = get<uint8_t>(is, "K");
    const auto n = get<uint32_t>(is, "N");
    ds.H = get<uint16_t>(is, "H");
    const auto d_a = get<uint16_t>(is, "d_a");
    if (ds.K <= 0 || ds.H <= 0 || d_a != 2)
        throw MalformedHeaderError("inconsistent dataset header fields");
    ds.norm.min_x = get<float>(is, "norm");
    ds.norm.min_y = get<float>(is, "norm");
    ds.norm.max_x = get<float>(is, "norm");
    ds.norm.max_y = get<float>(is, "norm");
    ds.demos.reserve(n);
    for (uint32_t i = 0; i < n; ++i) {
        Demo d;
        uint16_t mode = 0;
        is.read(reinterpret_cast<char*>(&mode), sizeof(mode));
        is.read(reinterpret_cast<char*>(d.obs), sizeof(d.obs));
        d.chunk = Trajectory(ds.H);
        is.read(reinterpret_cast<char*>(d.chunk.xy.data()),
                static_cast<std::streamsize>(d.chunk.xy.size() * sizeof(float)));
        if (!is)
            throw TruncatedPayloadError("dataset truncated inside demo " + std::to_string(i) +
                                        " of " + std::to_string(n));
        d.mode = mode;
        ds.demos.push_back(std::move(d));
    }
    return ds;
}

void export_dataset_csv(const Dataset& ds, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw DatasetIoError("cannot open for write: " + path);
    os << "mode,obs_x,obs_y";
    for (int t = 0; t < ds.H; ++t) os << ",a" << t << "_x,a" << t << "_y";
    os << "\n";
    os.precision(9);
    for (const auto& d : ds.demos) {
        os << d.mode << "," << d.obs[0] << "," << d.obs[1];
        for (float v : d.chunk.xy) os << "," << v;
        os << "\n";
    }
}

bool datasets_equal(const Dataset& a, const Dataset& b) {
    if (a.task_id != b.task_id || a.K != b.K || a.H != b.H) return false;
    if (std::memcmp(&a.norm, &b.norm, sizeof(NormBounds)) != 0) return false;
    if (a.demos.size() != b.demos.size()) return false;
    for (size_t i = 0; i < a.demos.size(); ++i) {
        const Demo& da = a.demos[i];
        const Demo& db = b.demos[i];
        if (da.mode != db.mode) return false;
        if (std::memcmp(da.obs, db.obs, sizeof(da.obs)) != 0) return false;
        if (da.chunk.xy != db.chunk.xy) return false;
    }
    return true;
}

} // namespace mmbc
