#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace mmbc {

struct Point {
    double x = 0.0;
    double y = 0.0;
};

inline Point operator+(Point a, Point b) { return {a.x + b.x, a.y + b.y}; }
inline Point operator-(Point a, Point b) { return {a.x - b.x, a.y - b.y}; }
inline Point operator*(double c, Point p) { return {c * p.x, c * p.y}; }
inline double dot(Point a, Point b) { return a.x * b.x + a.y * b.y; }
inline double norm(Point p) { return std::sqrt(p.x * p.x + p.y * p.y); }

// Axis-aligned rectangle, min corner inclusive / max corner inclusive.
struct Rect {
    double x0 = 0.0, y0 = 0.0, x1 = 0.0, y1 = 0.0;

    bool contains(Point p) const { return p.x >= x0 && p.x <= x1 && p.y >= y0 && p.y <= y1; }
    Point center() const { return {0.5 * (x0 + x1), 0.5 * (y0 + y1)}; }
};

// Euclidean distance from a point to a rectangle (0 inside).
inline double point_rect_distance(Point p, const Rect& r) {
    const double dx = std::max({r.x0 - p.x, 0.0, p.x - r.x1});
    const double dy = std::max({r.y0 - p.y, 0.0, p.y - r.y1});
    return std::sqrt(dx * dx + dy * dy);
}

// Action chunk: H time-aligned 2-D points. Stored row-major (x, y) pairs in
// native [0,1]^2 coordinates unless stated otherwise.
struct Trajectory {
    int H = 0;
    std::vector<float> xy; // 2*H floats

    Trajectory() = default;
    explicit Trajectory(int h) : H(h), xy(static_cast<size_t>(2 * h), 0.0f) {}

    Point point(int t) const { return {xy[2 * size_t(t)], xy[2 * size_t(t) + 1]}; }
    void set_point(int t, Point p) {
        xy[2 * size_t(t)] = static_cast<float>(p.x);
        xy[2 * size_t(t) + 1] = static_cast<float>(p.y);
    }
    Point endpoint() const { return point(H - 1); }
};

// RMS trajectory distance: d = sqrt((1/H) sum_t ||a_t - b_t||^2).
inline double traj_distance(const Trajectory& a, const Trajectory& b) {
    if (a.H != b.H) throw std::invalid_argument("traj_distance: chunk lengths differ");
    double s = 0.0;
    for (int t = 0; t < a.H; ++t) {
        const double dx = double(a.xy[2 * size_t(t)]) - double(b.xy[2 * size_t(t)]);
        const double dy = double(a.xy[2 * size_t(t) + 1]) - double(b.xy[2 * size_t(t) + 1]);
        s += dx * dx + dy * dy;
    }
    return std::sqrt(s / double(a.H));
}

// Max pointwise distance; tube membership uses this metric.
inline double traj_max_distance(const Trajectory& a, const Trajectory& b) {
    if (a.H != b.H) throw std::invalid_argument("traj_max_distance: chunk lengths differ");
    double m = 0.0;
    for (int t = 0; t < a.H; ++t) {
        const double dx = double(a.xy[2 * size_t(t)]) - double(b.xy[2 * size_t(t)]);
        const double dy = double(a.xy[2 * size_t(t) + 1]) - double(b.xy[2 * size_t(t) + 1]);
        m = std::max(m, dx * dx + dy * dy);
    }
    return std::sqrt(m);
}

inline double polyline_length(const Trajectory& a) {
    double s = 0.0;
    for (int t = 0; t + 1 < a.H; ++t) s += norm(a.point(t + 1) - a.point(t));
    return s;
}

} // namespace mmbc
