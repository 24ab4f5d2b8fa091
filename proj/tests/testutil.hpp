#pragma once

#include "pcac/mat.hpp"
#include "pcac/pcio.hpp"
#include "pcac/sparse.hpp"

#include <cmath>
#include <random>
#include <set>

namespace testutil {

using pcac::Mat;

inline pcac::pcio::RawPointCloud random_raw_cloud(int n, std::mt19937_64& rng, double extent = 500.0) {
    std::uniform_real_distribution<float> pos(0.0f, static_cast<float>(extent));
    std::uniform_int_distribution<int> col(0, 255);
    pcac::pcio::RawPointCloud pc;
    for (int i = 0; i < n; ++i) {
        pc.positions.push_back({pos(rng), pos(rng), pos(rng)});
        pc.colors.push_back({static_cast<uint8_t>(col(rng)), static_cast<uint8_t>(col(rng)),
                             static_cast<uint8_t>(col(rng))});
    }
    return pc;
}

// Points on a sphere surface with a smooth color field; voxelizes into a
// surface-like occupancy, which is what the codec is built for.
inline pcac::pcio::RawPointCloud sphere_cloud(int n, double radius, std::mt19937_64& rng) {
    std::normal_distribution<double> g(0.0, 1.0);
    pcac::pcio::RawPointCloud pc;
    for (int i = 0; i < n; ++i) {
        double x = g(rng), y = g(rng), z = g(rng);
        double norm = std::sqrt(x * x + y * y + z * z);
        if (norm < 1e-9) norm = 1.0;
        x = x / norm * radius + radius;
        y = y / norm * radius + radius;
        z = z / norm * radius + radius;
        auto band = [&](double phase) {
            return static_cast<uint8_t>(127.5 + 127.0 * std::sin(0.02 * (x + y) + phase) *
                                                    std::cos(0.015 * z + phase));
        };
        pc.positions.push_back({x, y, z});
        pc.colors.push_back({band(0.0), band(2.0), band(4.0)});
    }
    return pc;
}

inline std::vector<pcac::sparse::Coord> random_unique_coords(int n, int lo, int hi,
                                                             std::mt19937_64& rng) {
    std::uniform_int_distribution<int32_t> d(lo, hi);
    std::set<pcac::sparse::Coord> seen;
    while (static_cast<int>(seen.size()) < n) seen.insert({d(rng), d(rng), d(rng)});
    return {seen.begin(), seen.end()};  // sorted, unique
}

template <typename T>
double max_abs_diff(const Mat<T>& a, const Mat<T>& b) {
    double m = 0;
    for (size_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::abs(static_cast<double>(a.data()[i]) - b.data()[i]));
    return m;
}

}  // namespace testutil
