#pragma once

#include "pcac/mat.hpp"

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace pcac::pcio {

// As parsed from disk: arbitrary-unit positions plus 8-bit RGB.
struct RawPointCloud {
    std::vector<std::array<double, 3>> positions;
    std::vector<std::array<uint8_t, 3>> colors;

    size_t size() const { return positions.size(); }
};

// Voxelized cloud: unique non-negative integer coordinates below
// 2^bit_depth, attributes as YUV in [0,1]. Rows are sorted
// lexicographically by coordinate so that every consumer sees the same
// canonical order.
struct PointCloud {
    std::vector<std::array<int32_t, 3>> coords;
    Mat<float> attrs;  // N x 3, YUV
    int bit_depth = 10;

    size_t size() const { return coords.size(); }
};

struct ResampleConfig {
    int cluster_point_count = 100000;
};

class PlyError : public std::runtime_error {
public:
    explicit PlyError(const std::string& msg) : std::runtime_error(msg) {}
};

RawPointCloud parse_ply(const std::vector<uint8_t>& bytes);
RawPointCloud load_ply(const std::string& path);

// Writes x/y/z as float32 and red/green/blue as uchar. Binary round-trips
// exactly when positions are float32-representable.
std::vector<uint8_t> write_ply(const RawPointCloud& pc, bool binary);
void save_ply(const RawPointCloud& pc, const std::string& path, bool binary);

// BT.709 full-range. Inputs in [0,255], outputs in [0,1] with U,V offset
// by 0.5; the inverse clamps to [0,255].
std::array<double, 3> rgb_to_yuv(const std::array<double, 3>& rgb);
std::array<double, 3> yuv_to_rgb(const std::array<double, 3>& yuv);

// Min-shift, scale into [0, 2^bit_depth - 1] (only when the extent
// overflows it), round, merge duplicate voxels by mean RGB, then convert
// to normalized YUV. Output sorted by coordinate.
PointCloud voxelize(const RawPointCloud& raw, int bit_depth);

// Inverse of the attribute mapping: YUV back to rounded 8-bit RGB,
// coordinates become positions.
RawPointCloud to_raw(const PointCloud& pc);

// Greedy farthest point sampling; the first center is row 0, ties resolve
// to the lowest index.
std::vector<int32_t> farthest_point_sample(const PointCloud& pc, int k);

// For each center, the m nearest points by Euclidean distance (ties by
// lower index). Blocks may overlap.
std::vector<PointCloud> knn_cluster(const PointCloud& pc, const std::vector<int32_t>& centers,
                                    int m);

struct ResampleResult {
    std::vector<PointCloud> blocks;
    std::vector<int32_t> center_indices;
};

ResampleResult resample(const PointCloud& pc, const ResampleConfig& cfg);

// Writes blocks as <prefix>_block###.ply plus <prefix>_index.json.
void write_blocks(const ResampleResult& res, const std::string& prefix, const std::string& source,
                  int frame);

}  // namespace pcac::pcio
