#pragma once

#include "pcac/pcio.hpp"

#include <string>
#include <vector>

namespace pcac::eval {

inline constexpr double kPsnrCap = 99.99;

// Luminance PSNR with peak 255; identical coordinates required. Zero MSE
// reports the cap sentinel.
double psnr_y(const pcio::PointCloud& a, const pcio::PointCloud& b);

double bpp(size_t total_bits, size_t point_count);

struct RDPoint {
    double bpp = 0;
    double psnr_y = 0;
    double lambda = 0;
};

struct RDCurve {
    std::string codec;
    std::string sequence;
    std::vector<RDPoint> points;  // strictly increasing bpp
};

void validate_curve(const RDCurve& c);

// Bjontegaard deltas via cubic fits over the overlapping interval.
// Negative bd_br means `test` saves rate against `reference`.
double bd_br(const RDCurve& reference, const RDCurve& test);
double bd_psnr(const RDCurve& reference, const RDCurve& test);

// CSV schema: codec,lambda,sequence,bpp,psnr_y
std::string rd_report_csv(const std::vector<RDCurve>& curves);
// JSON with per-curve points and BD tables against the named reference.
std::string rd_report_json(const std::vector<RDCurve>& curves, const std::string& reference_codec);

}  // namespace pcac::eval
