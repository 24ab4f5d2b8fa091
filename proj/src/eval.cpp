#include "pcac/eval.hpp"

#include "json.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <sstream>

namespace pcac::eval {

double psnr_y(const pcio::PointCloud& a, const pcio::PointCloud& b) {
    if (a.size() != b.size()) throw std::invalid_argument("psnr_y: point count mismatch");
    if (a.coords != b.coords) throw std::invalid_argument("psnr_y: coordinate mismatch");
    double se = 0.0;
    const int n = static_cast<int>(a.size());
    for (int i = 0; i < n; ++i) {
        double d = (static_cast<double>(a.attrs(i, 0)) - b.attrs(i, 0)) * 255.0;
        se += d * d;
    }
    double mse = se / n;
    if (mse <= 0.0) return kPsnrCap;
    double psnr = 10.0 * std::log10(255.0 * 255.0 / mse);
    return std::min(psnr, kPsnrCap);
}

double bpp(size_t total_bits, size_t point_count) {
    if (point_count == 0) throw std::invalid_argument("bpp: zero points");
    return static_cast<double>(total_bits) / static_cast<double>(point_count);
}

void validate_curve(const RDCurve& c) {
    if (c.points.size() < 4) throw std::invalid_argument("rd curve needs at least 4 points");
    for (size_t i = 0; i + 1 < c.points.size(); ++i) {
        if (!(c.points[i].bpp < c.points[i + 1].bpp))
            throw std::invalid_argument("rd curve bpp must be strictly increasing");
        if (!std::isfinite(c.points[i].bpp) || !std::isfinite(c.points[i].psnr_y))
            throw std::invalid_argument("rd curve values must be finite");
    }
}

namespace {

// least-squares cubic fit y = c0 + c1 x + c2 x^2 + c3 x^3
std::array<double, 4> cubic_fit(const std::vector<double>& x, const std::vector<double>& y) {
    const int n = static_cast<int>(x.size());
    Eigen::MatrixXd a(n, 4);
    Eigen::VectorXd rhs(n);
    for (int i = 0; i < n; ++i) {
        a(i, 0) = 1.0;
        a(i, 1) = x[i];
        a(i, 2) = x[i] * x[i];
        a(i, 3) = x[i] * x[i] * x[i];
        rhs(i) = y[i];
    }
    Eigen::Vector4d c = a.colPivHouseholderQr().solve(rhs);
    return {c(0), c(1), c(2), c(3)};
}

double cubic_integral(const std::array<double, 4>& c, double lo, double hi) {
    auto anti = [&](double x) {
        return c[0] * x + c[1] * x * x / 2 + c[2] * x * x * x / 3 + c[3] * x * x * x * x / 4;
    };
    return anti(hi) - anti(lo);
}

struct Axes {
    std::vector<double> x, y;
    double min_x, max_x;
};

Axes curve_axes(const RDCurve& c, bool rate_over_psnr) {
    Axes a;
    for (const auto& p : c.points) {
        double lr = std::log10(p.bpp);
        if (rate_over_psnr) {
            a.x.push_back(p.psnr_y);
            a.y.push_back(lr);
        } else {
            a.x.push_back(lr);
            a.y.push_back(p.psnr_y);
        }
    }
    auto [mn, mx] = std::minmax_element(a.x.begin(), a.x.end());
    a.min_x = *mn;
    a.max_x = *mx;
    return a;
}

double bd_average_diff(const RDCurve& reference, const RDCurve& test, bool rate_over_psnr) {
    validate_curve(reference);
    validate_curve(test);
    Axes ar = curve_axes(reference, rate_over_psnr);
    Axes at = curve_axes(test, rate_over_psnr);
    double lo = std::max(ar.min_x, at.min_x);
    double hi = std::min(ar.max_x, at.max_x);
    if (!(hi > lo)) throw std::invalid_argument("bd: curves do not overlap");
    auto cr = cubic_fit(ar.x, ar.y);
    auto ct = cubic_fit(at.x, at.y);
    return (cubic_integral(ct, lo, hi) - cubic_integral(cr, lo, hi)) / (hi - lo);
}

}  // namespace

double bd_br(const RDCurve& reference, const RDCurve& test) {
    double avg = bd_average_diff(reference, test, true);
    return (std::pow(10.0, avg) - 1.0) * 100.0;
}

double bd_psnr(const RDCurve& reference, const RDCurve& test) {
    return bd_average_diff(reference, test, false);
}

std::string rd_report_csv(const std::vector<RDCurve>& curves) {
    std::ostringstream out;
    out << "codec,lambda,sequence,bpp,psnr_y\n";
    out.precision(10);
    for (const auto& c : curves)
        for (const auto& p : c.points)
            out << c.codec << ',' << p.lambda << ',' << c.sequence << ',' << p.bpp << ','
                << p.psnr_y << '\n';
    return out.str();
}

std::string rd_report_json(const std::vector<RDCurve>& curves, const std::string& reference_codec) {
    nlohmann::json j;
    j["reference"] = reference_codec;
    j["curves"] = nlohmann::json::array();
    for (const auto& c : curves) {
        nlohmann::json pts = nlohmann::json::array();
        for (const auto& p : c.points)
            pts.push_back({{"lambda", p.lambda}, {"bpp", p.bpp}, {"psnr_y", p.psnr_y}});
        j["curves"].push_back({{"codec", c.codec}, {"sequence", c.sequence}, {"points", pts}});
    }
    j["bd"] = nlohmann::json::array();
    for (const auto& test : curves) {
        if (test.codec == reference_codec) continue;
        const RDCurve* ref = nullptr;
        for (const auto& c : curves)
            if (c.codec == reference_codec && c.sequence == test.sequence) ref = &c;
        nlohmann::json entry = {{"codec", test.codec}, {"sequence", test.sequence}};
        if (!ref) {
            entry["error"] = "no reference curve for sequence";
        } else {
            try {
                entry["bd_br_pct"] = bd_br(*ref, test);
                entry["bd_psnr_db"] = bd_psnr(*ref, test);
            } catch (const std::exception& e) {
                entry["error"] = e.what();
            }
        }
        j["bd"].push_back(entry);
    }
    return j.dump(2);
}

}  // namespace pcac::eval
