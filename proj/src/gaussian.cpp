#include "pcac/gaussian.hpp"

namespace pcac::gauss {

namespace {

constexpr double kLog2E = 1.4426950408889634;
constexpr double kLn2Hi = 6.93147180369123816490e-01;
constexpr double kLn2Lo = 1.90821492927058770002e-10;

// erf(x) = 1 - (a1 t + ... + a5 t^5) exp(-x^2), t = 1/(1+px), x >= 0
constexpr double kP = 0.3275911;
constexpr double kA1 = 0.254829592;
constexpr double kA2 = -0.284496736;
constexpr double kA3 = 1.421413741;
constexpr double kA4 = -1.453152027;
constexpr double kA5 = 1.061405429;

constexpr double kInvSqrt2 = 0.7071067811865476;

}  // namespace

double det_exp(double x) {
    if (!(x == x)) return x;  // NaN in, NaN out; the int cast below must not see it
    if (x < -745.0) return 0.0;
    if (x > 709.0) x = 709.0;
    double kd = x * kLog2E;
    int k = static_cast<int>(kd >= 0 ? kd + 0.5 : kd - 0.5);
    double r = (x - k * kLn2Hi) - k * kLn2Lo;
    // Taylor to r^11; |r| <= 0.3466 keeps the truncation below 1e-13.
    double p = 1.0 / 39916800.0;
    p = p * r + 1.0 / 3628800.0;
    p = p * r + 1.0 / 362880.0;
    p = p * r + 1.0 / 40320.0;
    p = p * r + 1.0 / 5040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    return std::ldexp(p, k);
}

namespace {

double erf_approx(double z) {
    double az = z < 0 ? -z : z;
    double t = 1.0 / (1.0 + kP * az);
    double s = ((((kA5 * t + kA4) * t + kA3) * t + kA2) * t + kA1) * t;
    double e = 1.0 - s * det_exp(-az * az);
    return z < 0 ? -e : e;
}

double erf_approx_deriv(double z) {
    double az = z < 0 ? -z : z;
    double t = 1.0 / (1.0 + kP * az);
    double s = ((((kA5 * t + kA4) * t + kA3) * t + kA2) * t + kA1) * t;
    double sp = (((5.0 * kA5 * t + 4.0 * kA4) * t + 3.0 * kA3) * t + 2.0 * kA2) * t + kA1;
    // d/dz [1 - s(t) e^{-z^2}] with dt/dz = -p t^2; even in z.
    return det_exp(-az * az) * (kP * t * t * sp + 2.0 * az * s);
}

}  // namespace

namespace {

// Upper tail 1 - Phi(x) for x >= 0, computed directly from the erfc form
// so deep-tail bucket probabilities do not cancel.
double norm_sf_pos(double x) {
    double z = x * kInvSqrt2;
    double t = 1.0 / (1.0 + kP * z);
    double s = ((((kA5 * t + kA4) * t + kA3) * t + kA2) * t + kA1) * t;
    return 0.5 * s * det_exp(-z * z);
}

double stable_bucket_prob(double a, double b) {
    if (a >= 0.0) return norm_sf_pos(a) - norm_sf_pos(b);
    if (b <= 0.0) return norm_sf_pos(-b) - norm_sf_pos(-a);
    return 1.0 - norm_sf_pos(b) - norm_sf_pos(-a);
}

}  // namespace

double norm_cdf(double x) { return 0.5 * (1.0 + erf_approx(x * kInvSqrt2)); }

double norm_cdf_deriv(double x) { return 0.5 * kInvSqrt2 * erf_approx_deriv(x * kInvSqrt2); }

double bucket_prob(double mu, double sigma, double k) {
    return stable_bucket_prob((k - 0.5 - mu) / sigma, (k + 0.5 - mu) / sigma);
}

BitsGrad bucket_bits_grad(double mu, double sigma, double k) {
    double a = (k - 0.5 - mu) / sigma;
    double b = (k + 0.5 - mu) / sigma;
    double p = stable_bucket_prob(a, b);
    constexpr double kFloor = 3.5527136788005009e-15;  // 2^-48
    if (p < kFloor) return {-kMinLog2Prob, 0.0, 0.0, 0.0};
    double da = norm_cdf_deriv(a);
    double db = norm_cdf_deriv(b);
    double c = 1.0 / (p * kLn2 * sigma);
    BitsGrad g;
    g.bits = -std::log2(p);
    g.d_mu = (db - da) * c;
    g.d_sigma = (b * db - a * da) * c;
    g.d_k = -(db - da) * c;
    return g;
}

}  // namespace pcac::gauss
