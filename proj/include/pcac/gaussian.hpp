#pragma once

#include <cmath>
#include <cstdint>

namespace pcac::gauss {

// Entropy-coded streams must see identical probabilities on every machine,
// so the normal CDF below is built from fixed polynomial arithmetic only —
// no libm transcendentals anywhere on this path.

// exp(x) via 2^k * P(r), r = x - k*ln2 reduced to |r| <= ln2/2.
double det_exp(double x);

// Standard normal CDF, Abramowitz-Stegun style erf approximation evaluated
// with det_exp. Absolute error < 2e-7.
double norm_cdf(double x);

// Exact derivative of norm_cdf as implemented (the derivative of the
// approximation itself, not the true pdf), so finite-difference checks of
// anything built on norm_cdf agree to machine precision.
double norm_cdf_deriv(double x);

// P(symbol == k) under round-quantization of N(mu, sigma); evaluated from
// the tail side so deep-tail values keep full precision.
double bucket_prob(double mu, double sigma, double k);

inline constexpr double kLn2 = 0.6931471805599453;
inline constexpr double kMinLog2Prob = -48.0;  // tail floor, matches escape cost

// -log2 of bucket_prob with the tail floored at 2^-48, plus the partial
// derivatives with respect to mu, sigma and a continuous relaxation of k.
struct BitsGrad {
    double bits;
    double d_mu;
    double d_sigma;
    double d_k;
};
BitsGrad bucket_bits_grad(double mu, double sigma, double k);

inline double bucket_bits(double mu, double sigma, double k) {
    double p = bucket_prob(mu, sigma, k);
    constexpr double floor_p = 3.5527136788005009e-15;  // 2^-48
    if (p < floor_p) return -kMinLog2Prob;
    return -std::log2(p);
}

}  // namespace pcac::gauss
