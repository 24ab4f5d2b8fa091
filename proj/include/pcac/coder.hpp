#pragma once

#include "pcac/gaussian.hpp"
#include "pcac/mat.hpp"

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace pcac::coder {

inline constexpr int32_t kSupportMax = 255;  // in-band symbols live in [-255, 255]
inline constexpr uint32_t kProbTotal = 1u << 16;
inline constexpr float kSigmaMin = 0.04f;

struct SymbolModel {
    float mu = 0.0f;
    float sigma = 1.0f;
};

// Quantized frequency table for one model: buckets lo..hi plus a trailing
// escape bucket. Frequencies are >= 1 each and sum to exactly 2^16. Built
// from platform-fixed CDF arithmetic so encoder and decoder always agree.
struct CdfTable {
    int32_t lo = 0;
    int32_t hi = 0;
    std::vector<uint32_t> cum;  // size (hi-lo+1)+2, cum.front()=0, cum.back()=kProbTotal

    int bucket_count() const { return static_cast<int>(cum.size()) - 1; }
    int escape_bucket() const { return bucket_count() - 1; }
    uint32_t freq(int b) const { return cum[b + 1] - cum[b]; }
};

CdfTable build_cdf(float mu, float sigma);

// Raw (unquantized) bucket probability of symbol k under N(mu, sigma).
double discretize(double mu, double sigma, int32_t k);

class RangeEncoder {
public:
    void encode(uint32_t start, uint32_t size, uint32_t total);
    void encode_raw_byte(uint8_t b) { encode(b, 1, 256); }
    std::vector<uint8_t> finish();

private:
    void shift_low();
    uint64_t low_ = 0;
    uint32_t range_ = 0xFFFFFFFFu;
    uint8_t cache_ = 0;
    uint64_t cache_size_ = 1;
    std::vector<uint8_t> out_;
};

class RangeDecoder {
public:
    explicit RangeDecoder(const std::vector<uint8_t>& bytes);
    // Largest value < total consistent with the stream position.
    uint32_t threshold(uint32_t total);
    void consume(uint32_t start, uint32_t size);
    uint8_t decode_raw_byte();

private:
    uint8_t next_byte() { return pos_ < bytes_->size() ? (*bytes_)[pos_++] : 0; }
    const std::vector<uint8_t>* bytes_;
    size_t pos_ = 0;
    uint32_t range_ = 0xFFFFFFFFu;
    uint32_t code_ = 0;
};

// Encodes symbols under per-symbol models; out-of-band symbols go through
// the escape bucket followed by a raw 32-bit zigzag value.
std::vector<uint8_t> range_encode(const std::vector<int32_t>& symbols,
                                  const std::vector<SymbolModel>& models);
std::vector<int32_t> range_decode(const std::vector<uint8_t>& bytes,
                                  const std::vector<SymbolModel>& models);

// Differentiable-model rate in bits: sum of -log2 bucket probabilities with
// the tail floored at the escape cost. Matches the coded length to within
// the table-quantization overhead.
double estimate_rate_bits(const std::vector<int32_t>& symbols,
                          const std::vector<SymbolModel>& models);
double estimate_rate_bits(const Mat<float>& symbols, const Mat<float>& mu, const Mat<float>& sigma);

// ---- bitstream container ----

inline constexpr uint32_t kMagic = 0x43414350u;  // "PCAC"
inline constexpr uint16_t kVersion = 1;

struct BitstreamHeader {
    bool context_enabled = true;
    uint8_t bit_depth = 10;
    uint8_t slice_count = 8;
    float lambda = 0.0f;
    uint64_t config_digest = 0;
    uint32_t point_count = 0;
    uint32_t latent_count = 0;
    uint32_t hyper_count = 0;
};

class BitstreamError : public std::runtime_error {
public:
    explicit BitstreamError(const std::string& msg) : std::runtime_error(msg) {}
};

std::vector<uint8_t> pack_bitstream(const BitstreamHeader& header, const std::vector<uint8_t>& z,
                                    const std::vector<std::vector<uint8_t>>& slices);

struct UnpackedBitstream {
    BitstreamHeader header;
    std::vector<uint8_t> z;
    std::vector<std::vector<uint8_t>> slices;
};

UnpackedBitstream unpack_bitstream(const std::vector<uint8_t>& bytes);

}  // namespace pcac::coder
