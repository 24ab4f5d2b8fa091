#include "pcac/coder.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

namespace pcac::coder {

namespace {
constexpr uint32_t kTopValue = 1u << 24;
}

void RangeEncoder::shift_low() {
    if (static_cast<uint32_t>(low_) < 0xFF000000u || (low_ >> 32) != 0) {
        uint8_t carry = static_cast<uint8_t>(low_ >> 32);
        out_.push_back(static_cast<uint8_t>(cache_ + carry));
        while (--cache_size_ != 0) out_.push_back(static_cast<uint8_t>(0xFF + carry));
        cache_ = static_cast<uint8_t>(low_ >> 24);
    }
    ++cache_size_;
    low_ = (low_ & 0x00FFFFFFu) << 8;
}

void RangeEncoder::encode(uint32_t start, uint32_t size, uint32_t total) {
    range_ /= total;
    low_ += static_cast<uint64_t>(start) * range_;
    range_ *= size;
    while (range_ < kTopValue) {
        range_ <<= 8;
        shift_low();
    }
}

std::vector<uint8_t> RangeEncoder::finish() {
    for (int i = 0; i < 5; ++i) shift_low();
    return std::move(out_);
}

RangeDecoder::RangeDecoder(const std::vector<uint8_t>& bytes) : bytes_(&bytes) {
    for (int i = 0; i < 5; ++i) code_ = (code_ << 8) | next_byte();
}

uint32_t RangeDecoder::threshold(uint32_t total) {
    range_ /= total;
    uint32_t v = code_ / range_;
    return v >= total ? total - 1 : v;
}

void RangeDecoder::consume(uint32_t start, uint32_t size) {
    code_ -= start * range_;
    range_ *= size;
    while (range_ < kTopValue) {
        code_ = (code_ << 8) | next_byte();
        range_ <<= 8;
    }
}

uint8_t RangeDecoder::decode_raw_byte() {
    uint32_t b = threshold(256);
    consume(b, 1);
    return static_cast<uint8_t>(b);
}

double discretize(double mu, double sigma, int32_t k) { return gauss::bucket_prob(mu, sigma, k); }

CdfTable build_cdf(float mu_f, float sigma_f) {
    // corrupt streams can push non-finite values through a decoder's
    // context transforms; fall back to a neutral model rather than
    // hitting undefined casts below
    double mu = std::isfinite(mu_f) ? mu_f : 0.0;
    double sigma = std::isfinite(sigma_f) ? sigma_f : 1.0;
    sigma = std::min(std::max(sigma, static_cast<double>(kSigmaMin)), 65536.0);
    const double w = std::max(2.0, 12.0 * sigma);
    auto clamp_sym = [](double v) {
        if (v < -kSupportMax) return static_cast<int32_t>(-kSupportMax);
        if (v > kSupportMax) return static_cast<int32_t>(kSupportMax);
        return static_cast<int32_t>(v);
    };
    CdfTable t;
    t.lo = clamp_sym(std::floor(mu - w));
    t.hi = clamp_sym(std::ceil(mu + w));
    const int n = t.hi - t.lo + 1;

    std::vector<double> weight(n + 1);
    double in_band = 0.0;
    for (int j = 0; j < n; ++j) {
        double p = gauss::bucket_prob(mu, sigma, t.lo + j);
        weight[j] = std::max(p, 0.0);
        in_band += weight[j];
    }
    weight[n] = std::max(1.0 - in_band, 1e-12);  // escape
    const double wsum = in_band + weight[n];

    // items = n buckets + escape; each gets a floor of 1, the remainder is
    // apportioned by largest fractional part (ties to the lower index).
    const int items = n + 1;
    const uint32_t spare = kProbTotal - static_cast<uint32_t>(items);
    std::vector<uint32_t> freq(items);
    std::vector<std::pair<double, int>> rem(items);
    uint32_t assigned = 0;
    for (int j = 0; j < items; ++j) {
        double exact = weight[j] * spare / wsum;
        uint32_t f = static_cast<uint32_t>(exact);
        freq[j] = 1 + f;
        assigned += freq[j];
        rem[j] = {-(exact - f), j};
    }
    uint32_t leftover = kProbTotal - assigned;
    std::sort(rem.begin(), rem.end());
    for (uint32_t i = 0; i < leftover; ++i) freq[rem[i].second] += 1;

    t.cum.resize(items + 1);
    t.cum[0] = 0;
    for (int j = 0; j < items; ++j) t.cum[j + 1] = t.cum[j] + freq[j];
    return t;
}

namespace {
uint32_t zigzag(int32_t v) {
    return (static_cast<uint32_t>(v) << 1) ^ static_cast<uint32_t>(v >> 31);
}
int32_t unzigzag(uint32_t u) { return static_cast<int32_t>(u >> 1) ^ -static_cast<int32_t>(u & 1); }
}  // namespace

std::vector<uint8_t> range_encode(const std::vector<int32_t>& symbols,
                                  const std::vector<SymbolModel>& models) {
    if (symbols.size() != models.size())
        throw std::invalid_argument("range_encode: model count must equal symbol count");
    RangeEncoder enc;
    for (size_t i = 0; i < symbols.size(); ++i) {
        CdfTable t = build_cdf(models[i].mu, models[i].sigma);
        int32_t k = symbols[i];
        if (k >= t.lo && k <= t.hi) {
            int b = k - t.lo;
            enc.encode(t.cum[b], t.freq(b), kProbTotal);
        } else {
            int b = t.escape_bucket();
            enc.encode(t.cum[b], t.freq(b), kProbTotal);
            uint32_t u = zigzag(k);
            for (int s = 0; s < 4; ++s) enc.encode_raw_byte(static_cast<uint8_t>(u >> (8 * s)));
        }
    }
    return enc.finish();
}

std::vector<int32_t> range_decode(const std::vector<uint8_t>& bytes,
                                  const std::vector<SymbolModel>& models) {
    RangeDecoder dec(bytes);
    std::vector<int32_t> out(models.size());
    for (size_t i = 0; i < models.size(); ++i) {
        CdfTable t = build_cdf(models[i].mu, models[i].sigma);
        uint32_t v = dec.threshold(kProbTotal);
        // first bucket with cum[b+1] > v
        int b = static_cast<int>(std::upper_bound(t.cum.begin() + 1, t.cum.end(), v) -
                                 (t.cum.begin() + 1));
        dec.consume(t.cum[b], t.freq(b));
        if (b == t.escape_bucket()) {
            uint32_t u = 0;
            for (int s = 0; s < 4; ++s) u |= static_cast<uint32_t>(dec.decode_raw_byte()) << (8 * s);
            out[i] = unzigzag(u);
        } else {
            out[i] = t.lo + b;
        }
    }
    return out;
}

double estimate_rate_bits(const std::vector<int32_t>& symbols,
                          const std::vector<SymbolModel>& models) {
    if (symbols.size() != models.size())
        throw std::invalid_argument("estimate_rate_bits: model count must equal symbol count");
    double bits = 0.0;
    for (size_t i = 0; i < symbols.size(); ++i)
        bits += gauss::bucket_bits(models[i].mu, models[i].sigma, symbols[i]);
    return bits;
}

double estimate_rate_bits(const Mat<float>& symbols, const Mat<float>& mu, const Mat<float>& sigma) {
    if (!symbols.same_shape(mu) || !symbols.same_shape(sigma))
        throw std::invalid_argument("estimate_rate_bits: shape mismatch");
    double bits = 0.0;
    for (size_t i = 0; i < symbols.size(); ++i)
        bits += gauss::bucket_bits(mu.data()[i], sigma.data()[i], symbols.data()[i]);
    return bits;
}

// ---- container ----

namespace {

void put_u16(std::vector<uint8_t>& v, uint16_t x) {
    for (int i = 0; i < 2; ++i) v.push_back(static_cast<uint8_t>(x >> (8 * i)));
}
void put_u32(std::vector<uint8_t>& v, uint32_t x) {
    for (int i = 0; i < 4; ++i) v.push_back(static_cast<uint8_t>(x >> (8 * i)));
}
void put_u64(std::vector<uint8_t>& v, uint64_t x) {
    for (int i = 0; i < 8; ++i) v.push_back(static_cast<uint8_t>(x >> (8 * i)));
}
void put_f32(std::vector<uint8_t>& v, float x) {
    uint32_t u;
    std::memcpy(&u, &x, 4);
    put_u32(v, u);
}

struct Reader {
    const std::vector<uint8_t>* bytes;
    size_t pos = 0;
    uint8_t u8() {
        if (pos + 1 > bytes->size()) throw BitstreamError("truncated bitstream");
        return (*bytes)[pos++];
    }
    uint16_t u16() {
        uint16_t x = 0;
        for (int i = 0; i < 2; ++i) x |= static_cast<uint16_t>(u8()) << (8 * i);
        return x;
    }
    uint32_t u32() {
        uint32_t x = 0;
        for (int i = 0; i < 4; ++i) x |= static_cast<uint32_t>(u8()) << (8 * i);
        return x;
    }
    uint64_t u64() {
        uint64_t x = 0;
        for (int i = 0; i < 8; ++i) x |= static_cast<uint64_t>(u8()) << (8 * i);
        return x;
    }
    float f32() {
        uint32_t u = u32();
        float x;
        std::memcpy(&x, &u, 4);
        return x;
    }
    std::vector<uint8_t> blob(size_t n) {
        if (pos + n > bytes->size()) throw BitstreamError("truncated bitstream");
        std::vector<uint8_t> out(bytes->begin() + pos, bytes->begin() + pos + n);
        pos += n;
        return out;
    }
};

}  // namespace

std::vector<uint8_t> pack_bitstream(const BitstreamHeader& header, const std::vector<uint8_t>& z,
                                    const std::vector<std::vector<uint8_t>>& slices) {
    if (slices.empty()) throw BitstreamError("at least one slice required");
    if (slices.size() != header.slice_count) throw BitstreamError("slice count mismatch");
    std::vector<uint8_t> out;
    put_u32(out, kMagic);
    put_u16(out, kVersion);
    out.push_back(header.context_enabled ? 1 : 0);
    out.push_back(header.bit_depth);
    out.push_back(header.slice_count);
    put_f32(out, header.lambda);
    put_u64(out, header.config_digest);
    put_u32(out, header.point_count);
    put_u32(out, header.latent_count);
    put_u32(out, header.hyper_count);
    put_u32(out, static_cast<uint32_t>(z.size()));
    for (const auto& s : slices) put_u32(out, static_cast<uint32_t>(s.size()));
    out.insert(out.end(), z.begin(), z.end());
    for (const auto& s : slices) out.insert(out.end(), s.begin(), s.end());
    return out;
}

UnpackedBitstream unpack_bitstream(const std::vector<uint8_t>& bytes) {
    Reader r{&bytes};
    if (r.u32() != kMagic) throw BitstreamError("magic mismatch");
    uint16_t version = r.u16();
    if (version != kVersion)
        throw BitstreamError("unsupported bitstream version " + std::to_string(version));
    UnpackedBitstream u;
    u.header.context_enabled = r.u8() != 0;
    u.header.bit_depth = r.u8();
    u.header.slice_count = r.u8();
    if (u.header.slice_count < 1) throw BitstreamError("slice count must be >= 1");
    u.header.lambda = r.f32();
    u.header.config_digest = r.u64();
    u.header.point_count = r.u32();
    u.header.latent_count = r.u32();
    u.header.hyper_count = r.u32();
    uint32_t z_len = r.u32();
    std::vector<uint32_t> slice_len(u.header.slice_count);
    for (auto& s : slice_len) s = r.u32();
    u.z = r.blob(z_len);
    for (uint32_t s : slice_len) u.slices.push_back(r.blob(s));
    if (r.pos != bytes.size()) throw BitstreamError("trailing bytes after payload");
    return u;
}

}  // namespace pcac::coder
