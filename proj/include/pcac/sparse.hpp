#pragma once

#include "pcac/mat.hpp"

#include <array>
#include <cstdint>
#include <unordered_map>
#include <vector>

namespace pcac::sparse {

using Coord = std::array<int32_t, 3>;

// Exact coordinate -> row lookup. Keys pack each component into 21 bits
// with a bias, so lookups slightly outside the voxel domain (kernel taps)
// still resolve.
class CoordIndex {
public:
    CoordIndex() = default;
    explicit CoordIndex(const std::vector<Coord>& coords);

    // -1 when absent
    int32_t find(const Coord& c) const {
        auto it = map_.find(key(c));
        return it == map_.end() ? -1 : it->second;
    }
    size_t size() const { return map_.size(); }

    static uint64_t key(const Coord& c) {
        constexpr int64_t kBias = 1 << 20;
        return (static_cast<uint64_t>(c[0] + kBias) << 42) |
               (static_cast<uint64_t>(c[1] + kBias) << 21) |
               static_cast<uint64_t>(c[2] + kBias);
    }

private:
    std::unordered_map<uint64_t, int32_t> map_;
};

// Coordinate list + feature matrix at a given power-of-two stride.
struct SparseTensor {
    std::vector<Coord> coords;
    Mat<float> feats;
    int32_t stride = 1;
    CoordIndex index;

    SparseTensor() = default;
    SparseTensor(std::vector<Coord> c, Mat<float> f, int32_t s);

    int rows() const { return static_cast<int>(coords.size()); }
    int channels() const { return feats.cols(); }
};

// Offsets i of a K^3 kernel in fixed lexicographic order over
// {-(K-1)/2 .. (K-1)/2}^3; this order is the weight-tensor layout.
std::vector<Coord> kernel_offsets(int k);

// Gather/scatter pairs per kernel offset. Within one offset both the input
// and output rows of the pair list are unique.
struct KernelMap {
    int k = 0;
    // per offset: parallel arrays of (input row, output row)
    std::vector<std::vector<int32_t>> in_rows;
    std::vector<std::vector<int32_t>> out_rows;

    size_t pair_count() const {
        size_t n = 0;
        for (const auto& v : in_rows) n += v.size();
        return n;
    }
};

// Taps are out_coord + offset * in_stride, kept when occupied in `index`.
KernelMap build_kernel_map(const std::vector<Coord>& in_coords, const CoordIndex& index,
                           int32_t in_stride, const std::vector<Coord>& out_coords, int k);

// Unique floor-quantized coordinates at twice the stride, sorted.
std::vector<Coord> downsample_coords(const std::vector<Coord>& coords, int32_t stride);

// Convolution weights: rows = offset * C_in + c_in, cols = C_out. The
// optional bias is 1 x C_out.
struct ConvWeights {
    Mat<float> w;
    Mat<float> b;  // empty for no bias
    int k = 1;
    int c_in = 0;
    int c_out = 0;
};

// out[u] = sum_i W_i * in[u + i*stride] over existing pairs; offsets
// accumulate in fixed lexicographic order per output row. out_stride must
// be stride (coords preserved, order preserved) or 2*stride (coords
// floor-downsampled, sorted).
SparseTensor sparse_conv(const SparseTensor& input, const ConvWeights& w, int32_t out_stride);

// Adjoint-structured upsampling onto explicit target coordinates at
// target_stride = input.stride / 2: out[v] = sum_i W_i^rows * in[v - i*target_stride].
// With w.w per-offset-transposed this is exactly the matrix transpose of
// sparse_conv from targets to input.
SparseTensor sparse_conv_transpose(const SparseTensor& input, const ConvWeights& w,
                                   const std::vector<Coord>& target_coords, int32_t target_stride);

// Pair map for the transposed convolution: source taps at v - i*target_stride.
KernelMap build_transpose_map(const CoordIndex& coarse_index, const std::vector<Coord>& targets,
                              int32_t target_stride, int k);

// Column means (1 x C).
Mat<float> spatial_avg_pool(const SparseTensor& input);
// Row means (N x 1).
Mat<float> channel_avg_pool(const SparseTensor& input);

// Low-level kernels shared with the autodiff wrappers. All of them keep a
// fixed per-output accumulation order.
template <typename T>
Mat<T> conv_apply(const Mat<T>& in_feats, const Mat<T>& w, const Mat<T>& bias, const KernelMap& map,
                  int out_count) {
    const int c_in = in_feats.cols();
    const int c_out = w.cols();
    Mat<T> out(out_count, c_out);
    if (!bias.empty()) {
        for (int r = 0; r < out_count; ++r)
            std::memcpy(out.row(r), bias.row(0), sizeof(T) * c_out);
    }
    const int n_off = static_cast<int>(map.in_rows.size());
    for (int o = 0; o < n_off; ++o) {
        if (map.in_rows[o].empty()) continue;
        Mat<T> gathered = gather_rows(in_feats, map.in_rows[o]);
        Mat<T> contrib(gathered.rows(), c_out);
        contrib.map().noalias() =
            gathered.map() * w.map().block(o * c_in, 0, c_in, c_out);
        scatter_add_rows(out, contrib, map.out_rows[o]);
    }
    return out;
}

// dIn += sum over pairs of dOut * W_o^T ; dW_o += gathered_in^T * gathered_dout.
template <typename T>
void conv_backward(const Mat<T>& in_feats, const Mat<T>& w, const KernelMap& map,
                   const Mat<T>& d_out, Mat<T>* d_in, Mat<T>* d_w, Mat<T>* d_bias) {
    const int c_in = in_feats.cols();
    const int c_out = w.cols();
    const int n_off = static_cast<int>(map.in_rows.size());
    for (int o = 0; o < n_off; ++o) {
        if (map.in_rows[o].empty()) continue;
        Mat<T> d_scattered = gather_rows(d_out, map.out_rows[o]);
        if (d_w) {
            Mat<T> gathered = gather_rows(in_feats, map.in_rows[o]);
            auto block = d_w->map().block(o * c_in, 0, c_in, c_out);
            block.noalias() += gathered.map().transpose() * d_scattered.map();
        }
        if (d_in) {
            Mat<T> d_gathered(d_scattered.rows(), c_in);
            d_gathered.map().noalias() =
                d_scattered.map() * w.map().block(o * c_in, 0, c_in, c_out).transpose();
            scatter_add_rows(*d_in, d_gathered, map.in_rows[o]);
        }
    }
    if (d_bias) {
        for (int r = 0; r < d_out.rows(); ++r) {
            const T* src = d_out.row(r);
            T* dst = d_bias->row(0);
            for (int c = 0; c < c_out; ++c) dst[c] += src[c];
        }
    }
}

}  // namespace pcac::sparse
