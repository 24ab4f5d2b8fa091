#include "pcac/sparse.hpp"

#include <algorithm>
#include <stdexcept>

namespace pcac::sparse {

CoordIndex::CoordIndex(const std::vector<Coord>& coords) {
    map_.reserve(coords.size() * 2);
    for (size_t i = 0; i < coords.size(); ++i) {
        auto [it, inserted] = map_.emplace(key(coords[i]), static_cast<int32_t>(i));
        if (!inserted) throw std::invalid_argument("CoordIndex: duplicate coordinate");
    }
}

SparseTensor::SparseTensor(std::vector<Coord> c, Mat<float> f, int32_t s)
    : coords(std::move(c)), feats(std::move(f)), stride(s), index(coords) {
    if (static_cast<int>(coords.size()) != feats.rows())
        throw std::invalid_argument("SparseTensor: coords/feats row mismatch");
    for (const auto& u : coords)
        for (int a = 0; a < 3; ++a)
            if (u[a] % stride != 0) throw std::invalid_argument("SparseTensor: coord not divisible by stride");
}

std::vector<Coord> kernel_offsets(int k) {
    const int h = (k - 1) / 2;
    std::vector<Coord> offs;
    offs.reserve(static_cast<size_t>(k) * k * k);
    for (int x = -h; x <= h; ++x)
        for (int y = -h; y <= h; ++y)
            for (int z = -h; z <= h; ++z) offs.push_back({x, y, z});
    return offs;
}

KernelMap build_kernel_map(const std::vector<Coord>& in_coords, const CoordIndex& index,
                           int32_t in_stride, const std::vector<Coord>& out_coords, int k) {
    (void)in_coords;
    if (k < 1 || k % 2 == 0) throw std::invalid_argument("kernel size must be odd and positive");
    auto offs = kernel_offsets(k);
    KernelMap map;
    map.k = k;
    map.in_rows.resize(offs.size());
    map.out_rows.resize(offs.size());
    for (size_t o = 0; o < offs.size(); ++o) {
        for (size_t r = 0; r < out_coords.size(); ++r) {
            Coord tap = {out_coords[r][0] + offs[o][0] * in_stride,
                         out_coords[r][1] + offs[o][1] * in_stride,
                         out_coords[r][2] + offs[o][2] * in_stride};
            int32_t row = index.find(tap);
            if (row >= 0) {
                map.in_rows[o].push_back(row);
                map.out_rows[o].push_back(static_cast<int32_t>(r));
            }
        }
    }
    return map;
}

std::vector<Coord> downsample_coords(const std::vector<Coord>& coords, int32_t stride) {
    const int32_t s2 = stride * 2;
    std::vector<Coord> out;
    out.reserve(coords.size());
    auto floor_div = [](int32_t v, int32_t d) {
        return v >= 0 ? v / d : -((-v + d - 1) / d);
    };
    for (const auto& u : coords)
        out.push_back({floor_div(u[0], s2) * s2, floor_div(u[1], s2) * s2, floor_div(u[2], s2) * s2});
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

SparseTensor sparse_conv(const SparseTensor& input, const ConvWeights& w, int32_t out_stride) {
    if (w.c_in != input.channels()) throw std::invalid_argument("sparse_conv: channel mismatch");
    if (w.w.rows() != w.k * w.k * w.k * w.c_in || w.w.cols() != w.c_out)
        throw std::invalid_argument("sparse_conv: weight shape mismatch");
    std::vector<Coord> out_coords;
    if (out_stride == input.stride) {
        out_coords = input.coords;
    } else if (out_stride == input.stride * 2) {
        out_coords = downsample_coords(input.coords, input.stride);
    } else {
        throw std::invalid_argument("sparse_conv: out_stride must be stride or 2*stride");
    }
    KernelMap map = build_kernel_map(input.coords, input.index, input.stride, out_coords, w.k);
    Mat<float> out =
        conv_apply(input.feats, w.w, w.b, map, static_cast<int>(out_coords.size()));
    return SparseTensor(std::move(out_coords), std::move(out), out_stride);
}

KernelMap build_transpose_map(const CoordIndex& coarse_index, const std::vector<Coord>& targets,
                              int32_t target_stride, int k) {
    auto offs = kernel_offsets(k);
    KernelMap map;
    map.k = k;
    map.in_rows.resize(offs.size());
    map.out_rows.resize(offs.size());
    for (size_t o = 0; o < offs.size(); ++o) {
        for (size_t r = 0; r < targets.size(); ++r) {
            Coord src = {targets[r][0] - offs[o][0] * target_stride,
                         targets[r][1] - offs[o][1] * target_stride,
                         targets[r][2] - offs[o][2] * target_stride};
            int32_t row = coarse_index.find(src);
            if (row >= 0) {
                map.in_rows[o].push_back(row);
                map.out_rows[o].push_back(static_cast<int32_t>(r));
            }
        }
    }
    return map;
}

SparseTensor sparse_conv_transpose(const SparseTensor& input, const ConvWeights& w,
                                   const std::vector<Coord>& target_coords, int32_t target_stride) {
    if (w.c_in != input.channels())
        throw std::invalid_argument("sparse_conv_transpose: channel mismatch");
    if (w.w.rows() != w.k * w.k * w.k * w.c_in || w.w.cols() != w.c_out)
        throw std::invalid_argument("sparse_conv_transpose: weight shape mismatch");
    if (target_stride * 2 != input.stride)
        throw std::invalid_argument("sparse_conv_transpose: target stride must halve input stride");
    KernelMap map = build_transpose_map(input.index, target_coords, target_stride, w.k);
    Mat<float> out =
        conv_apply(input.feats, w.w, w.b, map, static_cast<int>(target_coords.size()));
    return SparseTensor(target_coords, std::move(out), target_stride);
}

Mat<float> spatial_avg_pool(const SparseTensor& input) {
    if (input.rows() == 0) throw std::invalid_argument("spatial_avg_pool: empty tensor");
    Mat<float> out(1, input.channels());
    for (int r = 0; r < input.rows(); ++r)
        for (int c = 0; c < input.channels(); ++c) out(0, c) += input.feats(r, c);
    for (int c = 0; c < input.channels(); ++c) out(0, c) /= static_cast<float>(input.rows());
    return out;
}

Mat<float> channel_avg_pool(const SparseTensor& input) {
    if (input.rows() == 0) throw std::invalid_argument("channel_avg_pool: empty tensor");
    Mat<float> out(input.rows(), 1);
    for (int r = 0; r < input.rows(); ++r) {
        float s = 0;
        for (int c = 0; c < input.channels(); ++c) s += input.feats(r, c);
        out(r, 0) = s / static_cast<float>(input.channels());
    }
    return out;
}

}  // namespace pcac::sparse
