#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "pcac/sparse.hpp"
#include "testutil.hpp"

#include <algorithm>
#include <map>

using namespace pcac;
using namespace pcac::sparse;

namespace {

ConvWeights random_weights(int k, int c_in, int c_out, std::mt19937_64& rng, bool bias = false) {
    ConvWeights w;
    w.k = k;
    w.c_in = c_in;
    w.c_out = c_out;
    w.w = random_uniform<float>(k * k * k * c_in, c_out, -1.0f, 1.0f, rng);
    if (bias) w.b = random_uniform<float>(1, c_out, -1.0f, 1.0f, rng);
    return w;
}

// Reference: evaluate the full offset sum at the requested output
// coordinates straight from a coordinate lookup, one tap at a time.
Mat<float> dense_conv_oracle(const std::vector<Coord>& in_coords, const Mat<float>& in_feats,
                             int32_t in_stride, const std::vector<Coord>& out_coords,
                             const ConvWeights& w) {
    std::map<Coord, int> lookup;
    for (size_t i = 0; i < in_coords.size(); ++i) lookup[in_coords[i]] = static_cast<int>(i);
    auto offs = kernel_offsets(w.k);
    Mat<float> out(static_cast<int>(out_coords.size()), w.c_out);
    for (size_t r = 0; r < out_coords.size(); ++r) {
        for (size_t o = 0; o < offs.size(); ++o) {
            Coord tap = {out_coords[r][0] + offs[o][0] * in_stride,
                         out_coords[r][1] + offs[o][1] * in_stride,
                         out_coords[r][2] + offs[o][2] * in_stride};
            auto it = lookup.find(tap);
            if (it == lookup.end()) continue;
            for (int co = 0; co < w.c_out; ++co) {
                float acc = 0;
                for (int ci = 0; ci < w.c_in; ++ci)
                    acc += in_feats(it->second, ci) * w.w(static_cast<int>(o) * w.c_in + ci, co);
                out(static_cast<int>(r), co) += acc;
            }
        }
        if (!w.b.empty())
            for (int co = 0; co < w.c_out; ++co) out(static_cast<int>(r), co) += w.b(0, co);
    }
    return out;
}

SparseTensor random_tensor(int n, int c, int grid, std::mt19937_64& rng) {
    auto coords = testutil::random_unique_coords(n, 0, grid - 1, rng);
    Mat<float> feats =
        random_uniform<float>(static_cast<int>(coords.size()), c, -1.0f, 1.0f, rng);
    return SparseTensor(coords, std::move(feats), 1);
}

}  // namespace

TEST_CASE("coord index finds rows and reports misses") {
    CoordIndex idx({{0, 0, 0}});
    CHECK(idx.find({0, 0, 0}) == 0);
    CHECK(idx.find({1, 0, 0}) == -1);
}

TEST_CASE("coord index matches linear scan on 1000 random coords") {
    std::mt19937_64 rng(1);
    auto coords = testutil::random_unique_coords(1000, -50, 1500, rng);
    CoordIndex idx(coords);
    for (size_t i = 0; i < coords.size(); ++i)
        CHECK(idx.find(coords[i]) == static_cast<int32_t>(i));
}

TEST_CASE("coord index rejects duplicates") {
    CHECK_THROWS(CoordIndex({{1, 2, 3}, {1, 2, 3}}));
}

TEST_CASE("kernel map: single voxel has only the center pair") {
    std::vector<Coord> c = {{4, 4, 4}};
    CoordIndex idx(c);
    KernelMap m = build_kernel_map(c, idx, 1, c, 3);
    CHECK(m.pair_count() == 1);
    // center offset sits in the middle of the lexicographic enumeration
    CHECK(m.in_rows[13].size() == 1);
}

TEST_CASE("kernel map pair count matches dense enumeration on a full 2x2x2 block") {
    std::vector<Coord> c;
    for (int x = 0; x < 2; ++x)
        for (int y = 0; y < 2; ++y)
            for (int z = 0; z < 2; ++z) c.push_back({x, y, z});
    std::sort(c.begin(), c.end());
    CoordIndex idx(c);
    KernelMap m = build_kernel_map(c, idx, 1, c, 3);
    size_t expected = 0;
    for (const auto& u : c)
        for (const auto& off : kernel_offsets(3)) {
            Coord tap = {u[0] + off[0], u[1] + off[1], u[2] + off[2]};
            if (tap[0] >= 0 && tap[0] < 2 && tap[1] >= 0 && tap[1] < 2 && tap[2] >= 0 && tap[2] < 2)
                ++expected;
        }
    CHECK(expected == 64);
    CHECK(m.pair_count() == expected);
}

TEST_CASE("kernel map leaves unreachable offsets empty") {
    std::vector<Coord> c = {{0, 0, 0}, {10, 10, 10}};
    CoordIndex idx(c);
    KernelMap m = build_kernel_map(c, idx, 1, c, 3);
    for (size_t o = 0; o < m.in_rows.size(); ++o) {
        if (o == 13) {
            CHECK(m.in_rows[o].size() == 2);
        } else {
            CHECK(m.in_rows[o].empty());
        }
    }
}

TEST_CASE("sparse conv with K=1 identity kernel is the identity") {
    std::mt19937_64 rng(2);
    SparseTensor x = random_tensor(40, 4, 6, rng);
    ConvWeights w;
    w.k = 1;
    w.c_in = 4;
    w.c_out = 4;
    w.w = Mat<float>::zeros(4, 4);
    for (int i = 0; i < 4; ++i) w.w(i, i) = 1.0f;
    SparseTensor y = sparse_conv(x, w, 1);
    CHECK(y.coords == x.coords);
    CHECK(testutil::max_abs_diff(y.feats, x.feats) == 0.0);
}

TEST_CASE("sparse conv equals dense oracle on random 6^3 tensors") {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 25; ++trial) {
        int k = trial % 2 == 0 ? 3 : 1;
        SparseTensor x = random_tensor(20 + trial * 3, 3, 6, rng);
        ConvWeights w = random_weights(k, 3, 5, rng, trial % 3 == 0);
        SparseTensor y = sparse_conv(x, w, 1);
        Mat<float> want = dense_conv_oracle(x.coords, x.feats, 1, x.coords, w);
        CHECK(y.coords == x.coords);
        CHECK(testutil::max_abs_diff(y.feats, want) <= 1e-5);
    }
}

TEST_CASE("strided sparse conv equals dense oracle at downsampled outputs") {
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 10; ++trial) {
        SparseTensor x = random_tensor(60, 3, 8, rng);
        ConvWeights w = random_weights(3, 3, 4, rng);
        SparseTensor y = sparse_conv(x, w, 2);
        auto want_coords = downsample_coords(x.coords, 1);
        CHECK(y.coords == want_coords);
        CHECK(y.stride == 2);
        for (const auto& c : y.coords) {
            CHECK(c[0] % 2 == 0);
            CHECK(c[1] % 2 == 0);
            CHECK(c[2] % 2 == 0);
        }
        Mat<float> want = dense_conv_oracle(x.coords, x.feats, 1, want_coords, w);
        CHECK(testutil::max_abs_diff(y.feats, want) <= 1e-5);
    }
}

TEST_CASE("all-zero weights produce zero features with coords preserved") {
    std::mt19937_64 rng(5);
    SparseTensor x = random_tensor(30, 4, 6, rng);
    ConvWeights w;
    w.k = 3;
    w.c_in = 4;
    w.c_out = 4;
    w.w = Mat<float>::zeros(27 * 4, 4);
    SparseTensor y = sparse_conv(x, w, 1);
    CHECK(y.coords == x.coords);
    for (size_t i = 0; i < y.feats.size(); ++i) CHECK(y.feats.data()[i] == 0.0f);
}

TEST_CASE("sparse conv is linear in its input") {
    std::mt19937_64 rng(6);
    SparseTensor a = random_tensor(50, 3, 6, rng);
    SparseTensor b(a.coords, random_uniform<float>(a.rows(), 3, -1.0f, 1.0f, rng), 1);
    ConvWeights w = random_weights(3, 3, 4, rng);
    const float alpha = 0.7f, beta = -1.3f;
    Mat<float> mix(a.rows(), 3);
    for (size_t i = 0; i < mix.size(); ++i)
        mix.data()[i] = alpha * a.feats.data()[i] + beta * b.feats.data()[i];
    SparseTensor lhs = sparse_conv(SparseTensor(a.coords, mix, 1), w, 1);
    SparseTensor ya = sparse_conv(a, w, 1);
    SparseTensor yb = sparse_conv(b, w, 1);
    Mat<float> rhs(ya.rows(), 4);
    for (size_t i = 0; i < rhs.size(); ++i)
        rhs.data()[i] = alpha * ya.feats.data()[i] + beta * yb.feats.data()[i];
    CHECK(testutil::max_abs_diff(lhs.feats, rhs) <= 1e-5);
}

TEST_CASE("conv rejects mismatched shapes") {
    std::mt19937_64 rng(7);
    SparseTensor x = random_tensor(10, 3, 6, rng);
    ConvWeights w = random_weights(3, 4, 4, rng);  // wrong c_in
    CHECK_THROWS(sparse_conv(x, w, 1));
    ConvWeights w2 = random_weights(3, 3, 4, rng);
    CHECK_THROWS(sparse_conv(x, w2, 4));  // unsupported stride jump
}

TEST_CASE("conv transpose realizes the exact matrix transpose") {
    std::mt19937_64 rng(8);
    SparseTensor x = random_tensor(40, 2, 6, rng);  // fine tensor, stride 1
    ConvWeights w = random_weights(3, 2, 3, rng);
    SparseTensor y = sparse_conv(x, w, 2);  // coarse output

    const int n_in = x.rows() * 2;
    const int n_out = y.rows() * 3;
    // explicit matrix of the forward map by pushing basis vectors through
    Mat<float> a(n_out, n_in);
    for (int col = 0; col < n_in; ++col) {
        Mat<float> basis(x.rows(), 2);
        basis.data()[col] = 1.0f;
        SparseTensor out = sparse_conv(SparseTensor(x.coords, basis, 1), w, 2);
        for (int row = 0; row < n_out; ++row) a(row, col) = out.feats.data()[row];
    }

    // per-offset transposed weights realize A^T
    ConvWeights wt;
    wt.k = 3;
    wt.c_in = 3;
    wt.c_out = 2;
    wt.w = Mat<float>(27 * 3, 2);
    for (int o = 0; o < 27; ++o)
        for (int ci = 0; ci < 2; ++ci)
            for (int co = 0; co < 3; ++co) wt.w(o * 3 + co, ci) = w.w(o * 2 + ci, co);

    Mat<float> g = random_uniform<float>(y.rows(), 3, -1.0f, 1.0f, rng);
    SparseTensor back = sparse_conv_transpose(SparseTensor(y.coords, g, 2), wt, x.coords, 1);
    REQUIRE(back.rows() == x.rows());

    Mat<float> want(x.rows(), 2);
    for (int col = 0; col < n_in; ++col) {
        float acc = 0;
        for (int row = 0; row < n_out; ++row) acc += a(row, col) * g.data()[row];
        want.data()[col] = acc;
    }
    CHECK(testutil::max_abs_diff(back.feats, want) <= 1e-5);
}

TEST_CASE("conv transpose onto empty target is empty") {
    std::mt19937_64 rng(9);
    SparseTensor x = random_tensor(10, 2, 6, rng);
    SparseTensor y = sparse_conv(x, random_weights(3, 2, 2, rng), 2);
    ConvWeights wt = random_weights(3, 2, 2, rng);
    SparseTensor out = sparse_conv_transpose(y, wt, {}, 1);
    CHECK(out.rows() == 0);
}

TEST_CASE("conv transpose with K=1 projects onto coarse-occupied targets") {
    std::vector<Coord> coarse = {{0, 0, 0}, {2, 2, 2}};
    Mat<float> f(2, 1);
    f(0, 0) = 5.0f;
    f(1, 0) = 7.0f;
    SparseTensor x(coarse, f, 2);
    ConvWeights w;
    w.k = 1;
    w.c_in = 1;
    w.c_out = 1;
    w.w = Mat<float>::full(1, 1, 2.0f);
    std::vector<Coord> fine = {{0, 0, 0}, {1, 1, 1}, {2, 2, 2}};
    SparseTensor out = sparse_conv_transpose(x, w, fine, 1);
    CHECK(out.feats(0, 0) == 10.0f);
    CHECK(out.feats(1, 0) == 0.0f);  // not occupied at the coarse stride
    CHECK(out.feats(2, 0) == 14.0f);
}

TEST_CASE("pooling") {
    std::mt19937_64 rng(10);
    SUBCASE("single voxel spatial pool is its row") {
        SparseTensor x({{0, 0, 0}}, random_uniform<float>(1, 8, -1.0f, 1.0f, rng), 1);
        Mat<float> p = spatial_avg_pool(x);
        CHECK(testutil::max_abs_diff(p, x.feats) == 0.0);
    }
    SUBCASE("opposite rows cancel") {
        Mat<float> f(2, 4);
        for (int c = 0; c < 4; ++c) {
            f(0, c) = static_cast<float>(c + 1);
            f(1, c) = -static_cast<float>(c + 1);
        }
        SparseTensor x({{0, 0, 0}, {1, 1, 1}}, f, 1);
        Mat<float> p = spatial_avg_pool(x);
        for (int c = 0; c < 4; ++c) CHECK(p(0, c) == 0.0f);
    }
    SUBCASE("channel pool of constant rows") {
        Mat<float> f = Mat<float>::full(3, 5, 1.0f);
        SparseTensor x({{0, 0, 0}, {1, 1, 1}, {2, 2, 2}}, f, 1);
        Mat<float> p = channel_avg_pool(x);
        REQUIRE(p.rows() == 3);
        for (int r = 0; r < 3; ++r) CHECK(p(r, 0) == 1.0f);
    }
    SUBCASE("random pools match the plain mean") {
        SparseTensor x = random_tensor(100, 8, 10, rng);
        Mat<float> sp = spatial_avg_pool(x);
        Mat<float> cp = channel_avg_pool(x);
        for (int c = 0; c < 8; ++c) {
            double want = 0;
            for (int r = 0; r < x.rows(); ++r) want += x.feats(r, c);
            want /= x.rows();
            CHECK(std::abs(sp(0, c) - want) <= 1e-6);
        }
        for (int r = 0; r < x.rows(); ++r) {
            double want = 0;
            for (int c = 0; c < 8; ++c) want += x.feats(r, c);
            want /= 8;
            CHECK(std::abs(cp(r, 0) - want) <= 1e-6);
        }
    }
    SUBCASE("empty tensor pools are errors") {
        SparseTensor x;
        CHECK_THROWS(spatial_avg_pool(x));
        CHECK_THROWS(channel_avg_pool(x));
    }
}

TEST_CASE("repeated runs are bit-identical") {
    std::mt19937_64 rng(11);
    SparseTensor x = random_tensor(80, 4, 8, rng);
    ConvWeights w = random_weights(3, 4, 6, rng, true);
    SparseTensor y1 = sparse_conv(x, w, 2);
    SparseTensor y2 = sparse_conv(x, w, 2);
    CHECK(y1.coords == y2.coords);
    for (size_t i = 0; i < y1.feats.size(); ++i)
        CHECK(y1.feats.data()[i] == y2.feats.data()[i]);
}
