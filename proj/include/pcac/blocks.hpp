#pragma once

#include "pcac/autodiff.hpp"
#include "pcac/sparse.hpp"

#include <map>
#include <string>
#include <vector>

namespace pcac::blocks {

using ad::NodeId;
using ad::Tape;
using sparse::Coord;

// Voxels grouped by floor(coord / (stride * side)); group keys ascend
// lexicographically and rows keep tensor order inside a group.
inline std::vector<std::vector<int32_t>> window_partition(const std::vector<Coord>& coords,
                                                          int32_t stride, int side) {
    if (side < 1) throw std::invalid_argument("window_partition: side must be >= 1");
    const int64_t cell = static_cast<int64_t>(stride) * side;
    auto floor_div = [](int64_t v, int64_t d) { return v >= 0 ? v / d : -((-v + d - 1) / d); };
    std::map<Coord, std::vector<int32_t>> groups;
    for (size_t i = 0; i < coords.size(); ++i) {
        Coord key = {static_cast<int32_t>(floor_div(coords[i][0], cell)),
                     static_cast<int32_t>(floor_div(coords[i][1], cell)),
                     static_cast<int32_t>(floor_div(coords[i][2], cell))};
        groups[key].push_back(static_cast<int32_t>(i));
    }
    std::vector<std::vector<int32_t>> out;
    out.reserve(groups.size());
    for (auto& [k, rows] : groups) out.push_back(std::move(rows));
    return out;
}

// Parameter bundles, generic over storage: Mat<T> when holding values,
// NodeId once uploaded to a tape.
template <typename S>
struct DenseP {
    S w{};
    S b{};
};

template <typename S>
struct ConvP {
    S w{};
    S b{};
    int k = 3;
    int c_in = 0;
    int c_out = 0;
};

template <typename S>
struct AttnP {
    S wq{}, wk{}, wv{}, wo{};
    int heads = 4;
};

template <typename S>
struct ResP {
    ConvP<S> c1, c2;
};

template <typename S>
struct GlobP {
    DenseP<S> pre, post;
};

template <typename S>
struct TscmP {
    DenseP<S> split1;
    AttnP<S> att;
    ResP<S> res1;
    DenseP<S> fuse1;
    GlobP<S> glob;
    ResP<S> res2;
    DenseP<S> fuse2;
};

// concat -> 1x1 conv -> TSCM -> 1x1 conv
template <typename S>
struct CtxTransformP {
    DenseP<S> in;
    TscmP<S> tscm;
    DenseP<S> out;
};

// Field walkers; registration order is the on-disk manifest order.
template <typename S, typename F>
void visit(DenseP<S>& p, const std::string& pre, F&& f) {
    f(pre + ".w", p.w);
    f(pre + ".b", p.b);
}
template <typename S, typename F>
void visit(ConvP<S>& p, const std::string& pre, F&& f) {
    f(pre + ".w", p.w);
    f(pre + ".b", p.b);
}
template <typename S, typename F>
void visit(AttnP<S>& p, const std::string& pre, F&& f) {
    f(pre + ".wq", p.wq);
    f(pre + ".wk", p.wk);
    f(pre + ".wv", p.wv);
    f(pre + ".wo", p.wo);
}
template <typename S, typename F>
void visit(ResP<S>& p, const std::string& pre, F&& f) {
    visit(p.c1, pre + ".c1", f);
    visit(p.c2, pre + ".c2", f);
}
template <typename S, typename F>
void visit(GlobP<S>& p, const std::string& pre, F&& f) {
    visit(p.pre, pre + ".pre", f);
    visit(p.post, pre + ".post", f);
}
template <typename S, typename F>
void visit(TscmP<S>& p, const std::string& pre, F&& f) {
    visit(p.split1, pre + ".split1", f);
    visit(p.att, pre + ".att", f);
    visit(p.res1, pre + ".res1", f);
    visit(p.fuse1, pre + ".fuse1", f);
    visit(p.glob, pre + ".glob", f);
    visit(p.res2, pre + ".res2", f);
    visit(p.fuse2, pre + ".fuse2", f);
}
template <typename S, typename F>
void visit(CtxTransformP<S>& p, const std::string& pre, F&& f) {
    visit(p.in, pre + ".in", f);
    visit(p.tscm, pre + ".tscm", f);
    visit(p.out, pre + ".out", f);
}

// Geometry-derived context for one stride level. Everything here is a pure
// function of coordinates and must outlive any tape using it.
struct LevelCtx {
    int rows = 0;
    int32_t stride = 1;
    const sparse::KernelMap* same3 = nullptr;
    std::vector<ad::IndexVec> windows;
};

inline LevelCtx make_level_ctx(const std::vector<Coord>& coords, int32_t stride,
                               const sparse::KernelMap* same3, int window_side) {
    LevelCtx ctx;
    ctx.rows = static_cast<int>(coords.size());
    ctx.stride = stride;
    ctx.same3 = same3;
    for (auto& w : window_partition(coords, stride, window_side))
        ctx.windows.push_back(ad::make_index(std::move(w)));
    return ctx;
}

// ---- constructors and init ----

template <typename T>
DenseP<Mat<T>> make_dense(int c_in, int c_out, std::mt19937_64& rng, double gain = 1.0) {
    DenseP<Mat<T>> p;
    p.w = random_normal<T>(c_in, c_out, static_cast<T>(gain * std::sqrt(1.0 / c_in)), rng);
    p.b = Mat<T>::zeros(1, c_out);
    return p;
}

template <typename T>
ConvP<Mat<T>> make_conv(int k, int c_in, int c_out, std::mt19937_64& rng, double gain = 1.0) {
    ConvP<Mat<T>> p;
    p.k = k;
    p.c_in = c_in;
    p.c_out = c_out;
    const int fan_in = k * k * k * c_in;
    p.w = random_normal<T>(fan_in, c_out, static_cast<T>(gain * std::sqrt(1.0 / fan_in)), rng);
    p.b = Mat<T>::zeros(1, c_out);
    return p;
}

template <typename T>
AttnP<Mat<T>> make_attn(int c, int heads, std::mt19937_64& rng) {
    if (c % heads != 0) throw std::invalid_argument("attention: heads must divide channels");
    AttnP<Mat<T>> p;
    p.heads = heads;
    T s = static_cast<T>(std::sqrt(1.0 / c));
    p.wq = random_normal<T>(c, c, s, rng);
    p.wk = random_normal<T>(c, c, s, rng);
    p.wv = random_normal<T>(c, c, s, rng);
    p.wo = random_normal<T>(c, c, s, rng);
    return p;
}

template <typename T>
ResP<Mat<T>> make_res(int c, std::mt19937_64& rng) {
    return {make_conv<T>(3, c, c, rng), make_conv<T>(3, c, c, rng)};
}

template <typename T>
GlobP<Mat<T>> make_glob(int c, std::mt19937_64& rng) {
    return {make_dense<T>(c, c, rng), make_dense<T>(c, c, rng)};
}

template <typename T>
TscmP<Mat<T>> make_tscm(int c, int heads, std::mt19937_64& rng) {
    if (c % 2 != 0) throw std::invalid_argument("tscm: channels must be even");
    TscmP<Mat<T>> p;
    p.split1 = make_dense<T>(c, c, rng);
    p.att = make_attn<T>(c / 2, heads, rng);
    p.res1 = make_res<T>(c / 2, rng);
    p.fuse1 = make_dense<T>(c, c, rng);
    p.glob = make_glob<T>(c / 2, rng);
    p.res2 = make_res<T>(c / 2, rng);
    p.fuse2 = make_dense<T>(c, c, rng);
    return p;
}

// The output projection starts small so refinements begin near-neutral;
// the stacked slice recursion diverges under a full-scale init.
template <typename T>
CtxTransformP<Mat<T>> make_ctx_transform(int c_in, int c_mid, int c_out, int heads,
                                         std::mt19937_64& rng) {
    CtxTransformP<Mat<T>> p;
    p.in = make_dense<T>(c_in, c_mid, rng);
    p.tscm = make_tscm<T>(c_mid, heads, rng);
    p.out = make_dense<T>(c_mid, c_out, rng, 0.1);
    return p;
}

// ---- upload: values -> tape leaves ----
// Field order matches visit() so tape leaf order equals manifest order.

template <typename T>
DenseP<NodeId> upload(Tape<T>& t, const DenseP<Mat<T>>& p) {
    return {t.param(p.w), t.param(p.b)};
}
template <typename T>
ConvP<NodeId> upload(Tape<T>& t, const ConvP<Mat<T>>& p) {
    ConvP<NodeId> o;
    o.w = t.param(p.w);
    o.b = t.param(p.b);
    o.k = p.k;
    o.c_in = p.c_in;
    o.c_out = p.c_out;
    return o;
}
template <typename T>
AttnP<NodeId> upload(Tape<T>& t, const AttnP<Mat<T>>& p) {
    AttnP<NodeId> o;
    o.wq = t.param(p.wq);
    o.wk = t.param(p.wk);
    o.wv = t.param(p.wv);
    o.wo = t.param(p.wo);
    o.heads = p.heads;
    return o;
}
template <typename T>
ResP<NodeId> upload(Tape<T>& t, const ResP<Mat<T>>& p) {
    return {upload(t, p.c1), upload(t, p.c2)};
}
template <typename T>
GlobP<NodeId> upload(Tape<T>& t, const GlobP<Mat<T>>& p) {
    return {upload(t, p.pre), upload(t, p.post)};
}
template <typename T>
TscmP<NodeId> upload(Tape<T>& t, const TscmP<Mat<T>>& p) {
    TscmP<NodeId> o;
    o.split1 = upload(t, p.split1);
    o.att = upload(t, p.att);
    o.res1 = upload(t, p.res1);
    o.fuse1 = upload(t, p.fuse1);
    o.glob = upload(t, p.glob);
    o.res2 = upload(t, p.res2);
    o.fuse2 = upload(t, p.fuse2);
    return o;
}
template <typename T>
CtxTransformP<NodeId> upload(Tape<T>& t, const CtxTransformP<Mat<T>>& p) {
    return {upload(t, p.in), upload(t, p.tscm), upload(t, p.out)};
}

// ---- forwards ----

template <typename T>
NodeId dense_fwd(Tape<T>& t, NodeId x, const DenseP<NodeId>& p) {
    return add_rowvec(t, matmul(t, x, p.w), p.b);
}

template <typename T>
NodeId conv_fwd(Tape<T>& t, NodeId x, const ConvP<NodeId>& p, const sparse::KernelMap* map,
                int out_rows, int c_in) {
    return sparse_conv_op(t, x, p.w, p.b, map, out_rows, c_in);
}

// y = x + Conv3(relu(Conv3(x)))
template <typename T>
NodeId residual_fwd(Tape<T>& t, NodeId x, const ResP<NodeId>& p, const LevelCtx& lvl, int c) {
    NodeId h = conv_fwd(t, x, p.c1, lvl.same3, lvl.rows, c);
    h = relu(t, h);
    h = conv_fwd(t, h, p.c2, lvl.same3, lvl.rows, c);
    return add(t, x, h);
}

// Windowed multi-head self attention, no positional term.
template <typename T>
NodeId attention_fwd(Tape<T>& t, NodeId x, const AttnP<NodeId>& p, const LevelCtx& lvl) {
    const int c = t.val(x).cols();
    if (c % p.heads != 0) throw std::invalid_argument("attention: heads must divide channels");
    const int d = c / p.heads;
    const T inv_sqrt_d = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d)));
    std::vector<NodeId> parts;
    parts.reserve(lvl.windows.size());
    for (const auto& idx : lvl.windows) {
        NodeId xw = gather(t, x, idx);
        NodeId q = matmul(t, xw, p.wq);
        NodeId k = matmul(t, xw, p.wk);
        NodeId v = matmul(t, xw, p.wv);
        std::vector<NodeId> heads;
        heads.reserve(p.heads);
        for (int h = 0; h < p.heads; ++h) {
            NodeId qh = slice_cols(t, q, h * d, (h + 1) * d);
            NodeId kh = slice_cols(t, k, h * d, (h + 1) * d);
            NodeId vh = slice_cols(t, v, h * d, (h + 1) * d);
            NodeId s = scale(t, matmul(t, qh, transpose(t, kh)), inv_sqrt_d);
            NodeId a = softmax_rows(t, s);
            heads.push_back(matmul(t, a, vh));
        }
        NodeId o = p.heads == 1 ? heads[0] : concat_cols(t, heads);
        parts.push_back(matmul(t, o, p.wo));
    }
    return assemble_rows(t, parts, lvl.windows, lvl.rows);
}

// h = Conv1(x); out = Conv1(h - sqrt_signed(rowmean(h)) * colmean-row(h))
template <typename T>
NodeId global_fwd(Tape<T>& t, NodeId x, const GlobP<NodeId>& p) {
    NodeId h = dense_fwd(t, x, p.pre);
    NodeId f_os = mean_rows(t, h);                  // 1 x C
    NodeId f_oc = sqrt_signed(t, mean_cols(t, h));  // N x 1
    NodeId f_cs = matmul(t, f_oc, f_os);            // N x C
    return dense_fwd(t, sub(t, h, f_cs), p.post);
}

template <typename T>
NodeId tscm_fwd(Tape<T>& t, NodeId x, const TscmP<NodeId>& p, const LevelCtx& lvl) {
    const int c = t.val(x).cols();
    const int half = c / 2;
    NodeId s = dense_fwd(t, x, p.split1);
    NodeId f_att = slice_cols(t, s, 0, half);
    NodeId f_cnn1 = slice_cols(t, s, half, c);
    NodeId a = attention_fwd(t, f_att, p.att, lvl);
    NodeId r = residual_fwd(t, f_cnn1, p.res1, lvl, half);
    NodeId out1 = add(t, x, dense_fwd(t, concat_cols(t, {a, r}), p.fuse1));
    NodeId f_glo = slice_cols(t, out1, 0, half);
    NodeId f_cnn2 = slice_cols(t, out1, half, c);
    NodeId g = global_fwd(t, f_glo, p.glob);
    NodeId r2 = residual_fwd(t, f_cnn2, p.res2, lvl, half);
    return add(t, out1, dense_fwd(t, concat_cols(t, {g, r2}), p.fuse2));
}

template <typename T>
NodeId ctx_transform_fwd(Tape<T>& t, const std::vector<NodeId>& inputs,
                         const CtxTransformP<NodeId>& p, const LevelCtx& lvl) {
    NodeId x = inputs.size() == 1 ? inputs[0] : concat_cols(t, inputs);
    NodeId h = dense_fwd(t, x, p.in);
    h = tscm_fwd(t, h, p.tscm, lvl);
    return dense_fwd(t, h, p.out);
}

}  // namespace pcac::blocks
