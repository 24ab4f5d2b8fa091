#pragma once

#include "pcac/gaussian.hpp"
#include "pcac/mat.hpp"
#include "pcac/sparse.hpp"

#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace pcac::ad {

using NodeId = int32_t;
using IndexVec = std::shared_ptr<const std::vector<int32_t>>;

inline IndexVec make_index(std::vector<int32_t> v) {
    return std::make_shared<const std::vector<int32_t>>(std::move(v));
}

// Reverse-mode tape over dense matrices. Nodes are append-only, so reverse
// creation order is a valid topological order for the backward sweep. With
// grads disabled the tape stores values only and never registers closures.
template <typename T>
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, NodeId)>;

    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    NodeId input(Mat<T> value) { return push(std::move(value), false, nullptr); }
    NodeId param(Mat<T> value) { return push(std::move(value), grad_enabled_, nullptr); }

    NodeId make(Mat<T> value, bool needs, BackwardFn bw) {
        needs = needs && grad_enabled_;
        return push(std::move(value), needs, needs ? std::move(bw) : nullptr);
    }

    const Mat<T>& val(NodeId id) const { return nodes_[id].value; }
    bool requires_grad(NodeId id) const { return nodes_[id].needs; }
    bool grad_enabled() const { return grad_enabled_; }
    size_t size() const { return nodes_.size(); }

    // Allocated on first touch; zeros.
    Mat<T>& grad(NodeId id) {
        auto& n = nodes_[id];
        if (n.grad.empty()) n.grad = Mat<T>::zeros(n.value.rows(), n.value.cols());
        return n.grad;
    }

    // nullptr when this node does not need a gradient.
    Mat<T>* grad_if_needed(NodeId id) {
        if (!nodes_[id].needs) return nullptr;
        return &grad(id);
    }

    // true once something accumulated into this node's gradient
    bool grad_touched(NodeId id) const { return !nodes_[id].grad.empty(); }

    void backward(NodeId loss) {
        if (!grad_enabled_) throw std::logic_error("backward: gradients disabled on this tape");
        if (val(loss).rows() != 1 || val(loss).cols() != 1)
            throw std::invalid_argument("backward: loss must be scalar");
        if (!std::isfinite(static_cast<double>(val(loss)(0, 0))))
            throw std::runtime_error("backward: non-finite loss");
        grad(loss)(0, 0) += T(1);
        for (NodeId i = loss; i >= 0; --i) {
            auto& n = nodes_[i];
            if (n.backward && !n.grad.empty()) n.backward(*this, i);
        }
    }

private:
    struct Node {
        Mat<T> value;
        Mat<T> grad;
        bool needs = false;
        BackwardFn backward;
    };

    NodeId push(Mat<T> value, bool needs, BackwardFn bw) {
        nodes_.push_back(Node{std::move(value), Mat<T>(), needs, std::move(bw)});
        return static_cast<NodeId>(nodes_.size() - 1);
    }

    std::vector<Node> nodes_;
    bool grad_enabled_;
};

namespace detail {
template <typename T>
void shape_eq(const Mat<T>& a, const Mat<T>& b, const char* op) {
    if (!a.same_shape(b)) throw std::invalid_argument(std::string(op) + ": shape mismatch");
}
}  // namespace detail

// ---- elementwise ----

template <typename T>
NodeId add(Tape<T>& t, NodeId a, NodeId b) {
    detail::shape_eq(t.val(a), t.val(b), "add");
    Mat<T> v = t.val(a);
    add_inplace(v, t.val(b));
    bool req = t.requires_grad(a) || t.requires_grad(b);
    return t.make(std::move(v), req, [a, b](Tape<T>& tp, NodeId self) {
        const Mat<T>& g = tp.grad(self);
        if (auto* ga = tp.grad_if_needed(a)) add_inplace(*ga, g);
        if (auto* gb = tp.grad_if_needed(b)) add_inplace(*gb, g);
    });
}

template <typename T>
NodeId sub(Tape<T>& t, NodeId a, NodeId b) {
    detail::shape_eq(t.val(a), t.val(b), "sub");
    Mat<T> v = t.val(a);
    for (size_t i = 0; i < v.size(); ++i) v.data()[i] -= t.val(b).data()[i];
    bool req = t.requires_grad(a) || t.requires_grad(b);
    return t.make(std::move(v), req, [a, b](Tape<T>& tp, NodeId self) {
        const Mat<T>& g = tp.grad(self);
        if (auto* ga = tp.grad_if_needed(a)) add_inplace(*ga, g);
        if (auto* gb = tp.grad_if_needed(b))
            for (size_t i = 0; i < g.size(); ++i) gb->data()[i] -= g.data()[i];
    });
}

template <typename T>
NodeId mul(Tape<T>& t, NodeId a, NodeId b) {
    detail::shape_eq(t.val(a), t.val(b), "mul");
    Mat<T> v = t.val(a);
    for (size_t i = 0; i < v.size(); ++i) v.data()[i] *= t.val(b).data()[i];
    bool req = t.requires_grad(a) || t.requires_grad(b);
    return t.make(std::move(v), req, [a, b](Tape<T>& tp, NodeId self) {
        const Mat<T>& g = tp.grad(self);
        if (auto* ga = tp.grad_if_needed(a)) {
            const Mat<T>& vb = tp.val(b);
            for (size_t i = 0; i < g.size(); ++i) ga->data()[i] += g.data()[i] * vb.data()[i];
        }
        if (auto* gb = tp.grad_if_needed(b)) {
            const Mat<T>& va = tp.val(a);
            for (size_t i = 0; i < g.size(); ++i) gb->data()[i] += g.data()[i] * va.data()[i];
        }
    });
}

template <typename T>
NodeId scale(Tape<T>& t, NodeId x, T c) {
    Mat<T> v = t.val(x);
    for (size_t i = 0; i < v.size(); ++i) v.data()[i] *= c;
    return t.make(std::move(v), t.requires_grad(x), [x, c](Tape<T>& tp, NodeId self) {
        if (auto* gx = tp.grad_if_needed(x)) {
            const Mat<T>& g = tp.grad(self);
            for (size_t i = 0; i < g.size(); ++i) gx->data()[i] += g.data()[i] * c;
        }
    });
}

template <typename T>
NodeId shift(Tape<T>& t, NodeId x, T c) {
    Mat<T> v = t.val(x);
    for (size_t i = 0; i < v.size(); ++i) v.data()[i] += c;
    return t.make(std::move(v), t.requires_grad(x), [x](Tape<T>& tp, NodeId self) {
        if (auto* gx = tp.grad_if_needed(x)) add_inplace(*gx, tp.grad(self));
    });
}

template <typename T>
NodeId relu(Tape<T>& t, NodeId x) {
    Mat<T> v = t.val(x);
    for (size_t i = 0; i < v.size(); ++i)
        if (v.data()[i] < T(0)) v.data()[i] = T(0);
    return t.make(std::move(v), t.requires_grad(x), [x](Tape<T>& tp, NodeId self) {
        if (auto* gx = tp.grad_if_needed(x)) {
            const Mat<T>& g = tp.grad(self);
            const Mat<T>& vx = tp.val(x);
            for (size_t i = 0; i < g.size(); ++i)
                if (vx.data()[i] > T(0)) gx->data()[i] += g.data()[i];
        }
    });
}

// sign(x)*sqrt(|x|); subgradient 0 at exactly 0.
template <typename T>
NodeId sqrt_signed(Tape<T>& t, NodeId x) {
    Mat<T> v = t.val(x);
    for (size_t i = 0; i < v.size(); ++i) {
        T xv = v.data()[i];
        v.data()[i] = xv >= T(0) ? std::sqrt(xv) : -std::sqrt(-xv);
    }
    return t.make(std::move(v), t.requires_grad(x), [x](Tape<T>& tp, NodeId self) {
        if (auto* gx = tp.grad_if_needed(x)) {
            const Mat<T>& g = tp.grad(self);
            const Mat<T>& vy = tp.val(self);
            for (size_t i = 0; i < g.size(); ++i) {
                T y = vy.data()[i];
                if (y != T(0)) gx->data()[i] += g.data()[i] / (T(2) * std::abs(y));
            }
        }
    });
}

// Round half away from zero forward, identity gradient backward. Adding
// +0 normalizes -0.0 so encoder-side and decoded symbols match bitwise.
template <typename T>
NodeId round_ste(Tape<T>& t, NodeId x) {
    Mat<T> v = t.val(x);
    for (size_t i = 0; i < v.size(); ++i) v.data()[i] = std::round(v.data()[i]) + T(0);
    return t.make(std::move(v), t.requires_grad(x), [x](Tape<T>& tp, NodeId self) {
        if (auto* gx = tp.grad_if_needed(x)) add_inplace(*gx, tp.grad(self));
    });
}

template <typename T>
NodeId exp_op(Tape<T>& t, NodeId x) {
    Mat<T> v = t.val(x);
    for (size_t i = 0; i < v.size(); ++i) v.data()[i] = std::exp(v.data()[i]);
    return t.make(std::move(v), t.requires_grad(x), [x](Tape<T>& tp, NodeId self) {
        if (auto* gx = tp.grad_if_needed(x)) {
            const Mat<T>& g = tp.grad(self);
            const Mat<T>& vy = tp.val(self);
            for (size_t i = 0; i < g.size(); ++i) gx->data()[i] += g.data()[i] * vy.data()[i];
        }
    });
}

// Gradient passes only strictly inside (lo, hi).
template <typename T>
NodeId clamp(Tape<T>& t, NodeId x, T lo, T hi) {
    Mat<T> v = t.val(x);
    for (size_t i = 0; i < v.size(); ++i) v.data()[i] = std::min(hi, std::max(lo, v.data()[i]));
    return t.make(std::move(v), t.requires_grad(x), [x, lo, hi](Tape<T>& tp, NodeId self) {
        if (auto* gx = tp.grad_if_needed(x)) {
            const Mat<T>& g = tp.grad(self);
            const Mat<T>& vx = tp.val(x);
            for (size_t i = 0; i < g.size(); ++i)
                if (vx.data()[i] > lo && vx.data()[i] < hi) gx->data()[i] += g.data()[i];
        }
    });
}

template <typename T>
NodeId clamp_min(Tape<T>& t, NodeId x, T lo) {
    Mat<T> v = t.val(x);
    for (size_t i = 0; i < v.size(); ++i) v.data()[i] = std::max(lo, v.data()[i]);
    return t.make(std::move(v), t.requires_grad(x), [x, lo](Tape<T>& tp, NodeId self) {
        if (auto* gx = tp.grad_if_needed(x)) {
            const Mat<T>& g = tp.grad(self);
            const Mat<T>& vx = tp.val(x);
            for (size_t i = 0; i < g.size(); ++i)
                if (vx.data()[i] > lo) gx->data()[i] += g.data()[i];
        }
    });
}

// ---- linear algebra ----

template <typename T>
NodeId matmul(Tape<T>& t, NodeId a, NodeId b) {
    Mat<T> v = pcac::matmul(t.val(a), t.val(b));
    bool req = t.requires_grad(a) || t.requires_grad(b);
    return t.make(std::move(v), req, [a, b](Tape<T>& tp, NodeId self) {
        const Mat<T>& g = tp.grad(self);
        if (auto* ga = tp.grad_if_needed(a)) ga->map().noalias() += g.map() * tp.val(b).map().transpose();
        if (auto* gb = tp.grad_if_needed(b)) gb->map().noalias() += tp.val(a).map().transpose() * g.map();
    });
}

template <typename T>
NodeId transpose(Tape<T>& t, NodeId x) {
    const Mat<T>& xv = t.val(x);
    Mat<T> v(xv.cols(), xv.rows());
    v.map().noalias() = xv.map().transpose();
    return t.make(std::move(v), t.requires_grad(x), [x](Tape<T>& tp, NodeId self) {
        if (auto* gx = tp.grad_if_needed(x)) gx->map().noalias() += tp.grad(self).map().transpose();
    });
}

// x: N x C, b: 1 x C.
template <typename T>
NodeId add_rowvec(Tape<T>& t, NodeId x, NodeId b) {
    if (t.val(b).rows() != 1 || t.val(b).cols() != t.val(x).cols())
        throw std::invalid_argument("add_rowvec: bias must be 1 x cols(x)");
    Mat<T> v = t.val(x);
    const Mat<T>& bv = t.val(b);
    for (int r = 0; r < v.rows(); ++r)
        for (int c = 0; c < v.cols(); ++c) v(r, c) += bv(0, c);
    bool req = t.requires_grad(x) || t.requires_grad(b);
    return t.make(std::move(v), req, [x, b](Tape<T>& tp, NodeId self) {
        const Mat<T>& g = tp.grad(self);
        if (auto* gx = tp.grad_if_needed(x)) add_inplace(*gx, g);
        if (auto* gb = tp.grad_if_needed(b))
            for (int r = 0; r < g.rows(); ++r)
                for (int c = 0; c < g.cols(); ++c) (*gb)(0, c) += g(r, c);
    });
}

// 1 x C -> N x C.
template <typename T>
NodeId repeat_rows(Tape<T>& t, NodeId x, int n) {
    if (t.val(x).rows() != 1) throw std::invalid_argument("repeat_rows: input must have one row");
    const Mat<T>& xv = t.val(x);
    Mat<T> v(n, xv.cols());
    for (int r = 0; r < n; ++r) std::memcpy(v.row(r), xv.row(0), sizeof(T) * xv.cols());
    return t.make(std::move(v), t.requires_grad(x), [x](Tape<T>& tp, NodeId self) {
        if (auto* gx = tp.grad_if_needed(x)) {
            const Mat<T>& g = tp.grad(self);
            for (int r = 0; r < g.rows(); ++r)
                for (int c = 0; c < g.cols(); ++c) (*gx)(0, c) += g(r, c);
        }
    });
}

// ---- reductions ----

template <typename T>
NodeId mean_rows(Tape<T>& t, NodeId x) {
    const Mat<T>& xv = t.val(x);
    if (xv.rows() == 0) throw std::invalid_argument("mean_rows: empty input");
    Mat<T> v(1, xv.cols());
    for (int r = 0; r < xv.rows(); ++r)
        for (int c = 0; c < xv.cols(); ++c) v(0, c) += xv(r, c);
    for (int c = 0; c < xv.cols(); ++c) v(0, c) /= static_cast<T>(xv.rows());
    return t.make(std::move(v), t.requires_grad(x), [x](Tape<T>& tp, NodeId self) {
        if (auto* gx = tp.grad_if_needed(x)) {
            const Mat<T>& g = tp.grad(self);
            T inv = T(1) / static_cast<T>(gx->rows());
            for (int r = 0; r < gx->rows(); ++r)
                for (int c = 0; c < gx->cols(); ++c) (*gx)(r, c) += g(0, c) * inv;
        }
    });
}

template <typename T>
NodeId mean_cols(Tape<T>& t, NodeId x) {
    const Mat<T>& xv = t.val(x);
    if (xv.cols() == 0) throw std::invalid_argument("mean_cols: empty input");
    Mat<T> v(xv.rows(), 1);
    for (int r = 0; r < xv.rows(); ++r) {
        T s = T(0);
        for (int c = 0; c < xv.cols(); ++c) s += xv(r, c);
        v(r, 0) = s / static_cast<T>(xv.cols());
    }
    return t.make(std::move(v), t.requires_grad(x), [x](Tape<T>& tp, NodeId self) {
        if (auto* gx = tp.grad_if_needed(x)) {
            const Mat<T>& g = tp.grad(self);
            T inv = T(1) / static_cast<T>(gx->cols());
            for (int r = 0; r < gx->rows(); ++r)
                for (int c = 0; c < gx->cols(); ++c) (*gx)(r, c) += g(r, 0) * inv;
        }
    });
}

template <typename T>
NodeId sum_all(Tape<T>& t, NodeId x) {
    const Mat<T>& xv = t.val(x);
    Mat<T> v(1, 1);
    T s = T(0);
    for (size_t i = 0; i < xv.size(); ++i) s += xv.data()[i];
    v(0, 0) = s;
    return t.make(std::move(v), t.requires_grad(x), [x](Tape<T>& tp, NodeId self) {
        if (auto* gx = tp.grad_if_needed(x)) {
            T g = tp.grad(self)(0, 0);
            for (size_t i = 0; i < gx->size(); ++i) gx->data()[i] += g;
        }
    });
}

// ---- softmax ----

template <typename T>
NodeId softmax_rows(Tape<T>& t, NodeId x) {
    Mat<T> v = t.val(x);
    for (int r = 0; r < v.rows(); ++r) {
        T* row = v.row(r);
        T mx = row[0];
        for (int c = 1; c < v.cols(); ++c) mx = std::max(mx, row[c]);
        T s = T(0);
        for (int c = 0; c < v.cols(); ++c) {
            row[c] = std::exp(row[c] - mx);
            s += row[c];
        }
        for (int c = 0; c < v.cols(); ++c) row[c] /= s;
    }
    return t.make(std::move(v), t.requires_grad(x), [x](Tape<T>& tp, NodeId self) {
        if (auto* gx = tp.grad_if_needed(x)) {
            const Mat<T>& g = tp.grad(self);
            const Mat<T>& y = tp.val(self);
            for (int r = 0; r < g.rows(); ++r) {
                T dot = T(0);
                for (int c = 0; c < g.cols(); ++c) dot += g(r, c) * y(r, c);
                for (int c = 0; c < g.cols(); ++c) (*gx)(r, c) += y(r, c) * (g(r, c) - dot);
            }
        }
    });
}

// ---- structure ops ----

template <typename T>
NodeId concat_cols(Tape<T>& t, const std::vector<NodeId>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
    int rows = t.val(parts[0]).rows();
    int cols = 0;
    bool req = false;
    for (NodeId p : parts) {
        if (t.val(p).rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
        cols += t.val(p).cols();
        req = req || t.requires_grad(p);
    }
    Mat<T> v(rows, cols);
    int at = 0;
    for (NodeId p : parts) {
        const Mat<T>& pv = t.val(p);
        for (int r = 0; r < rows; ++r)
            std::memcpy(v.row(r) + at, pv.row(r), sizeof(T) * pv.cols());
        at += pv.cols();
    }
    return t.make(std::move(v), req, [parts](Tape<T>& tp, NodeId self) {
        const Mat<T>& g = tp.grad(self);
        int at = 0;
        for (NodeId p : parts) {
            int pc = tp.val(p).cols();
            if (auto* gp = tp.grad_if_needed(p)) {
                for (int r = 0; r < g.rows(); ++r)
                    for (int c = 0; c < pc; ++c) (*gp)(r, c) += g(r, at + c);
            }
            at += pc;
        }
    });
}

template <typename T>
NodeId slice_cols(Tape<T>& t, NodeId x, int c0, int c1) {
    const Mat<T>& xv = t.val(x);
    if (c0 < 0 || c1 > xv.cols() || c0 >= c1) throw std::invalid_argument("slice_cols: bad range");
    Mat<T> v(xv.rows(), c1 - c0);
    for (int r = 0; r < xv.rows(); ++r) std::memcpy(v.row(r), xv.row(r) + c0, sizeof(T) * (c1 - c0));
    return t.make(std::move(v), t.requires_grad(x), [x, c0, c1](Tape<T>& tp, NodeId self) {
        if (auto* gx = tp.grad_if_needed(x)) {
            const Mat<T>& g = tp.grad(self);
            for (int r = 0; r < g.rows(); ++r)
                for (int c = 0; c < c1 - c0; ++c) (*gx)(r, c0 + c) += g(r, c);
        }
    });
}

template <typename T>
NodeId gather(Tape<T>& t, NodeId x, IndexVec idx) {
    Mat<T> v = pcac::gather_rows(t.val(x), *idx);
    return t.make(std::move(v), t.requires_grad(x), [x, idx](Tape<T>& tp, NodeId self) {
        if (auto* gx = tp.grad_if_needed(x)) pcac::scatter_add_rows(*gx, tp.grad(self), *idx);
    });
}

// out[idx[j]] += x[j], output has out_rows rows.
template <typename T>
NodeId scatter_add(Tape<T>& t, NodeId x, IndexVec idx, int out_rows) {
    const Mat<T>& xv = t.val(x);
    if (static_cast<size_t>(xv.rows()) != idx->size())
        throw std::invalid_argument("scatter_add: index size mismatch");
    Mat<T> v(out_rows, xv.cols());
    pcac::scatter_add_rows(v, xv, *idx);
    return t.make(std::move(v), t.requires_grad(x), [x, idx](Tape<T>& tp, NodeId self) {
        if (auto* gx = tp.grad_if_needed(x)) {
            Mat<T> picked = pcac::gather_rows(tp.grad(self), *idx);
            add_inplace(*gx, picked);
        }
    });
}

// Places disjoint row groups into one matrix; the groups must cover each
// output row at most once.
template <typename T>
NodeId assemble_rows(Tape<T>& t, const std::vector<NodeId>& parts,
                     const std::vector<IndexVec>& indices, int out_rows) {
    if (parts.size() != indices.size()) throw std::invalid_argument("assemble_rows: arity mismatch");
    if (parts.empty()) throw std::invalid_argument("assemble_rows: no inputs");
    int cols = t.val(parts[0]).cols();
    bool req = false;
    Mat<T> v(out_rows, cols);
    for (size_t p = 0; p < parts.size(); ++p) {
        const Mat<T>& pv = t.val(parts[p]);
        if (pv.cols() != cols) throw std::invalid_argument("assemble_rows: column mismatch");
        const auto& idx = *indices[p];
        if (static_cast<size_t>(pv.rows()) != idx.size())
            throw std::invalid_argument("assemble_rows: index size mismatch");
        for (size_t j = 0; j < idx.size(); ++j)
            std::memcpy(v.row(idx[j]), pv.row(static_cast<int>(j)), sizeof(T) * cols);
        req = req || t.requires_grad(parts[p]);
    }
    return t.make(std::move(v), req, [parts, indices](Tape<T>& tp, NodeId self) {
        const Mat<T>& g = tp.grad(self);
        for (size_t p = 0; p < parts.size(); ++p) {
            if (auto* gp = tp.grad_if_needed(parts[p])) {
                const auto& idx = *indices[p];
                for (size_t j = 0; j < idx.size(); ++j) {
                    const T* src = g.row(idx[j]);
                    T* dst = gp->row(static_cast<int>(j));
                    for (int c = 0; c < g.cols(); ++c) dst[c] += src[c];
                }
            }
        }
    });
}

// ---- fused sparse convolution ----

// Forward via the shared conv kernel; map must outlive the tape. `bias`
// may be -1.
template <typename T>
NodeId sparse_conv_op(Tape<T>& t, NodeId x, NodeId w, NodeId bias, const sparse::KernelMap* map,
                      int out_rows, int c_in) {
    const Mat<T>& wv = t.val(w);
    if (t.val(x).cols() != c_in) throw std::invalid_argument("sparse_conv_op: channel mismatch");
    if (wv.rows() != map->k * map->k * map->k * c_in)
        throw std::invalid_argument("sparse_conv_op: weight shape mismatch");
    static const Mat<T> kNoBias;
    const Mat<T>& bv = bias >= 0 ? t.val(bias) : kNoBias;
    Mat<T> v = sparse::conv_apply(t.val(x), wv, bv, *map, out_rows);
    bool req = t.requires_grad(x) || t.requires_grad(w) || (bias >= 0 && t.requires_grad(bias));
    return t.make(std::move(v), req, [x, w, bias, map](Tape<T>& tp, NodeId self) {
        const Mat<T>& g = tp.grad(self);
        Mat<T>* gx = tp.grad_if_needed(x);
        Mat<T>* gw = tp.grad_if_needed(w);
        Mat<T>* gb = bias >= 0 ? tp.grad_if_needed(bias) : nullptr;
        sparse::conv_backward(tp.val(x), tp.val(w), *map, g, gx, gw, gb);
    });
}

// ---- discretized Gaussian rate ----

// Total -log2 probability of integer-valued `symbols` under N(mu, sigma)
// quantized to unit buckets, with tails floored at the escape cost.
// Differentiable in mu, sigma, and (straight-through) in the symbols.
template <typename T>
NodeId gaussian_bits(Tape<T>& t, NodeId symbols, NodeId mu, NodeId sigma) {
    detail::shape_eq(t.val(symbols), t.val(mu), "gaussian_bits");
    detail::shape_eq(t.val(symbols), t.val(sigma), "gaussian_bits");
    const Mat<T>& k = t.val(symbols);
    const Mat<T>& m = t.val(mu);
    const Mat<T>& s = t.val(sigma);
    double total = 0.0;
    for (size_t i = 0; i < k.size(); ++i)
        total += gauss::bucket_bits(static_cast<double>(m.data()[i]),
                                    static_cast<double>(s.data()[i]),
                                    static_cast<double>(k.data()[i]));
    Mat<T> v(1, 1);
    v(0, 0) = static_cast<T>(total);
    bool req = t.requires_grad(symbols) || t.requires_grad(mu) || t.requires_grad(sigma);
    return t.make(std::move(v), req, [symbols, mu, sigma](Tape<T>& tp, NodeId self) {
        T g = tp.grad(self)(0, 0);
        const Mat<T>& k = tp.val(symbols);
        const Mat<T>& m = tp.val(mu);
        const Mat<T>& s = tp.val(sigma);
        Mat<T>* gk = tp.grad_if_needed(symbols);
        Mat<T>* gm = tp.grad_if_needed(mu);
        Mat<T>* gs = tp.grad_if_needed(sigma);
        for (size_t i = 0; i < k.size(); ++i) {
            auto bg = gauss::bucket_bits_grad(static_cast<double>(m.data()[i]),
                                              static_cast<double>(s.data()[i]),
                                              static_cast<double>(k.data()[i]));
            if (gm) gm->data()[i] += g * static_cast<T>(bg.d_mu);
            if (gs) gs->data()[i] += g * static_cast<T>(bg.d_sigma);
            if (gk) gk->data()[i] += g * static_cast<T>(bg.d_k);
        }
    });
}

// ---- gradient checking ----

struct GradCheckReport {
    double max_rel_err = 0.0;
    size_t checked = 0;
    bool pass = true;
};

// builder(tape, leaf ids) -> scalar loss id. Leaves are registered in the
// order given; checks analytic grads against central differences on a
// per-leaf element sample (empty sample = every element).
inline double rel_err(double a, double n) {
    double denom = std::max({1e-6, std::abs(a), std::abs(n)});
    return std::abs(a - n) / denom;
}

template <typename Builder>
GradCheckReport grad_check(Builder&& builder, std::vector<Mat<double>> leaves, double eps,
                           double tol,
                           const std::vector<std::vector<size_t>>* sample = nullptr) {
    GradCheckReport report;
    std::vector<Mat<double>> analytic;
    {
        Tape<double> t;
        std::vector<NodeId> ids;
        for (auto& l : leaves) ids.push_back(t.param(l));
        NodeId loss = builder(t, ids);
        t.backward(loss);
        for (NodeId id : ids) analytic.push_back(t.grad(id));
    }
    auto eval = [&](const std::vector<Mat<double>>& ls) {
        Tape<double> t(false);
        std::vector<NodeId> ids;
        for (const auto& l : ls) ids.push_back(t.input(l));
        NodeId loss = builder(t, ids);
        return t.val(loss)(0, 0);
    };
    for (size_t li = 0; li < leaves.size(); ++li) {
        std::vector<size_t> all;
        const std::vector<size_t>* elems;
        if (sample && li < sample->size() && !(*sample)[li].empty()) {
            elems = &(*sample)[li];
        } else {
            all.resize(leaves[li].size());
            for (size_t i = 0; i < all.size(); ++i) all[i] = i;
            elems = &all;
        }
        for (size_t e : *elems) {
            double orig = leaves[li].data()[e];
            leaves[li].data()[e] = orig + eps;
            double up = eval(leaves);
            leaves[li].data()[e] = orig - eps;
            double dn = eval(leaves);
            leaves[li].data()[e] = orig;
            double numeric = (up - dn) / (2 * eps);
            double err = rel_err(analytic[li].data()[e], numeric);
            report.max_rel_err = std::max(report.max_rel_err, err);
            ++report.checked;
        }
    }
    report.pass = report.max_rel_err <= tol;
    return report;
}

}  // namespace pcac::ad
