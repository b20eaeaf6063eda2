/* SPDX-FileCopyrightText: 2026 The LumiNet Desk Authors
 * SPDX-License-Identifier: Apache-2.0 */
#pragma once

#include <Eigen/Core>
#include <cstring>
#include <functional>
#include <unordered_map>
#include <utility>
#include <vector>

#include "luminet/tensor.hpp"

namespace luminet {

template <class T>
class GraphT;

/// Handle to a node on a GraphT tape.
template <class T>
struct VarT {
    GraphT<T>* g = nullptr;
    int id = -1;
    bool valid() const { return g != nullptr && id >= 0; }
    const TensorT<T>& value() const { return g->value(id); }
    const std::vector<int>& shape() const { return g->value(id).shape(); }
};

// ---------------------------------------------------------------------------
// Reverse-mode tape over dense tensors.
//
// Ops append nodes; backward() walks the tape in reverse. Leaves created via
// use() flush their accumulated gradient into an external sink so layer
// parameters can live outside the graph. Heavy ops (conv) recompute their
// im2col scratch in the backward pass instead of keeping it alive.
// ---------------------------------------------------------------------------
template <class T>
class GraphT {
public:
    using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using MatMap = Eigen::Map<Mat>;
    using CMatMap = Eigen::Map<const Mat>;

    GraphT() = default;
    GraphT(const GraphT&) = delete;            // backward closures capture `this`
    GraphT& operator=(const GraphT&) = delete;

    // ---- node management -------------------------------------------------

    VarT<T> constant(TensorT<T> v) { return {this, emit(std::move(v), false, nullptr)}; }

    VarT<T> input(TensorT<T> v) { return {this, emit(std::move(v), true, nullptr)}; }

    /// Leaf bound to an external parameter. Repeated use() of the same sink
    /// returns the same node, so shared weights accumulate gradients once.
    VarT<T> use(const TensorT<T>& value, TensorT<T>* grad_sink) {
        auto it = param_nodes_.find(grad_sink);
        if (it != param_nodes_.end()) return {this, it->second};
        const int id = emit(value, true, nullptr);
        param_nodes_.emplace(grad_sink, id);
        bindings_.push_back({id, grad_sink});
        return {this, id};
    }

    const TensorT<T>& value(int id) const { return nodes_[size_t(id)].value; }
    TensorT<T>& grad(int id) { return grad_buffer(id); }
    bool has_grad(int id) const { return !nodes_[size_t(id)].grad.empty(); }
    size_t size() const { return nodes_.size(); }

    void backward(VarT<T> loss) {
        if (loss.g != this) throw Error("backward: var from another graph");
        if (value(loss.id).numel() != 1) throw ShapeError("backward: loss must be scalar");
        grad_buffer(loss.id).fill(T(1));
        for (int i = loss.id; i >= 0; --i) {
            Node& n = nodes_[size_t(i)];
            if (n.backward && !n.grad.empty()) n.backward();
        }
        for (auto& [id, sink] : bindings_) {
            Node& n = nodes_[size_t(id)];
            if (n.grad.empty()) continue;
            if (sink->empty()) *sink = TensorT<T>::zeros(n.value.shape());
            for (int64_t k = 0; k < n.grad.numel(); ++k) (*sink)[k] += n.grad[k];
        }
    }

    void clear() {
        nodes_.clear();
        param_nodes_.clear();
        bindings_.clear();
    }

    // ---- elementwise ------------------------------------------------------

    VarT<T> add(VarT<T> a, VarT<T> b) {
        check_same_shape(value(a.id), value(b.id), "add");
        TensorT<T> y = value(a.id);
        const TensorT<T>& vb = value(b.id);
        for (int64_t i = 0; i < y.numel(); ++i) y[i] += vb[i];
        return make_binary(std::move(y), a, b,
            [this](int ya, int pa, int pb) {
                const TensorT<T>& g = nodes_[size_t(ya)].grad;
                accum(pa, [&](TensorT<T>& d) { for (int64_t i = 0; i < g.numel(); ++i) d[i] += g[i]; });
                accum(pb, [&](TensorT<T>& d) { for (int64_t i = 0; i < g.numel(); ++i) d[i] += g[i]; });
            });
    }

    VarT<T> sub(VarT<T> a, VarT<T> b) {
        check_same_shape(value(a.id), value(b.id), "sub");
        TensorT<T> y = value(a.id);
        const TensorT<T>& vb = value(b.id);
        for (int64_t i = 0; i < y.numel(); ++i) y[i] -= vb[i];
        return make_binary(std::move(y), a, b,
            [this](int ya, int pa, int pb) {
                const TensorT<T>& g = nodes_[size_t(ya)].grad;
                accum(pa, [&](TensorT<T>& d) { for (int64_t i = 0; i < g.numel(); ++i) d[i] += g[i]; });
                accum(pb, [&](TensorT<T>& d) { for (int64_t i = 0; i < g.numel(); ++i) d[i] -= g[i]; });
            });
    }

    VarT<T> mul(VarT<T> a, VarT<T> b) {
        check_same_shape(value(a.id), value(b.id), "mul");
        TensorT<T> y = value(a.id);
        const TensorT<T>& vb = value(b.id);
        for (int64_t i = 0; i < y.numel(); ++i) y[i] *= vb[i];
        return make_binary(std::move(y), a, b,
            [this](int ya, int pa, int pb) {
                const TensorT<T>& g = nodes_[size_t(ya)].grad;
                const TensorT<T>& va = nodes_[size_t(pa)].value;
                const TensorT<T>& vb2 = nodes_[size_t(pb)].value;
                accum(pa, [&](TensorT<T>& d) { for (int64_t i = 0; i < g.numel(); ++i) d[i] += g[i] * vb2[i]; });
                accum(pb, [&](TensorT<T>& d) { for (int64_t i = 0; i < g.numel(); ++i) d[i] += g[i] * va[i]; });
            });
    }

    VarT<T> scale(VarT<T> a, double c) {
        TensorT<T> y = value(a.id);
        for (int64_t i = 0; i < y.numel(); ++i) y[i] = T(double(y[i]) * c);
        return make_unary(std::move(y), a,
            [this, c](int ya, int pa) {
                const TensorT<T>& g = nodes_[size_t(ya)].grad;
                accum(pa, [&](TensorT<T>& d) { for (int64_t i = 0; i < g.numel(); ++i) d[i] += T(double(g[i]) * c); });
            });
    }

    VarT<T> offset(VarT<T> a, double c) {
        TensorT<T> y = value(a.id);
        for (int64_t i = 0; i < y.numel(); ++i) y[i] = T(double(y[i]) + c);
        return make_unary(std::move(y), a,
            [this](int ya, int pa) {
                const TensorT<T>& g = nodes_[size_t(ya)].grad;
                accum(pa, [&](TensorT<T>& d) { for (int64_t i = 0; i < g.numel(); ++i) d[i] += g[i]; });
            });
    }

    VarT<T> exp(VarT<T> a) {
        TensorT<T> y = value(a.id);
        for (int64_t i = 0; i < y.numel(); ++i) y[i] = std::exp(y[i]);
        return make_unary(std::move(y), a,
            [this](int ya, int pa) {
                const TensorT<T>& g = nodes_[size_t(ya)].grad;
                const TensorT<T>& yv = nodes_[size_t(ya)].value;
                accum(pa, [&](TensorT<T>& d) { for (int64_t i = 0; i < g.numel(); ++i) d[i] += g[i] * yv[i]; });
            });
    }

    /// sqrt(x + eps); eps keeps the derivative finite at 0.
    VarT<T> sqrt(VarT<T> a, double eps = 1e-8) {
        TensorT<T> y = value(a.id);
        for (int64_t i = 0; i < y.numel(); ++i) y[i] = std::sqrt(y[i] + T(eps));
        return make_unary(std::move(y), a,
            [this](int ya, int pa) {
                const TensorT<T>& g = nodes_[size_t(ya)].grad;
                const TensorT<T>& yv = nodes_[size_t(ya)].value;
                accum(pa, [&](TensorT<T>& d) {
                    for (int64_t i = 0; i < g.numel(); ++i) d[i] += g[i] / (T(2) * yv[i]);
                });
            });
    }

    VarT<T> silu(VarT<T> a) {
        const TensorT<T>& x = value(a.id);
        TensorT<T> y = x;
        for (int64_t i = 0; i < y.numel(); ++i) {
            const T s = T(1) / (T(1) + std::exp(-x[i]));
            y[i] = x[i] * s;
        }
        return make_unary(std::move(y), a,
            [this](int ya, int pa) {
                const TensorT<T>& g = nodes_[size_t(ya)].grad;
                const TensorT<T>& x2 = nodes_[size_t(pa)].value;
                accum(pa, [&](TensorT<T>& d) {
                    for (int64_t i = 0; i < g.numel(); ++i) {
                        const T s = T(1) / (T(1) + std::exp(-x2[i]));
                        d[i] += g[i] * s * (T(1) + x2[i] * (T(1) - s));
                    }
                });
            });
    }

    // ---- shape ------------------------------------------------------------

    VarT<T> reshape(VarT<T> a, std::vector<int> shape) {
        TensorT<T> y = value(a.id).reshaped(shape);
        return make_unary(std::move(y), a,
            [this](int ya, int pa) {
                const TensorT<T>& g = nodes_[size_t(ya)].grad;
                accum(pa, [&](TensorT<T>& d) { for (int64_t i = 0; i < g.numel(); ++i) d[i] += g[i]; });
            });
    }

    /// Concatenate along the last dimension.
    VarT<T> concat_last(VarT<T> a, VarT<T> b) {
        const TensorT<T>& va = value(a.id);
        const TensorT<T>& vb = value(b.id);
        if (va.rank() != vb.rank()) throw ShapeError("concat_last: rank mismatch");
        std::vector<int> shape = va.shape();
        const int ca = shape.back();
        const int cb = vb.shape().back();
        for (int i = 0; i + 1 < va.rank(); ++i)
            if (va.dim(i) != vb.dim(i)) throw ShapeError("concat_last: leading dims differ");
        shape.back() = ca + cb;
        TensorT<T> y(shape);
        const int64_t rows = va.numel() / ca;
        for (int64_t r = 0; r < rows; ++r) {
            std::memcpy(y.data() + r * (ca + cb), va.data() + r * ca, sizeof(T) * size_t(ca));
            std::memcpy(y.data() + r * (ca + cb) + ca, vb.data() + r * cb, sizeof(T) * size_t(cb));
        }
        return make_binary(std::move(y), a, b,
            [this, ca, cb, rows](int ya, int pa, int pb) {
                const TensorT<T>& g = nodes_[size_t(ya)].grad;
                accum(pa, [&](TensorT<T>& d) {
                    for (int64_t r = 0; r < rows; ++r)
                        for (int c = 0; c < ca; ++c) d[r * ca + c] += g[r * (ca + cb) + c];
                });
                accum(pb, [&](TensorT<T>& d) {
                    for (int64_t r = 0; r < rows; ++r)
                        for (int c = 0; c < cb; ++c) d[r * cb + c] += g[r * (ca + cb) + ca + c];
                });
            });
    }

    /// Slice channels [c0, c1) of the last dimension.
    VarT<T> slice_last(VarT<T> a, int c0, int c1) {
        const TensorT<T>& va = value(a.id);
        const int C = va.shape().back();
        if (c0 < 0 || c1 > C || c0 >= c1) throw ShapeError("slice_last: bad channel range");
        std::vector<int> shape = va.shape();
        shape.back() = c1 - c0;
        TensorT<T> y(shape);
        const int64_t rows = va.numel() / C;
        const int w = c1 - c0;
        for (int64_t r = 0; r < rows; ++r)
            std::memcpy(y.data() + r * w, va.data() + r * C + c0, sizeof(T) * size_t(w));
        return make_unary(std::move(y), a,
            [this, c0, w, C, rows](int ya, int pa) {
                const TensorT<T>& g = nodes_[size_t(ya)].grad;
                accum(pa, [&](TensorT<T>& d) {
                    for (int64_t r = 0; r < rows; ++r)
                        for (int c = 0; c < w; ++c) d[r * C + c0 + c] += g[r * w + c];
                });
            });
    }

    /// Spatial crop rows [r0,r1) x cols [c0,c1) of an (N,H,W,C) tensor.
    VarT<T> slice_hw(VarT<T> a, int r0, int r1, int c0, int c1) {
        const TensorT<T>& va = value(a.id);
        if (va.rank() != 4) throw ShapeError("slice_hw: expects rank-4");
        const int N = va.dim(0), H = va.dim(1), W = va.dim(2), C = va.dim(3);
        if (r0 < 0 || r1 > H || r0 >= r1 || c0 < 0 || c1 > W || c0 >= c1)
            throw ShapeError("slice_hw: bad range");
        TensorT<T> y({N, r1 - r0, c1 - c0, C});
        for (int n = 0; n < N; ++n)
            for (int i = r0; i < r1; ++i)
                for (int j = c0; j < c1; ++j)
                    std::memcpy(&y.at(n, i - r0, j - c0, 0), &va.at(n, i, j, 0), sizeof(T) * size_t(C));
        return make_unary(std::move(y), a,
            [this, N, C, r0, r1, c0, c1](int ya, int pa) {
                const TensorT<T>& g = nodes_[size_t(ya)].grad;
                accum(pa, [&](TensorT<T>& d) {
                    auto dv = [&](int n, int i, int j, int c) -> T& {
                        return d[((size_t(n) * d.shape()[1] + i) * d.shape()[2] + j) * C + c];
                    };
                    for (int n = 0; n < N; ++n)
                        for (int i = r0; i < r1; ++i)
                            for (int j = c0; j < c1; ++j)
                                for (int c = 0; c < C; ++c)
                                    dv(n, i, j, c) += g.at(n, i - r0, j - c0, c);
                });
            });
    }

    /// (B,N,M) -> (B,M,N)
    VarT<T> transpose_last2(VarT<T> a) {
        const TensorT<T>& va = value(a.id);
        if (va.rank() != 3) throw ShapeError("transpose_last2: expects rank-3");
        const int B = va.dim(0), N = va.dim(1), M = va.dim(2);
        TensorT<T> y({B, M, N});
        for (int b = 0; b < B; ++b)
            for (int i = 0; i < N; ++i)
                for (int j = 0; j < M; ++j) y.at(b, j, i) = va.at(b, i, j);
        return make_unary(std::move(y), a,
            [this, B, N, M](int ya, int pa) {
                const TensorT<T>& g = nodes_[size_t(ya)].grad;
                accum(pa, [&](TensorT<T>& d) {
                    for (int b = 0; b < B; ++b)
                        for (int i = 0; i < N; ++i)
                            for (int j = 0; j < M; ++j)
                                d[(size_t(b) * N + i) * M + j] += g[(size_t(b) * M + j) * N + i];
                });
            });
    }

    /// (B,L,C) -> (B*heads, L, C/heads)
    VarT<T> split_heads(VarT<T> a, int heads) {
        const TensorT<T>& va = value(a.id);
        if (va.rank() != 3) throw ShapeError("split_heads: expects rank-3");
        const int B = va.dim(0), L = va.dim(1), C = va.dim(2);
        if (C % heads != 0) throw ShapeError("split_heads: channels not divisible by heads");
        const int dh = C / heads;
        TensorT<T> y({B * heads, L, dh});
        for (int b = 0; b < B; ++b)
            for (int h = 0; h < heads; ++h)
                for (int l = 0; l < L; ++l)
                    std::memcpy(&y.at(b * heads + h, l, 0), &va.at(b, l, h * dh), sizeof(T) * size_t(dh));
        return make_unary(std::move(y), a,
            [this, B, heads, L, dh](int ya, int pa) {
                const TensorT<T>& g = nodes_[size_t(ya)].grad;
                accum(pa, [&](TensorT<T>& d) {
                    const int C = heads * dh;
                    for (int b = 0; b < B; ++b)
                        for (int h = 0; h < heads; ++h)
                            for (int l = 0; l < L; ++l)
                                for (int k = 0; k < dh; ++k)
                                    d[(size_t(b) * L + l) * C + h * dh + k] +=
                                        g[(size_t(b * heads + h) * L + l) * dh + k];
                });
            });
    }

    /// (B*heads, L, dh) -> (B, L, heads*dh)
    VarT<T> merge_heads(VarT<T> a, int heads) {
        const TensorT<T>& va = value(a.id);
        if (va.rank() != 3 || va.dim(0) % heads != 0) throw ShapeError("merge_heads: bad input");
        const int B = va.dim(0) / heads, L = va.dim(1), dh = va.dim(2);
        TensorT<T> y({B, L, heads * dh});
        for (int b = 0; b < B; ++b)
            for (int h = 0; h < heads; ++h)
                for (int l = 0; l < L; ++l)
                    std::memcpy(&y.at(b, l, h * dh), &va.at(b * heads + h, l, 0), sizeof(T) * size_t(dh));
        return make_unary(std::move(y), a,
            [this, B, heads, L, dh](int ya, int pa) {
                const TensorT<T>& g = nodes_[size_t(ya)].grad;
                accum(pa, [&](TensorT<T>& d) {
                    for (int b = 0; b < B; ++b)
                        for (int h = 0; h < heads; ++h)
                            for (int l = 0; l < L; ++l)
                                for (int k = 0; k < dh; ++k)
                                    d[(size_t(b * heads + h) * L + l) * dh + k] +=
                                        g.at(b, l, h * dh + k);
                });
            });
    }

    // ---- linear algebra ---------------------------------------------------

    VarT<T> matmul(VarT<T> a, VarT<T> b) {
        const TensorT<T>& va = value(a.id);
        const TensorT<T>& vb = value(b.id);
        if (va.rank() != 2 || vb.rank() != 2 || va.dim(1) != vb.dim(0))
            throw ShapeError("matmul: incompatible shapes " + va.shape_str() + " " + vb.shape_str());
        const int N = va.dim(0), K = va.dim(1), M = vb.dim(1);
        TensorT<T> y({N, M});
        MatMap(y.data(), N, M).noalias() = CMatMap(va.data(), N, K) * CMatMap(vb.data(), K, M);
        return make_binary(std::move(y), a, b,
            [this, N, K, M](int ya, int pa, int pb) {
                const TensorT<T>& g = nodes_[size_t(ya)].grad;
                const TensorT<T>& va2 = nodes_[size_t(pa)].value;
                const TensorT<T>& vb2 = nodes_[size_t(pb)].value;
                accum(pa, [&](TensorT<T>& d) {
                    MatMap(d.data(), N, K).noalias() += CMatMap(g.data(), N, M) * CMatMap(vb2.data(), K, M).transpose();
                });
                accum(pb, [&](TensorT<T>& d) {
                    MatMap(d.data(), K, M).noalias() += CMatMap(va2.data(), N, K).transpose() * CMatMap(g.data(), N, M);
                });
            });
    }

    /// Batched matmul: (B,N,K) x (B,K,M) -> (B,N,M)
    VarT<T> bmm(VarT<T> a, VarT<T> b) {
        const TensorT<T>& va = value(a.id);
        const TensorT<T>& vb = value(b.id);
        if (va.rank() != 3 || vb.rank() != 3 || va.dim(0) != vb.dim(0) || va.dim(2) != vb.dim(1))
            throw ShapeError("bmm: incompatible shapes");
        const int B = va.dim(0), N = va.dim(1), K = va.dim(2), M = vb.dim(2);
        TensorT<T> y({B, N, M});
        for (int i = 0; i < B; ++i)
            MatMap(y.data() + size_t(i) * N * M, N, M).noalias() =
                CMatMap(va.data() + size_t(i) * N * K, N, K) * CMatMap(vb.data() + size_t(i) * K * M, K, M);
        return make_binary(std::move(y), a, b,
            [this, B, N, K, M](int ya, int pa, int pb) {
                const TensorT<T>& g = nodes_[size_t(ya)].grad;
                const TensorT<T>& va2 = nodes_[size_t(pa)].value;
                const TensorT<T>& vb2 = nodes_[size_t(pb)].value;
                accum(pa, [&](TensorT<T>& d) {
                    for (int i = 0; i < B; ++i)
                        MatMap(d.data() + size_t(i) * N * K, N, K).noalias() +=
                            CMatMap(g.data() + size_t(i) * N * M, N, M) *
                            CMatMap(vb2.data() + size_t(i) * K * M, K, M).transpose();
                });
                accum(pb, [&](TensorT<T>& d) {
                    for (int i = 0; i < B; ++i)
                        MatMap(d.data() + size_t(i) * K * M, K, M).noalias() +=
                            CMatMap(va2.data() + size_t(i) * N * K, N, K).transpose() *
                            CMatMap(g.data() + size_t(i) * N * M, N, M);
                });
            });
    }

    /// (N,M) + bias(M) broadcast over rows.
    VarT<T> add_row(VarT<T> a, VarT<T> bias) {
        const TensorT<T>& va = value(a.id);
        const TensorT<T>& vb = value(bias.id);
        if (va.rank() != 2 || vb.rank() != 1 || vb.dim(0) != va.dim(1))
            throw ShapeError("add_row: incompatible shapes");
        const int N = va.dim(0), M = va.dim(1);
        TensorT<T> y = va;
        for (int i = 0; i < N; ++i)
            for (int j = 0; j < M; ++j) y.at(i, j) += vb[j];
        return make_binary(std::move(y), a, bias,
            [this, N, M](int ya, int pa, int pb) {
                const TensorT<T>& g = nodes_[size_t(ya)].grad;
                accum(pa, [&](TensorT<T>& d) { for (int64_t i = 0; i < g.numel(); ++i) d[i] += g[i]; });
                accum(pb, [&](TensorT<T>& d) {
                    for (int i = 0; i < N; ++i)
                        for (int j = 0; j < M; ++j) d[j] += g[size_t(i) * M + j];
                });
            });
    }

    VarT<T> softmax_last(VarT<T> a) {
        const TensorT<T>& va = value(a.id);
        const int K = va.shape().back();
        const int64_t rows = va.numel() / K;
        TensorT<T> y = va;
        for (int64_t r = 0; r < rows; ++r) {
            T* p = y.data() + r * K;
            T mx = p[0];
            for (int k = 1; k < K; ++k) mx = std::max(mx, p[k]);
            T sum = 0;
            for (int k = 0; k < K; ++k) { p[k] = std::exp(p[k] - mx); sum += p[k]; }
            for (int k = 0; k < K; ++k) p[k] /= sum;
        }
        return make_unary(std::move(y), a,
            [this, K, rows](int ya, int pa) {
                const TensorT<T>& g = nodes_[size_t(ya)].grad;
                const TensorT<T>& yv = nodes_[size_t(ya)].value;
                accum(pa, [&](TensorT<T>& d) {
                    for (int64_t r = 0; r < rows; ++r) {
                        const T* gp = g.data() + r * K;
                        const T* yp = yv.data() + r * K;
                        T dot = 0;
                        for (int k = 0; k < K; ++k) dot += gp[k] * yp[k];
                        for (int k = 0; k < K; ++k) d[r * K + k] += yp[k] * (gp[k] - dot);
                    }
                });
            });
    }

    // ---- convolution & spatial ---------------------------------------------

    /// 2-D convolution over (N,H,W,Cin), weight (kh*kw*Cin, Cout), bias (Cout).
    /// 'same' padding: pad = k/2. Stride 1 or 2.
    VarT<T> conv2d(VarT<T> x, VarT<T> w, VarT<T> b, int k, int stride) {
        const TensorT<T>& vx = value(x.id);
        const TensorT<T>& vw = value(w.id);
        const TensorT<T>& vb = value(b.id);
        if (vx.rank() != 4) throw ShapeError("conv2d: input must be (N,H,W,C)");
        const int N = vx.dim(0), H = vx.dim(1), W = vx.dim(2), Cin = vx.dim(3);
        if (vw.rank() != 2 || vw.dim(0) != k * k * Cin)
            throw ShapeError("conv2d: weight/input channel mismatch");
        const int Cout = vw.dim(1);
        if (vb.dim(0) != Cout) throw ShapeError("conv2d: bias size mismatch");
        const int pad = k / 2;
        const int OH = (H + 2 * pad - k) / stride + 1;
        const int OW = (W + 2 * pad - k) / stride + 1;
        const int K = k * k * Cin;

        TensorT<T> y({N, OH, OW, Cout});
        if (k == 1 && stride == 1) {
            MatMap(y.data(), int64_t(N) * H * W, Cout).noalias() =
                CMatMap(vx.data(), int64_t(N) * H * W, Cin) * CMatMap(vw.data(), Cin, Cout);
        } else {
            scratch_.resize(size_t(OH) * OW * K);
            for (int n = 0; n < N; ++n) {
                im2col(vx.data() + size_t(n) * H * W * Cin, H, W, Cin, k, stride, pad, OH, OW, scratch_.data());
                MatMap(y.data() + size_t(n) * OH * OW * Cout, OH * OW, Cout).noalias() =
                    CMatMap(scratch_.data(), OH * OW, K) * CMatMap(vw.data(), K, Cout);
            }
        }
        for (int64_t r = 0; r < int64_t(N) * OH * OW; ++r)
            for (int c = 0; c < Cout; ++c) y[r * Cout + c] += vb[c];

        const int xa = x.id, wa = w.id, ba = b.id;
        TensorT<T> out = std::move(y);
        const int yid = emit(std::move(out), needs_grad(x) || needs_grad(w) || needs_grad(b), nullptr);
        if (!nodes_[size_t(yid)].requires_grad) return {this, yid};
        nodes_[size_t(yid)].backward = [this, yid, xa, wa, ba, N, H, W, Cin, Cout, k, stride, pad, OH, OW, K]() {
            const TensorT<T>& g = nodes_[size_t(yid)].grad;
            const TensorT<T>& vx2 = nodes_[size_t(xa)].value;
            const TensorT<T>& vw2 = nodes_[size_t(wa)].value;
            accum(ba, [&](TensorT<T>& d) {
                for (int64_t r = 0; r < int64_t(N) * OH * OW; ++r)
                    for (int c = 0; c < Cout; ++c) d[c] += g[r * Cout + c];
            });
            if (k == 1 && stride == 1) {
                accum(wa, [&](TensorT<T>& d) {
                    MatMap(d.data(), Cin, Cout).noalias() +=
                        CMatMap(vx2.data(), int64_t(N) * H * W, Cin).transpose() *
                        CMatMap(g.data(), int64_t(N) * H * W, Cout);
                });
                accum(xa, [&](TensorT<T>& d) {
                    MatMap(d.data(), int64_t(N) * H * W, Cin).noalias() +=
                        CMatMap(g.data(), int64_t(N) * H * W, Cout) * CMatMap(vw2.data(), Cin, Cout).transpose();
                });
                return;
            }
            accum(wa, [&](TensorT<T>& d) {
                scratch_.resize(size_t(OH) * OW * K);
                for (int n = 0; n < N; ++n) {
                    im2col(vx2.data() + size_t(n) * H * W * Cin, H, W, Cin, k, stride, pad, OH, OW, scratch_.data());
                    MatMap(d.data(), K, Cout).noalias() +=
                        CMatMap(scratch_.data(), OH * OW, K).transpose() *
                        CMatMap(g.data() + size_t(n) * OH * OW * Cout, OH * OW, Cout);
                }
            });
            accum(xa, [&](TensorT<T>& d) {
                scratch_.resize(size_t(OH) * OW * K);
                for (int n = 0; n < N; ++n) {
                    MatMap(scratch_.data(), OH * OW, K).noalias() =
                        CMatMap(g.data() + size_t(n) * OH * OW * Cout, OH * OW, Cout) *
                        CMatMap(vw2.data(), K, Cout).transpose();
                    col2im_add(scratch_.data(), H, W, Cin, k, stride, pad, OH, OW,
                               d.data() + size_t(n) * H * W * Cin);
                }
            });
        };
        return {this, yid};
    }

    VarT<T> upsample_nearest(VarT<T> a, int f) {
        const TensorT<T>& va = value(a.id);
        if (va.rank() != 4) throw ShapeError("upsample_nearest: expects (N,H,W,C)");
        const int N = va.dim(0), H = va.dim(1), W = va.dim(2), C = va.dim(3);
        TensorT<T> y({N, H * f, W * f, C});
        for (int n = 0; n < N; ++n)
            for (int i = 0; i < H * f; ++i)
                for (int j = 0; j < W * f; ++j)
                    std::memcpy(&y.at(n, i, j, 0), &va.at(n, i / f, j / f, 0), sizeof(T) * size_t(C));
        return make_unary(std::move(y), a,
            [this, N, H, W, C, f](int ya, int pa) {
                const TensorT<T>& g = nodes_[size_t(ya)].grad;
                accum(pa, [&](TensorT<T>& d) {
                    for (int n = 0; n < N; ++n)
                        for (int i = 0; i < H * f; ++i)
                            for (int j = 0; j < W * f; ++j)
                                for (int c = 0; c < C; ++c)
                                    d[((size_t(n) * H + i / f) * W + j / f) * C + c] += g.at(n, i, j, c);
                });
            });
    }

    VarT<T> avgpool2(VarT<T> a) {
        const TensorT<T>& va = value(a.id);
        if (va.rank() != 4 || va.dim(1) % 2 || va.dim(2) % 2) throw ShapeError("avgpool2: dims must be even");
        const int N = va.dim(0), H = va.dim(1), W = va.dim(2), C = va.dim(3);
        TensorT<T> y({N, H / 2, W / 2, C});
        for (int n = 0; n < N; ++n)
            for (int i = 0; i < H / 2; ++i)
                for (int j = 0; j < W / 2; ++j)
                    for (int c = 0; c < C; ++c)
                        y.at(n, i, j, c) = (va.at(n, 2 * i, 2 * j, c) + va.at(n, 2 * i, 2 * j + 1, c) +
                                            va.at(n, 2 * i + 1, 2 * j, c) + va.at(n, 2 * i + 1, 2 * j + 1, c)) / T(4);
        return make_unary(std::move(y), a,
            [this, N, H, W, C](int ya, int pa) {
                const TensorT<T>& g = nodes_[size_t(ya)].grad;
                accum(pa, [&](TensorT<T>& d) {
                    for (int n = 0; n < N; ++n)
                        for (int i = 0; i < H; ++i)
                            for (int j = 0; j < W; ++j)
                                for (int c = 0; c < C; ++c)
                                    d[((size_t(n) * H + i) * W + j) * C + c] += g.at(n, i / 2, j / 2, c) / T(4);
                });
            });
    }

    /// (N,H,W,C) -> (N,C) spatial mean.
    VarT<T> global_avg_pool(VarT<T> a) {
        const TensorT<T>& va = value(a.id);
        if (va.rank() != 4) throw ShapeError("global_avg_pool: expects (N,H,W,C)");
        const int N = va.dim(0), H = va.dim(1), W = va.dim(2), C = va.dim(3);
        TensorT<T> y({N, C});
        for (int n = 0; n < N; ++n)
            for (int i = 0; i < H; ++i)
                for (int j = 0; j < W; ++j)
                    for (int c = 0; c < C; ++c) y.at(n, c) += va.at(n, i, j, c);
        const T inv = T(1) / T(H * W);
        for (int64_t i = 0; i < y.numel(); ++i) y[i] *= inv;
        return make_unary(std::move(y), a,
            [this, N, H, W, C, inv](int ya, int pa) {
                const TensorT<T>& g = nodes_[size_t(ya)].grad;
                accum(pa, [&](TensorT<T>& d) {
                    for (int n = 0; n < N; ++n)
                        for (int i = 0; i < H; ++i)
                            for (int j = 0; j < W; ++j)
                                for (int c = 0; c < C; ++c)
                                    d[((size_t(n) * H + i) * W + j) * C + c] += g.at(n, c) * inv;
                });
            });
    }

    /// (N,C) -> (N,H,W,C), each channel value repeated over the plane.
    VarT<T> broadcast_hw(VarT<T> v, int H, int W) {
        const TensorT<T>& vv = value(v.id);
        if (vv.rank() != 2) throw ShapeError("broadcast_hw: expects (N,C)");
        const int N = vv.dim(0), C = vv.dim(1);
        TensorT<T> y({N, H, W, C});
        for (int n = 0; n < N; ++n)
            for (int i = 0; i < H; ++i)
                for (int j = 0; j < W; ++j)
                    std::memcpy(&y.at(n, i, j, 0), &vv.at(n, 0), sizeof(T) * size_t(C));
        return make_unary(std::move(y), v,
            [this, N, H, W, C](int ya, int pa) {
                const TensorT<T>& g = nodes_[size_t(ya)].grad;
                accum(pa, [&](TensorT<T>& d) {
                    for (int n = 0; n < N; ++n)
                        for (int i = 0; i < H; ++i)
                            for (int j = 0; j < W; ++j)
                                for (int c = 0; c < C; ++c) d[size_t(n) * C + c] += g.at(n, i, j, c);
                });
            });
    }

    /// GroupNorm over (N,H,W,C) with per-channel gamma/beta.
    VarT<T> group_norm(VarT<T> x, VarT<T> gamma, VarT<T> beta, int groups, double eps = 1e-5) {
        const TensorT<T>& vx = value(x.id);
        if (vx.rank() != 4) throw ShapeError("group_norm: expects (N,H,W,C)");
        const int N = vx.dim(0), H = vx.dim(1), W = vx.dim(2), C = vx.dim(3);
        if (C % groups != 0) throw ShapeError("group_norm: C not divisible by groups");
        const TensorT<T>& vg = value(gamma.id);
        const TensorT<T>& vb = value(beta.id);
        if (vg.dim(0) != C || vb.dim(0) != C) throw ShapeError("group_norm: gamma/beta size");
        const int Cg = C / groups;
        const int64_t m = int64_t(H) * W * Cg;

        auto xhat = std::make_shared<TensorT<T>>(vx.shape());
        auto inv = std::make_shared<TensorT<T>>(std::vector<int>{N, groups});
        TensorT<T> y(vx.shape());
        for (int n = 0; n < N; ++n) {
            for (int gidx = 0; gidx < groups; ++gidx) {
                double mean = 0;
                for (int i = 0; i < H; ++i)
                    for (int j = 0; j < W; ++j)
                        for (int c = gidx * Cg; c < (gidx + 1) * Cg; ++c) mean += vx.at(n, i, j, c);
                mean /= double(m);
                double var = 0;
                for (int i = 0; i < H; ++i)
                    for (int j = 0; j < W; ++j)
                        for (int c = gidx * Cg; c < (gidx + 1) * Cg; ++c) {
                            const double dv = vx.at(n, i, j, c) - mean;
                            var += dv * dv;
                        }
                var /= double(m);
                const T iv = T(1.0 / std::sqrt(var + eps));
                inv->at(n, gidx) = iv;
                for (int i = 0; i < H; ++i)
                    for (int j = 0; j < W; ++j)
                        for (int c = gidx * Cg; c < (gidx + 1) * Cg; ++c) {
                            const T xh = (vx.at(n, i, j, c) - T(mean)) * iv;
                            xhat->at(n, i, j, c) = xh;
                            y.at(n, i, j, c) = vg[c] * xh + vb[c];
                        }
            }
        }
        const int xa = x.id, ga = gamma.id, ba = beta.id;
        const int yid = emit(std::move(y), needs_grad(x) || needs_grad(gamma) || needs_grad(beta), nullptr);
        if (!nodes_[size_t(yid)].requires_grad) return {this, yid};
        nodes_[size_t(yid)].backward = [this, yid, xa, ga, ba, xhat, inv, N, H, W, C, groups, Cg, m]() {
            const TensorT<T>& g = nodes_[size_t(yid)].grad;
            const TensorT<T>& vg2 = nodes_[size_t(ga)].value;
            accum(ga, [&](TensorT<T>& d) {
                for (int n = 0; n < N; ++n)
                    for (int i = 0; i < H; ++i)
                        for (int j = 0; j < W; ++j)
                            for (int c = 0; c < C; ++c) d[c] += g.at(n, i, j, c) * xhat->at(n, i, j, c);
            });
            accum(ba, [&](TensorT<T>& d) {
                for (int n = 0; n < N; ++n)
                    for (int i = 0; i < H; ++i)
                        for (int j = 0; j < W; ++j)
                            for (int c = 0; c < C; ++c) d[c] += g.at(n, i, j, c);
            });
            accum(xa, [&](TensorT<T>& d) {
                for (int n = 0; n < N; ++n) {
                    for (int gidx = 0; gidx < groups; ++gidx) {
                        double sum_dxh = 0, sum_dxh_xh = 0;
                        for (int i = 0; i < H; ++i)
                            for (int j = 0; j < W; ++j)
                                for (int c = gidx * Cg; c < (gidx + 1) * Cg; ++c) {
                                    const double dxh = double(g.at(n, i, j, c)) * vg2[c];
                                    sum_dxh += dxh;
                                    sum_dxh_xh += dxh * xhat->at(n, i, j, c);
                                }
                        const double mean_dxh = sum_dxh / double(m);
                        const double mean_dxh_xh = sum_dxh_xh / double(m);
                        const T iv = inv->at(n, gidx);
                        for (int i = 0; i < H; ++i)
                            for (int j = 0; j < W; ++j)
                                for (int c = gidx * Cg; c < (gidx + 1) * Cg; ++c) {
                                    const double dxh = double(g.at(n, i, j, c)) * vg2[c];
                                    d[((size_t(n) * H + i) * W + j) * C + c] +=
                                        T(double(iv) * (dxh - mean_dxh - double(xhat->at(n, i, j, c)) * mean_dxh_xh));
                                }
                    }
                }
            });
        };
        return {this, yid};
    }

    // ---- reductions ---------------------------------------------------------

    VarT<T> sum_all(VarT<T> a) {
        const TensorT<T>& va = value(a.id);
        double s = 0;
        for (int64_t i = 0; i < va.numel(); ++i) s += va[i];
        TensorT<T> y = TensorT<T>::full({1}, T(s));
        return make_unary(std::move(y), a,
            [this](int ya, int pa) {
                const T g = nodes_[size_t(ya)].grad[0];
                accum(pa, [&](TensorT<T>& d) { for (int64_t i = 0; i < d.numel(); ++i) d[i] += g; });
            });
    }

    VarT<T> mean_all(VarT<T> a) {
        const int64_t n = value(a.id).numel();
        return scale(sum_all(a), 1.0 / double(n));
    }

    /// Mean squared error over all elements.
    VarT<T> mse(VarT<T> a, VarT<T> b) {
        check_same_shape(value(a.id), value(b.id), "mse");
        const TensorT<T>& va = value(a.id);
        const TensorT<T>& vb = value(b.id);
        const int64_t n = va.numel();
        double s = 0;
        for (int64_t i = 0; i < n; ++i) {
            const double dv = double(va[i]) - double(vb[i]);
            s += dv * dv;
        }
        TensorT<T> y = TensorT<T>::full({1}, T(s / double(n)));
        return make_binary(std::move(y), a, b,
            [this, n](int ya, int pa, int pb) {
                const T g = nodes_[size_t(ya)].grad[0];
                const TensorT<T>& va2 = nodes_[size_t(pa)].value;
                const TensorT<T>& vb2 = nodes_[size_t(pb)].value;
                const T coeff = g * T(2) / T(n);
                accum(pa, [&](TensorT<T>& d) { for (int64_t i = 0; i < n; ++i) d[i] += coeff * (va2[i] - vb2[i]); });
                accum(pb, [&](TensorT<T>& d) { for (int64_t i = 0; i < n; ++i) d[i] -= coeff * (va2[i] - vb2[i]); });
            });
    }

private:
    struct Node {
        TensorT<T> value;
        TensorT<T> grad;
        std::function<void()> backward;
        bool requires_grad = false;
    };

    bool needs_grad(VarT<T> v) const { return nodes_[size_t(v.id)].requires_grad; }

    int emit(TensorT<T> value, bool requires_grad, std::function<void()> backward) {
        Node n;
        n.value = std::move(value);
        n.requires_grad = requires_grad;
        n.backward = std::move(backward);
        nodes_.push_back(std::move(n));
        return int(nodes_.size()) - 1;
    }

    TensorT<T>& grad_buffer(int id) {
        Node& n = nodes_[size_t(id)];
        if (n.grad.empty()) n.grad = TensorT<T>::zeros(n.value.shape());
        return n.grad;
    }

    /// Run `fn` on the parent's grad buffer only if that parent wants grads.
    template <class Fn>
    void accum(int parent, Fn&& fn) {
        if (!nodes_[size_t(parent)].requires_grad) return;
        fn(grad_buffer(parent));
    }

    template <class Fn>
    VarT<T> make_unary(TensorT<T> y, VarT<T> a, Fn&& back) {
        const int pa = a.id;
        const int yid = emit(std::move(y), needs_grad(a), nullptr);
        if (nodes_[size_t(yid)].requires_grad)
            nodes_[size_t(yid)].backward = [this, yid, pa, back]() { back(yid, pa); };
        return {this, yid};
    }

    template <class Fn>
    VarT<T> make_binary(TensorT<T> y, VarT<T> a, VarT<T> b, Fn&& back) {
        const int pa = a.id, pb = b.id;
        const int yid = emit(std::move(y), needs_grad(a) || needs_grad(b), nullptr);
        if (nodes_[size_t(yid)].requires_grad)
            nodes_[size_t(yid)].backward = [this, yid, pa, pb, back]() { back(yid, pa, pb); };
        return {this, yid};
    }

    static void im2col(const T* x, int H, int W, int Cin, int k, int stride, int pad,
                       int OH, int OW, T* cols) {
        const int K = k * k * Cin;
        for (int oh = 0; oh < OH; ++oh) {
            for (int ow = 0; ow < OW; ++ow) {
                T* row = cols + (size_t(oh) * OW + ow) * K;
                for (int kh = 0; kh < k; ++kh) {
                    const int ih = oh * stride - pad + kh;
                    for (int kw = 0; kw < k; ++kw) {
                        const int iw = ow * stride - pad + kw;
                        T* dst = row + (size_t(kh) * k + kw) * Cin;
                        if (ih >= 0 && ih < H && iw >= 0 && iw < W)
                            std::memcpy(dst, x + (size_t(ih) * W + iw) * Cin, sizeof(T) * size_t(Cin));
                        else
                            std::memset(dst, 0, sizeof(T) * size_t(Cin));
                    }
                }
            }
        }
    }

    static void col2im_add(const T* cols, int H, int W, int Cin, int k, int stride, int pad,
                           int OH, int OW, T* dx) {
        const int K = k * k * Cin;
        for (int oh = 0; oh < OH; ++oh) {
            for (int ow = 0; ow < OW; ++ow) {
                const T* row = cols + (size_t(oh) * OW + ow) * K;
                for (int kh = 0; kh < k; ++kh) {
                    const int ih = oh * stride - pad + kh;
                    if (ih < 0 || ih >= H) continue;
                    for (int kw = 0; kw < k; ++kw) {
                        const int iw = ow * stride - pad + kw;
                        if (iw < 0 || iw >= W) continue;
                        const T* src = row + (size_t(kh) * k + kw) * Cin;
                        T* dst = dx + (size_t(ih) * W + iw) * Cin;
                        for (int c = 0; c < Cin; ++c) dst[c] += src[c];
                    }
                }
            }
        }
    }

    std::vector<Node> nodes_;
    std::unordered_map<const TensorT<T>*, int> param_nodes_;
    std::vector<std::pair<int, TensorT<T>*>> bindings_;
    std::vector<T> scratch_;
};

using Graph = GraphT<float>;
using Var = VarT<float>;

} // namespace luminet
