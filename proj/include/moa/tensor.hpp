// SPDX-License-Identifier: Apache-2.0
//
// Dense tensor with reverse-mode autodiff.
//
// Design notes:
//  - Tensors are values. Copies share the underlying data/grad buffers, so a
//    tensor captured inside a backward closure still refers to the live
//    parameter storage.
//  - Gradient buffers are allocated at creation time whenever requires_grad
//    is set, and never reallocated afterwards; all shared copies therefore
//    see the same accumulator. Frozen parameters keep a null accumulator.
//  - Every op runs its loops in fixed index order; the same inputs produce
//    bit-identical outputs and gradients across runs.
//  - Every op scans its output for NaN/Inf (see finite_checks()).
//
// The scalar type is a template parameter: float for training, double for
// gradient-check mode.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "moa/common.hpp"
#include "moa/rng.hpp"

namespace moa {

using Shape = std::vector<int>;

inline size_t shape_numel(const Shape& s) {
    size_t n = 1;
    for (int d : s) n *= static_cast<size_t>(d);
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

template <class S>
struct NodeT;

template <class S>
struct TensorT {
    Shape shape;
    std::shared_ptr<std::vector<S>> data;
    std::shared_ptr<std::vector<S>> grad;  // null unless requires_grad
    bool requires_grad = false;
    std::shared_ptr<NodeT<S>> node;

    TensorT() = default;

    static TensorT zeros(Shape shape, bool requires_grad = false) {
        TensorT t;
        t.shape = std::move(shape);
        t.data = std::make_shared<std::vector<S>>(shape_numel(t.shape), S(0));
        t.set_requires_grad(requires_grad);
        return t;
    }

    static TensorT full(Shape shape, S value, bool requires_grad = false) {
        TensorT t = zeros(std::move(shape), requires_grad);
        std::fill(t.data->begin(), t.data->end(), value);
        return t;
    }

    static TensorT from(Shape shape, std::vector<S> values, bool requires_grad = false) {
        if (values.size() != shape_numel(shape))
            throw ShapeError("from: " + shape_str(shape) + " needs " +
                             std::to_string(shape_numel(shape)) + " values, got " +
                             std::to_string(values.size()));
        TensorT t;
        t.shape = std::move(shape);
        t.data = std::make_shared<std::vector<S>>(std::move(values));
        t.set_requires_grad(requires_grad);
        return t;
    }

    static TensorT scalar(S value) { return from({1}, {value}); }

    static TensorT randn(Shape shape, Rng& rng, double stddev = 1.0, bool requires_grad = false) {
        TensorT t = zeros(std::move(shape), requires_grad);
        for (auto& v : *t.data) v = static_cast<S>(rng.normal() * stddev);
        return t;
    }

    size_t numel() const { return data ? data->size() : 0; }
    int rank() const { return static_cast<int>(shape.size()); }
    S* ptr() { return data->data(); }
    const S* ptr() const { return data->data(); }
    S* gptr() { return grad ? grad->data() : nullptr; }
    const S* gptr() const { return grad ? grad->data() : nullptr; }

    int dim(int i) const {
        if (i < 0) i += rank();
        return shape[static_cast<size_t>(i)];
    }

    S item() const {
        if (numel() != 1) throw ShapeError("item: tensor " + shape_str(shape) + " is not scalar");
        return (*data)[0];
    }

    S at(std::initializer_list<int> idx) const {
        size_t lin = 0;
        size_t i = 0;
        for (int v : idx) lin = lin * static_cast<size_t>(shape[i++]) + static_cast<size_t>(v);
        return (*data)[lin];
    }

    // Allocate (or keep) the gradient accumulator. Must be called before the
    // tensor is shared; afterwards the buffer identity is stable.
    void set_requires_grad(bool rg) {
        requires_grad = rg;
        if (rg && !grad) grad = std::make_shared<std::vector<S>>(numel(), S(0));
        if (!rg) grad = nullptr;
    }

    void zero_grad() {
        if (grad) std::fill(grad->begin(), grad->end(), S(0));
    }

    // Deep copy of values (fresh buffers, no graph).
    TensorT clone_detached(bool requires_grad = false) const {
        TensorT t;
        t.shape = shape;
        t.data = std::make_shared<std::vector<S>>(*data);
        t.set_requires_grad(requires_grad);
        return t;
    }
};

template <class S>
struct NodeT {
    const char* op = "";
    std::vector<TensorT<S>> parents;
    Shape out_shape;
    std::shared_ptr<std::vector<S>> out_data;
    std::shared_ptr<std::vector<S>> out_grad;
    std::function<void(NodeT<S>&)> backward;
};

namespace detail {

template <class S>
void check_finite(const char* op, const std::vector<S>& v) {
    if (!finite_checks()) return;
    for (const S x : v) {
        if (!std::isfinite(static_cast<double>(x)))
            throw NumericsError(std::string(op) + ": non-finite value in output");
    }
}

template <class S>
bool any_requires_grad(const std::vector<TensorT<S>>& ts) {
    for (const auto& t : ts)
        if (t.requires_grad) return true;
    return false;
}

// Wrap computed values into a graph tensor.
template <class S>
TensorT<S> make_result(const char* op, Shape shape, std::vector<S> values,
                       std::vector<TensorT<S>> parents,
                       std::function<void(NodeT<S>&)> backward) {
    check_finite(op, values);
    TensorT<S> out;
    out.shape = std::move(shape);
    out.data = std::make_shared<std::vector<S>>(std::move(values));
    const bool rg = grad_enabled() && any_requires_grad(parents);
    out.set_requires_grad(rg);
    if (rg) {
        auto node = std::make_shared<NodeT<S>>();
        node->op = op;
        node->parents = std::move(parents);
        node->out_shape = out.shape;
        node->out_data = out.data;
        node->out_grad = out.grad;
        node->backward = std::move(backward);
        out.node = node;
    }
    return out;
}

// ---- broadcasting ---------------------------------------------------------

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
    const int ra = static_cast<int>(a.size());
    const int rb = static_cast<int>(b.size());
    const int r = std::max(ra, rb);
    Shape out(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) {
        const int da = (i < r - ra) ? 1 : a[static_cast<size_t>(i - (r - ra))];
        const int db = (i < r - rb) ? 1 : b[static_cast<size_t>(i - (r - rb))];
        if (da != db && da != 1 && db != 1)
            throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " +
                             shape_str(b));
        out[static_cast<size_t>(i)] = std::max(da, db);
    }
    return out;
}

// Row-major strides with 0 for broadcast dimensions, aligned to `out` rank.
inline std::vector<size_t> broadcast_strides(const Shape& in, const Shape& out) {
    const int r = static_cast<int>(out.size());
    const int ri = static_cast<int>(in.size());
    std::vector<size_t> strides(static_cast<size_t>(r), 0);
    size_t s = 1;
    for (int i = ri - 1; i >= 0; --i) {
        const int pos = i + (r - ri);
        strides[static_cast<size_t>(pos)] = (in[static_cast<size_t>(i)] == 1) ? 0 : s;
        s *= static_cast<size_t>(in[static_cast<size_t>(i)]);
    }
    return strides;
}

// Visit every linear index of `out` together with mapped indices into a and b.
template <class Fn>
void broadcast_walk(const Shape& out, const std::vector<size_t>& sa, const std::vector<size_t>& sb,
                    Fn&& fn) {
    const int r = static_cast<int>(out.size());
    const size_t n = shape_numel(out);
    std::vector<int> idx(static_cast<size_t>(r), 0);
    size_t ia = 0, ib = 0;
    for (size_t lin = 0; lin < n; ++lin) {
        fn(lin, ia, ib);
        for (int d = r - 1; d >= 0; --d) {
            ++idx[static_cast<size_t>(d)];
            ia += sa[static_cast<size_t>(d)];
            ib += sb[static_cast<size_t>(d)];
            if (idx[static_cast<size_t>(d)] < out[static_cast<size_t>(d)]) break;
            ia -= sa[static_cast<size_t>(d)] * static_cast<size_t>(out[static_cast<size_t>(d)]);
            ib -= sb[static_cast<size_t>(d)] * static_cast<size_t>(out[static_cast<size_t>(d)]);
            idx[static_cast<size_t>(d)] = 0;
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops with NumPy-style broadcasting.
// ---------------------------------------------------------------------------

namespace detail {

// fwd(a,b) -> out; da(go,a,b) and db(go,a,b) give the per-element gradients.
template <class S, class F, class Da, class Db>
TensorT<S> binary_op(const char* op, const TensorT<S>& a, const TensorT<S>& b, F fwd, Da da, Db db) {
    const Shape out_shape = broadcast_shape(a.shape, b.shape, op);
    const size_t n = shape_numel(out_shape);
    std::vector<S> out(n);

    const S* pa = a.ptr();
    const S* pb = b.ptr();
    const bool same = (a.shape == b.shape);
    std::vector<size_t> sa, sb;
    if (same) {
        for (size_t i = 0; i < n; ++i) out[i] = fwd(pa[i], pb[i]);
    } else if (b.numel() == 1) {
        const S bv = pb[0];
        for (size_t i = 0; i < n; ++i) out[i] = fwd(pa[i], bv);
    } else if (a.numel() == 1) {
        const S av = pa[0];
        for (size_t i = 0; i < n; ++i) out[i] = fwd(av, pb[i]);
    } else {
        sa = broadcast_strides(a.shape, out_shape);
        sb = broadcast_strides(b.shape, out_shape);
        broadcast_walk(out_shape, sa, sb,
                       [&](size_t lin, size_t ia, size_t ib) { out[lin] = fwd(pa[ia], pb[ib]); });
    }

    return make_result<S>(
        op, out_shape, std::move(out), {a, b}, [op, fwd, da, db](NodeT<S>& self) {
            const TensorT<S>& pa_t = self.parents[0];
            const TensorT<S>& pb_t = self.parents[1];
            const S* go = self.out_grad->data();
            const S* av = pa_t.ptr();
            const S* bv = pb_t.ptr();
            const size_t n2 = self.out_data->size();
            const bool same2 = (pa_t.shape == pb_t.shape);
            if (same2) {
                if (pa_t.requires_grad) {
                    S* g = pa_t.grad->data();
                    for (size_t i = 0; i < n2; ++i) g[i] += da(go[i], av[i], bv[i]);
                }
                if (pb_t.requires_grad) {
                    S* g = pb_t.grad->data();
                    for (size_t i = 0; i < n2; ++i) g[i] += db(go[i], av[i], bv[i]);
                }
                return;
            }
            const auto sa2 = broadcast_strides(pa_t.shape, self.out_shape);
            const auto sb2 = broadcast_strides(pb_t.shape, self.out_shape);
            S* ga = pa_t.requires_grad ? pa_t.grad->data() : nullptr;
            S* gb = pb_t.requires_grad ? pb_t.grad->data() : nullptr;
            broadcast_walk(self.out_shape, sa2, sb2, [&](size_t lin, size_t ia, size_t ib) {
                if (ga) ga[ia] += da(go[lin], av[ia], bv[ib]);
                if (gb) gb[ib] += db(go[lin], av[ia], bv[ib]);
            });
        });
}

}  // namespace detail

template <class S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
    return detail::binary_op<S>(
        "add", a, b, [](S x, S y) { return x + y; }, [](S g, S, S) { return g; },
        [](S g, S, S) { return g; });
}

template <class S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
    return detail::binary_op<S>(
        "sub", a, b, [](S x, S y) { return x - y; }, [](S g, S, S) { return g; },
        [](S g, S, S) { return -g; });
}

template <class S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
    return detail::binary_op<S>(
        "mul", a, b, [](S x, S y) { return x * y; }, [](S g, S, S y) { return g * y; },
        [](S g, S x, S) { return g * x; });
}

template <class S>
TensorT<S> div(const TensorT<S>& a, const TensorT<S>& b) {
    return detail::binary_op<S>(
        "div", a, b, [](S x, S y) { return x / y; }, [](S g, S, S y) { return g / y; },
        [](S g, S x, S y) { return -g * x / (y * y); });
}

// ---------------------------------------------------------------------------
// Elementwise unary ops.
// ---------------------------------------------------------------------------

namespace detail {

template <class S, class F, class D>
TensorT<S> unary_op(const char* op, const TensorT<S>& a, F fwd, D dfn) {
    const size_t n = a.numel();
    std::vector<S> out(n);
    const S* p = a.ptr();
    for (size_t i = 0; i < n; ++i) out[i] = fwd(p[i]);
    return make_result<S>(op, a.shape, std::move(out), {a}, [dfn](NodeT<S>& self) {
        const TensorT<S>& pa = self.parents[0];
        if (!pa.requires_grad) return;
        const S* go = self.out_grad->data();
        const S* x = pa.ptr();
        const S* y = self.out_data->data();
        S* g = pa.grad->data();
        const size_t n2 = self.out_data->size();
        for (size_t i = 0; i < n2; ++i) g[i] += dfn(go[i], x[i], y[i]);
    });
}

}  // namespace detail

template <class S>
TensorT<S> scale(const TensorT<S>& a, double s) {
    const S sv = static_cast<S>(s);
    return detail::unary_op<S>(
        "scale", a, [sv](S x) { return x * sv; }, [sv](S g, S, S) { return g * sv; });
}

template <class S>
TensorT<S> add_scalar(const TensorT<S>& a, double s) {
    const S sv = static_cast<S>(s);
    return detail::unary_op<S>(
        "add_scalar", a, [sv](S x) { return x + sv; }, [](S g, S, S) { return g; });
}

// s - x, handy for (1 - M) style expressions.
template <class S>
TensorT<S> sub_from_scalar(double s, const TensorT<S>& a) {
    const S sv = static_cast<S>(s);
    return detail::unary_op<S>(
        "sub_from_scalar", a, [sv](S x) { return sv - x; }, [](S g, S, S) { return -g; });
}

template <class S>
TensorT<S> square(const TensorT<S>& a) {
    return detail::unary_op<S>(
        "square", a, [](S x) { return x * x; }, [](S g, S x, S) { return S(2) * g * x; });
}

// Exact GELU (erf form).
template <class S>
TensorT<S> gelu(const TensorT<S>& a) {
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    constexpr double inv_sqrt2pi = 0.39894228040143267794;
    return detail::unary_op<S>(
        "gelu", a,
        [](S x) {
            const double xd = static_cast<double>(x);
            return static_cast<S>(0.5 * xd * (1.0 + std::erf(xd * inv_sqrt2)));
        },
        [](S g, S x, S) {
            const double xd = static_cast<double>(x);
            const double cdf = 0.5 * (1.0 + std::erf(xd * inv_sqrt2));
            const double pdf = inv_sqrt2pi * std::exp(-0.5 * xd * xd);
            return static_cast<S>(static_cast<double>(g) * (cdf + xd * pdf));
        });
}

// ---------------------------------------------------------------------------
// Matrix multiply, optionally transposing either operand. The transpose flags
// let attention compute Q·K^T and both backward products without materializing
// transposed copies.
// ---------------------------------------------------------------------------

namespace detail {

// C[m x n] (+)= opA(A) * opB(B); A is (ta ? k x m : m x k), B is (tb ? n x k : k x n).
template <class S>
void gemm(const S* A, const S* B, S* C, int m, int k, int n, bool ta, bool tb, bool accumulate) {
    if (!accumulate) std::fill(C, C + static_cast<size_t>(m) * static_cast<size_t>(n), S(0));
    if (!ta && !tb) {
        for (int i = 0; i < m; ++i) {
            S* crow = C + static_cast<size_t>(i) * n;
            const S* arow = A + static_cast<size_t>(i) * k;
            for (int p = 0; p < k; ++p) {
                const S a = arow[p];
                const S* brow = B + static_cast<size_t>(p) * n;
                for (int j = 0; j < n; ++j) crow[j] += a * brow[j];
            }
        }
    } else if (!ta && tb) {
        // Deterministic 8-lane tree reduction; the fixed lane layout keeps the
        // result bit-stable while letting the dot products vectorize.
        for (int i = 0; i < m; ++i) {
            const S* arow = A + static_cast<size_t>(i) * k;
            S* crow = C + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) {
                const S* brow = B + static_cast<size_t>(j) * k;
                S lane[8] = {S(0), S(0), S(0), S(0), S(0), S(0), S(0), S(0)};
                int p = 0;
                for (; p + 8 <= k; p += 8)
                    for (int u = 0; u < 8; ++u) lane[u] += arow[p + u] * brow[p + u];
                S acc = ((lane[0] + lane[1]) + (lane[2] + lane[3])) +
                        ((lane[4] + lane[5]) + (lane[6] + lane[7]));
                for (; p < k; ++p) acc += arow[p] * brow[p];
                crow[j] += acc;
            }
        }
    } else if (ta && !tb) {
        for (int p = 0; p < k; ++p) {
            const S* arow = A + static_cast<size_t>(p) * m;
            const S* brow = B + static_cast<size_t>(p) * n;
            for (int i = 0; i < m; ++i) {
                const S a = arow[i];
                S* crow = C + static_cast<size_t>(i) * n;
                for (int j = 0; j < n; ++j) crow[j] += a * brow[j];
            }
        }
    } else {
        for (int i = 0; i < m; ++i) {
            S* crow = C + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) {
                const S* brow = B + static_cast<size_t>(j) * k;
                S acc = S(0);
                for (int p = 0; p < k; ++p) acc += A[static_cast<size_t>(p) * m + i] * brow[p];
                crow[j] += acc;
            }
        }
    }
}

}  // namespace detail

template <class S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b, bool trans_a = false,
                  bool trans_b = false) {
    if (a.rank() != 2 || b.rank() != 2)
        throw ShapeError("matmul: expects rank-2 tensors, got " + shape_str(a.shape) + " and " +
                         shape_str(b.shape));
    const int m = trans_a ? a.shape[1] : a.shape[0];
    const int ka = trans_a ? a.shape[0] : a.shape[1];
    const int kb = trans_b ? b.shape[1] : b.shape[0];
    const int n = trans_b ? b.shape[0] : b.shape[1];
    if (ka != kb)
        throw ShapeError("matmul: inner extents differ, " + shape_str(a.shape) +
                         (trans_a ? "^T" : "") + " * " + shape_str(b.shape) + (trans_b ? "^T" : ""));

    std::vector<S> out(static_cast<size_t>(m) * static_cast<size_t>(n));
    detail::gemm(a.ptr(), b.ptr(), out.data(), m, ka, n, trans_a, trans_b, false);

    return detail::make_result<S>(
        "matmul", {m, n}, std::move(out), {a, b}, [m, ka, n, trans_a, trans_b](NodeT<S>& self) {
            const TensorT<S>& A = self.parents[0];
            const TensorT<S>& B = self.parents[1];
            const S* go = self.out_grad->data();
            if (A.requires_grad) {
                // dA accumulated in A's own layout.
                if (!trans_a)
                    detail::gemm(go, B.ptr(), A.grad->data(), m, n, ka, false, !trans_b, true);
                else
                    detail::gemm(B.ptr(), go, A.grad->data(), ka, n, m, trans_b, true, true);
            }
            if (B.requires_grad) {
                if (!trans_b)
                    detail::gemm(A.ptr(), go, B.grad->data(), ka, m, n, !trans_a, false, true);
                else
                    detail::gemm(go, A.ptr(), B.grad->data(), n, m, ka, true, trans_a, true);
            }
        });
}

// ---------------------------------------------------------------------------
// Axis helpers: (outer, len, inner) decomposition of a shape around one axis.
// ---------------------------------------------------------------------------

namespace detail {

struct AxisSplit {
    size_t outer;
    int len;
    size_t inner;
};

inline AxisSplit axis_split(const Shape& shape, int axis, const char* op) {
    const int r = static_cast<int>(shape.size());
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw ShapeError(std::string(op) + ": axis out of range");
    AxisSplit s{1, shape[static_cast<size_t>(axis)], 1};
    for (int i = 0; i < axis; ++i) s.outer *= static_cast<size_t>(shape[static_cast<size_t>(i)]);
    for (int i = axis + 1; i < r; ++i) s.inner *= static_cast<size_t>(shape[static_cast<size_t>(i)]);
    return s;
}

}  // namespace detail

// Numerically stable softmax along `axis` (max subtraction).
template <class S>
TensorT<S> softmax(const TensorT<S>& x, int axis) {
    const auto sp = detail::axis_split(x.shape, axis, "softmax");
    std::vector<S> out(x.numel());
    const S* p = x.ptr();
    for (size_t o = 0; o < sp.outer; ++o) {
        for (size_t i = 0; i < sp.inner; ++i) {
            const size_t base = o * static_cast<size_t>(sp.len) * sp.inner + i;
            S mx = p[base];
            for (int t = 1; t < sp.len; ++t)
                mx = std::max(mx, p[base + static_cast<size_t>(t) * sp.inner]);
            S sum = S(0);
            for (int t = 0; t < sp.len; ++t) {
                const size_t k = base + static_cast<size_t>(t) * sp.inner;
                out[k] = std::exp(p[k] - mx);
                sum += out[k];
            }
            const S inv = S(1) / sum;
            for (int t = 0; t < sp.len; ++t) out[base + static_cast<size_t>(t) * sp.inner] *= inv;
        }
    }
    return detail::make_result<S>("softmax", x.shape, std::move(out), {x}, [sp](NodeT<S>& self) {
        const TensorT<S>& px = self.parents[0];
        if (!px.requires_grad) return;
        const S* y = self.out_data->data();
        const S* go = self.out_grad->data();
        S* g = px.grad->data();
        for (size_t o = 0; o < sp.outer; ++o) {
            for (size_t i = 0; i < sp.inner; ++i) {
                const size_t base = o * static_cast<size_t>(sp.len) * sp.inner + i;
                S dot = S(0);
                for (int t = 0; t < sp.len; ++t) {
                    const size_t k = base + static_cast<size_t>(t) * sp.inner;
                    dot += go[k] * y[k];
                }
                for (int t = 0; t < sp.len; ++t) {
                    const size_t k = base + static_cast<size_t>(t) * sp.inner;
                    g[k] += (go[k] - dot) * y[k];
                }
            }
        }
    });
}

// LayerNorm over `axis` with affine gain/bias (rank-1, length = extent of axis).
template <class S>
TensorT<S> layernorm(const TensorT<S>& x, const TensorT<S>& gain, const TensorT<S>& bias, int axis,
                     double eps = 1e-5) {
    const auto sp = detail::axis_split(x.shape, axis, "layernorm");
    if (gain.numel() != static_cast<size_t>(sp.len) || bias.numel() != static_cast<size_t>(sp.len))
        throw ShapeError("layernorm: gain/bias extent " + std::to_string(gain.numel()) + "/" +
                         std::to_string(bias.numel()) + " does not match axis extent " +
                         std::to_string(sp.len));
    std::vector<S> out(x.numel());
    auto xhat = std::make_shared<std::vector<S>>(x.numel());
    auto inv_std = std::make_shared<std::vector<S>>(sp.outer * sp.inner);
    const S* p = x.ptr();
    const S* gn = gain.ptr();
    const S* bs = bias.ptr();
    const S epsv = static_cast<S>(eps);
    for (size_t o = 0; o < sp.outer; ++o) {
        for (size_t i = 0; i < sp.inner; ++i) {
            const size_t base = o * static_cast<size_t>(sp.len) * sp.inner + i;
            S mean = S(0);
            for (int t = 0; t < sp.len; ++t) mean += p[base + static_cast<size_t>(t) * sp.inner];
            mean /= static_cast<S>(sp.len);
            S var = S(0);
            for (int t = 0; t < sp.len; ++t) {
                const S d = p[base + static_cast<size_t>(t) * sp.inner] - mean;
                var += d * d;
            }
            var /= static_cast<S>(sp.len);
            const S inv = S(1) / std::sqrt(var + epsv);
            (*inv_std)[o * sp.inner + i] = inv;
            for (int t = 0; t < sp.len; ++t) {
                const size_t k = base + static_cast<size_t>(t) * sp.inner;
                const S xh = (p[k] - mean) * inv;
                (*xhat)[k] = xh;
                out[k] = xh * gn[t] + bs[t];
            }
        }
    }
    return detail::make_result<S>(
        "layernorm", x.shape, std::move(out), {x, gain, bias}, [sp, xhat, inv_std](NodeT<S>& self) {
            const TensorT<S>& px = self.parents[0];
            const TensorT<S>& pg = self.parents[1];
            const TensorT<S>& pb = self.parents[2];
            const S* go = self.out_grad->data();
            const S* gn = pg.ptr();
            const S len_inv = S(1) / static_cast<S>(sp.len);
            for (size_t o = 0; o < sp.outer; ++o) {
                for (size_t i = 0; i < sp.inner; ++i) {
                    const size_t base = o * static_cast<size_t>(sp.len) * sp.inner + i;
                    const S inv = (*inv_std)[o * sp.inner + i];
                    S sum_dxhat = S(0), sum_dxhat_xhat = S(0);
                    for (int t = 0; t < sp.len; ++t) {
                        const size_t k = base + static_cast<size_t>(t) * sp.inner;
                        const S dxh = go[k] * gn[t];
                        sum_dxhat += dxh;
                        sum_dxhat_xhat += dxh * (*xhat)[k];
                    }
                    for (int t = 0; t < sp.len; ++t) {
                        const size_t k = base + static_cast<size_t>(t) * sp.inner;
                        const S dxh = go[k] * gn[t];
                        if (px.requires_grad)
                            px.grad->data()[k] += inv * (dxh - len_inv * sum_dxhat -
                                                         (*xhat)[k] * len_inv * sum_dxhat_xhat);
                        if (pg.requires_grad) pg.grad->data()[t] += go[k] * (*xhat)[k];
                        if (pb.requires_grad) pb.grad->data()[t] += go[k];
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Reductions.
// ---------------------------------------------------------------------------

template <class S>
TensorT<S> sum(const TensorT<S>& x) {
    S acc = S(0);
    const S* p = x.ptr();
    const size_t n = x.numel();
    for (size_t i = 0; i < n; ++i) acc += p[i];
    return detail::make_result<S>("sum", {1}, {acc}, {x}, [](NodeT<S>& self) {
        const TensorT<S>& px = self.parents[0];
        if (!px.requires_grad) return;
        const S g = (*self.out_grad)[0];
        S* gp = px.grad->data();
        const size_t n2 = px.numel();
        for (size_t i = 0; i < n2; ++i) gp[i] += g;
    });
}

template <class S>
TensorT<S> mean(const TensorT<S>& x) {
    return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

// Sum along one axis, keeping it with extent 1 (broadcast friendly).
template <class S>
TensorT<S> sum_axis(const TensorT<S>& x, int axis) {
    const auto sp = detail::axis_split(x.shape, axis, "sum_axis");
    Shape out_shape = x.shape;
    const int ax = axis < 0 ? axis + x.rank() : axis;
    out_shape[static_cast<size_t>(ax)] = 1;
    std::vector<S> out(sp.outer * sp.inner, S(0));
    const S* p = x.ptr();
    for (size_t o = 0; o < sp.outer; ++o)
        for (int t = 0; t < sp.len; ++t)
            for (size_t i = 0; i < sp.inner; ++i)
                out[o * sp.inner + i] += p[(o * static_cast<size_t>(sp.len) + static_cast<size_t>(t)) * sp.inner + i];
    return detail::make_result<S>("sum_axis", out_shape, std::move(out), {x}, [sp](NodeT<S>& self) {
        const TensorT<S>& px = self.parents[0];
        if (!px.requires_grad) return;
        const S* go = self.out_grad->data();
        S* g = px.grad->data();
        for (size_t o = 0; o < sp.outer; ++o)
            for (int t = 0; t < sp.len; ++t)
                for (size_t i = 0; i < sp.inner; ++i)
                    g[(o * static_cast<size_t>(sp.len) + static_cast<size_t>(t)) * sp.inner + i] +=
                        go[o * sp.inner + i];
    });
}

template <class S>
TensorT<S> mean_axis(const TensorT<S>& x, int axis) {
    const auto sp = detail::axis_split(x.shape, axis, "mean_axis");
    return scale(sum_axis(x, axis), 1.0 / static_cast<double>(sp.len));
}

// Max over all elements; gradient flows to the first argmax.
template <class S>
TensorT<S> reduce_max(const TensorT<S>& x) {
    const S* p = x.ptr();
    const size_t n = x.numel();
    size_t arg = 0;
    for (size_t i = 1; i < n; ++i)
        if (p[i] > p[arg]) arg = i;
    return detail::make_result<S>("reduce_max", {1}, {p[arg]}, {x}, [arg](NodeT<S>& self) {
        const TensorT<S>& px = self.parents[0];
        if (!px.requires_grad) return;
        px.grad->data()[arg] += (*self.out_grad)[0];
    });
}

// ---------------------------------------------------------------------------
// Shape ops.
// ---------------------------------------------------------------------------

template <class S>
TensorT<S> reshape(const TensorT<S>& x, Shape new_shape) {
    if (shape_numel(new_shape) != x.numel())
        throw ShapeError("reshape: " + shape_str(x.shape) + " -> " + shape_str(new_shape));
    // Copies the buffer; keeps buffer identities simple at negligible cost for
    // the sizes used here.
    std::vector<S> out(*x.data);
    return detail::make_result<S>("reshape", std::move(new_shape), std::move(out), {x},
                                  [](NodeT<S>& self) {
                                      const TensorT<S>& px = self.parents[0];
                                      if (!px.requires_grad) return;
                                      const S* go = self.out_grad->data();
                                      S* g = px.grad->data();
                                      const size_t n = px.numel();
                                      for (size_t i = 0; i < n; ++i) g[i] += go[i];
                                  });
}

template <class S>
TensorT<S> concat(const std::vector<TensorT<S>>& parts, int axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    Shape out_shape = parts[0].shape;
    const int r = static_cast<int>(out_shape.size());
    int ax = axis < 0 ? axis + r : axis;
    if (ax < 0 || ax >= r) throw ShapeError("concat: axis out of range");
    int total = 0;
    for (const auto& p : parts) {
        if (p.rank() != r) throw ShapeError("concat: rank mismatch");
        for (int i = 0; i < r; ++i)
            if (i != ax && p.shape[static_cast<size_t>(i)] != out_shape[static_cast<size_t>(i)])
                throw ShapeError("concat: extent mismatch at dim " + std::to_string(i));
        total += p.shape[static_cast<size_t>(ax)];
    }
    out_shape[static_cast<size_t>(ax)] = total;

    const auto osp = detail::axis_split(out_shape, ax, "concat");
    std::vector<S> out(shape_numel(out_shape));
    size_t offset = 0;  // running offset along the concat axis
    for (const auto& p : parts) {
        const auto isp = detail::axis_split(p.shape, ax, "concat");
        const S* src = p.ptr();
        for (size_t o = 0; o < isp.outer; ++o)
            for (int t = 0; t < isp.len; ++t)
                std::memcpy(out.data() + (o * static_cast<size_t>(osp.len) + offset +
                                          static_cast<size_t>(t)) * osp.inner,
                            src + (o * static_cast<size_t>(isp.len) + static_cast<size_t>(t)) * isp.inner,
                            isp.inner * sizeof(S));
        offset += static_cast<size_t>(isp.len);
    }

    return detail::make_result<S>("concat", out_shape, std::move(out), parts, [ax, osp](NodeT<S>& self) {
        const S* go = self.out_grad->data();
        size_t off = 0;
        for (auto& p : self.parents) {
            const auto isp = detail::axis_split(p.shape, ax, "concat");
            if (p.requires_grad) {
                S* g = p.grad->data();
                for (size_t o = 0; o < isp.outer; ++o)
                    for (int t = 0; t < isp.len; ++t) {
                        const S* src = go + (o * static_cast<size_t>(osp.len) + off +
                                             static_cast<size_t>(t)) * osp.inner;
                        S* dst = g + (o * static_cast<size_t>(isp.len) + static_cast<size_t>(t)) * isp.inner;
                        for (size_t i = 0; i < isp.inner; ++i) dst[i] += src[i];
                    }
            }
            off += static_cast<size_t>(isp.len);
        }
    });
}

template <class S>
TensorT<S> slice(const TensorT<S>& x, int axis, int start, int len) {
    const int r = x.rank();
    int ax = axis < 0 ? axis + r : axis;
    if (ax < 0 || ax >= r) throw ShapeError("slice: axis out of range");
    const int extent = x.shape[static_cast<size_t>(ax)];
    if (start < 0 || len <= 0 || start + len > extent)
        throw ShapeError("slice: [" + std::to_string(start) + "," + std::to_string(start + len) +
                         ") out of extent " + std::to_string(extent));
    Shape out_shape = x.shape;
    out_shape[static_cast<size_t>(ax)] = len;
    const auto isp = detail::axis_split(x.shape, ax, "slice");
    std::vector<S> out(shape_numel(out_shape));
    const S* p = x.ptr();
    for (size_t o = 0; o < isp.outer; ++o)
        for (int t = 0; t < len; ++t)
            std::memcpy(out.data() + (o * static_cast<size_t>(len) + static_cast<size_t>(t)) * isp.inner,
                        p + (o * static_cast<size_t>(isp.len) + static_cast<size_t>(start + t)) * isp.inner,
                        isp.inner * sizeof(S));
    return detail::make_result<S>(
        "slice", out_shape, std::move(out), {x}, [isp, start, len](NodeT<S>& self) {
            const TensorT<S>& px = self.parents[0];
            if (!px.requires_grad) return;
            const S* go = self.out_grad->data();
            S* g = px.grad->data();
            for (size_t o = 0; o < isp.outer; ++o)
                for (int t = 0; t < len; ++t) {
                    const S* src = go + (o * static_cast<size_t>(len) + static_cast<size_t>(t)) * isp.inner;
                    S* dst = g + (o * static_cast<size_t>(isp.len) + static_cast<size_t>(start + t)) * isp.inner;
                    for (size_t i = 0; i < isp.inner; ++i) dst[i] += src[i];
                }
        });
}

// Embedding lookup: rows of a [V x d] table.
template <class S>
TensorT<S> gather_rows(const TensorT<S>& table, const std::vector<int>& ids) {
    if (table.rank() != 2) throw ShapeError("gather_rows: table must be rank-2");
    const int v = table.shape[0];
    const int d = table.shape[1];
    for (int id : ids)
        if (id < 0 || id >= v)
            throw ShapeError("gather_rows: id " + std::to_string(id) + " out of vocabulary " +
                             std::to_string(v));
    std::vector<S> out(ids.size() * static_cast<size_t>(d));
    const S* p = table.ptr();
    for (size_t i = 0; i < ids.size(); ++i)
        std::memcpy(out.data() + i * static_cast<size_t>(d),
                    p + static_cast<size_t>(ids[i]) * static_cast<size_t>(d),
                    static_cast<size_t>(d) * sizeof(S));
    return detail::make_result<S>("gather_rows", {static_cast<int>(ids.size()), d}, std::move(out),
                                  {table}, [ids, d](NodeT<S>& self) {
                                      const TensorT<S>& pt = self.parents[0];
                                      if (!pt.requires_grad) return;
                                      const S* go = self.out_grad->data();
                                      S* g = pt.grad->data();
                                      for (size_t i = 0; i < ids.size(); ++i) {
                                          S* dst = g + static_cast<size_t>(ids[i]) * static_cast<size_t>(d);
                                          const S* src = go + i * static_cast<size_t>(d);
                                          for (int j = 0; j < d; ++j) dst[j] += src[j];
                                      }
                                  });
}

// x [m x n] * W [n x p] + b [p]
template <class S>
TensorT<S> linear(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& b) {
    return add(matmul(x, w), b);
}

// ---------------------------------------------------------------------------
// Backward engine: topological sort over nodes, closures run in reverse.
// ---------------------------------------------------------------------------

template <class S>
void backward(const TensorT<S>& loss) {
    if (loss.numel() != 1) throw ShapeError("backward: loss must be scalar");
    if (!loss.node) {
        if (loss.requires_grad && loss.grad) (*loss.grad)[0] += S(1);
        return;
    }

    // Iterative post-order DFS; construction order makes this deterministic.
    std::vector<NodeT<S>*> order;
    std::unordered_set<NodeT<S>*> seen;
    struct Frame {
        NodeT<S>* node;
        size_t next_parent;
    };
    std::vector<Frame> stack;
    stack.push_back({loss.node.get(), 0});
    seen.insert(loss.node.get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        bool descended = false;
        while (f.next_parent < f.node->parents.size()) {
            NodeT<S>* p = f.node->parents[f.next_parent++].node.get();
            if (p && seen.insert(p).second) {
                stack.push_back({p, 0});
                descended = true;
                break;
            }
        }
        if (!descended && f.next_parent >= f.node->parents.size()) {
            order.push_back(f.node);
            stack.pop_back();
        }
    }

    (*loss.grad)[0] += S(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        NodeT<S>& n = **it;
        if (n.backward) n.backward(n);
    }
}

using Tensor = TensorT<float>;
using DTensor = TensorT<double>;

// ---------------------------------------------------------------------------
// Named parameter.
// ---------------------------------------------------------------------------

template <class S>
struct ParameterT {
    TensorT<S> value;
    std::string name;
    bool trainable = true;

    ParameterT() = default;
    ParameterT(TensorT<S> v, std::string n, bool train = true)
        : value(std::move(v)), name(std::move(n)), trainable(train) {
        value.set_requires_grad(trainable);
    }

    void set_trainable(bool t) {
        trainable = t;
        value.set_requires_grad(t);
    }

    size_t numel() const { return value.numel(); }
};

template <class S>
using ParamRefs = std::vector<ParameterT<S>*>;

using Parameter = ParameterT<float>;

}  // namespace moa
