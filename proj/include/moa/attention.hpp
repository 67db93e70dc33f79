// SPDX-License-Identifier: Apache-2.0
//
// Scaled dot-product attention and the projection bundle used as one expert
// inside a mixture layer.

#pragma once

#include <cmath>
#include <string>
#include <utility>

#include "moa/tensor.hpp"

namespace moa {

enum class AttnKind { self_attn, cross_attn };

// out = softmax(Q K^T / sqrt(d)) V. Also returns the row-stochastic attention
// map, which downstream losses consume.
template <class S>
std::pair<TensorT<S>, TensorT<S>> scaled_attention(const TensorT<S>& q, const TensorT<S>& k,
                                                   const TensorT<S>& v) {
    if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2)
        throw ShapeError("scaled_attention: rank-2 inputs expected");
    const int d = q.shape[1];
    if (k.shape[1] != d) throw ShapeError("scaled_attention: K width != Q width");
    if (v.shape[0] != k.shape[0]) throw ShapeError("scaled_attention: V rows != K rows");
    if (k.shape[0] < 1) throw ShapeError("scaled_attention: needs at least one key");
    TensorT<S> logits = scale(matmul(q, k, false, true), 1.0 / std::sqrt(static_cast<double>(d)));
    TensorT<S> attn = softmax(logits, 1);
    return {matmul(attn, v), attn};
}

template <class S>
struct AttentionExpertT {
    ParameterT<S> wq;   // [d_z x d]
    ParameterT<S> wk;   // [d_c x d]
    ParameterT<S> wv;   // [d_c x d]
    ParameterT<S> wout; // [d x d_z]
    int d = 0;
    int heads = 1;
    AttnKind kind = AttnKind::self_attn;

    static AttentionExpertT init(int d_z, int d_c, int d, int heads, AttnKind kind, Rng& rng,
                                 const std::string& prefix, double init_std = 0.02) {
        if (heads < 1 || d % heads != 0)
            throw ConfigError("attention: heads must divide hidden width");
        AttentionExpertT e;
        e.d = d;
        e.heads = heads;
        e.kind = kind;
        e.wq = ParameterT<S>(TensorT<S>::randn({d_z, d}, rng, init_std), prefix + ".wq");
        e.wk = ParameterT<S>(TensorT<S>::randn({d_c, d}, rng, init_std), prefix + ".wk");
        e.wv = ParameterT<S>(TensorT<S>::randn({d_c, d}, rng, init_std), prefix + ".wv");
        e.wout = ParameterT<S>(TensorT<S>::randn({d, d_z}, rng, init_std), prefix + ".wout");
        return e;
    }

    // Z: [l_q x d_z], C: [l_k x d_c]. Self-attention callers pass C = Z.
    // Returns the projected output and the attention map (head-averaged when
    // heads > 1).
    std::pair<TensorT<S>, TensorT<S>> forward(const TensorT<S>& z, const TensorT<S>& c) const {
        if (c.shape[1] != wk.value.shape[0])
            throw ShapeError("attention expert: condition width " + std::to_string(c.shape[1]) +
                             " != " + std::to_string(wk.value.shape[0]));
        if (z.shape[1] != wq.value.shape[0])
            throw ShapeError("attention expert: hidden width " + std::to_string(z.shape[1]) +
                             " != " + std::to_string(wq.value.shape[0]));
        TensorT<S> q = matmul(z, wq.value);
        TensorT<S> k = matmul(c, wk.value);
        TensorT<S> v = matmul(c, wv.value);
        if (heads == 1) {
            auto [attended, attn] = scaled_attention(q, k, v);
            return {matmul(attended, wout.value), attn};
        }
        const int dh = d / heads;
        std::vector<TensorT<S>> outs, maps;
        outs.reserve(static_cast<size_t>(heads));
        maps.reserve(static_cast<size_t>(heads));
        for (int h = 0; h < heads; ++h) {
            auto [o, a] = scaled_attention(slice(q, 1, h * dh, dh), slice(k, 1, h * dh, dh),
                                           slice(v, 1, h * dh, dh));
            outs.push_back(o);
            maps.push_back(a);
        }
        TensorT<S> merged = concat(outs, 1);
        TensorT<S> attn_sum = maps[0];
        for (int h = 1; h < heads; ++h) attn_sum = add(attn_sum, maps[h]);
        return {matmul(merged, wout.value), scale(attn_sum, 1.0 / heads)};
    }

    void set_trainable(bool t) {
        wq.set_trainable(t);
        wk.set_trainable(t);
        wv.set_trainable(t);
        wout.set_trainable(t);
    }

    void freeze() { set_trainable(false); }

    bool frozen() const {
        return !wq.trainable && !wk.trainable && !wv.trainable && !wout.trainable;
    }

    // Fresh buffers, same values; used to split one pretrained layer into two
    // experts.
    AttentionExpertT clone_with_prefix(const std::string& prefix) const {
        AttentionExpertT e;
        e.d = d;
        e.heads = heads;
        e.kind = kind;
        e.wq = ParameterT<S>(wq.value.clone_detached(), prefix + ".wq");
        e.wk = ParameterT<S>(wk.value.clone_detached(), prefix + ".wk");
        e.wv = ParameterT<S>(wv.value.clone_detached(), prefix + ".wv");
        e.wout = ParameterT<S>(wout.value.clone_detached(), prefix + ".wout");
        return e;
    }

    void collect(ParamRefs<S>& out) {
        out.push_back(&wq);
        out.push_back(&wk);
        out.push_back(&wv);
        out.push_back(&wout);
    }
};

using AttentionExpert = AttentionExpertT<float>;

}  // namespace moa
