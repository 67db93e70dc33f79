// SPDX-License-Identifier: Apache-2.0
//
// Mixture-of-attention layer: a frozen prior expert, a trainable
// personalization expert, and a per-pixel softmax router over the two.

#pragma once

#include <optional>
#include <string>
#include <utility>

#include "moa/attention.hpp"
#include "moa/tensor.hpp"

namespace moa {

struct RouterConfig {
    bool mlp = false;           // false: single linear layer; true: one GELU hidden layer
    double prior_logit_bias = 2.0;  // initial prior-branch preference (~0.88 weight)
};

// Maps each latent pixel's hidden state to a distribution over experts.
// Column 0 is the prior expert everywhere; the router loss depends on it.
template <class S>
struct RouterT {
    static constexpr int kExperts = 2;

    ParameterT<S> w;  // [d_z x 2]
    ParameterT<S> b;  // [2]
    std::optional<ParameterT<S>> hidden_w;  // [d_z x d_z]
    std::optional<ParameterT<S>> hidden_b;  // [d_z]

    static RouterT init(int d_z, const RouterConfig& cfg, Rng& rng, const std::string& prefix) {
        RouterT r;
        // Zero weights, biased toward the prior: every pixel starts at
        // softmax([bias, 0]).
        r.w = ParameterT<S>(TensorT<S>::zeros({d_z, kExperts}), prefix + ".w");
        TensorT<S> bias = TensorT<S>::zeros({kExperts});
        (*bias.data)[0] = static_cast<S>(cfg.prior_logit_bias);
        r.b = ParameterT<S>(std::move(bias), prefix + ".b");
        if (cfg.mlp) {
            r.hidden_w = ParameterT<S>(TensorT<S>::randn({d_z, d_z}, rng, 0.02), prefix + ".hidden_w");
            r.hidden_b = ParameterT<S>(TensorT<S>::zeros({d_z}), prefix + ".hidden_b");
        }
        return r;
    }

    // Z: [l_q x d_z] -> R: [l_q x 2], rows sum to 1.
    TensorT<S> route(const TensorT<S>& z) const {
        TensorT<S> h = z;
        if (hidden_w) h = gelu(linear(h, hidden_w->value, hidden_b->value));
        return softmax(linear(h, w.value, b.value), 1);
    }

    void set_trainable(bool t) {
        w.set_trainable(t);
        b.set_trainable(t);
        if (hidden_w) hidden_w->set_trainable(t);
        if (hidden_b) hidden_b->set_trainable(t);
    }

    void collect(ParamRefs<S>& out) {
        out.push_back(&w);
        out.push_back(&b);
        if (hidden_w) out.push_back(&*hidden_w);
        if (hidden_b) out.push_back(&*hidden_b);
    }
};

template <class S>
struct MoAForwardT {
    TensorT<S> z;       // mixed output [l_q x d_z]
    TensorT<S> r;       // router map [l_q x 2], column 0 = prior
    TensorT<S> a_pers;  // personalization expert's attention map [l_q x l_k]
};

template <class S>
struct MoALayerT {
    AttentionExpertT<S> prior;
    AttentionExpertT<S> personalized;
    RouterT<S> router;
    int layer_index = 0;

    // Both experts start from the same pretrained weights; the prior copy is
    // frozen immediately.
    static MoALayerT from_pretrained(const AttentionExpertT<S>& pretrained, const RouterConfig& rcfg,
                                     int d_z, Rng& rng, int layer_index,
                                     const std::string& prefix) {
        MoALayerT l;
        l.prior = pretrained.clone_with_prefix(prefix + ".prior");
        l.personalized = pretrained.clone_with_prefix(prefix + ".pers");
        l.router = RouterT<S>::init(d_z, rcfg, rng, prefix + ".router");
        l.layer_index = layer_index;
        l.freeze_prior();
        return l;
    }

    void freeze_prior() { prior.freeze(); }

    // Z_out[i] = R[i,0] * prior(Z,C_prior)[i] + R[i,1] * pers(Z,C_pers)[i].
    MoAForwardT<S> forward(const TensorT<S>& z, const TensorT<S>& c_prior,
                           const TensorT<S>& c_pers) const {
        auto [prior_out, prior_map] = prior.forward(z, c_prior);
        (void)prior_map;
        auto [pers_out, pers_map] = personalized.forward(z, c_pers);
        TensorT<S> r = router.route(z);
        TensorT<S> mixed = add(mul(slice(r, 1, 0, 1), prior_out), mul(slice(r, 1, 1, 1), pers_out));
        return {mixed, r, pers_map};
    }

    void collect(ParamRefs<S>& out) {
        prior.collect(out);
        personalized.collect(out);
        router.collect(out);
    }

    void collect_trainable_side(ParamRefs<S>& pers_and_router, ParamRefs<S>& prior_side) {
        personalized.collect(pers_and_router);
        router.collect(pers_and_router);
        prior.collect(prior_side);
    }
};

using Router = RouterT<float>;
using MoALayer = MoALayerT<float>;

}  // namespace moa
