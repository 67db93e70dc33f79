// SPDX-License-Identifier: Apache-2.0
//
// Loss terms. Conventions, fixed here and relied on by the tests:
//  - reconstruction losses are means over ALL elements (mask included), so
//    batch size and mask area do not change the scale;
//  - router loss averages the prior-weight map over included layers first,
//    then takes the mean over pixels of ((1-M)(1-Rbar))^2;
//  - object loss max-normalizes each cross-attention column to [0,1] and uses
//    region means (sum over region / region size).

#pragma once

#include <utility>
#include <vector>

#include "moa/tensor.hpp"

namespace moa {

// First/last attention-layer indices dropped from the router and object
// losses; they carry low-level features.
struct LayerExclusion {
    int first = 2;
    int last = 3;

    bool included(int layer_index, int n_layers) const {
        return layer_index >= first && layer_index < n_layers - last;
    }
};

// mean over all elements of (M (eps - eps_hat))^2; mask is [N x 1], broadcast
// over channels.
template <class S>
TensorT<S> masked_recon_loss(const TensorT<S>& eps, const TensorT<S>& eps_hat,
                             const TensorT<S>& mask) {
    if (eps.shape != eps_hat.shape) throw ShapeError("masked_recon_loss: shape mismatch");
    return mean(square(mul(mask, sub(eps, eps_hat))));
}

template <class S>
TensorT<S> full_recon_loss(const TensorT<S>& eps, const TensorT<S>& eps_hat) {
    if (eps.shape != eps_hat.shape) throw ShapeError("full_recon_loss: shape mismatch");
    return mean(square(sub(eps, eps_hat)));
}

// router_maps: one [N x 2] map per attention layer of a single timestep,
// column 0 = prior. mask: [N x 1] foreground.
template <class S>
TensorT<S> router_loss(const std::vector<TensorT<S>>& router_maps, const TensorT<S>& mask,
                       const LayerExclusion& excl) {
    const int n_layers = static_cast<int>(router_maps.size());
    std::vector<TensorT<S>> included;
    for (int l = 0; l < n_layers; ++l)
        if (excl.included(l, n_layers)) included.push_back(slice(router_maps[static_cast<size_t>(l)], 1, 0, 1));
    if (included.empty()) throw ConfigError("router_loss: all layers excluded");
    TensorT<S> acc = included[0];
    for (size_t i = 1; i < included.size(); ++i) acc = add(acc, included[i]);
    TensorT<S> rbar = scale(acc, 1.0 / static_cast<double>(included.size()));
    TensorT<S> term = mul(sub_from_scalar(1.0, mask), sub_from_scalar(1.0, rbar));
    return mean(square(term));
}

enum class ObjectLossVariant { fastcomposer, as_printed };

template <class S>
struct ObjectLossResult {
    TensorT<S> loss;
    int pairs = 0;     // (layer, subject) pairs that contributed
    int excluded = 0;  // pairs skipped for an empty region
};

// cross_maps: personalization cross-attention maps per block (layer index
// 2b+1). masks: per-subject [N x 1]; positions: subject token column per
// subject.
template <class S>
ObjectLossResult<S> object_loss(const std::vector<TensorT<S>>& cross_maps,
                                const std::vector<TensorT<S>>& masks,
                                const std::vector<int>& positions, const LayerExclusion& excl,
                                ObjectLossVariant variant, int n_layers) {
    if (masks.size() != positions.size()) throw ShapeError("object_loss: masks/positions mismatch");
    ObjectLossResult<S> res;
    std::vector<TensorT<S>> contributions;
    for (size_t b = 0; b < cross_maps.size(); ++b) {
        const int layer_index = static_cast<int>(2 * b + 1);
        if (!excl.included(layer_index, n_layers)) continue;
        const TensorT<S>& map = cross_maps[b];
        const double n_pixels = static_cast<double>(map.shape[0]);
        for (size_t s = 0; s < masks.size(); ++s) {
            const TensorT<S>& m = masks[s];
            double fg = 0;
            for (const S v : *m.data) fg += static_cast<double>(v);
            const double bg = n_pixels - fg;
            if (fg == 0 || bg == 0) {
                ++res.excluded;
                continue;
            }
            TensorT<S> col = slice(map, 1, positions[s], 1);
            TensorT<S> a = div(col, reduce_max(col));  // per-map max normalization
            TensorT<S> contrib;
            if (variant == ObjectLossVariant::fastcomposer) {
                TensorT<S> bg_mean = scale(sum(mul(sub_from_scalar(1.0, m), a)), 1.0 / bg);
                TensorT<S> fg_mean = scale(sum(mul(m, a)), 1.0 / fg);
                contrib = sub(bg_mean, fg_mean);
            } else {
                // Literal printed form: whole-map means of the masked terms.
                TensorT<S> t1 = mean(mul(sub_from_scalar(1.0, m), sub_from_scalar(1.0, a)));
                TensorT<S> t2 = mean(mul(m, a));
                contrib = sub(t1, t2);
            }
            contributions.push_back(contrib);
            ++res.pairs;
        }
    }
    if (contributions.empty()) {
        res.loss = TensorT<S>::scalar(S(0));
        return res;
    }
    TensorT<S> acc = contributions[0];
    for (size_t i = 1; i < contributions.size(); ++i) acc = add(acc, contributions[i]);
    res.loss = scale(acc, 1.0 / static_cast<double>(res.pairs));
    return res;
}

}  // namespace moa
