// SPDX-License-Identifier: Apache-2.0
//
// Text and multimodal conditioning:
//  - toy text encoder (embedding lookup + two self-attention mixer blocks)
//  - toy image encoder (patch-average pooling + two-layer map)
//  - spacetime tables re-encoding bound tokens per (timestep, layer)
//
// The text pathway belongs to the prior model and freezes with it; everything
// that touches image features is personalization-side and stays trainable.

#pragma once

#include <algorithm>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "moa/attention.hpp"
#include "moa/synthdata.hpp"
#include "moa/tensor.hpp"

namespace moa {

// ---------------------------------------------------------------------------
// Vocabulary: null token + caption words; class words are the subject tokens.
// ---------------------------------------------------------------------------

struct Vocabulary {
    std::vector<std::string> words;
    std::unordered_map<std::string, int> index;
    int null_id = 0;
    std::vector<int> subject_ids;

    static Vocabulary standard() {
        Vocabulary v;
        auto put = [&](const std::string& w) {
            if (!v.index.count(w)) {
                v.index[w] = static_cast<int>(v.words.size());
                v.words.push_back(w);
            }
        };
        put("<null>");
        put("a");
        put("and");
        for (const char* s : {"circle", "square", "triangle"}) {
            put(s);
            v.subject_ids.push_back(v.index[s]);
        }
        for (const auto& ph : context_phrases())
            for (const auto& w : ph.words) put(w);
        return v;
    }

    int size() const { return static_cast<int>(words.size()); }

    int id(const std::string& w) const {
        auto it = index.find(w);
        if (it == index.end()) throw ConfigError("unknown token '" + w + "'");
        return it->second;
    }

    bool is_subject(int token_id) const {
        return std::find(subject_ids.begin(), subject_ids.end(), token_id) != subject_ids.end();
    }

    // Pads with the null token; the all-null sequence is the unconditional
    // embedding used by classifier-free guidance.
    std::vector<int> tokenize(const std::vector<std::string>& caption, int pad_to) const {
        if (static_cast<int>(caption.size()) > pad_to)
            throw ConfigError("caption longer than " + std::to_string(pad_to) + " tokens");
        std::vector<int> ids(static_cast<size_t>(pad_to), null_id);
        for (size_t i = 0; i < caption.size(); ++i) ids[i] = id(caption[i]);
        return ids;
    }

    std::vector<int> null_ids(int pad_to) const {
        return std::vector<int>(static_cast<size_t>(pad_to), null_id);
    }
};

inline std::vector<std::string> split_caption(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : text) {
        if (c == ' ' || c == '\t' || c == '\n') {
            if (!cur.empty()) out.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

// ---------------------------------------------------------------------------
// Text encoder.
// ---------------------------------------------------------------------------

template <class S>
struct TextEncoderT {
    ParameterT<S> embedding;  // [V x d_t]
    ParameterT<S> pos;        // [txt_len x d_t]
    struct Mixer {
        ParameterT<S> ln_g, ln_b;
        AttentionExpertT<S> attn;
    };
    std::vector<Mixer> mixers;
    int txt_len = 0;
    int d_t = 0;

    static TextEncoderT init(int vocab, int d_t, int txt_len, Rng& rng, const std::string& prefix,
                             double init_std = 0.02) {
        TextEncoderT t;
        t.txt_len = txt_len;
        t.d_t = d_t;
        t.embedding = ParameterT<S>(TensorT<S>::randn({vocab, d_t}, rng, init_std), prefix + ".embedding");
        t.pos = ParameterT<S>(TensorT<S>::randn({txt_len, d_t}, rng, init_std), prefix + ".pos");
        for (int i = 0; i < 2; ++i) {
            Mixer m;
            const std::string mp = prefix + ".mixer" + std::to_string(i);
            m.ln_g = ParameterT<S>(TensorT<S>::full({d_t}, S(1)), mp + ".ln_g");
            m.ln_b = ParameterT<S>(TensorT<S>::zeros({d_t}), mp + ".ln_b");
            m.attn = AttentionExpertT<S>::init(d_t, d_t, d_t, 1, AttnKind::self_attn, rng, mp + ".attn",
                                               init_std);
            t.mixers.push_back(std::move(m));
        }
        return t;
    }

    // ids must already be padded to txt_len. Raw-embedding overrides replace
    // rows before mixing (token-embedding interpolation enters here).
    TensorT<S> encode(const std::vector<int>& ids,
                      const std::map<int, TensorT<S>>& overrides = {}) const {
        if (static_cast<int>(ids.size()) != txt_len)
            throw ShapeError("encode_text: expected " + std::to_string(txt_len) + " ids");
        TensorT<S> e = gather_rows(embedding.value, ids);
        if (!overrides.empty()) {
            std::vector<TensorT<S>> rows;
            rows.reserve(ids.size());
            for (int i = 0; i < txt_len; ++i) {
                auto it = overrides.find(i);
                rows.push_back(it == overrides.end() ? slice(e, 0, i, 1) : it->second);
            }
            e = concat(rows, 0);
        }
        TensorT<S> x = add(e, pos.value);
        for (const auto& m : mixers) {
            TensorT<S> h = layernorm(x, m.ln_g.value, m.ln_b.value, 1);
            auto [attended, map] = m.attn.forward(h, h);
            (void)map;
            x = add(x, attended);
        }
        return x;
    }

    // Raw embedding-table row for a token (pre-mixer), as a [1 x d_t] tensor.
    TensorT<S> token_embedding(int token_id) const {
        return gather_rows(embedding.value, std::vector<int>{token_id});
    }

    void set_trainable(bool t) {
        embedding.set_trainable(t);
        pos.set_trainable(t);
        for (auto& m : mixers) {
            m.ln_g.set_trainable(t);
            m.ln_b.set_trainable(t);
            m.attn.set_trainable(t);
        }
    }

    void collect(ParamRefs<S>& out) {
        out.push_back(&embedding);
        out.push_back(&pos);
        for (auto& m : mixers) {
            out.push_back(&m.ln_g);
            out.push_back(&m.ln_b);
            m.attn.collect(out);
        }
    }
};

// ---------------------------------------------------------------------------
// Image encoder: patch-average pooling grid + two-layer map to d_f.
// ---------------------------------------------------------------------------

template <class S>
struct ImageEncoderT {
    ParameterT<S> w1, b1, w2, b2;
    int input_res = 32;
    int grid = 4;
    int d_f = 32;
    int hidden = 64;

    static ImageEncoderT init(int input_res, int grid, int d_f, Rng& rng, const std::string& prefix,
                              double init_std = 0.02) {
        if (input_res % grid != 0) throw ConfigError("image encoder: grid must divide resolution");
        ImageEncoderT e;
        e.input_res = input_res;
        e.grid = grid;
        e.d_f = d_f;
        const int pooled = grid * grid * 3;
        e.w1 = ParameterT<S>(TensorT<S>::randn({pooled, e.hidden}, rng, init_std), prefix + ".w1");
        e.b1 = ParameterT<S>(TensorT<S>::zeros({e.hidden}), prefix + ".b1");
        e.w2 = ParameterT<S>(TensorT<S>::randn({e.hidden, d_f}, rng, init_std), prefix + ".w2");
        e.b2 = ParameterT<S>(TensorT<S>::zeros({d_f}), prefix + ".b2");
        return e;
    }

    // Patch means on the [-1,1] scale; linear in the input image.
    TensorT<S> pool(const ImageU8& img) const {
        if (img.w != input_res || img.h != input_res)
            throw ShapeError("image encoder: expected " + std::to_string(input_res) + "x" +
                             std::to_string(input_res) + " input, got " + std::to_string(img.w) +
                             "x" + std::to_string(img.h));
        const int ps = input_res / grid;
        std::vector<S> pooled(static_cast<size_t>(grid) * grid * 3, S(0));
        for (int gy = 0; gy < grid; ++gy)
            for (int gx = 0; gx < grid; ++gx) {
                long sum[3] = {0, 0, 0};
                for (int y = gy * ps; y < (gy + 1) * ps; ++y)
                    for (int x = gx * ps; x < (gx + 1) * ps; ++x) {
                        const uint8_t* p = img.px(x, y);
                        sum[0] += p[0];
                        sum[1] += p[1];
                        sum[2] += p[2];
                    }
                for (int c = 0; c < 3; ++c)
                    pooled[(static_cast<size_t>(gy) * grid + gx) * 3 + c] =
                        static_cast<S>(static_cast<double>(sum[c]) / (ps * ps) / 127.5 - 1.0);
            }
        return TensorT<S>::from({1, grid * grid * 3}, std::move(pooled));
    }

    // f = E_image(I): [1 x d_f].
    TensorT<S> encode(const ImageU8& img) const {
        TensorT<S> x = pool(img);
        return linear(gelu(linear(x, w1.value, b1.value)), w2.value, b2.value);
    }

    void set_trainable(bool t) {
        w1.set_trainable(t);
        b1.set_trainable(t);
        w2.set_trainable(t);
        b2.set_trainable(t);
    }

    void collect(ParamRefs<S>& out) {
        out.push_back(&w1);
        out.push_back(&b1);
        out.push_back(&w2);
        out.push_back(&b2);
    }
};

// ---------------------------------------------------------------------------
// Spacetime conditioner: per (t,l) re-encoding of bound token embeddings.
// ---------------------------------------------------------------------------

template <class S>
struct SpacetimeConditionerT {
    ParameterT<S> t_table;   // [t_max x d_t], zero-init
    ParameterT<S> l_table;   // [n_layers x d_t], zero-init
    ParameterT<S> fproj_w;   // [d_f x d_t]
    ParameterT<S> fproj_b;   // [d_t]
    ParameterT<S> ln_m_g, ln_m_b;    // [2 d_t]
    ParameterT<S> ln_pe_g, ln_pe_b;  // [2 d_t]
    ParameterT<S> mlp_w1, mlp_b1;    // [2d_t x 2d_t]
    ParameterT<S> mlp_w2, mlp_b2;    // [2d_t x d_t]
    int d_t = 0;
    int t_max = 0;
    int n_layers = 0;

    static SpacetimeConditionerT init(int d_t, int d_f, int t_max, int n_layers, Rng& rng,
                                      const std::string& prefix, double init_std = 0.02) {
        SpacetimeConditionerT c;
        c.d_t = d_t;
        c.t_max = t_max;
        c.n_layers = n_layers;
        // Zero-init tables: at step 0 the conditioned embedding is independent
        // of (t,l) and equals LayerNorm(m) through the MLP.
        c.t_table = ParameterT<S>(TensorT<S>::zeros({t_max, d_t}), prefix + ".t_table");
        c.l_table = ParameterT<S>(TensorT<S>::zeros({n_layers, d_t}), prefix + ".l_table");
        c.fproj_w = ParameterT<S>(TensorT<S>::randn({d_f, d_t}, rng, init_std), prefix + ".fproj_w");
        c.fproj_b = ParameterT<S>(TensorT<S>::zeros({d_t}), prefix + ".fproj_b");
        c.ln_m_g = ParameterT<S>(TensorT<S>::full({2 * d_t}, S(1)), prefix + ".ln_m_g");
        c.ln_m_b = ParameterT<S>(TensorT<S>::zeros({2 * d_t}), prefix + ".ln_m_b");
        c.ln_pe_g = ParameterT<S>(TensorT<S>::full({2 * d_t}, S(1)), prefix + ".ln_pe_g");
        c.ln_pe_b = ParameterT<S>(TensorT<S>::zeros({2 * d_t}), prefix + ".ln_pe_b");
        c.mlp_w1 = ParameterT<S>(TensorT<S>::randn({2 * d_t, 2 * d_t}, rng, init_std), prefix + ".mlp_w1");
        c.mlp_b1 = ParameterT<S>(TensorT<S>::zeros({2 * d_t}), prefix + ".mlp_b1");
        c.mlp_w2 = ParameterT<S>(TensorT<S>::randn({2 * d_t, d_t}, rng, init_std), prefix + ".mlp_w2");
        c.mlp_b2 = ParameterT<S>(TensorT<S>::zeros({d_t}), prefix + ".mlp_b2");
        return c;
    }

    // PE(t,l): [1 x 2d_t].
    TensorT<S> pe(int t, int l) const {
        if (t < 0 || t >= t_max) throw ConfigError("spacetime: timestep out of range");
        if (l < 0 || l >= n_layers) throw ConfigError("spacetime: layer out of range");
        TensorT<S> tt = gather_rows(t_table.value, std::vector<int>{t});
        TensorT<S> ll = gather_rows(l_table.value, std::vector<int>{l});
        return concat<S>({tt, ll}, 1);
    }

    // One bound token: m = Concat(proj(f), t_embed); out = MLP(LN(m) + LN(PE)).
    TensorT<S> encode_binding(const TensorT<S>& feature, const TensorT<S>& token_embed, int t,
                              int l) const {
        TensorT<S> fp = linear(feature, fproj_w.value, fproj_b.value);
        TensorT<S> m = concat<S>({fp, token_embed}, 1);
        TensorT<S> mbar = add(layernorm(m, ln_m_g.value, ln_m_b.value, 1),
                              layernorm(pe(t, l), ln_pe_g.value, ln_pe_b.value, 1));
        return linear(gelu(linear(mbar, mlp_w1.value, mlp_b1.value)), mlp_w2.value, mlp_b2.value);
    }

    void set_trainable(bool tr) {
        for (ParameterT<S>* p : {&t_table, &l_table, &fproj_w, &fproj_b, &ln_m_g, &ln_m_b, &ln_pe_g,
                                 &ln_pe_b, &mlp_w1, &mlp_b1, &mlp_w2, &mlp_b2})
            p->set_trainable(tr);
    }

    void collect(ParamRefs<S>& out) {
        for (ParameterT<S>* p : {&t_table, &l_table, &fproj_w, &fproj_b, &ln_m_g, &ln_m_b, &ln_pe_g,
                                 &ln_pe_b, &mlp_w1, &mlp_b1, &mlp_w2, &mlp_b2})
            out.push_back(p);
    }
};

// ---------------------------------------------------------------------------
// Multimodal prompt.
// ---------------------------------------------------------------------------

template <class S>
struct BindingT {
    int position = 0;
    TensorT<S> feature;  // [1 x d_f]
};

template <class S>
struct MultimodalPromptT {
    std::vector<int> ids;                 // padded to txt_len
    std::vector<BindingT<S>> bindings;    // at distinct subject-token positions
    std::map<int, TensorT<S>> embedding_overrides;  // raw-row overrides (interpolation)

    static MultimodalPromptT text_only(const Vocabulary& vocab,
                                       const std::vector<std::string>& caption, int txt_len) {
        MultimodalPromptT p;
        p.ids = vocab.tokenize(caption, txt_len);
        return p;
    }

    static MultimodalPromptT unconditional(const Vocabulary& vocab, int txt_len) {
        MultimodalPromptT p;
        p.ids = vocab.null_ids(txt_len);
        return p;
    }

    void bind(const Vocabulary& vocab, int position, TensorT<S> feature) {
        if (position < 0 || position >= static_cast<int>(ids.size()))
            throw ConfigError("binding position " + std::to_string(position) + " out of range");
        if (!vocab.is_subject(ids[static_cast<size_t>(position)]))
            throw ConfigError("binding position " + std::to_string(position) +
                              " does not hold a subject token");
        for (const auto& b : bindings)
            if (b.position == position) throw ConfigError("position bound twice");
        bindings.push_back({position, std::move(feature)});
    }

    bool has_bindings() const { return !bindings.empty(); }
};

// Personalized condition for one (t,l): bound rows re-encoded, others copy T.
template <class S>
TensorT<S> build_condition(const SpacetimeConditionerT<S>& cond, const TensorT<S>& text,
                           const MultimodalPromptT<S>& prompt, int t, int l) {
    if (prompt.bindings.empty()) return text;
    const int n = text.shape[0];
    std::vector<const BindingT<S>*> at(static_cast<size_t>(n), nullptr);
    for (const auto& b : prompt.bindings) {
        if (b.position >= n) throw ConfigError("binding beyond encoded prompt length");
        at[static_cast<size_t>(b.position)] = &b;
    }
    std::vector<TensorT<S>> rows;
    rows.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        TensorT<S> row = slice(text, 0, i, 1);
        rows.push_back(at[static_cast<size_t>(i)]
                           ? cond.encode_binding(at[static_cast<size_t>(i)]->feature, row, t, l)
                           : row);
    }
    return concat(rows, 0);
}

// (1-alpha) a + alpha b, alpha in [0,1].
template <class S>
TensorT<S> interpolate_features(const TensorT<S>& a, const TensorT<S>& b, double alpha) {
    if (alpha < 0.0 || alpha > 1.0) throw ConfigError("interpolation alpha outside [0,1]");
    if (a.shape != b.shape) throw ShapeError("interpolate: shape mismatch");
    return add(scale(a, 1.0 - alpha), scale(b, alpha));
}

template <class S>
TensorT<S> interpolate_text(const TensorT<S>& a, const TensorT<S>& b, double alpha) {
    return interpolate_features(a, b, alpha);
}

using TextEncoder = TextEncoderT<float>;
using ImageEncoder = ImageEncoderT<float>;
using MultimodalPrompt = MultimodalPromptT<float>;

}  // namespace moa
