// SPDX-License-Identifier: Apache-2.0
//
// Toy latent diffusion denoiser: a fixed-resolution transformer over a
// patchified pixel grid. Every block carries a self-attention layer and a
// cross-attention layer; wrap_moa() turns each of them into a two-expert
// mixture with a per-pixel router, freezing the original weights as the prior.
//
// Layer indexing: block b owns attention layers 2b (self) and 2b+1 (cross),
// enumerated in forward order. Router/attention map stacks follow this order.

#pragma once

#include <cmath>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "moa/moa_layer.hpp"
#include "moa/prompt.hpp"
#include "moa/sha256.hpp"
#include "moa/synthdata.hpp"

namespace moa {

struct DenoiserConfig {
    int latent_h = 16, latent_w = 16;
    int d_z = 64;       // hidden width (also attention width)
    int blocks = 6;     // attention layer count = 2 * blocks
    int d_t = 64;       // text embedding width
    int d_f = 32;       // image feature width
    int t_max = 1000;
    double beta_start = 1e-4, beta_end = 2e-2;
    int heads = 1;
    int ff_hidden = 128;
    int txt_len = 10;
    int patch = 4;
    int image_res = 64;     // must equal latent * patch
    int subject_res = 32;   // image-encoder input resolution
    int enc_grid = 4;       // image-encoder pooling grid
    bool router_mlp = false;
    double router_prior_bias = 2.0;
    double init_std = 0.02;
    double out_init_std = 0.0;  // unembed; zero keeps the initial prediction at 0
    // Fresh personalization modules (image encoder, spacetime conditioner) are
    // initialized wider: the injected rows must compete with pretrained text
    // rows from step one or the binding pathway trains too slowly.
    double pers_init_std = 0.2;

    int d_in() const { return patch * patch * 3; }
    int n_tokens() const { return latent_h * latent_w; }
    int n_attn_layers() const { return 2 * blocks; }

    void validate() const {
        if (latent_h * patch != image_res || latent_w * patch != image_res)
            throw ConfigError("latent grid * patch must equal image resolution");
        if (blocks < 1 || d_z < 4 || t_max < 2) throw ConfigError("degenerate model config");
        if (heads < 1 || d_z % heads != 0) throw ConfigError("heads must divide d_z");
        if (subject_res % enc_grid != 0) throw ConfigError("enc_grid must divide subject_res");
    }

    std::string canonical_string() const {
        std::ostringstream os;
        os << "v1;lh=" << latent_h << ";lw=" << latent_w << ";dz=" << d_z << ";b=" << blocks
           << ";dt=" << d_t << ";df=" << d_f << ";tmax=" << t_max << ";b0=" << beta_start
           << ";b1=" << beta_end << ";heads=" << heads << ";ff=" << ff_hidden
           << ";txt=" << txt_len << ";patch=" << patch << ";img=" << image_res
           << ";subj=" << subject_res << ";grid=" << enc_grid << ";rmlp=" << router_mlp
           << ";rbias=" << router_prior_bias;
        return os.str();
    }

    std::string digest() const { return sha256_hex(canonical_string()); }
};

struct NoiseSchedule {
    std::vector<double> beta;
    std::vector<double> alpha_bar;

    static NoiseSchedule linear(int t_max, double beta_start, double beta_end) {
        NoiseSchedule s;
        s.beta.resize(static_cast<size_t>(t_max));
        s.alpha_bar.resize(static_cast<size_t>(t_max));
        double prod = 1.0;
        for (int t = 0; t < t_max; ++t) {
            s.beta[static_cast<size_t>(t)] =
                beta_start + (beta_end - beta_start) * t / std::max(1, t_max - 1);
            prod *= 1.0 - s.beta[static_cast<size_t>(t)];
            s.alpha_bar[static_cast<size_t>(t)] = prod;
        }
        return s;
    }

    int t_max() const { return static_cast<int>(beta.size()); }

    double abar(int t) const {
        if (t < 0 || t >= t_max()) throw ConfigError("timestep out of schedule");
        return alpha_bar[static_cast<size_t>(t)];
    }
};

// x_t = sqrt(abar_t) x0 + sqrt(1-abar_t) noise
template <class S>
TensorT<S> q_sample(const NoiseSchedule& sched, const TensorT<S>& x0, int t,
                    const TensorT<S>& noise) {
    if (noise.shape != x0.shape) throw ShapeError("q_sample: noise shape mismatch");
    const double ab = sched.abar(t);
    return add(scale(x0, std::sqrt(ab)), scale(noise, std::sqrt(1.0 - ab)));
}

// ---------------------------------------------------------------------------
// Patch geometry.
// ---------------------------------------------------------------------------

// [H*W tokens x patch*patch*3 channels], values on the [-1,1] scale.
template <class S>
TensorT<S> patchify_image(const ImageU8& img, int patch) {
    const int gh = img.h / patch, gw = img.w / patch;
    std::vector<S> out(static_cast<size_t>(gh) * gw * patch * patch * 3);
    size_t k = 0;
    for (int pi = 0; pi < gh; ++pi)
        for (int pj = 0; pj < gw; ++pj)
            for (int dy = 0; dy < patch; ++dy)
                for (int dx = 0; dx < patch; ++dx) {
                    const uint8_t* p = img.px(pj * patch + dx, pi * patch + dy);
                    out[k++] = static_cast<S>(p[0] / 127.5 - 1.0);
                    out[k++] = static_cast<S>(p[1] / 127.5 - 1.0);
                    out[k++] = static_cast<S>(p[2] / 127.5 - 1.0);
                }
    return TensorT<S>::from({gh * gw, patch * patch * 3}, std::move(out));
}

template <class S>
ImageU8 unpatchify_image(const TensorT<S>& x, int latent_h, int latent_w, int patch) {
    ImageU8 img;
    img.w = latent_w * patch;
    img.h = latent_h * patch;
    img.rgb.resize(static_cast<size_t>(img.w) * img.h * 3);
    const S* p = x.ptr();
    size_t k = 0;
    for (int pi = 0; pi < latent_h; ++pi)
        for (int pj = 0; pj < latent_w; ++pj)
            for (int dy = 0; dy < patch; ++dy)
                for (int dx = 0; dx < patch; ++dx)
                    for (int c = 0; c < 3; ++c) {
                        const double v = (static_cast<double>(p[k++]) + 1.0) * 127.5;
                        img.px(pj * patch + dx, pi * patch + dy)[c] =
                            static_cast<uint8_t>(std::min(255.0, std::max(0.0, std::round(v))));
                    }
    return img;
}

// Majority vote per patch -> [n_tokens x 1] mask on the latent grid.
template <class S>
TensorT<S> latent_mask(const MaskU8& mask, int patch) {
    const int gh = mask.h / patch, gw = mask.w / patch;
    std::vector<S> out(static_cast<size_t>(gh) * gw);
    for (int pi = 0; pi < gh; ++pi)
        for (int pj = 0; pj < gw; ++pj) {
            int count = 0;
            for (int dy = 0; dy < patch; ++dy)
                for (int dx = 0; dx < patch; ++dx)
                    count += mask.at(pj * patch + dx, pi * patch + dy) ? 1 : 0;
            out[static_cast<size_t>(pi) * gw + pj] = (2 * count >= patch * patch) ? S(1) : S(0);
        }
    return TensorT<S>::from({gh * gw, 1}, std::move(out));
}

inline double psnr_u8(const ImageU8& a, const ImageU8& b) {
    if (a.w != b.w || a.h != b.h) throw ShapeError("psnr: size mismatch");
    double mse = 0;
    for (size_t i = 0; i < a.rgb.size(); ++i) {
        const double d = static_cast<double>(a.rgb[i]) - static_cast<double>(b.rgb[i]);
        mse += d * d;
    }
    mse /= static_cast<double>(a.rgb.size());
    if (mse <= 0.0) return 99.0;
    return 10.0 * std::log10(255.0 * 255.0 / mse);
}

// ---------------------------------------------------------------------------
// The denoiser.
// ---------------------------------------------------------------------------

template <class S>
struct EncodedPromptT {
    MultimodalPromptT<S> prompt;
    TensorT<S> text;  // [txt_len x d_t]
};

template <class S>
struct EvalTraceT {
    TensorT<S> eps;                        // [n_tokens x d_in]
    std::vector<TensorT<S>> router_maps;   // 2B entries (wrapped model only)
    std::vector<TensorT<S>> cross_maps;    // B entries: personalization cross-attention maps
};

template <class S>
struct SampleResultT {
    TensorT<S> latent;                     // final x0, [n_tokens x d_in]
    std::vector<int> timesteps;            // descending
    // [step][layer] -> [n_tokens x 2] router map (collected when requested)
    std::vector<std::vector<TensorT<S>>> router_maps;
    std::vector<TensorT<S>> trajectory;    // post-update states (when requested)
};

template <class S>
struct DenoiserT {
    DenoiserConfig cfg;
    NoiseSchedule sched;
    Vocabulary vocab;

    TextEncoderT<S> text;

    ParameterT<S> patch_w, patch_b;
    ParameterT<S> pos_emb;
    ParameterT<S> tmlp_w1, tmlp_b1, tmlp_w2, tmlp_b2;

    struct Block {
        ParameterT<S> ln1_g, ln1_b, ln2_g, ln2_b, ln3_g, ln3_b;
        std::optional<AttentionExpertT<S>> self_plain, cross_plain;
        std::optional<MoALayerT<S>> self_moa, cross_moa;
        ParameterT<S> ff_w1, ff_b1, ff_w2, ff_b2;
    };
    std::vector<Block> blocks;

    ParameterT<S> final_ln_g, final_ln_b;
    ParameterT<S> out_w, out_b;

    bool moa_wrapped = false;
    std::optional<ImageEncoderT<S>> image_enc;
    std::optional<SpacetimeConditionerT<S>> spacetime;

    static DenoiserT init(const DenoiserConfig& cfg, uint64_t seed) {
        cfg.validate();
        DenoiserT m;
        m.cfg = cfg;
        m.sched = NoiseSchedule::linear(cfg.t_max, cfg.beta_start, cfg.beta_end);
        m.vocab = Vocabulary::standard();
        Rng rng(hash_combine(seed, 0xd0e15ULL));

        m.text = TextEncoderT<S>::init(m.vocab.size(), cfg.d_t, cfg.txt_len, rng, "text", cfg.init_std);

        const int dz = cfg.d_z, din = cfg.d_in();
        m.patch_w = ParameterT<S>(TensorT<S>::randn({din, dz}, rng, cfg.init_std), "trunk.patch_w");
        m.patch_b = ParameterT<S>(TensorT<S>::zeros({dz}), "trunk.patch_b");
        m.pos_emb = ParameterT<S>(TensorT<S>::randn({cfg.n_tokens(), dz}, rng, cfg.init_std), "trunk.pos");
        m.tmlp_w1 = ParameterT<S>(TensorT<S>::randn({dz, dz}, rng, cfg.init_std), "trunk.tmlp_w1");
        m.tmlp_b1 = ParameterT<S>(TensorT<S>::zeros({dz}), "trunk.tmlp_b1");
        m.tmlp_w2 = ParameterT<S>(TensorT<S>::randn({dz, dz}, rng, cfg.init_std), "trunk.tmlp_w2");
        m.tmlp_b2 = ParameterT<S>(TensorT<S>::zeros({dz}), "trunk.tmlp_b2");

        for (int b = 0; b < cfg.blocks; ++b) {
            Block blk;
            const std::string bp = "block" + std::to_string(b);
            auto ln = [&](const char* name) {
                return std::pair<ParameterT<S>, ParameterT<S>>(
                    ParameterT<S>(TensorT<S>::full({dz}, S(1)), bp + "." + name + "_g"),
                    ParameterT<S>(TensorT<S>::zeros({dz}), bp + "." + name + "_b"));
            };
            std::tie(blk.ln1_g, blk.ln1_b) = ln("ln1");
            std::tie(blk.ln2_g, blk.ln2_b) = ln("ln2");
            std::tie(blk.ln3_g, blk.ln3_b) = ln("ln3");
            blk.self_plain = AttentionExpertT<S>::init(dz, dz, dz, cfg.heads, AttnKind::self_attn,
                                                       rng, bp + ".self", cfg.init_std);
            blk.cross_plain = AttentionExpertT<S>::init(dz, cfg.d_t, dz, cfg.heads,
                                                        AttnKind::cross_attn, rng, bp + ".cross",
                                                        cfg.init_std);
            blk.ff_w1 = ParameterT<S>(TensorT<S>::randn({dz, cfg.ff_hidden}, rng, cfg.init_std), bp + ".ff_w1");
            blk.ff_b1 = ParameterT<S>(TensorT<S>::zeros({cfg.ff_hidden}), bp + ".ff_b1");
            blk.ff_w2 = ParameterT<S>(TensorT<S>::randn({cfg.ff_hidden, dz}, rng, cfg.init_std), bp + ".ff_w2");
            blk.ff_b2 = ParameterT<S>(TensorT<S>::zeros({dz}), bp + ".ff_b2");
            m.blocks.push_back(std::move(blk));
        }

        m.final_ln_g = ParameterT<S>(TensorT<S>::full({dz}, S(1)), "trunk.final_ln_g");
        m.final_ln_b = ParameterT<S>(TensorT<S>::zeros({dz}), "trunk.final_ln_b");
        m.out_w = ParameterT<S>(cfg.out_init_std > 0.0
                                    ? TensorT<S>::randn({dz, din}, rng, cfg.out_init_std)
                                    : TensorT<S>::zeros({dz, din}),
                                "trunk.out_w");
        m.out_b = ParameterT<S>(TensorT<S>::zeros({din}), "trunk.out_b");
        return m;
    }

    // Split every attention layer into {frozen prior, trainable copy, router}
    // and freeze the text pathway and trunk. The personalization encoders are
    // created here.
    void wrap_moa(uint64_t seed) {
        if (moa_wrapped) throw ConfigError("model already wrapped");
        Rng rng(hash_combine(seed, 0x30aULL));
        RouterConfig rcfg;
        rcfg.mlp = cfg.router_mlp;
        rcfg.prior_logit_bias = cfg.router_prior_bias;
        for (int b = 0; b < cfg.blocks; ++b) {
            Block& blk = blocks[static_cast<size_t>(b)];
            const std::string bp = "block" + std::to_string(b);
            blk.self_moa = MoALayerT<S>::from_pretrained(*blk.self_plain, rcfg, cfg.d_z, rng,
                                                         2 * b, bp + ".self");
            blk.cross_moa = MoALayerT<S>::from_pretrained(*blk.cross_plain, rcfg, cfg.d_z, rng,
                                                          2 * b + 1, bp + ".cross");
            blk.self_plain.reset();
            blk.cross_plain.reset();
        }
        image_enc = ImageEncoderT<S>::init(cfg.subject_res, cfg.enc_grid, cfg.d_f, rng, "pers.image_enc",
                                           cfg.pers_init_std);
        spacetime = SpacetimeConditionerT<S>::init(cfg.d_t, cfg.d_f, cfg.t_max, cfg.n_attn_layers(),
                                                   rng, "pers.spacetime", cfg.pers_init_std);
        moa_wrapped = true;
        freeze_prior_side();
    }

    void freeze_prior_side() {
        text.set_trainable(false);
        for (ParameterT<S>* p :
             {&patch_w, &patch_b, &pos_emb, &tmlp_w1, &tmlp_b1, &tmlp_w2, &tmlp_b2, &final_ln_g,
              &final_ln_b, &out_w, &out_b})
            p->set_trainable(false);
        for (auto& blk : blocks) {
            for (ParameterT<S>* p : {&blk.ln1_g, &blk.ln1_b, &blk.ln2_g, &blk.ln2_b, &blk.ln3_g,
                                     &blk.ln3_b, &blk.ff_w1, &blk.ff_b1, &blk.ff_w2, &blk.ff_b2})
                p->set_trainable(false);
            if (blk.self_moa) blk.self_moa->freeze_prior();
            if (blk.cross_moa) blk.cross_moa->freeze_prior();
        }
    }

    EncodedPromptT<S> encode_prompt(const MultimodalPromptT<S>& p) const {
        return {p, text.encode(p.ids, p.embedding_overrides)};
    }

    EncodedPromptT<S> encode_unconditional() const {
        auto p = MultimodalPromptT<S>::unconditional(vocab, cfg.txt_len);
        return encode_prompt(p);
    }

    // Sinusoidal timestep features, [1 x d_z].
    TensorT<S> timestep_features(int t) const {
        const int dz = cfg.d_z;
        std::vector<S> v(static_cast<size_t>(dz));
        const int half = dz / 2;
        for (int i = 0; i < half; ++i) {
            const double w = std::exp(-std::log(10000.0) * i / half);
            v[static_cast<size_t>(i)] = static_cast<S>(std::sin(t * w));
            v[static_cast<size_t>(half + i)] = static_cast<S>(std::cos(t * w));
        }
        return TensorT<S>::from({1, dz}, std::move(v));
    }

    // One pass through the network; epsilon prediction plus per-layer maps.
    EvalTraceT<S> eval_eps(const TensorT<S>& x_t, int t, const EncodedPromptT<S>& ep) const {
        if (x_t.shape != Shape{cfg.n_tokens(), cfg.d_in()})
            throw ShapeError("eval_eps: latent shape " + shape_str(x_t.shape));
        if (t < 0 || t >= cfg.t_max) throw ConfigError("eval_eps: timestep out of range");

        EvalTraceT<S> trace;
        TensorT<S> temb = linear(
            gelu(linear(timestep_features(t), tmlp_w1.value, tmlp_b1.value)), tmlp_w2.value,
            tmlp_b2.value);
        TensorT<S> x = add(add(linear(x_t, patch_w.value, patch_b.value), pos_emb.value), temb);

        for (int b = 0; b < cfg.blocks; ++b) {
            const Block& blk = blocks[static_cast<size_t>(b)];
            {
                TensorT<S> h = layernorm(x, blk.ln1_g.value, blk.ln1_b.value, 1);
                if (moa_wrapped) {
                    auto out = blk.self_moa->forward(h, h, h);
                    trace.router_maps.push_back(out.r);
                    x = add(x, out.z);
                } else {
                    auto [o, a] = blk.self_plain->forward(h, h);
                    (void)a;
                    x = add(x, o);
                }
            }
            {
                TensorT<S> h = layernorm(x, blk.ln2_g.value, blk.ln2_b.value, 1);
                if (moa_wrapped) {
                    TensorT<S> c_pers = build_condition(*spacetime, ep.text, ep.prompt, t, 2 * b + 1);
                    auto out = blk.cross_moa->forward(h, ep.text, c_pers);
                    trace.router_maps.push_back(out.r);
                    trace.cross_maps.push_back(out.a_pers);
                    x = add(x, out.z);
                } else {
                    auto [o, a] = blk.cross_plain->forward(h, ep.text);
                    (void)a;
                    x = add(x, o);
                }
            }
            {
                TensorT<S> h = layernorm(x, blk.ln3_g.value, blk.ln3_b.value, 1);
                x = add(x, linear(gelu(linear(h, blk.ff_w1.value, blk.ff_b1.value)), blk.ff_w2.value,
                                  blk.ff_b2.value));
            }
        }
        TensorT<S> hf = layernorm(x, final_ln_g.value, final_ln_b.value, 1);
        trace.eps = linear(hf, out_w.value, out_b.value);
        return trace;
    }

    // Classifier-free guidance; g == 1 is the single-evaluation path. Maps are
    // taken from the conditional pass.
    EvalTraceT<S> predict_noise(const TensorT<S>& x_t, int t, const EncodedPromptT<S>& ep,
                                double guidance, const EncodedPromptT<S>* ep_null = nullptr) const {
        if (guidance == 1.0) return eval_eps(x_t, t, ep);
        if (!ep_null) throw ConfigError("predict_noise: guidance != 1 needs the null prompt");
        EvalTraceT<S> cond = eval_eps(x_t, t, ep);
        EvalTraceT<S> uncond = eval_eps(x_t, t, *ep_null);
        EvalTraceT<S> out;
        out.eps = add(uncond.eps, scale(sub(cond.eps, uncond.eps), guidance));
        out.router_maps = std::move(cond.router_maps);
        out.cross_maps = std::move(cond.cross_maps);
        return out;
    }

    // Uniform-stride DDIM timesteps, ascending: {0, s, 2s, ...}.
    std::vector<int> ddim_timesteps(int steps) const {
        if (steps < 1) throw ConfigError("ddim: steps must be >= 1");
        if (cfg.t_max % steps != 0) throw ConfigError("ddim: steps must divide the schedule");
        const int stride = cfg.t_max / steps;
        std::vector<int> ts(static_cast<size_t>(steps));
        for (int i = 0; i < steps; ++i) ts[static_cast<size_t>(i)] = i * stride;
        return ts;
    }

    // Deterministic eta=0 sampler from a seeded gaussian latent.
    SampleResultT<S> ddim_sample(uint64_t seed, const MultimodalPromptT<S>& prompt, int steps,
                                 double guidance, bool collect_router_maps = false,
                                 bool collect_trajectory = false) const {
        NoGradGuard ng;
        Rng rng(hash_combine(seed, 0x5a3fULL));
        TensorT<S> x = TensorT<S>::randn({cfg.n_tokens(), cfg.d_in()}, rng);
        return ddim_sample_from(x, prompt, steps, guidance, collect_router_maps, collect_trajectory);
    }

    SampleResultT<S> ddim_sample_from(TensorT<S> x, const MultimodalPromptT<S>& prompt, int steps,
                                      double guidance, bool collect_router_maps = false,
                                      bool collect_trajectory = false, bool clip_x0 = true) const {
        NoGradGuard ng;
        const auto ts = ddim_timesteps(steps);
        EncodedPromptT<S> ep = encode_prompt(prompt);
        EncodedPromptT<S> ep_null = encode_unconditional();

        SampleResultT<S> res;
        for (int i = steps - 1; i >= 0; --i) {
            const int t = ts[static_cast<size_t>(i)];
            const double ab = sched.abar(t);
            const double ab_prev = (i > 0) ? sched.abar(ts[static_cast<size_t>(i - 1)]) : 1.0;
            EvalTraceT<S> tr = predict_noise(x, t, ep, guidance, &ep_null);
            TensorT<S> x0 = scale(sub(x, scale(tr.eps, std::sqrt(1.0 - ab))), 1.0 / std::sqrt(ab));
            if (clip_x0) {
                // Pixel space is bounded; clamping the clean estimate keeps
                // early-step prediction error from compounding.
                x0 = x0.clone_detached();
                for (auto& v : *x0.data) v = std::min(S(1), std::max(S(-1), v));
            }
            x = add(scale(x0, std::sqrt(ab_prev)), scale(tr.eps, std::sqrt(1.0 - ab_prev)));
            res.timesteps.push_back(t);
            if (collect_router_maps) res.router_maps.push_back(std::move(tr.router_maps));
            if (collect_trajectory) res.trajectory.push_back(x);
        }
        res.latent = x;
        return res;
    }

    // Reverse-ODE approximation: walks x0 up the noise schedule so that
    // ddim_sample_from(result) reconstructs the input.
    SampleResultT<S> ddim_invert(const TensorT<S>& x0, const MultimodalPromptT<S>& prompt,
                                 int steps, double guidance = 1.0) const {
        NoGradGuard ng;
        const auto ts = ddim_timesteps(steps);
        EncodedPromptT<S> ep = encode_prompt(prompt);
        EncodedPromptT<S> ep_null = encode_unconditional();

        SampleResultT<S> res;
        TensorT<S> x = x0;
        for (int i = 0; i < steps; ++i) {
            const int t = ts[static_cast<size_t>(i)];
            const double ab = sched.abar(t);
            const double ab_prev = (i > 0) ? sched.abar(ts[static_cast<size_t>(i - 1)]) : 1.0;
            EvalTraceT<S> tr = predict_noise(x, t, ep, guidance, &ep_null);
            TensorT<S> xhat0 =
                scale(sub(x, scale(tr.eps, std::sqrt(1.0 - ab_prev))), 1.0 / std::sqrt(ab_prev));
            x = add(scale(xhat0, std::sqrt(ab)), scale(tr.eps, std::sqrt(1.0 - ab)));
            res.timesteps.push_back(t);
        }
        res.latent = x;
        return res;
    }

    // Parameter traversal in a fixed order; names are unique by construction.
    void collect(ParamRefs<S>& out) {
        text.collect(out);
        for (ParameterT<S>* p :
             {&patch_w, &patch_b, &pos_emb, &tmlp_w1, &tmlp_b1, &tmlp_w2, &tmlp_b2})
            out.push_back(p);
        for (auto& blk : blocks) {
            for (ParameterT<S>* p : {&blk.ln1_g, &blk.ln1_b, &blk.ln2_g, &blk.ln2_b, &blk.ln3_g,
                                     &blk.ln3_b, &blk.ff_w1, &blk.ff_b1, &blk.ff_w2, &blk.ff_b2})
                out.push_back(p);
            if (blk.self_plain) blk.self_plain->collect(out);
            if (blk.cross_plain) blk.cross_plain->collect(out);
            if (blk.self_moa) blk.self_moa->collect(out);
            if (blk.cross_moa) blk.cross_moa->collect(out);
        }
        for (ParameterT<S>* p : {&final_ln_g, &final_ln_b, &out_w, &out_b}) out.push_back(p);
        if (image_enc) image_enc->collect(out);
        if (spacetime) spacetime->collect(out);
    }

    ParamRefs<S> params() {
        ParamRefs<S> out;
        collect(out);
        return out;
    }

    ParamRefs<S> trainable_params() {
        ParamRefs<S> out;
        for (auto* p : params())
            if (p->trainable) out.push_back(p);
        return out;
    }

    ParamRefs<S> frozen_params() {
        ParamRefs<S> out;
        for (auto* p : params())
            if (!p->trainable) out.push_back(p);
        return out;
    }
};

// SHA-256 over (name, extents, raw values) of the given parameters, in order.
template <class S>
std::string params_digest(const ParamRefs<S>& params) {
    Sha256 h;
    for (const auto* p : params) {
        h.update(p->name);
        for (int d : p->value.shape) {
            const uint32_t u = static_cast<uint32_t>(d);
            h.update(&u, sizeof(u));
        }
        // Hash float32 bytes so the digest is precision-stable.
        for (const S v : *p->value.data) {
            const float f = static_cast<float>(v);
            h.update(&f, sizeof(f));
        }
    }
    return h.hex_digest();
}

using Denoiser = DenoiserT<float>;

}  // namespace moa
