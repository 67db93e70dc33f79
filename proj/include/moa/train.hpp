// SPDX-License-Identifier: Apache-2.0
//
// Two training phases over the synthetic corpus:
//   1. pretrain: the plain text-conditioned denoiser (all parameters), full
//      reconstruction loss with classifier-free condition dropout;
//   2. finetune: the wrapped mixture model; masked reconstruction + router
//      loss + object loss over the trainable (personalization) side only.

#pragma once

#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <vector>

#include "moa/denoiser.hpp"
#include "moa/losses.hpp"

namespace moa {

// ---------------------------------------------------------------------------
// Corpus -> model-space samples.
// ---------------------------------------------------------------------------

template <class S>
struct TrainSample {
    TensorT<S> x0;                        // [N x d_in]
    std::vector<TensorT<S>> masks;        // per subject, [N x 1] on latent grid
    TensorT<S> mask_union;                // [N x 1]
    std::vector<int> caption_ids;         // padded to txt_len
    std::vector<int> subject_positions;
    std::vector<ImageU8> subject_images;  // encoder inputs
};

template <class S>
TrainSample<S> make_train_sample(const DenoiserConfig& cfg, const Vocabulary& vocab,
                                 const SceneSample& scene) {
    TrainSample<S> s;
    s.x0 = patchify_image<S>(scene.image, cfg.patch);
    std::vector<S> uni(static_cast<size_t>(cfg.n_tokens()), S(0));
    for (const auto& m : scene.masks) {
        TensorT<S> lm = latent_mask<S>(m, cfg.patch);
        for (size_t i = 0; i < uni.size(); ++i)
            if ((*lm.data)[i] > S(0)) uni[i] = S(1);
        s.masks.push_back(std::move(lm));
    }
    s.mask_union = TensorT<S>::from({cfg.n_tokens(), 1}, std::move(uni));
    s.caption_ids = vocab.tokenize(scene.caption, cfg.txt_len);
    s.subject_positions = scene.subject_positions;
    for (const auto& spec : scene.subjects)
        s.subject_images.push_back(render_subject(spec, cfg.subject_res));
    return s;
}

template <class S>
std::vector<TrainSample<S>> build_dataset(const DenoiserConfig& cfg, const Vocabulary& vocab,
                                          const CorpusConfig& corpus, bool eval_split) {
    const int n = eval_split ? corpus.eval_scenes : corpus.train_scenes;
    std::vector<TrainSample<S>> out;
    out.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        auto scene = corpus_descriptor(corpus, eval_split, i).render(cfg.image_res);
        out.push_back(make_train_sample<S>(cfg, vocab, scene));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Optimizer.
// ---------------------------------------------------------------------------

template <class S>
class Adam {
  public:
    double lr = 1e-4, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

    // Only trainable parameters are ever attached; frozen ones are untouched
    // by construction.
    void attach(const ParamRefs<S>& params) {
        params_.clear();
        m_.clear();
        v_.clear();
        for (auto* p : params) {
            if (!p->trainable) continue;
            params_.push_back(p);
            m_.emplace_back(p->numel(), 0.0);
            v_.emplace_back(p->numel(), 0.0);
        }
        step_count_ = 0;
    }

    void zero_grad() {
        for (auto* p : params_) p->value.zero_grad();
    }

    void step() {
        ++step_count_;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count_));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count_));
        for (size_t pi = 0; pi < params_.size(); ++pi) {
            auto* p = params_[pi];
            const S* g = p->value.gptr();
            S* w = p->value.ptr();
            auto& m = m_[pi];
            auto& v = v_[pi];
            const size_t n = p->numel();
            for (size_t i = 0; i < n; ++i) {
                const double gi = static_cast<double>(g[i]);
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                w[i] = static_cast<S>(static_cast<double>(w[i]) -
                                      lr * mhat / (std::sqrt(vhat) + eps));
            }
        }
    }

    size_t attached() const { return params_.size(); }

  private:
    ParamRefs<S> params_;
    std::vector<std::vector<double>> m_, v_;
    int64_t step_count_ = 0;
};

// ---------------------------------------------------------------------------
// Per-sample losses.
// ---------------------------------------------------------------------------

struct TrainConfig {
    int steps = 2000;
    int pretrain_steps = 1500;
    int batch_size = 4;
    double lr = 1e-4;           // finetune phase
    double pretrain_lr = 1e-3;  // prior phase
    int max_t = 800;            // finetune timesteps sampled from [0, max_t)
    double cond_dropout = 0.1;
    double masked_prob = 1.0;
    double lambda_router = 1e-4;
    double lambda_object = 1e-4;
    LayerExclusion exclusion;
    ObjectLossVariant object_variant = ObjectLossVariant::fastcomposer;
    uint64_t seed = 7;
    bool audit_frozen = false;  // bitwise frozen-parameter audit every step
    int log_every = 10;
};

template <class S>
struct SampleLossParts {
    TensorT<S> total;
    double recon = 0, router = 0, object = 0;
    bool dropped = false;
    double bg_prior_weight = std::numeric_limits<double>::quiet_NaN();
    double fg_prior_weight = std::numeric_limits<double>::quiet_NaN();
};

// Mean prior weight over included layers restricted to mask==value pixels.
template <class S>
double prior_weight_on(const std::vector<TensorT<S>>& router_maps, const TensorT<S>& mask,
                       S mask_value, const LayerExclusion& excl) {
    const int n_layers = static_cast<int>(router_maps.size());
    double acc = 0;
    int used = 0;
    for (int l = 0; l < n_layers; ++l) {
        if (!excl.included(l, n_layers)) continue;
        const auto& r = router_maps[static_cast<size_t>(l)];
        double s = 0;
        size_t cnt = 0;
        for (int i = 0; i < r.shape[0]; ++i) {
            if ((*mask.data)[static_cast<size_t>(i)] != mask_value) continue;
            s += static_cast<double>((*r.data)[static_cast<size_t>(i) * 2]);
            ++cnt;
        }
        if (cnt == 0) return std::numeric_limits<double>::quiet_NaN();
        acc += s / static_cast<double>(cnt);
        ++used;
    }
    return used ? acc / used : std::numeric_limits<double>::quiet_NaN();
}

// One finetune-phase sample: draws (t, dropout, mask flag, noise) from rng in
// a fixed order, runs the wrapped model, and assembles the total loss.
template <class S>
SampleLossParts<S> finetune_sample_loss(DenoiserT<S>& model, const TrainSample<S>& sample,
                                        Rng& rng, const TrainConfig& cfg) {
    const int t = rng.range_int(0, cfg.max_t);
    const bool dropped = rng.uniform() < cfg.cond_dropout;
    const bool use_mask = rng.uniform() < cfg.masked_prob;
    TensorT<S> noise = TensorT<S>::randn(sample.x0.shape, rng);
    TensorT<S> x_t = q_sample(model.sched, sample.x0, t, noise);

    SampleLossParts<S> parts;
    parts.dropped = dropped;

    MultimodalPromptT<S> prompt;
    if (dropped) {
        prompt = MultimodalPromptT<S>::unconditional(model.vocab, model.cfg.txt_len);
    } else {
        prompt.ids = sample.caption_ids;
        for (size_t k = 0; k < sample.subject_images.size(); ++k)
            prompt.bind(model.vocab, sample.subject_positions[k],
                        model.image_enc->encode(sample.subject_images[k]));
    }
    auto trace = model.eval_eps(x_t, t, model.encode_prompt(prompt));

    if (dropped) {
        // No personalized semantics to supervise; plain unmasked
        // reconstruction for this sample.
        parts.total = full_recon_loss(noise, trace.eps);
        parts.recon = parts.total.item();
        return parts;
    }

    TensorT<S> recon = use_mask ? masked_recon_loss(noise, trace.eps, sample.mask_union)
                                : full_recon_loss(noise, trace.eps);
    TensorT<S> r_loss = router_loss(trace.router_maps, sample.mask_union, cfg.exclusion);
    auto o_loss = object_loss(trace.cross_maps, sample.masks, sample.subject_positions,
                              cfg.exclusion, cfg.object_variant, model.cfg.n_attn_layers());
    parts.recon = recon.item();
    parts.router = r_loss.item();
    parts.object = o_loss.loss.item();
    parts.total = add(recon, add(scale(r_loss, cfg.lambda_router),
                                 scale(o_loss.loss, cfg.lambda_object)));
    parts.bg_prior_weight = prior_weight_on(trace.router_maps, sample.mask_union, S(0), cfg.exclusion);
    parts.fg_prior_weight = prior_weight_on(trace.router_maps, sample.mask_union, S(1), cfg.exclusion);
    return parts;
}

// Pretraining sample: plain model, full loss, condition dropout.
template <class S>
SampleLossParts<S> pretrain_sample_loss(DenoiserT<S>& model, const TrainSample<S>& sample,
                                        Rng& rng, const TrainConfig& cfg) {
    const int t = rng.range_int(0, model.cfg.t_max);
    const bool dropped = rng.uniform() < cfg.cond_dropout;
    TensorT<S> noise = TensorT<S>::randn(sample.x0.shape, rng);
    TensorT<S> x_t = q_sample(model.sched, sample.x0, t, noise);

    MultimodalPromptT<S> prompt = dropped
                                      ? MultimodalPromptT<S>::unconditional(model.vocab, model.cfg.txt_len)
                                      : MultimodalPromptT<S>{sample.caption_ids, {}, {}};
    auto trace = model.eval_eps(x_t, t, model.encode_prompt(prompt));

    SampleLossParts<S> parts;
    parts.dropped = dropped;
    parts.total = full_recon_loss(noise, trace.eps);
    parts.recon = parts.total.item();
    return parts;
}

// ---------------------------------------------------------------------------
// Trainer.
// ---------------------------------------------------------------------------

struct MetricsRow {
    int step = 0;
    double loss = 0, recon = 0, router = 0, object = 0;
    double bg_prior_weight = std::numeric_limits<double>::quiet_NaN();
};

inline void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write metrics " + path);
    out << "step,loss,l_masked,l_router,l_object,bg_prior_weight\n";
    out << std::setprecision(10);
    for (const auto& r : rows)
        out << r.step << "," << r.loss << "," << r.recon << "," << r.router << "," << r.object
            << "," << r.bg_prior_weight << "\n";
}

template <class S>
class Trainer {
  public:
    Trainer(DenoiserT<S>& model, std::vector<TrainSample<S>> data, const TrainConfig& cfg)
        : model_(model), data_(std::move(data)), cfg_(cfg) {
        if (data_.empty()) throw ConfigError("training dataset is empty");
        if (cfg.max_t < 1 || cfg.max_t > model.cfg.t_max)
            throw ConfigError("max_t must lie in [1, t_max]");
        if (cfg.cond_dropout < 0 || cfg.cond_dropout > 1 || cfg.masked_prob < 0 ||
            cfg.masked_prob > 1)
            throw ConfigError("probabilities must lie in [0,1]");
        if (cfg.lambda_router < 0 || cfg.lambda_object < 0)
            throw ConfigError("loss weights must be nonnegative");
    }

    // Phase 1: all parameters of the plain model.
    std::vector<MetricsRow> pretrain() {
        if (model_.moa_wrapped) throw ConfigError("pretrain expects the unwrapped model");
        Adam<S> opt;
        opt.lr = cfg_.pretrain_lr;
        opt.attach(model_.trainable_params());
        Rng rng(hash_combine(cfg_.seed, 0x9ce7ULL));
        std::vector<MetricsRow> rows;
        for (int step = 0; step < cfg_.pretrain_steps; ++step)
            run_step(step, opt, rng, rows, /*finetune=*/false);
        return rows;
    }

    // Phase 2: personalization side of the wrapped model.
    std::vector<MetricsRow> finetune() {
        if (!model_.moa_wrapped) throw ConfigError("finetune expects the wrapped model");
        Adam<S> opt;
        opt.lr = cfg_.lr;
        opt.attach(model_.trainable_params());
        Rng rng(hash_combine(cfg_.seed, 0xf17eULL));

        frozen_snapshot_.clear();
        if (cfg_.audit_frozen)
            for (auto* p : model_.frozen_params()) frozen_snapshot_.push_back(*p->value.data);

        std::vector<MetricsRow> rows;
        for (int step = 0; step < cfg_.steps; ++step) {
            run_step(step, opt, rng, rows, /*finetune=*/true);
            if (cfg_.audit_frozen) audit_frozen(step);
        }
        return rows;
    }

  private:
    void run_step(int step, Adam<S>& opt, Rng& rng, std::vector<MetricsRow>& rows, bool finetune) {
        opt.zero_grad();
        TensorT<S> total;
        MetricsRow row;
        row.step = step;
        double bg_acc = 0;
        int bg_cnt = 0;
        for (int b = 0; b < cfg_.batch_size; ++b) {
            const size_t idx = rng.below(data_.size());
            SampleLossParts<S> parts;
            try {
                parts = finetune ? finetune_sample_loss(model_, data_[idx], rng, cfg_)
                                 : pretrain_sample_loss(model_, data_[idx], rng, cfg_);
            } catch (const NumericsError& e) {
                dump_diagnostics(step, rows, e.what());
                throw;
            }
            total = (b == 0) ? parts.total : add(total, parts.total);
            row.recon += parts.recon;
            row.router += parts.router;
            row.object += parts.object;
            if (!std::isnan(parts.bg_prior_weight)) {
                bg_acc += parts.bg_prior_weight;
                ++bg_cnt;
            }
        }
        total = scale(total, 1.0 / cfg_.batch_size);
        row.loss = total.item();
        row.recon /= cfg_.batch_size;
        row.router /= cfg_.batch_size;
        row.object /= cfg_.batch_size;
        if (bg_cnt > 0) row.bg_prior_weight = bg_acc / bg_cnt;
        if (!std::isfinite(row.loss)) {
            dump_diagnostics(step, rows, "non-finite loss");
            throw NumericsError("training: non-finite loss at step " + std::to_string(step));
        }
        backward(total);
        opt.step();
        rows.push_back(row);
    }

    void audit_frozen(int step) {
        auto frozen = model_.frozen_params();
        for (size_t i = 0; i < frozen.size(); ++i)
            if (*frozen[i]->value.data != frozen_snapshot_[i])
                throw NumericsError("frozen parameter '" + frozen[i]->name +
                                    "' changed at step " + std::to_string(step));
    }

    void dump_diagnostics(int step, const std::vector<MetricsRow>& rows, const std::string& why) {
        std::ofstream out("train_diagnostic_dump.txt", std::ios::binary);
        out << "aborted at step " << step << ": " << why << "\n";
        const size_t from = rows.size() > 20 ? rows.size() - 20 : 0;
        for (size_t i = from; i < rows.size(); ++i)
            out << rows[i].step << " loss=" << rows[i].loss << " recon=" << rows[i].recon
                << " router=" << rows[i].router << " object=" << rows[i].object << "\n";
    }

    DenoiserT<S>& model_;
    std::vector<TrainSample<S>> data_;
    TrainConfig cfg_;
    std::vector<std::vector<S>> frozen_snapshot_;
};

// Router behavior probe: mean prior weight on ground-truth background and
// foreground pixels over a fixed grid of (sample, timestep) pairs.
template <class S>
struct RouterProbe {
    double bg_mean = 0, fg_mean = 0;
};

template <class S>
RouterProbe<S> probe_router(DenoiserT<S>& model, const std::vector<TrainSample<S>>& samples,
                            const LayerExclusion& excl, int n_timesteps, int max_t,
                            uint64_t seed) {
    NoGradGuard ng;
    double bg = 0, fg = 0;
    int cnt = 0;
    Rng rng(seed);
    for (const auto& sample : samples) {
        for (int k = 0; k < n_timesteps; ++k) {
            const int t = (k * max_t) / n_timesteps;
            TensorT<S> noise = TensorT<S>::randn(sample.x0.shape, rng);
            TensorT<S> x_t = q_sample(model.sched, sample.x0, t, noise);
            MultimodalPromptT<S> prompt;
            prompt.ids = sample.caption_ids;
            for (size_t i = 0; i < sample.subject_images.size(); ++i)
                prompt.bind(model.vocab, sample.subject_positions[i],
                            model.image_enc->encode(sample.subject_images[i]));
            auto trace = model.eval_eps(x_t, t, model.encode_prompt(prompt));
            const double b = prior_weight_on(trace.router_maps, sample.mask_union, S(0), excl);
            const double f = prior_weight_on(trace.router_maps, sample.mask_union, S(1), excl);
            if (!std::isnan(b) && !std::isnan(f)) {
                bg += b;
                fg += f;
                ++cnt;
            }
        }
    }
    RouterProbe<S> out;
    if (cnt) {
        out.bg_mean = bg / cnt;
        out.fg_mean = fg / cnt;
    }
    return out;
}

}  // namespace moa
