// SPDX-License-Identifier: Apache-2.0
//
// Measurement kit:
//  - disentanglement: swap the injected subject under a fixed seed and compare
//    foreground vs background pixel change, regions taken from the averaged
//    router map;
//  - identity: agreement between the injected subject's identity vector and
//    what the extractor recovers from the generated foreground;
//  - benchmark: plain attention vs mixture layer forward cost.

#pragma once

#include <atomic>
#include <chrono>
#include <fstream>
#include <thread>
#include <vector>

#include "moa/denoiser.hpp"
#include "moa/train.hpp"

namespace moa {

// Deterministic fan-out: results land in slot order no matter the schedule.
template <class Fn>
void parallel_for_indexed(int n, Fn fn) {
    int workers = env_thread_cap();
    if (workers == 0) workers = static_cast<int>(std::thread::hardware_concurrency());
    workers = std::max(1, std::min(workers, n));
    if (workers == 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    std::atomic<int> next{0};
    for (int w = 0; w < workers; ++w)
        pool.emplace_back([&] {
            for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
        });
    for (auto& th : pool) th.join();
}

// ---------------------------------------------------------------------------
// Router-derived regions.
// ---------------------------------------------------------------------------

// Mean prior weight per latent pixel over steps and included layers.
template <class S>
std::vector<double> mean_prior_map(const std::vector<std::vector<TensorT<S>>>& per_step_maps,
                                   const LayerExclusion& excl, int n_tokens) {
    std::vector<double> acc(static_cast<size_t>(n_tokens), 0.0);
    size_t used = 0;
    for (const auto& step : per_step_maps) {
        const int n_layers = static_cast<int>(step.size());
        for (int l = 0; l < n_layers; ++l) {
            if (!excl.included(l, n_layers)) continue;
            const auto& r = step[static_cast<size_t>(l)];
            for (int i = 0; i < n_tokens; ++i)
                acc[static_cast<size_t>(i)] += static_cast<double>((*r.data)[static_cast<size_t>(i) * 2]);
            ++used;
        }
    }
    if (used)
        for (auto& v : acc) v /= static_cast<double>(used);
    return acc;
}

struct RegionMask {
    std::vector<uint8_t> fg;  // latent grid, 1 = foreground
    bool threshold_fallback = false;
};

// Foreground = prior-weight complement >= 0.5. When the router never leaves
// its prior preference (untrained models), fall back to the top quartile of
// the complement so a region always exists.
inline RegionMask router_foreground(const std::vector<double>& prior_map) {
    RegionMask out;
    out.fg.assign(prior_map.size(), 0);
    size_t n_fg = 0;
    for (size_t i = 0; i < prior_map.size(); ++i)
        if (1.0 - prior_map[i] >= 0.5) {
            out.fg[i] = 1;
            ++n_fg;
        }
    if (n_fg == 0 || n_fg == prior_map.size()) {
        out.threshold_fallback = true;
        std::vector<size_t> idx(prior_map.size());
        for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        std::stable_sort(idx.begin(), idx.end(), [&](size_t a, size_t b) {
            if (prior_map[a] != prior_map[b]) return prior_map[a] < prior_map[b];
            return a < b;
        });
        std::fill(out.fg.begin(), out.fg.end(), 0);
        for (size_t k = 0; k < prior_map.size() / 4; ++k) out.fg[idx[k]] = 1;
    }
    return out;
}

// Latent-grid region -> image-resolution mask (nearest / patch replication).
inline MaskU8 upsample_region(const std::vector<uint8_t>& fg, int grid_h, int grid_w, int patch) {
    MaskU8 m;
    m.w = grid_w * patch;
    m.h = grid_h * patch;
    m.m.assign(static_cast<size_t>(m.w) * m.h, 0);
    for (int gy = 0; gy < grid_h; ++gy)
        for (int gx = 0; gx < grid_w; ++gx)
            if (fg[static_cast<size_t>(gy) * grid_w + gx])
                for (int dy = 0; dy < patch; ++dy)
                    for (int dx = 0; dx < patch; ++dx)
                        m.m[static_cast<size_t>(gy * patch + dy) * m.w + gx * patch + dx] = 1;
    return m;
}

// ---------------------------------------------------------------------------
// Disentanglement.
// ---------------------------------------------------------------------------

struct DisentangleRow {
    uint64_t seed = 0;
    int pair = 0;
    double fg_change = 0, bg_change = 0, ratio = 0;
    bool degenerate = false;
    bool threshold_fallback = false;
};

struct DisentangleReport {
    std::vector<DisentangleRow> rows;
    double mean_ratio = 0;  // over non-degenerate rows
    int valid_rows = 0;
};

// Same-class pairs so the caption (and with it the prior pathway) is identical
// across the swap; only the injected image changes.
inline std::pair<SubjectSpec, SubjectSpec> disentangle_pair(uint64_t corpus_seed, int index) {
    Rng rng(hash_combine(hash_combine(corpus_seed, 0xd15eULL), static_cast<uint64_t>(index)));
    const auto cls = static_cast<ShapeClass>(index % 3);
    const int hue_a = rng.range_int(0, 360);
    const int hue_b = (hue_a + 120 + rng.range_int(0, 120)) % 360;
    const int size = rng.range_int(650, 951);
    return {SubjectSpec::make(cls, hue_a, size, 0), SubjectSpec::make(cls, hue_b, size, 0)};
}

template <class S>
DisentangleReport evalkit_disentanglement(const DenoiserT<S>& model, int n_seeds, int n_pairs,
                                          const LayerExclusion& excl, int ddim_steps,
                                          double guidance, uint64_t corpus_seed) {
    const int n_jobs = n_seeds * n_pairs;
    std::vector<DisentangleRow> rows(static_cast<size_t>(n_jobs));
    parallel_for_indexed(n_jobs, [&](int job) {
        const int si = job / n_pairs;
        const int pi = job % n_pairs;
        const uint64_t seed = hash_combine(corpus_seed, 0xabc0 + static_cast<uint64_t>(si));
        auto [spec_a, spec_b] = disentangle_pair(corpus_seed, pi);
        const int phrase = pi % static_cast<int>(context_phrases().size());

        std::vector<std::string> caption = {"a", shape_word(spec_a.shape)};
        for (const auto& w : context_phrases()[static_cast<size_t>(phrase)].words)
            caption.push_back(w);

        auto render_one = [&](const SubjectSpec& spec) {
            auto prompt = MultimodalPromptT<S>::text_only(model.vocab, caption, model.cfg.txt_len);
            prompt.bind(model.vocab, 1,
                        model.image_enc->encode(render_subject(spec, model.cfg.subject_res)));
            return model.ddim_sample(seed, prompt, ddim_steps, guidance, true);
        };
        auto res_a = render_one(spec_a);
        auto res_b = render_one(spec_b);

        auto prior_a = mean_prior_map(res_a.router_maps, excl, model.cfg.n_tokens());
        auto prior_b = mean_prior_map(res_b.router_maps, excl, model.cfg.n_tokens());
        for (size_t i = 0; i < prior_a.size(); ++i) prior_a[i] = 0.5 * (prior_a[i] + prior_b[i]);
        RegionMask region = router_foreground(prior_a);
        MaskU8 fg = upsample_region(region.fg, model.cfg.latent_h, model.cfg.latent_w, model.cfg.patch);

        ImageU8 img_a = unpatchify_image(res_a.latent, model.cfg.latent_h, model.cfg.latent_w,
                                         model.cfg.patch);
        ImageU8 img_b = unpatchify_image(res_b.latent, model.cfg.latent_h, model.cfg.latent_w,
                                         model.cfg.patch);

        double fg_sum = 0, bg_sum = 0;
        size_t fg_n = 0, bg_n = 0;
        for (int y = 0; y < img_a.h; ++y)
            for (int x = 0; x < img_a.w; ++x) {
                const uint8_t* pa = img_a.px(x, y);
                const uint8_t* pb = img_b.px(x, y);
                const double d = (std::abs(int(pa[0]) - int(pb[0])) + std::abs(int(pa[1]) - int(pb[1])) +
                                  std::abs(int(pa[2]) - int(pb[2]))) / 3.0;
                if (fg.at(x, y)) {
                    fg_sum += d;
                    ++fg_n;
                } else {
                    bg_sum += d;
                    ++bg_n;
                }
            }
        DisentangleRow row;
        row.seed = seed;
        row.pair = pi;
        row.threshold_fallback = region.threshold_fallback;
        row.fg_change = fg_n ? fg_sum / fg_n : 0;
        row.bg_change = bg_n ? bg_sum / bg_n : 0;
        if (row.fg_change < 0.02 && row.bg_change < 0.02) {
            row.degenerate = true;  // swap produced no measurable change
        } else {
            row.ratio = row.fg_change / std::max(row.bg_change, 1e-6);
        }
        rows[static_cast<size_t>(job)] = row;
    });

    DisentangleReport rep;
    rep.rows = std::move(rows);
    double acc = 0;
    for (const auto& r : rep.rows)
        if (!r.degenerate) {
            acc += r.ratio;
            ++rep.valid_rows;
        }
    rep.mean_ratio = rep.valid_rows ? acc / rep.valid_rows : 0;
    return rep;
}

inline void write_disentangle_csv(const std::string& path, const DisentangleReport& rep) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    out << "seed,pair,fg_change,bg_change,ratio,degenerate,threshold_fallback\n";
    for (const auto& r : rep.rows)
        out << r.seed << "," << r.pair << "," << r.fg_change << "," << r.bg_change << ","
            << r.ratio << "," << (r.degenerate ? 1 : 0) << "," << (r.threshold_fallback ? 1 : 0)
            << "\n";
    out << "# mean_ratio=" << rep.mean_ratio << " valid_rows=" << rep.valid_rows << "\n";
}

// ---------------------------------------------------------------------------
// Identity preservation.
// ---------------------------------------------------------------------------

struct IdentityRow {
    int subject = 0;
    double hue_err = 0;
    bool hue_ok = false, shape_ok = false;
    double agreement = 0;
    bool extract_failed = false;
};

struct IdentityReport {
    std::vector<IdentityRow> rows;
    double mean_agreement = 0;
};

// Agreement per subject: hue within 15 degrees and exact shape class, each
// worth half.
template <class S>
IdentityReport evalkit_identity(const DenoiserT<S>& model, const std::vector<SubjectSpec>& subjects,
                                const LayerExclusion& excl, int ddim_steps, double guidance,
                                uint64_t seed_base) {
    const int n = static_cast<int>(subjects.size());
    std::vector<IdentityRow> rows(static_cast<size_t>(n));
    parallel_for_indexed(n, [&](int i) {
        const SubjectSpec& spec = subjects[static_cast<size_t>(i)];
        const int phrase = i % static_cast<int>(context_phrases().size());
        std::vector<std::string> caption = {"a", shape_word(spec.shape)};
        for (const auto& w : context_phrases()[static_cast<size_t>(phrase)].words)
            caption.push_back(w);
        auto prompt = MultimodalPromptT<S>::text_only(model.vocab, caption, model.cfg.txt_len);
        prompt.bind(model.vocab, 1,
                    model.image_enc->encode(render_subject(spec, model.cfg.subject_res)));
        auto res = model.ddim_sample(hash_combine(seed_base, static_cast<uint64_t>(i)), prompt,
                                     ddim_steps, guidance, true);
        auto prior = mean_prior_map(res.router_maps, excl, model.cfg.n_tokens());
        RegionMask region = router_foreground(prior);
        MaskU8 fg = upsample_region(region.fg, model.cfg.latent_h, model.cfg.latent_w, model.cfg.patch);
        ImageU8 img = unpatchify_image(res.latent, model.cfg.latent_h, model.cfg.latent_w,
                                       model.cfg.patch);
        IdentityRow row;
        row.subject = i;
        try {
            auto est = extract_identity(img, fg);
            row.hue_err = hue_distance_deg(est.hue_deg, spec.hue_deg);
            row.hue_ok = row.hue_err <= 15.0;
            row.shape_ok = est.shape == spec.shape;
            row.agreement = 0.5 * (row.hue_ok ? 1 : 0) + 0.5 * (row.shape_ok ? 1 : 0);
        } catch (const DataError&) {
            row.extract_failed = true;
            row.hue_err = 180.0;
        }
        rows[static_cast<size_t>(i)] = row;
    });
    IdentityReport rep;
    rep.rows = std::move(rows);
    double acc = 0;
    for (const auto& r : rep.rows) acc += r.agreement;
    rep.mean_agreement = rep.rows.empty() ? 0 : acc / static_cast<double>(rep.rows.size());
    return rep;
}

inline void write_identity_csv(const std::string& path, const IdentityReport& rep) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    out << "subject,hue_err,hue_ok,shape_ok,agreement,extract_failed\n";
    for (const auto& r : rep.rows)
        out << r.subject << "," << r.hue_err << "," << (r.hue_ok ? 1 : 0) << ","
            << (r.shape_ok ? 1 : 0) << "," << r.agreement << "," << (r.extract_failed ? 1 : 0)
            << "\n";
    out << "# mean_agreement=" << rep.mean_agreement << "\n";
}

// ---------------------------------------------------------------------------
// Attention-overhead benchmark.
// ---------------------------------------------------------------------------

struct BenchReport {
    double plain_ns = 0, moa_ns = 0, router_ns = 0;
    double moa_over_plain = 0;
    double router_fraction = 0;
    int iters = 0;
    int tokens = 0, width = 0;
};

template <class S>
BenchReport bench_attention(int tokens, int width, int iters, uint64_t seed) {
    NoGradGuard ng;
    Rng rng(seed);
    auto plain = AttentionExpertT<S>::init(width, width, width, 1, AttnKind::self_attn, rng, "bench");
    auto layer = MoALayerT<S>::from_pretrained(plain, {}, width, rng, 0, "bench_moa");
    auto z = TensorT<S>::randn({tokens, width}, rng);

    using Clock = std::chrono::steady_clock;
    auto time_ns = [&](auto&& fn) {
        for (int i = 0; i < std::max(1, iters / 10); ++i) fn();  // warmup
        const auto t0 = Clock::now();
        for (int i = 0; i < iters; ++i) fn();
        const auto t1 = Clock::now();
        return std::chrono::duration<double, std::nano>(t1 - t0).count() / iters;
    };

    BenchReport rep;
    rep.iters = iters;
    rep.tokens = tokens;
    rep.width = width;
    rep.plain_ns = time_ns([&] { auto out = plain.forward(z, z); });
    rep.moa_ns = time_ns([&] { auto out = layer.forward(z, z, z); });
    rep.router_ns = time_ns([&] { auto r = layer.router.route(z); });
    rep.moa_over_plain = rep.moa_ns / rep.plain_ns;
    rep.router_fraction = rep.router_ns / rep.moa_ns;
    return rep;
}

inline void write_bench_csv(const std::string& path, const BenchReport& rep) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    out << "tokens,width,iters,plain_ns,moa_ns,router_ns,moa_over_plain,router_fraction\n";
    out << rep.tokens << "," << rep.width << "," << rep.iters << "," << rep.plain_ns << ","
        << rep.moa_ns << "," << rep.router_ns << "," << rep.moa_over_plain << ","
        << rep.router_fraction << "\n";
}

}  // namespace moa
