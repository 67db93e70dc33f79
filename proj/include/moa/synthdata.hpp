// SPDX-License-Identifier: Apache-2.0
//
// Procedural scene corpus: flat-shaded subjects (circle / square / triangle)
// with exact visibility masks, parameterized backgrounds, and template
// captions. Rasterization is integer-only so a corpus seed renders to the
// same bytes on every platform.

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "moa/common.hpp"
#include "moa/rng.hpp"

namespace moa {

struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error("data error: " + msg) {}
};

struct ImageU8 {
    int w = 0, h = 0;
    std::vector<uint8_t> rgb;  // row-major, 3 bytes per pixel

    static ImageU8 filled(int w, int h, uint8_t r, uint8_t g, uint8_t b) {
        ImageU8 img;
        img.w = w;
        img.h = h;
        img.rgb.resize(static_cast<size_t>(w) * h * 3);
        for (size_t i = 0; i < img.rgb.size(); i += 3) {
            img.rgb[i] = r;
            img.rgb[i + 1] = g;
            img.rgb[i + 2] = b;
        }
        return img;
    }

    uint8_t* px(int x, int y) { return rgb.data() + (static_cast<size_t>(y) * w + x) * 3; }
    const uint8_t* px(int x, int y) const { return rgb.data() + (static_cast<size_t>(y) * w + x) * 3; }
};

struct MaskU8 {
    int w = 0, h = 0;
    std::vector<uint8_t> m;  // 0/1

    bool at(int x, int y) const { return m[static_cast<size_t>(y) * w + x] != 0; }
    size_t area() const {
        size_t a = 0;
        for (uint8_t v : m) a += v;
        return a;
    }
};

// Integer HSV -> RGB; h in [0,360), s/v in [0,255].
inline void hsv_to_rgb_u8(int h, int s, int v, uint8_t& r, uint8_t& g, uint8_t& b) {
    const int region = (h / 60) % 6;
    const int rem = h % 60;
    const int p = v * (255 - s) / 255;
    const int q = v * (255 * 60 - s * rem) / (255 * 60);
    const int t = v * (255 * 60 - s * (60 - rem)) / (255 * 60);
    int rr, gg, bb;
    switch (region) {
        case 0: rr = v; gg = t; bb = p; break;
        case 1: rr = q; gg = v; bb = p; break;
        case 2: rr = p; gg = v; bb = t; break;
        case 3: rr = p; gg = q; bb = v; break;
        case 4: rr = t; gg = p; bb = v; break;
        default: rr = v; gg = p; bb = q; break;
    }
    r = static_cast<uint8_t>(rr);
    g = static_cast<uint8_t>(gg);
    b = static_cast<uint8_t>(bb);
}

struct HsvF {
    double h, s, v;  // h in [0,360), s/v in [0,1]
};

inline HsvF rgb_to_hsv(double r, double g, double b) {
    const double mx = std::max({r, g, b});
    const double mn = std::min({r, g, b});
    const double d = mx - mn;
    HsvF out{0.0, 0.0, mx};
    if (d > 1e-12) {
        if (mx == r)
            out.h = 60.0 * std::fmod((g - b) / d + 6.0, 6.0);
        else if (mx == g)
            out.h = 60.0 * ((b - r) / d + 2.0);
        else
            out.h = 60.0 * ((r - g) / d + 4.0);
    }
    if (mx > 1e-12) out.s = d / mx;
    return out;
}

inline double hue_distance_deg(double a, double b) {
    double d = std::fabs(std::fmod(a - b + 540.0, 360.0) - 180.0);
    return d;
}

// ---------------------------------------------------------------------------
// Subjects.
// ---------------------------------------------------------------------------

enum class ShapeClass : int { circle = 0, square = 1, triangle = 2 };

inline const char* shape_word(ShapeClass c) {
    switch (c) {
        case ShapeClass::circle: return "circle";
        case ShapeClass::square: return "square";
        default: return "triangle";
    }
}

struct SubjectSpec {
    ShapeClass shape = ShapeClass::circle;
    int hue_deg = 0;      // [0,360)
    int size_pm = 750;    // per-mille of the max radius; >= kMinSizePm
    int tex_freq = 0;     // 0 = flat fill, 1..3 = vertical stripe bands

    static constexpr int kMinSizePm = 400;
    static constexpr int kSubjectSat = 228;
    static constexpr int kSubjectVal = 232;
    static constexpr int kStripeVal = 170;

    static SubjectSpec make(ShapeClass shape, int hue_deg, int size_pm, int tex_freq) {
        if (size_pm < kMinSizePm || size_pm > 1000)
            throw DataError("subject size " + std::to_string(size_pm) + " outside [" +
                            std::to_string(kMinSizePm) + ",1000]");
        if (hue_deg < 0 || hue_deg >= 360) throw DataError("hue out of range");
        if (tex_freq < 0 || tex_freq > 3) throw DataError("texture frequency out of range");
        return SubjectSpec{shape, hue_deg, size_pm, tex_freq};
    }

    static SubjectSpec sample(Rng& rng) {
        return make(static_cast<ShapeClass>(rng.range_int(0, 3)), rng.range_int(0, 360),
                    rng.range_int(kMinSizePm, 951), rng.range_int(0, 4));
    }
};

namespace detail_synth {

// Visit every pixel of the shape at integer center (cx,cy), radius r.
//   circle:   dx^2+dy^2 <= r^2
//   square:   |dx| <= r, |dy| <= r
//   triangle: upright, apex (cx, cy-r), base row cy + r/2, half-width growing
//             linearly; area ~ 1.5 r^2.
template <class Fn>
void rasterize(ShapeClass shape, int cx, int cy, int r, int w, int h, Fn&& fn) {
    switch (shape) {
        case ShapeClass::circle:
            for (int y = cy - r; y <= cy + r; ++y) {
                if (y < 0 || y >= h) continue;
                for (int x = cx - r; x <= cx + r; ++x) {
                    if (x < 0 || x >= w) continue;
                    const int dx = x - cx, dy = y - cy;
                    if (dx * dx + dy * dy <= r * r) fn(x, y);
                }
            }
            break;
        case ShapeClass::square:
            for (int y = cy - r; y <= cy + r; ++y) {
                if (y < 0 || y >= h) continue;
                for (int x = cx - r; x <= cx + r; ++x) {
                    if (x < 0 || x >= w) continue;
                    fn(x, y);
                }
            }
            break;
        case ShapeClass::triangle: {
            const int ytop = cy - r;
            const int ybase = cy + r / 2;
            const int height = ybase - ytop;
            for (int y = ytop; y <= ybase; ++y) {
                if (y < 0 || y >= h) continue;
                const int halfw = height > 0 ? r * (y - ytop) / height : 0;
                for (int x = cx - halfw; x <= cx + halfw; ++x) {
                    if (x < 0 || x >= w) continue;
                    fn(x, y);
                }
            }
            break;
        }
    }
}

inline void subject_color_at(const SubjectSpec& spec, int x, int cx, int r, uint8_t* out) {
    int v = SubjectSpec::kSubjectVal;
    if (spec.tex_freq > 0) {
        const int band = ((x - cx + r) * 2 * spec.tex_freq) / (2 * r + 1);
        if (band % 2 == 1) v = SubjectSpec::kStripeVal;
    }
    hsv_to_rgb_u8(spec.hue_deg, SubjectSpec::kSubjectSat, v, out[0], out[1], out[2]);
}

}  // namespace detail_synth

// Clean reference rendering: subject centered on a neutral gray background.
// This is what the image encoder consumes.
inline ImageU8 render_subject(const SubjectSpec& spec, int resolution) {
    ImageU8 img = ImageU8::filled(resolution, resolution, 184, 184, 184);
    const int c = resolution / 2;
    const int rmax = resolution * 45 / 100;
    const int r = std::max(2, spec.size_pm * rmax / 1000);
    detail_synth::rasterize(spec.shape, c, c, r, resolution, resolution, [&](int x, int y) {
        detail_synth::subject_color_at(spec, x, c, r, img.px(x, y));
    });
    return img;
}

// ---------------------------------------------------------------------------
// Scenes.
// ---------------------------------------------------------------------------

struct ContextPhrase {
    std::vector<std::string> words;
    int top_h, top_s, top_v;
    int bot_h, bot_s, bot_v;
};

// Fixed context list; the phrase picks both the caption tail and the
// background colors, so prompt consistency is mechanically checkable.
inline const std::vector<ContextPhrase>& context_phrases() {
    static const std::vector<ContextPhrase> phrases = {
        {{"in", "a", "park"}, 110, 60, 150, 120, 70, 95},
        {{"at", "the", "beach"}, 200, 55, 190, 45, 60, 200},
        {{"in", "the", "snow"}, 210, 18, 235, 215, 12, 205},
        {{"at", "night"}, 230, 60, 60, 235, 55, 25},
        {{"in", "a", "desert"}, 40, 62, 205, 35, 68, 160},
        {{"on", "a", "meadow"}, 95, 55, 185, 105, 65, 130},
        {{"by", "a", "lake"}, 195, 58, 170, 205, 66, 115},
        {{"in", "a", "city"}, 220, 14, 150, 225, 10, 100},
        {{"at", "sunset"}, 25, 65, 195, 280, 45, 110},
        {{"in", "a", "forest"}, 130, 62, 105, 140, 70, 60},
        {{"on", "a", "hill"}, 75, 50, 165, 85, 58, 115},
        {{"in", "a", "field"}, 60, 55, 190, 70, 62, 135},
    };
    return phrases;
}

struct SceneSample {
    ImageU8 image;                          // 64x64 composited scene
    std::vector<MaskU8> masks;              // per subject, visible pixels only
    std::vector<std::string> caption;       // whitespace token list
    std::vector<int> subject_positions;     // caption index of each class word
    std::vector<SubjectSpec> subjects;
    int phrase_id = 0;
    uint64_t scene_seed = 0;
    int occlusion_pm = 0;                   // occlusion level in per-mille
};

namespace detail_synth {

inline void paint_background(ImageU8& img, int phrase_id, uint64_t seed) {
    const ContextPhrase& ph = context_phrases()[static_cast<size_t>(phrase_id)];
    for (int y = 0; y < img.h; ++y) {
        // Integer lerp of HSV between top and bottom rows.
        const int hh = ph.top_h + (ph.bot_h - ph.top_h) * y / (img.h - 1);
        const int ss = ph.top_s + (ph.bot_s - ph.top_s) * y / (img.h - 1);
        const int vv = ph.top_v + (ph.bot_v - ph.top_v) * y / (img.h - 1);
        for (int x = 0; x < img.w; ++x) {
            uint64_t st = seed ^ (static_cast<uint64_t>(y) * 0x1f3ULL + static_cast<uint64_t>(x) * 0x9e5ULL + 0x51ULL);
            const int noise = static_cast<int>(splitmix64(st) % 13) - 6;
            int v2 = vv + noise;
            v2 = std::min(255, std::max(0, v2));
            uint8_t* p = img.px(x, y);
            hsv_to_rgb_u8((hh % 360 + 360) % 360, ss, v2, p[0], p[1], p[2]);
        }
    }
}

}  // namespace detail_synth

// Composites 1-2 subjects over a phrase-colored background with optional
// occluder bars. Masks follow visible-pixel semantics: a pixel belongs to a
// subject only if that subject's color is what you see there.
inline SceneSample render_scene(const std::vector<SubjectSpec>& subjects, int phrase_id,
                                uint64_t scene_seed, double occlusion_level, int resolution = 64) {
    if (subjects.empty() || subjects.size() > 2) throw DataError("render_scene: 1-2 subjects");
    if (phrase_id < 0 || phrase_id >= static_cast<int>(context_phrases().size()))
        throw DataError("render_scene: phrase out of range");
    if (occlusion_level < 0.0 || occlusion_level > 1.0)
        throw DataError("render_scene: occlusion level outside [0,1]");

    const int n = static_cast<int>(subjects.size());
    const int occl_pm = static_cast<int>(std::lround(occlusion_level * 1000));

    for (int attempt = 0; attempt < 8; ++attempt) {
        Rng rng = Rng(hash_combine(scene_seed, 0xa11ce + static_cast<uint64_t>(attempt)));
        SceneSample s;
        s.subjects = subjects;
        s.phrase_id = phrase_id;
        s.scene_seed = scene_seed;
        s.occlusion_pm = occl_pm;
        s.image.w = s.image.h = resolution;
        s.image.rgb.assign(static_cast<size_t>(resolution) * resolution * 3, 0);
        detail_synth::paint_background(s.image, phrase_id, hash_combine(scene_seed, 0xb6ULL));

        // owner[-]: -1 background, 0/1 subject index, -2 occluder
        std::vector<int8_t> owner(static_cast<size_t>(resolution) * resolution, -1);

        const int rmax_pm = (n == 1) ? resolution * 24 / 100 : resolution * 18 / 100;
        for (int si = 0; si < n; ++si) {
            const SubjectSpec& spec = subjects[static_cast<size_t>(si)];
            const int r = std::max(3, spec.size_pm * rmax_pm / 1000);
            int cx, cy;
            if (n == 1) {
                cx = rng.range_int(resolution * 30 / 100, resolution * 70 / 100);
            } else if (si == 0) {
                cx = rng.range_int(resolution * 22 / 100, resolution * 42 / 100);
            } else {
                cx = rng.range_int(resolution * 58 / 100, resolution * 78 / 100);
            }
            cy = rng.range_int(resolution * 32 / 100, resolution * 68 / 100);
            detail_synth::rasterize(spec.shape, cx, cy, r, resolution, resolution, [&](int x, int y) {
                detail_synth::subject_color_at(spec, x, cx, r, s.image.px(x, y));
                owner[static_cast<size_t>(y) * resolution + x] = static_cast<int8_t>(si);
            });
        }

        // Occluder bars over everything.
        const int bars = (occl_pm * 3 + 500) / 1000;
        for (int bi = 0; bi < bars; ++bi) {
            const bool vertical = rng.range_int(0, 2) == 0;
            const int width = rng.range_int(2, 5);
            const int pos = rng.range_int(resolution / 6, resolution * 5 / 6);
            for (int a = 0; a < resolution; ++a)
                for (int wofs = 0; wofs < width; ++wofs) {
                    const int x = vertical ? pos + wofs : a;
                    const int y = vertical ? a : pos + wofs;
                    if (x < 0 || x >= resolution || y < 0 || y >= resolution) continue;
                    uint8_t* p = s.image.px(x, y);
                    p[0] = 45;
                    p[1] = 45;
                    p[2] = 52;
                    owner[static_cast<size_t>(y) * resolution + x] = -2;
                }
        }

        bool degenerate = false;
        for (int si = 0; si < n; ++si) {
            MaskU8 m;
            m.w = m.h = resolution;
            m.m.assign(static_cast<size_t>(resolution) * resolution, 0);
            size_t area = 0;
            for (size_t i = 0; i < owner.size(); ++i)
                if (owner[i] == si) {
                    m.m[i] = 1;
                    ++area;
                }
            if (area < 12) degenerate = true;  // fully (or nearly) hidden
            s.masks.push_back(std::move(m));
        }
        if (degenerate) continue;

        // Caption: "a <class> [and a <class>] <phrase words>".
        s.caption.push_back("a");
        s.subject_positions.push_back(static_cast<int>(s.caption.size()));
        s.caption.push_back(shape_word(subjects[0].shape));
        if (n == 2) {
            s.caption.push_back("and");
            s.caption.push_back("a");
            s.subject_positions.push_back(static_cast<int>(s.caption.size()));
            s.caption.push_back(shape_word(subjects[1].shape));
        }
        for (const auto& w : context_phrases()[static_cast<size_t>(phrase_id)].words)
            s.caption.push_back(w);
        return s;
    }
    throw DataError("render_scene: layout degenerate after bounded retries");
}

// ---------------------------------------------------------------------------
// Identity extraction (the evaluation oracle standing in for a face-identity
// network).
// ---------------------------------------------------------------------------

struct IdentityEstimate {
    ShapeClass shape = ShapeClass::circle;
    double hue_deg = 0.0;
    double radius_px = 0.0;
    double mean_sat = 0.0;
    size_t pixels = 0;
};

inline IdentityEstimate extract_identity(const ImageU8& image, const MaskU8& mask) {
    if (image.w != mask.w || image.h != mask.h) throw DataError("extract_identity: size mismatch");
    if (mask.area() == 0) throw DataError("extract_identity: empty mask");

    // Keep chromatic pixels only; background and occluders are low-saturation
    // or dark by construction.
    std::vector<uint8_t> refined(static_cast<size_t>(image.w) * image.h, 0);
    double sum_r = 0, sum_g = 0, sum_b = 0, sum_sat = 0;
    size_t count = 0;
    for (int y = 0; y < image.h; ++y)
        for (int x = 0; x < image.w; ++x) {
            if (!mask.at(x, y)) continue;
            const uint8_t* p = image.px(x, y);
            const HsvF hsv = rgb_to_hsv(p[0] / 255.0, p[1] / 255.0, p[2] / 255.0);
            if (hsv.s < 0.35 || hsv.v < 0.25) continue;
            refined[static_cast<size_t>(y) * image.w + x] = 1;
            sum_r += p[0];
            sum_g += p[1];
            sum_b += p[2];
            sum_sat += hsv.s;
            ++count;
        }
    if (count == 0) throw DataError("extract_identity: no chromatic pixels in mask");

    IdentityEstimate est;
    est.pixels = count;
    est.mean_sat = sum_sat / static_cast<double>(count);
    const HsvF mean_hsv =
        rgb_to_hsv(sum_r / count / 255.0, sum_g / count / 255.0, sum_b / count / 255.0);
    est.hue_deg = mean_hsv.h;

    // Shape from silhouette geometry: bbox fill separates square (1.0) from
    // circle (~0.79); the centroid of an upright triangle sits below its bbox
    // center by ~1/6 of the height.
    int x0 = image.w, x1 = -1, y0 = image.h, y1 = -1;
    double cy_sum = 0;
    for (int y = 0; y < image.h; ++y)
        for (int x = 0; x < image.w; ++x)
            if (refined[static_cast<size_t>(y) * image.w + x]) {
                x0 = std::min(x0, x);
                x1 = std::max(x1, x);
                y0 = std::min(y0, y);
                y1 = std::max(y1, y);
                cy_sum += y;
            }
    const double bw = x1 - x0 + 1, bh = y1 - y0 + 1;
    const double fill = static_cast<double>(count) / (bw * bh);
    const double centroid_offset = (cy_sum / static_cast<double>(count) - (y0 + y1) / 2.0) / bh;

    // Pixel-count model per shape: count ~ a r^2 + b r + c for the inclusive
    // integer rasterizer; solve for r.
    double a, b2, c;
    if (centroid_offset > 0.09) {
        est.shape = ShapeClass::triangle;
        a = 1.5; b2 = 1.5; c = 1.0;
    } else if (fill > 0.88) {
        est.shape = ShapeClass::square;
        a = 4.0; b2 = 4.0; c = 1.0;
    } else {
        est.shape = ShapeClass::circle;
        a = 3.14159265358979323846; b2 = 0.0; c = 0.0;
    }
    const double disc = b2 * b2 - 4.0 * a * (c - static_cast<double>(count));
    est.radius_px = (-b2 + std::sqrt(std::max(0.0, disc))) / (2.0 * a);
    return est;
}

// ---------------------------------------------------------------------------
// Corpus.
// ---------------------------------------------------------------------------

struct CorpusConfig {
    int train_scenes = 256;
    int eval_scenes = 20;
    int heldout_subjects = 20;
    uint64_t seed = 1234;
    double two_subject_prob = 0.35;
    double occluded_prob = 0.4;
    int scene_resolution = 64;
    int subject_resolution = 32;
};

struct SceneDescriptor {
    uint64_t scene_seed = 0;
    int phrase_id = 0;
    int occlusion_pm = 0;
    std::vector<SubjectSpec> subjects;

    SceneSample render(int resolution) const {
        return render_scene(subjects, phrase_id, scene_seed, occlusion_pm / 1000.0, resolution);
    }
};

// Deterministic function of (config seed, split, index).
inline SceneDescriptor corpus_descriptor(const CorpusConfig& cfg, bool eval_split, int index) {
    Rng rng(hash_combine(hash_combine(cfg.seed, eval_split ? 0xe7a1ULL : 0x7a21ULL),
                         static_cast<uint64_t>(index)));
    SceneDescriptor d;
    d.scene_seed = rng.next_u64();
    d.phrase_id = rng.range_int(0, static_cast<int>(context_phrases().size()));
    const int n = rng.uniform() < cfg.two_subject_prob ? 2 : 1;
    for (int i = 0; i < n; ++i) d.subjects.push_back(SubjectSpec::sample(rng));
    d.occlusion_pm =
        rng.uniform() < cfg.occluded_prob ? static_cast<int>(std::lround(rng.uniform(0.2, 0.8) * 1000)) : 0;
    return d;
}

// Held-out subject identities (never rendered into the training split).
inline SubjectSpec heldout_subject(const CorpusConfig& cfg, int index) {
    Rng rng(hash_combine(hash_combine(cfg.seed, 0x5e1dULL), static_cast<uint64_t>(index)));
    return SubjectSpec::sample(rng);
}

}  // namespace moa

// Manifest I/O lives in a separate header section so the rasterizer above
// stays free of the JSON dependency.
#include <fstream>

#include <json.hpp>

namespace moa {

inline nlohmann::json descriptor_to_json(const SceneDescriptor& d) {
    nlohmann::json subjects = nlohmann::json::array();
    for (const auto& s : d.subjects)
        subjects.push_back({{"shape", static_cast<int>(s.shape)},
                            {"hue", s.hue_deg},
                            {"size_pm", s.size_pm},
                            {"tex", s.tex_freq}});
    return {{"seed", d.scene_seed},
            {"phrase", d.phrase_id},
            {"occlusion_pm", d.occlusion_pm},
            {"subjects", subjects}};
}

inline SceneDescriptor descriptor_from_json(const nlohmann::json& j) {
    SceneDescriptor d;
    d.scene_seed = j.at("seed").get<uint64_t>();
    d.phrase_id = j.at("phrase").get<int>();
    d.occlusion_pm = j.at("occlusion_pm").get<int>();
    for (const auto& s : j.at("subjects"))
        d.subjects.push_back(SubjectSpec::make(static_cast<ShapeClass>(s.at("shape").get<int>()),
                                               s.at("hue").get<int>(), s.at("size_pm").get<int>(),
                                               s.at("tex").get<int>()));
    return d;
}

// One descriptor per line; pixels are re-rendered on demand.
inline void write_manifest(const std::string& path, const std::vector<SceneDescriptor>& scenes) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write manifest " + path);
    for (const auto& d : scenes) out << descriptor_to_json(d).dump() << "\n";
}

inline std::vector<SceneDescriptor> read_manifest(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read manifest " + path);
    std::vector<SceneDescriptor> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        out.push_back(descriptor_from_json(nlohmann::json::parse(line)));
    }
    return out;
}

}  // namespace moa
