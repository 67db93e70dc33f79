// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <set>

#include "moa/synthdata.hpp"

using namespace moa;

namespace {

// The two byte-exact colors a subject can paint (flat + stripe).
std::set<std::array<uint8_t, 3>> subject_palette(const SubjectSpec& spec) {
    std::set<std::array<uint8_t, 3>> pal;
    std::array<uint8_t, 3> c{};
    hsv_to_rgb_u8(spec.hue_deg, SubjectSpec::kSubjectSat, SubjectSpec::kSubjectVal, c[0], c[1], c[2]);
    pal.insert(c);
    if (spec.tex_freq > 0) {
        hsv_to_rgb_u8(spec.hue_deg, SubjectSpec::kSubjectSat, SubjectSpec::kStripeVal, c[0], c[1], c[2]);
        pal.insert(c);
    }
    return pal;
}

size_t count_palette_pixels(const ImageU8& img, const std::set<std::array<uint8_t, 3>>& pal) {
    size_t n = 0;
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) {
            const uint8_t* p = img.px(x, y);
            if (pal.count({p[0], p[1], p[2]})) ++n;
        }
    return n;
}

}  // namespace

TEST_CASE("render_subject: same spec twice gives identical bytes") {
    auto spec = SubjectSpec::make(ShapeClass::triangle, 200, 800, 2);
    auto a = render_subject(spec, 32);
    auto b = render_subject(spec, 32);
    CHECK(a.rgb == b.rgb);
}

TEST_CASE("subject spec: degenerate size rejected at construction") {
    CHECK_THROWS_AS(SubjectSpec::make(ShapeClass::circle, 10, 0, 0), DataError);
    CHECK_THROWS_AS(SubjectSpec::make(ShapeClass::circle, 10, 200, 0), DataError);
    CHECK_THROWS_AS(SubjectSpec::make(ShapeClass::circle, 400, 800, 0), DataError);
}

TEST_CASE("extractor recovers hue within 2 degrees over 100 specs") {
    Rng rng(42);
    for (int i = 0; i < 100; ++i) {
        auto spec = SubjectSpec::sample(rng);
        auto img = render_subject(spec, 32);
        MaskU8 all;
        all.w = all.h = 32;
        all.m.assign(32 * 32, 1);  // extractor refines to chromatic pixels itself
        auto est = extract_identity(img, all);
        CHECK(hue_distance_deg(est.hue_deg, spec.hue_deg) < 2.0);
    }
}

TEST_CASE("extractor recovers shape class and size within 5% on clean renders") {
    Rng rng(43);
    int correct = 0;
    for (int i = 0; i < 100; ++i) {
        auto spec = SubjectSpec::sample(rng);
        auto img = render_subject(spec, 32);
        MaskU8 all;
        all.w = all.h = 32;
        all.m.assign(32 * 32, 1);
        auto est = extract_identity(img, all);
        if (est.shape == spec.shape) ++correct;
        const int rmax = 32 * 45 / 100;
        const int r_true = std::max(2, spec.size_pm * rmax / 1000);
        CHECK(std::fabs(est.radius_px - r_true) / r_true < 0.05);
    }
    CHECK(correct == 100);
}

TEST_CASE("extractor: all-black masked region errors") {
    ImageU8 img = ImageU8::filled(16, 16, 0, 0, 0);
    MaskU8 all;
    all.w = all.h = 16;
    all.m.assign(16 * 16, 1);
    CHECK_THROWS_AS((void)extract_identity(img, all), DataError);
}

TEST_CASE("extractor: empty mask errors") {
    ImageU8 img = ImageU8::filled(16, 16, 200, 10, 10);
    MaskU8 none;
    none.w = none.h = 16;
    none.m.assign(16 * 16, 0);
    CHECK_THROWS_AS((void)extract_identity(img, none), DataError);
}

TEST_CASE("extractor: hue stays within 5 degrees under additive noise") {
    Rng rng(44);
    for (int i = 0; i < 20; ++i) {
        auto spec = SubjectSpec::sample(rng);
        auto img = render_subject(spec, 32);
        // sigma = 0.05 on the [0,1] scale, clamped.
        for (auto& v : img.rgb) {
            const double noisy = v + rng.normal() * 0.05 * 255.0;
            v = static_cast<uint8_t>(std::min(255.0, std::max(0.0, noisy)));
        }
        MaskU8 all;
        all.w = all.h = 32;
        all.m.assign(32 * 32, 1);
        auto est = extract_identity(img, all);
        CHECK(hue_distance_deg(est.hue_deg, spec.hue_deg) < 5.0);
    }
}

TEST_CASE("render_scene: occlusion 0 mask area equals exact-color pixel count") {
    Rng rng(45);
    for (int i = 0; i < 25; ++i) {
        auto spec = SubjectSpec::sample(rng);
        auto s = render_scene({spec}, rng.range_int(0, 12), rng.next_u64(), 0.0);
        REQUIRE(s.masks.size() == 1);
        // Oracle: subjects paint byte-exact palette colors that the low-sat
        // backgrounds can never produce.
        CHECK(s.masks[0].area() == count_palette_pixels(s.image, subject_palette(spec)));
    }
}

TEST_CASE("render_scene: two subjects have disjoint nonempty masks") {
    Rng rng(46);
    for (int i = 0; i < 25; ++i) {
        auto a = SubjectSpec::make(ShapeClass::circle, 10, 900, 0);
        auto b = SubjectSpec::make(ShapeClass::square, 210, 900, 0);
        auto s = render_scene({a, b}, rng.range_int(0, 12), rng.next_u64(), 0.3);
        REQUIRE(s.masks.size() == 2);
        CHECK(s.masks[0].area() > 0);
        CHECK(s.masks[1].area() > 0);
        for (size_t k = 0; k < s.masks[0].m.size(); ++k)
            CHECK((s.masks[0].m[k] & s.masks[1].m[k]) == 0);
    }
}

TEST_CASE("render_scene: same parameters give bit-identical samples") {
    auto a = SubjectSpec::make(ShapeClass::triangle, 140, 700, 1);
    auto b = SubjectSpec::make(ShapeClass::circle, 320, 650, 0);
    auto s1 = render_scene({a, b}, 4, 999, 0.5);
    auto s2 = render_scene({a, b}, 4, 999, 0.5);
    CHECK(s1.image.rgb == s2.image.rgb);
    CHECK(s1.masks[0].m == s2.masks[0].m);
    CHECK(s1.masks[1].m == s2.masks[1].m);
    CHECK(s1.caption == s2.caption);
}

TEST_CASE("caption bookkeeping: recorded positions hold the class words") {
    CorpusConfig cfg;
    cfg.train_scenes = 40;
    for (int i = 0; i < cfg.train_scenes; ++i) {
        auto d = corpus_descriptor(cfg, false, i);
        auto s = d.render(cfg.scene_resolution);
        REQUIRE(s.subject_positions.size() == s.subjects.size());
        for (size_t k = 0; k < s.subjects.size(); ++k) {
            const int pos = s.subject_positions[k];
            CHECK(s.caption[static_cast<size_t>(pos)] == shape_word(s.subjects[k].shape));
        }
    }
}

TEST_CASE("corpus determinism: descriptors and renders are stable") {
    CorpusConfig cfg;
    auto d1 = corpus_descriptor(cfg, false, 7);
    auto d2 = corpus_descriptor(cfg, false, 7);
    CHECK(d1.scene_seed == d2.scene_seed);
    CHECK(d1.phrase_id == d2.phrase_id);
    auto s1 = d1.render(64);
    auto s2 = d2.render(64);
    CHECK(s1.image.rgb == s2.image.rgb);
    // Eval split differs from train split.
    auto de = corpus_descriptor(cfg, true, 7);
    CHECK(de.scene_seed != d1.scene_seed);
}

TEST_CASE("manifest: JSON-lines round trip re-renders identically") {
    CorpusConfig cfg;
    std::vector<SceneDescriptor> scenes;
    for (int i = 0; i < 6; ++i) scenes.push_back(corpus_descriptor(cfg, false, i));
    const std::string path = "manifest_test.jsonl";
    write_manifest(path, scenes);
    auto loaded = read_manifest(path);
    REQUIRE(loaded.size() == scenes.size());
    for (size_t i = 0; i < scenes.size(); ++i) {
        auto a = scenes[i].render(64);
        auto b = loaded[i].render(64);
        CHECK(a.image.rgb == b.image.rgb);
    }
    std::remove(path.c_str());
}

TEST_CASE("occluders shrink visibility masks") {
    auto spec = SubjectSpec::make(ShapeClass::square, 20, 900, 0);
    auto open = render_scene({spec}, 0, 31337, 0.0);
    auto blocked = render_scene({spec}, 0, 31337, 1.0);
    // Same layout seed, so the subject lands in the same spot; bars only remove.
    CHECK(blocked.masks[0].area() <= open.masks[0].area());
    CHECK(blocked.occlusion_pm == 1000);
}
