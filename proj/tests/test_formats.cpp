// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>

#include "moa/checkpoint.hpp"
#include "moa/config.hpp"
#include "moa/image_io.hpp"

using namespace moa;

namespace {

DenoiserConfig tiny_config() {
    DenoiserConfig cfg;
    cfg.latent_h = cfg.latent_w = 8;
    cfg.image_res = 32;
    cfg.d_z = 16;
    cfg.blocks = 2;
    cfg.d_t = 12;
    cfg.d_f = 8;
    cfg.t_max = 100;
    cfg.ff_hidden = 32;
    cfg.txt_len = 8;
    cfg.subject_res = 32;
    return cfg;
}

std::vector<uint8_t> slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("png: round trip preserves bytes, encoder deterministic") {
    auto scene = render_scene({SubjectSpec::make(ShapeClass::circle, 40, 800, 1)}, 3, 77, 0.2);
    write_png_rgb8("t_png_a.png", scene.image);
    write_png_rgb8("t_png_b.png", scene.image);
    CHECK(slurp("t_png_a.png") == slurp("t_png_b.png"));
    auto back = read_png_rgb8("t_png_a.png");
    CHECK(back.w == scene.image.w);
    CHECK(back.h == scene.image.h);
    CHECK(back.rgb == scene.image.rgb);
    std::remove("t_png_a.png");
    std::remove("t_png_b.png");
}

TEST_CASE("png: filtered input decodes (all filter types)") {
    // Exercise the unfilter path by encoding with per-row filters 0..4
    // manually and checking the decode.
    ImageU8 img = ImageU8::filled(8, 5, 0, 0, 0);
    Rng rng(5);
    for (auto& v : img.rgb) v = static_cast<uint8_t>(rng.below(256));
    const size_t stride = 8 * 3;
    std::vector<uint8_t> raw;
    std::vector<uint8_t> prev(stride, 0);
    for (int y = 0; y < 5; ++y) {
        const uint8_t filter = static_cast<uint8_t>(y);
        raw.push_back(filter);
        const uint8_t* row = img.rgb.data() + y * stride;
        for (size_t i = 0; i < stride; ++i) {
            const int a = i >= 3 ? row[i - 3] : 0;
            const int b = prev[i];
            const int c = (y > 0 && i >= 3) ? prev[i - 3] : 0;
            int v = row[i];
            switch (filter) {
                case 0: break;
                case 1: v -= a; break;
                case 2: v -= b; break;
                case 3: v -= (a + b) / 2; break;
                case 4: v -= detail_io::paeth(a, b, c); break;
            }
            raw.push_back(static_cast<uint8_t>(v & 0xff));
        }
        std::memcpy(prev.data(), row, stride);
    }
    auto idat = detail_io::zlib_deflate(raw);
    std::vector<uint8_t> file = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    std::vector<uint8_t> ihdr;
    detail_io::put_u32_be(ihdr, 8);
    detail_io::put_u32_be(ihdr, 5);
    ihdr.push_back(8);
    ihdr.push_back(2);
    ihdr.push_back(0);
    ihdr.push_back(0);
    ihdr.push_back(0);
    detail_io::write_chunk(file, "IHDR", ihdr.data(), ihdr.size());
    detail_io::write_chunk(file, "IDAT", idat.data(), idat.size());
    detail_io::write_chunk(file, "IEND", nullptr, 0);
    std::ofstream out("t_png_filters.png", std::ios::binary);
    out.write(reinterpret_cast<const char*>(file.data()), static_cast<std::streamsize>(file.size()));
    out.close();
    auto back = read_png_rgb8("t_png_filters.png");
    CHECK(back.rgb == img.rgb);
    std::remove("t_png_filters.png");
}

TEST_CASE("pgm: round trip") {
    std::vector<uint8_t> gray(16 * 16);
    for (size_t i = 0; i < gray.size(); ++i) gray[i] = static_cast<uint8_t>(i);
    write_pgm("t_map.pgm", 16, 16, gray);
    int w = 0, h = 0;
    auto back = read_pgm("t_map.pgm", w, h);
    CHECK(w == 16);
    CHECK(h == 16);
    CHECK(back == gray);
    std::remove("t_map.pgm");
}

TEST_CASE("latent dump: header + payload round trip") {
    Rng rng(6);
    auto x = Tensor::randn({16 * 16, 48}, rng);
    write_latent("t_latent.moat", x, 16, 16);
    // 16-byte header.
    auto bytes = slurp("t_latent.moat");
    CHECK(bytes.size() == 16 + x.numel() * 4);
    CHECK(std::memcmp(bytes.data(), "MOAT", 4) == 0);
    int h = 0, w = 0;
    auto back = read_latent<float>("t_latent.moat", h, w);
    CHECK(h == 16);
    CHECK(w == 16);
    REQUIRE(back.shape == x.shape);
    CHECK(*back.data == *x.data);
    std::remove("t_latent.moat");
}

TEST_CASE("router map export: quantization within 1/255 of the raw sidecar") {
    Rng rng(7);
    auto r = softmax(Tensor::randn({64, 2}, rng), 1);
    export_router_map("."/*dir*/, 12, 3, r, 8, 8);
    int w = 0, h = 0;
    auto gray = read_pgm("./router_t12_l3.pgm", w, h);
    int hh = 0, ww = 0;
    auto raw = read_latent<float>("./router_t12_l3.f32", hh, ww);
    REQUIRE(w * h == 64);
    for (int i = 0; i < 64; ++i) {
        CHECK(std::fabs(gray[static_cast<size_t>(i)] / 255.0 - (*raw.data)[static_cast<size_t>(i)]) <=
              1.0 / 255.0 + 1e-9);
        CHECK((*raw.data)[static_cast<size_t>(i)] == r.at({i, 0}));
    }
    std::remove("./router_t12_l3.pgm");
    std::remove("./router_t12_l3.f32");
}

TEST_CASE("checkpoint: save/load round trip is bit-exact over random models") {
    for (uint64_t seed = 0; seed < 5; ++seed) {
        auto m = DenoiserT<float>::init(tiny_config(), 100 + seed);
        if (seed % 2 == 1) m.wrap_moa(7 + seed);
        // Random training-like perturbation.
        Rng rng(200 + seed);
        for (auto* p : m.trainable_params())
            for (auto& v : *p->value.data) v += static_cast<float>(rng.normal() * 0.1);
        const std::string before = params_digest(m.params());
        save_checkpoint("t_ckpt.moac", m);

        auto m2 = DenoiserT<float>::init(tiny_config(), 999);  // different init
        if (seed % 2 == 1) m2.wrap_moa(1);
        load_checkpoint("t_ckpt.moac", m2);
        CHECK(params_digest(m2.params()) == before);

        // Bitwise value check too.
        auto pa = m.params();
        auto pb = m2.params();
        REQUIRE(pa.size() == pb.size());
        for (size_t i = 0; i < pa.size(); ++i) CHECK(*pa[i]->value.data == *pb[i]->value.data);
    }
    std::remove("t_ckpt.moac");
}

TEST_CASE("checkpoint: config digest mismatch fails loudly") {
    auto m = DenoiserT<float>::init(tiny_config(), 1);
    save_checkpoint("t_ckpt2.moac", m);
    auto other_cfg = tiny_config();
    other_cfg.d_z = 32;
    auto m2 = DenoiserT<float>::init(other_cfg, 1);
    CHECK_THROWS_AS(load_checkpoint("t_ckpt2.moac", m2), IoError);
    std::remove("t_ckpt2.moac");
}

TEST_CASE("checkpoint: wrap-state mismatch fails") {
    auto m = DenoiserT<float>::init(tiny_config(), 1);
    m.wrap_moa(3);
    save_checkpoint("t_ckpt3.moac", m);
    auto m2 = DenoiserT<float>::init(tiny_config(), 1);
    CHECK_THROWS_AS(load_checkpoint("t_ckpt3.moac", m2), IoError);
    // load_model reconstructs the wrap state automatically.
    auto m3 = load_model<float>("t_ckpt3.moac", tiny_config());
    CHECK(m3.moa_wrapped);
    CHECK(params_digest(m3.params()) == params_digest(m.params()));
    std::remove("t_ckpt3.moac");
}

TEST_CASE("config: TOML subset and JSON agree") {
    const char* toml = R"(# run config
[model]
d_z = 32
blocks = 3
t_max = 200
latent_h = 8
latent_w = 8
image_res = 32
router_mlp = true

[train]
steps = 123
lr = 2e-4
object_loss = "as-printed"

[corpus]
train_scenes = 17
)";
    {
        std::ofstream out("t_cfg.toml");
        out << toml;
    }
    const char* json = R"({
  "model": {"d_z": 32, "blocks": 3, "t_max": 200, "latent_h": 8, "latent_w": 8,
             "image_res": 32, "router_mlp": true},
  "train": {"steps": 123, "lr": 2e-4, "object_loss": "as-printed"},
  "corpus": {"train_scenes": 17}
})";
    {
        std::ofstream out("t_cfg.json");
        out << json;
    }
    auto a = load_run_config("t_cfg.toml");
    auto b = load_run_config("t_cfg.json");
    CHECK(a.model.d_z == 32);
    CHECK(a.model.blocks == 3);
    CHECK(a.model.router_mlp);
    CHECK(a.train.steps == 123);
    CHECK(a.train.lr == doctest::Approx(2e-4));
    CHECK(a.train.object_variant == ObjectLossVariant::as_printed);
    CHECK(a.corpus.train_scenes == 17);
    CHECK(run_config_to_json(a) == run_config_to_json(b));
    // Corpus resolution follows the model geometry.
    CHECK(a.corpus.scene_resolution == 32);
    std::remove("t_cfg.toml");
    std::remove("t_cfg.json");
}

TEST_CASE("config: invalid input is a ConfigError") {
    {
        std::ofstream out("t_bad.toml");
        out << "[model]\nd_z 32\n";
    }
    CHECK_THROWS_AS((void)load_run_config("t_bad.toml"), ConfigError);
    {
        std::ofstream out("t_bad.json");
        out << "{\"model\": {\"d_z\": }";
    }
    CHECK_THROWS_AS((void)load_run_config("t_bad.json"), ConfigError);
    {
        // Valid TOML, invalid geometry.
        std::ofstream out("t_bad2.toml");
        out << "[model]\nlatent_h = 7\n";
    }
    CHECK_THROWS_AS((void)load_run_config("t_bad2.toml"), ConfigError);
    std::remove("t_bad.toml");
    std::remove("t_bad.json");
    std::remove("t_bad2.toml");
}
