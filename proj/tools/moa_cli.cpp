// SPDX-License-Identifier: Apache-2.0
//
// Command-line surface. Exit codes: 0 ok, 2 config/usage, 3 numeric failure,
// 4 I/O failure.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

#include "moa/checkpoint.hpp"
#include "moa/config.hpp"
#include "moa/evalkit.hpp"
#include "moa/image_io.hpp"
#include "moa/train.hpp"

namespace fs = std::filesystem;
using namespace moa;

namespace {

struct SubjectArg {
    int position = 0;
    std::string path;
};

SubjectArg parse_subject_arg(const std::string& arg) {
    const auto colon = arg.find(':');
    if (colon == std::string::npos || colon == 0)
        throw ConfigError("--subject expects <token_index>:<image_path>, got '" + arg + "'");
    SubjectArg s;
    try {
        s.position = std::stoi(arg.substr(0, colon));
    } catch (...) {
        throw ConfigError("--subject token index is not a number in '" + arg + "'");
    }
    s.path = arg.substr(colon + 1);
    if (s.path.empty()) throw ConfigError("--subject path missing in '" + arg + "'");
    return s;
}

// Model config travels as a snapshot next to the checkpoint.
RunConfig config_for_checkpoint(const std::string& ckpt_path, const std::string& config_override) {
    if (!config_override.empty()) return load_run_config(config_override);
    const fs::path sibling = fs::path(ckpt_path).parent_path() / "config.json";
    if (fs::exists(sibling)) return load_run_config(sibling.string());
    throw ConfigError("no config snapshot next to " + ckpt_path + "; pass --config");
}

Denoiser open_model(const std::string& ckpt, const std::string& config_override, RunConfig& cfg_out) {
    cfg_out = config_for_checkpoint(ckpt, config_override);
    return load_model<float>(ckpt, cfg_out.model);
}

ImageU8 load_subject_image(const std::string& path) {
    if (!fs::exists(path)) throw IoError("subject image not found: " + path);
    return read_png_rgb8(path);
}

MultimodalPrompt build_cli_prompt(const Denoiser& model, const std::string& prompt_text,
                                  const std::vector<std::string>& subject_args) {
    auto prompt = MultimodalPrompt::text_only(model.vocab, split_caption(prompt_text),
                                              model.cfg.txt_len);
    for (const auto& raw : subject_args) {
        const SubjectArg s = parse_subject_arg(raw);
        if (!model.image_enc) throw ConfigError("checkpoint has no personalization branch");
        prompt.bind(model.vocab, s.position, model.image_enc->encode(load_subject_image(s.path)));
    }
    return prompt;
}

void export_router_stack(const std::string& dir, const SampleResultT<float>& res,
                         const DenoiserConfig& cfg) {
    fs::create_directories(dir);
    for (size_t step = 0; step < res.router_maps.size(); ++step) {
        const int t = res.timesteps[step];
        for (size_t l = 0; l < res.router_maps[step].size(); ++l)
            export_router_map(dir, t, static_cast<int>(l), res.router_maps[step][l], cfg.latent_h,
                              cfg.latent_w);
    }
}

// ---------------------------------------------------------------------------

int cmd_train(const std::string& config_path, const std::string& out_dir, int64_t seed_override) {
    RunConfig cfg = config_path.empty() ? RunConfig{} : load_run_config(config_path);
    if (seed_override >= 0) cfg.train.seed = static_cast<uint64_t>(seed_override);
    fs::create_directories(out_dir);

    Denoiser model = Denoiser::init(cfg.model, cfg.train.seed);
    auto data = build_dataset<float>(cfg.model, model.vocab, cfg.corpus, false);
    Trainer<float> trainer(model, data, cfg.train);

    std::cout << "pretraining prior: " << cfg.train.pretrain_steps << " steps\n";
    auto pre_rows = trainer.pretrain();
    write_metrics_csv(out_dir + "/pretrain_metrics.csv", pre_rows);
    save_checkpoint(out_dir + "/prior.moac", model);

    model.wrap_moa(hash_combine(cfg.train.seed, 0x71a9ULL));
    const std::string init_frozen_digest = params_digest(model.frozen_params());
    const std::string init_full_digest = params_digest(model.params());

    std::cout << "finetuning mixture: " << cfg.train.steps << " steps\n";
    auto rows = trainer.finetune();
    write_metrics_csv(out_dir + "/metrics.csv", rows);
    save_checkpoint(out_dir + "/model.moac", model);

    {
        std::ofstream out(out_dir + "/config.json");
        out << run_config_to_json(cfg).dump(2) << "\n";
    }
    {
        nlohmann::json d = {{"frozen_at_wrap", init_frozen_digest},
                            {"full_at_wrap", init_full_digest},
                            {"frozen_after_train", params_digest(model.frozen_params())},
                            {"full_after_train", params_digest(model.params())}};
        std::ofstream out(out_dir + "/digests.json");
        out << d.dump(2) << "\n";
    }
    std::cout << "wrote " << out_dir << "/model.moac\n";
    return 0;
}

int cmd_sample(const std::string& ckpt, const std::string& config_override,
               const std::string& prompt_text, const std::vector<std::string>& subjects,
               uint64_t seed, int steps, double guidance, const std::string& out_png,
               bool router_maps, const std::string& latent_out) {
    RunConfig cfg;
    Denoiser model = open_model(ckpt, config_override, cfg);
    auto prompt = build_cli_prompt(model, prompt_text, subjects);
    auto res = model.ddim_sample(seed, prompt, steps, guidance, router_maps);
    ImageU8 img = unpatchify_image(res.latent, cfg.model.latent_h, cfg.model.latent_w,
                                   cfg.model.patch);
    write_png_rgb8(out_png, img);
    if (router_maps && model.moa_wrapped) {
        const std::string dir = fs::path(out_png).replace_extension().string() + "_router";
        export_router_stack(dir, res, cfg.model);
        std::cout << "router maps: " << dir << "\n";
    }
    if (!latent_out.empty())
        write_latent(latent_out, res.latent, cfg.model.latent_h, cfg.model.latent_w);
    std::cout << "wrote " << out_png << "\n";
    return 0;
}

int cmd_swap(const std::string& ckpt, const std::string& config_override,
             const std::string& image_path, const std::string& invert_prompt,
             const std::vector<std::string>& subjects, int steps, double guidance,
             const std::string& out_png, const std::string& noise_out) {
    RunConfig cfg;
    Denoiser model = open_model(ckpt, config_override, cfg);
    ImageU8 scene = read_png_rgb8(image_path);
    if (scene.w != cfg.model.image_res || scene.h != cfg.model.image_res)
        throw ConfigError("swap: scene must be " + std::to_string(cfg.model.image_res) + "x" +
                          std::to_string(cfg.model.image_res));
    auto x0 = patchify_image<float>(scene, cfg.model.patch);

    auto text_prompt = MultimodalPrompt::text_only(model.vocab, split_caption(invert_prompt),
                                                   model.cfg.txt_len);
    auto inverted = model.ddim_invert(x0, text_prompt, steps);
    if (!noise_out.empty())
        write_latent(noise_out, inverted.latent, cfg.model.latent_h, cfg.model.latent_w);

    auto regen_prompt = build_cli_prompt(model, invert_prompt, subjects);
    auto res = model.ddim_sample_from(inverted.latent, regen_prompt, steps, guidance);
    ImageU8 img = unpatchify_image(res.latent, cfg.model.latent_h, cfg.model.latent_w,
                                   cfg.model.patch);
    write_png_rgb8(out_png, img);
    std::cout << "wrote " << out_png << "\n";
    return 0;
}

int cmd_morph(const std::string& ckpt, const std::string& config_override,
              const std::string& prompt_text, int position, const std::string& subject_a,
              const std::string& subject_b, const std::string& alphas_csv,
              const std::string& text_interp, uint64_t seed, int steps, double guidance,
              const std::string& out_dir) {
    RunConfig cfg;
    Denoiser model = open_model(ckpt, config_override, cfg);
    if (!model.image_enc) throw ConfigError("checkpoint has no personalization branch");
    fs::create_directories(out_dir);

    std::vector<double> alphas;
    for (const auto& tok : split_caption([&] {
             std::string s = alphas_csv;
             for (auto& c : s)
                 if (c == ',') c = ' ';
             return s;
         }()))
        alphas.push_back(std::stod(tok));
    if (alphas.empty()) throw ConfigError("--alphas is empty");

    auto caption = split_caption(prompt_text);
    auto base = MultimodalPrompt::text_only(model.vocab, caption, model.cfg.txt_len);
    if (position < 0) {
        for (size_t i = 0; i < caption.size(); ++i)
            if (model.vocab.is_subject(base.ids[i])) {
                position = static_cast<int>(i);
                break;
            }
        if (position < 0) throw ConfigError("prompt has no subject token to morph");
    }

    const Tensor fa = model.image_enc->encode(load_subject_image(subject_a));
    const Tensor fb = model.image_enc->encode(load_subject_image(subject_b));

    Tensor emb_a, emb_b;
    bool use_text_interp = false;
    if (!text_interp.empty()) {
        const auto colon = text_interp.find(':');
        if (colon == std::string::npos)
            throw ConfigError("--text-interp expects <token_a>:<token_b>");
        emb_a = model.text.token_embedding(model.vocab.id(text_interp.substr(0, colon)));
        emb_b = model.text.token_embedding(model.vocab.id(text_interp.substr(colon + 1)));
        use_text_interp = true;
    }

    for (size_t i = 0; i < alphas.size(); ++i) {
        const double alpha = alphas[i];
        auto prompt = base;
        prompt.bind(model.vocab, position, interpolate_features(fa, fb, alpha));
        if (use_text_interp)
            prompt.embedding_overrides[position] = interpolate_text(emb_a, emb_b, alpha);
        auto res = model.ddim_sample(seed, prompt, steps, guidance);
        ImageU8 img = unpatchify_image(res.latent, cfg.model.latent_h, cfg.model.latent_w,
                                       cfg.model.patch);
        char name[64];
        std::snprintf(name, sizeof(name), "morph_%02zu_a%.3f.png", i, alpha);
        write_png_rgb8(out_dir + "/" + name, img);
        std::cout << "wrote " << out_dir << "/" << name << "\n";
    }
    return 0;
}

int cmd_eval_disentangle(const std::string& ckpt, const std::string& config_override, int seeds,
                         int pairs, int steps, double guidance, bool untrained,
                         const std::string& out_csv) {
    RunConfig cfg;
    Denoiser model = [&] {
        if (!untrained) return open_model(ckpt, config_override, cfg);
        cfg = config_for_checkpoint(ckpt, config_override);
        Denoiser m = Denoiser::init(cfg.model, cfg.train.seed);
        m.wrap_moa(hash_combine(cfg.train.seed, 0x71a9ULL));
        return m;
    }();
    if (seeds <= 0) seeds = cfg.eval.seeds;
    if (pairs <= 0) pairs = cfg.eval.subject_pairs;
    if (steps <= 0) steps = cfg.eval.ddim_steps;
    if (guidance <= 0) guidance = cfg.eval.guidance;
    auto rep = evalkit_disentanglement(model, seeds, pairs, cfg.train.exclusion, steps, guidance,
                                       cfg.corpus.seed);
    write_disentangle_csv(out_csv, rep);
    std::cout << "mean fg/bg change ratio: " << rep.mean_ratio << " over " << rep.valid_rows
              << " rows -> " << out_csv << "\n";
    return 0;
}

int cmd_eval_identity(const std::string& ckpt, const std::string& config_override, int n_subjects,
                      int steps, double guidance, bool untrained, const std::string& out_csv) {
    RunConfig cfg;
    Denoiser model = [&] {
        if (!untrained) return open_model(ckpt, config_override, cfg);
        cfg = config_for_checkpoint(ckpt, config_override);
        Denoiser m = Denoiser::init(cfg.model, cfg.train.seed);
        m.wrap_moa(hash_combine(cfg.train.seed, 0x71a9ULL));
        return m;
    }();
    if (n_subjects <= 0) n_subjects = cfg.corpus.heldout_subjects;
    if (steps <= 0) steps = cfg.eval.ddim_steps;
    if (guidance <= 0) guidance = cfg.eval.guidance;
    std::vector<SubjectSpec> subjects;
    for (int i = 0; i < n_subjects; ++i) subjects.push_back(heldout_subject(cfg.corpus, i));
    auto rep = evalkit_identity(model, subjects, cfg.train.exclusion, steps, guidance,
                                hash_combine(cfg.corpus.seed, 0x1dULL));
    write_identity_csv(out_csv, rep);
    std::cout << "mean identity agreement: " << rep.mean_agreement << " -> " << out_csv << "\n";
    return 0;
}

int cmd_make_subject(const std::string& shape, int hue, int size_pm, int tex, int resolution,
                     const std::string& out_png) {
    ShapeClass cls;
    if (shape == "circle")
        cls = ShapeClass::circle;
    else if (shape == "square")
        cls = ShapeClass::square;
    else if (shape == "triangle")
        cls = ShapeClass::triangle;
    else
        throw ConfigError("--shape must be circle, square, or triangle");
    ImageU8 img;
    try {
        img = render_subject(SubjectSpec::make(cls, hue, size_pm, tex), resolution);
    } catch (const DataError& e) {
        throw ConfigError(e.what());
    }
    write_png_rgb8(out_png, img);
    std::cout << "wrote " << out_png << "\n";
    return 0;
}

int cmd_make_scene(const std::string& config_path, int index, bool eval_split,
                   const std::string& out_png, const std::string& manifest_out) {
    RunConfig cfg = config_path.empty() ? RunConfig{} : load_run_config(config_path);
    auto d = corpus_descriptor(cfg.corpus, eval_split, index);
    auto scene = d.render(cfg.corpus.scene_resolution);
    write_png_rgb8(out_png, scene.image);
    std::string caption;
    for (const auto& w : scene.caption) caption += (caption.empty() ? "" : " ") + w;
    std::cout << "wrote " << out_png << "\ncaption: " << caption << "\n";
    for (size_t k = 0; k < scene.subjects.size(); ++k)
        std::cout << "subject " << k << ": token_index=" << scene.subject_positions[k]
                  << " shape=" << shape_word(scene.subjects[k].shape)
                  << " hue=" << scene.subjects[k].hue_deg << "\n";
    if (!manifest_out.empty()) write_manifest(manifest_out, {d});
    return 0;
}

int cmd_bench(int tokens, int width, int iters, const std::string& out_csv) {
    auto rep = bench_attention<float>(tokens, width, iters, 42);
    if (!out_csv.empty()) write_bench_csv(out_csv, rep);
    std::cout << "plain attention: " << rep.plain_ns << " ns/op\n"
              << "mixture layer:   " << rep.moa_ns << " ns/op (" << rep.moa_over_plain
              << "x plain)\n"
              << "router alone:    " << rep.router_ns << " ns/op ("
              << rep.router_fraction * 100.0 << "% of mixture)\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"moa: desk-scale mixture-of-attention personalization sandbox"};
    app.require_subcommand(1);

    // train
    std::string t_config, t_out = "run";
    int64_t t_seed = -1;
    auto* train = app.add_subcommand("train", "pretrain the prior, then finetune the mixture");
    train->add_option("--config", t_config, "config file (TOML or JSON)");
    train->add_option("--out", t_out, "output directory");
    train->add_option("--seed", t_seed, "override training seed");

    // sample
    std::string s_ckpt, s_config, s_prompt, s_out = "sample.png", s_latent;
    std::vector<std::string> s_subjects;
    uint64_t s_seed = 0;
    int s_steps = 25;
    double s_guidance = 2.0;
    bool s_no_maps = false;
    auto* sample = app.add_subcommand("sample", "generate an image from a (multimodal) prompt");
    sample->add_option("--ckpt", s_ckpt, "checkpoint path")->required();
    sample->add_option("--config", s_config, "config override");
    sample->add_option("--prompt", s_prompt, "caption")->required();
    sample->add_option("--subject", s_subjects, "binding <token_index>:<image.png> (repeatable)");
    sample->add_option("--seed", s_seed, "sampling seed");
    sample->add_option("--steps", s_steps, "DDIM steps");
    sample->add_option("--guidance", s_guidance, "classifier-free guidance scale");
    sample->add_option("--out", s_out, "output PNG");
    sample->add_option("--latent-out", s_latent, "also dump the final latent");
    sample->add_flag("--no-router-maps", s_no_maps, "skip the router map export");

    // swap
    std::string w_ckpt, w_config, w_image, w_prompt, w_out = "swap.png", w_noise;
    std::vector<std::string> w_subjects;
    int w_steps = 200;
    double w_guidance = 1.0;
    auto* swap = app.add_subcommand("swap", "DDIM-invert a real scene and regenerate with subjects");
    swap->add_option("--ckpt", w_ckpt, "checkpoint path")->required();
    swap->add_option("--config", w_config, "config override");
    swap->add_option("--image", w_image, "scene PNG to invert")->required();
    swap->add_option("--invert-prompt", w_prompt, "text prompt used for inversion")->required();
    swap->add_option("--subject", w_subjects, "binding <token_index>:<image.png> (repeatable)");
    swap->add_option("--steps", w_steps, "DDIM steps in both directions");
    swap->add_option("--guidance", w_guidance, "guidance for the regeneration pass");
    swap->add_option("--out", w_out, "output PNG");
    swap->add_option("--noise-out", w_noise, "dump the inverted latent");

    // morph
    std::string m_ckpt, m_config, m_prompt, m_a, m_b, m_alphas = "0,0.25,0.5,0.75,1", m_text, m_out = "morph";
    int m_pos = -1, m_steps = 25;
    uint64_t m_seed = 0;
    double m_guidance = 2.0;
    auto* morph = app.add_subcommand("morph", "interpolate image features between two subjects");
    morph->add_option("--ckpt", m_ckpt, "checkpoint path")->required();
    morph->add_option("--config", m_config, "config override");
    morph->add_option("--prompt", m_prompt, "caption")->required();
    morph->add_option("--pos", m_pos, "subject token index (default: first subject token)");
    morph->add_option("--subject-a", m_a, "first subject image")->required();
    morph->add_option("--subject-b", m_b, "second subject image")->required();
    morph->add_option("--alphas", m_alphas, "comma-separated interpolation weights");
    morph->add_option("--text-interp", m_text, "also interpolate token embeddings <a>:<b>");
    morph->add_option("--seed", m_seed, "sampling seed (same for every alpha)");
    morph->add_option("--steps", m_steps, "DDIM steps");
    morph->add_option("--guidance", m_guidance, "guidance scale");
    morph->add_option("--out", m_out, "output directory");

    // eval-disentangle
    std::string d_ckpt, d_config, d_out = "disentangle.csv";
    int d_seeds = 0, d_pairs = 0, d_steps = 0;
    double d_guidance = 0;
    bool d_untrained = false;
    auto* dis = app.add_subcommand("eval-disentangle", "foreground/background change ratio under subject swap");
    dis->add_option("--ckpt", d_ckpt, "checkpoint path")->required();
    dis->add_option("--config", d_config, "config override");
    dis->add_option("--seeds", d_seeds, "number of seeds");
    dis->add_option("--pairs", d_pairs, "number of subject pairs");
    dis->add_option("--steps", d_steps, "DDIM steps");
    dis->add_option("--guidance", d_guidance, "guidance scale");
    dis->add_flag("--untrained", d_untrained, "evaluate a freshly initialized model instead");
    dis->add_option("--out", d_out, "output CSV");

    // eval-identity
    std::string i_ckpt, i_config, i_out = "identity.csv";
    int i_subjects = 0, i_steps = 0;
    double i_guidance = 0;
    bool i_untrained = false;
    auto* ident = app.add_subcommand("eval-identity", "identity agreement on held-out subjects");
    ident->add_option("--ckpt", i_ckpt, "checkpoint path")->required();
    ident->add_option("--config", i_config, "config override");
    ident->add_option("--subjects", i_subjects, "number of held-out subjects");
    ident->add_option("--steps", i_steps, "DDIM steps");
    ident->add_option("--guidance", i_guidance, "guidance scale");
    ident->add_flag("--untrained", i_untrained, "evaluate a freshly initialized model instead");
    ident->add_option("--out", i_out, "output CSV");

    // bench
    int b_tokens = 256, b_width = 64, b_iters = 200;
    std::string b_out;
    auto* bench = app.add_subcommand("bench", "plain attention vs mixture layer forward cost");
    bench->add_option("--tokens", b_tokens, "query tokens");
    bench->add_option("--width", b_width, "hidden width");
    bench->add_option("--iters", b_iters, "iterations");
    bench->add_option("--out", b_out, "output CSV");

    // make-subject
    std::string ms_shape = "circle", ms_out = "subject.png";
    int ms_hue = 0, ms_size = 750, ms_tex = 0, ms_res = 32;
    auto* msub = app.add_subcommand("make-subject", "render a reference subject image");
    msub->add_option("--shape", ms_shape, "circle | square | triangle");
    msub->add_option("--hue", ms_hue, "hue in degrees [0,360)");
    msub->add_option("--size", ms_size, "size in per-mille of the max radius");
    msub->add_option("--tex", ms_tex, "stripe frequency 0..3");
    msub->add_option("--res", ms_res, "output resolution");
    msub->add_option("--out", ms_out, "output PNG");

    // make-scene
    std::string mc_config, mc_out = "scene.png", mc_manifest;
    int mc_index = 0;
    bool mc_eval = false;
    auto* mscene = app.add_subcommand("make-scene", "render one corpus scene (prints its caption)");
    mscene->add_option("--config", mc_config, "config file");
    mscene->add_option("--index", mc_index, "corpus index");
    mscene->add_flag("--eval", mc_eval, "use the held-out split");
    mscene->add_option("--out", mc_out, "output PNG");
    mscene->add_option("--manifest-out", mc_manifest, "also write a one-line manifest");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*train) return cmd_train(t_config, t_out, t_seed);
        if (*sample)
            return cmd_sample(s_ckpt, s_config, s_prompt, s_subjects, s_seed, s_steps, s_guidance,
                              s_out, !s_no_maps, s_latent);
        if (*swap)
            return cmd_swap(w_ckpt, w_config, w_image, w_prompt, w_subjects, w_steps, w_guidance,
                            w_out, w_noise);
        if (*morph)
            return cmd_morph(m_ckpt, m_config, m_prompt, m_pos, m_a, m_b, m_alphas, m_text, m_seed,
                             m_steps, m_guidance, m_out);
        if (*dis)
            return cmd_eval_disentangle(d_ckpt, d_config, d_seeds, d_pairs, d_steps, d_guidance,
                                        d_untrained, d_out);
        if (*ident)
            return cmd_eval_identity(i_ckpt, i_config, i_subjects, i_steps, i_guidance, i_untrained,
                                     i_out);
        if (*bench) return cmd_bench(b_tokens, b_width, b_iters, b_out);
        if (*msub) return cmd_make_subject(ms_shape, ms_hue, ms_size, ms_tex, ms_res, ms_out);
        if (*mscene) return cmd_make_scene(mc_config, mc_index, mc_eval, mc_out, mc_manifest);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const ShapeError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const NumericsError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    } catch (const DataError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    }
    return 2;
}
