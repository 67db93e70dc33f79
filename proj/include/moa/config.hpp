// SPDX-License-Identifier: Apache-2.0
//
// Run configuration: one document with [model], [train], [corpus], [eval]
// sections, accepted as JSON or as flat TOML (sections of scalar keys, which
// is all the schema needs).

#pragma once

#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "moa/synthdata.hpp"
#include "moa/train.hpp"

namespace moa {

struct EvalConfig {
    int ddim_steps = 25;
    double guidance = 2.0;  // inference default; no value is prescribed upstream
    int seeds = 20;
    int subject_pairs = 5;
};

struct RunConfig {
    DenoiserConfig model;
    TrainConfig train;
    CorpusConfig corpus;
    EvalConfig eval;
};

namespace detail_cfg {

// Minimal TOML reader covering the documented schema: [section] headers and
// scalar key = value lines (int, float, bool, "string"), # comments.
inline nlohmann::json toml_subset_to_json(const std::string& text) {
    nlohmann::json root = nlohmann::json::object();
    nlohmann::json* section = &root;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    auto trim = [](std::string s) {
        const auto a = s.find_first_not_of(" \t\r");
        if (a == std::string::npos) return std::string();
        const auto b = s.find_last_not_of(" \t\r");
        return s.substr(a, b - a + 1);
    };
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError("toml line " + std::to_string(lineno) + ": bad section");
            const std::string name = trim(line.substr(1, line.size() - 2));
            root[name] = nlohmann::json::object();
            section = &root[name];
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("toml line " + std::to_string(lineno) + ": expected key = value");
        const std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (value.empty()) throw ConfigError("toml line " + std::to_string(lineno) + ": empty value");
        if (value.front() == '"') {
            if (value.size() < 2 || value.back() != '"')
                throw ConfigError("toml line " + std::to_string(lineno) + ": unterminated string");
            (*section)[key] = value.substr(1, value.size() - 2);
        } else if (value == "true" || value == "false") {
            (*section)[key] = (value == "true");
        } else if (value.find_first_of(".eE") != std::string::npos &&
                   value.find_first_not_of("+-0123456789.eE") == std::string::npos) {
            (*section)[key] = std::stod(value);
        } else if (value.find_first_not_of("+-0123456789") == std::string::npos) {
            (*section)[key] = std::stoll(value);
        } else {
            throw ConfigError("toml line " + std::to_string(lineno) + ": cannot parse value '" + value + "'");
        }
    }
    return root;
}

template <class T>
void maybe(const nlohmann::json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail_cfg

inline RunConfig run_config_from_json(const nlohmann::json& j) {
    using detail_cfg::maybe;
    RunConfig cfg;
    if (j.contains("model")) {
        const auto& m = j.at("model");
        maybe(m, "latent_h", cfg.model.latent_h);
        maybe(m, "latent_w", cfg.model.latent_w);
        maybe(m, "d_z", cfg.model.d_z);
        maybe(m, "blocks", cfg.model.blocks);
        maybe(m, "d_t", cfg.model.d_t);
        maybe(m, "d_f", cfg.model.d_f);
        maybe(m, "t_max", cfg.model.t_max);
        maybe(m, "beta_start", cfg.model.beta_start);
        maybe(m, "beta_end", cfg.model.beta_end);
        maybe(m, "heads", cfg.model.heads);
        maybe(m, "ff_hidden", cfg.model.ff_hidden);
        maybe(m, "txt_len", cfg.model.txt_len);
        maybe(m, "patch", cfg.model.patch);
        maybe(m, "image_res", cfg.model.image_res);
        maybe(m, "subject_res", cfg.model.subject_res);
        maybe(m, "enc_grid", cfg.model.enc_grid);
        maybe(m, "router_mlp", cfg.model.router_mlp);
        maybe(m, "router_prior_bias", cfg.model.router_prior_bias);
        maybe(m, "init_std", cfg.model.init_std);
        maybe(m, "pers_init_std", cfg.model.pers_init_std);
    }
    if (j.contains("train")) {
        const auto& t = j.at("train");
        maybe(t, "steps", cfg.train.steps);
        maybe(t, "pretrain_steps", cfg.train.pretrain_steps);
        maybe(t, "batch_size", cfg.train.batch_size);
        maybe(t, "lr", cfg.train.lr);
        maybe(t, "pretrain_lr", cfg.train.pretrain_lr);
        maybe(t, "max_t", cfg.train.max_t);
        maybe(t, "cond_dropout", cfg.train.cond_dropout);
        maybe(t, "masked_prob", cfg.train.masked_prob);
        maybe(t, "lambda_router", cfg.train.lambda_router);
        maybe(t, "lambda_object", cfg.train.lambda_object);
        maybe(t, "exclude_first", cfg.train.exclusion.first);
        maybe(t, "exclude_last", cfg.train.exclusion.last);
        maybe(t, "seed", cfg.train.seed);
        maybe(t, "audit_frozen", cfg.train.audit_frozen);
        maybe(t, "log_every", cfg.train.log_every);
        if (t.contains("object_loss")) {
            const std::string v = t.at("object_loss").get<std::string>();
            if (v == "fastcomposer")
                cfg.train.object_variant = ObjectLossVariant::fastcomposer;
            else if (v == "as-printed")
                cfg.train.object_variant = ObjectLossVariant::as_printed;
            else
                throw ConfigError("object_loss must be 'fastcomposer' or 'as-printed'");
        }
    }
    if (j.contains("corpus")) {
        const auto& c = j.at("corpus");
        maybe(c, "train_scenes", cfg.corpus.train_scenes);
        maybe(c, "eval_scenes", cfg.corpus.eval_scenes);
        maybe(c, "heldout_subjects", cfg.corpus.heldout_subjects);
        maybe(c, "seed", cfg.corpus.seed);
        maybe(c, "two_subject_prob", cfg.corpus.two_subject_prob);
        maybe(c, "occluded_prob", cfg.corpus.occluded_prob);
    }
    if (j.contains("eval")) {
        const auto& e = j.at("eval");
        maybe(e, "ddim_steps", cfg.eval.ddim_steps);
        maybe(e, "guidance", cfg.eval.guidance);
        maybe(e, "seeds", cfg.eval.seeds);
        maybe(e, "subject_pairs", cfg.eval.subject_pairs);
    }
    cfg.corpus.scene_resolution = cfg.model.image_res;
    cfg.corpus.subject_resolution = cfg.model.subject_res;
    cfg.model.validate();
    return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot read config " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    const std::string text = buf.str();
    const auto first = text.find_first_not_of(" \t\r\n");
    nlohmann::json j;
    if (first != std::string::npos && text[first] == '{') {
        try {
            j = nlohmann::json::parse(text);
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(path + ": " + e.what());
        }
    } else {
        j = detail_cfg::toml_subset_to_json(text);
    }
    try {
        return run_config_from_json(j);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path + ": " + e.what());
    }
}

inline nlohmann::json run_config_to_json(const RunConfig& cfg) {
    nlohmann::json j;
    j["model"] = {{"latent_h", cfg.model.latent_h},
                  {"latent_w", cfg.model.latent_w},
                  {"d_z", cfg.model.d_z},
                  {"blocks", cfg.model.blocks},
                  {"d_t", cfg.model.d_t},
                  {"d_f", cfg.model.d_f},
                  {"t_max", cfg.model.t_max},
                  {"beta_start", cfg.model.beta_start},
                  {"beta_end", cfg.model.beta_end},
                  {"heads", cfg.model.heads},
                  {"ff_hidden", cfg.model.ff_hidden},
                  {"txt_len", cfg.model.txt_len},
                  {"patch", cfg.model.patch},
                  {"image_res", cfg.model.image_res},
                  {"subject_res", cfg.model.subject_res},
                  {"enc_grid", cfg.model.enc_grid},
                  {"router_mlp", cfg.model.router_mlp},
                  {"router_prior_bias", cfg.model.router_prior_bias},
                  {"init_std", cfg.model.init_std},
                  {"pers_init_std", cfg.model.pers_init_std}};
    j["train"] = {{"steps", cfg.train.steps},
                  {"pretrain_steps", cfg.train.pretrain_steps},
                  {"batch_size", cfg.train.batch_size},
                  {"lr", cfg.train.lr},
                  {"pretrain_lr", cfg.train.pretrain_lr},
                  {"max_t", cfg.train.max_t},
                  {"cond_dropout", cfg.train.cond_dropout},
                  {"masked_prob", cfg.train.masked_prob},
                  {"lambda_router", cfg.train.lambda_router},
                  {"lambda_object", cfg.train.lambda_object},
                  {"exclude_first", cfg.train.exclusion.first},
                  {"exclude_last", cfg.train.exclusion.last},
                  {"object_loss", cfg.train.object_variant == ObjectLossVariant::fastcomposer
                                      ? "fastcomposer"
                                      : "as-printed"},
                  {"seed", cfg.train.seed},
                  {"audit_frozen", cfg.train.audit_frozen},
                  {"log_every", cfg.train.log_every}};
    j["corpus"] = {{"train_scenes", cfg.corpus.train_scenes},
                   {"eval_scenes", cfg.corpus.eval_scenes},
                   {"heldout_subjects", cfg.corpus.heldout_subjects},
                   {"seed", cfg.corpus.seed},
                   {"two_subject_prob", cfg.corpus.two_subject_prob},
                   {"occluded_prob", cfg.corpus.occluded_prob}};
    j["eval"] = {{"ddim_steps", cfg.eval.ddim_steps},
                 {"guidance", cfg.eval.guidance},
                 {"seeds", cfg.eval.seeds},
                 {"subject_pairs", cfg.eval.subject_pairs}};
    return j;
}

}  // namespace moa
