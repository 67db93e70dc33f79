// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint container ("MOAC"): config digest + name-indexed f32 parameter
// table with trainable flags. Round trips are bit-exact for float models;
// loading against a model built from a different config fails loudly.

#pragma once

#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "moa/denoiser.hpp"

namespace moa {

namespace detail_ckpt {

inline void put_u16(std::ostream& out, uint16_t x) {
    uint8_t b[2] = {static_cast<uint8_t>(x), static_cast<uint8_t>(x >> 8)};
    out.write(reinterpret_cast<const char*>(b), 2);
}

inline void put_u32(std::ostream& out, uint32_t x) {
    uint8_t b[4] = {static_cast<uint8_t>(x), static_cast<uint8_t>(x >> 8),
                    static_cast<uint8_t>(x >> 16), static_cast<uint8_t>(x >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

inline uint16_t get_u16(std::istream& in) {
    uint8_t b[2];
    in.read(reinterpret_cast<char*>(b), 2);
    return static_cast<uint16_t>(uint16_t(b[0]) | (uint16_t(b[1]) << 8));
}

inline uint32_t get_u32(std::istream& in) {
    uint8_t b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    return uint32_t(b[0]) | (uint32_t(b[1]) << 8) | (uint32_t(b[2]) << 16) | (uint32_t(b[3]) << 24);
}

}  // namespace detail_ckpt

template <class S>
void save_checkpoint(const std::string& path, DenoiserT<S>& model) {
    using namespace detail_ckpt;
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint " + path);
    out.write("MOAC", 4);
    put_u32(out, 1);  // format version
    const std::string digest = model.cfg.digest();
    out.write(digest.data(), 64);
    out.put(model.moa_wrapped ? 1 : 0);

    auto params = model.params();
    put_u32(out, static_cast<uint32_t>(params.size()));
    for (const auto* p : params) {
        if (p->name.size() > 0xffff) throw IoError("parameter name too long");
        put_u16(out, static_cast<uint16_t>(p->name.size()));
        out.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
        out.put(p->trainable ? 1 : 0);
        put_u32(out, static_cast<uint32_t>(p->value.shape.size()));
        for (int d : p->value.shape) put_u32(out, static_cast<uint32_t>(d));
        for (const S v : *p->value.data) {
            const float f = static_cast<float>(v);
            uint32_t bits;
            std::memcpy(&bits, &f, 4);
            put_u32(out, bits);
        }
    }
    if (!out) throw IoError("short write on checkpoint " + path);
}

struct CheckpointHeader {
    uint32_t version = 0;
    std::string config_digest;
    bool moa_wrapped = false;
};

inline CheckpointHeader read_checkpoint_header(std::istream& in, const std::string& path) {
    using namespace detail_ckpt;
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "MOAC", 4) != 0) throw IoError(path + ": not a checkpoint");
    CheckpointHeader h;
    h.version = get_u32(in);
    if (h.version != 1) throw IoError(path + ": unsupported checkpoint version");
    h.config_digest.resize(64);
    in.read(h.config_digest.data(), 64);
    h.moa_wrapped = in.get() != 0;
    return h;
}

inline CheckpointHeader peek_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read checkpoint " + path);
    return read_checkpoint_header(in, path);
}

template <class S>
void load_checkpoint(const std::string& path, DenoiserT<S>& model) {
    using namespace detail_ckpt;
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read checkpoint " + path);
    const CheckpointHeader h = read_checkpoint_header(in, path);
    if (h.config_digest != model.cfg.digest())
        throw IoError(path + ": config digest mismatch (checkpoint " + h.config_digest.substr(0, 12) +
                      "..., model " + model.cfg.digest().substr(0, 12) + "...)");
    if (h.moa_wrapped != model.moa_wrapped)
        throw IoError(path + ": wrap state mismatch");

    std::map<std::string, ParameterT<S>*> by_name;
    for (auto* p : model.params()) by_name[p->name] = p;

    const uint32_t count = get_u32(in);
    if (count != by_name.size())
        throw IoError(path + ": parameter count mismatch");
    for (uint32_t i = 0; i < count; ++i) {
        const uint16_t name_len = get_u16(in);
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        const bool trainable = in.get() != 0;
        const uint32_t ndims = get_u32(in);
        Shape shape(ndims);
        for (uint32_t d = 0; d < ndims; ++d) shape[d] = static_cast<int>(get_u32(in));
        auto it = by_name.find(name);
        if (it == by_name.end()) throw IoError(path + ": unknown parameter '" + name + "'");
        ParameterT<S>* p = it->second;
        if (p->value.shape != shape)
            throw IoError(path + ": shape mismatch for '" + name + "'");
        if (p->trainable != trainable)
            throw IoError(path + ": trainable flag mismatch for '" + name + "'");
        for (auto& v : *p->value.data) {
            const uint32_t bits = get_u32(in);
            float f;
            std::memcpy(&f, &bits, 4);
            v = static_cast<S>(f);
        }
    }
    if (!in) throw IoError(path + ": truncated checkpoint");
}

// Construct a model matching the checkpoint's wrap state, then load into it.
template <class S>
DenoiserT<S> load_model(const std::string& path, const DenoiserConfig& cfg) {
    const CheckpointHeader h = peek_checkpoint(path);
    DenoiserT<S> model = DenoiserT<S>::init(cfg, 0);
    if (h.moa_wrapped) model.wrap_moa(0);
    load_checkpoint(path, model);
    return model;
}

}  // namespace moa
