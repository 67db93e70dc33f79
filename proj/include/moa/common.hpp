// SPDX-License-Identifier: Apache-2.0
//
// Shared error types and global numeric-mode switches.

#pragma once

#include <cstdint>
#include <cstdlib>
#include <stdexcept>
#include <string>

namespace moa {

struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error("shape error: " + msg) {}
};

struct NumericsError : std::runtime_error {
    explicit NumericsError(const std::string& msg) : std::runtime_error("numerics error: " + msg) {}
};

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error("config error: " + msg) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error("io error: " + msg) {}
};

// Every primitive op scans its output for NaN/Inf unless disabled.
inline bool& finite_checks() {
    static bool enabled = true;
    return enabled;
}

// Thread-local autograd switch. Ops record backward closures only while enabled.
inline bool& grad_enabled() {
    thread_local bool enabled = true;
    return enabled;
}

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_enabled()) { grad_enabled() = false; }
    ~NoGradGuard() { grad_enabled() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// Worker cap for fan-out sections (evalkit). 0 means "decide from hardware".
inline int env_thread_cap() {
    const char* v = std::getenv("MOA_THREADS");
    if (!v) return 0;
    int n = std::atoi(v);
    return n > 0 ? n : 1;
}

}  // namespace moa
