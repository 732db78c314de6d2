#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>

namespace fogseg {

class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

namespace detail {
inline void append_parts(std::ostringstream&) {}

template <typename T, typename... Rest>
void append_parts(std::ostringstream& os, const T& v, const Rest&... rest) {
    os << v;
    append_parts(os, rest...);
}
}  // namespace detail

template <typename... Parts>
std::string concat(const Parts&... parts) {
    std::ostringstream os;
    detail::append_parts(os, parts...);
    return os.str();
}

template <typename... Parts>
[[noreturn]] void fail(const Parts&... parts) {
    throw Error(concat(parts...));
}

template <typename... Parts>
void check(bool cond, const Parts&... parts) {
    if (!cond) fail(parts...);
}

// Runtime-toggleable NaN/Inf scan after forward ops. Defaults to on in debug
// builds only; tests may force it on.
inline bool& finite_checks() {
#ifdef NDEBUG
    static bool enabled = false;
#else
    static bool enabled = true;
#endif
    return enabled;
}

// Portable deterministic uniforms on top of mt19937 (the distribution
// wording in the standard leaves std::uniform_real_distribution
// implementation-defined).
inline double uniform_unit(std::mt19937& rng) {
    return rng() * (1.0 / 4294967296.0);  // [0, 1)
}

inline double uniform_range(std::mt19937& rng, double lo, double hi) {
    return lo + (hi - lo) * uniform_unit(rng);
}

}  // namespace fogseg
