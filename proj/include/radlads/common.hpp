#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>

namespace radlads {

// Config/shape/contract violations. The CLI maps these to exit code 2.
struct ValidationError : std::runtime_error {
    explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

// NaN/Inf aborts during training. The CLI maps these to exit code 3.
struct NumericalError : std::runtime_error {
    explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

namespace detail {
template <class... Args>
std::string concat(Args&&... args) {
    std::ostringstream os;
    (os << ... << args);
    return os.str();
}
}  // namespace detail

template <class... Args>
[[noreturn]] void fail(Args&&... args) {
    throw ValidationError(detail::concat(std::forward<Args>(args)...));
}

template <class... Args>
[[noreturn]] void fail_numeric(Args&&... args) {
    throw NumericalError(detail::concat(std::forward<Args>(args)...));
}

template <class... Args>
void check(bool cond, Args&&... args) {
    if (!cond) fail(std::forward<Args>(args)...);
}

}  // namespace radlads
