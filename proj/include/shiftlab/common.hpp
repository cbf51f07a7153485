#pragma once

#include <cstdio>
#include <stdexcept>
#include <string>

namespace shiftlab {

// Invalid or inconsistent configuration (CLI maps this to exit code 2).
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Failure inside a pipeline stage (CLI maps this to exit code 3).
class StageError : public std::runtime_error {
public:
    StageError(std::string stage, const std::string& msg)
        : std::runtime_error("[" + stage + "] " + msg), stage_(std::move(stage)) {}
    const std::string& stage() const { return stage_; }

private:
    std::string stage_;
};

// Shortest decimal form that round-trips the exact double. Used for every
// serialized float so that re-runs produce byte-identical artifacts.
inline std::string format_double(double value) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", value);
    double back = 0.0;
    std::sscanf(buf, "%lf", &back);
    for (int prec = 1; prec < 17; ++prec) {
        char shorter[40];
        std::snprintf(shorter, sizeof(shorter), "%.*g", prec, value);
        std::sscanf(shorter, "%lf", &back);
        if (back == value) return std::string(shorter);
    }
    return std::string(buf);
}

}  // namespace shiftlab
