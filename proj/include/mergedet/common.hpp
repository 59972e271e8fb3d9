#pragma once

#include <cmath>
#include <stdexcept>
#include <string>

namespace mergedet {

// Floor applied inside every log so saturated probabilities cannot produce inf.
inline constexpr double kProbFloor = 1e-7;

inline double safe_log(double p) { return std::log(p < kProbFloor ? kProbFloor : p); }

inline void check(bool cond, const std::string& msg) {
    if (!cond) throw std::runtime_error(msg);
}

inline void check_arg(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

inline void check_domain(bool cond, const std::string& msg) {
    if (!cond) throw std::domain_error(msg);
}

}  // namespace mergedet
