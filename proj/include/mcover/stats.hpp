#pragma once

#include <cmath>
#include <cstdio>
#include <limits>
#include <span>
#include <string>

#include <boost/math/distributions/students_t.hpp>

namespace mcover::stats {

/// Below this many samples the CI uses a Student-t quantile instead of the normal one.
inline constexpr int kNormalApproxFrom = 30;

struct Summary {
    int n = 0;
    double mean = std::numeric_limits<double>::quiet_NaN();
    double sd = std::numeric_limits<double>::quiet_NaN();  // population (divide by n)
    double se = std::numeric_limits<double>::quiet_NaN();  // sd / sqrt(n)
    double quantile = std::numeric_limits<double>::quiet_NaN();
    double ci95 = std::numeric_limits<double>::quiet_NaN();  // half-width, needs n >= 2

    double ci_low() const { return mean - ci95; }
    double ci_high() const { return mean + ci95; }
};

inline double ci_quantile(int n) {
    if (n < 2) return std::numeric_limits<double>::quiet_NaN();
    if (n >= kNormalApproxFrom) return 1.959963984540054;
    return boost::math::quantile(boost::math::complement(boost::math::students_t_distribution<double>(n - 1), 0.025));
}

/// Non-finite values are skipped, so diverged trials never poison a group.
inline Summary summarize(std::span<const double> values) {
    Summary s;
    double sum = 0.0;
    for (double v : values)
        if (std::isfinite(v)) {
            sum += v;
            ++s.n;
        }
    if (s.n == 0) return s;
    s.mean = sum / s.n;
    double sq = 0.0;
    for (double v : values)
        if (std::isfinite(v)) sq += (v - s.mean) * (v - s.mean);
    s.sd = std::sqrt(sq / s.n);
    s.se = s.sd / std::sqrt(double(s.n));
    if (s.n >= 2) {
        s.quantile = ci_quantile(s.n);
        s.ci95 = s.quantile * s.se;
    }
    return s;
}

/// "0.0420 ± 0.0319" layout.
inline std::string format_pm(double mean, double half_width, int digits = 4) {
    if (!std::isfinite(mean)) return "n/a";
    char buf[96];
    if (std::isfinite(half_width))
        std::snprintf(buf, sizeof buf, "%.*f ± %.*f", digits, mean, digits, half_width);
    else
        std::snprintf(buf, sizeof buf, "%.*f", digits, mean);
    return buf;
}

inline std::string format_pm(const Summary& s, int digits = 4) { return format_pm(s.mean, s.ci95, digits); }

}  // namespace mcover::stats
