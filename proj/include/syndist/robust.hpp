#pragma once

#include <cmath>
#include <span>
#include <vector>

#include <boost/math/interpolators/cardinal_cubic_b_spline.hpp>
#include <boost/math/tools/minima.hpp>

#include "grid.hpp"

namespace syndist {

/// Shape alpha and scale c of the general robust loss. In adaptive mode alpha
/// is optimized through alpha = 2 * sigmoid(raw) so it stays inside (0, 2).
struct RobustParams {
    double alpha = 1.0;
    double c = 0.01;
    bool adaptive = false;

    static double alpha_from_raw(double raw) { return 2.0 / (1.0 + std::exp(-raw)); }
    static double raw_from_alpha(double alpha) {
        if (!(alpha > 0.0 && alpha < 2.0)) {
            throw Error(ErrorKind::OutOfRange, "adaptive alpha must lie in (0, 2)");
        }
        return std::log(alpha / (2.0 - alpha));
    }
    /// d alpha / d raw at the given alpha.
    static double alpha_raw_derivative(double alpha) { return alpha * (1.0 - alpha / 2.0); }

    void validate() const {
        if (!(c > 0.0) || !std::isfinite(c)) throw Error(ErrorKind::InvalidArgument, "robust scale c must be positive");
        if (!std::isfinite(alpha)) throw Error(ErrorKind::InvalidArgument, "robust alpha must be finite");
        if (adaptive && !(alpha > 0.0 && alpha < 2.0)) {
            throw Error(ErrorKind::OutOfRange, "adaptive alpha must lie in (0, 2)");
        }
    }
};

namespace detail {
// Below this distance from alpha in {0, 2} the alpha-derivative is evaluated
// symmetrically around the removable singularity.
inline constexpr double kAlphaSingularBand = 1e-4;
}

/// General robust loss rho(xi, alpha, c). alpha = 2 and alpha = 0 use their
/// limits (L2 and Cauchy respectively).
inline double robust_rho(double xi, double alpha, double c) {
    const double z = (xi / c) * (xi / c);
    if (alpha == 2.0) return 0.5 * z;
    if (alpha == 0.0) return std::log1p(0.5 * z);
    const double b = std::abs(alpha - 2.0);
    return (b / alpha) * std::expm1(0.5 * alpha * std::log1p(z / b));
}

inline double robust_rho(double xi, const RobustParams& p) { return robust_rho(xi, p.alpha, p.c); }

inline double robust_rho_dxi(double xi, double alpha, double c) {
    if (alpha == 2.0) return xi / (c * c);
    const double z = (xi / c) * (xi / c);
    const double b = std::abs(alpha - 2.0);
    return xi / (c * c) * std::pow(z / b + 1.0, 0.5 * alpha - 1.0);
}

inline double robust_rho_dc(double xi, double alpha, double c) {
    return -xi * robust_rho_dxi(xi, alpha, c) / c;
}

namespace detail {
inline double robust_rho_dalpha_regular(double xi, double alpha, double c) {
    const double z = (xi / c) * (xi / c);
    if (z == 0.0) return 0.0;
    const double b = std::abs(alpha - 2.0);
    const double s = alpha > 2.0 ? 1.0 : -1.0;
    const double l = std::log1p(z / b);
    const double gm1 = std::expm1(0.5 * alpha * l);
    const double g = gm1 + 1.0;
    const double dlog_g = 0.5 * l - 0.5 * alpha * s * z / (b * (b + z));
    return (s / alpha - b / (alpha * alpha)) * gm1 + (b / alpha) * g * dlog_g;
}
}  // namespace detail

inline double robust_rho_dalpha(double xi, double alpha, double c) {
    constexpr double band = detail::kAlphaSingularBand;
    for (double singular : {0.0, 2.0}) {
        if (std::abs(alpha - singular) < band) {
            // interpolate between the band edges: the alpha = 0 singularity
            // is removable, while at alpha = 2 the true derivative diverges
            // like log|alpha - 2| and the band edges give a finite stand-in
            const double off = alpha - singular;
            const double lo = detail::robust_rho_dalpha_regular(xi, singular - band, c);
            const double hi = detail::robust_rho_dalpha_regular(xi, singular + band, c);
            return lo + (hi - lo) * (off + band) / (2.0 * band);
        }
    }
    return detail::robust_rho_dalpha_regular(xi, alpha, c);
}

/// log Z(alpha), Z(alpha) = integral over R of exp(-rho(x, alpha, 1)),
/// tabulated on a dense alpha grid by quadrature and interpolated with a
/// cubic B-spline. Built once on first use.
class LogPartition {
  public:
    static constexpr int kGridSize = 1025;

    static const LogPartition& instance() {
        static const LogPartition table;
        return table;
    }

    double operator()(double alpha) const {
        check(alpha);
        return spline_(alpha);
    }

    double derivative(double alpha) const {
        check(alpha);
        return spline_.prime(alpha);
    }

    /// Direct quadrature in log-space, x = e^s, trapezoidal rule on
    /// s in [-40, 80]; the integrand decays at least like e^{-|s|}.
    static double quadrature(double alpha) {
        constexpr double lo = -40.0, hi = 80.0, h = 0.02;
        const int n = static_cast<int>((hi - lo) / h);
        double sum = 0.0;
        for (int i = 0; i <= n; ++i) {
            const double s = lo + h * i;
            const double x = std::exp(s);
            const double f = std::exp(-robust_rho(x, alpha, 1.0) + s);
            sum += (i == 0 || i == n) ? 0.5 * f : f;
        }
        return std::log(2.0 * h * sum);
    }

  private:
    LogPartition() : spline_(make_spline()) {}

    static boost::math::interpolators::cardinal_cubic_b_spline<double> make_spline() {
        std::vector<double> values(kGridSize);
        const double step = 2.0 / (kGridSize - 1);
        for (int i = 0; i < kGridSize; ++i) values[i] = quadrature(step * i);
        return {values.begin(), values.end(), 0.0, step};
    }

    static void check(double alpha) {
        if (!(alpha >= 0.0 && alpha <= 2.0)) {
            throw Error(ErrorKind::OutOfRange, "partition function defined for alpha in [0, 2]");
        }
    }

    boost::math::interpolators::cardinal_cubic_b_spline<double> spline_;
};

inline double log_partition(double alpha) { return LogPartition::instance()(alpha); }

/// Negative log-likelihood of the robust density:
/// rho(xi, alpha, c) + log c + log Z(alpha).
inline double robust_nll(double xi, const RobustParams& p) {
    if (!(p.alpha > 0.0 && p.alpha < 2.0)) {
        throw Error(ErrorKind::OutOfRange, "robust_nll: alpha must lie in (0, 2)");
    }
    if (!(p.c > 0.0)) throw Error(ErrorKind::InvalidArgument, "robust_nll: c must be positive");
    return robust_rho(xi, p.alpha, p.c) + std::log(p.c) + log_partition(p.alpha);
}

struct RobustNllGradient {
    double d_xi = 0.0;
    double d_alpha = 0.0;
    double d_c = 0.0;
};

inline RobustNllGradient robust_nll_gradient(double xi, const RobustParams& p) {
    if (!(p.alpha > 0.0 && p.alpha < 2.0)) {
        throw Error(ErrorKind::OutOfRange, "robust_nll: alpha must lie in (0, 2)");
    }
    return {robust_rho_dxi(xi, p.alpha, p.c),
            robust_rho_dalpha(xi, p.alpha, p.c) + LogPartition::instance().derivative(p.alpha),
            robust_rho_dc(xi, p.alpha, p.c) + 1.0 / p.c};
}

inline double mean_robust_nll(std::span<const double> residuals, double alpha, double c) {
    if (residuals.empty()) throw Error(ErrorKind::DegenerateInput, "no residuals");
    double sum = 0.0;
    for (double r : residuals) sum += robust_rho(r, alpha, c);
    return sum / residuals.size() + std::log(c) + log_partition(alpha);
}

/// Maximum-likelihood fit of (alpha, c) to a residual sample by alternating
/// Brent line minimizations.
inline RobustParams fit_robust_params(std::span<const double> residuals, RobustParams init = {1.0, 1.0, true},
                                      int rounds = 12) {
    using boost::math::tools::brent_find_minima;
    constexpr int bits = 40;
    double alpha = init.alpha, log_c = std::log(init.c);
    for (int r = 0; r < rounds; ++r) {
        const double prev_alpha = alpha, prev_log_c = log_c;
        alpha = brent_find_minima(
                    [&](double a) { return mean_robust_nll(residuals, a, std::exp(log_c)); }, 1e-4,
                    2.0 - 1e-4, bits)
                    .first;
        log_c = brent_find_minima(
                    [&](double lc) { return mean_robust_nll(residuals, alpha, std::exp(lc)); }, -12.0,
                    12.0, bits)
                    .first;
        if (std::abs(alpha - prev_alpha) < 1e-7 && std::abs(log_c - prev_log_c) < 1e-7) break;
    }
    return {alpha, std::exp(log_c), true};
}

}  // namespace syndist
