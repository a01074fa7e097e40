#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "semot/common.hpp"

namespace semot {

struct EmptySample : Error {
    using Error::Error;
};

/// Analytic normal CDF used as the population side of 1D comparisons.
struct GaussianCdf {
    double mean = 0.0;
    double sigma = 1.0;

    double cdf(double t) const { return 0.5 * std::erfc(-(t - mean) / (sigma * std::sqrt(2.0))); }
    double pdf(double t) const {
        const double z = (t - mean) / sigma;
        constexpr double inv_sqrt_2pi = 0.3989422804014326779399461;
        return inv_sqrt_2pi / sigma * std::exp(-0.5 * z * z);
    }
    /// Antiderivative of the CDF: integral of cdf over (-inf, t].
    /// Equals (t - m) Phi(z) + sigma phi(z) with phi the standard pdf.
    double cdf_integral(double t) const { return (t - mean) * cdf(t) + sigma * sigma * pdf(t); }
    /// Integral of (1 - cdf) over [t, inf).
    double survival_integral(double t) const {
        return (t - mean) * (cdf(t) - 1.0) + sigma * sigma * pdf(t);
    }
};

/// W1 between two equal-weight finite samples: integral of |F_a - F_b| over
/// the merged breakpoints.
inline double wasserstein_1d(Vec a, Vec b) {
    if (a.empty() || b.empty()) throw EmptySample("empty sample set");
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    const double wa = 1.0 / static_cast<double>(a.size());
    const double wb = 1.0 / static_cast<double>(b.size());
    double total = 0.0;
    std::size_t ia = 0, ib = 0;
    double prev = std::min(a[0], b[0]);
    while (ia < a.size() || ib < b.size()) {
        const double next = (ib >= b.size() || (ia < a.size() && a[ia] <= b[ib])) ? a[ia] : b[ib];
        total += std::abs(wa * static_cast<double>(ia) - wb * static_cast<double>(ib)) *
                 (next - prev);
        while (ia < a.size() && a[ia] == next) ++ia;
        while (ib < b.size() && b[ib] == next) ++ib;
        prev = next;
    }
    return total;
}

namespace detail {

/// Solves cdf(t) = y on [lo, hi] by safeguarded Newton (bisection fallback).
inline double gaussian_cdf_inverse_on(const GaussianCdf& g, double y, double lo, double hi) {
    double t = 0.5 * (lo + hi);
    for (int it = 0; it < 100; ++it) {
        const double f = g.cdf(t) - y;
        if (f > 0.0)
            hi = t;
        else
            lo = t;
        const double d = g.pdf(t);
        double step = d > 0.0 ? t - f / d : lo - 1.0;
        if (!(step > lo && step < hi)) step = 0.5 * (lo + hi);
        if (std::abs(step - t) < 1e-15 * (1.0 + std::abs(t))) return step;
        t = step;
    }
    return t;
}

}  // namespace detail

/// W1 between an equal-weight sample and an analytic Gaussian: integral of
/// |F_sample - Phi|. Each inter-sample segment and the two tails are
/// integrated with the closed-form antiderivative of Phi, splitting at the
/// sign change, so the result is exact up to erf precision (well inside the
/// 1e-6 contract).
inline double wasserstein_1d(Vec samples, const GaussianCdf& g) {
    if (samples.empty()) throw EmptySample("empty sample set");
    std::sort(samples.begin(), samples.end());
    const std::size_t n = samples.size();
    const double wn = 1.0 / static_cast<double>(n);

    // Lower tail: F_sample = 0, so the integrand is Phi itself.
    double total = g.cdf_integral(samples.front());
    // Upper tail: F_sample = 1, integrand is 1 - Phi.
    total += g.survival_integral(samples.back());

    for (std::size_t i = 0; i + 1 < n; ++i) {
        const double lo = samples[i], hi = samples[i + 1];
        if (hi <= lo) continue;
        const double level = wn * static_cast<double>(i + 1);
        const double flo = g.cdf(lo), fhi = g.cdf(hi);
        // integral of (level - Phi) over [x, y]
        auto signed_piece = [&](double x, double y) {
            return level * (y - x) - (g.cdf_integral(y) - g.cdf_integral(x));
        };
        if (flo >= level) {
            total += -signed_piece(lo, hi);
        } else if (fhi <= level) {
            total += signed_piece(lo, hi);
        } else {
            const double split = detail::gaussian_cdf_inverse_on(g, level, lo, hi);
            total += signed_piece(lo, split) - signed_piece(split, hi);
        }
    }
    return total;
}

/// Adaptive Simpson quadrature with absolute tolerance.
inline double adaptive_simpson(const std::function<double(double)>& f, double a, double b,
                               double tol, int max_depth = 50) {
    struct Rec {
        static double go(const std::function<double(double)>& f, double a, double b, double fa,
                         double fm, double fb, double whole, double tol, int depth) {
            const double m = 0.5 * (a + b);
            const double lm = 0.5 * (a + m), rm = 0.5 * (m + b);
            const double flm = f(lm), frm = f(rm);
            const double left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
            const double right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
            const double delta = left + right - whole;
            if (depth <= 0 || std::abs(delta) <= 15.0 * tol)
                return left + right + delta / 15.0;
            return go(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) +
                   go(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1);
        }
    };
    const double m = 0.5 * (a + b);
    const double fa = f(a), fm = f(m), fb = f(b);
    const double whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    return Rec::go(f, a, b, fa, fm, fb, whole, tol, max_depth);
}

/// E|Z - xi| for Z ~ N(mean, sigma^2) by adaptive quadrature, splitting at
/// the kink. Absolute tolerance `tol`.
inline double gaussian_mean_abs_deviation(double mean, double sigma, double xi,
                                          double tol = 1e-9) {
    const GaussianCdf g{mean, sigma};
    auto f = [&](double z) { return std::abs(z - xi) * g.pdf(z); };
    const double lo = mean - 14.0 * sigma, hi = mean + 14.0 * sigma;
    if (xi <= lo || xi >= hi) return adaptive_simpson(f, lo, hi, tol);
    return adaptive_simpson(f, lo, xi, 0.5 * tol) + adaptive_simpson(f, xi, hi, 0.5 * tol);
}

}  // namespace semot
