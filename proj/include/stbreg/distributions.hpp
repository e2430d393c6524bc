#pragma once

// Samplers for every distribution the Gibbs machinery draws from:
// Polya-Gamma, multivariate normal parameterized by precision, truncated
// normal, inverse gamma. All draws consume a caller-supplied RngStream.

#include <cmath>
#include <limits>
#include <stdexcept>

#include <Eigen/Dense>
#include <Eigen/SparseCholesky>

#include "stbreg/rng.hpp"

namespace stbreg {

inline double norm_cdf(double x) { return 0.5 * std::erfc(-x * M_SQRT1_2); }

// Wichura's PPND16 rational approximation, accurate to ~1e-16 across (0,1).
inline double norm_quantile(double p) {
    if (!(p > 0.0 && p < 1.0)) {
        if (p == 0.0) return -std::numeric_limits<double>::infinity();
        if (p == 1.0) return std::numeric_limits<double>::infinity();
        throw std::invalid_argument("norm_quantile: p outside [0,1]");
    }
    const double q = p - 0.5;
    if (std::abs(q) <= 0.425) {
        const double r = 0.180625 - q * q;
        return q *
               (((((((2.5090809287301226727e+3 * r + 3.3430575583588128105e+4) * r +
                     6.7265770927008700853e+4) *
                        r +
                    4.5921953931549871457e+4) *
                       r +
                   1.3731693765509461125e+4) *
                      r +
                  1.9715909503065514427e+3) *
                     r +
                 1.3314166789178437745e+2) *
                    r +
                3.3871328727963666080e+0) /
               (((((((5.2264952788528545610e+3 * r + 2.8729085735721942674e+4) * r +
                     3.9307895800092710610e+4) *
                        r +
                    2.1213794301586595867e+4) *
                       r +
                   5.3941960214247511077e+3) *
                      r +
                  6.8718700749205790830e+2) *
                     r +
                 4.2313330701600911252e+1) *
                    r +
                1.0);
    }
    double r = (q < 0.0) ? p : 1.0 - p;
    r = std::sqrt(-std::log(r));
    double x;
    if (r <= 5.0) {
        r -= 1.6;
        x = (((((((7.74545014278341407640e-4 * r + 2.27238449892691845833e-2) * r +
                  2.41780725177450611770e-1) *
                     r +
                 1.27045825245236838258e+0) *
                    r +
                3.64784832476320460504e+0) *
                   r +
               5.76949722146069140550e+0) *
                  r +
              4.63033784615654529590e+0) *
                 r +
             1.42343711074968357734e+0) /
            (((((((1.05075007164441684324e-9 * r + 5.47593808499534494600e-4) * r +
                  1.51986665636164571966e-2) *
                     r +
                 1.48103976427480074590e-1) *
                    r +
                6.89767334985100004550e-1) *
                   r +
               1.67638483018380384940e+0) *
                  r +
              2.05319162663775882187e+0) *
                 r +
             1.0);
    } else {
        r -= 5.0;
        x = (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r +
                  1.24266094738807843860e-3) *
                     r +
                 2.65321895265761230930e-2) *
                    r +
                2.96560571828504891230e-1) *
                   r +
               1.78482653991729133580e+0) *
                  r +
              5.46378491116411436990e+0) *
                 r +
             6.65790464350110377720e+0) /
            (((((((2.04426310338993978564e-15 * r + 1.42151175831644588870e-7) * r +
                  1.84631831751005468180e-5) *
                     r +
                 7.86869131145613259100e-4) *
                    r +
                1.48753612908506148525e-2) *
                   r +
               1.36929880922735805310e-1) *
                  r +
              5.99832206555887937690e-1) *
                 r +
             1.0);
    }
    return (q < 0.0) ? -x : x;
}

namespace detail {

// Right-tail rejection for a standard normal restricted to [lo, hi],
// lo >= 0 (Robert's shifted-exponential proposal).
inline double truncnorm_tail(double lo, double hi, RngStream& rng) {
    const double alpha = 0.5 * (lo + std::sqrt(lo * lo + 4.0));
    for (;;) {
        const double x = lo + rng.exponential() / alpha;
        if (x >= hi) continue;
        const double d = x - alpha;
        if (rng.uniform() <= std::exp(-0.5 * d * d)) return x;
    }
}

// Standard normal truncated to (a, b). Mirrors so the working interval is
// never in the right tail, where CDF values saturate.
inline double truncnorm_std(double a, double b, RngStream& rng) {
    if (a >= 0.0) return -truncnorm_std(-b, -a, rng);
    if (b - a < 1e-10) return a + (b - a) * rng.uniform();
    const double Fa = norm_cdf(a);
    const double Fb = norm_cdf(b);
    if (Fb - Fa > 0.0) {
        const double x = norm_quantile(Fa + rng.uniform() * (Fb - Fa));
        // inverse CDF can land on a bound by rounding
        if (x <= a) return a + 1e-14 * (b - a);
        if (x >= b) return b - 1e-14 * (b - a);
        return x;
    }
    // interval mass underflows: both bounds deep in the left tail
    return -truncnorm_tail(-b, -a, rng);
}

}  // namespace detail

// Exact draw from N(mu, sigma_sq) restricted to (lo, hi).
inline double sample_truncnorm(double mu, double sigma_sq, double lo, double hi,
                               RngStream& rng) {
    if (!(lo < hi)) throw std::invalid_argument("sample_truncnorm: empty interval");
    if (!(sigma_sq > 0.0)) throw std::invalid_argument("sample_truncnorm: variance must be > 0");
    const double sd = std::sqrt(sigma_sq);
    const double x = detail::truncnorm_std((lo - mu) / sd, (hi - mu) / sd, rng);
    return mu + sd * x;
}

// Inverse gamma with density proportional to x^(-shape-1) exp(-rate/x).
inline double sample_invgamma(double shape, double rate, RngStream& rng) {
    if (!(shape > 0.0) || !(rate > 0.0))
        throw std::invalid_argument("sample_invgamma: shape and rate must be > 0");
    return rate / rng.gamma(shape);
}

// ---------------------------------------------------------------------------
// Polya-Gamma
// ---------------------------------------------------------------------------

inline double pg_mean(double b, double c) {
    if (c == 0.0) return 0.25 * b;
    return b / (2.0 * c) * std::tanh(0.5 * c);
}

inline double pg_variance(double b, double c) {
    const double c2 = c * c;
    if (std::abs(c) < 0.5) {
        // series around 0; the closed form cancels badly there
        return b * (1.0 / 24.0 - c2 / 120.0 + 17.0 * c2 * c2 / 13440.0 -
                    31.0 * c2 * c2 * c2 / 181440.0);
    }
    const double sech = 1.0 / std::cosh(0.5 * c);
    return b / (4.0 * c2 * std::abs(c)) *
           (2.0 * std::tanh(0.5 * std::abs(c)) - std::abs(c) * sech * sech);
}

namespace detail {

constexpr double kPgTrunc = 0.64;

// Piecewise coefficients of the alternating series for the J*(1,.) density.
inline double pg_a_coef(int n, double x) {
    const double d = n + 0.5;
    if (x > kPgTrunc) return M_PI * d * std::exp(-0.5 * d * d * M_PI * M_PI * x);
    return std::pow(2.0 / (M_PI * x), 1.5) * M_PI * d * std::exp(-2.0 * d * d / x);
}

// Probability of proposing from the (truncated-exponential) right piece.
inline double pg_exp_branch_mass(double z) {
    const double t = kPgTrunc;
    const double fz = 0.125 * M_PI * M_PI + 0.5 * z * z;
    const double b = std::sqrt(1.0 / t) * (t * z - 1.0);
    const double a = -std::sqrt(1.0 / t) * (t * z + 1.0);
    const double x0 = std::log(fz) + fz * t;
    const double xb = x0 - z + std::log(norm_cdf(b));
    const double xa = x0 + z + std::log(norm_cdf(a));
    const double qdivp = 4.0 / M_PI * (std::exp(xb) + std::exp(xa));
    return 1.0 / (1.0 + qdivp);
}

// Inverse Gaussian(1/z, 1) restricted to (0, kPgTrunc].
inline double pg_rtigauss(double z, RngStream& rng) {
    const double t = kPgTrunc;
    double x = t + 1.0;
    if (z < 1.0 / t) {  // mean above the truncation point
        double alpha = 0.0;
        while (rng.uniform() > alpha) {
            double e1 = rng.exponential();
            double e2 = rng.exponential();
            while (e1 * e1 > 2.0 * e2 / t) {
                e1 = rng.exponential();
                e2 = rng.exponential();
            }
            x = t / ((1.0 + t * e1) * (1.0 + t * e1));
            alpha = std::exp(-0.5 * z * z * x);
        }
    } else {
        const double mu = 1.0 / z;
        while (x > t) {
            double y = rng.normal();
            y *= y;
            const double mu_y = mu * y;
            x = mu + 0.5 * mu * mu_y - 0.5 * mu * std::sqrt(4.0 * mu_y + mu_y * mu_y);
            if (rng.uniform() > mu / (mu + x)) x = mu * mu / x;
        }
    }
    return x;
}

// One draw from J*(1, z) by series rejection; PG(1,c) = J*(1,|c|/2)/4.
inline double pg_draw_jstar1(double z, RngStream& rng) {
    const double fz = 0.125 * M_PI * M_PI + 0.5 * z * z;
    const double pexp = pg_exp_branch_mass(z);
    for (;;) {
        double x;
        if (rng.uniform() < pexp)
            x = kPgTrunc + rng.exponential() / fz;
        else
            x = pg_rtigauss(z, rng);
        double s = pg_a_coef(0, x);
        const double y = rng.uniform() * s;
        for (int n = 1;; ++n) {
            if (n & 1) {
                s -= pg_a_coef(n, x);
                if (y <= s) return x;
            } else {
                s += pg_a_coef(n, x);
                if (y > s) break;
            }
        }
    }
}

}  // namespace detail

// Exact PG(1, c).
inline double sample_pg1(double c, RngStream& rng) {
    return 0.25 * detail::pg_draw_jstar1(0.5 * std::abs(c), rng);
}

// PG(b, c) for integer b >= 1: the sum of b exact PG(1,c) draws up to
// exact_max, a moment-matched normal above it. Trial counts in the
// application reach the thousands, where exact summation dominates runtime.
inline double sample_pg(double b, double c, RngStream& rng, int exact_max = 50) {
    const double rounded = std::round(b);
    if (!(b >= 1.0) || std::abs(b - rounded) > 1e-9)
        throw std::invalid_argument("sample_pg: b must be an integer >= 1");
    const auto n = static_cast<long long>(rounded);
    if (n <= exact_max) {
        double s = 0.0;
        for (long long i = 0; i < n; ++i) s += sample_pg1(c, rng);
        return s;
    }
    const double m = pg_mean(b, c);
    const double sd = std::sqrt(pg_variance(b, c));
    double x;
    do {
        x = m + sd * rng.normal();
    } while (x <= 0.0);
    return x;
}

// ---------------------------------------------------------------------------
// Multivariate normal by precision
// ---------------------------------------------------------------------------

// Draws x ~ N(Q^{-1} rhs, Q^{-1}) with a single Cholesky of Q: solve for the
// mean, then back-substitute a standard normal through the factor.
inline Eigen::VectorXd sample_mvn_prec(const Eigen::VectorXd& rhs,
                                       const Eigen::MatrixXd& precision, RngStream& rng) {
    Eigen::LLT<Eigen::MatrixXd> llt(precision);
    if (llt.info() != Eigen::Success)
        throw std::runtime_error("sample_mvn_prec: precision not positive definite");
    Eigen::VectorXd x(rhs.size());
    for (Eigen::Index i = 0; i < x.size(); ++i) x[i] = rng.normal();
    llt.matrixU().solveInPlace(x);
    return x + llt.solve(rhs);
}

// Sparse variant reusing a caller-held factorization (pattern analysis is
// the expensive part; values change every sweep).
inline Eigen::VectorXd sample_mvn_prec(
    const Eigen::VectorXd& rhs,
    const Eigen::SimplicialLLT<Eigen::SparseMatrix<double>>& llt, RngStream& rng) {
    if (llt.info() != Eigen::Success)
        throw std::runtime_error("sample_mvn_prec: sparse factorization failed");
    Eigen::VectorXd z(rhs.size());
    for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = rng.normal();
    Eigen::VectorXd u = llt.matrixU().solve(z);
    return llt.permutationPinv() * u + llt.solve(rhs);
}

}  // namespace stbreg
