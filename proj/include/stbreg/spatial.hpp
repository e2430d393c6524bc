#pragma once

// Spatial linear algebra: powered-exponential correlation, low-rank kriging
// operators, CAR precision structure, K-means knot placement, greedy graph
// coloring, and the Moran's I diagnostic.

#include <algorithm>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include "stbreg/model.hpp"
#include "stbreg/rng.hpp"

namespace stbreg {

// Knot locations for one varying-coefficient surface.
struct KnotSet {
    std::vector<Point> locations;
};

// rho(d) = theta^(d^2) with d the Euclidean distance; valid correlation on
// the plane for theta in (0,1).
inline double powered_exp_corr(double theta, double dist) {
    if (!(theta > 0.0 && theta < 1.0))
        throw std::invalid_argument("powered_exp_corr: theta must lie in (0,1)");
    if (!(dist >= 0.0)) throw std::invalid_argument("powered_exp_corr: negative distance");
    return std::pow(theta, dist * dist);
}

inline Eigen::MatrixXd corr_matrix(const std::vector<Point>& locs, double theta) {
    const auto n = static_cast<Eigen::Index>(locs.size());
    Eigen::MatrixXd r(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        r(i, i) = 1.0;
        for (Eigen::Index j = i + 1; j < n; ++j) {
            const double v = powered_exp_corr(theta, distance(locs[i], locs[j]));
            r(i, j) = v;
            r(j, i) = v;
        }
    }
    return r;
}

inline Eigen::MatrixXd cross_corr_matrix(const std::vector<Point>& rows,
                                         const std::vector<Point>& cols, double theta) {
    Eigen::MatrixXd r(static_cast<Eigen::Index>(rows.size()),
                      static_cast<Eigen::Index>(cols.size()));
    for (Eigen::Index i = 0; i < r.rows(); ++i)
        for (Eigen::Index j = 0; j < r.cols(); ++j)
            r(i, j) = powered_exp_corr(theta, distance(rows[i], cols[j]));
    return r;
}

struct CholeskyResult {
    Eigen::LLT<Eigen::MatrixXd> llt;
    double log_det = 0.0;
    bool jittered = false;
};

// Factorize a correlation matrix; on failure add `jitter` to the diagonal
// and retry once. Knots from K-means can nearly coincide at small counts.
inline CholeskyResult chol_with_jitter(Eigen::MatrixXd m, double jitter = 1e-8) {
    CholeskyResult out;
    out.llt.compute(m);
    if (out.llt.info() != Eigen::Success) {
        m.diagonal().array() += jitter;
        out.llt.compute(m);
        out.jittered = true;
        if (out.llt.info() != Eigen::Success)
            throw std::runtime_error("chol_with_jitter: matrix not positive definite after jitter");
    }
    out.log_det = 2.0 * out.llt.matrixLLT().diagonal().array().log().sum();
    return out;
}

// T = cross_corr * knot_corr^{-1}, computed by solving against the knot
// factor rather than forming an explicit inverse.
inline Eigen::MatrixXd kriging_operator(const Eigen::MatrixXd& knot_corr,
                                        const Eigen::MatrixXd& cross_corr) {
    if (cross_corr.cols() != knot_corr.rows())
        throw std::invalid_argument("kriging_operator: column count must equal knot count");
    const CholeskyResult chol = chol_with_jitter(knot_corr);
    return chol.llt.solve(cross_corr.transpose()).transpose();
}

// Lloyd's algorithm from a seeded k-means++ start, run to an assignment
// fixpoint. Deterministic given the seed.
inline KnotSet kmeans_knots(const std::vector<Point>& locs, int k, std::uint64_t seed) {
    const int n = static_cast<int>(locs.size());
    {
        std::vector<Point> uniq(locs);
        std::sort(uniq.begin(), uniq.end(), [](const Point& a, const Point& b) {
            return a.x != b.x ? a.x < b.x : a.y < b.y;
        });
        const auto last = std::unique(uniq.begin(), uniq.end(), [](const Point& a, const Point& b) {
            return a.x == b.x && a.y == b.y;
        });
        const int distinct = static_cast<int>(last - uniq.begin());
        if (k < 1 || k > distinct)
            throw std::invalid_argument("kmeans_knots: k must lie in [1, distinct locations] (k=" +
                                        std::to_string(k) + ", distinct=" + std::to_string(distinct) + ")");
    }

    RngStream rng(seed);
    std::vector<Point> centers;
    centers.reserve(k);
    centers.push_back(locs[static_cast<std::size_t>(rng.uniform_int(0, n - 1))]);
    std::vector<double> d2(n);
    for (int j = 1; j < k; ++j) {
        double total = 0.0;
        for (int i = 0; i < n; ++i) {
            double best = squared_distance(locs[i], centers[0]);
            for (std::size_t c = 1; c < centers.size(); ++c)
                best = std::min(best, squared_distance(locs[i], centers[c]));
            d2[i] = best;
            total += best;
        }
        double u = rng.uniform() * total;
        int pick = n - 1;
        for (int i = 0; i < n; ++i) {
            u -= d2[i];
            if (u <= 0.0) {
                pick = i;
                break;
            }
        }
        centers.push_back(locs[pick]);
    }

    std::vector<int> assign(n, -1);
    for (int round = 0; round < 10000; ++round) {
        bool changed = false;
        for (int i = 0; i < n; ++i) {
            int best = 0;
            double best_d = squared_distance(locs[i], centers[0]);
            for (int c = 1; c < k; ++c) {
                const double d = squared_distance(locs[i], centers[c]);
                if (d < best_d) {
                    best_d = d;
                    best = c;
                }
            }
            if (assign[i] != best) {
                assign[i] = best;
                changed = true;
            }
        }
        if (!changed) break;
        std::vector<double> sx(k, 0.0), sy(k, 0.0);
        std::vector<int> count(k, 0);
        for (int i = 0; i < n; ++i) {
            sx[assign[i]] += locs[i].x;
            sy[assign[i]] += locs[i].y;
            ++count[assign[i]];
        }
        for (int c = 0; c < k; ++c)
            if (count[c] > 0) centers[c] = {sx[c] / count[c], sy[c] / count[c]};
        // empty clusters keep their previous centroid
    }
    return KnotSet{std::move(centers)};
}

// A = tau^{-2} (D - omega W). Isolated regions get a unit diagonal entry in
// place of their zero degree, keeping the precision nonsingular; their
// effect is then a priori independent N(0, tau^2).
inline Eigen::SparseMatrix<double> car_precision(const std::vector<std::vector<int>>& neighbors,
                                                 const Eigen::VectorXd& degrees, double omega,
                                                 double tau_sq) {
    if (!(omega > 0.0 && omega < 1.0))
        throw std::invalid_argument("car_precision: omega must lie in (0,1)");
    if (!(tau_sq > 0.0)) throw std::invalid_argument("car_precision: tau_sq must be > 0");
    const int n = static_cast<int>(neighbors.size());
    if (degrees.size() != n) throw std::invalid_argument("car_precision: degree length mismatch");
    const double inv_tau = 1.0 / tau_sq;
    std::vector<Eigen::Triplet<double>> trips;
    trips.reserve(static_cast<std::size_t>(n) * 4);
    for (int s = 0; s < n; ++s) {
        const double d = degrees[s] > 0.0 ? degrees[s] : 1.0;
        trips.emplace_back(s, s, d * inv_tau);
        for (int t : neighbors[s]) trips.emplace_back(s, t, -omega * inv_tau);
    }
    Eigen::SparseMatrix<double> a(n, n);
    a.setFromTriplets(trips.begin(), trips.end());
    return a;
}

// Greedy proper coloring in ascending index order: each vertex takes the
// smallest color absent among already-colored neighbors. Returns the color
// classes; members of a class are pairwise non-adjacent.
inline std::vector<std::vector<int>> greedy_coloring(const std::vector<std::vector<int>>& neighbors) {
    const int n = static_cast<int>(neighbors.size());
    std::vector<int> color(n, -1);
    int k = 0;
    std::vector<char> used;
    for (int s = 0; s < n; ++s) {
        used.assign(k + 1, 0);
        for (int t : neighbors[s])
            if (t < s && color[t] >= 0) used[color[t]] = 1;
        int c = 0;
        while (used[c]) ++c;
        color[s] = c;
        k = std::max(k, c + 1);
    }
    std::vector<std::vector<int>> classes(k);
    for (int s = 0; s < n; ++s) classes[color[s]].push_back(s);
    return classes;
}

// Moran's I over a binary neighborhood: (S / sum w) * sum_ij w_ij (x_i -
// xbar)(x_j - xbar) / sum_i (x_i - xbar)^2.
inline double morans_i(const Eigen::VectorXd& values,
                       const std::vector<std::vector<int>>& neighbors) {
    const int n = static_cast<int>(values.size());
    if (n < 2) throw std::invalid_argument("morans_i: need at least two regions");
    if (static_cast<int>(neighbors.size()) != n)
        throw std::invalid_argument("morans_i: neighborhood size mismatch");
    const double mean = values.mean();
    const Eigen::VectorXd dev = values.array() - mean;
    const double denom = dev.squaredNorm();
    if (denom <= 0.0) throw std::runtime_error("morans_i: values have zero variance");
    double num = 0.0;
    double weight_sum = 0.0;
    for (int i = 0; i < n; ++i)
        for (int j : neighbors[i]) {
            num += dev[i] * dev[j];
            weight_sum += 1.0;
        }
    if (weight_sum == 0.0) throw std::runtime_error("morans_i: empty neighborhood");
    return (n / weight_sum) * num / denom;
}

// ---------------------------------------------------------------------------
// Per-fit operator bundle
// ---------------------------------------------------------------------------

// Correlation structures for one varying coefficient at its current theta.
struct CoefficientOperators {
    KnotSet knots;
    Eigen::MatrixXd knot_corr;      // R*
    Eigen::LLT<Eigen::MatrixXd> knot_chol;
    Eigen::MatrixXd knot_corr_inv;
    double knot_log_det = 0.0;
    Eigen::MatrixXd cross_corr;     // S x S*
    Eigen::MatrixXd kriging;        // T = cross * R*^{-1}
};

struct SpatialOperators {
    std::vector<Point> locations;               // region centroids
    std::vector<CoefficientOperators> coef;     // one per varying coefficient
    std::vector<std::vector<int>> neighbors;    // W as adjacency lists
    Eigen::VectorXd degree;                     // raw row sums of W
    Eigen::VectorXd degree_guarded;             // isolated regions bumped to 1
    std::vector<std::vector<int>> color_classes;

    static SpatialOperators build(const Dataset& data, const std::vector<KnotSet>& knots,
                                  const std::vector<double>& theta) {
        if (knots.size() != theta.size())
            throw std::invalid_argument("SpatialOperators: knots/theta size mismatch");
        SpatialOperators ops;
        ops.locations.reserve(data.regions.size());
        for (const auto& r : data.regions) ops.locations.push_back(r.centroid);
        ops.neighbors = neighbor_lists(static_cast<int>(data.regions.size()), data.adjacency);
        const int s_count = static_cast<int>(ops.neighbors.size());
        ops.degree.resize(s_count);
        ops.degree_guarded.resize(s_count);
        for (int s = 0; s < s_count; ++s) {
            ops.degree[s] = static_cast<double>(ops.neighbors[s].size());
            ops.degree_guarded[s] = ops.degree[s] > 0.0 ? ops.degree[s] : 1.0;
        }
        ops.color_classes = greedy_coloring(ops.neighbors);
        ops.coef.resize(knots.size());
        for (std::size_t p = 0; p < knots.size(); ++p) {
            ops.coef[p].knots = knots[p];
            ops.rebuild_coefficient(static_cast<int>(p), theta[p]);
        }
        return ops;
    }

    // Refresh R*, its factorization, the cross-correlation and the kriging
    // operator after a theta move.
    void rebuild_coefficient(int p, double theta) {
        CoefficientOperators& c = coef[p];
        if (c.knots.locations.empty())
            throw std::invalid_argument("SpatialOperators: empty knot set");
        c.knot_corr = corr_matrix(c.knots.locations, theta);
        CholeskyResult chol = chol_with_jitter(c.knot_corr);
        c.knot_chol = std::move(chol.llt);
        c.knot_log_det = chol.log_det;
        const auto k = c.knot_corr.rows();
        c.knot_corr_inv = c.knot_chol.solve(Eigen::MatrixXd::Identity(k, k));
        c.cross_corr = cross_corr_matrix(locations, c.knots.locations, theta);
        c.kriging = c.knot_chol.solve(c.cross_corr.transpose()).transpose();
    }
};

// nu_st = Z'delta + sum_p X_p (T_p beta*_p)_s + xi_st for every observed
// cell, in dataset cell order.
inline Eigen::VectorXd linear_predictor(const LatentState& state, const Dataset& data,
                                        const SpatialOperators& ops) {
    const int p_count = static_cast<int>(ops.coef.size());
    if (static_cast<int>(state.beta_star.size()) != p_count)
        throw std::invalid_argument("linear_predictor: beta_star count mismatch");
    std::vector<Eigen::VectorXd> beta_tilde(p_count);
    for (int p = 0; p < p_count; ++p) {
        if (state.beta_star[p].size() != ops.coef[p].kriging.cols())
            throw std::invalid_argument("linear_predictor: beta_star length mismatch");
        beta_tilde[p] = ops.coef[p].kriging * state.beta_star[p];
    }
    Eigen::VectorXd nu(static_cast<Eigen::Index>(data.cells.size()));
    for (std::size_t i = 0; i < data.cells.size(); ++i) {
        const Cell& c = data.cells[i];
        if (static_cast<int>(c.z.size()) + 1 != state.delta.size())
            throw std::invalid_argument("linear_predictor: global covariate length mismatch");
        if (static_cast<int>(c.x.size()) != p_count)
            throw std::invalid_argument("linear_predictor: varying covariate length mismatch");
        double v = state.delta[0];
        for (std::size_t q = 0; q < c.z.size(); ++q) v += c.z[q] * state.delta[q + 1];
        for (int p = 0; p < p_count; ++p) v += c.x[p] * beta_tilde[p][c.region];
        v += state.xi(c.region, c.time - 1);
        nu[static_cast<Eigen::Index>(i)] = v;
    }
    return nu;
}

// Predictor at an arbitrary (possibly unobserved) cell.
inline double linear_predictor_at(const LatentState& state, const SpatialOperators& ops,
                                  int region, int time, const std::vector<double>& z,
                                  const std::vector<double>& x) {
    double v = state.delta[0];
    if (static_cast<int>(z.size()) + 1 != state.delta.size())
        throw std::invalid_argument("linear_predictor_at: global covariate length mismatch");
    if (x.size() != ops.coef.size())
        throw std::invalid_argument("linear_predictor_at: varying covariate length mismatch");
    for (std::size_t q = 0; q < z.size(); ++q) v += z[q] * state.delta[q + 1];
    for (std::size_t p = 0; p < x.size(); ++p)
        v += x[p] * ops.coef[p].kriging.row(region).dot(state.beta_star[p]);
    return v + state.xi(region, time - 1);
}

}  // namespace stbreg
