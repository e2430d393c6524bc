#pragma once

// Synthetic data generation on a regular lattice: CAR-AR spatio-temporal
// effects, a low-rank Gaussian-process trend surface, binomial counts, and
// the replication harness that scores surface recovery across fits.

#include <atomic>
#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>

#include "stbreg/gibbs.hpp"
#include "stbreg/model.hpp"
#include "stbreg/rng.hpp"
#include "stbreg/spatial.hpp"

namespace stbreg {

// Defaults reproduce the reference simulation design: a 13x13 unit-spaced
// grid over 60 periods, counts uniform on {100..200}, a 5x5 knot grid, and
// CAR parameters (zeta, tau^2, omega) = (0.9, 0.005, 0.9).
struct SimDesign {
    int grid_rows = 13;
    int grid_cols = 13;
    int horizon = 60;
    int trials_min = 100;
    int trials_max = 200;
    double zeta = 0.9;
    double tau_sq = 0.005;
    double omega = 0.9;
    double delta0 = -1.0;
    int knot_rows = 5;
    int knot_cols = 5;
    double surface_mean = 1.0;
    double theta = 0.6;
    double sigma_sq = 1.5;
    int replications = 20;
    std::uint64_t seed = 0;
    bool mean_adjusted_kriging = true;
};

namespace detail {

enum class SimBlock : std::uint64_t {
    parent_surface = 1,
    car_noise = 2,
    trials = 3,
    counts = 4,
};

// Simulation streams live in their own key space (bit 62 set) so they can
// never collide with sampler streams derived from the same seed.
inline RngStream sim_stream(const SimDesign& d, std::uint64_t rep, SimBlock b,
                            std::uint64_t index) {
    const std::uint64_t block =
        (1ULL << 62) | (static_cast<std::uint64_t>(b) << 48) | index;
    return RngStream(d.seed, StreamKey{rep, 0, block});
}

}  // namespace detail

inline void check_design(const SimDesign& d) {
    if (d.grid_rows < 1 || d.grid_cols < 1) throw std::invalid_argument("SimDesign: empty grid");
    if (d.horizon < 1) throw std::invalid_argument("SimDesign: horizon must be >= 1");
    if (d.trials_min < 1 || d.trials_max < d.trials_min)
        throw std::invalid_argument("SimDesign: bad trial-count bounds");
    if (!(d.zeta > -1.0 && d.zeta < 1.0)) throw std::invalid_argument("SimDesign: zeta outside (-1,1)");
    if (!(d.omega > 0.0 && d.omega < 1.0)) throw std::invalid_argument("SimDesign: omega outside (0,1)");
    if (!(d.tau_sq >= 0.0)) throw std::invalid_argument("SimDesign: tau_sq must be >= 0");
    if (d.knot_rows < 1 || d.knot_cols < 1 || d.knot_rows > d.grid_rows ||
        d.knot_cols > d.grid_cols)
        throw std::invalid_argument("SimDesign: knot grid must fit inside the lattice");
    if (!(d.theta > 0.0 && d.theta < 1.0)) throw std::invalid_argument("SimDesign: theta outside (0,1)");
    if (!(d.sigma_sq >= 0.0)) throw std::invalid_argument("SimDesign: sigma_sq must be >= 0");
}

// Unit-spaced lattice regions in row-major order, ids "r<row>_<col>".
inline std::vector<Region> grid_regions(int rows, int cols) {
    std::vector<Region> out;
    out.reserve(static_cast<std::size_t>(rows) * cols);
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j)
            out.push_back({"r" + std::to_string(i) + "_" + std::to_string(j),
                           {static_cast<double>(j), static_cast<double>(i)}});
    return out;
}

// Neighbors share an edge or a corner.
inline std::vector<std::pair<int, int>> queen_adjacency(int rows, int cols) {
    std::vector<std::pair<int, int>> pairs;
    auto idx = [cols](int i, int j) { return i * cols + j; };
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j)
            for (int di = -1; di <= 1; ++di)
                for (int dj = -1; dj <= 1; ++dj) {
                    if (di == 0 && dj == 0) continue;
                    const int ni = i + di, nj = j + dj;
                    if (ni < 0 || ni >= rows || nj < 0 || nj >= cols) continue;
                    pairs.emplace_back(idx(i, j), idx(ni, nj));
                }
    return pairs;
}

// Equally spaced knot grid spanning the full lattice extent.
inline KnotSet grid_knots(int grid_rows, int grid_cols, int knot_rows, int knot_cols) {
    KnotSet k;
    auto coord = [](int count, int extent, int i) {
        return count == 1 ? 0.5 * (extent - 1)
                          : static_cast<double>(i) * (extent - 1) / (count - 1);
    };
    for (int i = 0; i < knot_rows; ++i)
        for (int j = 0; j < knot_cols; ++j)
            k.locations.push_back(
                {coord(knot_cols, grid_cols, j), coord(knot_rows, grid_rows, i)});
    return k;
}

// xi_t = zeta * xi_{t-1} + phi_t, phi_t ~ N(0, tau^2 (D - omega W)^{-1}),
// xi_0 = 0.
inline Eigen::MatrixXd generate_car_effects(const SimDesign& d, std::uint64_t rep = 0) {
    check_design(d);
    const int s_count = d.grid_rows * d.grid_cols;
    Eigen::MatrixXd xi = Eigen::MatrixXd::Zero(s_count, d.horizon);
    if (d.tau_sq == 0.0) return xi;
    const auto neighbors = neighbor_lists(s_count, queen_adjacency(d.grid_rows, d.grid_cols));
    Eigen::VectorXd degrees(s_count);
    for (int s = 0; s < s_count; ++s)
        degrees[s] = static_cast<double>(neighbors[s].size());
    const Eigen::SparseMatrix<double> prec = car_precision(neighbors, degrees, d.omega, d.tau_sq);
    Eigen::SimplicialLLT<Eigen::SparseMatrix<double>> llt(prec);
    if (llt.info() != Eigen::Success)
        throw std::runtime_error("generate_car_effects: CAR precision not positive definite");
    Eigen::VectorXd prev = Eigen::VectorXd::Zero(s_count);
    for (int t = 0; t < d.horizon; ++t) {
        RngStream rng = detail::sim_stream(d, rep, detail::SimBlock::car_noise, t);
        Eigen::VectorXd z(s_count);
        for (int s = 0; s < s_count; ++s) z[s] = rng.normal();
        const Eigen::VectorXd noise = llt.permutationPinv() * llt.matrixU().solve(z);
        xi.col(t) = d.zeta * prev + noise;
        prev = xi.col(t);
    }
    return xi;
}

struct GppSurface {
    Eigen::VectorXd values;  // kriged surface over all grid cells
    Eigen::VectorXd parent;  // the parent draw at the knots
    KnotSet knots;
};

// Parent draw at the knots, kriged to the lattice. Mean-adjusted kriging
// interpolates deviations from the parent mean and adds the mean back;
// setting mean_adjusted_kriging=false kriges raw values instead.
inline GppSurface generate_gpp_surface(const SimDesign& d) {
    check_design(d);
    GppSurface out;
    out.knots = grid_knots(d.grid_rows, d.grid_cols, d.knot_rows, d.knot_cols);
    const auto k = static_cast<Eigen::Index>(out.knots.locations.size());
    RngStream rng = detail::sim_stream(d, 0, detail::SimBlock::parent_surface, 0);
    Eigen::VectorXd z(k);
    for (Eigen::Index i = 0; i < k; ++i) z[i] = rng.normal();
    const Eigen::MatrixXd knot_corr = corr_matrix(out.knots.locations, d.theta);
    const CholeskyResult chol = chol_with_jitter(knot_corr);
    out.parent = Eigen::VectorXd::Constant(k, d.surface_mean);
    if (d.sigma_sq > 0.0)
        out.parent += std::sqrt(d.sigma_sq) *
                      (chol.llt.matrixL() * z).eval();

    std::vector<Point> locs;
    for (const auto& r : grid_regions(d.grid_rows, d.grid_cols)) locs.push_back(r.centroid);
    const Eigen::MatrixXd T = kriging_operator(knot_corr, cross_corr_matrix(locs, out.knots.locations, d.theta));
    if (d.mean_adjusted_kriging)
        out.values = (T * (out.parent.array() - d.surface_mean).matrix()).array() + d.surface_mean;
    else
        out.values = T * out.parent;
    return out;
}

// Count of successes in n Bernoulli(p) trials; intended for simulation-scale n.
inline std::int64_t sample_binomial(std::int64_t n, double p, RngStream& rng) {
    std::int64_t y = 0;
    for (std::int64_t i = 0; i < n; ++i)
        if (rng.uniform() < p) ++y;
    return y;
}

struct SimTruth {
    Dataset data;
    Eigen::VectorXd surface;  // true kriged trend coefficient per region
    Eigen::MatrixXd xi;       // true effects, S x T
    Eigen::MatrixXd nu;       // true linear predictor, S x T
    double delta0 = 0.0;
    KnotSet knots;
};

// Fully observed dataset from the design: one varying covariate t/T, no
// globals beyond the intercept. The surface is shared across replications;
// effects and counts are replication-specific.
inline SimTruth generate_dataset(const SimDesign& d, std::uint64_t rep = 0) {
    check_design(d);
    SimTruth out;
    out.delta0 = d.delta0;
    const GppSurface surf = generate_gpp_surface(d);
    out.surface = surf.values;
    out.knots = surf.knots;
    out.xi = generate_car_effects(d, rep);

    const int s_count = d.grid_rows * d.grid_cols;
    out.data.regions = grid_regions(d.grid_rows, d.grid_cols);
    out.data.horizon = d.horizon;
    out.data.adjacency = queen_adjacency(d.grid_rows, d.grid_cols);
    out.data.cells.reserve(static_cast<std::size_t>(s_count) * d.horizon);
    out.nu.resize(s_count, d.horizon);
    for (int s = 0; s < s_count; ++s)
        for (int t = 1; t <= d.horizon; ++t) {
            const std::uint64_t cell_key = static_cast<std::uint64_t>(s) * d.horizon + (t - 1);
            RngStream trials_rng = detail::sim_stream(d, rep, detail::SimBlock::trials, cell_key);
            RngStream count_rng = detail::sim_stream(d, rep, detail::SimBlock::counts, cell_key);
            Cell cell;
            cell.region = s;
            cell.time = t;
            cell.trials = trials_rng.uniform_int(d.trials_min, d.trials_max);
            const double tfrac = static_cast<double>(t) / d.horizon;
            const double nu = d.delta0 + out.surface[s] * tfrac + out.xi(s, t - 1);
            out.nu(s, t - 1) = nu;
            cell.successes = sample_binomial(cell.trials, logistic(nu), count_rng);
            cell.x = {tfrac};
            out.data.cells.push_back(std::move(cell));
        }
    return out;
}

struct ReplicationSummary {
    Eigen::VectorXd truth;          // true surface per region
    Eigen::MatrixXd estimates;      // n_completed x S posterior means
    Eigen::VectorXd mean_estimate;  // per-region average of the estimates
    Eigen::VectorXd bias;           // mean_estimate - truth
    Eigen::VectorXd mse;            // per-region mean squared error
    int completed = 0;
    int failed = 0;
    std::vector<std::string> failures;
};

// Generate -> fit -> score, n_reps times. Replications run in parallel;
// each owns an independent keyed stream (the fit uses chain_id = rep).
// With zero fit iterations the estimate is the initial kriged surface,
// which makes harness plumbing directly checkable.
inline ReplicationSummary run_replications(const SimDesign& design, const ChainConfig& fit_config,
                                           const KnotSet& fit_knots, const HyperParams& priors,
                                           int n_reps, int threads = 1,
                                           const LatentState* init = nullptr) {
    if (n_reps < 1) throw std::invalid_argument("run_replications: n_reps must be >= 1");
    ReplicationSummary out;
    out.truth = generate_gpp_surface(design).values;
    const int s_count = design.grid_rows * design.grid_cols;
    Eigen::MatrixXd estimates(n_reps, s_count);
    std::vector<char> ok(n_reps, 0);
    std::vector<std::string> errors(n_reps);

    ModelSpec spec;
    spec.num_global = 0;
    spec.num_varying = 1;
    spec.knots_per_surface = {static_cast<int>(fit_knots.locations.size())};
    spec.priors = priors;

    auto run_one = [&](int rep) {
        try {
            SimTruth truth = generate_dataset(design, rep);
            ChainConfig cfg = fit_config;
            cfg.chain_id = static_cast<std::uint64_t>(rep);
            GibbsSampler sampler(std::move(truth.data), spec, {fit_knots}, cfg);
            if (init) sampler.set_state(*init);
            if (cfg.iterations == 0) {
                estimates.row(rep) = sampler.beta_tilde().col(0).transpose();
            } else {
                PosteriorDraws draws = sampler.run();
                estimates.row(rep) = draws.beta_tilde[0].colwise().mean();
            }
            ok[rep] = 1;
        } catch (const std::exception& e) {
            errors[rep] = e.what();
        }
    };

    if (threads <= 1) {
        for (int rep = 0; rep < n_reps; ++rep) run_one(rep);
    } else {
        std::vector<std::thread> pool;
        std::atomic<int> next{0};
        const int nt = std::min(threads, n_reps);
        for (int w = 0; w < nt; ++w)
            pool.emplace_back([&] {
                for (;;) {
                    const int rep = next.fetch_add(1);
                    if (rep >= n_reps) return;
                    run_one(rep);
                }
            });
        for (auto& t : pool) t.join();
    }

    out.estimates.resize(0, s_count);
    out.mean_estimate = Eigen::VectorXd::Zero(s_count);
    out.mse = Eigen::VectorXd::Zero(s_count);
    for (int rep = 0; rep < n_reps; ++rep) {
        if (!ok[rep]) {
            ++out.failed;
            out.failures.push_back("rep " + std::to_string(rep) + ": " + errors[rep]);
            continue;
        }
        out.estimates.conservativeResize(out.estimates.rows() + 1, Eigen::NoChange);
        out.estimates.row(out.estimates.rows() - 1) = estimates.row(rep);
        out.mean_estimate += estimates.row(rep).transpose();
        out.mse += (estimates.row(rep).transpose() - out.truth).array().square().matrix();
        ++out.completed;
    }
    if (out.completed > 0) {
        out.mean_estimate /= out.completed;
        out.mse /= out.completed;
    }
    out.bias = out.mean_estimate - out.truth;
    return out;
}

}  // namespace stbreg
