#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <vector>

#include <Eigen/Dense>

#include "stbreg/rng.hpp"
#include "stbreg/spatial.hpp"

using namespace stbreg;
using Catch::Approx;

namespace {

std::vector<std::vector<int>> lattice_neighbors(int rows, int cols, bool queen) {
    std::vector<std::pair<int, int>> pairs;
    auto idx = [cols](int i, int j) { return i * cols + j; };
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j)
            for (int di = -1; di <= 1; ++di)
                for (int dj = -1; dj <= 1; ++dj) {
                    if (di == 0 && dj == 0) continue;
                    if (!queen && di != 0 && dj != 0) continue;
                    const int ni = i + di, nj = j + dj;
                    if (ni < 0 || ni >= rows || nj < 0 || nj >= cols) continue;
                    pairs.emplace_back(idx(i, j), idx(ni, nj));
                }
    return neighbor_lists(rows * cols, pairs);
}

Eigen::VectorXd degrees_of(const std::vector<std::vector<int>>& nbrs) {
    Eigen::VectorXd d(static_cast<Eigen::Index>(nbrs.size()));
    for (std::size_t s = 0; s < nbrs.size(); ++s) d[static_cast<Eigen::Index>(s)] = nbrs[s].size();
    return d;
}

}  // namespace

TEST_CASE("powered exponential correlation") {
    REQUIRE(powered_exp_corr(0.6, 0.0) == 1.0);
    REQUIRE(powered_exp_corr(0.6, 1.0) == Approx(0.6));
    const double oracle = 0.6 * 0.6 * 0.6 * 0.6;  // theta^(2^2) evaluated directly
    REQUIRE(powered_exp_corr(0.6, 2.0) == Approx(oracle).epsilon(1e-14));
    REQUIRE(oracle == Approx(0.1296));
    REQUIRE_THROWS_AS(powered_exp_corr(1.0, 1.0), std::invalid_argument);
    REQUIRE_THROWS_AS(powered_exp_corr(0.0, 1.0), std::invalid_argument);
    REQUIRE_THROWS_AS(powered_exp_corr(0.5, -1.0), std::invalid_argument);
}

TEST_CASE("correlation matrices: structure and positive definiteness") {
    REQUIRE(corr_matrix({{0, 0}}, 0.5)(0, 0) == 1.0);

    const Eigen::MatrixXd two = corr_matrix({{0, 0}, {1, 0}}, 0.6);
    REQUIRE(two(0, 1) == Approx(0.6));
    REQUIRE(two(1, 0) == Approx(0.6));
    REQUIRE(two(0, 0) == 1.0);

    const Eigen::MatrixXd three = corr_matrix({{0, 0}, {1, 0}, {2, 0}}, 0.6);
    REQUIRE(three(0, 1) == Approx(0.6));
    REQUIRE(three(0, 2) == Approx(0.1296));
    REQUIRE(three(1, 2) == Approx(0.6));
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(three);
    REQUIRE(eig.eigenvalues().minCoeff() > 0.0);
}

TEST_CASE("correlation matrices stay symmetric with unit diagonal (random locations)") {
    RngStream rng(21);
    std::vector<Point> locs;
    for (int i = 0; i < 30; ++i) locs.push_back({rng.uniform(0, 10), rng.uniform(0, 10)});
    const Eigen::MatrixXd r = corr_matrix(locs, 0.8);
    for (int i = 0; i < r.rows(); ++i) {
        REQUIRE(r(i, i) == 1.0);
        for (int j = 0; j < r.cols(); ++j) {
            REQUIRE(r(i, j) == r(j, i));
            REQUIRE(r(i, j) > 0.0);
            REQUIRE(r(i, j) <= 1.0);
        }
    }
}

TEST_CASE("jitter policy rescues nearly coincident locations") {
    const Eigen::MatrixXd r = corr_matrix({{0, 0}, {0, 0}}, 0.6);
    const CholeskyResult c = chol_with_jitter(r);
    REQUIRE(c.jittered);
}

TEST_CASE("kriging with knots equal to locations is the identity") {
    std::vector<Point> locs = {{0, 0}, {1.3, 0.2}, {0.4, 2.0}, {2.2, 1.1}};
    const Eigen::MatrixXd r = corr_matrix(locs, 0.6);
    const Eigen::MatrixXd t = kriging_operator(r, r);
    REQUIRE((t - Eigen::MatrixXd::Identity(4, 4)).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("kriging with a single knot is the cross-correlation column") {
    std::vector<Point> locs = {{0, 0}, {1, 0}, {2, 0}};
    std::vector<Point> knot = {{0.5, 0.0}};
    const Eigen::MatrixXd cross = cross_corr_matrix(locs, knot, 0.7);
    const Eigen::MatrixXd t = kriging_operator(corr_matrix(knot, 0.7), cross);
    for (int i = 0; i < 3; ++i) REQUIRE(t(i, 0) == Approx(cross(i, 0)));
}

TEST_CASE("kriging matches per-row 2x2 solves") {
    std::vector<Point> locs = {{0, 0}, {1, 1}, {3, 0}};
    std::vector<Point> knots = {{0.5, 0.5}, {2.5, 0.5}};
    const double theta = 0.55;
    const Eigen::MatrixXd rk = corr_matrix(knots, theta);
    const Eigen::MatrixXd cross = cross_corr_matrix(locs, knots, theta);
    const Eigen::MatrixXd t = kriging_operator(rk, cross);
    // Cramer's rule oracle, row by row: T row solves R* x = cross_row
    const double det = rk(0, 0) * rk(1, 1) - rk(0, 1) * rk(1, 0);
    for (int i = 0; i < 3; ++i) {
        const double b0 = cross(i, 0), b1 = cross(i, 1);
        const double x0 = (b0 * rk(1, 1) - rk(0, 1) * b1) / det;
        const double x1 = (rk(0, 0) * b1 - b0 * rk(1, 0)) / det;
        REQUIRE(t(i, 0) == Approx(x0).margin(1e-12));
        REQUIRE(t(i, 1) == Approx(x1).margin(1e-12));
    }
}

TEST_CASE("k-means with k equal to the location count returns the locations") {
    std::vector<Point> locs = {{0, 0}, {1, 0}, {0, 1}, {5, 5}};
    const KnotSet k = kmeans_knots(locs, 4, 7);
    REQUIRE(k.locations.size() == 4);
    for (const auto& loc : locs) {
        bool found = false;
        for (const auto& c : k.locations)
            if (c.x == loc.x && c.y == loc.y) found = true;
        REQUIRE(found);
    }
}

TEST_CASE("k-means separates two well-separated clouds into their means") {
    std::vector<Point> locs;
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j) {
            locs.push_back({static_cast<double>(i), static_cast<double>(j)});
            locs.push_back({100.0 + i, 50.0 + j});
        }
    const KnotSet k = kmeans_knots(locs, 2, 3);
    REQUIRE(k.locations.size() == 2);
    std::vector<Point> got = k.locations;
    std::sort(got.begin(), got.end(), [](const Point& a, const Point& b) { return a.x < b.x; });
    REQUIRE(got[0].x == Approx(0.5).margin(1e-12));   // analytic mean of cloud A
    REQUIRE(got[0].y == Approx(0.5).margin(1e-12));
    REQUIRE(got[1].x == Approx(100.5).margin(1e-12)); // analytic mean of cloud B
    REQUIRE(got[1].y == Approx(50.5).margin(1e-12));
}

TEST_CASE("k-means with k=1 returns the grand mean") {
    std::vector<Point> locs = {{0, 0}, {2, 0}, {0, 2}, {2, 2}, {1, 1}};
    const KnotSet k = kmeans_knots(locs, 1, 11);
    REQUIRE(k.locations.size() == 1);
    REQUIRE(k.locations[0].x == Approx(1.0).margin(1e-12));
    REQUIRE(k.locations[0].y == Approx(1.0).margin(1e-12));
}

TEST_CASE("k-means is bit-reproducible for a fixed seed and rejects k > distinct") {
    RngStream rng(22);
    std::vector<Point> locs;
    for (int i = 0; i < 40; ++i) locs.push_back({rng.uniform(0, 10), rng.uniform(0, 10)});
    const KnotSet a = kmeans_knots(locs, 7, 123);
    const KnotSet b = kmeans_knots(locs, 7, 123);
    REQUIRE(a.locations.size() == b.locations.size());
    for (std::size_t i = 0; i < a.locations.size(); ++i) {
        REQUIRE(a.locations[i].x == b.locations[i].x);
        REQUIRE(a.locations[i].y == b.locations[i].y);
    }
    std::vector<Point> dup = {{0, 0}, {0, 0}, {1, 1}};
    REQUIRE_THROWS_AS(kmeans_knots(dup, 3, 1), std::invalid_argument);
}

TEST_CASE("CAR precision of two adjacent regions") {
    const auto nbrs = neighbor_lists(2, {{0, 1}, {1, 0}});
    const Eigen::MatrixXd a = Eigen::MatrixXd(car_precision(nbrs, degrees_of(nbrs), 0.5, 1.0));
    REQUIRE(a(0, 0) == Approx(1.0));
    REQUIRE(a(1, 1) == Approx(1.0));
    REQUIRE(a(0, 1) == Approx(-0.5));
    REQUIRE(a(1, 0) == Approx(-0.5));
}

TEST_CASE("isolated regions get the guarded unit diagonal") {
    // raw D - omega W would put a zero on the isolated diagonal
    const auto nbrs = neighbor_lists(3, {{0, 1}, {1, 0}});
    REQUIRE(nbrs[2].empty());
    const double tau_sq = 2.0;
    const Eigen::MatrixXd a = Eigen::MatrixXd(car_precision(nbrs, degrees_of(nbrs), 0.9, tau_sq));
    REQUIRE(a(2, 2) == Approx(1.0 / tau_sq));
    REQUIRE(a(2, 0) == 0.0);
    REQUIRE(a(2, 1) == 0.0);
}

TEST_CASE("tau^2 = 0.005 scales every entry by 200") {
    const auto nbrs = lattice_neighbors(2, 2, false);
    const Eigen::MatrixXd base = Eigen::MatrixXd(car_precision(nbrs, degrees_of(nbrs), 0.9, 1.0));
    const Eigen::MatrixXd scaled = Eigen::MatrixXd(car_precision(nbrs, degrees_of(nbrs), 0.9, 0.005));
    REQUIRE((scaled - 200.0 * base).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("CAR precision is symmetric and positive definite on connected graphs") {
    for (double omega : {0.5, 0.9, 0.99}) {
        for (const auto& nbrs : {lattice_neighbors(3, 3, true), lattice_neighbors(1, 10, false)}) {
            const Eigen::MatrixXd a =
                Eigen::MatrixXd(car_precision(nbrs, degrees_of(nbrs), omega, 0.7));
            REQUIRE((a - a.transpose()).cwiseAbs().maxCoeff() < 1e-14);
            const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(a);
            REQUIRE(eig.eigenvalues().minCoeff() > 0.0);
        }
    }
}

TEST_CASE("greedy coloring: edgeless graph takes one class") {
    const auto classes = greedy_coloring(std::vector<std::vector<int>>(5));
    REQUIRE(classes.size() == 1);
    REQUIRE(classes[0].size() == 5);
}

TEST_CASE("greedy coloring: path of three gets colors (0,1,0)") {
    const auto nbrs = neighbor_lists(3, {{0, 1}, {1, 0}, {1, 2}, {2, 1}});
    const auto classes = greedy_coloring(nbrs);
    REQUIRE(classes.size() == 2);
    REQUIRE(classes[0] == std::vector<int>{0, 2});
    REQUIRE(classes[1] == std::vector<int>{1});
}

TEST_CASE("greedy coloring: 3x3 queen lattice needs four classes, all valid") {
    const auto nbrs = lattice_neighbors(3, 3, true);
    const auto classes = greedy_coloring(nbrs);
    REQUIRE(classes.size() == 4);
    int covered = 0;
    for (const auto& cls : classes) {
        covered += static_cast<int>(cls.size());
        for (int a : cls)
            for (int b : cls) {
                if (a == b) continue;
                // brute-force validity: no adjacent pair shares a class
                REQUIRE(std::find(nbrs[a].begin(), nbrs[a].end(), b) == nbrs[a].end());
            }
    }
    REQUIRE(covered == 9);
}

TEST_CASE("color classes are independent sets on random graphs") {
    RngStream rng(23);
    for (int round = 0; round < 10; ++round) {
        const int n = 50 + static_cast<int>(rng.uniform_int(0, 150));
        std::vector<std::pair<int, int>> pairs;
        for (int i = 0; i < n; ++i)
            for (int j = i + 1; j < n; ++j)
                if (rng.uniform() < 0.05) {
                    pairs.emplace_back(i, j);
                    pairs.emplace_back(j, i);
                }
        const auto nbrs = neighbor_lists(n, pairs);
        const auto classes = greedy_coloring(nbrs);
        std::vector<int> seen(n, 0);
        for (const auto& cls : classes)
            for (int a : cls) {
                ++seen[a];
                for (int b : nbrs[a])
                    REQUIRE(std::find(cls.begin(), cls.end(), b) == cls.end());
            }
        for (int s : seen) REQUIRE(s == 1);  // classes partition the vertices
    }
}

TEST_CASE("Moran's I rejects constant input") {
    const auto nbrs = lattice_neighbors(2, 2, false);
    REQUIRE_THROWS_AS(morans_i(Eigen::VectorXd::Constant(4, 3.0), nbrs), std::runtime_error);
}

TEST_CASE("Moran's I of a rook checkerboard is -1") {
    // regions (0,0),(1,0),(0,1),(1,1) with rook edges; +1/-1 checkerboard
    const auto nbrs = neighbor_lists(4, {{0, 1}, {1, 0}, {0, 2}, {2, 0}, {1, 3}, {3, 1}, {2, 3}, {3, 2}});
    Eigen::VectorXd x(4);
    x << 1.0, -1.0, -1.0, 1.0;
    REQUIRE(morans_i(x, nbrs) == Approx(-1.0).margin(1e-14));
}

TEST_CASE("Moran's I matches an independent double-loop oracle") {
    const auto nbrs = lattice_neighbors(5, 5, false);
    const int n = 25;
    Eigen::MatrixXd w = Eigen::MatrixXd::Zero(n, n);
    for (int i = 0; i < n; ++i)
        for (int j : nbrs[i]) w(i, j) = 1.0;
    RngStream rng(24);
    for (int round = 0; round < 50; ++round) {
        Eigen::VectorXd x(n);
        for (int i = 0; i < n; ++i) x[i] = rng.normal();
        const double xbar = x.mean();
        double num = 0.0, den = 0.0, wsum = 0.0;
        for (int i = 0; i < n; ++i) {
            den += (x[i] - xbar) * (x[i] - xbar);
            for (int j = 0; j < n; ++j) {
                num += w(i, j) * (x[i] - xbar) * (x[j] - xbar);
                wsum += w(i, j);
            }
        }
        const double oracle = (n / wsum) * num / den;
        REQUIRE(morans_i(x, nbrs) == Approx(oracle).margin(1e-12));
    }
}
