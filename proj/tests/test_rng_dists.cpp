#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <thread>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include "stbreg/distributions.hpp"
#include "stbreg/rng.hpp"
#include "testutil.hpp"

using namespace stbreg;
using Catch::Approx;

TEST_CASE("streams with identical keys are bit-identical, distinct keys differ") {
    RngStream a(42, StreamKey{1, 7, 3});
    RngStream b(42, StreamKey{1, 7, 3});
    for (int i = 0; i < 1000; ++i) REQUIRE(a.next_u64() == b.next_u64());

    RngStream c(42, StreamKey{1, 7, 4});
    RngStream d(42, StreamKey{1, 8, 3});
    RngStream e(43, StreamKey{1, 7, 3});
    RngStream base(42, StreamKey{1, 7, 3});
    const std::uint64_t first = base.next_u64();
    REQUIRE(c.next_u64() != first);
    REQUIRE(d.next_u64() != first);
    REQUIRE(e.next_u64() != first);
}

TEST_CASE("stream draws are independent of the executing thread") {
    std::vector<double> from_main(100), from_thread(100);
    {
        RngStream r(9, StreamKey{0, 5, 11});
        for (auto& x : from_main) x = r.normal();
    }
    std::thread t([&] {
        RngStream r(9, StreamKey{0, 5, 11});
        for (auto& x : from_thread) x = r.normal();
    });
    t.join();
    REQUIRE(from_main == from_thread);
}

TEST_CASE("uniform and uniform_int respect their ranges") {
    RngStream rng(1);
    std::vector<int> counts(6, 0);
    for (int i = 0; i < 60000; ++i) {
        const double u = rng.uniform();
        REQUIRE(u >= 0.0);
        REQUIRE(u < 1.0);
        ++counts[rng.uniform_int(0, 5)];
    }
    for (int c : counts) REQUIRE(c > 9000);  // ~10000 expected per bucket
}

TEST_CASE("normal and gamma moments") {
    RngStream rng(2);
    std::vector<double> z(200000);
    for (auto& x : z) x = rng.normal();
    REQUIRE(testutil::mean(z) == Approx(0.0).margin(0.01));
    REQUIRE(testutil::variance(z) == Approx(1.0).margin(0.02));

    std::vector<double> g(200000);
    for (auto& x : g) x = rng.gamma(3.0);
    REQUIRE(testutil::mean(g) == Approx(3.0).margin(0.03));
    REQUIRE(testutil::variance(g) == Approx(3.0).margin(0.1));

    std::vector<double> h(200000);
    for (auto& x : h) x = rng.gamma(0.5);  // boosted branch
    REQUIRE(testutil::mean(h) == Approx(0.5).margin(0.01));

    std::vector<double> be(100000);
    for (auto& x : be) x = rng.beta(2.0, 3.0);
    REQUIRE(testutil::mean(be) == Approx(0.4).margin(0.005));
}

TEST_CASE("norm_quantile inverts norm_cdf") {
    for (double x = -8.0; x <= 5.0; x += 0.173) {
        const double p = norm_cdf(x);
        REQUIRE(norm_quantile(p) == Approx(x).margin(1e-9));
    }
    REQUIRE(norm_quantile(0.5) == Approx(0.0).margin(1e-15));
}

// ---------------------------------------------------------------------------
// Polya-Gamma
// ---------------------------------------------------------------------------

TEST_CASE("PG(1,0) empirical mean matches the tanh-limit 1/4") {
    RngStream rng(3);
    std::vector<double> d(100000);
    for (auto& x : d) x = sample_pg(1, 0.0, rng);
    REQUIRE(testutil::mean(d) == Approx(0.25).margin(0.005));
    REQUIRE(testutil::variance(d) == Approx(1.0 / 24.0).epsilon(0.05));
}

TEST_CASE("PG(10,2) empirical mean matches the closed-form identity") {
    RngStream rng(4);
    std::vector<double> d(100000);
    for (auto& x : d) x = sample_pg(10, 2.0, rng);
    const double expected = 10.0 * std::tanh(1.0) / 4.0;  // 1.90399...
    REQUIRE(testutil::mean(d) == Approx(expected).epsilon(0.02));
}

TEST_CASE("PG(2,0) behaves as the sum of two PG(1,0) draws") {
    RngStream rng(5);
    std::vector<double> d(100000);
    for (auto& x : d) x = sample_pg(2, 0.0, rng);
    REQUIRE(testutil::mean(d) == Approx(0.5).epsilon(0.01));
}

TEST_CASE("PG mean law over a (b,c) grid within three standard errors") {
    int idx = 0;
    for (double b : {1.0, 2.0, 5.0}) {
        for (double c : {0.0, 1.0, 3.0}) {
            RngStream rng(6, StreamKey{0, 0, static_cast<std::uint64_t>(idx++)});
            const int n = 100000;
            double s = 0.0;
            for (int i = 0; i < n; ++i) s += sample_pg(b, c, rng);
            const double m = s / n;
            const double se = std::sqrt(pg_variance(b, c) / n);
            INFO("b=" << b << " c=" << c);
            REQUIRE(std::abs(m - pg_mean(b, c)) < 3.0 * se);
        }
    }
}

TEST_CASE("pg_variance matches the spread of summed exact draws") {
    RngStream rng(7);
    std::vector<double> d(100000);
    for (auto& x : d) x = sample_pg(30, 2.0, rng);  // exact path (30 <= 50)
    REQUIRE(testutil::variance(d) == Approx(pg_variance(30, 2.0)).epsilon(0.05));
    // series and closed form agree where they hand over
    REQUIRE(pg_variance(1, 0.4999999) == Approx(pg_variance(1, 0.5000001)).epsilon(1e-5));
}

TEST_CASE("large-b draws switch to the moment-matched approximation") {
    RngStream rng(8);
    std::vector<double> d(50000);
    for (auto& x : d) x = sample_pg(200, 1.0, rng);
    REQUIRE(testutil::mean(d) == Approx(pg_mean(200, 1.0)).epsilon(0.01));
    REQUIRE(testutil::variance(d) == Approx(pg_variance(200, 1.0)).epsilon(0.05));
    for (double x : d) REQUIRE(x > 0.0);
}

TEST_CASE("sample_pg rejects non-integer or sub-one b") {
    RngStream rng(9);
    REQUIRE_THROWS_AS(sample_pg(0.5, 0.0, rng), std::invalid_argument);
    REQUIRE_THROWS_AS(sample_pg(2.5, 0.0, rng), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Multivariate normal by precision
// ---------------------------------------------------------------------------

TEST_CASE("identity precision with zero shift gives standard normals") {
    RngStream rng(10);
    const Eigen::MatrixXd q = Eigen::MatrixXd::Identity(3, 3);
    const Eigen::VectorXd rhs = Eigen::VectorXd::Zero(3);
    std::vector<double> first(100000);
    for (auto& x : first) x = sample_mvn_prec(rhs, q, rng)[0];
    REQUIRE(testutil::mean(first) == Approx(0.0).margin(0.01));
    REQUIRE(testutil::variance(first) == Approx(1.0).epsilon(0.02));
}

TEST_CASE("scalar precision 4 with rhs 8 gives mean 2, sd 1/2") {
    RngStream rng(11);
    Eigen::MatrixXd q(1, 1);
    q << 4.0;
    Eigen::VectorXd rhs(1);
    rhs << 8.0;
    std::vector<double> d(100000);
    for (auto& x : d) x = sample_mvn_prec(rhs, q, rng)[0];
    REQUIRE(testutil::mean(d) == Approx(2.0).margin(0.01));
    REQUIRE(std::sqrt(testutil::variance(d)) == Approx(0.5).epsilon(0.02));
}

TEST_CASE("2x2 sample covariance converges to the inverse precision") {
    RngStream rng(12);
    Eigen::MatrixXd q(2, 2);
    q << 2.0, -0.5, -0.5, 1.0;
    const Eigen::MatrixXd cov_true = q.inverse();  // closed-form 2x2 oracle
    const Eigen::VectorXd rhs = Eigen::VectorXd::Zero(2);
    const int n = 100000;
    Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(2, 2);
    Eigen::VectorXd msum = Eigen::VectorXd::Zero(2);
    std::vector<Eigen::VectorXd> draws(n);
    for (auto& x : draws) {
        x = sample_mvn_prec(rhs, q, rng);
        msum += x;
    }
    const Eigen::VectorXd m = msum / n;
    for (const auto& x : draws) sum += (x - m) * (x - m).transpose();
    const Eigen::MatrixXd cov = sum / (n - 1);
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j)
            REQUIRE(cov(i, j) == Approx(cov_true(i, j)).margin(0.02 * cov_true(0, 0)));
}

TEST_CASE("sparse precision sampler matches the dense inverse on 3x3") {
    std::vector<Eigen::Triplet<double>> trips = {
        {0, 0, 3.0}, {1, 1, 2.5}, {2, 2, 2.0}, {0, 1, -1.0}, {1, 0, -1.0},
        {1, 2, -0.7}, {2, 1, -0.7}};
    Eigen::SparseMatrix<double> q(3, 3);
    q.setFromTriplets(trips.begin(), trips.end());
    Eigen::SimplicialLLT<Eigen::SparseMatrix<double>> llt(q);
    REQUIRE(llt.info() == Eigen::Success);

    Eigen::VectorXd rhs(3);
    rhs << 1.0, -2.0, 0.5;
    const Eigen::MatrixXd cov_true = Eigen::MatrixXd(q).inverse();
    const Eigen::VectorXd mean_true = cov_true * rhs;

    RngStream rng(13);
    const int n = 200000;
    Eigen::VectorXd msum = Eigen::VectorXd::Zero(3);
    std::vector<Eigen::VectorXd> draws(n);
    for (auto& x : draws) {
        x = sample_mvn_prec(rhs, llt, rng);
        msum += x;
    }
    const Eigen::VectorXd m = msum / n;
    Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(3, 3);
    for (const auto& x : draws) sum += (x - m) * (x - m).transpose();
    const Eigen::MatrixXd cov = sum / (n - 1);
    for (int i = 0; i < 3; ++i) {
        REQUIRE(m[i] == Approx(mean_true[i]).margin(0.01));
        for (int j = 0; j < 3; ++j)
            REQUIRE(cov(i, j) == Approx(cov_true(i, j)).margin(0.02));
    }
}

// ---------------------------------------------------------------------------
// Truncated normal
// ---------------------------------------------------------------------------

TEST_CASE("truncated normal draws never leave their bounds") {
    RngStream rng(14);
    for (int i = 0; i < 100000; ++i) {
        const double x = sample_truncnorm(0.0, 10.0, -1.0, 1.0, rng);
        REQUIRE(x > -1.0);
        REQUIRE(x < 1.0);
    }
}

TEST_CASE("wide symmetric truncation keeps the mean at zero") {
    RngStream rng(15);
    std::vector<double> d(100000);
    for (auto& x : d) x = sample_truncnorm(0.0, 10.0, -1.0, 1.0, rng);
    REQUIRE(testutil::mean(d) == Approx(0.0).margin(0.01));
}

TEST_CASE("far-off mean pushes draws against the near bound") {
    // exact truncated mean: mu + sd*(phi(a)-phi(b))/Z with a=-6, b=-4
    const auto phi = [](double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI); };
    const double z = norm_cdf(-4.0) - norm_cdf(-6.0);
    const double oracle_mean = 5.0 + (phi(-6.0) - phi(-4.0)) / z;  // ~0.774
    RngStream rng(16);
    std::vector<double> d(20000);
    for (auto& x : d) {
        x = sample_truncnorm(5.0, 1.0, -1.0, 1.0, rng);
        REQUIRE(x > -1.0);
        REQUIRE(x < 1.0);
    }
    REQUIRE(testutil::mean(d) == Approx(oracle_mean).margin(0.01));
}

TEST_CASE("standard normal on (-1,1): variance matches the formula oracle") {
    // var = 1 + (a phi(a) - b phi(b))/Z - ((phi(a) - phi(b))/Z)^2
    const double a = -1.0, b = 1.0;
    const auto phi = [](double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI); };
    const double z = norm_cdf(b) - norm_cdf(a);
    const double ratio = (phi(a) - phi(b)) / z;
    const double oracle = 1.0 + (a * phi(a) - b * phi(b)) / z - ratio * ratio;
    REQUIRE(oracle == Approx(0.29112).margin(1e-4));  // frozen from the oracle

    RngStream rng(17);
    std::vector<double> d(100000);
    for (auto& x : d) x = sample_truncnorm(0.0, 1.0, -1.0, 1.0, rng);
    REQUIRE(testutil::variance(d) == Approx(oracle).margin(0.005));
}

TEST_CASE("extreme-tail truncation still produces in-bound draws") {
    RngStream rng(18);
    for (int i = 0; i < 5000; ++i) {
        const double x = sample_truncnorm(0.0, 1.0, 9.0, 10.0, rng);
        REQUIRE(x >= 9.0);
        REQUIRE(x <= 10.0);
        const double y = sample_truncnorm(0.0, 1.0, -10.0, -9.0, rng);
        REQUIRE(y >= -10.0);
        REQUIRE(y <= -9.0);
    }
    REQUIRE_THROWS_AS(sample_truncnorm(0.0, 1.0, 1.0, 1.0, rng), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Inverse gamma
// ---------------------------------------------------------------------------

TEST_CASE("inverse gamma means follow rate/(shape-1)") {
    RngStream rng(19);
    std::vector<double> d(100000);
    for (auto& x : d) x = sample_invgamma(2.0, 2.0, rng);
    REQUIRE(testutil::mean(d) == Approx(2.0).epsilon(0.03));

    for (auto& x : d) x = sample_invgamma(3.0, 1.0, rng);
    REQUIRE(testutil::mean(d) == Approx(0.5).epsilon(0.03));
}

TEST_CASE("reciprocals of inverse-gamma draws are gamma distributed") {
    RngStream rng(20);
    std::vector<double> d(100000);
    for (auto& x : d) x = 1.0 / sample_invgamma(3.0, 2.0, rng);
    REQUIRE(testutil::mean(d) == Approx(3.0 / 2.0).epsilon(0.02));
    REQUIRE_THROWS_AS(sample_invgamma(-1.0, 1.0, rng), std::invalid_argument);
    REQUIRE_THROWS_AS(sample_invgamma(1.0, 0.0, rng), std::invalid_argument);
}
