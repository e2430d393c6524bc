#pragma once

// Core domain types for the spatio-temporal binomial regression model and
// the dataset validation that every downstream stage relies on.

#include <cmath>
#include <cstdint>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace stbreg {

struct Point {
    double x = 0.0;
    double y = 0.0;
};

inline double squared_distance(const Point& a, const Point& b) {
    const double dx = a.x - b.x;
    const double dy = a.y - b.y;
    return dx * dx + dy * dy;
}

inline double distance(const Point& a, const Point& b) {
    return std::sqrt(squared_distance(a, b));
}

struct Region {
    std::string id;
    Point centroid;
};

// One observed (region, time) cell. Times are 1-based and contiguous up to
// the dataset horizon; calendar labels live in the I/O layer only.
struct Cell {
    int region = 0;
    int time = 1;
    std::int64_t successes = 0;
    std::int64_t trials = 0;
    std::vector<double> z;  // global covariates (intercept excluded)
    std::vector<double> x;  // spatially varying covariates
};

// Observed cells only; memory stays proportional to the observed index set,
// not S*T.
struct Dataset {
    std::vector<Region> regions;
    int horizon = 0;
    std::vector<Cell> cells;
    std::vector<std::pair<int, int>> adjacency;  // directed pairs, expected symmetric
};

struct HyperParams {
    double sigma_delta_sq = 1000.0;
    double a_sigma = 2.0;
    double b_sigma = 2.0;
    std::vector<double> a_sigma_p;  // optional per-coefficient overrides
    std::vector<double> b_sigma_p;
    double a_tau = 2.0;
    double b_tau = 2.0;
    double a_omega = 900.0;
    double b_omega = 100.0;
    double sigma_zeta_sq = 10.0;
    double theta_lo = 0.0;
    double theta_hi = 1.0;

    double a_sigma_for(int p) const {
        return p < static_cast<int>(a_sigma_p.size()) ? a_sigma_p[p] : a_sigma;
    }
    double b_sigma_for(int p) const {
        return p < static_cast<int>(b_sigma_p.size()) ? b_sigma_p[p] : b_sigma;
    }
};

// The intercept is always present and owned by delta, so datasets supply
// only the num_global non-constant covariates.
struct ModelSpec {
    int num_global = 0;
    int num_varying = 0;
    std::vector<int> knots_per_surface;
    HyperParams priors;
};

// One full MCMC state, owned by a single chain.
struct LatentState {
    Eigen::VectorXd delta;                    // length num_global + 1
    std::vector<Eigen::VectorXd> beta_star;   // per varying coefficient
    std::vector<double> sigma_sq;
    std::vector<double> theta;
    Eigen::MatrixXd xi;                       // S x T
    Eigen::VectorXd psi;                      // per observed cell
    double tau_sq = 1.0;
    double omega = 0.5;
    double zeta = 0.0;
};

inline double logistic(double v) {
    if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
}

class ValidationError : public std::runtime_error {
public:
    explicit ValidationError(std::vector<std::string> issues)
        : std::runtime_error(join(issues)), issues_(std::move(issues)) {}

    const std::vector<std::string>& issues() const { return issues_; }

private:
    static std::string join(const std::vector<std::string>& issues) {
        std::ostringstream os;
        os << "dataset validation failed (" << issues.size() << " issue"
           << (issues.size() == 1 ? "" : "s") << "):";
        for (const auto& s : issues) os << "\n  - " << s;
        return os.str();
    }
    std::vector<std::string> issues_;
};

// Checks every structural invariant and reports all violations at once.
// Idempotent: an accepted dataset passes through unchanged.
inline Dataset validate_dataset(Dataset raw) {
    std::vector<std::string> issues;
    const int s_count = static_cast<int>(raw.regions.size());

    if (s_count == 0) issues.push_back("dataset has no regions");
    if (raw.horizon < 1) issues.push_back("horizon must be >= 1");

    std::unordered_set<std::string> ids;
    for (int s = 0; s < s_count; ++s) {
        const Region& r = raw.regions[s];
        if (!ids.insert(r.id).second)
            issues.push_back("duplicate region id '" + r.id + "' at index " + std::to_string(s));
        if (!std::isfinite(r.centroid.x) || !std::isfinite(r.centroid.y))
            issues.push_back("non-finite centroid for region '" + r.id + "'");
    }

    std::set<std::pair<int, int>> seen;
    std::size_t q_len = raw.cells.empty() ? 0 : raw.cells.front().z.size();
    std::size_t p_len = raw.cells.empty() ? 0 : raw.cells.front().x.size();
    for (std::size_t i = 0; i < raw.cells.size(); ++i) {
        const Cell& c = raw.cells[i];
        const std::string at = "(" + std::to_string(c.region) + "," + std::to_string(c.time) + ")";
        if (c.region < 0 || c.region >= s_count)
            issues.push_back("region index out of range at cell " + at);
        if (c.time < 1 || c.time > raw.horizon)
            issues.push_back("time index out of range at cell " + at);
        if (c.trials < 1) issues.push_back("n must be >= 1 at " + at);
        if (c.successes < 0) issues.push_back("y must be >= 0 at " + at);
        if (c.successes > c.trials) issues.push_back("y exceeds n at " + at);
        if (!seen.insert({c.region, c.time}).second)
            issues.push_back("duplicate cell at " + at);
        if (c.z.size() != q_len)
            issues.push_back("inconsistent global covariate count at " + at);
        if (c.x.size() != p_len)
            issues.push_back("inconsistent varying covariate count at " + at);
        for (double v : c.z)
            if (!std::isfinite(v)) issues.push_back("non-finite global covariate at " + at);
        for (double v : c.x)
            if (!std::isfinite(v)) issues.push_back("non-finite varying covariate at " + at);
    }

    std::set<std::pair<int, int>> edges(raw.adjacency.begin(), raw.adjacency.end());
    for (const auto& [a, b] : edges) {
        if (a < 0 || a >= s_count || b < 0 || b >= s_count) {
            issues.push_back("adjacency index out of range: (" + std::to_string(a) + "," +
                             std::to_string(b) + ")");
            continue;
        }
        if (a == b)
            issues.push_back("self-adjacency at region index " + std::to_string(a));
        else if (!edges.count({b, a}))
            issues.push_back("asymmetric adjacency: (" + std::to_string(a) + "," +
                             std::to_string(b) + ") present without its mirror");
    }

    if (!issues.empty()) throw ValidationError(std::move(issues));
    return raw;
}

// Sorted, deduplicated neighbor lists from a validated adjacency.
inline std::vector<std::vector<int>> neighbor_lists(int n_regions,
                                                    const std::vector<std::pair<int, int>>& adjacency) {
    std::vector<std::set<int>> sets(n_regions);
    for (const auto& [a, b] : adjacency) {
        if (a == b) continue;
        sets[a].insert(b);
        sets[b].insert(a);
    }
    std::vector<std::vector<int>> out(n_regions);
    for (int s = 0; s < n_regions; ++s) out[s].assign(sets[s].begin(), sets[s].end());
    return out;
}

}  // namespace stbreg
