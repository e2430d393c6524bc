#pragma once

// The MCMC machine: Polya-Gamma augmentation, Gaussian full conditionals for
// the regression blocks, conjugate variance updates, Metropolis-Hastings for
// the correlation parameters, and chromatic or block updates for the
// spatio-temporal effects.

#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <stdexcept>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>

#include "stbreg/distributions.hpp"
#include "stbreg/model.hpp"
#include "stbreg/parallel.hpp"
#include "stbreg/rng.hpp"
#include "stbreg/spatial.hpp"

namespace stbreg {

struct ChainConfig {
    int iterations = 10000;
    int burn_in = 5000;
    int thin = 1;
    bool chromatic_xi = true;
    int workers = 1;
    double theta_proposal_scale = 0.5;
    double omega_proposal_scale = 0.5;
    bool adapt_proposals = true;
    double target_accept = 0.44;
    std::uint64_t seed = 0;
    std::uint64_t chain_id = 0;
    int pg_exact_max = 50;
    bool store_xi = false;
};

// Covariates over the full S x T lattice, for predictor summaries and local
// trend slopes at unobserved cells. Row index is s * T + t (t zero-based).
struct TrendRequest {
    Eigen::VectorXd times;   // regression abscissa, length T
    Eigen::MatrixXd z_all;   // (S*T) x Q, intercept excluded
    Eigen::MatrixXd x_all;   // (S*T) x P
};

struct PosteriorDraws {
    int sample_count = 0;
    Eigen::MatrixXd delta;                     // G x (Q+1)
    std::vector<Eigen::MatrixXd> beta_star;    // per p: G x S*_p
    std::vector<Eigen::MatrixXd> beta_tilde;   // per p: G x S, kriged at draw time
    Eigen::MatrixXd sigma_sq;                  // G x P
    Eigen::MatrixXd theta;                     // G x P
    Eigen::VectorXd tau_sq, omega, zeta;       // G
    Eigen::MatrixXd slopes;                    // G x S when a trend was requested
    Eigen::MatrixXd nu_mean, nu_sd;            // S x T; NaN where unavailable
    std::vector<Eigen::MatrixXd> xi;           // raw retention, off by default
    std::vector<double> theta_accept_rate;
    double omega_accept_rate = 0.0;
    std::vector<double> theta_proposal_scale;  // frozen post-adaptation scales
    double omega_proposal_scale = 0.0;
};

namespace detail {

enum class UpdateBlock : std::uint64_t {
    init = 0,
    psi,
    delta,
    beta_star,
    sigma_sq,
    theta,
    xi,
    tau_sq,
    zeta,
    omega,
};

inline std::uint64_t block_key(UpdateBlock b, std::uint64_t index) {
    return (static_cast<std::uint64_t>(b) << 48) | index;
}

}  // namespace detail

class GibbsSampler {
public:
    GibbsSampler(Dataset data, ModelSpec spec, std::vector<KnotSet> knots, ChainConfig cfg)
        : data_(std::move(data)), spec_(spec), cfg_(cfg) {
        check_config();
        s_count_ = static_cast<int>(data_.regions.size());
        horizon_ = data_.horizon;
        n_cells_ = static_cast<int>(data_.cells.size());
        if (static_cast<int>(knots.size()) != spec_.num_varying)
            throw std::invalid_argument("GibbsSampler: one knot set per varying coefficient required");
        for (int p = 0; p < spec_.num_varying; ++p)
            if (p < static_cast<int>(spec_.knots_per_surface.size()) &&
                spec_.knots_per_surface[p] !=
                    static_cast<int>(knots[p].locations.size()))
                throw std::invalid_argument("GibbsSampler: knot set size disagrees with model spec");

        flatten_cells();
        const double theta_mid = 0.5 * (spec_.priors.theta_lo + spec_.priors.theta_hi);
        ops_ = SpatialOperators::build(data_, knots, std::vector<double>(spec_.num_varying, theta_mid));
        build_car_pattern();
        init_state(theta_mid);
        pool_ = std::make_unique<WorkerPool>(cfg_.workers);
        theta_lscale_.assign(spec_.num_varying, std::log(cfg_.theta_proposal_scale));
        omega_lscale_ = std::log(cfg_.omega_proposal_scale);
        theta_accept_.assign(spec_.num_varying, {0, 0});
        refresh_predictor_caches();
    }

    const Dataset& data() const { return data_; }
    const ModelSpec& model_spec() const { return spec_; }
    const SpatialOperators& operators() const { return ops_; }
    const LatentState& state() const { return st_; }

    // Replaces the chain state and refreshes every derived cache.
    void set_state(const LatentState& s) {
        check_state_dims(s);
        st_ = s;
        for (int p = 0; p < spec_.num_varying; ++p)
            ops_.rebuild_coefficient(p, st_.theta[p]);
        refresh_car_values();
        refresh_predictor_caches();
    }

    void set_iteration(std::uint64_t it) { iter_ = it; }
    std::uint64_t iteration() const { return iter_; }

    // Current per-cell linear predictor, in dataset cell order.
    Eigen::VectorXd cell_predictor() const {
        Eigen::VectorXd nu(n_cells_);
        for (int c = 0; c < n_cells_; ++c)
            nu[c] = nu_global_[c] + nu_varying_[c] + st_.xi(cell_region_[c], cell_time_[c]);
        return nu;
    }

    const Eigen::MatrixXd& beta_tilde() const { return beta_tilde_; }

    // --- full-conditional updates -----------------------------------------

    void update_psi() {
        auto body = [this](int begin, int end) {
            for (int c = begin; c < end; ++c) {
                RngStream rng = stream(detail::UpdateBlock::psi, c);
                const double nu = nu_global_[c] + nu_varying_[c] +
                                  st_.xi(cell_region_[c], cell_time_[c]);
                st_.psi[c] = sample_pg(cell_n_[c], nu, rng, cfg_.pg_exact_max);
            }
        };
        pool_->run(n_cells_, body);
    }

    void update_delta() {
        auto [rhs, prec] = delta_conditional();
        RngStream rng = stream(detail::UpdateBlock::delta, 0);
        st_.delta = sample_mvn_prec(rhs, prec, rng);
        nu_global_ = z_mat_ * st_.delta;
    }

    void update_beta_star(int p) {
        auto [rhs, prec] = beta_star_conditional(p);
        RngStream rng = stream(detail::UpdateBlock::beta_star, p);
        st_.beta_star[p] = sample_mvn_prec(rhs, prec, rng);
        refresh_beta_tilde(p);
    }

    void update_sigma_sq(int p) {
        auto [shape, rate] = sigma_sq_conditional(p);
        RngStream rng = stream(detail::UpdateBlock::sigma_sq, p);
        st_.sigma_sq[p] = sample_invgamma(shape, rate, rng);
    }

    // Random-walk MH on the logit of the normalized correlation parameter;
    // correlation caches are rebuilt only on acceptance.
    void update_theta(int p) {
        RngStream rng = stream(detail::UpdateBlock::theta, p);
        const double lo = spec_.priors.theta_lo, hi = spec_.priors.theta_hi;
        const double cur = st_.theta[p];
        const double v = (cur - lo) / (hi - lo);
        const double l = std::log(v / (1.0 - v));
        const double lprop = l + std::exp(theta_lscale_[p]) * rng.normal();
        const double vprop = 1.0 / (1.0 + std::exp(-lprop));
        const double prop = lo + (hi - lo) * vprop;
        if (!(prop > lo && prop < hi)) {  // logit walk saturated in double precision
            note_theta_proposal(p, false);
            return;
        }

        Eigen::VectorXd w, r;
        beta_star_data_terms(p, w, r);
        double log_acc;
        try {
            const double lt_cur = theta_log_target_given(p, cur, w, r);
            const double lt_prop = theta_log_target_given(p, prop, w, r);
            log_acc = lt_prop + std::log(vprop * (1.0 - vprop)) -
                      lt_cur - std::log(v * (1.0 - v));
        } catch (const std::runtime_error&) {
            log_acc = -std::numeric_limits<double>::infinity();  // near-singular proposal
        }
        const bool accept = std::log(rng.uniform_pos()) < log_acc;
        if (accept) {
            st_.theta[p] = prop;
            ops_.rebuild_coefficient(p, prop);
            refresh_beta_tilde(p);
        }
        note_theta_proposal(p, accept);
    }

    void update_xi_block(int t) {
        auto [rhs, prec] = xi_conditional(t);
        xi_llt_.factorize(prec);
        if (xi_llt_.info() != Eigen::Success)
            throw std::runtime_error("update_xi_block: precision factorization failed");
        RngStream rng = stream(detail::UpdateBlock::xi, t);
        st_.xi.col(t) = sample_mvn_prec(rhs, xi_llt_, rng);
    }

    // One pass over the color classes; sites within a class update in
    // parallel from their scalar full conditionals.
    void update_xi_chromatic(int t) {
        for (const auto& cls : ops_.color_classes) {
            auto body = [this, t, &cls](int begin, int end) {
                for (int i = begin; i < end; ++i) {
                    const int s = cls[i];
                    RngStream rng = stream(detail::UpdateBlock::xi,
                                           static_cast<std::uint64_t>(t) * s_count_ + s);
                    const auto [mean, var] = xi_site_moments(s, t);
                    st_.xi(s, t) = mean + std::sqrt(var) * rng.normal();
                }
            };
            pool_->run(static_cast<int>(cls.size()), body);
        }
    }

    void update_xi(int t) {
        if (cfg_.chromatic_xi)
            update_xi_chromatic(t);
        else
            update_xi_block(t);
    }

    // Recenter the spatio-temporal effects and move their grand mean into
    // the intercept; every cell predictor is left exactly unchanged.
    void apply_sum_to_zero() {
        const double mean = st_.xi.mean();
        st_.xi.array() -= mean;
        st_.delta[0] += mean;
        nu_global_.array() += mean;
    }

    void update_tau_sq() {
        auto [shape, rate] = tau_sq_conditional();
        RngStream rng = stream(detail::UpdateBlock::tau_sq, 0);
        st_.tau_sq = sample_invgamma(shape, rate, rng);
    }

    void update_zeta() {
        auto [mean, var] = zeta_conditional();
        RngStream rng = stream(detail::UpdateBlock::zeta, 0);
        st_.zeta = sample_truncnorm(mean, var, -1.0, 1.0, rng);
    }

    void update_omega() {
        RngStream rng = stream(detail::UpdateBlock::omega, 0);
        const double cur = st_.omega;
        const double l = std::log(cur / (1.0 - cur));
        const double lprop = l + std::exp(omega_lscale_) * rng.normal();
        const double prop = 1.0 / (1.0 + std::exp(-lprop));
        if (!(prop > 0.0 && prop < 1.0)) {
            note_omega_proposal(false);
            return;
        }

        double qd, qw;
        car_quadratic_terms(qd, qw);
        const double lt_cur = omega_log_target_given(cur, qd, qw);
        const double lt_prop = omega_log_target_given(prop, qd, qw);
        const double log_acc = lt_prop + std::log(prop * (1.0 - prop)) -
                               lt_cur - std::log(cur * (1.0 - cur));
        const bool accept = std::log(rng.uniform_pos()) < log_acc;
        if (accept) {
            st_.omega = prop;
            refresh_car_values();
        }
        note_omega_proposal(accept);
    }

    // One full scan: psi -> delta -> {beta*, sigma^2, theta} per coefficient
    // -> xi over all times -> recentering -> tau^2 -> zeta -> omega.
    void sweep() {
        update_psi();
        update_delta();
        for (int p = 0; p < spec_.num_varying; ++p) {
            update_beta_star(p);
            update_sigma_sq(p);
            update_theta(p);
        }
        for (int t = 0; t < horizon_; ++t) update_xi(t);
        apply_sum_to_zero();
        update_tau_sq();
        update_zeta();
        update_omega();
    }

    PosteriorDraws run() { return run(nullptr); }

    PosteriorDraws run(const TrendRequest* trend) {
        const int total = cfg_.iterations;
        const int g_count = cfg_.thin > 0 ? (total - cfg_.burn_in) / cfg_.thin : 0;
        PosteriorDraws out;
        allocate_draws(out, g_count, trend != nullptr);
        if (trend) validate_trend(*trend);

        Eigen::MatrixXd nu_all;
        Eigen::VectorXd slope_weights;
        if (trend) {
            nu_all.resize(s_count_, horizon_);
            const double tbar = trend->times.mean();
            Eigen::VectorXd centered = trend->times.array() - tbar;
            const double denom = centered.squaredNorm();
            if (denom <= 0.0)
                throw std::invalid_argument("run: trend times are degenerate");
            slope_weights = centered / denom;
        }

        int g = 0;
        for (int i = 1; i <= total; ++i) {
            iter_ = static_cast<std::uint64_t>(i);
            sweep();
            if (i <= cfg_.burn_in || (i - cfg_.burn_in) % cfg_.thin != 0) continue;
            record_draw(out, g, trend, nu_all, slope_weights);
            ++g;
        }
        out.sample_count = g;
        finalize_draws(out, trend != nullptr);
        return out;
    }

    // --- conditional parameters, exposed for verification ------------------

    // (rhs, precision) of the Gaussian full conditional of delta.
    std::pair<Eigen::VectorXd, Eigen::MatrixXd> delta_conditional() const {
        const int q = static_cast<int>(st_.delta.size());
        Eigen::MatrixXd prec = Eigen::MatrixXd::Zero(q, q);
        Eigen::VectorXd rhs = Eigen::VectorXd::Zero(q);
        for (int c = 0; c < n_cells_; ++c) {
            const double off = nu_varying_[c] + st_.xi(cell_region_[c], cell_time_[c]);
            const auto zrow = z_mat_.row(c);
            prec.noalias() += st_.psi[c] * (zrow.transpose() * zrow);
            rhs += zrow.transpose() * (cell_kappa_[c] - st_.psi[c] * off);
        }
        prec.diagonal().array() += 1.0 / spec_.priors.sigma_delta_sq;
        return {rhs, prec};
    }

    std::pair<Eigen::VectorXd, Eigen::MatrixXd> beta_star_conditional(int p) const {
        Eigen::VectorXd w, r;
        beta_star_data_terms(p, w, r);
        const Eigen::MatrixXd& T = ops_.coef[p].kriging;
        Eigen::MatrixXd prec = T.transpose() * w.asDiagonal() * T;
        prec += ops_.coef[p].knot_corr_inv / st_.sigma_sq[p];
        return {T.transpose() * r, prec};
    }

    // (shape, rate) of the conjugate inverse-gamma draw.
    std::pair<double, double> sigma_sq_conditional(int p) const {
        const Eigen::VectorXd& b = st_.beta_star[p];
        const double quad =
            ops_.coef[p].knot_chol.matrixL().solve(b).squaredNorm();
        return {0.5 * b.size() + spec_.priors.a_sigma_for(p),
                0.5 * quad + spec_.priors.b_sigma_for(p)};
    }

    std::pair<double, double> tau_sq_conditional() const {
        double quad = 0.0;
        Eigen::VectorXd resid(s_count_);
        for (int t = 0; t < horizon_; ++t) {
            if (t == 0)
                resid = st_.xi.col(0);
            else
                resid = st_.xi.col(t) - st_.zeta * st_.xi.col(t - 1);
            quad += resid.dot(car_b_ * resid);
        }
        return {0.5 * static_cast<double>(s_count_) * horizon_ + spec_.priors.a_tau,
                0.5 * quad + spec_.priors.b_tau};
    }

    // (mean, variance) of the truncated-normal full conditional of zeta.
    std::pair<double, double> zeta_conditional() const {
        double num = 0.0, den = 0.0;
        for (int t = 1; t < horizon_; ++t) {
            const Eigen::VectorXd b_prev = car_b_ * st_.xi.col(t - 1);
            num += b_prev.dot(st_.xi.col(t));
            den += b_prev.dot(st_.xi.col(t - 1));
        }
        const double inv_tau = 1.0 / st_.tau_sq;
        const double var = 1.0 / (den * inv_tau + 1.0 / spec_.priors.sigma_zeta_sq);
        return {var * num * inv_tau, var};
    }

    // (rhs, precision) of the joint Gaussian full conditional of xi_t.
    std::pair<Eigen::VectorXd, Eigen::SparseMatrix<double>> xi_conditional(int t) const {
        const double inv_tau = 1.0 / st_.tau_sq;
        const double scale = (t == horizon_ - 1) ? 1.0 : 1.0 + st_.zeta * st_.zeta;
        Eigen::SparseMatrix<double> prec = car_b_;
        prec *= scale * inv_tau;
        Eigen::VectorXd rhs = Eigen::VectorXd::Zero(s_count_);
        if (t > 0) rhs += st_.zeta * inv_tau * (car_b_ * st_.xi.col(t - 1));
        if (t < horizon_ - 1) rhs += st_.zeta * inv_tau * (car_b_ * st_.xi.col(t + 1));
        for (int c : cells_at_time_[t]) {
            const int s = cell_region_[c];
            prec.coeffRef(s, s) += st_.psi[c];
            rhs[s] += cell_kappa_[c] - st_.psi[c] * (nu_global_[c] + nu_varying_[c]);
        }
        return {rhs, prec};
    }

    // Scalar full conditional of xi_st given everything else.
    std::pair<double, double> xi_site_moments(int s, int t) const {
        const double inv_tau = 1.0 / st_.tau_sq;
        const double scale = (t == horizon_ - 1) ? 1.0 : 1.0 + st_.zeta * st_.zeta;
        const double dg = ops_.degree_guarded[s];
        double prec = scale * dg * inv_tau;
        double rhs = 0.0;
        const int c = cell_at_(s, t);
        if (c >= 0) {
            prec += st_.psi[c];
            rhs += cell_kappa_[c] - st_.psi[c] * (nu_global_[c] + nu_varying_[c]);
        }
        const double prev = t > 0 ? st_.xi(s, t - 1) : 0.0;
        const double next = t < horizon_ - 1 ? st_.xi(s, t + 1) : 0.0;
        double row_time = dg * (prev + next);
        double nbr_cur = 0.0;
        for (int sn : ops_.neighbors[s]) {
            const double pn = t > 0 ? st_.xi(sn, t - 1) : 0.0;
            const double nn = t < horizon_ - 1 ? st_.xi(sn, t + 1) : 0.0;
            row_time -= st_.omega * (pn + nn);
            nbr_cur += st_.xi(sn, t);
        }
        rhs += st_.zeta * inv_tau * row_time + scale * st_.omega * inv_tau * nbr_cur;
        return {rhs / prec, 1.0 / prec};
    }

    // Log full conditional of theta_p (up to an additive constant).
    double theta_log_target(int p, double theta) const {
        Eigen::VectorXd w, r;
        beta_star_data_terms(p, w, r);
        return theta_log_target_given(p, theta, w, r);
    }

    // Log full conditional of omega (up to an additive constant).
    double omega_log_target(double omega) const {
        double qd, qw;
        car_quadratic_terms(qd, qw);
        return omega_log_target_given(omega, qd, qw);
    }

    double theta_accept_rate(int p) const {
        const auto& [acc, tot] = theta_accept_[p];
        return tot > 0 ? static_cast<double>(acc) / tot : 0.0;
    }
    double omega_accept_rate() const {
        return omega_accept_.second > 0
                   ? static_cast<double>(omega_accept_.first) / omega_accept_.second
                   : 0.0;
    }
    double theta_proposal_scale(int p) const { return std::exp(theta_lscale_[p]); }
    double omega_proposal_scale() const { return std::exp(omega_lscale_); }

    // Predictor over the full lattice from supplied covariates.
    void predictor_lattice(const TrendRequest& trend, Eigen::MatrixXd& nu_all) const {
        for (int s = 0; s < s_count_; ++s)
            for (int t = 0; t < horizon_; ++t) {
                const Eigen::Index row = static_cast<Eigen::Index>(s) * horizon_ + t;
                double v = st_.delta[0];
                for (int q = 1; q < st_.delta.size(); ++q)
                    v += trend.z_all(row, q - 1) * st_.delta[q];
                for (int p = 0; p < spec_.num_varying; ++p)
                    v += trend.x_all(row, p) * beta_tilde_(s, p);
                nu_all(s, t) = v + st_.xi(s, t);
            }
    }

private:
    void check_config() const {
        if (cfg_.iterations < 0 || cfg_.burn_in < 0)
            throw std::invalid_argument("ChainConfig: negative iteration counts");
        if (cfg_.iterations > 0 && cfg_.burn_in >= cfg_.iterations)
            throw std::invalid_argument("ChainConfig: burn-in must be smaller than total iterations");
        if (cfg_.thin < 1) throw std::invalid_argument("ChainConfig: thin must be >= 1");
        if (!(cfg_.theta_proposal_scale > 0.0) || !(cfg_.omega_proposal_scale > 0.0))
            throw std::invalid_argument("ChainConfig: proposal scales must be > 0");
        if (cfg_.workers < 1) throw std::invalid_argument("ChainConfig: workers must be >= 1");
    }

    void flatten_cells() {
        cell_region_.resize(n_cells_);
        cell_time_.resize(n_cells_);
        cell_n_.resize(n_cells_);
        cell_kappa_.resize(n_cells_);
        z_mat_.resize(n_cells_, spec_.num_global + 1);
        x_mat_.resize(n_cells_, std::max(spec_.num_varying, 1));
        cells_at_time_.assign(horizon_, {});
        cell_at_ = Eigen::MatrixXi::Constant(s_count_, horizon_, -1);
        for (int c = 0; c < n_cells_; ++c) {
            const Cell& cell = data_.cells[c];
            if (static_cast<int>(cell.z.size()) != spec_.num_global)
                throw std::invalid_argument("GibbsSampler: cell global covariate count disagrees with spec");
            if (static_cast<int>(cell.x.size()) != spec_.num_varying)
                throw std::invalid_argument("GibbsSampler: cell varying covariate count disagrees with spec");
            cell_region_[c] = cell.region;
            cell_time_[c] = cell.time - 1;
            cell_n_[c] = static_cast<double>(cell.trials);
            cell_kappa_[c] = static_cast<double>(cell.successes) - 0.5 * cell.trials;
            z_mat_(c, 0) = 1.0;
            for (int q = 0; q < spec_.num_global; ++q) z_mat_(c, q + 1) = cell.z[q];
            for (int p = 0; p < spec_.num_varying; ++p) x_mat_(c, p) = cell.x[p];
            cells_at_time_[cell.time - 1].push_back(c);
            cell_at_(cell.region, cell.time - 1) = c;
        }
    }

    // Sparse D - omega*W with the isolated-region guard; values refreshed in
    // place whenever omega moves (pattern is fixed).
    void build_car_pattern() {
        std::vector<Eigen::Triplet<double>> trips;
        for (int s = 0; s < s_count_; ++s) {
            trips.emplace_back(s, s, ops_.degree_guarded[s]);
            for (int t : ops_.neighbors[s]) trips.emplace_back(s, t, 1.0);
        }
        car_b_.resize(s_count_, s_count_);
        car_b_.setFromTriplets(trips.begin(), trips.end());
        car_b_.makeCompressed();
        nz_is_diag_.resize(car_b_.nonZeros());
        nz_degree_.resize(car_b_.nonZeros());
        int k = 0;
        for (int col = 0; col < car_b_.outerSize(); ++col)
            for (Eigen::SparseMatrix<double>::InnerIterator it(car_b_, col); it; ++it, ++k) {
                nz_is_diag_[k] = it.row() == col;
                nz_degree_[k] = ops_.degree_guarded[it.row()];
            }
        car_scratch_ = car_b_;
        xi_llt_.analyzePattern(car_b_);
        logdet_llt_.analyzePattern(car_b_);
    }

    void refresh_car_values() { fill_car_values(car_b_, st_.omega); }

    void fill_car_values(Eigen::SparseMatrix<double>& m, double omega) const {
        double* vals = m.valuePtr();
        for (std::size_t k = 0; k < nz_is_diag_.size(); ++k)
            vals[k] = nz_is_diag_[k] ? nz_degree_[k] : -omega;
    }

    void init_state(double theta_mid) {
        st_.delta = Eigen::VectorXd::Zero(spec_.num_global + 1);
        st_.beta_star.resize(spec_.num_varying);
        for (int p = 0; p < spec_.num_varying; ++p)
            st_.beta_star[p] =
                Eigen::VectorXd::Zero(static_cast<Eigen::Index>(ops_.coef[p].knots.locations.size()));
        st_.sigma_sq.assign(spec_.num_varying, 1.0);
        st_.theta.assign(spec_.num_varying, theta_mid);
        st_.xi = Eigen::MatrixXd::Zero(s_count_, horizon_);
        st_.psi.resize(n_cells_);
        for (int c = 0; c < n_cells_; ++c) st_.psi[c] = 0.25 * cell_n_[c];
        st_.tau_sq = 1.0;
        st_.omega = spec_.priors.a_omega / (spec_.priors.a_omega + spec_.priors.b_omega);
        st_.zeta = 0.0;
        refresh_car_values();
    }

    void check_state_dims(const LatentState& s) const {
        if (s.delta.size() != spec_.num_global + 1 ||
            static_cast<int>(s.beta_star.size()) != spec_.num_varying ||
            static_cast<int>(s.sigma_sq.size()) != spec_.num_varying ||
            static_cast<int>(s.theta.size()) != spec_.num_varying ||
            s.xi.rows() != s_count_ || s.xi.cols() != horizon_ ||
            s.psi.size() != n_cells_)
            throw std::invalid_argument("set_state: dimension mismatch");
        for (int p = 0; p < spec_.num_varying; ++p) {
            if (s.beta_star[p].size() !=
                static_cast<Eigen::Index>(ops_.coef[p].knots.locations.size()))
                throw std::invalid_argument("set_state: beta_star length mismatch");
            if (!(s.sigma_sq[p] > 0.0)) throw std::invalid_argument("set_state: sigma_sq must be > 0");
        }
        if (!(s.tau_sq > 0.0) || !(s.omega > 0.0 && s.omega < 1.0) ||
            !(s.zeta > -1.0 && s.zeta < 1.0))
            throw std::invalid_argument("set_state: variance/correlation parameter out of range");
    }

    void refresh_predictor_caches() {
        nu_global_ = z_mat_ * st_.delta;
        beta_tilde_.resize(s_count_, std::max(spec_.num_varying, 1));
        nu_varying_ = Eigen::VectorXd::Zero(n_cells_);
        for (int p = 0; p < spec_.num_varying; ++p) {
            beta_tilde_.col(p) = ops_.coef[p].kriging * st_.beta_star[p];
            for (int c = 0; c < n_cells_; ++c)
                nu_varying_[c] += x_mat_(c, p) * beta_tilde_(cell_region_[c], p);
        }
    }

    void refresh_beta_tilde(int p) {
        Eigen::VectorXd fresh = ops_.coef[p].kriging * st_.beta_star[p];
        for (int c = 0; c < n_cells_; ++c)
            nu_varying_[c] += x_mat_(c, p) * (fresh[cell_region_[c]] - beta_tilde_(cell_region_[c], p));
        beta_tilde_.col(p) = fresh;
    }

    // Per-region likelihood aggregates for coefficient p: w_s = sum psi x^2,
    // r_s = sum x (kappa - psi * residual predictor).
    void beta_star_data_terms(int p, Eigen::VectorXd& w, Eigen::VectorXd& r) const {
        w = Eigen::VectorXd::Zero(s_count_);
        r = Eigen::VectorXd::Zero(s_count_);
        for (int c = 0; c < n_cells_; ++c) {
            const int s = cell_region_[c];
            const double xp = x_mat_(c, p);
            const double off = nu_global_[c] + nu_varying_[c] - xp * beta_tilde_(s, p) +
                               st_.xi(s, cell_time_[c]);
            w[s] += st_.psi[c] * xp * xp;
            r[s] += xp * (cell_kappa_[c] - st_.psi[c] * off);
        }
    }

    double theta_log_target_given(int p, double theta, const Eigen::VectorXd& w,
                                  const Eigen::VectorXd& r) const {
        const auto& knots = ops_.coef[p].knots.locations;
        Eigen::MatrixXd knot_corr = corr_matrix(knots, theta);
        CholeskyResult chol = chol_with_jitter(std::move(knot_corr));
        const Eigen::VectorXd alpha = chol.llt.solve(st_.beta_star[p]);
        const Eigen::VectorXd bt = cross_corr_matrix(ops_.locations, knots, theta) * alpha;
        const double loglik = -0.5 * bt.cwiseProduct(bt).dot(w) + bt.dot(r);
        const double quad = st_.beta_star[p].dot(alpha);
        return loglik - 0.5 * (quad / st_.sigma_sq[p] + chol.log_det);
    }

    // Quadratic forms of the AR residuals against the guarded degree matrix
    // and the adjacency, so the omega target is cheap per proposal.
    void car_quadratic_terms(double& qd, double& qw) const {
        qd = 0.0;
        qw = 0.0;
        Eigen::VectorXd resid(s_count_);
        for (int t = 0; t < horizon_; ++t) {
            if (t == 0)
                resid = st_.xi.col(0);
            else
                resid = st_.xi.col(t) - st_.zeta * st_.xi.col(t - 1);
            for (int s = 0; s < s_count_; ++s) {
                qd += ops_.degree_guarded[s] * resid[s] * resid[s];
                double nbr = 0.0;
                for (int sn : ops_.neighbors[s]) nbr += resid[sn];
                qw += resid[s] * nbr;
            }
        }
    }

    double omega_log_target_given(double omega, double qd, double qw) const {
        fill_car_values(car_scratch_, omega);
        logdet_llt_.factorize(car_scratch_);
        if (logdet_llt_.info() != Eigen::Success)
            return -std::numeric_limits<double>::infinity();
        const double logdet =
            2.0 * logdet_llt_.matrixL().nestedExpression().diagonal().array().log().sum();
        const double quad = (qd - omega * qw) / st_.tau_sq;
        return 0.5 * horizon_ * logdet - 0.5 * quad +
               (spec_.priors.a_omega - 1.0) * std::log(omega) +
               (spec_.priors.b_omega - 1.0) * std::log1p(-omega);
    }

    void note_theta_proposal(int p, bool accept) {
        auto& [acc, tot] = theta_accept_[p];
        ++tot;
        if (accept) ++acc;
        adapt(theta_lscale_[p], accept);
    }

    void note_omega_proposal(bool accept) {
        ++omega_accept_.second;
        if (accept) ++omega_accept_.first;
        adapt(omega_lscale_, accept);
    }

    // Robbins-Monro adaptation toward the target acceptance rate during
    // burn-in; scales freeze afterwards so the retained chain is ergodic.
    void adapt(double& lscale, bool accept) {
        if (!cfg_.adapt_proposals || iter_ > static_cast<std::uint64_t>(cfg_.burn_in)) return;
        const double step = 1.0 / std::pow(1.0 + static_cast<double>(iter_), 0.6);
        lscale += step * ((accept ? 1.0 : 0.0) - cfg_.target_accept);
        lscale = std::clamp(lscale, -8.0, 4.0);
    }

    RngStream stream(detail::UpdateBlock b, std::uint64_t index) const {
        return RngStream(cfg_.seed, StreamKey{cfg_.chain_id, iter_, detail::block_key(b, index)});
    }

    void allocate_draws(PosteriorDraws& out, int g_count, bool with_trend) const {
        out.delta.resize(g_count, spec_.num_global + 1);
        out.beta_star.resize(spec_.num_varying);
        out.beta_tilde.resize(spec_.num_varying);
        for (int p = 0; p < spec_.num_varying; ++p) {
            out.beta_star[p].resize(g_count, st_.beta_star[p].size());
            out.beta_tilde[p].resize(g_count, s_count_);
        }
        out.sigma_sq.resize(g_count, spec_.num_varying);
        out.theta.resize(g_count, spec_.num_varying);
        out.tau_sq.resize(g_count);
        out.omega.resize(g_count);
        out.zeta.resize(g_count);
        if (with_trend) out.slopes.resize(g_count, s_count_);
        const double nan = std::numeric_limits<double>::quiet_NaN();
        out.nu_mean = Eigen::MatrixXd::Constant(s_count_, horizon_, nan);
        out.nu_sd = Eigen::MatrixXd::Constant(s_count_, horizon_, nan);
        nu_m1_ = Eigen::MatrixXd::Zero(s_count_, horizon_);
        nu_m2_ = Eigen::MatrixXd::Zero(s_count_, horizon_);
    }

    void validate_trend(const TrendRequest& trend) const {
        const Eigen::Index rows = static_cast<Eigen::Index>(s_count_) * horizon_;
        if (trend.times.size() != horizon_)
            throw std::invalid_argument("TrendRequest: times length must equal the horizon");
        if (trend.z_all.rows() != rows || trend.z_all.cols() != spec_.num_global)
            throw std::invalid_argument("TrendRequest: z_all shape mismatch");
        if (trend.x_all.rows() != rows || trend.x_all.cols() != spec_.num_varying)
            throw std::invalid_argument("TrendRequest: x_all shape mismatch");
        if (horizon_ < 2) throw std::invalid_argument("TrendRequest: need at least two time points");
    }

    void record_draw(PosteriorDraws& out, int g, const TrendRequest* trend,
                     Eigen::MatrixXd& nu_all, const Eigen::VectorXd& slope_weights) {
        out.delta.row(g) = st_.delta.transpose();
        for (int p = 0; p < spec_.num_varying; ++p) {
            out.beta_star[p].row(g) = st_.beta_star[p].transpose();
            out.beta_tilde[p].row(g) = beta_tilde_.col(p).transpose();
            out.sigma_sq(g, p) = st_.sigma_sq[p];
            out.theta(g, p) = st_.theta[p];
        }
        out.tau_sq[g] = st_.tau_sq;
        out.omega[g] = st_.omega;
        out.zeta[g] = st_.zeta;
        if (!(st_.omega > 0.0 && st_.omega < 1.0) || !(st_.zeta > -1.0 && st_.zeta < 1.0))
            throw std::runtime_error("record_draw: parameter left its support");
        if (cfg_.store_xi) out.xi.push_back(st_.xi);

        if (trend) {
            predictor_lattice(*trend, nu_all);
            out.slopes.row(g) = (nu_all * slope_weights).transpose();
            accumulate_nu(nu_all, g);
        } else {
            for (int c = 0; c < n_cells_; ++c) {
                const int s = cell_region_[c], t = cell_time_[c];
                const double nu = nu_global_[c] + nu_varying_[c] + st_.xi(s, t);
                welford(nu_m1_(s, t), nu_m2_(s, t), nu, g);
            }
        }
    }

    void accumulate_nu(const Eigen::MatrixXd& nu_all, int g) {
        for (int s = 0; s < s_count_; ++s)
            for (int t = 0; t < horizon_; ++t) welford(nu_m1_(s, t), nu_m2_(s, t), nu_all(s, t), g);
    }

    static void welford(double& m1, double& m2, double value, int g) {
        const double d = value - m1;
        m1 += d / (g + 1);
        m2 += d * (value - m1);
    }

    void finalize_draws(PosteriorDraws& out, bool with_trend) {
        out.theta_accept_rate.resize(spec_.num_varying);
        out.theta_proposal_scale.resize(spec_.num_varying);
        for (int p = 0; p < spec_.num_varying; ++p) {
            out.theta_accept_rate[p] = theta_accept_rate(p);
            out.theta_proposal_scale[p] = theta_proposal_scale(p);
        }
        out.omega_accept_rate = omega_accept_rate();
        out.omega_proposal_scale = omega_proposal_scale();
        if (out.sample_count == 0) return;
        for (int s = 0; s < s_count_; ++s)
            for (int t = 0; t < horizon_; ++t) {
                const bool have = with_trend || cell_at_(s, t) >= 0;
                if (!have) continue;
                out.nu_mean(s, t) = nu_m1_(s, t);
                out.nu_sd(s, t) = out.sample_count > 1
                                      ? std::sqrt(nu_m2_(s, t) / (out.sample_count - 1))
                                      : 0.0;
            }
    }

    // --- members ------------------------------------------------------------

    Dataset data_;
    ModelSpec spec_;
    ChainConfig cfg_;
    int s_count_ = 0, horizon_ = 0, n_cells_ = 0;

    std::vector<int> cell_region_, cell_time_;
    Eigen::VectorXd cell_n_, cell_kappa_;
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> z_mat_, x_mat_;
    std::vector<std::vector<int>> cells_at_time_;
    Eigen::MatrixXi cell_at_;

    SpatialOperators ops_;
    Eigen::SparseMatrix<double> car_b_;             // D - omega W (guarded), current omega
    mutable Eigen::SparseMatrix<double> car_scratch_;
    std::vector<char> nz_is_diag_;
    std::vector<double> nz_degree_;
    Eigen::SimplicialLLT<Eigen::SparseMatrix<double>> xi_llt_;
    mutable Eigen::SimplicialLLT<Eigen::SparseMatrix<double>> logdet_llt_;

    LatentState st_;
    Eigen::VectorXd nu_global_, nu_varying_;
    Eigen::MatrixXd beta_tilde_;                    // S x P

    std::unique_ptr<WorkerPool> pool_;
    std::uint64_t iter_ = 0;
    std::vector<double> theta_lscale_;
    double omega_lscale_ = 0.0;
    std::vector<std::pair<long, long>> theta_accept_;
    std::pair<long, long> omega_accept_{0, 0};
    mutable Eigen::MatrixXd nu_m1_, nu_m2_;
};

}  // namespace stbreg
