#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <stdexcept>

#include <Eigen/Dense>

#include <hopper/errors.hpp>

namespace hopper {

// Equality-constrained minimization over box bounds,
//
//   min f(x)  s.t.  c(x) = 0,  lower <= x <= upper,
//
// solved with an augmented-Lagrangian outer loop around a projected,
// Levenberg-damped Gauss-Newton inner minimizer. Derivatives are taken by
// central finite differences in scaled coordinates, so both callbacks must
// be smooth and evaluable in a small neighborhood of the box.
struct NlpProblem {
    int n = 0;
    int m = 0;
    std::function<double(const Eigen::VectorXd&)> objective;
    std::function<Eigen::VectorXd(const Eigen::VectorXd&)> constraints;
    Eigen::VectorXd lower;
    Eigen::VectorXd upper;
    // Typical magnitudes of variables and constraint rows; the solver works
    // in units of these, and the tolerances below apply to the scaled
    // quantities.
    Eigen::VectorXd x_scale;
    Eigen::VectorXd c_scale;
};

struct NlpOptions {
    int max_outer = 40;
    int max_inner = 100;
    double constraint_tol = 1e-7;
    double gradient_tol = 1e-6;
    double fd_step = 1e-6;
    double mu0 = 10.0;
    double mu_growth = 8.0;
    double mu_max = 1e12;
    // 0 silent, 1 one line per outer iteration, 2 adds inner steps; written
    // to stderr.
    int trace = 0;
};

struct NlpResult {
    Eigen::VectorXd x;
    Eigen::VectorXd lambda;
    double objective = 0.0;
    double constraint_violation = 0.0;
    double projected_gradient = 0.0;
    int outer_iterations = 0;
    int inner_iterations = 0;
    long objective_evals = 0;
    long constraint_evals = 0;
    bool converged = false;
};

namespace detail {

inline void validate_nlp(const NlpProblem& p, const Eigen::VectorXd& x0) {
    if (p.n <= 0) throw std::invalid_argument("problem has no variables");
    if (p.m < 0) throw std::invalid_argument("negative constraint count");
    if (!p.objective) throw std::invalid_argument("objective is not set");
    if (p.m > 0 && !p.constraints)
        throw std::invalid_argument("constraints are not set");
    if (x0.size() != p.n)
        throw std::invalid_argument("start point has the wrong dimension");
    auto check_size = [&](const Eigen::VectorXd& v, int want,
                          const char* what) {
        if (v.size() != want)
            throw std::invalid_argument(std::string(what) +
                                        " has the wrong dimension");
    };
    check_size(p.lower, p.n, "lower bound");
    check_size(p.upper, p.n, "upper bound");
    check_size(p.x_scale, p.n, "variable scale");
    if (p.m > 0) check_size(p.c_scale, p.m, "constraint scale");
    for (int i = 0; i < p.n; ++i) {
        if (p.lower[i] > p.upper[i])
            throw std::invalid_argument("crossed box bounds");
        if (!(p.x_scale[i] > 0.0))
            throw std::invalid_argument("variable scales must be positive");
    }
    for (int i = 0; i < p.m; ++i)
        if (!(p.c_scale[i] > 0.0))
            throw std::invalid_argument("constraint scales must be positive");
}

}  // namespace detail

inline NlpResult solve_nlp(const NlpProblem& prob, const Eigen::VectorXd& x0,
                           const NlpOptions& opt = {}) {
    using Eigen::MatrixXd;
    using Eigen::VectorXd;
    detail::validate_nlp(prob, x0);
    const int n = prob.n;
    const int m = prob.m;

    NlpResult res;
    const VectorXd D = prob.x_scale;
    const VectorXd lo = prob.lower.cwiseQuotient(D);
    const VectorXd hi = prob.upper.cwiseQuotient(D);

    auto fx = [&](const VectorXd& xs) {
        ++res.objective_evals;
        return prob.objective(xs.cwiseProduct(D));
    };
    auto cx = [&](const VectorXd& xs) -> VectorXd {
        if (m == 0) return VectorXd();
        ++res.constraint_evals;
        return prob.constraints(xs.cwiseProduct(D))
            .cwiseQuotient(prob.c_scale);
    };
    auto clamp_box = [&](VectorXd v) {
        for (int i = 0; i < n; ++i) v[i] = std::clamp(v[i], lo[i], hi[i]);
        return v;
    };

    VectorXd xs = clamp_box(x0.cwiseQuotient(D));
    VectorXd lambda = VectorXd::Zero(m);
    double mu = m > 0 ? opt.mu0 : 0.0;
    double omega = m > 0 ? 1e-2 : opt.gradient_tol;

    // Best iterate seen anywhere, by constraint violation first and
    // objective second; returned when the solve fails to converge.
    VectorXd best_x = xs;
    double best_viol = std::numeric_limits<double>::infinity();
    double best_f = std::numeric_limits<double>::infinity();
    auto offer_best = [&](const VectorXd& x, double viol, double f) {
        const double v = std::max(viol - opt.constraint_tol, 0.0);
        const double bv = std::max(best_viol - opt.constraint_tol, 0.0);
        if (v < bv - 1e-15 || (v <= bv + 1e-15 && f < best_f)) {
            best_x = x;
            best_viol = viol;
            best_f = f;
        }
    };

    const double h = opt.fd_step;
    double c_ref = std::numeric_limits<double>::infinity();
    int stagnant = 0;

    for (int outer = 0; outer < opt.max_outer; ++outer) {
        ++res.outer_iterations;

        double nu = 0.0;
        double pg = std::numeric_limits<double>::infinity();
        VectorXd c0;
        for (int inner = 0; inner < opt.max_inner; ++inner) {
            ++res.inner_iterations;
            const double f0 = fx(xs);
            c0 = cx(xs);

            VectorXd g(n), bdiag(n);
            MatrixXd J(m, n);
            for (int j = 0; j < n; ++j) {
                VectorXd xp = xs, xm = xs;
                xp[j] += h;
                xm[j] -= h;
                const double fp = fx(xp), fm = fx(xm);
                g[j] = (fp - fm) / (2.0 * h);
                bdiag[j] = std::max((fp - 2.0 * f0 + fm) / (h * h), 0.0);
                if (m > 0) J.col(j) = (cx(xp) - cx(xm)) / (2.0 * h);
            }

            VectorXd gal = g;
            if (m > 0) gal += J.transpose() * (lambda + mu * c0);
            pg = (xs - clamp_box(xs - gal)).lpNorm<Eigen::Infinity>();
            offer_best(xs, m > 0 ? c0.lpNorm<Eigen::Infinity>() : 0.0, f0);
            if (pg <= omega) break;

            // A bound coordinate re-enters the free set only when its
            // inward gradient is a noticeable fraction of the overall
            // stationarity error; noise-level flickers would otherwise
            // inject one wild Newton direction per release.
            const double rel = 1e-3 * pg;
            std::vector<int> free_idx;
            free_idx.reserve(n);
            for (int i = 0; i < n; ++i) {
                const bool at_lo = xs[i] <= lo[i] + 1e-12 && gal[i] > -rel;
                const bool at_hi = xs[i] >= hi[i] - 1e-12 && gal[i] < rel;
                if (!at_lo && !at_hi) free_idx.push_back(i);
            }
            if (free_idx.empty()) break;
            const int nf = static_cast<int>(free_idx.size());

            MatrixXd H = MatrixXd::Zero(nf, nf);
            if (m > 0) {
                MatrixXd Jf(m, nf);
                for (int k = 0; k < nf; ++k) Jf.col(k) = J.col(free_idx[k]);
                H = mu * (Jf.transpose() * Jf);
            }
            for (int k = 0; k < nf; ++k) H(k, k) += bdiag[free_idx[k]];
            if (nu == 0.0)
                nu = 1e-10 * (1.0 + H.diagonal().maxCoeff());

            const double phi0 =
                f0 + (m > 0 ? lambda.dot(c0) + 0.5 * mu * c0.squaredNorm()
                            : 0.0);
            if (opt.trace >= 2) {
                int imax = 0;
                double gmax = 0.0;
                for (int i = 0; i < n; ++i) {
                    const double mv = std::abs(xs[i] -
                                               std::clamp(xs[i] - gal[i],
                                                          lo[i], hi[i]));
                    if (mv > gmax) {
                        gmax = mv;
                        imax = i;
                    }
                }
                std::fprintf(stderr,
                             "    inner %3d f=%.6e cn=%.2e pg=%.2e nu=%.1e "
                             "free=%d argmax=%d\n",
                             inner, f0,
                             m > 0 ? c0.lpNorm<Eigen::Infinity>() : 0.0, pg,
                             nu, nf, imax);
            }
            bool moved = false;
            for (int damp = 0; damp < 40 && !moved; ++damp) {
                MatrixXd Hd = H;
                Hd.diagonal().array() += nu;
                VectorXd gf(nf);
                for (int k = 0; k < nf; ++k) gf[k] = gal[free_idx[k]];
                const VectorXd df = Hd.ldlt().solve(-gf);
                VectorXd d = VectorXd::Zero(n);
                for (int k = 0; k < nf; ++k) d[free_idx[k]] = df[k];

                for (double alpha = 1.0; alpha > 1e-8; alpha *= 0.5) {
                    const VectorXd xt = clamp_box(xs + alpha * d);
                    const double pred = gal.dot(xt - xs);
                    if (pred >= 0.0) break;
                    const double ft = fx(xt);
                    const VectorXd ct = cx(xt);
                    const double phit =
                        ft + (m > 0 ? lambda.dot(ct) +
                                          0.5 * mu * ct.squaredNorm()
                                    : 0.0);
                    if (std::isfinite(phit) &&
                        phit <= phi0 + 1e-4 * pred) {
                        if (opt.trace >= 2)
                            std::fprintf(stderr,
                                         "      step alpha=%.3e |d|=%.3e "
                                         "dphi=%.3e\n",
                                         alpha, d.lpNorm<Eigen::Infinity>(),
                                         phit - phi0);
                        xs = xt;
                        moved = true;
                        break;
                    }
                }
                if (!moved)
                    nu = std::max(nu * 10.0,
                                  1e-8 * (1.0 + H.diagonal().maxCoeff()));
                if (nu > 1e14) break;
            }
            if (!moved) break;
            nu = std::max(nu * 0.25, 1e-12);
        }

        res.projected_gradient = pg;
        if (m == 0) {
            res.converged = pg <= opt.gradient_tol;
            break;
        }
        const double cnorm = c0.lpNorm<Eigen::Infinity>();
        if (opt.trace >= 1)
            std::fprintf(stderr,
                         "  outer %2d mu=%.1e |l|=%.2e cn=%.2e pg=%.2e "
                         "om=%.1e inner=%d\n",
                         outer, mu, lambda.lpNorm<Eigen::Infinity>(), cnorm,
                         pg, omega, res.inner_iterations);
        if (cnorm <= opt.constraint_tol && pg <= opt.gradient_tol) {
            res.converged = true;
            break;
        }
        // Multiplier update whenever feasibility tracked its forcing level;
        // the reference is floored at the tolerance so measurement noise
        // near feasibility can never trigger runaway penalty growth.
        if (cnorm <= std::max(10.0 * opt.constraint_tol, 0.5 * c_ref)) {
            lambda += mu * c0;
            c_ref = std::min(c_ref, std::max(cnorm, opt.constraint_tol));
            omega = std::max(opt.gradient_tol * 0.3, omega * 0.2);
        } else if (mu < opt.mu_max) {
            mu = std::min(mu * opt.mu_growth, opt.mu_max);
        } else if (++stagnant > 2) {
            break;
        }
    }

    const VectorXd xout = res.converged ? xs : best_x;
    res.x = xout.cwiseProduct(D);
    res.lambda = lambda;
    res.objective = prob.objective(res.x);
    if (m > 0)
        res.constraint_violation = prob.constraints(res.x)
                                       .cwiseQuotient(prob.c_scale)
                                       .lpNorm<Eigen::Infinity>();
    return res;
}

}  // namespace hopper
