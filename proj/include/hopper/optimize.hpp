#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include <hopper/control.hpp>
#include <hopper/errors.hpp>
#include <hopper/hybrid.hpp>
#include <hopper/integrate.hpp>
#include <hopper/linear_flow.hpp>
#include <hopper/model.hpp>
#include <hopper/nlp.hpp>

namespace hopper {

inline DomainId stance_domain(Variant v) {
    return v == Variant::SingleSpring ? DomainId::Ground : DomainId::D3;
}

inline DomainId flight_domain(Variant v) {
    return v == Variant::SingleSpring ? DomainId::Flight : DomainId::D1;
}

inline NlpOptions default_hop_nlp_options() {
    NlpOptions o;
    o.max_outer = 30;
    o.max_inner = 80;
    o.mu0 = 100.0;
    return o;
}

// One periodic hop cycle to find: apex body height l0 + hop_height, minimum
// integral of u^2 over the stance control.
struct HopProblem {
    ModelParams params;
    double hop_height = 0.1;
    int intervals = 30;
    NlpOptions nlp = default_hop_nlp_options();
};

struct HopSolution {
    ModelParams params;
    double hop_height = 0.0;
    int intervals = 0;
    State apex;
    double descent_time = 0.0;
    double stance_time = 0.0;
    double latched_time = 0.0;
    double ascent_time = 0.0;
    std::vector<Knot> stance_control;
    double effort = 0.0;
    double constraint_violation = 0.0;
    bool converged = false;
    int outer_iterations = 0;
    int inner_iterations = 0;

    double period() const {
        return descent_time + stance_time + latched_time + ascent_time;
    }

    ControlPolicy policy() const {
        ControlPolicy pol;
        pol.feedforward.knots = stance_control;
        pol.feedforward.domain_scope = {stance_domain(params.variant)};
        pol.feedforward.extrapolation = Extrapolation::Hold;
        pol.clock_reset = GuardKind::Touchdown;
        return pol;
    }
};

namespace detail {

// Pinned stance in reduced coordinates x = (z_b, y, dz_b, dy); the foot
// constraint gives delta = l0 - z_b, ddelta = -dz_b.
inline State expand_stance(const ModelParams& p, const Eigen::Vector4d& x,
                           DomainId d) {
    State s;
    s.domain = d;
    s.q = Vec3(x[0], x[1], p.l0 - x[0]);
    s.qd = Vec3(x[2], x[3], -x[2]);
    return s;
}

inline Eigen::Vector4d reduce_stance(const State& s) {
    return Eigen::Vector4d(s.q[0], s.q[1], s.qd[0], s.qd[1]);
}

// The pinned dynamics and the ground reaction are affine in (x, u), so the
// collocation inner loop probes them once through the constrained solver
// and replays the exact linear maps afterwards.
struct StanceAffine {
    Eigen::Matrix4d A;
    Eigen::Vector4d b;
    Eigen::Vector4d bu;
    Eigen::RowVector4d gA;
    double gb = 0.0;
    double gu = 0.0;

    static StanceAffine build(const ModelParams& p, DomainId d) {
        auto rhs = [&](const Eigen::Vector4d& x, double u) {
            const State s = expand_stance(p, x, d);
            const Vec3 qdd = constrained_accel(p, s, u, d).first;
            return Eigen::Vector4d(x[2], x[3], qdd[0], qdd[1]);
        };
        auto force = [&](const Eigen::Vector4d& x, double u) {
            const State s = expand_stance(p, x, d);
            return constraint_force(p, s, u, d)[ground_row(d)];
        };
        StanceAffine a;
        a.b = rhs(Eigen::Vector4d::Zero(), 0.0);
        a.bu = rhs(Eigen::Vector4d::Zero(), 1.0) - a.b;
        a.gb = force(Eigen::Vector4d::Zero(), 0.0);
        a.gu = force(Eigen::Vector4d::Zero(), 1.0) - a.gb;
        for (int i = 0; i < 4; ++i) {
            const Eigen::Vector4d e = Eigen::Vector4d::Unit(i);
            a.A.col(i) = rhs(e, 0.0) - a.b;
            a.gA[i] = force(e, 0.0) - a.gb;
        }
        return a;
    }

    Eigen::Vector4d rhs(const Eigen::Vector4d& x, double u) const {
        return A * x + b + bu * u;
    }
    double ground(const Eigen::Vector4d& x, double u) const {
        return gA * x + gb + gu * u;
    }
};

// Variable and constraint-row offsets of the hop transcription. Flight and
// latched phases are exact affine flows, so only the actuated stance
// carries collocation knots.
struct HopLayout {
    static constexpr int kLatchChecks = 5;
    static constexpr int kFlightChecks = 6;
    static constexpr double kClearance = 1e-4;

    Variant variant = Variant::DoubleSpring;
    int N = 0;
    int apex = 0;
    int n_apex = 0;
    int t_descent = 0;
    int knots = 0;
    int controls = 0;
    int t_stance = 0;
    int x_latch = -1;
    int t_latch = -1;
    int t_ascent = 0;
    int slack = 0;
    int n = 0;
    int r_touchdown = 0;
    int r_knot0 = 0;
    int r_defects = 0;
    int r_exit = 0;
    int r_latch = -1;
    int r_liftoff = -1;
    int r_closure = 0;
    int r_slack = 0;
    int m = 0;

    static HopLayout make(Variant v, int N) {
        HopLayout L;
        L.variant = v;
        L.N = N;
        const bool dbl = v == Variant::DoubleSpring;
        int i = 0;
        L.apex = i;
        L.n_apex = dbl ? 2 : 4;
        i += L.n_apex;
        L.t_descent = i++;
        L.knots = i;
        i += 4 * (N + 1);
        L.controls = i;
        i += N + 1;
        L.t_stance = i++;
        if (dbl) {
            L.x_latch = i;
            i += 2;
            L.t_latch = i++;
        }
        L.t_ascent = i++;
        L.slack = i;
        i += (N + 1) + (dbl ? 3 + kLatchChecks + N : 0);
        L.n = i;

        int r = 0;
        L.r_touchdown = r++;
        L.r_knot0 = r;
        r += 4;
        L.r_defects = r;
        r += 4 * N;
        L.r_exit = r++;
        if (dbl) {
            L.r_latch = r;
            r += 2;
            L.r_liftoff = r++;
        }
        L.r_closure = r;
        r += dbl ? 4 : 6;
        L.r_slack = r;
        r += (N + 1) + (dbl ? 3 + kLatchChecks + N : 0);
        L.m = r;
        return L;
    }

    int knot(int k) const { return knots + 4 * k; }
    int control(int k) const { return controls + k; }
    int slack_mid(int k) const { return slack + N + 4 + kLatchChecks + k; }
    int r_slack_mid(int k) const {
        return r_slack + N + 4 + kLatchChecks + k;
    }

    // Hardstop clearance the mover must keep at stance fraction tau. The
    // floor fades out quadratically towards touchdown and exit, where y
    // legitimately passes through zero.
    double clearance(double tau) const {
        const double r = std::min(1.0, std::min(tau, 1.0 - tau) / 0.2);
        return kClearance * r * r;
    }
};

class HopTranscription {
  public:
    HopTranscription(const ModelParams& p, double hop_height, int N)
        : p_(p),
          H_(hop_height),
          L_(HopLayout::make(p.variant, N)),
          dbl_(p.variant == Variant::DoubleSpring),
          stance_(StanceAffine::build(p, stance_domain(p.variant))),
          flight_sys_(dbl_ ? latched_flight_system(p)
                           : free_flight_system(p)),
          latch_sys_(latched_stance_system(p)),
          f_scale_(std::max(1.0, 0.02 * p.u_max * p.u_max)) {}

    const HopLayout& layout() const { return L_; }
    double effort_scale() const { return f_scale_; }

    double objective(const Eigen::VectorXd& v) const {
        return raw_effort(v) / f_scale_;
    }

    // Integral of u^2 over the stance; exact for the piecewise-linear
    // control profile.
    double raw_effort(const Eigen::VectorXd& v) const {
        const double h = v[L_.t_stance] / L_.N;
        double sum = 0.0;
        for (int k = 0; k < L_.N; ++k) {
            const double a = v[L_.control(k)];
            const double b = v[L_.control(k + 1)];
            sum += h / 3.0 * (a * a + a * b + b * b);
        }
        return sum;
    }

    Eigen::VectorXd residual(const Eigen::VectorXd& v) const {
        Eigen::VectorXd c(L_.m);
        const double l0 = p_.l0;

        Eigen::Vector4d knot0_target;
        double f_hs_td = 0.0;
        if (dbl_) {
            const Eigen::Vector4d apex(l0 + H_, v[L_.apex], 0.0,
                                       v[L_.apex + 1]);
            const Eigen::Vector4d x_td =
                flow(flight_sys_, v[L_.t_descent]).apply(apex);
            c[L_.r_touchdown] = x_td[0] + x_td[1] - l0;
            const State td = expand_latched_flight(x_td);
            const State post = apply_reset(p_, td, DomainId::D3);
            knot0_target = reduce_stance(post);
            const State post4 = apply_reset(p_, td, DomainId::D4);
            f_hs_td = constraint_force(
                p_, post4, 0.0, DomainId::D4)[hardstop_row(DomainId::D4)];
        } else {
            Vec6 apex;
            apex << l0 + H_, v[L_.apex], v[L_.apex + 2], 0.0, v[L_.apex + 1],
                v[L_.apex + 3];
            const Vec6 x_td = flow(flight_sys_, v[L_.t_descent]).apply(apex);
            c[L_.r_touchdown] = x_td[0] + x_td[2] - l0;
            const State post = apply_reset(
                p_, expand_full(x_td, DomainId::Flight), DomainId::Ground);
            knot0_target = reduce_stance(post);
        }
        c.segment<4>(L_.r_knot0) =
            v.segment<4>(L_.knot(0)) - knot0_target;

        const double h = v[L_.t_stance] / L_.N;
        std::vector<Eigen::Vector4d> f(L_.N + 1);
        for (int k = 0; k <= L_.N; ++k)
            f[k] = stance_.rhs(v.segment<4>(L_.knot(k)), v[L_.control(k)]);
        for (int k = 0; k < L_.N; ++k) {
            const Eigen::Vector4d xk = v.segment<4>(L_.knot(k));
            const Eigen::Vector4d xk1 = v.segment<4>(L_.knot(k + 1));
            const double uk = v[L_.control(k)];
            const double uk1 = v[L_.control(k + 1)];
            const Eigen::Vector4d xm =
                0.5 * (xk + xk1) + h / 8.0 * (f[k] - f[k + 1]);
            const Eigen::Vector4d fm =
                stance_.rhs(xm, 0.5 * (uk + uk1));
            c.segment<4>(L_.r_defects + 4 * k) =
                xk1 - xk - h / 6.0 * (f[k] + 4.0 * fm + f[k + 1]);
            if (dbl_) c[L_.r_slack_mid(k)] = xm[1] - v[L_.slack_mid(k)];
        }

        const Eigen::Vector4d x_end = v.segment<4>(L_.knot(L_.N));
        if (dbl_) {
            c[L_.r_exit] = x_end[1];
            const State pre =
                expand_stance(p_, x_end, DomainId::D3);
            const State post = apply_reset(p_, pre, DomainId::D4);
            c.segment<2>(L_.r_latch) =
                v.segment<2>(L_.x_latch) -
                Eigen::Vector2d(post.q[0], post.qd[0]);

            const Eigen::Vector2d x_lo =
                flow(latch_sys_, v[L_.t_latch])
                    .apply(v.segment<2>(L_.x_latch));
            const State s_lo = expand_latched_stance(p_, x_lo);
            c[L_.r_liftoff] =
                constraint_force(p_, s_lo, 0.0,
                                 DomainId::D4)[ground_row(DomainId::D4)];

            const Eigen::Vector4d x_asc(x_lo[0], l0 - x_lo[0], x_lo[1],
                                        -x_lo[1]);
            const Eigen::Vector4d x_apex =
                flow(flight_sys_, v[L_.t_ascent]).apply(x_asc);
            c[L_.r_closure + 0] = x_apex[0] - (l0 + H_);
            c[L_.r_closure + 1] = x_apex[2];
            c[L_.r_closure + 2] = x_apex[1] - v[L_.apex];
            c[L_.r_closure + 3] = x_apex[3] - v[L_.apex + 1];
        } else {
            c[L_.r_exit] =
                stance_.ground(x_end, v[L_.control(L_.N)]);
            const Vec6 x_asc =
                full_state(expand_stance(p_, x_end, DomainId::Ground));
            const Vec6 x_apex =
                flow(flight_sys_, v[L_.t_ascent]).apply(x_asc);
            c[L_.r_closure + 0] = x_apex[0] - (l0 + H_);
            c[L_.r_closure + 1] = x_apex[3];
            c[L_.r_closure + 2] = x_apex[1] - v[L_.apex];
            c[L_.r_closure + 3] = x_apex[4] - v[L_.apex + 1];
            c[L_.r_closure + 4] = x_apex[2] - v[L_.apex + 2];
            c[L_.r_closure + 5] = x_apex[5] - v[L_.apex + 3];
        }

        for (int k = 0; k <= L_.N; ++k)
            c[L_.r_slack + k] =
                stance_.ground(v.segment<4>(L_.knot(k)), v[L_.control(k)]) -
                v[L_.slack + k];
        if (dbl_) {
            const State s_latch = expand_latched_stance(
                p_, v.segment<2>(L_.x_latch));
            const Eigen::VectorXd F0 =
                constraint_force(p_, s_latch, 0.0, DomainId::D4);
            const Eigen::VectorXd Fu = constraint_force(
                p_, s_latch, v[L_.control(L_.N)], DomainId::D4);
            const int hs = hardstop_row(DomainId::D4);
            c[L_.r_slack + L_.N + 1] = F0[ground_row(DomainId::D4)] -
                                       v[L_.slack + L_.N + 1];
            c[L_.r_slack + L_.N + 2] = Fu[hs] - v[L_.slack + L_.N + 2];
            c[L_.r_slack + L_.N + 3] = -f_hs_td - v[L_.slack + L_.N + 3];
            for (int j = 1; j <= HopLayout::kLatchChecks; ++j) {
                const double tj = v[L_.t_latch] * j /
                                  (HopLayout::kLatchChecks + 1);
                const Eigen::Vector2d xj =
                    flow(latch_sys_, tj).apply(v.segment<2>(L_.x_latch));
                const double Nj = constraint_force(
                    p_, expand_latched_stance(p_, xj), 0.0,
                    DomainId::D4)[ground_row(DomainId::D4)];
                c[L_.r_slack + L_.N + 3 + j] =
                    Nj - v[L_.slack + L_.N + 3 + j];
            }
        }
        return c;
    }

    Eigen::VectorXd x_scale() const {
        Eigen::VectorXd s = Eigen::VectorXd::Ones(L_.n);
        auto pos = 0.1;
        auto vel = 1.0;
        for (int i = 0; i < L_.n_apex; ++i)
            s[L_.apex + i] = (i % 2 == 0) ? pos : vel;
        s[L_.t_descent] = s[L_.t_stance] = s[L_.t_ascent] = 0.1;
        if (dbl_) {
            s[L_.t_latch] = 0.1;
            s[L_.x_latch] = pos;
            s[L_.x_latch + 1] = vel;
        }
        for (int k = 0; k <= L_.N; ++k) {
            s[L_.knot(k) + 0] = pos;
            s[L_.knot(k) + 1] = pos;
            s[L_.knot(k) + 2] = vel;
            s[L_.knot(k) + 3] = vel;
            s[L_.control(k)] = std::max(1.0, 0.2 * p_.u_max);
        }
        const double f_ref = force_scale();
        for (int i = L_.slack; i < L_.n; ++i) s[i] = f_ref;
        if (dbl_)
            for (int k = 0; k < L_.N; ++k) s[L_.slack_mid(k)] = 0.01;
        return s;
    }

    Eigen::VectorXd c_scale() const {
        Eigen::VectorXd s = Eigen::VectorXd::Ones(L_.m);
        const double f_ref = force_scale();
        s[L_.r_touchdown] = 0.1;
        s.segment<4>(L_.r_knot0) << 0.1, 0.1, 1.0, 1.0;
        for (int k = 0; k < L_.N; ++k)
            s.segment<4>(L_.r_defects + 4 * k) << 0.01, 0.01, 0.1, 0.1;
        s[L_.r_exit] = dbl_ ? 0.01 : f_ref;
        if (dbl_) {
            s[L_.r_latch] = 0.1;
            s[L_.r_latch + 1] = 1.0;
            s[L_.r_liftoff] = f_ref;
            s.segment<4>(L_.r_closure) << 0.1, 1.0, 0.1, 1.0;
        } else {
            s.segment<6>(L_.r_closure) << 0.1, 1.0, 0.1, 1.0, 0.1, 1.0;
        }
        for (int i = L_.r_slack; i < L_.m; ++i) s[i] = f_ref;
        if (dbl_)
            for (int k = 0; k < L_.N; ++k) s[L_.r_slack_mid(k)] = 0.01;
        return s;
    }

    std::pair<Eigen::VectorXd, Eigen::VectorXd> bounds() const {
        Eigen::VectorXd lo(L_.n), hi(L_.n);
        const double big = 1e3;
        lo.setConstant(-big);
        hi.setConstant(big);
        for (int i = 0; i < L_.n_apex; i += 2) {
            lo[L_.apex + i] = -0.2;
            hi[L_.apex + i] = 0.2;
            lo[L_.apex + i + 1] = -10.0;
            hi[L_.apex + i + 1] = 10.0;
        }
        if (!dbl_) {
            lo[L_.apex] = 0.0;
            hi[L_.apex] = p_.y_max;
        }
        lo[L_.t_descent] = lo[L_.t_ascent] = 0.01;
        hi[L_.t_descent] = hi[L_.t_ascent] = 1.5;
        lo[L_.t_stance] = 0.02;
        hi[L_.t_stance] = 0.8;
        if (dbl_) {
            lo[L_.t_latch] = 0.004;
            hi[L_.t_latch] = 0.5;
            lo[L_.x_latch] = 0.03;
            hi[L_.x_latch] = 2.0;
            lo[L_.x_latch + 1] = -15.0;
            hi[L_.x_latch + 1] = 15.0;
        }
        for (int k = 0; k <= L_.N; ++k) {
            lo[L_.knot(k) + 0] = 0.03;
            hi[L_.knot(k) + 0] = 2.0;
            lo[L_.knot(k) + 1] =
                dbl_ ? L_.clearance(double(k) / L_.N) : 0.0;
            hi[L_.knot(k) + 1] = p_.y_max;
            lo[L_.knot(k) + 2] = -15.0;
            hi[L_.knot(k) + 2] = 15.0;
            lo[L_.knot(k) + 3] = -15.0;
            hi[L_.knot(k) + 3] = 15.0;
            lo[L_.control(k)] = -p_.u_max;
            hi[L_.control(k)] = p_.u_max;
        }
        if (dbl_) hi[L_.knot(L_.N) + 3] = -0.02;
        for (int i = L_.slack; i < L_.n; ++i) {
            lo[i] = 0.0;
            hi[i] = 1e5;
        }
        if (dbl_) {
            lo[L_.slack + L_.N + 2] = 0.5;
            lo[L_.slack + L_.N + 3] = 0.5;
            for (int k = 0; k < L_.N; ++k)
                lo[L_.slack_mid(k)] = L_.clearance((k + 0.5) / L_.N);
        }
        return {lo, hi};
    }

    // Seed from a simulated drop out of the target apex. The single variant
    // hops passively; the double variant needs the mover slammed onto its
    // stop while the spring is still loaded, so a few constant stance
    // forces are tried and the first hop with a load-bearing latched phase
    // wins. A kinematic sketch is the last resort.
    Eigen::VectorXd initial_guess() const {
        if (dbl_) {
            double best_gap = std::numeric_limits<double>::infinity();
            std::optional<Eigen::VectorXd> best;
            for (double u0 : {40.0, 80.0, 120.0, 20.0, 160.0}) {
                double gap = 0.0;
                auto v = guess_from_sim(u0, gap);
                if (v && gap < best_gap) {
                    best_gap = gap;
                    best = std::move(v);
                }
            }
            if (best) return *best;
        } else {
            double gap = 0.0;
            if (auto v = guess_from_sim(0.0, gap)) return *v;
        }
        return synthetic_guess();
    }

    // Resamples a converged coarser-mesh solution onto this grid, so every
    // mesh refines the same local optimum instead of hunting for its own.
    // States are read off the coarse solution's cubic Hermite interpolant,
    // controls off its linear one.
    Eigen::VectorXd refine_from(const HopLayout& Lc,
                                const Eigen::VectorXd& xc) const {
        Eigen::VectorXd v = Eigen::VectorXd::Zero(L_.n);
        v.segment(L_.apex, L_.n_apex) = xc.segment(Lc.apex, Lc.n_apex);
        v[L_.t_descent] = xc[Lc.t_descent];
        v[L_.t_stance] = xc[Lc.t_stance];
        v[L_.t_ascent] = xc[Lc.t_ascent];
        if (L_.x_latch >= 0) {
            v.segment<2>(L_.x_latch) = xc.segment<2>(Lc.x_latch);
            v[L_.t_latch] = xc[Lc.t_latch];
        }
        const double hc = xc[Lc.t_stance] / Lc.N;
        for (int k = 0; k <= L_.N; ++k) {
            const double c = double(k) * Lc.N / L_.N;
            const int lo = std::min(int(c), Lc.N - 1);
            const double w = c - lo;
            const Eigen::Vector4d x0 = xc.segment<4>(Lc.knot(lo));
            const Eigen::Vector4d x1 = xc.segment<4>(Lc.knot(lo + 1));
            const double u0 = xc[Lc.control(lo)];
            const double u1 = xc[Lc.control(lo + 1)];
            const Eigen::Vector4d f0 = stance_.rhs(x0, u0);
            const Eigen::Vector4d f1 = stance_.rhs(x1, u1);
            const double w2 = w * w;
            const double w3 = w2 * w;
            v.segment<4>(L_.knot(k)) =
                (2.0 * w3 - 3.0 * w2 + 1.0) * x0 +
                (w3 - 2.0 * w2 + w) * hc * f0 +
                (-2.0 * w3 + 3.0 * w2) * x1 + (w3 - w2) * hc * f1;
            v[L_.control(k)] = (1.0 - w) * u0 + w * u1;
        }
        fill_slacks(v);
        return v;
    }

    // Packages a solver result over this transcription as a HopSolution.
    HopSolution extract(const NlpResult& res, int pre_outer = 0,
                        int pre_inner = 0) const {
        HopSolution sol;
        sol.params = p_;
        sol.hop_height = H_;
        sol.intervals = L_.N;
        sol.descent_time = res.x[L_.t_descent];
        sol.stance_time = res.x[L_.t_stance];
        sol.latched_time = L_.t_latch >= 0 ? res.x[L_.t_latch] : 0.0;
        sol.ascent_time = res.x[L_.t_ascent];
        sol.effort = raw_effort(res.x);
        sol.constraint_violation = res.constraint_violation;
        sol.converged = res.converged;
        sol.outer_iterations = pre_outer + res.outer_iterations;
        sol.inner_iterations = pre_inner + res.inner_iterations;

        sol.apex.domain = flight_domain(p_.variant);
        sol.apex.t_local = 0.0;
        if (dbl_) {
            sol.apex.q = Vec3(p_.l0 + H_, 0.0, res.x[L_.apex]);
            sol.apex.qd = Vec3(0.0, 0.0, res.x[L_.apex + 1]);
        } else {
            sol.apex.q = Vec3(p_.l0 + H_, res.x[L_.apex],
                              res.x[L_.apex + 2]);
            sol.apex.qd = Vec3(0.0, res.x[L_.apex + 1], res.x[L_.apex + 3]);
        }

        sol.stance_control.reserve(L_.N + 1);
        for (int k = 0; k <= L_.N; ++k)
            sol.stance_control.push_back(
                {sol.stance_time * k / L_.N, res.x[L_.control(k)]});
        return sol;
    }

    void fill_slacks(Eigen::VectorXd& v) const {
        for (int k = 0; k <= L_.N; ++k)
            v[L_.slack + k] = std::max(
                0.0, stance_.ground(v.segment<4>(L_.knot(k)),
                                    v[L_.control(k)]));
        if (dbl_) {
            const double h = v[L_.t_stance] / L_.N;
            for (int k = 0; k < L_.N; ++k) {
                const Eigen::Vector4d xk = v.segment<4>(L_.knot(k));
                const Eigen::Vector4d xk1 = v.segment<4>(L_.knot(k + 1));
                const Eigen::Vector4d xm =
                    0.5 * (xk + xk1) +
                    h / 8.0 * (stance_.rhs(xk, v[L_.control(k)]) -
                               stance_.rhs(xk1, v[L_.control(k + 1)]));
                v[L_.slack_mid(k)] =
                    std::max(L_.clearance((k + 0.5) / L_.N), xm[1]);
            }

            const State s_latch =
                expand_latched_stance(p_, v.segment<2>(L_.x_latch));
            const Eigen::VectorXd F0 =
                constraint_force(p_, s_latch, 0.0, DomainId::D4);
            const Eigen::VectorXd Fu = constraint_force(
                p_, s_latch, v[L_.control(L_.N)], DomainId::D4);
            const int hs = hardstop_row(DomainId::D4);
            v[L_.slack + L_.N + 1] =
                std::max(0.0, F0[ground_row(DomainId::D4)]);
            v[L_.slack + L_.N + 2] = std::max(0.5, Fu[hs]);

            const Eigen::Vector4d apex(p_.l0 + H_, v[L_.apex], 0.0,
                                       v[L_.apex + 1]);
            const Eigen::Vector4d x_td =
                flow(flight_sys_, v[L_.t_descent]).apply(apex);
            const State post4 = apply_reset(
                p_, expand_latched_flight(x_td), DomainId::D4);
            const double f_hs_td = constraint_force(
                p_, post4, 0.0, DomainId::D4)[hardstop_row(DomainId::D4)];
            v[L_.slack + L_.N + 3] = std::max(0.5, -f_hs_td);

            for (int j = 1; j <= HopLayout::kLatchChecks; ++j) {
                const double tj = v[L_.t_latch] * j /
                                  (HopLayout::kLatchChecks + 1);
                const Eigen::Vector2d xj =
                    flow(latch_sys_, tj).apply(v.segment<2>(L_.x_latch));
                const double Nj = constraint_force(
                    p_, expand_latched_stance(p_, xj), 0.0,
                    DomainId::D4)[ground_row(DomainId::D4)];
                v[L_.slack + L_.N + 3 + j] = std::max(0.0, Nj);
            }
        }
    }

  private:
    std::optional<Eigen::VectorXd> guess_from_sim(double u0,
                                                  double& apex_gap) const {
        State s0;
        s0.domain = flight_domain(p_.variant);
        s0.q = Vec3(p_.l0 + H_, dbl_ ? 0.0 : 0.05, 0.0);
        s0.qd = Vec3::Zero();

        ControlPolicy pol;
        if (u0 != 0.0) {
            pol.feedforward.knots = {{0.0, u0}, {1.0, u0}};
            pol.feedforward.domain_scope = {
                stance_domain(p_.variant)};
        }

        IntegratorConfig cfg;
        cfg.rel_tol = 1e-8;
        cfg.abs_tol = 1e-10;
        cfg.sample_dt = 1e-3;
        StopCondition stop;
        stop.max_hops = 2;
        stop.max_time = 3.0;
        stop.stop_at_apex = true;

        HybridTrajectory traj;
        try {
            traj = simulate_hybrid(p_, s0, pol, stop, cfg);
        } catch (const std::runtime_error&) {
            return std::nullopt;
        }
        if (!pattern_matches(traj)) return std::nullopt;

        Eigen::VectorXd v = Eigen::VectorXd::Zero(L_.n);
        const auto& ph = traj.phases;
        v[L_.t_descent] = ph[0].duration;
        v[L_.t_stance] = ph[1].duration;
        if (dbl_) {
            v[L_.t_latch] = ph[2].duration;
            v[L_.t_ascent] = ph[3].duration;
            const State& latch0 = ph[2].samples.front().state;
            if (constraint_force(p_, latch0, 0.0,
                                 DomainId::D4)[ground_row(DomainId::D4)] <=
                0.0)
                return std::nullopt;
            v.segment<2>(L_.x_latch) = reduce_latched_stance(latch0);
        } else {
            v[L_.t_ascent] = ph[2].duration;
        }

        const State& apex_end = traj.final_state();
        apex_gap = std::abs(apex_end.q[0] - (p_.l0 + H_));
        if (dbl_) {
            v[L_.apex] = apex_end.q[2];
            v[L_.apex + 1] = apex_end.qd[2];
        } else {
            v[L_.apex + 0] = apex_end.q[1];
            v[L_.apex + 1] = apex_end.qd[1];
            v[L_.apex + 2] = apex_end.q[2];
            v[L_.apex + 3] = apex_end.qd[2];
        }

        for (int k = 0; k <= L_.N; ++k) {
            const double tau = ph[1].start_time() +
                               v[L_.t_stance] * k / L_.N;
            const State sk = sample_phase(ph[1], tau);
            v.segment<4>(L_.knot(k)) = reduce_stance(sk);
            v[L_.control(k)] = u0;
        }
        fill_slacks(v);
        return v;
    }

    bool pattern_matches(const HybridTrajectory& traj) const {
        const auto want = dbl_
                              ? std::vector<DomainId>{DomainId::D1,
                                                      DomainId::D3,
                                                      DomainId::D4,
                                                      DomainId::D1}
                              : std::vector<DomainId>{DomainId::Flight,
                                                      DomainId::Ground,
                                                      DomainId::Flight};
        if (traj.phases.size() != want.size()) return false;
        for (size_t i = 0; i < want.size(); ++i)
            if (traj.phases[i].domain != want[i]) return false;
        return traj.stop_reason == StopReason::ApexSection;
    }

    static State sample_phase(const PhaseTrajectory& ph, double t) {
        const auto& ss = ph.samples;
        if (t <= ss.front().t) return ss.front().state;
        if (t >= ss.back().t) return ss.back().state;
        size_t i = 1;
        while (i + 1 < ss.size() && ss[i].t < t) ++i;
        const auto& a = ss[i - 1];
        const auto& b = ss[i];
        const double w =
            b.t > a.t ? (t - a.t) / (b.t - a.t) : 0.0;
        State s = a.state;
        s.q = (1.0 - w) * a.state.q + w * b.state.q;
        s.qd = (1.0 - w) * a.state.qd + w * b.state.qd;
        return s;
    }

    Eigen::VectorXd synthetic_guess() const {
        Eigen::VectorXd v = Eigen::VectorXd::Zero(L_.n);
        const double T_fall = std::sqrt(2.0 * H_ / p_.g);
        v[L_.t_descent] = v[L_.t_ascent] = std::max(0.02, T_fall);
        v[L_.t_stance] = 0.15;
        if (dbl_) v[L_.t_latch] = 0.03;
        const double amp = 0.04;
        const double vz = std::sqrt(2.0 * p_.g * H_);
        for (int k = 0; k <= L_.N; ++k) {
            const double tau = double(k) / L_.N;
            const double pi = 3.14159265358979323846;
            v[L_.knot(k) + 0] = p_.l0 - amp * std::sin(pi * tau);
            v[L_.knot(k) + 2] =
                -vz * std::cos(pi * tau);
            v[L_.knot(k) + 1] =
                dbl_ ? 0.4 * p_.y_max * std::sin(pi * tau) : 0.0;
            v[L_.knot(k) + 3] = dbl_ ? 0.4 * p_.y_max * pi /
                                           v[L_.t_stance] *
                                           std::cos(pi * tau)
                                     : 0.0;
            v[L_.control(k)] = 0.0;
        }
        if (dbl_) {
            v[L_.knot(L_.N) + 3] = -0.05;
            v.segment<2>(L_.x_latch) =
                Eigen::Vector2d(v[L_.knot(L_.N)], 0.8 * vz);
        }
        if (!dbl_) v[L_.apex] = 0.05;
        fill_slacks(v);
        return v;
    }

    double force_scale() const { return 10.0 * p_.M0 * p_.g; }

    ModelParams p_;
    double H_;
    HopLayout L_;
    bool dbl_;
    StanceAffine stance_;
    AffineSystem flight_sys_;
    AffineSystem latch_sys_;
    double f_scale_;
};

inline NlpResult solve_stage(const HopTranscription& tr,
                             const Eigen::VectorXd& x0,
                             const NlpOptions& opts) {
    const HopLayout& L = tr.layout();
    NlpProblem np;
    np.n = L.n;
    np.m = L.m;
    np.objective = [&tr](const Eigen::VectorXd& v) {
        return tr.objective(v);
    };
    np.constraints = [&tr](const Eigen::VectorXd& v) {
        return tr.residual(v);
    };
    std::tie(np.lower, np.upper) = tr.bounds();
    np.x_scale = tr.x_scale();
    np.c_scale = tr.c_scale();
    return solve_nlp(np, x0, opts);
}

}  // namespace detail

inline HopSolution solve_hop(const HopProblem& hp) {
    hp.params.validate();
    if (!(hp.hop_height > 0.0) || hp.hop_height > 1.0)
        throw std::invalid_argument("hop height must lie in (0, 1]");
    if (hp.intervals < 4)
        throw std::invalid_argument("need at least 4 stance intervals");

    constexpr int kCoarseIntervals = 16;
    constexpr double kLadderStart = 0.05;
    constexpr double kLadderStep = 0.05;
    constexpr double kMinStep = 0.0125;
    constexpr int kMaxStages = 96;

    // The stance landscape holds competing local minima whose basins
    // shift with the target height, and the cold guess only lands
    // reliably at low targets. A coarse mesh smooths the landscape, so
    // the solve climbs a height ladder there first, warm-starting each
    // rung from the one below, which keeps sweeps over heights on one
    // consistent solution family; the requested mesh then polishes the
    // final rung. A rung that fails to converge is retried from the
    // last good rung with a halved step; once the step is at its floor
    // the base slides forward so a dead patch cannot stall the climb.
    const int coarse_n = std::min(hp.intervals, kCoarseIntervals);
    const detail::HopLayout coarse_l =
        detail::HopLayout::make(hp.params.variant, coarse_n);

    Eigen::VectorXd warm;
    double base = 0.0;
    double step = kLadderStep;
    double rung = std::min(hp.hop_height, kLadderStart);
    int pre_outer = 0;
    int pre_inner = 0;
    NlpResult last;
    bool reached_target = false;
    for (int stage = 0; stage < kMaxStages && !reached_target; ++stage) {
        const detail::HopTranscription trc(hp.params, rung, coarse_n);
        const Eigen::VectorXd x0 = warm.size() ? trc.refine_from(coarse_l, warm)
                                               : trc.initial_guess();
        const NlpResult res = detail::solve_stage(trc, x0, hp.nlp);
        const bool good = res.converged || res.constraint_violation < 1e-6;
        const bool at_target = rung >= hp.hop_height - 1e-12;
        if (at_target && (good || step <= kMinStep + 1e-15 ||
                          stage + 2 >= kMaxStages)) {
            last = res;
            reached_target = true;
            break;
        }
        pre_outer += res.outer_iterations;
        pre_inner += res.inner_iterations;
        if (good) {
            warm = res.x;
            base = rung;
            step = kLadderStep;
        } else if (step > kMinStep + 1e-15) {
            step = std::max(0.5 * step, kMinStep);
        } else {
            base += kMinStep;
        }
        rung = std::min(hp.hop_height, std::max(base + step, kMinStep));
    }
    if (!reached_target) {
        const detail::HopTranscription trc(hp.params, hp.hop_height, coarse_n);
        const Eigen::VectorXd x0 = warm.size() ? trc.refine_from(coarse_l, warm)
                                               : trc.initial_guess();
        last = detail::solve_stage(trc, x0, hp.nlp);
    }
    if (last.converged || last.constraint_violation < 1e-6) warm = last.x;

    const detail::HopTranscription fine(hp.params, hp.hop_height,
                                        hp.intervals);
    NlpResult res;
    if (hp.intervals == coarse_n) {
        res = last;
    } else {
        pre_outer += last.outer_iterations;
        pre_inner += last.inner_iterations;
        const Eigen::VectorXd x0 = warm.size()
                                       ? fine.refine_from(coarse_l, warm)
                                       : fine.initial_guess();
        res = detail::solve_stage(fine, x0, hp.nlp);
    }

    // The continued family is not always the best local minimum at the
    // target height; a cold coarse solve at the target, refined the same
    // way, occasionally lands in a cheaper basin, so take the better of
    // the two.
    const auto usable = [](const NlpResult& r) {
        return r.converged || r.constraint_violation < 1e-6;
    };
    NlpResult alt;
    bool have_alt = false;
    {
        const detail::HopTranscription ctr(hp.params, hp.hop_height,
                                           coarse_n);
        NlpResult seed =
            detail::solve_stage(ctr, ctr.initial_guess(), hp.nlp);
        if (hp.intervals == coarse_n) {
            alt = seed;
            have_alt = usable(alt);
            if (!have_alt) {
                pre_outer += alt.outer_iterations;
                pre_inner += alt.inner_iterations;
            }
        } else {
            pre_outer += seed.outer_iterations;
            pre_inner += seed.inner_iterations;
            if (usable(seed)) {
                alt = detail::solve_stage(
                    fine, fine.refine_from(coarse_l, seed.x), hp.nlp);
                have_alt = usable(alt);
                if (!have_alt) {
                    pre_outer += alt.outer_iterations;
                    pre_inner += alt.inner_iterations;
                }
            }
        }
    }
    if (have_alt &&
        (!usable(res) || fine.raw_effort(alt.x) < fine.raw_effort(res.x))) {
        pre_outer += res.outer_iterations;
        pre_inner += res.inner_iterations;
        return fine.extract(alt, pre_outer, pre_inner);
    }
    if (have_alt) {
        pre_outer += alt.outer_iterations;
        pre_inner += alt.inner_iterations;
    }
    return fine.extract(res, pre_outer, pre_inner);
}

struct HopValidation {
    bool pattern_ok = false;
    StopReason stop_reason = StopReason::TimeLimit;
    double apex_height = 0.0;
    double apex_error = 0.0;
    double period = 0.0;
    HybridTrajectory trajectory;
};

// Replays the optimized cycle through the event-driven simulator and
// reports how well the next apex reproduces the designed one.
inline HopValidation validate_solution(const HopSolution& sol,
                                       const IntegratorConfig& cfg = {}) {
    StopCondition stop;
    stop.max_hops = 3;
    stop.max_time = std::max(1.0, 5.0 * sol.period());
    stop.stop_at_apex = true;

    HopValidation val;
    val.trajectory =
        simulate_hybrid(sol.params, sol.apex, sol.policy(), stop, cfg);
    const auto& traj = val.trajectory;
    val.stop_reason = traj.stop_reason;

    const bool dbl = sol.params.variant == Variant::DoubleSpring;
    const auto want = dbl ? std::vector<DomainId>{DomainId::D1, DomainId::D3,
                                                  DomainId::D4, DomainId::D1}
                          : std::vector<DomainId>{DomainId::Flight,
                                                  DomainId::Ground,
                                                  DomainId::Flight};
    val.pattern_ok = traj.phases.size() == want.size() &&
                     traj.stop_reason == StopReason::ApexSection;
    if (val.pattern_ok)
        for (size_t i = 0; i < want.size(); ++i)
            if (traj.phases[i].domain != want[i]) val.pattern_ok = false;

    val.apex_height = traj.final_state().q[0];
    val.apex_error = std::abs(val.apex_height -
                              (sol.params.l0 + sol.hop_height)) /
                     sol.hop_height;
    val.period = traj.end_time();
    return val;
}

}  // namespace hopper
