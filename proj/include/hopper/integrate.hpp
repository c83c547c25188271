#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <hopper/control.hpp>
#include <hopper/errors.hpp>
#include <hopper/hybrid.hpp>
#include <hopper/model.hpp>

namespace hopper {

struct IntegratorConfig {
    double rel_tol = 1e-10;
    double abs_tol = 1e-12;
    double h_init = 1e-4;
    double h_min = 1e-14;
    double h_max = 0.25;
    long max_steps = 5'000'000;
    // Fixed step disables the error controller (order studies).
    std::optional<double> fixed_step;
    // When set, samples land on a uniform grid instead of step endpoints;
    // the exact phase-final state is always appended.
    std::optional<double> sample_dt;
    double diverge_norm = 1e6;
};

struct Sample {
    double t = 0.0;
    State state;
    double u = 0.0;
    Eigen::VectorXd F_v;
};

struct PhaseTrajectory {
    DomainId domain = DomainId::D1;
    std::vector<Sample> samples;
    std::optional<std::pair<Guard, DomainId>> exit_event;
    double duration = 0.0;

    double start_time() const { return samples.front().t; }
    double end_time() const { return samples.back().t; }
    const State& final_state() const { return samples.back().state; }
};

enum class StopReason { HopLimit, TimeLimit, ApexSection };

inline const char* to_string(StopReason r) {
    switch (r) {
        case StopReason::HopLimit: return "HopLimit";
        case StopReason::TimeLimit: return "TimeLimit";
        case StopReason::ApexSection: return "ApexSection";
    }
    return "?";
}

struct StopCondition {
    int max_hops = 20;
    double max_time = 30.0;
    // Ends the run at the first armed apex (body velocity crossing zero
    // while airborne) instead; used for return-map evaluation.
    bool stop_at_apex = false;
};

struct Junction {
    State pre;
    State post;
    GuardKind kind = GuardKind::Touchdown;
    double t = 0.0;
};

struct HybridTrajectory {
    std::vector<PhaseTrajectory> phases;
    std::vector<Junction> resets;
    StopReason stop_reason = StopReason::TimeLimit;

    const State& final_state() const { return phases.back().final_state(); }
    double end_time() const { return phases.back().end_time(); }
};

namespace detail {

// Dormand-Prince 5(4) pair with the first-same-as-last property and a
// quartic interpolant for dense output.
inline constexpr double RK_C[7] = {0.0,     1.0 / 5, 3.0 / 10, 4.0 / 5,
                                   8.0 / 9, 1.0,     1.0};
inline constexpr double RK_A21 = 1.0 / 5;
inline constexpr double RK_A31 = 3.0 / 40, RK_A32 = 9.0 / 40;
inline constexpr double RK_A41 = 44.0 / 45, RK_A42 = -56.0 / 15,
                        RK_A43 = 32.0 / 9;
inline constexpr double RK_A51 = 19372.0 / 6561, RK_A52 = -25360.0 / 2187,
                        RK_A53 = 64448.0 / 6561, RK_A54 = -212.0 / 729;
inline constexpr double RK_A61 = 9017.0 / 3168, RK_A62 = -355.0 / 33,
                        RK_A63 = 46732.0 / 5247, RK_A64 = 49.0 / 176,
                        RK_A65 = -5103.0 / 18656;
inline constexpr double RK_B1 = 35.0 / 384, RK_B3 = 500.0 / 1113,
                        RK_B4 = 125.0 / 192, RK_B5 = -2187.0 / 6784,
                        RK_B6 = 11.0 / 84;
// Difference between the fifth- and fourth-order weights.
inline constexpr double RK_E1 = 71.0 / 57600, RK_E3 = -71.0 / 16695,
                        RK_E4 = 71.0 / 1920, RK_E5 = -17253.0 / 339200,
                        RK_E6 = 22.0 / 525, RK_E7 = -1.0 / 40;
// Interpolant: y(t0 + th*h) = y0 + h * sum_j th^(j+1) * sum_i P[i][j] k_i.
inline constexpr double RK_P[7][4] = {
    {1.0, -8048581381.0 / 2820520608.0, 8663915743.0 / 2820520608.0,
     -12715105075.0 / 11282082432.0},
    {0.0, 0.0, 0.0, 0.0},
    {0.0, 131558114200.0 / 32700410799.0, -68118460800.0 / 10900136933.0,
     87487479700.0 / 32700410799.0},
    {0.0, -1754552775.0 / 470086768.0, 14199869525.0 / 1410260304.0,
     -10690763975.0 / 1880347072.0},
    {0.0, 127303824393.0 / 49829197408.0, -318862633887.0 / 49829197408.0,
     701980252875.0 / 199316789632.0},
    {0.0, -282668133.0 / 205662961.0, 2019193451.0 / 616988883.0,
     -1453857185.0 / 822651844.0},
    {0.0, 40617522.0 / 29380423.0, -110615467.0 / 29380423.0,
     69997945.0 / 29380423.0},
};

inline constexpr double GUARD_BAND_REL = 1e-9;

inline Vec6 pack_state(const State& s) {
    Vec6 y;
    y.head<3>() = s.q;
    y.tail<3>() = s.qd;
    return y;
}

// Entry states must already sit on the domain's constraint surface; the
// integrator preserves the surface but cannot reach it.
inline void check_phase_entry(const ModelParams& p, DomainId d,
                              const State& s) {
    const JacobianMatrix J = constraint_jacobian(d);
    if (J.rows() > 0 && (J * s.qd).norm() > 1e-6 * (1.0 + s.qd.norm()))
        throw std::invalid_argument(
            std::string("entry state violates the velocity constraints of "
                        "domain ") +
            to_string(d));
    if ((d == DomainId::D1 || d == DomainId::D4) && std::abs(s.q[1]) > 1e-6)
        throw std::invalid_argument(
            "entry state must have the mover on the hardstop");
    const bool grounded = ground_row(d) >= 0;
    if (grounded && std::abs(foot_height(p, s)) > 1e-6)
        throw std::invalid_argument(
            "entry state must have the foot on the ground");
    if (!grounded && d != DomainId::D2 && d != DomainId::Flight &&
        foot_height(p, s) < -1e-6)
        throw std::invalid_argument("entry state has the foot underground");
}

struct WatchedGuard {
    Guard guard;
    double scale = 1.0;
    bool armed = false;
    double v = 0.0;
    bool fired = false;
    bool apex = false;
};

struct PhaseResult {
    PhaseTrajectory traj;
    bool apex_stop = false;
};

// Integrates one domain until a guard fires, the apex section is hit, or
// the time budget runs out. u_fn(state, t_global) supplies the commanded
// force; the state handed to it carries the domain-local clock.
template <class UFn>
PhaseResult integrate_phase(const ModelParams& p, DomainId d, const State& s0,
                            UFn&& u_fn, double t0, double budget,
                            const IntegratorConfig& cfg, bool watch_apex,
                            bool full_graph) {
    check_phase_entry(p, d, s0);
    if (!(budget >= 0.0))
        throw std::invalid_argument("integration budget must be >= 0");

    PhaseResult out;
    PhaseTrajectory& traj = out.traj;
    traj.domain = d;
    const double t_end = t0 + budget;

    auto unpack = [&](double t, const Vec6& y) {
        State s;
        s.q = y.head<3>();
        s.qd = y.tail<3>();
        s.domain = d;
        s.t_local = t - t0;
        return s;
    };
    auto rhs = [&](double t, const Vec6& y) -> Vec6 {
        const State s = unpack(t, y);
        const double u = u_fn(s, t);
        Vec6 dy;
        dy.head<3>() = s.qd;
        dy.tail<3>() = constrained_accel(p, s, u, d).first;
        return dy;
    };
    auto emit = [&](double t, const State& s, double u) {
        traj.samples.push_back({t, s, u, constraint_force(p, s, u, d)});
    };

    std::vector<WatchedGuard> watches;
    {
        const DomainSpec spec = domain_spec(p, d, full_graph);
        for (const Guard& g : spec.guards)
            watches.push_back({g, guard_scale(p, g.kind)});
        if (watch_apex && ground_row(d) < 0) {
            WatchedGuard w{Guard{GuardKind::Touchdown,
                                 [](const ModelParams&, const State& s,
                                    double) { return s.qd[0]; }},
                           1.0};
            w.apex = true;
            watches.push_back(std::move(w));
        }
    }

    double t = t0;
    Vec6 y = pack_state(s0);
    {
        const State s = unpack(t, y);
        const double u0 = u_fn(s, t);
        for (auto& w : watches) {
            w.v = w.guard.value_fn(p, s, u0);
            w.armed = w.v > GUARD_BAND_REL * w.scale;
        }
        emit(t, s, u0);
    }

    Vec6 k1 = rhs(t, y), k2, k3, k4, k5, k6, k7;
    double h = cfg.fixed_step ? *cfg.fixed_step
                              : std::min(cfg.h_init, cfg.h_max);
    double next_sample = cfg.sample_dt ? t0 + *cfg.sample_dt : 0.0;
    long steps = 0;

    const double t_eps = 1e-14 * std::max(1.0, std::abs(t_end));
    while (t_end - t > t_eps) {
        if (++steps > cfg.max_steps)
            throw StepFailure(std::string("step budget exhausted in domain ") +
                              to_string(d));
        const double hs = std::min({h, cfg.h_max, t_end - t});

        const Vec6 y2 = y + hs * (RK_A21 * k1);
        k2 = rhs(t + RK_C[1] * hs, y2);
        const Vec6 y3 = y + hs * (RK_A31 * k1 + RK_A32 * k2);
        k3 = rhs(t + RK_C[2] * hs, y3);
        const Vec6 y4 = y + hs * (RK_A41 * k1 + RK_A42 * k2 + RK_A43 * k3);
        k4 = rhs(t + RK_C[3] * hs, y4);
        const Vec6 y5 = y + hs * (RK_A51 * k1 + RK_A52 * k2 + RK_A53 * k3 +
                                  RK_A54 * k4);
        k5 = rhs(t + RK_C[4] * hs, y5);
        const Vec6 y6 = y + hs * (RK_A61 * k1 + RK_A62 * k2 + RK_A63 * k3 +
                                  RK_A64 * k4 + RK_A65 * k5);
        k6 = rhs(t + hs, y6);
        const Vec6 y1 = y + hs * (RK_B1 * k1 + RK_B3 * k3 + RK_B4 * k4 +
                                  RK_B5 * k5 + RK_B6 * k6);
        k7 = rhs(t + hs, y1);

        double err = 0.0;
        if (!cfg.fixed_step) {
            const Vec6 ev = hs * (RK_E1 * k1 + RK_E3 * k3 + RK_E4 * k4 +
                                  RK_E5 * k5 + RK_E6 * k6 + RK_E7 * k7);
            double acc = 0.0;
            for (int i = 0; i < 6; ++i) {
                const double sc =
                    cfg.abs_tol +
                    cfg.rel_tol * std::max(std::abs(y[i]), std::abs(y1[i]));
                const double r = ev[i] / sc;
                acc += r * r;
            }
            err = std::sqrt(acc / 6.0);
            if (!std::isfinite(err)) err = 10.0;
            if (err > 1.0) {
                h = hs * std::max(0.2, 0.9 * std::pow(err, -0.2));
                if (h < cfg.h_min)
                    throw StepFailure(
                        std::string("step size underflow in domain ") +
                        to_string(d) + " at t = " + std::to_string(t));
                continue;
            }
        }

        if (!y1.allFinite() || y1.norm() > cfg.diverge_norm)
            throw SimulationDiverged(
                std::string("state norm exceeded bound in domain ") +
                to_string(d) + " at t = " + std::to_string(t + hs));

        std::array<Vec6, 4> dc;
        for (int j = 0; j < 4; ++j)
            dc[j] = RK_P[0][j] * k1 + RK_P[2][j] * k3 + RK_P[3][j] * k4 +
                    RK_P[4][j] * k5 + RK_P[5][j] * k6 + RK_P[6][j] * k7;
        auto dense = [&](double th) -> Vec6 {
            return y +
                   (hs * th) * (dc[0] + th * (dc[1] + th * (dc[2] + th * dc[3])));
        };
        auto eval_watch = [&](const WatchedGuard& w, double th) {
            const double ts = t + th * hs;
            const State ss = unpack(ts, dense(th));
            return w.guard.value_fn(p, ss, u_fn(ss, ts));
        };
        auto bisect = [&](const WatchedGuard& w, double a, double b) {
            for (int it = 0; it < 200 && (b - a) * hs > 1e-13; ++it) {
                const double m = 0.5 * (a + b);
                (eval_watch(w, m) > 0.0 ? a : b) = m;
            }
            return 0.5 * (a + b);
        };

        struct Candidate {
            double theta;
            WatchedGuard* w;
        };
        std::vector<Candidate> candidates;
        constexpr double thetas[4] = {0.25, 0.5, 0.75, 1.0};
        for (int si = 0; si < 4; ++si) {
            const double th = thetas[si];
            const double ts = t + th * hs;
            const State ss = unpack(ts, dense(th));
            const double us = u_fn(ss, ts);
            for (auto& w : watches) {
                if (w.fired) continue;
                const double v = w.guard.value_fn(p, ss, us);
                if (!w.armed) {
                    w.armed = v > GUARD_BAND_REL * w.scale;
                    w.v = v;
                    continue;
                }
                if (w.v > 0.0 && v <= 0.0) {
                    const double a = si == 0 ? 0.0 : thetas[si - 1];
                    candidates.push_back({bisect(w, a, th), &w});
                    w.fired = true;
                }
                w.v = v;
            }
        }

        if (!candidates.empty()) {
            const auto lt = [](const Candidate& a, const Candidate& b) {
                return a.theta < b.theta;
            };
            const Candidate& first =
                *std::min_element(candidates.begin(), candidates.end(), lt);
            for (const Candidate& c : candidates) {
                if (c.w == first.w || c.w->apex || first.w->apex) continue;
                if (c.w->guard.kind != first.w->guard.kind &&
                    (c.theta - first.theta) * hs < 1e-9)
                    throw AmbiguousEvent(
                        std::string("guards ") +
                        to_string(first.w->guard.kind) + " and " +
                        to_string(c.w->guard.kind) +
                        " fire within 1 ns in domain " + to_string(d));
            }
            const double te = t + first.theta * hs;
            const State se = unpack(te, dense(first.theta));
            const double ue = u_fn(se, te);
            if (cfg.sample_dt)
                while (next_sample < te - 1e-12) {
                    const double th = (next_sample - t) / hs;
                    const State ss = unpack(next_sample, dense(th));
                    emit(next_sample, ss, u_fn(ss, next_sample));
                    next_sample += *cfg.sample_dt;
                }
            emit(te, se, ue);
            traj.duration = te - t0;
            if (first.w->apex) {
                out.apex_stop = true;
                return out;
            }
            const DomainId target =
                resolve_target(p, se, ue, d, first.w->guard.kind);
            traj.exit_event = std::make_pair(first.w->guard, target);
            return out;
        }

        if (cfg.sample_dt) {
            while (next_sample <= t + hs + 1e-15 && next_sample < t_end) {
                const double th = (next_sample - t) / hs;
                const State ss = unpack(next_sample, dense(th));
                emit(next_sample, ss, u_fn(ss, next_sample));
                next_sample += *cfg.sample_dt;
            }
        } else {
            emit(t + hs, unpack(t + hs, y1), u_fn(unpack(t + hs, y1), t + hs));
        }

        t += hs;
        y = y1;
        k1 = k7;
        if (!cfg.fixed_step)
            h = hs * std::clamp(0.9 * std::pow(std::max(err, 1e-10), -0.2),
                                0.2, 5.0);
    }

    if (traj.samples.back().t < t_end - t_eps) {
        const State ss = unpack(t, y);
        emit(t, ss, u_fn(ss, t));
    }
    traj.duration = t - t0;
    return out;
}

}  // namespace detail

// Integrates a single domain under an open-loop force profile riding the
// domain-local clock. Ends at the first fired guard or after t_max.
inline PhaseTrajectory integrate_domain(const ModelParams& p, DomainId domain,
                                        const State& state0,
                                        const ControlSignal& control,
                                        double t_max,
                                        const IntegratorConfig& cfg = {}) {
    auto u_fn = [&](const State& s, double) {
        return std::clamp(control.eval_scoped(domain, s.t_local), -p.u_max,
                          p.u_max);
    };
    return detail::integrate_phase(p, domain, state0, u_fn, 0.0, t_max, cfg,
                                   false, false)
        .traj;
}

// Chains domains through guards and plastic resets under a feedback policy.
// The policy clock starts at zero and is re-zeroed whenever the policy's
// clock_reset event fires (touchdown by default, so every stance replays
// the profile from its beginning).
inline HybridTrajectory simulate_hybrid(const ModelParams& p,
                                        const State& state0,
                                        const ControlPolicy& policy,
                                        const StopCondition& stop = {},
                                        const IntegratorConfig& cfg = {},
                                        bool full_graph = false) {
    HybridTrajectory out;
    State s = state0;
    double t = 0.0;
    double clock_zero = 0.0;
    int hops = 0;
    for (;;) {
        const double budget = stop.max_time - t;
        if (budget <= 1e-12) {
            out.stop_reason = StopReason::TimeLimit;
            break;
        }
        auto u_fn = [&](const State& ss, double tg) {
            return evaluate_policy(p, policy, ss, tg - clock_zero);
        };
        auto res = detail::integrate_phase(p, s.domain, s, u_fn, t, budget,
                                           cfg, stop.stop_at_apex, full_graph);
        out.phases.push_back(std::move(res.traj));
        const PhaseTrajectory& ph = out.phases.back();
        t = ph.end_time();
        if (res.apex_stop) {
            out.stop_reason = StopReason::ApexSection;
            break;
        }
        if (!ph.exit_event) {
            out.stop_reason = StopReason::TimeLimit;
            break;
        }
        const GuardKind kind = ph.exit_event->first.kind;
        const DomainId target = ph.exit_event->second;
        const State& pre = ph.final_state();
        const bool impact = kind == GuardKind::Touchdown ||
                            kind == GuardKind::HardstopImpact;
        State post =
            apply_reset(p, pre, impact ? impulse_domain(pre.domain, kind)
                                       : target);
        post.domain = target;
        post.t_local = 0.0;
        out.resets.push_back({pre, post, kind, t});
        if (kind == policy.clock_reset) clock_zero = t;
        s = post;
        if (kind == GuardKind::Touchdown && ++hops >= stop.max_hops) {
            out.stop_reason = StopReason::HopLimit;
            break;
        }
    }
    return out;
}

// Body height at each airborne apex, one entry per flight phase whose peak
// lies strictly inside the phase. The peak sample is refined by the
// parabola through it and its neighbors, which beats the sample grid by
// several orders of magnitude since z_b is locally quadratic in time.
inline std::vector<double> apex_heights(const HybridTrajectory& traj) {
    std::vector<double> out;
    for (const PhaseTrajectory& ph : traj.phases) {
        if (ground_row(ph.domain) >= 0 || ph.samples.size() < 3) continue;
        std::size_t im = 0;
        for (std::size_t i = 1; i < ph.samples.size(); ++i)
            if (ph.samples[i].state.q[0] > ph.samples[im].state.q[0]) im = i;
        if (im == 0 || im + 1 == ph.samples.size()) continue;
        const double t1 = ph.samples[im - 1].t, z1 = ph.samples[im - 1].state.q[0];
        const double t2 = ph.samples[im].t, z2 = ph.samples[im].state.q[0];
        const double t3 = ph.samples[im + 1].t, z3 = ph.samples[im + 1].state.q[0];
        const double d12 = (z2 - z1) / (t2 - t1);
        const double d23 = (z3 - z2) / (t3 - t2);
        const double c = (d23 - d12) / (t3 - t1);
        if (c >= 0.0) {
            out.push_back(z2);
            continue;
        }
        const double tv = 0.5 * (t1 + t2) - d12 / (2.0 * c);
        out.push_back(z1 + d12 * (tv - t1) + c * (tv - t1) * (tv - t2));
    }
    return out;
}

}  // namespace hopper
