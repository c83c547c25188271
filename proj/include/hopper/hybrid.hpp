#pragma once

#include <functional>
#include <optional>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include <hopper/errors.hpp>
#include <hopper/model.hpp>

namespace hopper {

using JacobianMatrix = Eigen::Matrix<double, Eigen::Dynamic, 3>;

inline int constraint_count(DomainId d) {
    switch (d) {
        case DomainId::D1: return 1;
        case DomainId::D2: return 0;
        case DomainId::D3: return 1;
        case DomainId::D4: return 2;
        case DomainId::Flight: return 0;
        case DomainId::Ground: return 1;
    }
    return 0;
}

// Constant holonomic constraint Jacobians per domain. Rows: hardstop
// [0 1 0] (mover velocity zero), ground contact [1 0 1] (foot velocity
// zero). D4 stacks hardstop first, ground second. Jdot = 0 for all.
inline JacobianMatrix constraint_jacobian(DomainId d) {
    JacobianMatrix J(constraint_count(d), 3);
    switch (d) {
        case DomainId::D1:
            J << 0, 1, 0;
            break;
        case DomainId::D3:
        case DomainId::Ground:
            J << 1, 0, 1;
            break;
        case DomainId::D4:
            J << 0, 1, 0,
                 1, 0, 1;
            break;
        case DomainId::D2:
        case DomainId::Flight:
            break;
    }
    return J;
}

// Row of the domain's constraint force vector carrying the ground contact
// reaction, or -1 if the domain has no ground contact.
inline int ground_row(DomainId d) {
    switch (d) {
        case DomainId::D3:
        case DomainId::Ground: return 0;
        case DomainId::D4: return 1;
        default: return -1;
    }
}

// Row carrying the hardstop reaction, or -1.
inline int hardstop_row(DomainId d) {
    switch (d) {
        case DomainId::D1: return 0;
        case DomainId::D4: return 0;
        default: return -1;
    }
}

namespace detail {

inline Eigen::MatrixXd constraint_gram(const Mat3& M, const JacobianMatrix& J) {
    const Eigen::MatrixXd MinvJt = M.ldlt().solve(J.transpose());
    return J * MinvJt;
}

inline void check_invertible(const Eigen::FullPivLU<Eigen::MatrixXd>& lu,
                             DomainId d) {
    if (!lu.isInvertible())
        throw SingularConstraint(std::string("J M^-1 J^T singular in domain ") +
                                 to_string(d));
}

}  // namespace detail

// Constraint reaction forces F_v = -(J M^-1 J^T)^-1 [J M^-1 (B u - H)],
// using Jdot qd = 0 (constant Jacobians). Empty for unconstrained domains.
inline Eigen::VectorXd constraint_force(const ModelParams& p, const State& s,
                                        double u, DomainId d) {
    const int k = constraint_count(d);
    if (k == 0) return Eigen::VectorXd(0);
    const Mat3 M = mass_matrix(p);
    const JacobianMatrix J = constraint_jacobian(d);
    const Vec3 rhs = actuation_vector() * u - bias_vector(p, s);
    const Eigen::MatrixXd S = detail::constraint_gram(M, J);
    Eigen::FullPivLU<Eigen::MatrixXd> lu(S);
    detail::check_invertible(lu, d);
    return lu.solve(-(J * M.ldlt().solve(rhs)));
}

// Accelerations under the active constraint set plus the reactions that
// enforce it: qdd = M^-1 (B u + J^T F_v - H), with J qdd = 0.
inline std::pair<Vec3, Eigen::VectorXd> constrained_accel(const ModelParams& p,
                                                          const State& s,
                                                          double u,
                                                          DomainId d) {
    const Mat3 M = mass_matrix(p);
    const Vec3 rhs = actuation_vector() * u - bias_vector(p, s);
    const int k = constraint_count(d);
    if (k == 0) return {M.ldlt().solve(rhs), Eigen::VectorXd(0)};
    const JacobianMatrix J = constraint_jacobian(d);
    const Eigen::MatrixXd S = detail::constraint_gram(M, J);
    Eigen::FullPivLU<Eigen::MatrixXd> lu(S);
    detail::check_invertible(lu, d);
    const Eigen::VectorXd F_v = lu.solve(-(J * M.ldlt().solve(rhs)));
    const Vec3 qdd = M.ldlt().solve(rhs + J.transpose() * F_v);
    return {qdd, F_v};
}

// Velocity projector of the plastic impact into domain_post:
// P = I - M^-1 J^T (J M^-1 J^T)^-1 J. Identity when the target has no
// constraints. Constant per (params, domain), shared by simulation and
// transcription.
inline Mat3 reset_projector(const ModelParams& p, DomainId domain_post) {
    const int k = constraint_count(domain_post);
    if (k == 0) return Mat3::Identity();
    const Mat3 M = mass_matrix(p);
    const JacobianMatrix J = constraint_jacobian(domain_post);
    const Eigen::MatrixXd MinvJt = M.ldlt().solve(J.transpose());
    Eigen::FullPivLU<Eigen::MatrixXd> lu(J * MinvJt);
    detail::check_invertible(lu, domain_post);
    return Mat3::Identity() - MinvJt * lu.solve(J);
}

// Plastic reset: positions unchanged, velocities projected onto the target
// domain's constraint surface. Kinetic energy never increases.
inline State apply_reset(const ModelParams& p, const State& pre,
                         DomainId domain_post) {
    State post = pre;
    post.qd = reset_projector(p, domain_post) * pre.qd;
    post.domain = domain_post;
    post.t_local = 0.0;
    return post;
}

enum class GuardKind { Touchdown, Liftoff, HardstopImpact, HardstopRelease };

inline const char* to_string(GuardKind k) {
    switch (k) {
        case GuardKind::Touchdown: return "Touchdown";
        case GuardKind::Liftoff: return "Liftoff";
        case GuardKind::HardstopImpact: return "HardstopImpact";
        case GuardKind::HardstopRelease: return "HardstopRelease";
    }
    return "?";
}

// Scalar event function; the event fires when the value crosses zero while
// decreasing. Values are positive strictly inside the domain.
struct Guard {
    GuardKind kind;
    std::function<double(const ModelParams&, const State&, double)> value_fn;
};

// Characteristic magnitude of a guard value, used to scale event bands and
// arming thresholds (length guards are O(m), force guards O(weight)).
inline double guard_scale(const ModelParams& p, GuardKind k) {
    switch (k) {
        case GuardKind::Touchdown:
        case GuardKind::HardstopImpact: return 1.0;
        case GuardKind::Liftoff:
        case GuardKind::HardstopRelease: return p.M0 * p.g;
    }
    return 1.0;
}

inline Guard make_guard(GuardKind kind, DomainId domain) {
    switch (kind) {
        case GuardKind::Touchdown:
            return {kind, [](const ModelParams& p, const State& s, double) {
                        return foot_height(p, s);
                    }};
        case GuardKind::HardstopImpact:
            return {kind, [](const ModelParams&, const State& s, double) {
                        return s.q[1];
                    }};
        case GuardKind::Liftoff:
            return {kind, [domain](const ModelParams& p, const State& s,
                                   double u) {
                        return constraint_force(p, s, u,
                                                domain)[ground_row(domain)];
                    }};
        case GuardKind::HardstopRelease:
            return {kind, [domain](const ModelParams& p, const State& s,
                                   double u) {
                        return constraint_force(p, s, u,
                                                domain)[hardstop_row(domain)];
                    }};
    }
    throw ConfigError("unknown guard kind");
}

// One vertex of the hybrid system: constraint Jacobian, the guards watched
// while inside it, and the admissible transitions. Touchdown from latched
// flight lists both candidate targets; the choice is resolved at the event
// by resolve_target.
struct DomainSpec {
    DomainId id;
    JacobianMatrix jacobian;
    std::vector<Guard> guards;
    std::vector<std::pair<GuardKind, DomainId>> admissible_exits;
};

// The default graph follows the selected hop cycle D1 -> D3 -> D4 -> D1
// (Flight -> Ground for the single-spring variant) and keeps the mover
// latched through flight. full_graph adds the remaining physical edges
// (hardstop release into D2, flight impacts, early liftoff from D3),
// needed e.g. for drop tests that start with the mover off the stop.
inline DomainSpec domain_spec(const ModelParams& p, DomainId d,
                              bool full_graph = false) {
    if (!domain_in_variant(p.variant, d))
        throw ConfigError(std::string("domain ") + to_string(d) +
                          " does not belong to the " + to_string(p.variant) +
                          "-spring variant");
    DomainSpec spec;
    spec.id = d;
    spec.jacobian = constraint_jacobian(d);
    auto add = [&spec, d](GuardKind k, DomainId target) {
        spec.guards.push_back(make_guard(k, d));
        spec.admissible_exits.emplace_back(k, target);
    };
    switch (d) {
        case DomainId::D1:
            // Touchdown target D3/D4 resolved by contact consistency.
            spec.guards.push_back(make_guard(GuardKind::Touchdown, d));
            spec.admissible_exits.emplace_back(GuardKind::Touchdown,
                                               DomainId::D3);
            spec.admissible_exits.emplace_back(GuardKind::Touchdown,
                                               DomainId::D4);
            if (full_graph) add(GuardKind::HardstopRelease, DomainId::D2);
            break;
        case DomainId::D2:
            add(GuardKind::Touchdown, DomainId::D3);
            add(GuardKind::HardstopImpact, DomainId::D1);
            break;
        case DomainId::D3:
            add(GuardKind::HardstopImpact, DomainId::D4);
            if (full_graph) add(GuardKind::Liftoff, DomainId::D2);
            break;
        case DomainId::D4:
            add(GuardKind::Liftoff, DomainId::D1);
            if (full_graph) add(GuardKind::HardstopRelease, DomainId::D3);
            break;
        case DomainId::Flight:
            add(GuardKind::Touchdown, DomainId::Ground);
            break;
        case DomainId::Ground:
            add(GuardKind::Liftoff, DomainId::Flight);
            break;
    }
    return spec;
}

namespace detail {

// Reaction force the candidate domain would need right after the plastic
// impact. Negative means the one-sided contact cannot sustain the latch.
inline double post_impact_reaction(const ModelParams& p, const State& at_event,
                                   double u, DomainId candidate, int row) {
    const State post = apply_reset(p, at_event, candidate);
    return constraint_force(p, post, u, candidate)[row];
}

}  // namespace detail

// Target domain for a fired guard, decided by contact consistency: latch
// onto the impacted surface only if the post-impact reaction there is
// non-negative. Touchdown from latched flight picks D4 when the hardstop
// keeps pressing (the undamped limit) and the usual damped D1 -> D3 edge
// otherwise. An impact whose surface cannot push back is a graze: the
// velocity reset still applies but the domain is unchanged.
inline DomainId resolve_target(const ModelParams& p, const State& at_event,
                               double u, DomainId from, GuardKind kind) {
    if (from == DomainId::D1 && kind == GuardKind::Touchdown) {
        const double F_hs = detail::post_impact_reaction(
            p, at_event, u, DomainId::D4, hardstop_row(DomainId::D4));
        return F_hs >= 0.0 ? DomainId::D4 : DomainId::D3;
    }
    if (kind == GuardKind::HardstopImpact) {
        const DomainId latched =
            from == DomainId::D2 ? DomainId::D1 : DomainId::D4;
        const double F_hs = detail::post_impact_reaction(
            p, at_event, u, latched, hardstop_row(latched));
        return F_hs >= 0.0 ? latched : from;
    }
    if (kind == GuardKind::Touchdown) {
        const DomainId pinned =
            from == DomainId::Flight ? DomainId::Ground : DomainId::D3;
        const double N = detail::post_impact_reaction(p, at_event, u, pinned,
                                                      ground_row(pinned));
        return N >= 0.0 ? pinned : from;
    }
    const DomainSpec spec = domain_spec(p, from, true);
    for (const auto& [k, target] : spec.admissible_exits)
        if (k == kind) return target;
    throw ConfigError(std::string("guard ") + to_string(kind) +
                      " has no admissible exit from domain " + to_string(from));
}

// Constraint set that absorbs the plastic impulse when an impact guard
// fires on the way out of `from`. Grounded surfaces keep their existing
// constraints engaged during the impact, so a hardstop hit on the ground
// projects with the full D4 set. Release guards carry no impulse and
// should use the target domain's (no-op) projector instead.
inline DomainId impulse_domain(DomainId from, GuardKind kind) {
    if (kind == GuardKind::Touchdown) {
        if (from == DomainId::Flight) return DomainId::Ground;
        return from == DomainId::D1 ? DomainId::D4 : DomainId::D3;
    }
    if (kind == GuardKind::HardstopImpact)
        return from == DomainId::D2 ? DomainId::D1 : DomainId::D4;
    return from;
}

// Instantaneous event check: returns the guard whose value sits on zero
// (within its scaled band) while decreasing, together with the resolved
// target domain. The integrator does its own bracketing and bisection and
// uses this only to classify localized events; unit tests call it directly.
inline std::optional<std::pair<Guard, DomainId>> evaluate_guards(
    const ModelParams& p, const State& s, double u, DomainId d,
    bool full_graph = false) {
    const DomainSpec spec = domain_spec(p, d, full_graph);
    const double band_rel = 1e-9;

    // Probe states a short time step apart to sign the value's derivative.
    const double tau = 1e-7;
    State probe = s;
    const Vec3 qdd = constrained_accel(p, s, u, d).first;
    probe.q += tau * s.qd;
    probe.qd += tau * qdd;

    std::optional<std::pair<Guard, DomainId>> hit;
    for (const Guard& g : spec.guards) {
        const double scale = guard_scale(p, g.kind);
        const double v = g.value_fn(p, s, u);
        if (v > band_rel * scale || v < -1e-3 * scale) continue;
        const double v_next = g.value_fn(p, probe, u);
        if (v_next - v >= 0.0) continue;
        if (hit && hit->first.kind != g.kind)
            throw AmbiguousEvent(
                std::string("guards ") + to_string(hit->first.kind) + " and " +
                to_string(g.kind) + " fire simultaneously in domain " +
                to_string(d));
        if (!hit) hit = {g, resolve_target(p, s, u, d, g.kind)};
    }
    return hit;
}

}  // namespace hopper
