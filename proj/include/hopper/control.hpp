#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <utility>
#include <vector>

#include <hopper/errors.hpp>
#include <hopper/hybrid.hpp>
#include <hopper/model.hpp>

namespace hopper {

// Sorted (t, value) samples with linear interpolation in between. What
// happens outside the knot span is the caller's choice: a force profile
// ends (zero), a tracking reference parks at its last value.
enum class Extrapolation { Zero, Hold };

struct Knot {
    double t = 0.0;
    double value = 0.0;
};

inline double interpolate_knots(const std::vector<Knot>& knots, double t,
                                Extrapolation extrap) {
    if (knots.empty()) return 0.0;
    if (t < knots.front().t || t > knots.back().t)
        return extrap == Extrapolation::Hold
                   ? (t < knots.front().t ? knots.front().value
                                          : knots.back().value)
                   : 0.0;
    const auto hi = std::upper_bound(
        knots.begin(), knots.end(), t,
        [](double a, const Knot& k) { return a < k.t; });
    if (hi == knots.begin()) return knots.front().value;
    if (hi == knots.end()) return knots.back().value;
    const auto lo = hi - 1;
    const double span = hi->t - lo->t;
    if (span <= 0.0) return hi->value;
    const double w = (t - lo->t) / span;
    return lo->value + w * (hi->value - lo->value);
}

// Piecewise-linear force profile on a domain-local clock. Active only in
// the listed domains (an empty list means everywhere); outside its scope
// the commanded force is zero. Past the final knot the profile either ends
// (zero) or parks at its last value, so a stance that runs slightly longer
// than planned keeps the final command instead of dropping the motor.
struct ControlSignal {
    std::vector<Knot> knots;
    std::vector<DomainId> domain_scope;
    Extrapolation extrapolation = Extrapolation::Zero;

    void validate(double u_max) const {
        for (std::size_t i = 0; i < knots.size(); ++i) {
            if (!std::isfinite(knots[i].t) || !std::isfinite(knots[i].value))
                throw ConfigError("control signal has non-finite knots");
            if (i == 0 && knots[i].t < 0.0)
                throw ConfigError("control signal must start at t >= 0");
            if (i > 0 && knots[i].t < knots[i - 1].t)
                throw ConfigError("control signal knots must be sorted in t");
            if (std::abs(knots[i].value) > u_max * (1.0 + 1e-9))
                throw ConfigError("control signal exceeds the force limit");
        }
    }

    bool in_scope(DomainId d) const {
        return domain_scope.empty() ||
               std::find(domain_scope.begin(), domain_scope.end(), d) !=
                   domain_scope.end();
    }

    double eval(double t) const {
        return interpolate_knots(knots, t, extrapolation);
    }

    double eval_scoped(DomainId d, double t) const {
        return in_scope(d) ? eval(t) : 0.0;
    }

    double duration() const { return knots.empty() ? 0.0 : knots.back().t; }
};

struct PDGains {
    double k_P = 0.0;
    double k_D = 0.0;

    void validate() const {
        if (!(k_P >= 0.0) || !(k_D >= 0.0))
            throw ConfigError("PD gains must be non-negative");
    }
};

// Feedback loop around the mover coordinate y, tracking a time-indexed
// reference on the same local clock as the feedforward signal. References
// hold their final value so a stance that outlasts the nominal one keeps
// the mover parked rather than yanked to zero.
struct PDFeedback {
    PDGains gains;
    std::vector<Knot> y_ref;
    std::vector<Knot> dy_ref;

    double y_ref_at(double t) const {
        return interpolate_knots(y_ref, t, Extrapolation::Hold);
    }
    double dy_ref_at(double t) const {
        return interpolate_knots(dy_ref, t, Extrapolation::Hold);
    }
};

// Everything the hybrid simulator needs to command the motor: feedforward
// playback, optional PD correction, and the event that restarts the local
// clock (touchdown, so each hop replays the profile from the beginning).
struct ControlPolicy {
    ControlSignal feedforward;
    std::optional<PDFeedback> feedback;
    GuardKind clock_reset = GuardKind::Touchdown;
};

// Commanded force, saturated to the motor limit. t_local is the policy
// clock, zeroed at each clock_reset event during hybrid simulation.
inline double evaluate_policy(const ModelParams& p, const ControlPolicy& policy,
                              const State& s, double t_local) {
    if (!policy.feedforward.in_scope(s.domain)) return 0.0;
    double u = policy.feedforward.eval(t_local);
    if (policy.feedback) {
        const PDFeedback& fb = *policy.feedback;
        u += fb.gains.k_P * (fb.y_ref_at(t_local) - s.q[1]) +
             fb.gains.k_D * (fb.dy_ref_at(t_local) - s.qd[1]);
    }
    return std::clamp(u, -p.u_max, p.u_max);
}

// Motor electrical state for a commanded force at mover velocity dy:
// current through the force constant, voltage from winding resistance plus
// back-emf.
inline std::pair<double, double> force_to_current(const MotorModel& motor,
                                                  double u, double dy) {
    const double I = u / motor.k_f;
    const double V = I * motor.R + motor.k_b * dy;
    return {I, V};
}

}  // namespace hopper
