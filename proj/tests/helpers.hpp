#pragma once

#include <random>

#include <hopper/hybrid.hpp>
#include <hopper/model.hpp>

namespace hopper::test {

inline ModelParams nominal_double() {
    ModelParams p;
    p.variant = Variant::DoubleSpring;
    p.validate();
    return p;
}

inline ModelParams nominal_single() {
    ModelParams p;
    p.variant = Variant::SingleSpring;
    p.k_p = 0.0;
    p.c_p = 1.0;
    p.validate();
    return p;
}

inline ModelParams random_params(std::mt19937& rng,
                                 Variant v = Variant::DoubleSpring) {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    ModelParams p;
    p.variant = v;
    p.M0 = 0.5 + 9.5 * unit(rng);
    p.Mm = p.M0 * (0.1 + 0.5 * unit(rng));
    p.Mf = p.M0 * (0.01 + 0.2 * unit(rng));
    p.c_b = 5.0 * unit(rng);
    p.c_p = 10.0 * unit(rng);
    p.c_s = 5.0 * unit(rng);
    p.k_p = v == Variant::DoubleSpring ? 200.0 + 4000.0 * unit(rng) : 0.0;
    p.k_s = 200.0 + 4000.0 * unit(rng);
    p.g = 9.81;
    p.l0 = 0.1 + 0.4 * unit(rng);
    p.y_max = 0.05 + 0.2 * unit(rng);
    p.u_max = 100.0 + 400.0 * unit(rng);
    p.validate();
    return p;
}

// Random state satisfying the holonomic constraints of its domain.
inline State random_state(std::mt19937& rng, const ModelParams& p,
                          DomainId d) {
    std::uniform_real_distribution<double> sym(-1.0, 1.0);
    State s;
    s.domain = d;
    s.q = Vec3(p.l0 + 0.3 * sym(rng), 0.05 + 0.04 * sym(rng), 0.1 * sym(rng));
    s.qd = Vec3(3.0 * sym(rng), 2.0 * sym(rng), 3.0 * sym(rng));
    const JacobianMatrix J = constraint_jacobian(d);
    if (hardstop_row(d) >= 0 || d == DomainId::D1) {
        s.q[1] = 0.0;
        s.qd[1] = 0.0;
    }
    if (ground_row(d) >= 0) {
        s.q[0] = p.l0 - s.q[2];  // p_f = 0
        s.qd[2] = -s.qd[0];      // dz_b + ddelta = 0
    }
    (void)J;
    return s;
}

}  // namespace hopper::test
