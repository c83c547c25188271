#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <string>

#include <hopper/errors.hpp>

namespace hopper {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Vec6 = Eigen::Matrix<double, 6, 1>;

enum class Variant { SingleSpring, DoubleSpring };

// Contact configurations of the hybrid system. D1..D4 belong to the
// double-spring model, Flight/Ground to the single-spring one.
//   D1: flight, mover latched on the hardstop
//   D2: flight, mover free
//   D3: ground contact, mover free
//   D4: ground contact + hardstop engaged
enum class DomainId { D1, D2, D3, D4, Flight, Ground };

inline const char* to_string(DomainId d) {
    switch (d) {
        case DomainId::D1: return "D1";
        case DomainId::D2: return "D2";
        case DomainId::D3: return "D3";
        case DomainId::D4: return "D4";
        case DomainId::Flight: return "Flight";
        case DomainId::Ground: return "Ground";
    }
    return "?";
}

inline const char* to_string(Variant v) {
    return v == Variant::SingleSpring ? "single" : "double";
}

inline Variant variant_from_string(const std::string& s) {
    if (s == "single" || s == "SingleSpring") return Variant::SingleSpring;
    if (s == "double" || s == "DoubleSpring") return Variant::DoubleSpring;
    throw ConfigError("unknown variant '" + s + "' (expected single|double)");
}

inline bool domain_in_variant(Variant v, DomainId d) {
    if (v == Variant::SingleSpring)
        return d == DomainId::Flight || d == DomainId::Ground;
    return d == DomainId::D1 || d == DomainId::D2 || d == DomainId::D3 ||
           d == DomainId::D4;
}

// Linear-motor electrical constants. These scale the electrical energy
// estimate only; they never enter the dynamics.
struct MotorModel {
    double k_f = 20.0;  // force constant, N/A
    double k_b = 20.0;  // back-emf constant, V*s/m
    double R = 1.0;     // winding resistance, Ohm

    void validate() const {
        if (!(k_f > 0)) throw ConfigError("motor.k_f must be > 0");
        if (!(R > 0)) throw ConfigError("motor.R must be > 0");
        if (!(k_b >= 0)) throw ConfigError("motor.k_b must be >= 0");
    }
};

// Physical parameters of the 3-mass vertical hopper. Coordinates are
// q = (z_b, y, delta): body height, mover travel below its hardstop
// equilibrium (y >= 0), and series-spring deflection. The mover sits at
// z_b - y, the foot at z_b + delta - l0.
struct ModelParams {
    double M0 = 2.5;  // total robot mass, kg
    double Mm = 1.2;  // mover mass, kg
    double Mf = 0.1;  // foot mass, kg

    double c_b = 2.0;  // body vertical damping, N*s/m
    double k_p = 2200.0;  // parallel (upper) spring stiffness, N/m; 0 for single-spring
    double c_p = 6.0;     // parallel / mover-body damping, N*s/m
    double k_s = 1800.0;  // series (lower) spring stiffness, N/m
    double c_s = 2.0;     // series spring damping, N*s/m

    double g = 9.81;  // gravity, m/s^2

    double l0 = 0.30;     // rest-geometry offset: foot height p_f = z_b + delta - l0, m
    double y_max = 0.15;  // mover range of motion, m
    double u_max = 450.0; // actuator force limit, N

    MotorModel motor;
    Variant variant = Variant::DoubleSpring;

    void validate() const {
        if (!(M0 > 0 && Mm > 0 && Mf > 0))
            throw ConfigError("all masses must be strictly positive");
        if (!(M0 > Mm + Mf))
            throw ConfigError("M0 must exceed Mm + Mf (M0 is the total mass)");
        if (!(k_s > 0)) throw ConfigError("k_s must be > 0");
        if (!(c_b >= 0 && c_p >= 0 && c_s >= 0))
            throw ConfigError("damping coefficients must be >= 0");
        if (variant == Variant::DoubleSpring && !(k_p > 0))
            throw ConfigError("double-spring variant requires k_p > 0");
        if (variant == Variant::SingleSpring && k_p != 0.0)
            throw ConfigError("single-spring variant requires k_p = 0");
        if (!(u_max > 0)) throw ConfigError("u_max must be > 0");
        if (!(y_max > 0)) throw ConfigError("y_max must be > 0");
        if (!(l0 > 0)) throw ConfigError("l0 must be > 0");
        if (!(g > 0)) throw ConfigError("g must be > 0");
        motor.validate();
    }
};

struct State {
    Vec3 q = Vec3::Zero();   // (z_b, y, delta), m
    Vec3 qd = Vec3::Zero();  // velocities, m/s
    DomainId domain = DomainId::D1;
    double t_local = 0.0;    // time since entering the current domain, s
};

// M of the unpinned dynamics M qdd + H = B u. Constant and symmetric.
inline Mat3 mass_matrix(const ModelParams& p) {
    Mat3 M;
    M << p.M0, -p.Mm, p.Mf,
        -p.Mm, p.Mm, 0.0,
         p.Mf, 0.0, p.Mf;
    return M;
}

// Actuation direction: the motor force acts on the mover coordinate.
inline Vec3 actuation_vector() { return Vec3(0.0, 1.0, 0.0); }

// Bias term H(q, qd): damping, spring and gravity forces. For the
// single-spring variant k_p = 0 and the parallel term reduces to mover
// damping alone.
inline Vec3 bias_vector(const ModelParams& p, const State& s) {
    const double F_p = p.k_p * s.q[1] + p.c_p * s.qd[1];
    const double F_s = p.k_s * s.q[2] + p.c_s * s.qd[2];
    return Vec3(p.c_b * s.qd[0] + p.M0 * p.g,
                F_p - p.Mm * p.g,
                F_s + p.Mf * p.g);
}

// Foot height above ground; contact happens at p_f = 0.
inline double foot_height(const ModelParams& p, const State& s) {
    return s.q[0] + s.q[2] - p.l0;
}

// Kinetic + gravitational + elastic energy. The gravitational part sums
// the actual heights of body (M0 - Mm - Mf at z_b), mover (z_b - y) and
// foot (z_b + delta - l0); only differences of this quantity are ever used.
inline double mechanical_energy(const ModelParams& p, const State& s) {
    const double kinetic = 0.5 * s.qd.dot(mass_matrix(p) * s.qd);
    const double grav =
        p.g * (p.M0 * s.q[0] - p.Mm * s.q[1] + p.Mf * (s.q[2] - p.l0));
    const double elastic =
        0.5 * p.k_p * s.q[1] * s.q[1] + 0.5 * p.k_s * s.q[2] * s.q[2];
    return kinetic + grav + elastic;
}

}  // namespace hopper
