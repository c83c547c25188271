#pragma once

#include <stdexcept>

#include <Eigen/Dense>
#include <unsupported/Eigen/MatrixFunctions>

#include <hopper/model.hpp>

namespace hopper {

// Every domain of this model is linear time-invariant, and the phases
// without a live actuator (latched flight, latched stance, free flight)
// admit closed-form propagation through the matrix exponential. The
// trajectory transcription uses these flows as defect maps, so the only
// phase that needs collocation is the actuated stance.
struct AffineSystem {
    Eigen::MatrixXd A;
    Eigen::VectorXd b;

    int dim() const { return static_cast<int>(A.rows()); }
};

// Latched flight (D1): coordinates (z_b, delta), the mover rides the stop.
inline AffineSystem latched_flight_system(const ModelParams& p) {
    Eigen::Matrix2d Mr;
    Mr << p.M0, p.Mf, p.Mf, p.Mf;
    Eigen::Matrix2d K = Eigen::Matrix2d::Zero();
    K(1, 1) = p.k_s;
    Eigen::Matrix2d C = Eigen::Matrix2d::Zero();
    C(0, 0) = p.c_b;
    C(1, 1) = p.c_s;
    const Eigen::Vector2d grav(p.M0 * p.g, p.Mf * p.g);
    const Eigen::Matrix2d Mi = Mr.inverse();
    AffineSystem sys;
    sys.A = Eigen::MatrixXd::Zero(4, 4);
    sys.A.topRightCorner<2, 2>().setIdentity();
    sys.A.bottomLeftCorner<2, 2>() = -Mi * K;
    sys.A.bottomRightCorner<2, 2>() = -Mi * C;
    sys.b = Eigen::VectorXd::Zero(4);
    sys.b.tail<2>() = -Mi * grav;
    return sys;
}

// Latched stance (D4): single coordinate z_b with delta = l0 - z_b slaved
// to it, mover on the stop. The motor force is absorbed by the latch and
// never reaches this reduced system.
inline AffineSystem latched_stance_system(const ModelParams& p) {
    const double m = p.M0 - p.Mf;
    AffineSystem sys;
    sys.A = Eigen::MatrixXd::Zero(2, 2);
    sys.A(0, 1) = 1.0;
    sys.A(1, 0) = -p.k_s / m;
    sys.A(1, 1) = -(p.c_s + p.c_b) / m;
    sys.b = Eigen::VectorXd::Zero(2);
    sys.b(1) = p.k_s * p.l0 / m - p.g;
    return sys;
}

// Unconstrained flight (D2, or the single-spring Flight domain): all three
// coordinates free, state ordered as (q, qd).
inline AffineSystem free_flight_system(const ModelParams& p) {
    const Mat3 Mi = mass_matrix(p).inverse();
    Mat3 K = Mat3::Zero();
    K(1, 1) = p.k_p;
    K(2, 2) = p.k_s;
    Mat3 C = Mat3::Zero();
    C(0, 0) = p.c_b;
    C(1, 1) = p.c_p;
    C(2, 2) = p.c_s;
    const Vec3 grav(p.M0 * p.g, -p.Mm * p.g, p.Mf * p.g);
    AffineSystem sys;
    sys.A = Eigen::MatrixXd::Zero(6, 6);
    sys.A.topRightCorner<3, 3>().setIdentity();
    sys.A.bottomLeftCorner<3, 3>() = -Mi * K;
    sys.A.bottomRightCorner<3, 3>() = -Mi * C;
    sys.b = Eigen::VectorXd::Zero(6);
    sys.b.tail<3>() = -Mi * grav;
    return sys;
}

// Exact time-dt map x -> Phi x + psi of an affine system.
struct FlowMap {
    Eigen::MatrixXd Phi;
    Eigen::VectorXd psi;

    Eigen::VectorXd apply(const Eigen::VectorXd& x) const {
        return Phi * x + psi;
    }
};

inline FlowMap flow(const AffineSystem& sys, double dt) {
    if (!(dt >= 0.0) || !std::isfinite(dt))
        throw std::invalid_argument("flow duration must be finite and >= 0");
    const int n = sys.dim();
    Eigen::MatrixXd aug = Eigen::MatrixXd::Zero(n + 1, n + 1);
    aug.topLeftCorner(n, n) = sys.A;
    aug.topRightCorner(n, 1) = sys.b;
    const Eigen::MatrixXd E = (aug * dt).exp();
    return {E.topLeftCorner(n, n), E.topRightCorner(n, 1)};
}

inline Eigen::Vector4d reduce_latched_flight(const State& s) {
    return Eigen::Vector4d(s.q[0], s.q[2], s.qd[0], s.qd[2]);
}

inline State expand_latched_flight(const Eigen::Vector4d& x) {
    State s;
    s.domain = DomainId::D1;
    s.q = Vec3(x[0], 0.0, x[1]);
    s.qd = Vec3(x[2], 0.0, x[3]);
    return s;
}

inline Eigen::Vector2d reduce_latched_stance(const State& s) {
    return Eigen::Vector2d(s.q[0], s.qd[0]);
}

inline State expand_latched_stance(const ModelParams& p,
                                   const Eigen::Vector2d& x) {
    State s;
    s.domain = DomainId::D4;
    s.q = Vec3(x[0], 0.0, p.l0 - x[0]);
    s.qd = Vec3(x[1], 0.0, -x[1]);
    return s;
}

inline Vec6 full_state(const State& s) {
    Vec6 x;
    x.head<3>() = s.q;
    x.tail<3>() = s.qd;
    return x;
}

inline State expand_full(const Vec6& x, DomainId d) {
    State s;
    s.domain = d;
    s.q = x.head<3>();
    s.qd = x.tail<3>();
    return s;
}

}  // namespace hopper
