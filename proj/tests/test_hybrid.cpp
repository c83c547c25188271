#include <catch2/catch_amalgamated.hpp>

#include <random>

#include <hopper/hybrid.hpp>

#include "helpers.hpp"

using namespace hopper;
using hopper::test::nominal_double;
using hopper::test::nominal_single;
using hopper::test::random_params;
using hopper::test::random_state;

namespace {

// Independent route for the constrained dynamics: solve the KKT system
// [M  -J^T] [qdd]   [B u - H]
// [J    0 ] [F  ] = [   0   ]
// with a dense LU, assembling M and H from the printed model equations.
struct KktResult {
    Vec3 qdd;
    Eigen::VectorXd F;
};

KktResult kkt_oracle(const ModelParams& p, const State& s, double u,
                     DomainId d) {
    const int k = constraint_count(d);
    Eigen::MatrixXd A = Eigen::MatrixXd::Zero(3 + k, 3 + k);
    Eigen::MatrixXd M(3, 3);
    M << p.M0, -p.Mm, p.Mf,
        -p.Mm, p.Mm, 0.0,
         p.Mf, 0.0, p.Mf;
    const double F_p = p.k_p * s.q[1] + p.c_p * s.qd[1];
    const double F_s = p.k_s * s.q[2] + p.c_s * s.qd[2];
    Eigen::Vector3d H(p.c_b * s.qd[0] + p.M0 * p.g, F_p - p.Mm * p.g,
                      F_s + p.Mf * p.g);
    const Eigen::MatrixXd J = constraint_jacobian(d);
    A.topLeftCorner(3, 3) = M;
    if (k > 0) {
        A.topRightCorner(3, k) = -J.transpose();
        A.bottomLeftCorner(k, 3) = J;
    }
    Eigen::VectorXd rhs(3 + k);
    rhs.head(3) = Eigen::Vector3d(0, u, 0) - H;
    rhs.tail(k).setZero();
    const Eigen::VectorXd sol = A.fullPivLu().solve(rhs);
    return {sol.head(3), sol.tail(k)};
}

// Independent route for the plastic impact: impulse-momentum KKT
// [M  J^T] [qd+]   [M qd-]
// [J   0 ] [lam] = [  0  ]
Vec3 impact_oracle(const ModelParams& p, const Vec3& qd_pre, DomainId d) {
    const int k = constraint_count(d);
    if (k == 0) return qd_pre;
    Eigen::MatrixXd M(3, 3);
    M << p.M0, -p.Mm, p.Mf,
        -p.Mm, p.Mm, 0.0,
         p.Mf, 0.0, p.Mf;
    const Eigen::MatrixXd J = constraint_jacobian(d);
    Eigen::MatrixXd A = Eigen::MatrixXd::Zero(3 + k, 3 + k);
    A.topLeftCorner(3, 3) = M;
    A.topRightCorner(3, k) = J.transpose();
    A.bottomLeftCorner(k, 3) = J;
    Eigen::VectorXd rhs(3 + k);
    rhs.head(3) = M * qd_pre;
    rhs.tail(k).setZero();
    return A.fullPivLu().solve(rhs).head(3);
}

}  // namespace

TEST_CASE("constraint Jacobians match the contact table", "[hybrid]") {
    Eigen::MatrixXd J1 = constraint_jacobian(DomainId::D1);
    REQUIRE(J1.rows() == 1);
    REQUIRE(J1(0, 0) == 0.0);
    REQUIRE(J1(0, 1) == 1.0);
    REQUIRE(J1(0, 2) == 0.0);

    Eigen::MatrixXd J3 = constraint_jacobian(DomainId::D3);
    REQUIRE(J3.rows() == 1);
    REQUIRE(J3(0, 0) == 1.0);
    REQUIRE(J3(0, 1) == 0.0);
    REQUIRE(J3(0, 2) == 1.0);

    Eigen::MatrixXd J4 = constraint_jacobian(DomainId::D4);
    REQUIRE(J4.rows() == 2);
    REQUIRE(J4(0, 0) == 0.0);
    REQUIRE(J4(0, 1) == 1.0);
    REQUIRE(J4(0, 2) == 0.0);
    REQUIRE(J4(1, 0) == 1.0);
    REQUIRE(J4(1, 1) == 0.0);
    REQUIRE(J4(1, 2) == 1.0);

    REQUIRE(constraint_jacobian(DomainId::D2).rows() == 0);
    REQUIRE(constraint_jacobian(DomainId::Flight).rows() == 0);
    REQUIRE(constraint_jacobian(DomainId::Ground).rows() == 1);
}

TEST_CASE("static ground rest carries the full weight", "[hybrid]") {
    const ModelParams p = nominal_double();
    State s;
    s.domain = DomainId::D3;
    s.q = Vec3(p.l0 - (p.M0 - p.Mf) * p.g / p.k_s, p.Mm * p.g / p.k_p,
               (p.M0 - p.Mf) * p.g / p.k_s);
    s.qd.setZero();

    const KktResult oracle = kkt_oracle(p, s, 0.0, DomainId::D3);
    REQUIRE(oracle.qdd.norm() < 1e-10);

    const Eigen::VectorXd F = constraint_force(p, s, 0.0, DomainId::D3);
    REQUIRE(F.size() == 1);
    REQUIRE(F[0] == Catch::Approx(p.M0 * p.g).epsilon(1e-10));
    REQUIRE(F[0] == Catch::Approx(oracle.F[0]).epsilon(1e-12));

    const auto [qdd, F2] = constrained_accel(p, s, 0.0, DomainId::D3);
    REQUIRE(qdd.norm() < 1e-10);
    REQUIRE(F2[0] == Catch::Approx(F[0]).epsilon(1e-14));
}

TEST_CASE("unconstrained flight returns no reactions", "[hybrid]") {
    const ModelParams p = nominal_double();
    std::mt19937 rng(5);
    const State s = random_state(rng, p, DomainId::D2);
    REQUIRE(constraint_force(p, s, 0.0, DomainId::D2).size() == 0);
}

TEST_CASE("constrained accelerations agree with the KKT oracle", "[hybrid]") {
    std::mt19937 rng(2024);
    std::uniform_real_distribution<double> sym(-1.0, 1.0);
    const DomainId domains[] = {DomainId::D1, DomainId::D2, DomainId::D3,
                                DomainId::D4};
    for (int i = 0; i < 400; ++i) {
        const ModelParams p = random_params(rng);
        const DomainId d = domains[i % 4];
        const State s = random_state(rng, p, d);
        const double u = 50.0 * sym(rng);
        const auto [qdd, F] = constrained_accel(p, s, u, d);
        const KktResult oracle = kkt_oracle(p, s, u, d);
        REQUIRE((qdd - oracle.qdd).norm() <
                1e-9 * (1.0 + oracle.qdd.norm()));
        REQUIRE((F - oracle.F).norm() < 1e-9 * (1.0 + oracle.F.norm()));
        const Eigen::VectorXd residual = constraint_jacobian(d) * qdd;
        REQUIRE(residual.norm() < 1e-10 * (1.0 + qdd.norm()));
    }
}

TEST_CASE("free fall with slack springs freezes relative motion", "[hybrid]") {
    ModelParams p = nominal_double();
    p.c_b = p.c_p = p.c_s = 0.0;
    State s;
    s.domain = DomainId::D2;
    s.q = Vec3(0.8, 0.0, 0.0);
    s.qd.setZero();
    const auto [qdd, F] = constrained_accel(p, s, 0.0, DomainId::D2);
    REQUIRE(qdd[0] == Catch::Approx(-p.g).epsilon(1e-13));
    REQUIRE(qdd[1] == Catch::Approx(0.0).margin(1e-12));
    REQUIRE(qdd[2] == Catch::Approx(0.0).margin(1e-12));
    REQUIRE(F.size() == 0);
}

TEST_CASE("latched domains pin the mover acceleration", "[hybrid]") {
    std::mt19937 rng(7);
    std::uniform_real_distribution<double> sym(-1.0, 1.0);
    for (int i = 0; i < 100; ++i) {
        const ModelParams p = random_params(rng);
        const State s1 = random_state(rng, p, DomainId::D1);
        const auto [a1, F1] = constrained_accel(p, s1, 0.0, DomainId::D1);
        REQUIRE(std::abs(a1[1]) < 1e-10 * (1.0 + a1.norm()));

        const State s4 = random_state(rng, p, DomainId::D4);
        const double u = 100.0 * sym(rng);
        const auto [a4, F4] = constrained_accel(p, s4, u, DomainId::D4);
        REQUIRE(std::abs(a4[1]) < 1e-10 * (1.0 + a4.norm()));
        REQUIRE(std::abs(a4[0] + a4[2]) < 1e-10 * (1.0 + a4.norm()));
    }
}

TEST_CASE("touchdown reset zeroes the foot velocity only", "[hybrid]") {
    std::mt19937 rng(88);
    for (int i = 0; i < 200; ++i) {
        const ModelParams p = random_params(rng);
        State pre = random_state(rng, p, DomainId::D1);
        pre.q[0] = p.l0 - pre.q[2];  // on the guard surface p_f = 0
        const State post = apply_reset(p, pre, DomainId::D3);
        REQUIRE((post.q - pre.q).norm() == 0.0);
        REQUIRE(post.qd[0] + post.qd[2] == Catch::Approx(0.0).margin(1e-12));
        // Body and mover velocities pass through untouched; the impact
        // impulse acts along the foot coordinate alone.
        REQUIRE(post.qd[0] == Catch::Approx(pre.qd[0]).margin(1e-12));
        REQUIRE(post.qd[1] == Catch::Approx(pre.qd[1]).margin(1e-12));
        REQUIRE(post.domain == DomainId::D3);
        REQUIRE(post.t_local == 0.0);
    }
}

TEST_CASE("hardstop impact conserves generalized momentum", "[hybrid]") {
    ModelParams p = nominal_double();
    p.M0 = 10.0;
    p.Mm = 4.0;
    p.Mf = 1.0;
    State pre;
    pre.domain = DomainId::D2;
    pre.q = Vec3(0.5, 0.0, 0.0);
    pre.qd = Vec3(0.0, -0.5, 0.0);
    const State post = apply_reset(p, pre, DomainId::D1);

    // Frozen from the impulse KKT solved by hand: the mover impulse
    // lam = -0.5 / 0.45 redistributes as qd+ = (2/9, 0, -2/9).
    REQUIRE(post.qd[0] == Catch::Approx(2.0 / 9.0).epsilon(1e-12));
    REQUIRE(post.qd[1] == Catch::Approx(0.0).margin(1e-14));
    REQUIRE(post.qd[2] == Catch::Approx(-2.0 / 9.0).epsilon(1e-12));

    const Mat3 M = mass_matrix(p);
    const Vec3 mpre = M * pre.qd;
    const Vec3 mpost = M * post.qd;
    REQUIRE(mpost[0] == Catch::Approx(mpre[0]).margin(1e-12));
    REQUIRE(mpost[2] == Catch::Approx(mpre[2]).margin(1e-12));
}

TEST_CASE("reset agrees with the impulse-momentum oracle", "[hybrid]") {
    std::mt19937 rng(303);
    const DomainId targets[] = {DomainId::D1, DomainId::D3, DomainId::D4};
    for (int i = 0; i < 300; ++i) {
        const ModelParams p = random_params(rng);
        State pre = random_state(rng, p, DomainId::D2);
        const DomainId target = targets[i % 3];
        const State post = apply_reset(p, pre, target);
        const Vec3 oracle = impact_oracle(p, pre.qd, target);
        REQUIRE((post.qd - oracle).norm() < 1e-10 * (1.0 + oracle.norm()));

        // Projector: a second application changes nothing.
        const State twice = apply_reset(p, post, target);
        REQUIRE((twice.qd - post.qd).norm() < 1e-12 * (1.0 + post.qd.norm()));

        // Plastic impacts never add kinetic energy.
        const Mat3 M = mass_matrix(p);
        const double ke_pre = 0.5 * pre.qd.dot(M * pre.qd);
        const double ke_post = 0.5 * post.qd.dot(M * post.qd);
        REQUIRE(ke_post <= ke_pre * (1.0 + 1e-12) + 1e-12);

        // The component of M qd orthogonal to the impulse directions
        // survives the impact.
        const JacobianMatrix J = constraint_jacobian(target);
        const Eigen::MatrixXd Jt = J.transpose();
        const Eigen::MatrixXd P =
            Eigen::MatrixXd::Identity(3, 3) -
            Jt * (Jt.transpose() * Jt).inverse() * Jt.transpose();
        const Vec3 kept_pre = P * (M * pre.qd);
        const Vec3 kept_post = P * (M * post.qd);
        REQUIRE((kept_pre - kept_post).norm() <
                1e-9 * (1.0 + kept_pre.norm()));
    }
}

TEST_CASE("reset is the identity on the constraint surface", "[hybrid]") {
    std::mt19937 rng(555);
    for (int i = 0; i < 100; ++i) {
        const ModelParams p = random_params(rng);
        const State pre = random_state(rng, p, DomainId::D4);
        const State post = apply_reset(p, pre, DomainId::D4);
        REQUIRE((post.qd - pre.qd).norm() < 1e-12 * (1.0 + pre.qd.norm()));
    }
}

TEST_CASE("damped touchdown separates the mover onto the free cycle",
          "[hybrid]") {
    const ModelParams p = nominal_double();
    State s;
    s.domain = DomainId::D1;
    s.q = Vec3(p.l0 + p.Mf * p.g / p.k_s, 0.0, -p.Mf * p.g / p.k_s);
    s.qd = Vec3(-1.5, 0.0, 0.0);
    REQUIRE(foot_height(p, s) == Catch::Approx(0.0).margin(1e-15));
    const auto hit = evaluate_guards(p, s, 0.0, DomainId::D1);
    REQUIRE(hit.has_value());
    REQUIRE(hit->first.kind == GuardKind::Touchdown);
    REQUIRE(hit->second == DomainId::D3);
}

TEST_CASE("undamped touchdown keeps the mover latched", "[hybrid]") {
    ModelParams p = nominal_double();
    p.c_b = p.c_p = p.c_s = 0.0;
    State s;
    s.domain = DomainId::D1;
    s.q = Vec3(p.l0 + p.Mf * p.g / p.k_s, 0.0, -p.Mf * p.g / p.k_s);
    s.qd = Vec3(-1.5, 0.0, 0.0);
    const auto hit = evaluate_guards(p, s, 0.0, DomainId::D1);
    REQUIRE(hit.has_value());
    REQUIRE(hit->first.kind == GuardKind::Touchdown);
    REQUIRE(hit->second == DomainId::D4);
}

TEST_CASE("mover hitting the stop mid-rebound grazes off again", "[hybrid]") {
    // Compressed spring, body accelerating hard upward: holding the mover
    // on the stop would need a pulling reaction, so the impact only kills
    // the approach velocity and the mover separates.
    const ModelParams p = nominal_double();
    State s;
    s.domain = DomainId::D3;
    s.q = Vec3(p.l0 - 0.02, 0.0, 0.02);
    s.qd = Vec3(0.5, -0.3, -0.5);
    const auto hit = evaluate_guards(p, s, 0.0, DomainId::D3);
    REQUIRE(hit.has_value());
    REQUIRE(hit->first.kind == GuardKind::HardstopImpact);
    REQUIRE(hit->second == DomainId::D3);
    const double fhs = detail::post_impact_reaction(
        p, s, 0.0, DomainId::D4, hardstop_row(DomainId::D4));
    REQUIRE(fhs < -1.0);
}

TEST_CASE("mover reaching the stop late in stance latches into D4",
          "[hybrid]") {
    // Extended spring near liftoff: the body decelerates, so the stop can
    // carry the mover with a pushing reaction and the latch holds.
    const ModelParams p = nominal_double();
    State s;
    s.domain = DomainId::D3;
    s.q = Vec3(p.l0 + 0.002, 0.0, -0.002);
    s.qd = Vec3(1.0, -0.3, -1.0);
    const auto hit = evaluate_guards(p, s, 0.0, DomainId::D3);
    REQUIRE(hit.has_value());
    REQUIRE(hit->first.kind == GuardKind::HardstopImpact);
    REQUIRE(hit->second == DomainId::D4);
    const double fhs = detail::post_impact_reaction(
        p, s, 0.0, DomainId::D4, hardstop_row(DomainId::D4));
    REQUIRE(fhs > 1.0);
}

TEST_CASE("vanishing ground force fires liftoff into latched flight",
          "[hybrid]") {
    const ModelParams p = nominal_double();
    const double zd = 1.0;
    // Ground reaction in D4 is k_s*delta - c_s*zd + Mf*g; place delta on
    // its zero.
    const double delta = (p.c_s * zd - p.Mf * p.g) / p.k_s;
    State s;
    s.domain = DomainId::D4;
    s.q = Vec3(p.l0 - delta, 0.0, delta);
    s.qd = Vec3(zd, 0.0, -zd);
    const Eigen::VectorXd F = constraint_force(p, s, 0.0, DomainId::D4);
    REQUIRE(F[ground_row(DomainId::D4)] == Catch::Approx(0.0).margin(1e-10));
    const auto hit = evaluate_guards(p, s, 0.0, DomainId::D4);
    REQUIRE(hit.has_value());
    REQUIRE(hit->first.kind == GuardKind::Liftoff);
    REQUIRE(hit->second == DomainId::D1);
}

TEST_CASE("simultaneous distinct guards are rejected", "[hybrid]") {
    const ModelParams p = nominal_double();
    const double zd = 1.0;
    const double delta = (p.c_s * zd - p.Mf * p.g) / p.k_s;
    State s;
    s.domain = DomainId::D3;
    s.q = Vec3(p.l0 - delta, 0.0, delta);
    s.qd = Vec3(zd, -0.5, -zd);
    // Full graph watches both the hardstop impact (y through zero) and
    // liftoff (ground force through zero) in D3.
    REQUIRE_THROWS_AS(evaluate_guards(p, s, 0.0, DomainId::D3, true),
                      AmbiguousEvent);
    // The restricted cycle watches only the hardstop impact here.
    const auto hit = evaluate_guards(p, s, 0.0, DomainId::D3, false);
    REQUIRE(hit.has_value());
    REQUIRE(hit->first.kind == GuardKind::HardstopImpact);
}

TEST_CASE("no guard fires strictly inside a domain", "[hybrid]") {
    const ModelParams p = nominal_double();
    State s;
    s.domain = DomainId::D1;
    s.q = Vec3(p.l0 + 0.3, 0.0, -p.Mf * p.g / p.k_s);
    s.qd = Vec3(-1.0, 0.0, 0.0);
    REQUIRE(!evaluate_guards(p, s, 0.0, DomainId::D1).has_value());
}

TEST_CASE("domains are checked against the variant", "[hybrid]") {
    const ModelParams p = nominal_single();
    REQUIRE_THROWS_AS(domain_spec(p, DomainId::D1), ConfigError);
    REQUIRE_NOTHROW(domain_spec(p, DomainId::Flight));
    REQUIRE_NOTHROW(domain_spec(nominal_double(), DomainId::D4));
}
