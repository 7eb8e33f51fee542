#include "doctest.h"

#include "ktie/errors.hpp"
#include "ktie/geometry.hpp"

#include <boost/numeric/odeint.hpp>

#include <array>
#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

using namespace ktie;
using std::numbers::pi;

namespace {

const ConformalFactor kBump = ConformalFactor::gaussian_bump(0.1, 1.0);

Domain unit_disk() { return Domain::make(DomainKind::EuclideanDisk, 1.0); }
const Domain& bump_disk() {
    static const Domain d = Domain::make(DomainKind::ConformalDisk, 1.0, kBump);
    return d;
}

// Independent exit-time oracle: odeint's classical RK4 at step 1e-5 on the
// same geodesic system, crossing located by linear interpolation of |x| - R.
double odeint_exit_time(const Vec2& x0, double theta0) {
    using State = std::array<double, 3>;
    auto rhs = [](const State& s, State& d, double) {
        const double r2 = s[0] * s[0] + s[1] * s[1];
        const double bump = 0.1 * std::exp(-r2);
        const double c = 1.0 + bump;
        const double gx = -2.0 * bump * s[0] / c, gy = -2.0 * bump * s[1] / c;
        d[0] = std::cos(s[2]) / c;
        d[1] = std::sin(s[2]) / c;
        d[2] = (-std::sin(s[2]) * gx + std::cos(s[2]) * gy) / c;
    };
    boost::numeric::odeint::runge_kutta4<State> stepper;
    State s{x0.x, x0.y, theta0};
    const double h = 1e-5;
    double t = 0.0;
    while (true) {
        State next = s;
        stepper.do_step(rhs, next, t, h);
        const double r0 = std::hypot(s[0], s[1]) - 1.0;
        const double r1 = std::hypot(next[0], next[1]) - 1.0;
        if (r1 > 0.0)
            return t + h * (-r0) / (r1 - r0);
        s = next;
        t += h;
    }
}

} // namespace

TEST_CASE("euclidean diameter is exact") {
    CHECK(unit_disk().diameter() == 2.0);
    CHECK(Domain::make(DomainKind::EuclideanDisk, 3.0).diameter() == 6.0);
    CHECK_THROWS_AS(Domain::make(DomainKind::EuclideanDisk, 0.0), InvalidDomain);
    CHECK_THROWS_AS(
        Domain::make(DomainKind::ConformalDisk, 1.0, ConformalFactor::gaussian_bump(-2.0, 1.0)),
        InvalidDomain);
}

TEST_CASE("conformal diameter brackets the central chord") {
    const Domain d = bump_disk();
    // The diameter through the centre is a geodesic of the radial metric; its
    // metric length is 2 (1 + 0.1 int_0^1 exp(-r^2) dr).
    const double central = 2.0 * (1.0 + 0.1 * std::sqrt(pi) / 2.0 * std::erf(1.0));
    CHECK(d.diameter() > 2.0);
    CHECK(d.diameter() < 2.3);
    CHECK(d.diameter() / 1.05 >= central - 1e-6);
    CHECK(d.diameter() / 1.05 == doctest::Approx(central).epsilon(1e-3));
}

TEST_CASE("euclidean exit times") {
    const Domain d = unit_disk();
    CHECK(exit_time(d, {{0, 0}, 0.3}, Sign::Minus) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(exit_time(d, {{1, 0}, 0.0}, Sign::Plus) == 0.0);
    CHECK(exit_time(d, {{0.5, 0}, 0.0}, Sign::Minus) == doctest::Approx(1.5).epsilon(1e-15));
    CHECK_THROWS_AS(exit_time(d, {{1.5, 0}, 0.0}, Sign::Plus), OutOfDomain);
}

TEST_CASE("conformal exit time from the centre") {
    const Domain d = bump_disk();
    const double expected = 1.0 + 0.1 * std::sqrt(pi) / 2.0 * std::erf(1.0);
    const double tau = exit_time(d, {{0, 0}, 0.0}, Sign::Plus);
    CHECK(tau > 1.0);
    CHECK(tau < 1.15);
    CHECK(tau == doctest::Approx(expected).epsilon(1e-9));
}

TEST_CASE("conformal exit time matches an independent integrator off axis") {
    const Domain d = bump_disk();
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> u(-0.6, 0.6), a(0.0, 2.0 * pi);
    for (int k = 0; k < 5; ++k) {
        const Vec2 x{u(rng), u(rng)};
        const double th = a(rng);
        CHECK(exit_time(d, {x, th}, Sign::Plus) ==
              doctest::Approx(odeint_exit_time(x, th)).epsilon(1e-7));
    }
}

TEST_CASE("tau_plus equals tau_minus of the reversed direction") {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> r(0.0, 0.95), a(0.0, 2.0 * pi);
    for (const Domain& d : {unit_disk(), bump_disk()}) {
        const double tol = d.is_euclidean() ? 1e-12 : 1e-8;
        for (int k = 0; k < 20; ++k) {
            const PhasePoint p{r(rng) * unit(a(rng)), a(rng)};
            CHECK(std::abs(exit_time(d, p, Sign::Plus) - exit_time(d, p.reversed(), Sign::Minus)) <=
                  tol);
            const double tp = exit_time(d, p, Sign::Plus);
            CHECK(tp > 0.0);
            CHECK(tp <= d.diameter());
        }
    }
}

TEST_CASE("flow: straight lines, identity, reversibility and the group law") {
    const Domain e = unit_disk();
    const PhasePoint q = flow(e, {{0, 0}, 0.0}, 0.5);
    CHECK(q.x.x == doctest::Approx(0.5));
    CHECK(q.x.y == doctest::Approx(0.0));
    CHECK(q.theta == 0.0);

    const Domain d = bump_disk();
    const PhasePoint p{{0.2, -0.3}, 1.1};
    const PhasePoint same = flow(d, p, 0.0);
    CHECK(same.x == p.x);

    const PhasePoint there = flow(d, p, 0.7);
    const PhasePoint back = flow(d, there, -0.7);
    CHECK(norm(back.x - p.x) <= 1e-8);
    CHECK(std::abs(back.theta - p.theta) <= 1e-8);

    const PhasePoint two_legs = flow(d, flow(d, p, 0.3), 0.4);
    CHECK(norm(two_legs.x - there.x) <= 1e-8);

    CHECK_THROWS_AS(flow(e, {{0, 0}, 0.0}, 1.5), EscapedDomain);
}

TEST_CASE("exit time decreases at unit rate along the flow") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> r(0.0, 0.8), a(0.0, 2.0 * pi);
    std::vector<PhasePoint> samples;
    for (int k = 0; k < 100; ++k)
        samples.push_back({r(rng) * unit(a(rng)), a(rng)});
    CHECK(exit_time_flow_identity_check(unit_disk(), samples) <= 1e-12);
    CHECK(exit_time_flow_identity_check(bump_disk(), samples) <= 1e-6);
    CHECK(exit_time_flow_identity_check(bump_disk(), samples, 0) == 0.0);
}

TEST_CASE("geodesic traces start at the seed and end on the boundary") {
    const Domain d = bump_disk();
    const PhasePoint p{{0.1, 0.2}, 2.0};
    const GeodesicTrace tr = trace_geodesic(d, p);
    CHECK(tr.samples.front().point.x == p.x);
    CHECK(std::abs(norm(tr.samples.back().point.x) - 1.0) <= 1e-8);
    CHECK(tr.samples.back().s == doctest::Approx(tr.tau_plus).epsilon(1e-9));
    std::ostringstream os;
    tr.write_csv(os, d);
    CHECK(os.str().rfind("s,x1,x2,v1,v2\n", 0) == 0);
    // Metric speed of the exported velocity is one.
    const auto& last = tr.samples.back().point;
    CHECK(norm(last.velocity(d)) * d.conformal(last.x) == doctest::Approx(1.0));
}

TEST_CASE("direction quadrature") {
    const DirectionQuadrature q8 = direction_quadrature(8);
    double total = 0.0;
    for (double w : q8.weights)
        total += w;
    CHECK(total == doctest::Approx(1.0).epsilon(1e-15));
    const DirectionQuadrature q16 = direction_quadrature(16);
    double c2 = 0.0;
    for (int j = 0; j < 16; ++j)
        c2 += q16.weights[j] * std::cos(q16.angles[j]) * std::cos(q16.angles[j]);
    CHECK(std::abs(c2 - 0.5) <= 1e-14);
    for (int j = 0; j < 16; ++j)
        CHECK(std::abs(std::cos(q16.angles[q16.opposite(j)]) + std::cos(q16.angles[j])) < 1e-14);
    CHECK_THROWS_AS(direction_quadrature(7), InvalidQuadrature);
    CHECK_THROWS_AS(direction_quadrature(6), InvalidQuadrature);
}

TEST_CASE("boundary classification") {
    const Domain d = unit_disk();
    CHECK(classify_boundary(d, {{1, 0}, 0.0}) == BoundaryClass::Outgoing);
    CHECK(classify_boundary(d, {{1, 0}, pi}) == BoundaryClass::Incoming);
    CHECK(classify_boundary(d, {{1, 0}, pi / 2}) == BoundaryClass::Tangential);
    CHECK_THROWS_AS(classify_boundary(d, {{0.5, 0}, 0.0}), OutOfDomain);
}
