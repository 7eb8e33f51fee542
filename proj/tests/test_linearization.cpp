#include "doctest.h"

#include "ktie/errors.hpp"
#include "ktie/linearization.hpp"

#include <cmath>
#include <limits>
#include <vector>

using namespace ktie;

namespace {

GridPtr grid(double dt = 0.05, int n_t = 80) {
    return PhaseGrid::make(Domain::make(DomainKind::EuclideanDisk, 1.0), {0.1, 8, dt, n_t});
}

CoefficientSet with_taylor(double sigma, std::vector<double> q) {
    CoefficientSet c;
    c.sigma = constant_fn(sigma);
    TaylorN t;
    t.q.resize(q.size());
    for (std::size_t k = 2; k < q.size(); ++k)
        if (q[k] != 0.0)
            t.q[k] = constant_fn(q[k]);
    c.nonlinearity = t;
    return c;
}

// Untruncated polynomial product; coefficient index = power of eps.
std::vector<double> poly_mul(const std::vector<double>& a, const std::vector<double>& b) {
    std::vector<double> c(a.size() + b.size() - 1, 0.0);
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < b.size(); ++j)
            c[i + j] += a[i] * b[j];
    return c;
}

double fact(int k) { return k <= 1 ? 1.0 : k * fact(k - 1); }

// d^n/deps^n of (sum_j eps^j d_j / j!)^k at 0, by full expansion.
double brute_power_derivative(const std::vector<double>& d, int k, int n) {
    std::vector<double> base(d.size() + 1, 0.0);
    for (std::size_t j = 0; j < d.size(); ++j)
        base[j + 1] = d[j] / fact(static_cast<int>(j) + 1);
    std::vector<double> p = base;
    for (int e = 2; e <= k; ++e)
        p = poly_mul(p, base);
    return n < static_cast<int>(p.size()) ? p[n] * fact(n) : 0.0;
}

} // namespace

TEST_CASE("scalar jet powers agree with full polynomial expansion") {
    const std::vector<double> d{0.7, -1.3, 2.1, 0.4, -0.9, 1.6};
    for (int m = 1; m <= 6; ++m)
        for (int k = 1; k <= 4; ++k) {
            const std::vector<double> in(d.begin(), d.begin() + m);
            const auto p = jet_power(in, k);
            REQUIRE(p.size() == static_cast<std::size_t>(m));
            for (int n = 1; n <= m; ++n)
                CHECK(p[n - 1] == doctest::Approx(brute_power_derivative(in, k, n)).epsilon(1e-12));
        }
    // (eps a + eps^2 b / 2)^2 = eps^2 a^2 + eps^3 a b + ...
    const auto sq = jet_power(std::vector<double>{3.0, 5.0}, 2, 3);
    CHECK(sq[1] == doctest::Approx(2.0 * 9.0));
    CHECK(sq[2] == doctest::Approx(6.0 * 15.0));
    CHECK(jet_power(std::vector<double>{3.0, 5.0}, 1) == std::vector<double>{3.0, 5.0});
}

TEST_CASE("field jet power on constant fields") {
    const auto g = grid();
    EpsJet jet({Field::fixed(g, 3.0), Field::fixed(g, 5.0), Field::fixed(g, 0.0)});
    const EpsJet sq = jet_power(jet, 2);
    CHECK(sq[1].sup_norm() == 0.0);
    CHECK(sq[2].at(1, 4) == doctest::Approx(18.0));
    CHECK(sq[3].at(5, 9) == doctest::Approx(90.0));
    const EpsJet id = jet_power(jet, 1);
    CHECK((id[2] - jet[2]).sup_norm() == 0.0);
}

TEST_CASE("remainder terms") {
    const auto g = grid();
    std::vector<Field> q(5);
    q[2] = Field::fixed(g, 1.5);
    const double a = 0.8, b = -0.6, c = 1.1;
    EpsJet jet({Field::fixed(g, a), Field::fixed(g, b), Field::fixed(g, c)});

    CHECK(remainder(q, jet, 2).sup_norm() == 0.0);
    // R_3 = q2 d^3(f^2 / 2) = 3 q2 F1 F2.
    CHECK(remainder(q, jet, 3).at(0, 0) == doctest::Approx(3.0 * 1.5 * a * b));
    // R_4 with F2 = 0 from the expansion oracle.
    EpsJet no2({Field::fixed(g, a), Field::fixed(g, 0.0), Field::fixed(g, c)});
    const double oracle = 1.5 * brute_power_derivative({a, 0.0, c}, 2, 4) / 2.0;
    CHECK(remainder(q, no2, 4).at(2, 3) == doctest::Approx(oracle));
    CHECK(oracle == doctest::Approx(4.0 * 1.5 * a * c));

    // Order m of the jet is never read.
    EpsJet poisoned({Field::fixed(g, a), Field::fixed(g, b),
                     Field::fixed(g, std::numeric_limits<double>::quiet_NaN())});
    CHECK(remainder(q, poisoned, 3).all_finite());
    CHECK_THROWS_AS(remainder(q, jet.truncated(1), 3), InvalidArgument);
}

TEST_CASE("hierarchy against scalar characteristic closed forms") {
    const auto g = grid();
    const Field h = Field::fixed(g, 1.0);
    const double dt = g->dt();
    // Relative L2 error away from the exit front. Pointwise, grazing rays at ring
    // nodes pick up the smeared front of (F^(1))^2 through interpolation.
    const auto check_order2 = [&](double sigma) {
        const TransportSolver s(g, with_taylor(sigma, {0, 0, 1.0}));
        const HierarchySolution hs = solve_hierarchy(s, h, 2);
        double err = 0.0, ref = 0.0;
        for (int n = 0; n < g->n_levels(); ++n)
            for (int j = 0; j < g->n_dir(); ++j)
                for (int i = 0; i < g->n_space(); ++i) {
                    const double t = g->time(n);
                    const double tau = exit_time(g->domain(), {g->node(i), g->angle(j)}, Sign::Minus);
                    if (t > tau - 2.0 * dt)
                        continue;
                    const double exact = sigma == 0.0
                                             ? -t
                                             : -std::exp(-sigma * t) * (1.0 - std::exp(-sigma * t)) / sigma;
                    err += std::pow(hs.jet[2].at(n, j, i) - exact, 2);
                    ref += exact * exact;
                }
        return std::sqrt(err / ref);
    };
    CHECK(check_order2(0.0) <= 2e-2);
    CHECK(check_order2(0.7) <= 2e-2);

    const TransportSolver lin(g, with_taylor(0.5, {}));
    const HierarchySolution z = solve_hierarchy(lin, h, 3);
    CHECK(z.jet[2].sup_norm() == 0.0);
    CHECK(z.jet[3].sup_norm() == 0.0);
    CHECK(z.jet[1].sup_norm() > 0.0);
}

TEST_CASE("hierarchy orders solve their recorded problems") {
    const auto g = grid();
    const TransportSolver s(g, with_taylor(0.4, {0, 0, 1.0, -0.5}));
    const Field h = Field::sample_static(g, [](const Vec2& x, double) { return 1.0 + 0.2 * x.x; });
    const HierarchySolution hs = solve_hierarchy(s, h, 3);
    CHECK(s.residual(hs.jet[1], nullptr, &h, nullptr) <= 1e-10);
    for (int k = 2; k <= 3; ++k)
        CHECK(s.residual(hs.jet[k], &hs.sources[k], nullptr, nullptr) <= 1e-10);
}

TEST_CASE("product nonlinearity enters the hierarchy through its second derivative") {
    const auto g = grid();
    CoefficientSet c;
    c.sigma = constant_fn(0.3);
    c.nonlinearity = ProductN{constant_fn(0.5), ProductN::Base::Square};
    const TransportSolver s(g, c);
    const Field h = Field::fixed(g, 1.0);
    const HierarchySolution hs = solve_hierarchy(s, h, 2);
    Field expected = pointwise_product(hs.jet[1], hs.jet[1]);
    expected *= -0.5 * 2.0;
    CHECK((hs.sources[2] - expected).sup_norm() <= 1e-14);
}

TEST_CASE("equal lower-order coefficients give equal lower-order jets") {
    const auto g = grid();
    const Field h = Field::sample_static(g, [](const Vec2& x, double th) { return 1.0 + 0.3 * x.y * std::cos(th); });
    const TransportSolver a(g, with_taylor(0.5, {0, 0, 1.0, 0.2}));
    const TransportSolver b(g, with_taylor(0.5, {0, 0, 1.0, -0.7}));
    const HierarchySolution ha = solve_hierarchy(a, h, 3);
    const HierarchySolution hb = solve_hierarchy(b, h, 3);
    CHECK((ha.jet[1] - hb.jet[1]).sup_norm() == 0.0);
    CHECK((ha.jet[2] - hb.jet[2]).sup_norm() == 0.0);
    CHECK((ha.jet[3] - hb.jet[3]).sup_norm() > 1e-3);
}

TEST_CASE("finite differences in eps converge to the hierarchy at second order") {
    const auto g = grid(0.1, 40);
    const TransportSolver s(g, with_taylor(0.5, {0, 0, 1.0, 0.5}));
    const Field h = Field::sample_static(g, [](const Vec2& x, double) { return 1.0 + 0.3 * x.x; });
    const HierarchySolution hs = solve_hierarchy(s, h, 3);
    for (int k = 1; k <= 3; ++k) {
        const auto rows = consistency_table(s, h, hs, k, k == 3 ? 0.016 : 0.032, 2);
        for (std::size_t r = 1; r < rows.size(); ++r) {
            CAPTURE(k);
            CAPTURE(rows[r].eps);
            CHECK(rows[r].ratio >= 3.0);
            CHECK(rows[r].ratio <= 5.0);
        }
        CHECK(rows.back().rel_error <= 1e-3);
    }

    const TransportSolver lin(g, with_taylor(0.5, {}));
    const Field direct = lin.solve_linear(nullptr, &h, nullptr, {1e-13, 1000}).first;
    CHECK((fd_linearize(lin, h, 1, 0.01) - direct).sup_norm() <= 1e-10);
    CHECK_THROWS_AS(fd_linearize(s, h, 3, 0.03), SmallnessGate);
    CHECK_THROWS_AS(fd_linearize(s, h, 4, 0.01), InvalidArgument);
}
