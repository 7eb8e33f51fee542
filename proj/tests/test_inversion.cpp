#include "doctest.h"

#include "ktie/errors.hpp"
#include "ktie/inversion.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>
#include <vector>

using namespace ktie;

namespace {

GridPtr coarse(double dx = 0.2) {
    return PhaseGrid::make(Domain::make(DomainKind::EuclideanDisk, 1.0), {dx, 8, dx / 2, static_cast<int>(std::lround(8.0 / dx))});
}

Field probe_h(const GridPtr& g) {
    return Field::sample_static(g, [](const Vec2& x, double th) { return 1.0 + 0.3 * x.x * std::cos(th) + 0.2 * x.y; });
}

CoefficientSet absorbing(double sigma) {
    CoefficientSet c;
    c.sigma = constant_fn(sigma);
    return c;
}

std::vector<double> bump(const CoefficientBasis& b, double amp, Vec2 at) {
    std::vector<double> c(b.size());
    for (int k = 0; k < b.size(); ++k) {
        const Vec2 d = b.center(k) - at;
        c[k] = amp * std::exp(-dot(d, d) / 0.3);
    }
    return c;
}

double vnorm(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v)
        s += x * x;
    return std::sqrt(s);
}

} // namespace

TEST_CASE("basis elements are unit, Lambda class, and match their functions") {
    const auto g = coarse();
    const CoefficientBasis b(g, 6);
    CHECK(b.size() == 16);
    for (int k = 0; k < b.size(); ++k) {
        CHECK(b.element(k).sup_norm() == doctest::Approx(1.0).epsilon(1e-15));
        CHECK(b.lambda_class().contains(b.element(k)));
        CHECK(norm(b.center(k)) < 1.0);
    }
    const auto c = bump(b, 0.3, {0.1, -0.2});
    const Field s = b.synthesize(c);
    CHECK(b.lambda_class().contains(s));
    const Field from_fn = Field::sample_static(g, b.function(c));
    CHECK((from_fn - s).sup_norm() <= 1e-14);

    // A tilted class keeps membership exact.
    const CoefficientBasis tilted(g, 4, LambdaClass{{1.0, 1.0}, 0.5});
    for (int k = 0; k < tilted.size(); ++k)
        CHECK(tilted.lambda_class().contains(tilted.element(k)));

    CHECK_THROWS_AS(CoefficientBasis(g, 1), InvalidArgument);
    CHECK_THROWS_AS(b.synthesize({1.0}), InvalidArgument);
}

TEST_CASE("trace vectors carry the boundary L2 norm") {
    const auto g = coarse();
    const Field f = Field::sample(g, [](double t, const Vec2& x, double th) { return t * t * x.x + std::sin(t) * std::cos(th); });
    const BoundaryTrace dt = time_derivative_trace(measure(f));
    CHECK(vnorm(dtrace_vector(f)) == doctest::Approx(dt.l2_norm()).epsilon(1e-13));
}

TEST_CASE("restriction of a nested fine trace is exact at shared samples") {
    const auto gc = coarse(0.2);
    const auto gf = coarse(0.1);
    REQUIRE(gf->n_ring() == 2 * gc->n_ring());
    const auto fn = [](double t, const Vec2& x, double th) { return (1.0 + t) * x.y + std::cos(th) * x.x; };
    const BoundaryTrace r = restrict_trace(measure(Field::sample(gf, fn)), gc);
    const BoundaryTrace direct = measure(Field::sample(gc, fn));
    REQUIRE(r.values.size() == direct.values.size());
    double err = 0.0;
    for (std::size_t k = 0; k < r.values.size(); ++k)
        err = std::max(err, std::abs(r.values[k] - direct.values[k]));
    CHECK(err <= 1e-13);

    // Restricting to the same grid is the identity.
    const BoundaryTrace same = restrict_trace(direct, gc);
    CHECK(same.values == direct.values);

    const auto g16 = PhaseGrid::make(Domain::make(DomainKind::EuclideanDisk, 1.0), {0.2, 16, 0.1, 40});
    CHECK_THROWS_AS(restrict_trace(direct, g16), GridMismatch);
}

TEST_CASE("sensitivity columns are linear traces of the basis-driven problem") {
    const auto g = coarse();
    const TransportSolver s(g, absorbing(0.5));
    const CoefficientBasis b(g, 4);
    const Probe probe = Probe::compatible(probe_h(g));
    const Field f1 = first_order_solution(s, probe);
    const SensitivityMatrix J = build_sensitivity_sigma(s, b, f1);
    CHECK(J.cols == b.size());
    CHECK(J.verified_columns.size() == 2);
    CHECK(J.verification_error <= 1e-12);

    // Column k against a direct solve.
    const int k = 1;
    const Field src = -1.0 * pointwise_product(b.element(k), f1);
    const auto col = dtrace_vector(s.solve_linear(&src, nullptr, nullptr, {1e-13, 1000}).first);
    double err = 0.0;
    for (int r = 0; r < J.rows; ++r)
        err = std::max(err, std::abs(col[r] - J.at(r, k)));
    CHECK(err <= 1e-14);

    // Zero drive gives zero columns; a doubled drive doubles them.
    const SensitivityMatrix Z = build_sensitivity_sigma(s, b, Field::timed(g), {{1e-13, 1000}, 7, 0});
    CHECK(*std::max_element(Z.data.begin(), Z.data.end()) == 0.0);
    const SensitivityMatrix J2 = build_sensitivity_sigma(s, b, 2.0 * f1, {{1e-13, 1000}, 7, 0});
    double dbl = 0.0;
    for (std::size_t m = 0; m < J.data.size(); ++m)
        dbl = std::max(dbl, std::abs(J2.data[m] - 2.0 * J.data[m]));
    CHECK(dbl <= 1e-12);

    // J(alpha c) = alpha J c.
    const auto c = bump(b, 1.0, {0.0, 0.3});
    std::vector<double> c3 = c;
    for (double& x : c3)
        x *= -3.0;
    const auto a = J.apply(c), a3 = J.apply(c3);
    for (std::size_t m = 0; m < a.size(); ++m)
        CHECK(a3[m] == doctest::Approx(-3.0 * a[m]).epsilon(1e-14));
}

TEST_CASE("least squares recovers synthesized coefficients") {
    const auto g = coarse();
    const TransportSolver s(g, absorbing(0.5));
    const CoefficientBasis b(g, 6);
    const Probe probe = Probe::compatible(probe_h(g));
    const SensitivityMatrix J = build_sensitivity_sigma(s, b, first_order_solution(s, probe));
    const auto c = bump(b, 0.2, {0.2, -0.1});
    RecoveryOptions o;
    o.lambda = 0.0;
    const auto ls = tikhonov_solve(J, J.apply(c), o);
    double err = 0.0;
    for (int k = 0; k < b.size(); ++k)
        err += std::pow(ls.c[k] - c[k], 2);
    CHECK(std::sqrt(err) / vnorm(c) <= 1e-6);
    CHECK(ls.condition_number < 1e6);

    // Zero data.
    const auto z = tikhonov_solve(J, std::vector<double>(J.rows, 0.0), RecoveryOptions{});
    CHECK(vnorm(z.c) == 0.0);

    // Discrepancy principle lands on the requested residual.
    std::vector<double> d = J.apply(c);
    std::mt19937_64 rng(3);
    std::normal_distribution<double> nd(0.0, 1.0);
    std::vector<double> noise(d.size());
    for (double& x : noise)
        x = nd(rng);
    const double scale = 0.02 * vnorm(d) / vnorm(noise);
    for (std::size_t m = 0; m < d.size(); ++m)
        d[m] += scale * noise[m];
    RecoveryOptions dp;
    dp.noise_norm = 0.02 * vnorm(J.apply(c));
    const auto noisy = tikhonov_solve(J, d, dp);
    CHECK(noisy.residual == doctest::Approx(dp.noise_norm).epsilon(1e-6));
    CHECK_THROWS_AS(tikhonov_solve(J, {1.0, 2.0}, o), InvalidArgument);
}

TEST_CASE("halving the data noise does not raise the median error") {
    const auto g = coarse();
    const TransportSolver s(g, absorbing(0.5));
    const CoefficientBasis b(g, 6);
    const SensitivityMatrix J =
        build_sensitivity_sigma(s, b, first_order_solution(s, Probe::compatible(probe_h(g))));
    const auto c = bump(b, 0.2, {-0.3, 0.1});
    const auto clean = J.apply(c);
    const double level = 0.05 * vnorm(clean);

    const auto median_error = [&](double noise) {
        std::mt19937_64 rng(11);
        std::normal_distribution<double> nd(0.0, 1.0);
        std::vector<double> errs;
        for (int draw = 0; draw < 25; ++draw) {
            std::vector<double> e(clean.size());
            for (double& x : e)
                x = nd(rng);
            const double sc = noise / vnorm(e);
            std::vector<double> d = clean;
            for (std::size_t m = 0; m < d.size(); ++m)
                d[m] += sc * e[m];
            RecoveryOptions o;
            o.noise_norm = noise;
            const auto ls = tikhonov_solve(J, d, o);
            double err = 0.0;
            for (int k = 0; k < b.size(); ++k)
                err += std::pow(ls.c[k] - c[k], 2);
            errs.push_back(std::sqrt(err) / vnorm(c));
        }
        std::sort(errs.begin(), errs.end());
        return errs[errs.size() / 2];
    };
    double prev = median_error(level);
    for (int halving = 1; halving <= 3; ++halving) {
        const double next = median_error(level / std::pow(2.0, halving));
        CHECK(next <= prev);
        prev = next;
    }
}

TEST_CASE("sigma recovery: zero data, Lambda class, inverse crime") {
    const auto g = coarse();
    const TransportSolver s2(g, absorbing(0.5));
    const CoefficientBasis b(g, 6);
    const Field h = probe_h(g);
    const Probe probe = Probe::compatible(h);

    const RecoveryResult zero = recover_sigma(std::vector<double>(measure(Field::timed(g)).values.size(), 0.0), s2, b, probe);
    CHECK(zero.estimate.sup_norm() == 0.0);
    CHECK((zero.coefficient - Field::fixed(g, 0.5)).sup_norm() == 0.0);
    CHECK(zero.residual_ok);

    const auto ct = bump(b, 0.2, {0.2, -0.1});
    const PhaseFn dsig = b.function(ct);
    CoefficientSet c1 = absorbing(0.5);
    c1.sigma = [dsig](const Vec2& x, double th) { return 0.5 + dsig(x, th); };
    const TransportSolver s1(g, c1);
    const auto data = dtrace_vector(s1.solve_linear(nullptr, &h, &probe.g, {1e-13, 1000}).first -
                                    s2.solve_linear(nullptr, &h, &probe.g, {1e-13, 1000}).first);
    const Field truth = b.synthesize(ct);
    RecoveryOptions o;
    o.outer_iterations = 3;
    const RecoveryResult r = recover_sigma(data, s2, b, probe, o, &truth);
    CAPTURE(r.summary());
    CHECK(r.relative_l2_error <= 0.05);
    CHECK(r.residual_ok);
    CHECK(!r.ill_conditioned);
    CHECK(b.lambda_class().contains(r.estimate));
    // Outer iterations absorb the linearization error.
    RecoveryOptions one;
    const RecoveryResult r1 = recover_sigma(data, s2, b, probe, one, &truth);
    CHECK(r.relative_l2_error < r1.relative_l2_error);

    Field bad = h;
    bad.at(0, 0) = 0.0;
    CHECK_THROWS_AS(recover_sigma(data, s2, b, Probe::compatible(bad)), InvalidArgument);
    Field neg = -1.0 * h;
    CHECK_THROWS_AS(first_order_solution(s2, Probe{neg, {}}), InvalidArgument);
}

TEST_CASE("mu_tilde recovery scales inversely with the kernel") {
    const auto g = coarse();
    const TransportSolver s2(g, absorbing(0.5));
    const CoefficientBasis b(g, 6);
    const Field h = probe_h(g);
    const Probe probe = Probe::compatible(h);
    const KernelFn p = [](const Vec2&, double a, double c) { return 1.0 + 0.5 * std::cos(a - c); };
    const KernelFn p2 = [p](const Vec2& x, double a, double c) { return 2.0 * p(x, a, c); };

    const auto ct = bump(b, 0.2, {-0.2, 0.2});
    CoefficientSet c1 = absorbing(0.5);
    c1.mu = Scattering::separable(b.function(ct), p);
    const TransportSolver s1(g, c1);
    const auto data = dtrace_vector(s1.solve_linear(nullptr, &h, &probe.g, {1e-13, 1000}).first -
                                    s2.solve_linear(nullptr, &h, &probe.g, {1e-13, 1000}).first);
    const Field truth = b.synthesize(ct);
    RecoveryOptions o;
    o.outer_iterations = 3;
    const RecoveryResult r = recover_mu_tilde(data, s2, nullptr, p, b, probe, o, &truth);
    CAPTURE(r.summary());
    CHECK(r.relative_l2_error <= 0.05);
    CHECK(b.lambda_class().contains(r.estimate));

    // Same data against a doubled kernel: J doubles, the estimate halves.
    RecoveryOptions lin;
    lin.lambda = 0.0;
    const RecoveryResult a = recover_mu_tilde(data, s2, nullptr, p, b, probe, lin);
    const RecoveryResult a2 = recover_mu_tilde(data, s2, nullptr, p2, b, probe, lin);
    CHECK((a.estimate - 2.0 * a2.estimate).sup_norm() <= 1e-9 * a.estimate.sup_norm());

    const RecoveryResult zero =
        recover_mu_tilde(std::vector<double>(data.size(), 0.0), s2, constant_fn(0.1), p, b, probe);
    CHECK((zero.coefficient - Field::fixed(g, 0.1)).sup_norm() == 0.0);
}

TEST_CASE("sequential q recovery") {
    const auto g = coarse();
    const CoefficientBasis b(g, 6);
    const Field h = probe_h(g);
    const Probe probe = Probe::compatible(h);
    CoefficientSet c2 = absorbing(0.5);
    TaylorN t2;
    t2.q = {nullptr, nullptr, constant_fn(1.0), constant_fn(0.5)};
    c2.nonlinearity = t2;
    const TransportSolver s2(g, c2);

    const auto c_2 = bump(b, 0.2, {0.2, -0.1}), c_3 = bump(b, 0.2, {-0.3, 0.2});
    const PhaseFn d2 = b.function(c_2), d3 = b.function(c_3);
    TaylorN t1;
    t1.q = {nullptr, nullptr, [d2](const Vec2& x, double th) { return 1.0 + d2(x, th); },
            [d3](const Vec2& x, double th) { return 0.5 + d3(x, th); }};
    CoefficientSet c1 = c2;
    c1.nonlinearity = t1;
    const TransportSolver s1(g, c1);

    const auto j1 = solve_hierarchy(s1, h, 3, sample_taylor(t1, g), {1e-13, 1000}, &probe.g);
    const auto j2 = solve_hierarchy(s2, h, 3, sample_taylor(t2, g), {1e-13, 1000}, &probe.g);
    std::vector<std::vector<double>> data(4);
    for (int m = 2; m <= 3; ++m)
        data[m] = dtrace_vector(j1.jet[m] - j2.jet[m]);
    std::vector<Field> truths(4);
    truths[2] = b.synthesize(c_2);
    truths[3] = b.synthesize(c_3);

    const auto rs = recover_q_sequence(data, s2, b, probe, 3, {}, {}, truths);
    REQUIRE(rs.size() == 2);
    CHECK(rs[0].label == "q2");
    CHECK(rs[0].relative_l2_error <= 1e-4);
    CHECK(rs[1].relative_l2_error <= 1e-4);
    for (const auto& r : rs)
        CHECK(b.lambda_class().contains(r.estimate));

    std::vector<std::vector<double>> zeros(4, std::vector<double>(data[2].size(), 0.0));
    for (const auto& r : recover_q_sequence(zeros, s2, b, probe, 3)) {
        CHECK(r.estimate.sup_norm() <= 1e-14);
        CHECK(r.coefficient.sup_norm() > 0.0);
    }

    // Coefficient sets differing only at order 3 share orders 1 and 2.
    TaylorN t3 = t2;
    t3.q[3] = d3;
    const auto j3 = solve_hierarchy(s2, h, 3, sample_taylor(t3, g), {1e-13, 1000}, &probe.g);
    CHECK((j3.jet[1] - j2.jet[1]).sup_norm() == 0.0);
    CHECK((j3.jet[2] - j2.jet[2]).sup_norm() == 0.0);
    CHECK((j3.jet[3] - j2.jet[3]).sup_norm() > 1e-4);

    // A data list that stops early aborts before K.
    CHECK_THROWS_AS(recover_q_sequence({{}, {}, data[2]}, s2, b, probe, 3), InvalidArgument);
    std::vector<std::vector<double>> short_data = data;
    short_data[3].resize(5);
    CHECK(recover_q_sequence(short_data, s2, b, probe, 3).size() == 1);
}

TEST_CASE("stability tables are deterministic and positive") {
    const auto g = coarse();
    CoefficientSet c = absorbing(0.5);
    c.nonlinearity = ProductN{constant_fn(1.0), ProductN::Base::Square};
    const TransportSolver s(g, c);
    const CoefficientBasis b(g, 4);
    const Probe probe = Probe::compatible(probe_h(g));
    for (auto target : {StabilityTarget::Sigma, StabilityTarget::Q}) {
        const StabilityTable t = stability_experiment(s, b, probe, target, 8, 0.05, 5);
        REQUIRE(t.rows.size() == 8);
        CHECK(t.min > 0.0);
        CHECK(t.min <= t.median);
        CHECK(t.median <= t.max);
        for (const auto& r : t.rows)
            CHECK(r.delta_norm == doctest::Approx(0.05).epsilon(1e-12));
        const StabilityTable again = stability_experiment(s, b, probe, target, 8, 0.05, 5);
        std::ostringstream a, bb;
        t.write_csv(a);
        again.write_csv(bb);
        CHECK(a.str() == bb.str());
        CHECK(a.str().rfind("draw,delta_norm,data_norm,ratio\n", 0) == 0);
    }
    CHECK_THROWS_AS(stability_experiment(s, b, probe, StabilityTarget::Sigma, 0, 0.05, 1), InvalidArgument);
}

TEST_CASE("relative error falls back to absolute for a zero truth") {
    const auto g = coarse();
    const Field a = Field::fixed(g, 2.0), z = Field::fixed(g, 0.0);
    CHECK(relative_l2(a, a) == 0.0);
    CHECK(relative_l2(z, a) == doctest::Approx(1.0));
    CHECK(relative_l2(a, z) == doctest::Approx(a.l2_norm()));
}
