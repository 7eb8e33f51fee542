#include "doctest.h"

#include "ktie/errors.hpp"
#include "ktie/grid.hpp"

#include <cmath>
#include <numbers>
#include <random>

using namespace ktie;

namespace {

GridPtr unit_grid(double dx = 0.1, int n_v = 8) {
    return PhaseGrid::make(Domain::make(DomainKind::EuclideanDisk, 1.0), {dx, n_v, dx, static_cast<int>(std::lround(4.0 / dx))});
}

} // namespace

TEST_CASE("grid construction enforces its invariants") {
    const Domain d = Domain::make(DomainKind::EuclideanDisk, 1.0);
    CHECK_THROWS_AS(PhaseGrid::make(d, {0.1, 8, 0.1, 39}), InvalidArgument); // T < 2 D
    CHECK_THROWS_AS(PhaseGrid::make(d, {0.1, 8, 0.2, 40}), InvalidArgument); // dt > dx
    CHECK_THROWS_AS(PhaseGrid::make(d, {0.3, 8, 0.1, 40}), InvalidArgument); // 2R/dx not integral
    CHECK_THROWS_AS(PhaseGrid::make(d, {0.1, 7, 0.1, 40}), InvalidQuadrature);
    GridSpec shortrun{0.1, 8, 0.1, 10};
    shortrun.require_long_horizon = false;
    CHECK_NOTHROW(PhaseGrid::make(d, shortrun));

    const auto g = unit_grid();
    CHECK(g->horizon() == doctest::Approx(4.0));
    CHECK(g->n_ring() == 4 * 16);
    for (int i = 0; i < g->n_space(); ++i)
        CHECK(norm(g->node(i)) <= 1.0 + 1e-12);
    double area = 0.0;
    for (int i = 0; i < g->n_space(); ++i)
        area += g->volume_weight(i);
    CHECK(area == doctest::Approx(std::numbers::pi).epsilon(0.05));
}

TEST_CASE("interpolation reproduces affine functions with convex weights") {
    const auto g = unit_grid();
    const auto affine = [](const Vec2& x) { return 0.3 + 1.7 * x.x - 0.4 * x.y; };
    std::vector<double> level(g->level_size());
    for (int j = 0; j < g->n_dir(); ++j)
        for (int i = 0; i < g->n_space(); ++i)
            level[j * g->n_space() + i] = affine(g->node(i));
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    double worst = 0.0;
    for (int k = 0; k < 2000; ++k) {
        // Bias the draws towards the boundary where cells are cut.
        const double r = std::sqrt(u(rng)) * (k % 2 ? 1.0 : 0.999999);
        const Vec2 y = r * unit(2.0 * std::numbers::pi * u(rng));
        const Stencil s = g->locate(y, 3);
        double total = 0.0;
        for (int m = 0; m < s.count; ++m) {
            CHECK(s.weight[m] >= 0.0);
            total += s.weight[m];
        }
        CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
        worst = std::max(worst, std::abs(apply(s, level.data()) - affine(y)));
    }
    // The ring is a polygon inscribed in the circle, so points in the thin
    // sliver between a chord and the arc are slightly extrapolated.
    CHECK(worst <= 1e-2);
}

TEST_CASE("direction interpolation between neighbouring angles") {
    const auto g = unit_grid();
    const double h = g->quadrature().spacing();
    const Stencil on = g->locate({0.05, 0.05}, 2 * h);
    for (int m = 0; m < on.count; ++m)
        CHECK(on.offset[m] / g->n_space() == 2);
    const Stencil mid = g->locate({0.05, 0.05}, 2.25 * h);
    double w2 = 0.0, w3 = 0.0;
    for (int m = 0; m < mid.count; ++m)
        (mid.offset[m] / g->n_space() == 2 ? w2 : w3) += mid.weight[m];
    CHECK(w2 == doctest::Approx(0.75));
    CHECK(w3 == doctest::Approx(0.25));
}

TEST_CASE("field layout, arithmetic and norms") {
    const auto g = unit_grid();
    Field f = Field::timed(g, 2.0);
    CHECK(f.levels() == g->n_levels());
    CHECK(f.values().size() == g->level_size() * g->n_levels());
    CHECK(f.all_finite());
    CHECK(f.sup_norm() == 2.0);
    f.at(3, 2, 5) = -7.0;
    CHECK(f.values()[g->index(3, 2, 5)] == -7.0);
    CHECK(f.min_value() == -7.0);

    const Field one = Field::fixed(g, 1.0);
    double area = 0.0;
    for (int i = 0; i < g->n_space(); ++i)
        area += g->volume_weight(i);
    CHECK(one.l2_norm() == doctest::Approx(std::sqrt(area)));
    CHECK(broadcast_in_time(one).l2_norm() == doctest::Approx(std::sqrt(area * g->horizon())));
    CHECK_THROWS_AS(f += one, GridMismatch);
    CHECK_THROWS_AS(one + Field::fixed(unit_grid(), 1.0), GridMismatch);
}

TEST_CASE("outgoing boundary weights integrate <n, v>") {
    const auto g = unit_grid(0.05, 16);
    double total = 0.0;
    for (int i = g->n_inside(); i < g->n_space(); ++i)
        for (int j = 0; j < g->n_dir(); ++j) {
            CHECK(g->boundary_weight(i, j) >= 0.0);
            total += g->boundary_weight(i, j);
        }
    // 2 pi R times the mean of max(cos, 0) over the circle, which is 1 / pi.
    CHECK(total == doctest::Approx(2.0).epsilon(1e-2));
}
