#include "ktie/grid.hpp"

#include "ktie/errors.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace ktie {

namespace {
constexpr double kTwoPi = 2.0 * std::numbers::pi;
}

std::shared_ptr<const PhaseGrid> PhaseGrid::make(const Domain& domain, const GridSpec& spec) {
    if (!(spec.dx > 0.0) || !(spec.dt > 0.0) || spec.n_t < 2)
        throw InvalidArgument("grid needs dx > 0, dt > 0 and at least 2 time steps");
    const double R = domain.radius();
    const double cells = 2.0 * R / spec.dx;
    if (std::abs(cells - std::round(cells)) > 1e-9 * cells)
        throw InvalidArgument("2R / dx must be an integer, got " + std::to_string(cells));
    if (spec.dt > spec.dx * (1.0 + 1e-12))
        throw InvalidArgument("time step must not exceed the spatial step");
    if (spec.require_long_horizon && spec.n_t * spec.dt < 2.0 * domain.diameter() - 1e-12)
        throw InvalidArgument("horizon T = " + std::to_string(spec.n_t * spec.dt) +
                              " violates T >= 2 D_metric = " +
                              std::to_string(2.0 * domain.diameter()));

    auto grid = std::shared_ptr<PhaseGrid>(new PhaseGrid());
    PhaseGrid& g = *grid;
    g.domain_ = domain;
    g.spec_ = spec;
    g.quad_ = direction_quadrature(spec.n_v);
    for (double a : g.quad_.angles)
        g.dirs_.push_back(unit(a));

    g.side_ = static_cast<int>(std::lround(cells)) + 1;
    g.lattice_.assign(static_cast<std::size_t>(g.side_) * g.side_, -1);
    for (int iy = 0; iy < g.side_; ++iy) {
        for (int ix = 0; ix < g.side_; ++ix) {
            const Vec2 x{-R + ix * spec.dx, -R + iy * spec.dx};
            if (norm(x) <= R * (1.0 + 1e-12)) {
                g.lattice_[static_cast<std::size_t>(iy) * g.side_ + ix] =
                    static_cast<int>(g.nodes_.size());
                g.nodes_.push_back(x);
                const double c = domain.conformal(x);
                g.volume_.push_back(spec.dx * spec.dx * c * c);
                g.arc_.push_back(0.0);
            }
        }
    }
    g.n_inside_ = static_cast<int>(g.nodes_.size());

    int n_ring = spec.n_ring;
    if (n_ring <= 0)
        n_ring = 4 * static_cast<int>(std::ceil(std::numbers::pi * R / (2.0 * spec.dx) - 1e-9));
    g.spec_.n_ring = n_ring;
    for (int k = 0; k < n_ring; ++k) {
        const Vec2 x = R * unit(kTwoPi * k / n_ring);
        g.nodes_.push_back(x);
        g.volume_.push_back(0.0);
        g.arc_.push_back(kTwoPi * R / n_ring * domain.conformal(x));
    }
    return grid;
}

double PhaseGrid::normal_cosine(int i, int j) const {
    if (!is_ring(i))
        return 0.0;
    return dot(domain_.outer_normal(nodes_[i]), dirs_[j]);
}

bool PhaseGrid::is_outgoing(int i, int j) const { return normal_cosine(i, j) > 1e-10; }

double PhaseGrid::boundary_weight(int i, int j) const {
    const double nv = normal_cosine(i, j);
    if (nv <= 1e-10)
        return 0.0;
    return arc_[i] * quad_.weights[j] * nv;
}

double PhaseGrid::time_weight(int n) const {
    return (n == 0 || n == spec_.n_t) ? 0.5 * spec_.dt : spec_.dt;
}

int PhaseGrid::lattice_node(int ix, int iy) const {
    if (ix < 0 || iy < 0 || ix >= side_ || iy >= side_)
        return -1;
    return lattice_[static_cast<std::size_t>(iy) * side_ + ix];
}

void PhaseGrid::ring_locate(double alpha, int* lower, double* frac) const {
    const int nb = n_ring();
    const double pos = wrap_angle(alpha) / (kTwoPi / nb);
    int k = static_cast<int>(std::floor(pos));
    double f = pos - k;
    if (k >= nb) {
        k = nb - 1;
        f = 1.0;
    }
    *lower = k;
    *frac = f;
}

void PhaseGrid::spatial_stencil(const Vec2& y, std::array<int, 4>& ids, std::array<double, 4>& w,
                                int* count) const {
    const double R = domain_.radius();
    const double px = (y.x + R) / spec_.dx;
    const double py = (y.y + R) / spec_.dx;
    int ix = std::clamp(static_cast<int>(std::floor(px)), 0, side_ - 2);
    int iy = std::clamp(static_cast<int>(std::floor(py)), 0, side_ - 2);
    const double fx = std::clamp(px - ix, 0.0, 1.0);
    const double fy = std::clamp(py - iy, 0.0, 1.0);
    const double cw[4] = {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy};
    const int cid[4] = {lattice_node(ix, iy), lattice_node(ix + 1, iy), lattice_node(ix, iy + 1),
                        lattice_node(ix + 1, iy + 1)};
    bool full = true;
    for (int k = 0; k < 4; ++k)
        full = full && cid[k] >= 0;
    *count = 0;
    if (full) {
        for (int k = 0; k < 4; ++k) {
            if (cw[k] > 0.0) {
                ids[*count] = cid[k];
                w[*count] = cw[k];
                ++*count;
            }
        }
        return;
    }

    // Cut cell: barycentric weights on a triangle of nearby inside corners
    // and boundary ring nodes. The weights are convex and reproduce linear
    // functions, which keeps boundary-adjacent values unbiased.
    std::array<int, 12> cand{};
    int nc = 0;
    for (int k = 0; k < 4; ++k)
        if (cid[k] >= 0)
            cand[nc++] = cid[k];
    int k0 = 0;
    double frac = 0.0;
    ring_locate(std::atan2(y.y, y.x), &k0, &frac);
    const int nb = n_ring();
    for (int d = -2; d <= 3; ++d)
        cand[nc++] = n_inside_ + ((k0 + d) % nb + nb) % nb;

    const double min_area = 1e-10 * spec_.dx * spec_.dx;
    double best_score = -1e300, best_size = 1e300;
    int bt[3] = {-1, -1, -1};
    double bl[3] = {0, 0, 0};
    for (int a = 0; a < nc; ++a) {
        for (int b = a + 1; b < nc; ++b) {
            for (int c = b + 1; c < nc; ++c) {
                const Vec2 &A = nodes_[cand[a]], &B = nodes_[cand[b]], &C = nodes_[cand[c]];
                const double det = (B.x - A.x) * (C.y - A.y) - (C.x - A.x) * (B.y - A.y);
                if (std::abs(det) < 2.0 * min_area)
                    continue;
                const double l1 = ((B.x - y.x) * (C.y - y.y) - (C.x - y.x) * (B.y - y.y)) / det;
                const double l2 = ((C.x - y.x) * (A.y - y.y) - (A.x - y.x) * (C.y - y.y)) / det;
                const double l3 = 1.0 - l1 - l2;
                const double score = std::min({l1, l2, l3, 0.0});
                const double size = std::max({dot(B - A, B - A), dot(C - B, C - B),
                                              dot(A - C, A - C)});
                const bool better = score > best_score + 1e-13 ||
                                    (std::abs(score - best_score) <= 1e-13 && size < best_size);
                if (better) {
                    best_score = score;
                    best_size = size;
                    bt[0] = cand[a], bt[1] = cand[b], bt[2] = cand[c];
                    bl[0] = l1, bl[1] = l2, bl[2] = l3;
                }
            }
        }
    }
    if (bt[0] >= 0) {
        double total = 0.0;
        for (double& l : bl) {
            l = std::max(l, 0.0);
            total += l;
        }
        for (int k = 0; k < 3; ++k) {
            if (bl[k] > 0.0) {
                ids[*count] = bt[k];
                w[*count] = bl[k] / total;
                ++*count;
            }
        }
        if (*count > 0)
            return;
    }
    // Fallback: nearest inside lattice node, searching outward rings of cells.
    int best = -1;
    double best_d = 0.0;
    const int cx = static_cast<int>(std::lround(px)), cy = static_cast<int>(std::lround(py));
    for (int r = 0; r < side_ && best < 0; ++r) {
        for (int dy = -r; dy <= r; ++dy) {
            for (int dx = -r; dx <= r; ++dx) {
                const int id = lattice_node(cx + dx, cy + dy);
                if (id < 0)
                    continue;
                const Vec2 d = nodes_[id] - y;
                if (best < 0 || dot(d, d) < best_d) {
                    best = id;
                    best_d = dot(d, d);
                }
            }
        }
    }
    ids[0] = best;
    w[0] = 1.0;
    *count = 1;
}

Stencil PhaseGrid::locate(const Vec2& y, int j) const {
    std::array<int, 4> ids{};
    std::array<double, 4> w{};
    int count = 0;
    spatial_stencil(y, ids, w, &count);
    Stencil s;
    const int base = j * n_space();
    for (int k = 0; k < count; ++k)
        s.add(base + ids[k], w[k]);
    return s;
}

Stencil PhaseGrid::locate(const Vec2& y, double theta) const {
    const double h = quad_.spacing();
    const double pos = wrap_angle(theta) / h;
    int j0 = static_cast<int>(std::floor(pos));
    double f = pos - j0;
    const int nv = n_dir();
    j0 %= nv;
    if (f < 1e-12 || f > 1.0 - 1e-12) {
        const int j = f < 0.5 ? j0 : (j0 + 1) % nv;
        return locate(y, j);
    }
    std::array<int, 4> ids{};
    std::array<double, 4> w{};
    int count = 0;
    spatial_stencil(y, ids, w, &count);
    Stencil s;
    const int j1 = (j0 + 1) % nv;
    for (int k = 0; k < count; ++k) {
        s.add(j0 * n_space() + ids[k], (1.0 - f) * w[k]);
        s.add(j1 * n_space() + ids[k], f * w[k]);
    }
    return s;
}

//---------------------------------------------------------------------------//
// Field
//---------------------------------------------------------------------------//

Field Field::timed(GridPtr grid, double value) {
    Field f;
    f.levels_ = grid->n_levels();
    f.timed_ = true;
    f.values_.assign(grid->level_size() * f.levels_, value);
    f.grid_ = std::move(grid);
    return f;
}

Field Field::fixed(GridPtr grid, double value) {
    Field f;
    f.levels_ = 1;
    f.values_.assign(grid->level_size(), value);
    f.grid_ = std::move(grid);
    return f;
}

Field Field::sample(GridPtr grid, const std::function<double(double, const Vec2&, double)>& fn) {
    Field f = timed(grid);
    const PhaseGrid& g = *grid;
    for (int n = 0; n < g.n_levels(); ++n)
        for (int j = 0; j < g.n_dir(); ++j)
            for (int i = 0; i < g.n_space(); ++i)
                f.at(n, j, i) = fn(g.time(n), g.node(i), g.angle(j));
    return f;
}

Field Field::sample_static(GridPtr grid, const std::function<double(const Vec2&, double)>& fn) {
    Field f = fixed(grid);
    const PhaseGrid& g = *grid;
    for (int j = 0; j < g.n_dir(); ++j)
        for (int i = 0; i < g.n_space(); ++i)
            f.at(j, i) = fn(g.node(i), g.angle(j));
    return f;
}

double Field::sup_norm() const {
    double m = 0.0;
    for (double v : values_)
        m = std::max(m, std::abs(v));
    return m;
}

double Field::min_value() const {
    return values_.empty() ? 0.0 : *std::min_element(values_.begin(), values_.end());
}

bool Field::all_finite() const {
    return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

double Field::l2_norm_at(int n) const {
    const PhaseGrid& g = *grid_;
    double acc = 0.0;
    for (int j = 0; j < g.n_dir(); ++j) {
        const double wj = g.quadrature().weights[j];
        for (int i = 0; i < g.n_inside(); ++i) {
            const double v = at(n, j, i);
            acc += wj * g.volume_weight(i) * v * v;
        }
    }
    return std::sqrt(acc);
}

double Field::l2_norm() const {
    if (levels_ == 1)
        return l2_norm_at(0);
    double acc = 0.0;
    for (int n = 0; n < levels_; ++n) {
        const double v = l2_norm_at(n);
        acc += grid_->time_weight(n) * v * v;
    }
    return std::sqrt(acc);
}

void Field::require_compatible(const Field& o) const {
    if (grid_ != o.grid_ || levels_ != o.levels_)
        throw GridMismatch("fields live on different grids or layouts");
}

Field& Field::operator+=(const Field& o) {
    require_compatible(o);
    for (std::size_t k = 0; k < values_.size(); ++k)
        values_[k] += o.values_[k];
    return *this;
}

Field& Field::operator-=(const Field& o) {
    require_compatible(o);
    for (std::size_t k = 0; k < values_.size(); ++k)
        values_[k] -= o.values_[k];
    return *this;
}

Field& Field::operator*=(double s) {
    for (double& v : values_)
        v *= s;
    return *this;
}

Field broadcast_in_time(const Field& f) {
    if (f.levels() != 1)
        return f;
    Field out = Field::timed(f.grid_ptr());
    const std::size_t L = f.grid().level_size();
    for (int n = 0; n < out.levels(); ++n)
        std::copy(f.values().begin(), f.values().begin() + L, out.level(n));
    return out;
}

Field pointwise_product(const Field& a, const Field& b) {
    if (a.grid_ptr() != b.grid_ptr())
        throw GridMismatch("pointwise product of fields on different grids");
    if (a.levels() == 1 && b.levels() > 1)
        return pointwise_product(b, a);
    if (b.levels() != 1 && b.levels() != a.levels())
        throw GridMismatch("pointwise product of fields with different level counts");
    Field out = a;
    const std::size_t L = a.grid().level_size();
    for (int n = 0; n < out.levels(); ++n) {
        double* o = out.level(n);
        const double* r = b.level(b.levels() == 1 ? 0 : n);
        for (std::size_t k = 0; k < L; ++k)
            o[k] *= r[k];
    }
    return out;
}

} // namespace ktie
