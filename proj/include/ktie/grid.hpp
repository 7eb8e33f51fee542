#pragma once

#include "ktie/geometry.hpp"

#include <array>
#include <cstddef>
#include <functional>
#include <memory>
#include <vector>

namespace ktie {

struct GridSpec {
    double dx = 0.05;
    int n_v = 16;
    double dt = 0.05;
    int n_t = 80;
    // Boundary ring size; 0 picks 4 * ceil(pi R / (2 dx)).
    int n_ring = 0;
    // Enforce T >= 2 D_metric. Only unit tests of short transients switch it off.
    bool require_long_horizon = true;
};

// Up to 8 (node, weight) pairs: 4 spatial corners times 2 directions.
// Offsets index a single time level, i.e. j * n_space + i.
struct Stencil {
    std::array<int, 8> offset{};
    std::array<double, 8> weight{};
    int count = 0;

    void add(int off, double w) {
        offset[count] = off;
        weight[count] = w;
        ++count;
    }
};

// Discretization of [0, T] x Omega x S^1. Spatial nodes are the inside
// lattice nodes followed by an equispaced ring on the boundary circle.
class PhaseGrid {
  public:
    static std::shared_ptr<const PhaseGrid> make(const Domain& domain, const GridSpec& spec);

    const Domain& domain() const { return domain_; }
    const GridSpec& spec() const { return spec_; }

    int n_space() const { return static_cast<int>(nodes_.size()); }
    int n_inside() const { return n_inside_; }
    int n_ring() const { return n_space() - n_inside_; }
    int n_dir() const { return quad_.size(); }
    int n_levels() const { return spec_.n_t + 1; }
    int lattice_side() const { return side_; }

    double dx() const { return spec_.dx; }
    double dt() const { return spec_.dt; }
    double horizon() const { return spec_.n_t * spec_.dt; }
    double time(int n) const { return n * spec_.dt; }

    const Vec2& node(int i) const { return nodes_[i]; }
    bool is_ring(int i) const { return i >= n_inside_; }
    double angle(int j) const { return quad_.angles[j]; }
    Vec2 dir(int j) const { return dirs_[j]; }
    const DirectionQuadrature& quadrature() const { return quad_; }

    // Metric area weight of a spatial node (zero on the ring).
    double volume_weight(int i) const { return volume_[i]; }
    // Metric arc weight of a ring node (zero inside).
    double arc_weight(int i) const { return arc_[i]; }
    // n(x) . u_j on the ring; zero inside.
    double normal_cosine(int i, int j) const;
    // Outgoing ring node with n . u > 1e-10.
    bool is_outgoing(int i, int j) const;
    // Weight of the outgoing boundary measure <n, v> dxi at one (i, j) pair.
    double boundary_weight(int i, int j) const;
    // Trapezoid weight of time level n.
    double time_weight(int n) const;

    std::size_t level_size() const { return static_cast<std::size_t>(n_dir()) * n_space(); }
    std::size_t index(int n, int j, int i) const {
        return (static_cast<std::size_t>(n) * n_dir() + j) * n_space() + i;
    }

    // Bilinear weights on full lattice cells; on cells cut by the boundary,
    // barycentric weights on a triangle of inside corners and ring nodes
    // (nearest inside node as a last resort). Combined with the
    // direction weights of theta: nearest node when the angle is on the grid,
    // linear between the two neighbours otherwise.
    Stencil locate(const Vec2& y, double theta) const;
    // Spatial part only, with direction index j fixed.
    Stencil locate(const Vec2& y, int j) const;

    // Lattice node id at (ix, iy) or -1 when outside the disk.
    int lattice_node(int ix, int iy) const;

    // Ring index containing arc position alpha: returns lower ring node and fraction.
    void ring_locate(double alpha, int* lower, double* frac) const;

  private:
    PhaseGrid() = default;
    void spatial_stencil(const Vec2& y, std::array<int, 4>& ids, std::array<double, 4>& w,
                         int* count) const;

    Domain domain_ = Domain::make(DomainKind::EuclideanDisk, 1.0);
    GridSpec spec_;
    DirectionQuadrature quad_;
    std::vector<Vec2> dirs_;
    std::vector<Vec2> nodes_;
    std::vector<double> volume_;
    std::vector<double> arc_;
    std::vector<int> lattice_;
    int side_ = 0;
    int n_inside_ = 0;
};

using GridPtr = std::shared_ptr<const PhaseGrid>;

// Scalar samples on a PhaseGrid. A static field has a single level and
// lives on S Omega; a timed field has n_levels() levels.
class Field {
  public:
    Field() = default;
    static Field timed(GridPtr grid, double value = 0.0);
    static Field fixed(GridPtr grid, double value = 0.0);
    // Samples fn(t, x, theta) at every node.
    static Field sample(GridPtr grid, const std::function<double(double, const Vec2&, double)>& fn);
    static Field sample_static(GridPtr grid, const std::function<double(const Vec2&, double)>& fn);

    const PhaseGrid& grid() const { return *grid_; }
    const GridPtr& grid_ptr() const { return grid_; }
    bool is_timed() const { return levels_ > 1 || timed_; }
    int levels() const { return levels_; }

    double& at(int n, int j, int i) { return values_[grid_->index(n, j, i)]; }
    double at(int n, int j, int i) const { return values_[grid_->index(n, j, i)]; }
    // Static access.
    double& at(int j, int i) { return values_[grid_->index(0, j, i)]; }
    double at(int j, int i) const { return values_[grid_->index(0, j, i)]; }

    std::vector<double>& values() { return values_; }
    const std::vector<double>& values() const { return values_; }
    const double* level(int n) const { return values_.data() + n * grid_->level_size(); }
    double* level(int n) { return values_.data() + n * grid_->level_size(); }

    double sup_norm() const;
    double min_value() const;
    bool all_finite() const;
    // Space-direction L^2 norm (metric volume times direction weights);
    // for timed fields also integrated in time with the trapezoid rule.
    double l2_norm() const;
    double l2_norm_at(int n) const;

    Field& operator+=(const Field& o);
    Field& operator-=(const Field& o);
    Field& operator*=(double s);
    friend Field operator+(Field a, const Field& b) { return a += b; }
    friend Field operator-(Field a, const Field& b) { return a -= b; }
    friend Field operator*(double s, Field a) { return a *= s; }

    // Throws GridMismatch unless both fields live on the same grid and layout.
    void require_compatible(const Field& o) const;

  private:
    GridPtr grid_;
    std::vector<double> values_;
    int levels_ = 0;
    bool timed_ = false;
};

// Static field lifted to every time level.
Field broadcast_in_time(const Field& f);

// Node-wise product. A static factor multiplies every level of a timed one.
Field pointwise_product(const Field& a, const Field& b);

// Interpolates a field level at a stencil.
inline double apply(const Stencil& s, const double* level) {
    double v = 0.0;
    for (int k = 0; k < s.count; ++k)
        v += s.weight[k] * level[s.offset[k]];
    return v;
}

} // namespace ktie
