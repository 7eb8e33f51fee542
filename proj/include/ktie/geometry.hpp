#pragma once

#include <cmath>
#include <iosfwd>
#include <numbers>
#include <span>
#include <vector>

namespace ktie {

struct Vec2 {
    double x = 0.0;
    double y = 0.0;

    Vec2& operator+=(const Vec2& o) {
        x += o.x;
        y += o.y;
        return *this;
    }
    Vec2& operator-=(const Vec2& o) {
        x -= o.x;
        y -= o.y;
        return *this;
    }
    friend Vec2 operator+(Vec2 a, const Vec2& b) { return a += b; }
    friend Vec2 operator-(Vec2 a, const Vec2& b) { return a -= b; }
    friend Vec2 operator*(double s, const Vec2& a) { return {s * a.x, s * a.y}; }
    friend Vec2 operator*(const Vec2& a, double s) { return {s * a.x, s * a.y}; }
    friend Vec2 operator-(const Vec2& a) { return {-a.x, -a.y}; }
    friend bool operator==(const Vec2&, const Vec2&) = default;
};

inline double dot(const Vec2& a, const Vec2& b) { return a.x * b.x + a.y * b.y; }
inline double norm(const Vec2& a) { return std::hypot(a.x, a.y); }
inline Vec2 unit(double theta) { return {std::cos(theta), std::sin(theta)}; }

// Wraps an angle into [0, 2*pi).
inline double wrap_angle(double theta) {
    constexpr double two_pi = 2.0 * std::numbers::pi;
    double r = std::fmod(theta, two_pi);
    if (r < 0.0)
        r += two_pi;
    if (r >= two_pi)
        r = 0.0;
    return r;
}

//---------------------------------------------------------------------------//
// Conformal factor c(x) of the metric g = c(x)^2 |dx|^2.
//---------------------------------------------------------------------------//
struct ConformalFactor {
    enum class Kind { Constant, GaussianBump };

    Kind kind = Kind::Constant;
    double value = 1.0;     // Constant
    double amplitude = 0.0; // GaussianBump: c = 1 + amplitude * exp(-|x|^2 / width^2)
    double width = 1.0;

    static ConformalFactor constant(double c) { return {Kind::Constant, c, 0.0, 1.0}; }
    static ConformalFactor gaussian_bump(double amplitude, double width) {
        return {Kind::GaussianBump, 1.0, amplitude, width};
    }

    double operator()(const Vec2& x) const;
    // Gradient of log c.
    Vec2 log_gradient(const Vec2& x) const;
    bool is_flat() const { return kind == Kind::Constant; }
};

enum class DomainKind { EuclideanDisk, ConformalDisk };

// Disk of radius R centred at the origin, with a conformal metric in the
// conformal case. Immutable after construction.
class Domain {
  public:
    // Checks R > 0 and positivity of c by sampling; caches D_metric.
    static Domain make(DomainKind kind, double radius, ConformalFactor factor = {},
                       double ode_step = 1e-3);

    DomainKind kind() const { return kind_; }
    double radius() const { return radius_; }
    const ConformalFactor& factor() const { return factor_; }
    // Least upper bound of tau_+ (Euclidean: exactly 2R; conformal: sampled max + 5%).
    double diameter() const { return diameter_; }
    double ode_step() const { return ode_step_; }
    bool is_euclidean() const { return kind_ == DomainKind::EuclideanDisk; }

    double conformal(const Vec2& x) const { return is_euclidean() ? 1.0 : factor_(x); }
    bool contains(const Vec2& x, double rel_tol = 1e-9) const {
        return norm(x) <= radius_ * (1.0 + rel_tol);
    }
    Vec2 outer_normal(const Vec2& x) const { return (1.0 / norm(x)) * x; }

  private:
    Domain() = default;

    DomainKind kind_ = DomainKind::EuclideanDisk;
    double radius_ = 1.0;
    ConformalFactor factor_;
    double diameter_ = 2.0;
    double ode_step_ = 1e-3;
};

// Phase point (x, v). The direction is stored as the angle of the Euclidean
// unit vector u; the metric-unit velocity is v = u / c(x).
struct PhasePoint {
    Vec2 x;
    double theta = 0.0;

    Vec2 direction() const { return unit(theta); }
    Vec2 velocity(const Domain& d) const { return (1.0 / d.conformal(x)) * direction(); }
    PhasePoint reversed() const { return {x, wrap_angle(theta + std::numbers::pi)}; }
};

enum class Sign { Plus, Minus };

// tau_+ (Sign::Plus) or tau_- (Sign::Minus).
double exit_time(const Domain& domain, const PhasePoint& p, Sign sign);

// Geodesic flow phi_t. Negative t flows backwards.
PhasePoint flow(const Domain& domain, const PhasePoint& p, double t);

struct GeodesicSample {
    double s;
    PhasePoint point;
};

struct GeodesicTrace {
    std::vector<GeodesicSample> samples;
    double tau_plus = 0.0;
    double tau_minus = 0.0;

    // Columns s, x1, x2, v1, v2 with v the metric-unit velocity.
    void write_csv(std::ostream& os, const Domain& domain) const;
};

// Traces the forward geodesic from p to the boundary, recording every step.
GeodesicTrace trace_geodesic(const Domain& domain, const PhasePoint& p);

// max |tau_+(phi_t(p)) - (tau_+(p) - t)| over the samples and t_k = 0.9 tau_+ k / n_times.
double exit_time_flow_identity_check(const Domain& domain, std::span<const PhasePoint> samples,
                                     int n_times = 8);

//---------------------------------------------------------------------------//
// Direction quadrature on S^1 for the normalized measure.
//---------------------------------------------------------------------------//
struct DirectionQuadrature {
    std::vector<double> angles;
    std::vector<double> weights;

    int size() const { return static_cast<int>(angles.size()); }
    int opposite(int j) const { return (j + size() / 2) % size(); }
    double spacing() const { return 2.0 * std::numbers::pi / size(); }
};

DirectionQuadrature direction_quadrature(int n_v);

enum class BoundaryClass { Incoming, Outgoing, Tangential };

BoundaryClass classify_boundary(const Domain& domain, const PhasePoint& p);

//---------------------------------------------------------------------------//
// Low-level geodesic stepping, shared with the grid tracer.
//---------------------------------------------------------------------------//
namespace detail {

// One RK4 step of length h for the unit-speed geodesic of g = c^2 |dx|^2.
PhasePoint rk4_step(const ConformalFactor& c, const PhasePoint& p, double h);

// Integrates forward until the boundary is crossed or t_max is reached.
// Returns the time actually travelled; *hit is set when the boundary stopped
// the integration. The crossing is located by bisection to 1e-10 R.
double integrate_to_boundary(const Domain& d, PhasePoint& p, double t_max, double h, bool* hit);

} // namespace detail

} // namespace ktie
