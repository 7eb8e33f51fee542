#include "ktie/geometry.hpp"

#include "ktie/errors.hpp"

#include <algorithm>
#include <ostream>
#include <string>

namespace ktie {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;
constexpr double kBoundaryRelTol = 1e-8;

std::string fmt_point(const Vec2& x) {
    return "(" + std::to_string(x.x) + ", " + std::to_string(x.y) + ")";
}

// Euclidean forward exit time of x + t u from the disk of radius R.
double euclidean_exit(double radius, const Vec2& x, const Vec2& u) {
    const double xu = dot(x, u);
    const double rem = radius * radius - dot(x, x);
    if (rem <= 0.0 && xu >= 0.0)
        return 0.0;
    const double disc = std::max(xu * xu + rem, 0.0);
    return std::max(-xu + std::sqrt(disc), 0.0);
}

Vec2 project_into_disk(const Vec2& x, double radius) {
    const double r = norm(x);
    return r > radius ? (radius / r) * x : x;
}

} // namespace

double ConformalFactor::operator()(const Vec2& x) const {
    switch (kind) {
    case Kind::Constant:
        return value;
    case Kind::GaussianBump:
        return 1.0 + amplitude * std::exp(-dot(x, x) / (width * width));
    }
    return value;
}

Vec2 ConformalFactor::log_gradient(const Vec2& x) const {
    if (kind == Kind::Constant)
        return {};
    const double bump = amplitude * std::exp(-dot(x, x) / (width * width));
    const double scale = -2.0 * bump / (width * width) / (1.0 + bump);
    return scale * x;
}

namespace detail {

namespace {

struct Deriv {
    double dx, dy, dtheta;
};

Deriv geodesic_rhs(const ConformalFactor& c, const Vec2& x, double theta) {
    const double cv = c(x);
    const Vec2 g = c.log_gradient(x);
    const double s = std::sin(theta), co = std::cos(theta);
    return {co / cv, s / cv, (-s * g.x + co * g.y) / cv};
}

} // namespace

PhasePoint rk4_step(const ConformalFactor& c, const PhasePoint& p, double h) {
    const Vec2 x0 = p.x;
    const double t0 = p.theta;
    const Deriv k1 = geodesic_rhs(c, x0, t0);
    const Deriv k2 =
        geodesic_rhs(c, {x0.x + 0.5 * h * k1.dx, x0.y + 0.5 * h * k1.dy}, t0 + 0.5 * h * k1.dtheta);
    const Deriv k3 =
        geodesic_rhs(c, {x0.x + 0.5 * h * k2.dx, x0.y + 0.5 * h * k2.dy}, t0 + 0.5 * h * k2.dtheta);
    const Deriv k4 = geodesic_rhs(c, {x0.x + h * k3.dx, x0.y + h * k3.dy}, t0 + h * k3.dtheta);
    PhasePoint out;
    out.x.x = x0.x + h / 6.0 * (k1.dx + 2.0 * k2.dx + 2.0 * k3.dx + k4.dx);
    out.x.y = x0.y + h / 6.0 * (k1.dy + 2.0 * k2.dy + 2.0 * k3.dy + k4.dy);
    out.theta = t0 + h / 6.0 * (k1.dtheta + 2.0 * k2.dtheta + 2.0 * k3.dtheta + k4.dtheta);
    return out;
}

double integrate_to_boundary(const Domain& d, PhasePoint& p, double t_max, double h, bool* hit) {
    const double radius = d.radius();
    const ConformalFactor& c = d.factor();
    double t = 0.0;
    *hit = false;
    p.x = project_into_disk(p.x, radius);
    while (t < t_max) {
        const double step = std::min(h, t_max - t);
        PhasePoint next = rk4_step(c, p, step);
        if (norm(next.x) <= radius) {
            p = next;
            t += step;
            continue;
        }
        // Boundary crossed inside this step: bisect on the step length.
        double lo = 0.0, hi = step;
        const double tol = 1e-10 * radius;
        while (hi - lo > tol) {
            const double mid = 0.5 * (lo + hi);
            if (norm(rk4_step(c, p, mid).x) <= radius)
                lo = mid;
            else
                hi = mid;
        }
        p = rk4_step(c, p, hi);
        p.theta = wrap_angle(p.theta);
        *hit = true;
        return t + hi;
    }
    p.theta = wrap_angle(p.theta);
    return t;
}

} // namespace detail

Domain Domain::make(DomainKind kind, double radius, ConformalFactor factor, double ode_step) {
    if (!(radius > 0.0) || !std::isfinite(radius))
        throw InvalidDomain("radius must be positive and finite, got " + std::to_string(radius));
    if (!(ode_step > 0.0))
        throw InvalidDomain("ode step must be positive");

    Domain d;
    d.kind_ = kind;
    d.radius_ = radius;
    d.ode_step_ = ode_step;
    if (kind == DomainKind::EuclideanDisk) {
        d.factor_ = ConformalFactor::constant(1.0);
        d.diameter_ = 2.0 * radius;
        return d;
    }

    d.factor_ = factor;
    if (factor.kind == ConformalFactor::Kind::GaussianBump && !(factor.width > 0.0))
        throw InvalidDomain("gaussian bump width must be positive");
    constexpr int n_probe = 41;
    for (int i = 0; i < n_probe; ++i) {
        for (int j = 0; j < n_probe; ++j) {
            const Vec2 x{-radius + 2.0 * radius * i / (n_probe - 1),
                         -radius + 2.0 * radius * j / (n_probe - 1)};
            if (norm(x) > radius)
                continue;
            const double cv = factor(x);
            if (!(cv > 0.0) || !std::isfinite(cv))
                throw InvalidDomain("conformal factor not positive at " + fmt_point(x));
        }
    }

    // Coarse max of tau_+ over incoming boundary seeds, inflated by 5%.
    // Until it is known, traces are guarded with a generous provisional bound.
    d.diameter_ = 4.0 * radius * std::max(1.0, factor({0.0, 0.0}));
    constexpr int n_seed = 48;
    double longest = 0.0;
    for (int a = 0; a < n_seed; ++a) {
        const double alpha = kTwoPi * a / n_seed;
        const Vec2 x = radius * unit(alpha);
        for (int b = 0; b < n_seed - 1; ++b) {
            // Inward directions strictly inside the half circle, including the normal.
            const double offset = std::numbers::pi * (static_cast<double>(b + 1) / n_seed - 0.5);
            const PhasePoint p{x, wrap_angle(alpha + std::numbers::pi + offset)};
            longest = std::max(longest, exit_time(d, p, Sign::Plus));
        }
    }
    d.diameter_ = 1.05 * longest;
    return d;
}

double exit_time(const Domain& domain, const PhasePoint& p, Sign sign) {
    if (!domain.contains(p.x))
        throw OutOfDomain("point " + fmt_point(p.x) + " lies outside the disk");
    const PhasePoint q = sign == Sign::Plus ? p : p.reversed();
    const Vec2 u = q.direction();
    if (domain.is_euclidean())
        return euclidean_exit(domain.radius(), q.x, u);

    const double radius = domain.radius();
    if (norm(q.x) >= radius * (1.0 - 1e-12) && dot(q.x, u) >= 0.0)
        return 0.0;
    PhasePoint cur = q;
    bool hit = false;
    const double limit = 4.0 * domain.diameter();
    const double t = detail::integrate_to_boundary(domain, cur, limit, domain.ode_step(), &hit);
    if (!hit)
        throw TrappedGeodesic("geodesic from " + fmt_point(q.x) + " did not exit within " +
                              std::to_string(limit));
    return t;
}

PhasePoint flow(const Domain& domain, const PhasePoint& p, double t) {
    if (t == 0.0)
        return p;
    const double available = exit_time(domain, p, t > 0.0 ? Sign::Plus : Sign::Minus);
    const double span = std::abs(t);
    const double tol = 1e-9 * domain.radius() + 1e-6 * domain.ode_step();
    if (span > available + tol)
        throw EscapedDomain("flow time " + std::to_string(t) + " exceeds exit time " +
                            std::to_string(available));

    PhasePoint q = t > 0.0 ? p : p.reversed();
    if (domain.is_euclidean()) {
        q.x += span * q.direction();
    } else {
        const int n = std::max(1, static_cast<int>(std::ceil(span / domain.ode_step())));
        const double h = span / n;
        for (int k = 0; k < n; ++k)
            q = detail::rk4_step(domain.factor(), q, h);
        q.theta = wrap_angle(q.theta);
    }
    return t > 0.0 ? q : q.reversed();
}

void GeodesicTrace::write_csv(std::ostream& os, const Domain& domain) const {
    os << "s,x1,x2,v1,v2\n";
    os.precision(17);
    for (const auto& sample : samples) {
        const Vec2 v = sample.point.velocity(domain);
        os << sample.s << ',' << sample.point.x.x << ',' << sample.point.x.y << ',' << v.x << ','
           << v.y << '\n';
    }
}

GeodesicTrace trace_geodesic(const Domain& domain, const PhasePoint& p) {
    GeodesicTrace trace;
    trace.tau_plus = exit_time(domain, p, Sign::Plus);
    trace.tau_minus = exit_time(domain, p, Sign::Minus);
    trace.samples.push_back({0.0, p});

    const double step = domain.is_euclidean() ? domain.radius() / 100.0 : domain.ode_step();
    const int n = std::max(1, static_cast<int>(std::ceil(trace.tau_plus / step)));
    if (trace.tau_plus == 0.0)
        return trace;
    if (domain.is_euclidean()) {
        for (int k = 1; k <= n; ++k) {
            const double s = trace.tau_plus * k / n;
            trace.samples.push_back({s, {p.x + s * p.direction(), p.theta}});
        }
        return trace;
    }
    PhasePoint cur = p;
    double s = 0.0;
    const double h = domain.ode_step();
    while (true) {
        PhasePoint probe = cur;
        bool hit = false;
        const double dt = detail::integrate_to_boundary(domain, probe, h, h, &hit);
        s += dt;
        cur = probe;
        trace.samples.push_back({s, cur});
        if (hit || dt <= 0.0)
            break;
        if (s > 4.0 * domain.diameter())
            throw TrappedGeodesic("trace exceeded 4 * D_metric");
    }
    return trace;
}

double exit_time_flow_identity_check(const Domain& domain, std::span<const PhasePoint> samples,
                                     int n_times) {
    double worst = 0.0;
    for (const auto& p : samples) {
        const double tau = exit_time(domain, p, Sign::Plus);
        for (int k = 0; k <= n_times; ++k) {
            const double t = 0.9 * tau * k / std::max(n_times, 1);
            const PhasePoint q = flow(domain, p, t);
            worst = std::max(worst, std::abs(exit_time(domain, q, Sign::Plus) - (tau - t)));
        }
    }
    return worst;
}

DirectionQuadrature direction_quadrature(int n_v) {
    if (n_v < 8 || n_v % 2 != 0)
        throw InvalidQuadrature("direction count must be even and at least 8, got " +
                                std::to_string(n_v));
    DirectionQuadrature q;
    q.angles.resize(n_v);
    q.weights.assign(n_v, 1.0 / n_v);
    for (int j = 0; j < n_v; ++j)
        q.angles[j] = kTwoPi * j / n_v;
    return q;
}

BoundaryClass classify_boundary(const Domain& domain, const PhasePoint& p) {
    const double r = norm(p.x);
    if (std::abs(r - domain.radius()) > kBoundaryRelTol * domain.radius())
        throw OutOfDomain("point " + fmt_point(p.x) + " is not on the boundary");
    // With the metric unit normal n/c and v = u/c, <n, v>_g reduces to n . u.
    const double nv = dot(domain.outer_normal(p.x), p.direction());
    if (std::abs(nv) < 1e-10)
        return BoundaryClass::Tangential;
    return nv > 0.0 ? BoundaryClass::Outgoing : BoundaryClass::Incoming;
}

} // namespace ktie
