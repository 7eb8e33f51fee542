#pragma once

#include "ktie/grid.hpp"

#include <functional>
#include <string>
#include <variant>
#include <vector>

namespace ktie {

// Coefficient of (x, theta), theta the angle of the Euclidean unit direction.
using PhaseFn = std::function<double(const Vec2&, double)>;
// Scattering kernel mu(x, theta_in, theta_out).
using KernelFn = std::function<double(const Vec2&, double, double)>;

PhaseFn constant_fn(double value);

struct Scattering {
    enum class Kind { None, Dense, Separable };

    Kind kind = Kind::None;
    KernelFn dense;
    PhaseFn mu_tilde; // separable: mu = mu_tilde(x, v) p(x, v', v)
    KernelFn p;

    static Scattering none() { return {}; }
    static Scattering make_dense(KernelFn k) { return {Kind::Dense, std::move(k), {}, {}}; }
    static Scattering separable(PhaseFn mu_tilde, KernelFn p) {
        return {Kind::Separable, {}, std::move(mu_tilde), std::move(p)};
    }

    bool is_zero() const { return kind == Kind::None; }
    double operator()(const Vec2& x, double theta_in, double theta_out) const;
};

// N(x, v, f) = sum_{k=2}^{K} q_k(x, v) f^k / k!. Entry q[k] holds q_k; q[0], q[1] unused.
struct TaylorN {
    std::vector<PhaseFn> q;

    int max_order() const { return static_cast<int>(q.size()) - 1; }
    bool has(int k) const { return k < static_cast<int>(q.size()) && static_cast<bool>(q[k]); }
};

// N(x, v, f) = q(x, v) N0(f) with a named N0.
struct ProductN {
    enum class Base { Square, Cube };

    PhaseFn q;
    Base base = Base::Square;

    int exponent() const { return base == Base::Square ? 2 : 3; }
    double n0(double z) const { return base == Base::Square ? z * z : z * z * z; }
    // k-th derivative of N0 at zero.
    double n0_derivative_at_zero(int k) const;
    // Bound constants of |N0(f)| <= C1 |f|^l and |N0'(f)| <= C2 |f|^(l-1).
    double c1() const { return 1.0; }
    double c2() const { return static_cast<double>(exponent()); }
};

using Nonlinearity = std::variant<TaylorN, ProductN>;

// Equivalent Taylor coefficients of either representation, up to order k_max.
TaylorN as_taylor(const Nonlinearity& n, int k_max = 5);

struct CoefficientSet {
    PhaseFn sigma = constant_fn(0.0);
    Scattering mu;
    Nonlinearity nonlinearity = TaylorN{};
    // Declared bounds; non-positive values mean "use the sampled maximum".
    double sigma_bound = 0.0;
    double mu_bound = 0.0;

    bool is_linear() const;
    // N(x, v, f) at one node.
    double nonlinear_term(const Vec2& x, double theta, double f) const;
};

struct CoefficientCheck {
    double sigma_max = 0.0;
    double mu_max = 0.0;
    double worst_subcritical_margin = 0.0; // max of (direction integral of mu) - sigma
};

// Verifies 0 <= sigma <= sigma0, 0 <= mu <= mu0 and subcriticality on the grid;
// throws PreconditionViolation naming the failing condition. Scattering on a
// conformal domain is refused.
CoefficientCheck validate(const CoefficientSet& coeffs, const PhaseGrid& grid);

// sigma0 used by the solver: the declared bound, else the sampled maximum.
double effective_sigma_bound(const CoefficientSet& coeffs, const PhaseGrid& grid);

} // namespace ktie
