#include "ktie/coefficients.hpp"

#include "ktie/errors.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace ktie {

PhaseFn constant_fn(double value) {
    return [value](const Vec2&, double) { return value; };
}

double Scattering::operator()(const Vec2& x, double theta_in, double theta_out) const {
    switch (kind) {
    case Kind::None:
        return 0.0;
    case Kind::Dense:
        return dense(x, theta_in, theta_out);
    case Kind::Separable:
        return mu_tilde(x, theta_out) * p(x, theta_in, theta_out);
    }
    return 0.0;
}

double ProductN::n0_derivative_at_zero(int k) const {
    if (base == Base::Square)
        return k == 2 ? 2.0 : 0.0;
    return k == 3 ? 6.0 : 0.0;
}

TaylorN as_taylor(const Nonlinearity& n, int k_max) {
    if (const auto* t = std::get_if<TaylorN>(&n))
        return *t;
    const auto& p = std::get<ProductN>(n);
    TaylorN out;
    out.q.resize(std::max(k_max, p.exponent()) + 1);
    const int k = p.exponent();
    const double d = p.n0_derivative_at_zero(k);
    const PhaseFn q = p.q;
    out.q[k] = [q, d](const Vec2& x, double th) { return d * q(x, th); };
    return out;
}

bool CoefficientSet::is_linear() const {
    if (const auto* t = std::get_if<TaylorN>(&nonlinearity)) {
        for (int k = 2; k <= t->max_order(); ++k)
            if (t->has(k))
                return false;
        return true;
    }
    return !std::get<ProductN>(nonlinearity).q;
}

double CoefficientSet::nonlinear_term(const Vec2& x, double theta, double f) const {
    if (const auto* t = std::get_if<TaylorN>(&nonlinearity)) {
        double acc = 0.0;
        double power = f; // f^k / k!
        for (int k = 2; k <= t->max_order(); ++k) {
            power *= f / k;
            if (t->has(k))
                acc += t->q[k](x, theta) * power;
        }
        return acc;
    }
    const auto& p = std::get<ProductN>(nonlinearity);
    return p.q ? p.q(x, theta) * p.n0(f) : 0.0;
}

CoefficientCheck validate(const CoefficientSet& coeffs, const PhaseGrid& grid) {
    const int ns = grid.n_space(), nv = grid.n_dir();
    const auto& w = grid.quadrature().weights;
    CoefficientCheck check;
    check.worst_subcritical_margin = -1e300;
    if (!coeffs.mu.is_zero() && !grid.domain().is_euclidean())
        throw PreconditionViolation(
            "scattering is not supported on a conformal domain: the Riemannian transport model "
            "carries no scattering term");

    const double tol = 1e-12;
    for (int i = 0; i < ns; ++i) {
        const Vec2& x = grid.node(i);
        for (int j = 0; j < nv; ++j) {
            const double s = coeffs.sigma(x, grid.angle(j));
            if (!std::isfinite(s) || s < -tol)
                throw PreconditionViolation("sigma must be finite and nonnegative");
            check.sigma_max = std::max(check.sigma_max, s);
            if (coeffs.mu.is_zero())
                continue;
            double in = 0.0, out = 0.0;
            for (int jp = 0; jp < nv; ++jp) {
                const double m_in = coeffs.mu(x, grid.angle(jp), grid.angle(j));
                const double m_out = coeffs.mu(x, grid.angle(j), grid.angle(jp));
                if (!std::isfinite(m_in) || m_in < -tol)
                    throw PreconditionViolation("scattering kernel must be finite and nonnegative");
                check.mu_max = std::max(check.mu_max, m_in);
                in += w[jp] * m_in;
                out += w[jp] * m_out;
            }
            const double margin = std::max(in, out) - s;
            check.worst_subcritical_margin = std::max(check.worst_subcritical_margin, margin);
            if (margin > 1e-12 * std::max(1.0, s))
                throw PreconditionViolation(
                    "subcriticality violated: direction integral of mu exceeds sigma by " +
                    std::to_string(margin));
        }
    }
    if (coeffs.sigma_bound > 0.0 && check.sigma_max > coeffs.sigma_bound * (1.0 + 1e-12))
        throw PreconditionViolation("sigma exceeds its declared bound");
    if (coeffs.mu_bound > 0.0 && check.mu_max > coeffs.mu_bound * (1.0 + 1e-12))
        throw PreconditionViolation("mu exceeds its declared bound");
    if (coeffs.mu.is_zero())
        check.worst_subcritical_margin = -check.sigma_max;
    return check;
}

double effective_sigma_bound(const CoefficientSet& coeffs, const PhaseGrid& grid) {
    if (coeffs.sigma_bound > 0.0)
        return coeffs.sigma_bound;
    double m = 0.0;
    for (int i = 0; i < grid.n_space(); ++i)
        for (int j = 0; j < grid.n_dir(); ++j)
            m = std::max(m, coeffs.sigma(grid.node(i), grid.angle(j)));
    return m;
}

} // namespace ktie
