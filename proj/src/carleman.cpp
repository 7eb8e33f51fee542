#include "ktie/carleman.hpp"

#include "ktie/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <ostream>
#include <sstream>

namespace ktie {

namespace {
constexpr double kTwoPi = 2.0 * std::numbers::pi;
}

//---------------------------------------------------------------------------//
// Weights
//---------------------------------------------------------------------------//

EuclideanWeight EuclideanWeight::make(Vec2 gamma, double gamma0, double beta) {
    const double n = norm(gamma);
    if (!(n > 0.0))
        throw InvalidArgument("weight direction gamma must be non-zero");
    if (!(gamma0 > 0.0 && gamma0 <= 1.0))
        throw InvalidArgument("gamma0 must lie in (0, 1]");
    if (!(beta > 0.0 && beta < gamma0))
        throw InvalidArgument("beta must lie in (0, gamma0)");
    return {(1.0 / n) * gamma, gamma0, beta};
}

std::vector<double> tabulate_tau_plus(const PhaseGrid& g) {
    std::vector<double> tau(g.level_size());
    for (int j = 0; j < g.n_dir(); ++j)
        for (int i = 0; i < g.n_space(); ++i)
            tau[static_cast<std::size_t>(j) * g.n_space() + i] =
                exit_time(g.domain(), {g.node(i), g.angle(j)}, Sign::Plus);
    return tau;
}

RiemannianWeight::RiemannianWeight(GridPtr grid, double beta)
    : grid_(std::move(grid)), beta_(beta) {
    if (!(beta > 0.0 && beta < 1.0))
        throw InvalidArgument("Riemannian weight needs 0 < beta < 1");
    n_space_ = grid_->n_space();
    tau_plus_ = tabulate_tau_plus(*grid_);
    upwind_ = std::make_shared<const UpwindOperator>(grid_, tau_plus_);
}

double RiemannianWeight::phi(int n, int j, int i) const {
    return -beta_ * grid_->time(n) - tau_plus(j, i);
}

double weight_identity_residual(const PhaseGrid& g, const EuclideanWeight& w, double h) {
    double worst = 0.0;
    for (int j = 0; j < g.n_dir(); ++j)
        for (int i = 0; i < g.n_inside(); ++i) {
            const Vec2 x = g.node(i);
            const double t = 0.5 * g.horizon();
            const double d = (w.phi(t + h, x + h * g.dir(j)) - w.phi(t, x)) / h;
            worst = std::max(worst, std::abs(d - w.B(g.angle(j))));
        }
    return worst;
}

double weight_identity_residual(const RiemannianWeight&, const PhaseGrid& g, double h) {
    // With phi = -beta t - tau_+, the identity reduces to tau_+(phi_h) = tau_+ - h;
    // exit times are recomputed at the off-grid flowed points.
    double worst = 0.0;
    for (int j = 0; j < g.n_dir(); ++j)
        for (int i = 0; i < g.n_inside(); ++i) {
            const PhasePoint p{g.node(i), g.angle(j)};
            const double tp = exit_time(g.domain(), p, Sign::Plus);
            if (tp <= h)
                continue;
            const double tq = exit_time(g.domain(), flow(g.domain(), p, h), Sign::Plus);
            worst = std::max(worst, std::abs(tq - (tp - h)));
        }
    return worst;
}

//---------------------------------------------------------------------------//
// Lambda class
//---------------------------------------------------------------------------//

bool LambdaClass::contains(const Field& p) const {
    const PhaseGrid& g = p.grid();
    for (int n = 0; n < p.levels(); ++n)
        for (int j = 0; j < g.n_dir(); ++j) {
            const int jo = g.quadrature().opposite(j);
            const bool ok = admits(g.angle(j));
            for (int i = 0; i < g.n_space(); ++i) {
                const double v = p.at(n, j, i);
                if (!ok && v != 0.0)
                    return false;
                if (v != p.at(n, jo, i))
                    return false;
            }
        }
    return true;
}

Field lambda_project(const Field& p, const LambdaClass& cls) {
    const PhaseGrid& g = p.grid();
    Field out = p;
    for (int n = 0; n < p.levels(); ++n)
        for (int j = 0; j < g.n_dir(); ++j) {
            const int jo = g.quadrature().opposite(j);
            const bool ok = cls.admits(g.angle(j));
            for (int i = 0; i < g.n_space(); ++i)
                out.at(n, j, i) = ok ? 0.5 * (p.at(n, j, i) + p.at(n, jo, i)) : 0.0;
        }
    return out;
}

//---------------------------------------------------------------------------//
// Hypotheses
//---------------------------------------------------------------------------//

CarlemanHypotheses carleman_hypotheses(const PhaseGrid& g, const EuclideanWeight& w,
                                       const CoefficientSet& c, double gamma1) {
    CarlemanHypotheses h;
    for (int i = 0; i < g.n_space(); ++i)
        for (int j = 0; j < g.n_dir(); ++j) {
            const double th = g.angle(j);
            const double sig = std::abs(c.sigma(g.node(i), th));
            h.sigma_sup = std::max(h.sigma_sup, sig);
            const double b = w.B(th);
            if (std::abs(b) <= gamma1)
                h.c_sigma = std::max(h.c_sigma, b == 0.0 ? std::numeric_limits<double>::infinity()
                                                         : sig / std::abs(b));
            if (c.mu.is_zero())
                continue;
            double acc = 0.0;
            for (int k = 0; k < g.n_dir(); ++k) {
                const double m = c.mu(g.node(i), g.angle(k), th);
                if (m == 0.0)
                    continue;
                const double bk = w.B(g.angle(k));
                acc += g.quadrature().weights[k] * m * m /
                       (bk == 0.0 ? std::numeric_limits<double>::min() : bk * bk);
            }
            h.c_mu = std::max(h.c_mu, acc);
        }
    return h;
}

//---------------------------------------------------------------------------//
// Discrete transport derivative
//---------------------------------------------------------------------------//

UpwindOperator::UpwindOperator(GridPtr grid) : grid_(std::move(grid)) {
    build(tabulate_tau_plus(*grid_));
}

UpwindOperator::UpwindOperator(GridPtr grid, const std::vector<double>& tau_plus)
    : grid_(std::move(grid)) {
    if (tau_plus.size() != grid_->level_size())
        throw GridMismatch("exit-time table does not match the grid");
    build(tau_plus);
}

void UpwindOperator::build(const std::vector<double>& tau_plus) {
    const PhaseGrid& g = *grid_;
    const Domain& d = g.domain();
    const std::size_t L = g.level_size();
    back_.assign(L, {});
    fwd_.assign(L, {});
    has_back_.assign(L, 0);
    has_fwd_.assign(L, 0);
    const double h = g.dt();
    // The flow is reversible, so tau_-(x, v) = tau_+(x, -v).
    for (int j = 0; j < g.n_dir(); ++j) {
        const int jo = g.quadrature().opposite(j);
        for (int i = 0; i < g.n_space(); ++i) {
            const std::size_t k = static_cast<std::size_t>(j) * g.n_space() + i;
            const PhasePoint p{g.node(i), g.angle(j)};
            const auto to = [&](double t) {
                const PhasePoint y = flow(d, p, t);
                return d.is_euclidean() ? g.locate(y.x, j) : g.locate(y.x, y.theta);
            };
            if (tau_plus[static_cast<std::size_t>(jo) * g.n_space() + i] >= h) {
                back_[k] = to(-h);
                has_back_[k] = 1;
            }
            if (tau_plus[k] >= h) {
                fwd_[k] = to(h);
                has_fwd_[k] = 1;
            }
        }
    }
}

Field UpwindOperator::apply(const Field& f) const {
    const PhaseGrid& g = *grid_;
    if (&f.grid() != &g)
        throw GridMismatch("upwind operator applied to a field on another grid");
    Field out = Field::timed(grid_);
    const double h = g.dt();
    const std::size_t L = g.level_size();
    for (int n = 0; n < g.n_levels(); ++n) {
        const double* cur = f.level(n);
        double* o = out.level(n);
        for (std::size_t k = 0; k < L; ++k) {
            if (n > 0 && has_back_[k])
                o[k] = (cur[k] - ktie::apply(back_[k], f.level(n - 1))) / h;
            else if (n + 1 < g.n_levels() && has_fwd_[k])
                o[k] = (ktie::apply(fwd_[k], f.level(n + 1)) - cur[k]) / h;
            else
                o[k] = std::numeric_limits<double>::quiet_NaN();
        }
    }
    return out;
}

Field UpwindOperator::apply_static(const Field& g0) const {
    const PhaseGrid& g = *grid_;
    if (&g0.grid() != &g || g0.levels() != 1)
        throw GridMismatch("apply_static needs a static field on the operator's grid");
    Field out = Field::fixed(grid_);
    const double h = g.dt();
    const double* level = g0.level(0);
    double* o = out.level(0);
    for (std::size_t k = 0; k < g.level_size(); ++k) {
        if (has_back_[k] && has_fwd_[k])
            o[k] = (ktie::apply(fwd_[k], level) - ktie::apply(back_[k], level)) / (2.0 * h);
        else if (has_fwd_[k])
            o[k] = (ktie::apply(fwd_[k], level) - level[k]) / h;
        else if (has_back_[k])
            o[k] = (level[k] - ktie::apply(back_[k], level)) / h;
        else
            o[k] = 0.0;
    }
    return out;
}

namespace {

std::vector<double> sample_static(const PhaseGrid& g, const PhaseFn& fn) {
    std::vector<double> v(g.level_size());
    for (int j = 0; j < g.n_dir(); ++j)
        for (int i = 0; i < g.n_space(); ++i)
            v[static_cast<std::size_t>(j) * g.n_space() + i] = fn(g.node(i), g.angle(j));
    return v;
}

// Straight-line distance from x to the circle of radius R along u.
double chord_exit(const Vec2& x, const Vec2& u, double R) {
    const double b = dot(x, u);
    return -b + std::sqrt(std::max(0.0, R * R - dot(x, x) + b * b));
}

// Quadrature weights with e^{2 s phi} integrated over each node's cell
// (relative to its node value) and f held constant on the cell. At large s the
// weight has a boundary layer of width 1/(2 s) that nodal sums cannot see.
// Interior cells are clipped to the disk and sub-sampled; ring cells are arc
// segments carrying the signed <n, v> factor; time cells use the exact integral
// of e^{-2 s beta t}.
struct FittedWeights {
    std::vector<std::vector<double>> time;  // [m][n]
    std::vector<std::vector<double>> space; // [m][j * n_space + i]; signed <n, v> on the ring
};

constexpr int kSub = 16;

// dphi(y, j, i) = phi(y, v_j) - phi(x_i, v_j) for the spatial part of the weight.
template <class DPhi>
FittedWeights fitted_weights(const PhaseGrid& g, double beta, const std::vector<double>& s_values,
                             bool direction_dependent, DPhi dphi) {
    const Domain& d = g.domain();
    const double R = d.radius(), dx = g.dx(), dt = g.dt();
    const std::size_t S = s_values.size(), L = g.level_size();
    FittedWeights fw;
    fw.time.assign(S, std::vector<double>(g.n_levels()));
    fw.space.assign(S, std::vector<double>(L, 0.0));
    for (std::size_t m = 0; m < S; ++m) {
        const double a = 2.0 * s_values[m] * beta;
        for (int n = 0; n < g.n_levels(); ++n) {
            const double lo = n == 0 ? 0.0 : -0.5 * dt;
            const double hi = n == g.n_levels() - 1 ? 0.0 : 0.5 * dt;
            fw.time[m][n] = a == 0.0 ? hi - lo : (std::exp(-a * lo) - std::exp(-a * hi)) / a;
        }
    }
    const int n_j = direction_dependent ? g.n_dir() : 1;
    const double h = dx / kSub;
    for (int i = 0; i < g.n_inside(); ++i) {
        const Vec2 x = g.node(i);
        std::vector<Vec2> pts;
        std::vector<double> area;
        for (int a = 0; a < kSub; ++a)
            for (int b = 0; b < kSub; ++b) {
                const Vec2 y{x.x + (a + 0.5) * h - 0.5 * dx, x.y + (b + 0.5) * h - 0.5 * dx};
                if (norm(y) > R)
                    continue;
                const double c = d.conformal(y);
                pts.push_back(y);
                area.push_back(h * h * c * c);
            }
        for (int j = 0; j < n_j; ++j)
            for (std::size_t p = 0; p < pts.size(); ++p) {
                const double e = 2.0 * dphi(pts[p], j, i);
                for (std::size_t m = 0; m < S; ++m)
                    fw.space[m][static_cast<std::size_t>(j) * g.n_space() + i] +=
                        area[p] * std::exp(s_values[m] * e);
            }
    }
    const double dalpha = kTwoPi / g.n_ring();
    for (int i = g.n_inside(); i < g.n_space(); ++i) {
        const double alpha = std::atan2(g.node(i).y, g.node(i).x);
        for (int q = 0; q < kSub; ++q) {
            const double al = alpha + ((q + 0.5) / kSub - 0.5) * dalpha;
            const Vec2 y = R * unit(al);
            const double len = R * dalpha / kSub * d.conformal(y);
            for (int j = 0; j < g.n_dir(); ++j) {
                const double nv = dot(unit(al), g.dir(j));
                const double e = 2.0 * dphi(y, direction_dependent ? j : 0, i);
                for (std::size_t m = 0; m < S; ++m)
                    fw.space[m][static_cast<std::size_t>(j) * g.n_space() + i] +=
                        len * nv * std::exp(s_values[m] * e);
            }
        }
    }
    if (!direction_dependent)
        for (std::size_t m = 0; m < S; ++m)
            for (int j = 1; j < g.n_dir(); ++j)
                for (int i = 0; i < g.n_inside(); ++i)
                    fw.space[m][static_cast<std::size_t>(j) * g.n_space() + i] = fw.space[m][i];
    return fw;
}

void require_final_zero(const Field& f) {
    if (f.levels() < 2)
        throw PreconditionViolation("Carleman functional needs a timed field");
    const PhaseGrid& g = f.grid();
    const double* last = f.level(g.n_levels() - 1);
    double m = 0.0;
    for (std::size_t k = 0; k < g.level_size(); ++k)
        m = std::max(m, std::abs(last[k]));
    if (m > 1e-10 * std::max(1.0, f.sup_norm()))
        throw PreconditionViolation("f(T) must vanish (max |f(T)| = " + std::to_string(m) + ")");
}

} // namespace

std::vector<CarlemanValue> carleman_functional_euclidean(const Field& f, const EuclideanWeight& w,
                                                         const CoefficientSet& coeffs,
                                                         const std::vector<double>& s_values) {
    const PhaseGrid& g = f.grid();
    if (!g.domain().is_euclidean())
        throw PreconditionViolation("the linear weight needs a Euclidean domain");
    require_final_zero(f);
    for (int j = 0; j < g.n_dir(); ++j) {
        if (w.in_V(g.angle(j)))
            continue;
        for (int i = 0; i < g.n_space(); ++i)
            if (f.at(0, j, i) != 0.0)
                throw PreconditionViolation("f(0) must be supported in V");
    }

    const std::size_t S = s_values.size();
    std::vector<CarlemanValue> out(S);
    for (std::size_t m = 0; m < S; ++m)
        out[m].s = s_values[m];
    if (f.sup_norm() == 0.0)
        return out;
    // Largest weight over the support of f; phi decreases in t.
    double phi_max = -std::numeric_limits<double>::infinity();
    for (int n = 0; n < g.n_levels(); ++n)
        for (int j = 0; j < g.n_dir(); ++j)
            for (int i = 0; i < g.n_space(); ++i)
                if (f.at(n, j, i) != 0.0)
                    phi_max = std::max(phi_max, w.phi(g.time(n), g.node(i)));

    const UpwindOperator up(f.grid_ptr());
    const Field pf = up.apply(f);
    const std::vector<double> sigma = sample_static(g, coeffs.sigma);
    const bool scatter = !coeffs.mu.is_zero();
    std::vector<double> kernel; // [i][jout][jin] with w_jin
    if (scatter) {
        kernel.resize(static_cast<std::size_t>(g.n_space()) * g.n_dir() * g.n_dir());
        for (int i = 0; i < g.n_space(); ++i)
            for (int jo = 0; jo < g.n_dir(); ++jo)
                for (int ji = 0; ji < g.n_dir(); ++ji)
                    kernel[(static_cast<std::size_t>(i) * g.n_dir() + jo) * g.n_dir() + ji] =
                        coeffs.mu(g.node(i), g.angle(ji), g.angle(jo)) * g.quadrature().weights[ji];
    }

    const auto& qw = g.quadrature().weights;
    const FittedWeights fw = fitted_weights(g, w.beta, s_values, false, [&](const Vec2& y, int, int i) {
        return dot(w.gamma, y - g.node(i));
    });
    std::vector<double> initial(S), volume(S), residual(S), boundary(S), e(S);
    for (int n = 0; n < g.n_levels(); ++n) {
        const double t = g.time(n);
        const double* fn = f.level(n);
        const double* pn = pf.level(n);
        for (int i = 0; i < g.n_space(); ++i) {
            const double dphi = w.phi(t, g.node(i)) - phi_max;
            for (std::size_t m = 0; m < S; ++m)
                e[m] = std::exp(2.0 * s_values[m] * dphi) * fw.time[m][n];
            for (int j = 0; j < g.n_dir(); ++j) {
                const std::size_t k = static_cast<std::size_t>(j) * g.n_space() + i;
                const double v = fn[k];
                if (g.is_ring(i)) {
                    if (v != 0.0)
                        for (std::size_t m = 0; m < S; ++m)
                            boundary[m] += qw[j] * fw.space[m][k] * v * v * e[m];
                    continue;
                }
                const double b = w.B(g.angle(j));
                const bool init = n == 0 && w.in_V(g.angle(j));
                double r = 0.0;
                if (!std::isnan(pn[k])) {
                    r = pn[k] + sigma[k] * v;
                    if (scatter) {
                        const double* row =
                            &kernel[(static_cast<std::size_t>(i) * g.n_dir() + j) * g.n_dir()];
                        for (int ji = 0; ji < g.n_dir(); ++ji)
                            r -= row[ji] * fn[static_cast<std::size_t>(ji) * g.n_space() + i];
                    }
                }
                if (v == 0.0 && r == 0.0)
                    continue;
                for (std::size_t m = 0; m < S; ++m) {
                    const double cw = qw[j] * fw.space[m][k] * e[m];
                    volume[m] += cw * b * b * v * v;
                    residual[m] += cw * r * r;
                    if (init)
                        initial[m] += cw / fw.time[m][0] * v * v;
                }
            }
        }
    }
    for (std::size_t m = 0; m < S; ++m) {
        CarlemanValue& o = out[m];
        const double s = o.s;
        o.log_scale = 2.0 * s * phi_max;
        o.initial = s * initial[m];
        o.volume = s * s * volume[m];
        o.residual = residual[m];
        o.boundary = s * boundary[m];
        o.lhs = o.initial + o.volume;
        o.rhs = o.residual + o.boundary;
    }
    return out;
}

CarlemanValue carleman_functional_euclidean(const Field& f, const EuclideanWeight& w,
                                            const CoefficientSet& coeffs, double s) {
    return carleman_functional_euclidean(f, w, coeffs, std::vector<double>{s}).front();
}

std::vector<CarlemanValue> carleman_functional_riemannian(const Field& u, const RiemannianWeight& w,
                                                          const PhaseFn& sigma,
                                                          const std::vector<double>& s_values) {
    const PhaseGrid& g = u.grid();
    if (u.levels() < 2)
        throw InvalidArgument("Riemannian Carleman functional needs a timed field");
    if (&w.upwind().grid() != &g)
        throw GridMismatch("weight and field live on different grids");
    const std::size_t S = s_values.size();
    std::vector<CarlemanValue> out(S);
    for (std::size_t m = 0; m < S; ++m) {
        out[m].s = s_values[m];
        out[m].degenerate = w.degenerate();
    }
    if (u.sup_norm() == 0.0)
        return out;
    double phi_max = -std::numeric_limits<double>::infinity();
    for (int n = 0; n < g.n_levels(); ++n)
        for (int j = 0; j < g.n_dir(); ++j)
            for (int i = 0; i < g.n_space(); ++i)
                if (u.at(n, j, i) != 0.0)
                    phi_max = std::max(phi_max, w.phi(n, j, i));

    const Field pu = w.upwind().apply(u);
    const std::vector<double> sig = sample_static(g, sigma);
    const auto& qw = g.quadrature().weights;
    const int last = g.n_levels() - 1;
    const double R = g.domain().radius();
    const FittedWeights fw = fitted_weights(g, w.beta(), s_values, true, [&](const Vec2& y, int j, int i) {
        const Vec2 u = g.dir(j);
        return g.domain().conformal(g.node(i)) * (chord_exit(g.node(i), u, R) - chord_exit(y, u, R));
    });
    std::vector<double> initial(S), final_term(S), volume(S), residual(S), boundary(S);
    for (int n = 0; n <= last; ++n) {
        const double* un = u.level(n);
        const double* pn = pu.level(n);
        for (int j = 0; j < g.n_dir(); ++j)
            for (int i = 0; i < g.n_space(); ++i) {
                const std::size_t k = static_cast<std::size_t>(j) * g.n_space() + i;
                const double v = un[k];
                const double r = std::isnan(pn[k]) ? 0.0 : pn[k] + sig[k] * v;
                if (v == 0.0 && r == 0.0)
                    continue;
                const double dphi = w.phi(n, j, i) - phi_max;
                for (std::size_t m = 0; m < S; ++m) {
                    const double e = std::exp(2.0 * s_values[m] * dphi) * qw[j] * fw.space[m][k];
                    if (g.is_ring(i)) {
                        boundary[m] += fw.time[m][n] * v * v * e;
                        continue;
                    }
                    volume[m] += fw.time[m][n] * v * v * e;
                    residual[m] += fw.time[m][n] * r * r * e;
                    if (n == 0)
                        initial[m] += v * v * e;
                    if (n == last)
                        final_term[m] += v * v * e;
                }
            }
    }
    const double B = w.B();
    for (std::size_t m = 0; m < S; ++m) {
        CarlemanValue& o = out[m];
        const double s = o.s;
        o.log_scale = 2.0 * s * phi_max;
        o.volume = s * s * B * B * volume[m];
        o.initial = s * B * initial[m];
        o.final_term = s * B * final_term[m];
        o.boundary = s * B * boundary[m];
        o.residual = residual[m];
        o.lhs = o.volume + o.initial - o.final_term - o.boundary;
        o.rhs = o.residual;
    }
    return out;
}

CarlemanValue carleman_functional_riemannian(const Field& u, const RiemannianWeight& w,
                                             const PhaseFn& sigma, double s) {
    return carleman_functional_riemannian(u, w, sigma, std::vector<double>{s}).front();
}

std::vector<double> default_s_grid(double diameter) {
    return {10.0 / diameter, 20.0 / diameter, 40.0 / diameter, 80.0 / diameter, 160.0 / diameter};
}

//---------------------------------------------------------------------------//
// Reports
//---------------------------------------------------------------------------//

double InequalityReport::ratio(std::size_t k) const {
    return rhs[k] > 0.0 ? lhs[k] / rhs[k] : (lhs[k] > 0.0 ? std::numeric_limits<double>::infinity() : 0.0);
}

void InequalityReport::write_csv(std::ostream& os) const {
    os << "s,lhs,rhs,ratio\n";
    os.precision(10);
    for (std::size_t k = 0; k < s_values.size(); ++k)
        os << s_values[k] << ',' << lhs[k] << ',' << rhs[k] << ',' << ratio(k) << '\n';
}

std::string InequalityReport::verdict() const {
    std::ostringstream os;
    os << label << (negative_control ? " [negative control]" : "") << ": ";
    if (negative_control)
        os << (violations > 0 ? "violated at small s as expected" : "NOT violated");
    else
        os << (holds ? "holds" : "violated");
    os << " (C_fit = " << fitted_C << ", violations = " << violations << ")";
    return os.str();
}

namespace {

InequalityReport fill(std::string label, const std::vector<CarlemanValue>& values) {
    if (values.empty())
        throw InvalidArgument("inequality report needs at least one s value");
    InequalityReport r;
    r.label = std::move(label);
    for (const auto& v : values) {
        r.s_values.push_back(v.s);
        r.lhs.push_back(v.lhs);
        r.rhs.push_back(v.rhs);
    }
    r.s0 = r.s_values.front();
    return r;
}

void count(InequalityReport& r) {
    r.violations = 0;
    for (std::size_t k = 0; k < r.s_values.size(); ++k)
        if (r.lhs[k] > r.fitted_C * r.rhs[k])
            ++r.violations;
    r.holds = r.violations == 0;
}

} // namespace

InequalityReport calibrate_inequality(std::string label, const std::vector<CarlemanValue>& values,
                                      double slack) {
    InequalityReport r = fill(std::move(label), values);
    r.fitted_C = slack * std::max(r.ratio(0), 0.0);
    count(r);
    return r;
}

std::vector<InequalityReport> calibrate_family(const std::vector<std::string>& labels,
                                               const std::vector<std::vector<CarlemanValue>>& members,
                                               double slack) {
    if (labels.size() != members.size())
        throw InvalidArgument("one label per family member");
    std::vector<InequalityReport> out;
    double c = 0.0;
    for (std::size_t m = 0; m < members.size(); ++m) {
        out.push_back(fill(labels[m], members[m]));
        c = std::max(c, out.back().ratio(0));
    }
    for (auto& r : out) {
        r.fitted_C = slack * c;
        count(r);
    }
    return out;
}

InequalityReport check_inequality(std::string label, const std::vector<CarlemanValue>& values,
                                  double fitted_C, bool negative_control) {
    InequalityReport r = fill(std::move(label), values);
    r.negative_control = negative_control;
    r.fitted_C = fitted_C;
    count(r);
    return r;
}

//---------------------------------------------------------------------------//
// Energy estimate
//---------------------------------------------------------------------------//

Field time_derivative(const Field& f) {
    const PhaseGrid& g = f.grid();
    const int L = f.levels();
    if (L < 3)
        throw InvalidArgument("time derivative needs at least 3 time levels");
    Field out = Field::timed(f.grid_ptr());
    const double dt = g.dt();
    const std::size_t S = g.level_size();
    for (std::size_t k = 0; k < S; ++k) {
        out.level(0)[k] = (-3.0 * f.level(0)[k] + 4.0 * f.level(1)[k] - f.level(2)[k]) / (2.0 * dt);
        for (int n = 1; n + 1 < L; ++n)
            out.level(n)[k] = (f.level(n + 1)[k] - f.level(n - 1)[k]) / (2.0 * dt);
        out.level(L - 1)[k] =
            (3.0 * f.level(L - 1)[k] - 4.0 * f.level(L - 2)[k] + f.level(L - 3)[k]) / (2.0 * dt);
    }
    return out;
}

Field transport_derivative(const Field& g0, double h) {
    const PhaseGrid& g = g0.grid();
    const Domain& d = g.domain();
    Field out = Field::fixed(g0.grid_ptr());
    const double* level = g0.level(0);
    for (int j = 0; j < g.n_dir(); ++j)
        for (int i = 0; i < g.n_space(); ++i) {
            const PhasePoint p{g.node(i), g.angle(j)};
            const bool back = exit_time(d, p, Sign::Minus) >= h;
            const bool fwd = exit_time(d, p, Sign::Plus) >= h;
            const auto at = [&](double t) {
                const PhasePoint y = flow(d, p, t);
                return apply(d.is_euclidean() ? g.locate(y.x, j) : g.locate(y.x, y.theta), level);
            };
            const double here = g0.at(j, i);
            double v = 0.0;
            if (back && fwd)
                v = (at(h) - at(-h)) / (2.0 * h);
            else if (fwd)
                v = (at(h) - here) / h;
            else if (back)
                v = (here - at(-h)) / h;
            out.at(j, i) = v;
        }
    return out;
}

double incoming_l2_norm(const Field& f) {
    const PhaseGrid& g = f.grid();
    double acc = 0.0;
    for (int n = 0; n < f.levels(); ++n) {
        const double tw = f.levels() > 1 ? g.time_weight(n) : 1.0;
        for (int i = g.n_inside(); i < g.n_space(); ++i)
            for (int j = 0; j < g.n_dir(); ++j) {
                const double nv = g.normal_cosine(i, j);
                if (nv >= -1e-10)
                    continue;
                const double v = f.at(n, j, i);
                acc += tw * g.arc_weight(i) * g.quadrature().weights[j] * (-nv) * v * v;
            }
    }
    return std::sqrt(acc);
}

EnergyValue energy_functional(const Field& f, const Field& s_tilde, const Field* f0,
                              const Field* f_minus, const UpwindOperator* op) {
    const PhaseGrid& g = f.grid();
    EnergyValue e;
    const Field dtf = time_derivative(f);
    for (int n = 0; n < g.n_levels(); ++n)
        e.lhs_volume = std::max(e.lhs_volume, dtf.l2_norm_at(n));
    e.lhs_boundary = time_derivative_trace(measure(f)).l2_norm();
    e.rhs = s_tilde.l2_norm();
    if (f0) {
        e.rhs += f0->l2_norm();
        e.rhs += (op ? op->apply_static(*f0) : transport_derivative(*f0, g.dx())).l2_norm();
    }
    if (f_minus)
        e.rhs += incoming_l2_norm(time_derivative(*f_minus));
    return e;
}

} // namespace ktie
