#include "ktie/transport.hpp"

#include "ktie/errors.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <string>

namespace ktie {

namespace {

constexpr double kTieTol = 1e-12;

double sup_or_zero(const Field* f) { return f ? f->sup_norm() : 0.0; }

void require_on_grid(const Field* f, const GridPtr& grid, bool timed, const char* name) {
    if (!f)
        return;
    if (f->grid_ptr() != grid)
        throw GridMismatch(std::string(name) + " lives on a different grid");
    const bool is_timed = f->levels() == grid->n_levels() && f->levels() > 1;
    if (is_timed != timed)
        throw GridMismatch(std::string(name) + (timed ? " must be time dependent"
                                                      : " must be a static field"));
}

} // namespace

void SolveReport::write(std::ostream& os) const {
    os << "iterations " << iterations << '\n';
    os << "converged " << (converged ? "yes" : "no") << '\n';
    os << "kappa_bound " << kappa_bound << '\n';
    os << "max_ratio " << max_ratio << '\n';
    os << "stability_constant " << stability_constant << '\n';
    if (linear_part_ratio > 0.0)
        os << "linear_part_ratio " << linear_part_ratio << '\n';
    os << "residual_history";
    for (double r : residual_history)
        os << ' ' << r;
    os << '\n';
}

//---------------------------------------------------------------------------//
// Boundary traces
//---------------------------------------------------------------------------//

BoundaryTrace measure(const Field& f) {
    const PhaseGrid& g = f.grid();
    BoundaryTrace tr;
    tr.grid = f.grid_ptr();
    for (int j = 0; j < g.n_dir(); ++j) {
        for (int i = g.n_inside(); i < g.n_space(); ++i) {
            if (!g.is_outgoing(i, j))
                continue;
            tr.node.push_back(i);
            tr.direction.push_back(j);
            tr.weight.push_back(g.boundary_weight(i, j));
        }
    }
    tr.values.resize(static_cast<std::size_t>(f.levels()) * tr.pairs());
    for (int n = 0; n < f.levels(); ++n)
        for (int p = 0; p < tr.pairs(); ++p)
            tr.at(n, p) = f.at(n, tr.direction[p], tr.node[p]);
    return tr;
}

double BoundaryTrace::l2_norm() const {
    double acc = 0.0;
    const int L = levels();
    for (int n = 0; n < L; ++n) {
        const double tw = L > 1 ? grid->time_weight(n) : 1.0;
        for (int p = 0; p < pairs(); ++p)
            acc += tw * weight[p] * at(n, p) * at(n, p);
    }
    return std::sqrt(acc);
}

double BoundaryTrace::sup_norm() const {
    double m = 0.0;
    for (double v : values)
        m = std::max(m, std::abs(v));
    return m;
}

void BoundaryTrace::write_csv(std::ostream& os) const {
    os << "t,x1,x2,theta,weight,value\n";
    os.precision(17);
    for (int n = 0; n < levels(); ++n) {
        for (int p = 0; p < pairs(); ++p) {
            const Vec2& x = grid->node(node[p]);
            os << grid->time(n) << ',' << x.x << ',' << x.y << ',' << grid->angle(direction[p])
               << ',' << weight[p] << ',' << at(n, p) << '\n';
        }
    }
}

BoundaryTrace time_derivative_trace(const BoundaryTrace& trace) {
    const int L = trace.levels();
    if (L < 3)
        throw InvalidArgument("time derivative needs at least 3 time levels");
    BoundaryTrace out = trace;
    const double dt = trace.grid->dt();
    for (int p = 0; p < trace.pairs(); ++p) {
        out.at(0, p) = (-3.0 * trace.at(0, p) + 4.0 * trace.at(1, p) - trace.at(2, p)) / (2.0 * dt);
        for (int n = 1; n + 1 < L; ++n)
            out.at(n, p) = (trace.at(n + 1, p) - trace.at(n - 1, p)) / (2.0 * dt);
        out.at(L - 1, p) = (3.0 * trace.at(L - 1, p) - 4.0 * trace.at(L - 2, p) +
                            trace.at(L - 3, p)) /
                           (2.0 * dt);
    }
    return out;
}

BoundaryTrace operator-(const BoundaryTrace& a, const BoundaryTrace& b) {
    if (a.grid != b.grid || a.values.size() != b.values.size())
        throw GridMismatch("boundary traces live on different grids");
    BoundaryTrace out = a;
    for (std::size_t k = 0; k < out.values.size(); ++k)
        out.values[k] -= b.values[k];
    return out;
}

//---------------------------------------------------------------------------//
// Solver context
//---------------------------------------------------------------------------//

TransportSolver::TransportSolver(GridPtr grid, CoefficientSet coeffs)
    : grid_(std::move(grid)), coeffs_(std::move(coeffs)) {
    const PhaseGrid& g = *grid_;
    validate(coeffs_, g);
    sigma0_ = effective_sigma_bound(coeffs_, g);
    kappa_ = 1.0 - std::exp(-sigma0_ * g.domain().diameter());

    const int ns = g.n_space(), nv = g.n_dir();
    const bool euclid = g.domain().is_euclidean();
    rays_.resize(static_cast<std::size_t>(ns) * nv);
    sample_begin_.push_back(0);
    for (int j = 0; j < nv; ++j) {
        for (int i = 0; i < ns; ++i) {
            Ray& ray = rays_[static_cast<std::size_t>(j) * ns + i];
            const BackTrace bt = back_trace(i, j);
            ray.tau = bt.tau;
            ray.first = sample_atten_.size();
            if (bt.tau <= kTieTol)
                continue;
            ray.last = static_cast<int>(bt.points.size()) - 1;
            ray.tail = bt.tau - ray.last * g.dt();
            for (std::size_t k = 0; k < bt.points.size(); ++k) {
                const PhasePoint& y = bt.points[k];
                if (k == 0) {
                    Stencil self;
                    self.add(j * ns + i, 1.0);
                    push_sample(self);
                } else {
                    push_sample(euclid ? g.locate(y.x, j) : g.locate(y.x, y.theta));
                }
                sample_atten_.back() = bt.atten[k];
            }
            ray.exit = bt.exit;
            ray.exit_atten = bt.exit_atten;
            ray.exit_sample = sample_atten_.size();
            push_sample(euclid ? g.locate(bt.exit.x, j) : g.locate(bt.exit.x, bt.exit.theta));
            sample_atten_.back() = bt.exit_atten;
        }
    }

    if (!coeffs_.mu.is_zero()) {
        const auto& w = g.quadrature().weights;
        scatter_.resize(static_cast<std::size_t>(ns) * nv * nv);
        for (int i = 0; i < ns; ++i)
            for (int jo = 0; jo < nv; ++jo)
                for (int ji = 0; ji < nv; ++ji)
                    scatter_[(static_cast<std::size_t>(i) * nv + jo) * nv + ji] =
                        w[ji] * coeffs_.mu(g.node(i), g.angle(ji), g.angle(jo));
    }
}

void TransportSolver::push_sample(const Stencil& st) {
    for (int m = 0; m < st.count; ++m) {
        sample_offset_.push_back(st.offset[m]);
        sample_weight_.push_back(st.weight[m]);
    }
    sample_begin_.push_back(static_cast<std::uint32_t>(sample_offset_.size()));
    sample_atten_.push_back(1.0);
}

PhasePoint TransportSolver::back_step(const PhasePoint& p, double s) const {
    const Domain& d = grid_->domain();
    if (d.is_euclidean())
        return {p.x - s * p.direction(), p.theta};
    PhasePoint q = p.reversed();
    const int n = std::max(1, static_cast<int>(std::ceil(s / (0.25 * grid_->dt()) - 1e-9)));
    for (int k = 0; k < n; ++k)
        q = detail::rk4_step(d.factor(), q, s / n);
    return q.reversed();
}

double TransportSolver::attenuation(const Vec2& x, double theta, double s, double max_step) const {
    const PhasePoint p{x, theta};
    const Domain& d = grid_->domain();
    const double tau = exit_time(d, p, Sign::Minus);
    if (s < 0.0 || s > tau + 1e-9 * d.radius())
        throw EscapedDomain("attenuation length " + std::to_string(s) +
                            " exceeds the backward exit time " + std::to_string(tau));
    if (s == 0.0)
        return 1.0;
    if (max_step <= 0.0)
        max_step = 0.5 * grid_->dt();
    const int n = std::max(1, static_cast<int>(std::ceil(s / max_step - 1e-9)));
    const double h = s / n;
    double integral = 0.5 * coeffs_.sigma(p.x, p.theta);
    PhasePoint q = p;
    for (int k = 1; k <= n; ++k) {
        q = d.is_euclidean() ? PhasePoint{p.x - (k * h) * p.direction(), p.theta}
                             : back_step(q, h);
        integral += (k == n ? 0.5 : 1.0) * coeffs_.sigma(q.x, q.theta);
    }
    return std::exp(-h * integral);
}

TransportSolver::BackTrace TransportSolver::back_trace(int i, int j) const {
    const PhaseGrid& g = *grid_;
    const Domain& d = g.domain();
    BackTrace bt;
    const PhasePoint p{g.node(i), g.angle(j)};
    bt.tau = exit_time(d, p, Sign::Minus);
    const int sub = d.is_euclidean() ? 2 : 4;
    const double h = g.dt() / sub;
    double integral = 0.0;
    double s = 0.0;
    PhasePoint cur = p;
    double sig = coeffs_.sigma(cur.x, cur.theta);
    bt.points.push_back(p);
    bt.atten.push_back(1.0);
    for (int n = 1; n < g.n_levels() && g.time(n) < bt.tau - kTieTol; ++n) {
        for (int k = 0; k < sub; ++k) {
            s += h;
            PhasePoint next = d.is_euclidean() ? PhasePoint{p.x - s * p.direction(), p.theta}
                                               : back_step(cur, h);
            const double sig_next = coeffs_.sigma(next.x, next.theta);
            integral += 0.5 * h * (sig + sig_next);
            sig = sig_next;
            cur = next;
        }
        bt.points.push_back(cur);
        bt.atten.push_back(std::exp(-integral));
    }
    // Final partial leg to the exit point.
    const double rest = bt.tau - s;
    if (rest > 0.0) {
        const int m = std::max(1, static_cast<int>(std::ceil(rest / h - 1e-9)));
        const double hh = rest / m;
        for (int k = 1; k <= m; ++k) {
            PhasePoint next = d.is_euclidean()
                                  ? PhasePoint{p.x - (s + k * hh) * p.direction(), p.theta}
                                  : back_step(cur, hh);
            const double sig_next = coeffs_.sigma(next.x, next.theta);
            integral += 0.5 * hh * (sig + sig_next);
            sig = sig_next;
            cur = next;
        }
    }
    bt.exit = cur;
    bt.exit_atten = std::exp(-integral);
    return bt;
}

double TransportSolver::interpolate_boundary(const Field& f_minus, const PhasePoint& exit,
                                             double t) const {
    const PhaseGrid& g = *grid_;
    const int nt = g.n_levels() - 1;
    double pos = std::clamp(t / g.dt(), 0.0, static_cast<double>(nt));
    int n0 = std::min(static_cast<int>(std::floor(pos)), nt - 1);
    const double ft = pos - n0;

    int k0 = 0;
    double fa = 0.0;
    g.ring_locate(std::atan2(exit.x.y, exit.x.x), &k0, &fa);
    const int nb = g.n_ring();
    const int r0 = g.n_inside() + k0, r1 = g.n_inside() + (k0 + 1) % nb;

    const int nv = g.n_dir();
    const double dpos = wrap_angle(exit.theta) / g.quadrature().spacing();
    int j0 = static_cast<int>(std::floor(dpos));
    double fd = dpos - j0;
    j0 %= nv;
    if (fd < 1e-12) {
        fd = 0.0;
    } else if (fd > 1.0 - 1e-12) {
        j0 = (j0 + 1) % nv;
        fd = 0.0;
    }
    const int j1 = (j0 + 1) % nv;

    auto level = [&](int n) {
        const double a = (1 - fa) * f_minus.at(n, j0, r0) + fa * f_minus.at(n, j0, r1);
        if (fd == 0.0)
            return a;
        const double b = (1 - fa) * f_minus.at(n, j1, r0) + fa * f_minus.at(n, j1, r1);
        return (1 - fd) * a + fd * b;
    };
    return (1 - ft) * level(n0) + ft * level(n0 + 1);
}

Field TransportSolver::homogeneous(const Field* f0, const Field* f_minus) const {
    require_on_grid(f0, grid_, false, "initial data");
    require_on_grid(f_minus, grid_, true, "incoming data");
    const PhaseGrid& g = *grid_;
    Field out = Field::timed(grid_);
    if (!f0 && !f_minus)
        return out;
    const std::size_t L = g.level_size();
    for (std::size_t r = 0; r < L; ++r) {
        const Ray& ray = rays_[r];
        for (int n = 0; n < g.n_levels(); ++n) {
            double v = 0.0;
            if (n <= ray.last) {
                if (f0)
                    v = sample_atten_[ray.first + n] * sample(ray.first + n, f0->level(0));
            } else if (f_minus) {
                // Heaviside tie at t = tau_- goes to the boundary branch.
                if (ray.last < 0)
                    v = f_minus->level(n)[r];
                else
                    v = ray.exit_atten * interpolate_boundary(*f_minus, ray.exit, g.time(n) - ray.tau);
            }
            out.level(n)[r] = v;
        }
    }
    return out;
}

Field TransportSolver::duhamel(const Field& source) const {
    require_on_grid(&source, grid_, true, "source");
    const PhaseGrid& g = *grid_;
    Field out = Field::timed(grid_);
    const std::size_t L = g.level_size();
    const double dt = g.dt();
    const int nl = g.n_levels();
    for (std::size_t r = 0; r < L; ++r) {
        const Ray& ray = rays_[r];
        if (ray.last < 0)
            continue;
        for (int n = 1; n < nl; ++n) {
            // Trapezoid over the full steps s_k = k dt, k = 0..m.
            const int m = std::min(n, ray.last);
            double acc = 0.5 * source.level(n)[r];
            for (int k = 1; k < m; ++k)
                acc += sample_atten_[ray.first + k] * sample(ray.first + k, source.level(n - k));
            const double a_m = sample_atten_[ray.first + m] * sample(ray.first + m, source.level(n - m));
            double v;
            if (m == 0) {
                v = 0.0;
            } else {
                acc += 0.5 * a_m;
                v = dt * acc;
            }
            if (n > ray.last) {
                // Partial leg [s_last, tau_-]: source time t_n - tau_- lies between
                // levels n - last - 1 and n - last.
                const double back = (ray.tail / dt);
                const int hi = n - ray.last;
                const double s_hi = sample(ray.exit_sample, source.level(hi));
                const double s_lo = sample(ray.exit_sample, source.level(hi - 1));
                const double s_exit = back * s_lo + (1.0 - back) * s_hi;
                v += 0.5 * ray.tail * (a_m + ray.exit_atten * s_exit);
            }
            out.level(n)[r] = v;
        }
    }
    return out;
}

Field TransportSolver::scatter(const Field& f) const {
    Field out = f;
    const PhaseGrid& g = *grid_;
    if (coeffs_.mu.is_zero()) {
        std::fill(out.values().begin(), out.values().end(), 0.0);
        return out;
    }
    const int ns = g.n_space(), nv = g.n_dir();
    std::vector<double> column(nv);
    for (int n = 0; n < f.levels(); ++n) {
        const double* in = f.level(n);
        double* dst = out.level(n);
        for (int i = 0; i < ns; ++i) {
            for (int ji = 0; ji < nv; ++ji)
                column[ji] = in[static_cast<std::size_t>(ji) * ns + i];
            const double* m = scatter_.data() + static_cast<std::size_t>(i) * nv * nv;
            for (int jo = 0; jo < nv; ++jo) {
                double acc = 0.0;
                for (int ji = 0; ji < nv; ++ji)
                    acc += m[jo * nv + ji] * column[ji];
                dst[static_cast<std::size_t>(jo) * ns + i] = acc;
            }
        }
    }
    return out;
}

Field TransportSolver::free_streaming(const Field* source, const Field* f0,
                                      const Field* f_minus) const {
    Field out = homogeneous(f0, f_minus);
    if (source)
        out += duhamel(*source);
    return out;
}

std::pair<Field, SolveReport> TransportSolver::solve_linear(const Field* source, const Field* f0,
                                                            const Field* f_minus,
                                                            const SolverOptions& opts) const {
    if (!(opts.tol > 0.0))
        throw InvalidArgument("solver tolerance must be positive");
    SolveReport report;
    report.kappa_bound = kappa_;
    const Field seed = free_streaming(source, f0, f_minus);
    Field f = seed;
    if (!coeffs_.mu.is_zero()) {
        while (true) {
            if (report.iterations >= opts.max_iter)
                throw NonConvergence("Picard iteration did not reach tolerance " +
                                         std::to_string(opts.tol) + " in " +
                                         std::to_string(opts.max_iter) + " iterations",
                                     report.residual_history);
            Field next = duhamel(scatter(f));
            next += seed;
            double inc = 0.0;
            for (std::size_t k = 0; k < next.values().size(); ++k)
                inc = std::max(inc, std::abs(next.values()[k] - f.values()[k]));
            f = std::move(next);
            ++report.iterations;
            auto& hist = report.residual_history;
            if (!hist.empty() && hist.back() > 0.0) {
                const double ratio = inc / hist.back();
                if (hist.size() >= 1 && inc > 1e-13)
                    report.max_ratio = std::max(report.max_ratio, ratio);
                if (hist.size() >= 2 && inc > hist.back() * (1.0 + 1e-6) + 1e-14)
                    throw NonConvergence("Picard increments stopped decreasing", hist);
            }
            hist.push_back(inc);
            if (inc <= opts.tol)
                break;
        }
    }
    report.converged = true;
    if (!f.all_finite())
        throw NonConvergence("solution contains non-finite values", report.residual_history);
    const double data = sup_or_zero(source) + sup_or_zero(f0) + sup_or_zero(f_minus);
    report.stability_constant = data > 0.0 ? f.sup_norm() / data : 0.0;
    return {std::move(f), std::move(report)};
}

std::pair<Field, SolveReport> TransportSolver::solve_nonlinear(const Field* f0,
                                                               const Field* f_minus,
                                                               const NonlinearOptions& opts) const {
    const double a = sup_or_zero(f0), b = sup_or_zero(f_minus);
    if (a > opts.delta || b > opts.delta)
        throw SmallnessGate("data exceed the smallness gate delta = " +
                            std::to_string(opts.delta) + " (||f0|| = " + std::to_string(a) +
                            ", ||f_minus|| = " + std::to_string(b) + ")");
    const SolverOptions inner{std::max(opts.tol * 0.1, 1e-15), 1000};
    auto [f_hat, report] = solve_linear(nullptr, f0, f_minus, inner);
    if (coeffs_.is_linear())
        return {std::move(f_hat), std::move(report)};

    const PhaseGrid& g = *grid_;
    Field w = Field::timed(grid_);
    std::vector<double> history;
    int growth = 0;
    bool done = false;
    for (int it = 0; it < opts.max_iter; ++it) {
        Field src = Field::timed(grid_);
        for (int n = 0; n < g.n_levels(); ++n)
            for (int j = 0; j < g.n_dir(); ++j)
                for (int i = 0; i < g.n_space(); ++i)
                    src.at(n, j, i) = -coeffs_.nonlinear_term(g.node(i), g.angle(j),
                                                              w.at(n, j, i) + f_hat.at(n, j, i));
        Field next = solve_linear(&src, nullptr, nullptr, inner).first;
        double inc = 0.0;
        for (std::size_t k = 0; k < next.values().size(); ++k)
            inc = std::max(inc, std::abs(next.values()[k] - w.values()[k]));
        w = std::move(next);
        if (!history.empty() && inc > history.back())
            ++growth;
        else
            growth = 0;
        history.push_back(inc);
        if (growth >= 3)
            throw Divergence("nonlinear fixed-point increments grew three times in a row",
                             history);
        if (inc <= opts.tol) {
            done = true;
            break;
        }
    }
    if (!done)
        throw NonConvergence("nonlinear iteration did not converge", history);

    Field f = f_hat;
    f += w;
    SolveReport out;
    out.kappa_bound = kappa_;
    out.iterations = static_cast<int>(history.size());
    out.residual_history = std::move(history);
    out.converged = true;
    const double fh = f_hat.sup_norm();
    out.linear_part_ratio = fh > 0.0 ? f.sup_norm() / fh : 0.0;
    out.stability_constant = (a + b) > 0.0 ? f.sup_norm() / (a + b) : 0.0;
    return {std::move(f), std::move(out)};
}

double TransportSolver::residual(const Field& f, const Field* source, const Field* f0,
                                 const Field* f_minus) const {
    Field r = free_streaming(source, f0, f_minus);
    r += duhamel(scatter(f));
    r -= f;
    return r.sup_norm();
}

} // namespace ktie
