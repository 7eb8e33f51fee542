#include "ktie/inversion.hpp"

#include "ktie/errors.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>

namespace ktie {

//---------------------------------------------------------------------------//
// Basis
//---------------------------------------------------------------------------//

CoefficientBasis::CoefficientBasis(GridPtr grid, int n_b, LambdaClass cls)
    : grid_(std::move(grid)), n_b_(n_b), cls_(cls) {
    if (!grid_)
        throw InvalidArgument("coefficient basis needs a grid");
    if (n_b < 2)
        throw InvalidArgument("basis lattice needs n_b >= 2");
    if (!(cls_.gamma0 > 0.0 && cls_.gamma0 < 1.0))
        throw InvalidArgument("Lambda class needs 0 < gamma0 < 1");
    const double gn = norm(cls_.gamma);
    if (!(gn > 0.0))
        throw InvalidArgument("Lambda class needs a nonzero gamma");
    cls_.gamma = (1.0 / gn) * cls_.gamma;

    const double R = grid_->domain().radius();
    spacing_ = 2.0 * R / (n_b - 1);
    for (int iy = 0; iy < n_b; ++iy)
        for (int ix = 0; ix < n_b; ++ix) {
            const Vec2 c{-R + ix * spacing_, -R + iy * spacing_};
            if (norm(c) < R * (1.0 - 1e-9))
                centers_.push_back(c);
        }
    if (centers_.empty())
        throw InvalidArgument("no basis centre lies inside the disk");

    const PhaseGrid& g = *grid_;
    scale_.assign(centers_.size(), 1.0);
    for (std::size_t k = 0; k < centers_.size(); ++k) {
        // Opposite directions share one evaluation so evenness holds bit for bit.
        Field b = Field::fixed(grid_);
        for (int j = 0; j < g.n_dir(); ++j) {
            const int jc = std::min(j, g.quadrature().opposite(j));
            for (int i = 0; i < g.n_space(); ++i)
                b.at(j, i) = raw(static_cast<int>(k), g.node(i), g.angle(jc));
        }
        const double sup = b.sup_norm();
        if (sup == 0.0)
            throw InvalidArgument("basis element " + std::to_string(k) + " vanishes on the grid");
        scale_[k] = 1.0 / sup;
        b *= scale_[k];
        elements_.push_back(std::move(b));
    }
}

double CoefficientBasis::raw(int k, const Vec2& x, double theta) const {
    const Vec2& c = centers_[k];
    const double hx = std::max(0.0, 1.0 - std::abs(x.x - c.x) / spacing_);
    const double hy = std::max(0.0, 1.0 - std::abs(x.y - c.y) / spacing_);
    if (hx == 0.0 || hy == 0.0 || !cls_.admits(theta))
        return 0.0;
    const double a = std::abs(dot(cls_.gamma, unit(theta))) - cls_.gamma0;
    const double top = 1.0 - cls_.gamma0;
    return hx * hy * a * a / (top * top);
}

Field CoefficientBasis::synthesize(const std::vector<double>& c) const {
    if (static_cast<int>(c.size()) != size())
        throw InvalidArgument("coefficient vector has " + std::to_string(c.size()) +
                              " entries, basis has " + std::to_string(size()));
    Field out = Field::fixed(grid_);
    for (int k = 0; k < size(); ++k)
        if (c[k] != 0.0)
            out += c[k] * elements_[k];
    return out;
}

PhaseFn CoefficientBasis::function(const std::vector<double>& c) const {
    if (static_cast<int>(c.size()) != size())
        throw InvalidArgument("coefficient vector does not match the basis");
    auto self = *this;
    return [self, c](const Vec2& x, double theta) {
        double v = 0.0;
        for (int k = 0; k < self.size(); ++k)
            if (c[k] != 0.0)
                v += c[k] * self.scale_[k] * self.raw(k, x, theta);
        return v;
    };
}

//---------------------------------------------------------------------------//
// Traces
//---------------------------------------------------------------------------//

std::vector<double> dtrace_vector(const BoundaryTrace& tr) {
    std::vector<double> out(tr.values.size());
    const int L = tr.levels();
    for (int n = 0; n < L; ++n) {
        const double tw = L > 1 ? tr.grid->time_weight(n) : 1.0;
        for (int p = 0; p < tr.pairs(); ++p)
            out[static_cast<std::size_t>(n) * tr.pairs() + p] = std::sqrt(tw * tr.weight[p]) * tr.at(n, p);
    }
    return out;
}

std::vector<double> dtrace_vector(const Field& f) {
    return dtrace_vector(time_derivative_trace(measure(f)));
}

BoundaryTrace restrict_trace(const BoundaryTrace& fine, const GridPtr& coarse) {
    const PhaseGrid& gf = *fine.grid;
    const PhaseGrid& gc = *coarse;
    if (gf.n_dir() != gc.n_dir())
        throw GridMismatch("trace restriction needs the same direction set");
    if (gf.domain().radius() != gc.domain().radius())
        throw GridMismatch("trace restriction needs the same disk");
    if (gf.horizon() < gc.horizon() - 1e-12)
        throw GridMismatch("fine trace does not cover the coarse horizon");

    std::map<std::pair<int, int>, int> lookup;
    for (int p = 0; p < fine.pairs(); ++p)
        lookup[{fine.node[p], fine.direction[p]}] = p;

    // Template with the coarse pairs and weights, values filled below.
    BoundaryTrace out = measure(Field::fixed(coarse));
    out.values.assign(static_cast<std::size_t>(gc.n_levels()) * out.pairs(), 0.0);

    const int Lf = fine.levels();
    for (int p = 0; p < out.pairs(); ++p) {
        const Vec2 x = gc.node(out.node[p]);
        int k0 = 0;
        double fr = 0.0;
        gf.ring_locate(std::atan2(x.y, x.x), &k0, &fr);
        if (fr > 1.0 - 1e-9) {
            k0 = (k0 + 1) % gf.n_ring();
            fr = 0.0;
        } else if (fr < 1e-9) {
            fr = 0.0;
        }
        const int j = out.direction[p];
        const int ids[2] = {gf.n_inside() + k0, gf.n_inside() + (k0 + 1) % gf.n_ring()};
        const double ws[2] = {1.0 - fr, fr};
        int src[2] = {-1, -1};
        double wsum = 0.0;
        for (int a = 0; a < 2; ++a) {
            auto it = lookup.find({ids[a], j});
            if (it != lookup.end() && ws[a] > 0.0) {
                src[a] = it->second;
                wsum += ws[a];
            }
        }
        if (wsum == 0.0)
            continue;
        for (int n = 0; n < gc.n_levels(); ++n) {
            const double pos = gc.time(n) / gf.dt();
            int m = std::min(static_cast<int>(std::floor(pos + 1e-9)), Lf - 1);
            double ft = std::clamp(pos - m, 0.0, 1.0);
            if (m == Lf - 1 || ft < 1e-9)
                ft = 0.0;
            double v = 0.0;
            for (int a = 0; a < 2; ++a) {
                if (src[a] < 0)
                    continue;
                double s = (1.0 - ft) * fine.at(m, src[a]);
                if (ft > 0.0)
                    s += ft * fine.at(m + 1, src[a]);
                v += ws[a] * s;
            }
            out.at(n, p) = v / wsum;
        }
    }
    return out;
}

//---------------------------------------------------------------------------//
// Sensitivities
//---------------------------------------------------------------------------//

std::vector<double> SensitivityMatrix::apply(const std::vector<double>& c) const {
    if (static_cast<int>(c.size()) != cols)
        throw InvalidArgument("coefficient vector does not match the sensitivity matrix");
    std::vector<double> out(rows, 0.0);
    for (int k = 0; k < cols; ++k) {
        if (c[k] == 0.0)
            continue;
        const double* col = data.data() + static_cast<std::size_t>(k) * rows;
        for (int r = 0; r < rows; ++r)
            out[r] += c[k] * col[r];
    }
    return out;
}

const Field* probe_incoming(const Probe& p) { return p.g.levels() > 0 ? &p.g : nullptr; }

Probe Probe::compatible(const Field& h) {
    if (h.is_timed())
        throw InvalidArgument("initial data must be a static field");
    return {h, broadcast_in_time(h)};
}

Field first_order_solution(const TransportSolver& background, const Probe& probe, const SolverOptions& opts) {
    const Field& h = probe.h;
    if (h.grid_ptr() != background.grid_ptr())
        throw GridMismatch("initial data live on a different grid");
    if (!(h.min_value() > 0.0))
        throw InvalidArgument("initial data h must be strictly positive, min is " +
                              std::to_string(h.min_value()));
    return background.solve_linear(nullptr, &h, probe_incoming(probe), opts).first;
}

namespace {

double vec_norm(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v)
        s += x * x;
    return std::sqrt(s);
}

template <class SourceFn>
SensitivityMatrix assemble(const TransportSolver& background, const CoefficientBasis& basis,
                           const SourceFn& source_of, const SensitivityOptions& opts) {
    if (basis.grid_ptr() != background.grid_ptr())
        throw GridMismatch("basis and solver live on different grids");
    SensitivityMatrix J;
    J.cols = basis.size();
    for (int k = 0; k < J.cols; ++k) {
        const Field src = source_of(k);
        const Field w = background.solve_linear(&src, nullptr, nullptr, opts.solver).first;
        const std::vector<double> col = dtrace_vector(w);
        if (k == 0) {
            J.rows = static_cast<int>(col.size());
            J.data.reserve(static_cast<std::size_t>(J.rows) * J.cols);
        }
        J.data.insert(J.data.end(), col.begin(), col.end());
    }

    // Spot check against a solver rebuilt from scratch.
    const int n_check = std::min(opts.verify_columns, J.cols);
    if (n_check > 0) {
        std::vector<int> order(J.cols);
        std::iota(order.begin(), order.end(), 0);
        std::mt19937_64 rng(opts.verify_seed);
        std::shuffle(order.begin(), order.end(), rng);
        const TransportSolver fresh(background.grid_ptr(), background.coefficients());
        for (int a = 0; a < n_check; ++a) {
            const int k = order[a];
            const Field src = source_of(k);
            const auto col = dtrace_vector(fresh.solve_linear(&src, nullptr, nullptr, opts.solver).first);
            double diff = 0.0, ref = 0.0;
            for (int r = 0; r < J.rows; ++r) {
                diff += std::pow(col[r] - J.at(r, k), 2);
                ref += col[r] * col[r];
            }
            const double rel = ref > 0.0 ? std::sqrt(diff / ref) : std::sqrt(diff);
            J.verification_error = std::max(J.verification_error, rel);
            J.verified_columns.push_back(k);
        }
    }
    return J;
}

} // namespace

Field kernel_moment(const Field& f, const KernelFn& p) {
    const PhaseGrid& g = f.grid();
    const int ns = g.n_space(), nv = g.n_dir();
    const auto& w = g.quadrature().weights;
    std::vector<double> table(static_cast<std::size_t>(ns) * nv * nv);
    for (int i = 0; i < ns; ++i)
        for (int jo = 0; jo < nv; ++jo)
            for (int ji = 0; ji < nv; ++ji)
                table[(static_cast<std::size_t>(i) * nv + jo) * nv + ji] = w[ji] * p(g.node(i), g.angle(ji), g.angle(jo));
    Field out = f;
    for (int n = 0; n < f.levels(); ++n)
        for (int i = 0; i < ns; ++i)
            for (int jo = 0; jo < nv; ++jo) {
                const double* row = table.data() + (static_cast<std::size_t>(i) * nv + jo) * nv;
                double acc = 0.0;
                for (int ji = 0; ji < nv; ++ji)
                    acc += row[ji] * f.at(n, ji, i);
                out.at(n, jo, i) = acc;
            }
    return out;
}

SensitivityMatrix build_sensitivity_sigma(const TransportSolver& background, const CoefficientBasis& basis,
                                          const Field& drive, const SensitivityOptions& opts) {
    return assemble(
        background, basis,
        [&](int k) { return -1.0 * pointwise_product(basis.element(k), drive); }, opts);
}

SensitivityMatrix build_sensitivity_mu(const TransportSolver& background, const CoefficientBasis& basis,
                                       const Field& drive, const KernelFn& p, const SensitivityOptions& opts) {
    const Field moment = kernel_moment(drive, p);
    return assemble(
        background, basis, [&](int k) { return pointwise_product(basis.element(k), moment); }, opts);
}

SensitivityMatrix build_sensitivity_q(const TransportSolver& background, const CoefficientBasis& basis,
                                      const Field& f1, int m, const SensitivityOptions& opts) {
    if (m < 2)
        throw InvalidArgument("nonlinear orders start at m = 2");
    Field power = f1;
    for (int e = 2; e <= m; ++e)
        power = pointwise_product(power, f1);
    return assemble(
        background, basis, [&](int k) { return -1.0 * pointwise_product(basis.element(k), power); }, opts);
}

//---------------------------------------------------------------------------//
// Least squares
//---------------------------------------------------------------------------//

LeastSquaresSolution tikhonov_solve(const SensitivityMatrix& J, const std::vector<double>& d,
                                    const RecoveryOptions& opts) {
    if (static_cast<int>(d.size()) != J.rows)
        throw InvalidArgument("data vector has " + std::to_string(d.size()) + " entries, expected " +
                              std::to_string(J.rows));
    const Eigen::Map<const Eigen::MatrixXd> A(J.data.data(), J.rows, J.cols);
    const Eigen::Map<const Eigen::VectorXd> b(d.data(), J.rows);
    const Eigen::BDCSVD<Eigen::MatrixXd> svd(A, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const Eigen::VectorXd sv = svd.singularValues();
    const Eigen::VectorXd beta = svd.matrixU().transpose() * b;
    const double smax = sv.size() > 0 ? sv(0) : 0.0;
    const double smin = sv.size() > 0 ? sv(sv.size() - 1) : 0.0;
    const double d2 = b.squaredNorm();
    const double out_of_range = std::max(0.0, d2 - beta.squaredNorm());

    const auto residual_of = [&](double lam) {
        double r = out_of_range;
        for (int i = 0; i < sv.size(); ++i) {
            const double f = lam / (sv(i) * sv(i) + lam);
            r += f * f * beta(i) * beta(i);
        }
        return std::sqrt(r);
    };

    LeastSquaresSolution out;
    out.c.assign(J.cols, 0.0);
    if (smax == 0.0) {
        out.condition_number = std::numeric_limits<double>::infinity();
        out.residual = std::sqrt(d2);
        return out;
    }

    double lam = opts.lambda >= 0.0 ? opts.lambda : opts.lambda_rel * smax * smax;
    if (opts.noise_norm > 0.0) {
        const double target = opts.discrepancy_tau * opts.noise_norm;
        double lo = std::log(1e-16 * smax * smax), hi = std::log(1e4 * smax * smax);
        if (residual_of(std::exp(lo)) >= target) {
            lam = std::exp(lo);
        } else if (residual_of(std::exp(hi)) <= target) {
            lam = std::exp(hi);
        } else {
            for (int it = 0; it < 200 && hi - lo > 1e-10; ++it) {
                const double mid = 0.5 * (lo + hi);
                (residual_of(std::exp(mid)) < target ? lo : hi) = mid;
            }
            lam = std::exp(0.5 * (lo + hi));
        }
    }

    Eigen::VectorXd coef = Eigen::VectorXd::Zero(sv.size());
    for (int i = 0; i < sv.size(); ++i)
        coef(i) = sv(i) / (sv(i) * sv(i) + lam) * beta(i);
    const Eigen::VectorXd c = svd.matrixV() * coef;
    for (int k = 0; k < J.cols; ++k)
        out.c[k] = c(k);
    out.lambda = lam;
    out.condition_number = (smax * smax + lam) / (smin * smin + lam);
    out.residual = (A * c - b).norm();
    return out;
}

double relative_l2(const Field& estimate, const Field& truth) {
    const double ref = truth.l2_norm();
    const double err = (estimate - truth).l2_norm();
    return ref > 0.0 ? err / ref : err;
}

std::string RecoveryResult::summary() const {
    std::ostringstream os;
    os.precision(6);
    os << label << ": relative_error=";
    if (relative_l2_error >= 0.0)
        os << relative_l2_error;
    else
        os << "n/a";
    os << " residual=" << residual << " zero_residual=" << zero_residual << " lambda=" << lambda
       << " condition=" << condition_number << " outer=" << outer_iterations
       << " column_check=" << sensitivity_check;
    if (ill_conditioned)
        os << " [ill-conditioned]";
    if (!residual_ok)
        os << " [residual above zero estimate]";
    return os.str();
}

namespace {

constexpr double kConditionLimit = 1e12;

void fill(RecoveryResult& r, const LeastSquaresSolution& ls, const std::vector<double>& data,
          const SensitivityMatrix& J) {
    r.c = ls.c;
    r.lambda = ls.lambda;
    r.condition_number = ls.condition_number;
    r.residual = ls.residual;
    r.zero_residual = vec_norm(data);
    r.ill_conditioned = !(ls.condition_number <= kConditionLimit);
    r.residual_ok = ls.residual <= r.zero_residual * (1.0 + 1e-12) + 1e-300;
    r.sensitivity_check = J.verification_error;
}

// Solution of the problem with coefficients perturbed by `delta`, written as
// base + w with T w = L(base + w) for the linear perturbation map L; a fixed
// point on the background solver, so no new characteristics are traced.
template <class Perturb>
Field perturbed_solution(const TransportSolver& background, const Field& base, const Perturb& L,
                         const SolverOptions& opts) {
    Field total = base;
    double prev = std::numeric_limits<double>::infinity();
    for (int it = 0; it < 100; ++it) {
        const Field src = L(total);
        const Field w = background.solve_linear(&src, nullptr, nullptr, opts).first;
        const Field next = base + w;
        const double step = (next - total).sup_norm();
        total = next;
        const double scale = std::max(total.sup_norm(), 1e-300);
        if (step <= 1e-11 * scale)
            return total;
        if (it > 3 && step > prev)
            throw NonConvergence("perturbed forward problem does not converge", {step});
        prev = step;
    }
    throw NonConvergence("perturbed forward problem hit the iteration cap", {prev});
}

} // namespace

RecoveryResult recover_sigma(const std::vector<double>& data, const TransportSolver& background,
                             const CoefficientBasis& basis, const Probe& probe, const RecoveryOptions& opts,
                             const Field* truth) {
    const SolverOptions& so = opts.sensitivity.solver;
    const Field f1 = first_order_solution(background, probe, so);
    RecoveryResult r;
    r.label = "sigma";
    Field drive = f1;
    const int sweeps = std::max(1, opts.outer_iterations);
    for (int it = 0; it < sweeps; ++it) {
        const SensitivityMatrix J = build_sensitivity_sigma(background, basis, drive, opts.sensitivity);
        const LeastSquaresSolution ls = tikhonov_solve(J, data, opts);
        fill(r, ls, data, J);
        r.outer_iterations = it + 1;
        if (it + 1 < sweeps) {
            const Field est = basis.synthesize(ls.c);
            drive = perturbed_solution(
                background, f1, [&](const Field& f) { return -1.0 * pointwise_product(est, f); }, so);
        }
    }
    r.estimate = lambda_project(basis.synthesize(r.c), basis.lambda_class());
    r.coefficient = Field::sample_static(background.grid_ptr(), background.coefficients().sigma) + r.estimate;
    if (truth)
        r.relative_l2_error = relative_l2(r.estimate, *truth);
    return r;
}

RecoveryResult recover_mu_tilde(const std::vector<double>& data, const TransportSolver& background,
                                const PhaseFn& background_mu_tilde, const KernelFn& p,
                                const CoefficientBasis& basis, const Probe& probe, const RecoveryOptions& opts,
                                const Field* truth) {
    const SolverOptions& so = opts.sensitivity.solver;
    const Field f1 = first_order_solution(background, probe, so);
    RecoveryResult r;
    r.label = "mu_tilde";
    Field drive = f1;
    const int sweeps = std::max(1, opts.outer_iterations);
    for (int it = 0; it < sweeps; ++it) {
        const SensitivityMatrix J = build_sensitivity_mu(background, basis, drive, p, opts.sensitivity);
        const LeastSquaresSolution ls = tikhonov_solve(J, data, opts);
        fill(r, ls, data, J);
        r.outer_iterations = it + 1;
        if (it + 1 < sweeps) {
            const Field est = basis.synthesize(ls.c);
            drive = perturbed_solution(
                background, f1, [&](const Field& f) { return pointwise_product(est, kernel_moment(f, p)); }, so);
        }
    }
    r.estimate = lambda_project(basis.synthesize(r.c), basis.lambda_class());
    const Field bg = background_mu_tilde ? Field::sample_static(background.grid_ptr(), background_mu_tilde)
                                         : Field::fixed(background.grid_ptr());
    r.coefficient = bg + r.estimate;
    if (truth)
        r.relative_l2_error = relative_l2(r.estimate, *truth);
    return r;
}

std::vector<RecoveryResult> recover_q_sequence(const std::vector<std::vector<double>>& data,
                                               const TransportSolver& background, const CoefficientBasis& basis,
                                               const Probe& probe, int K, const RecoveryOptions& opts,
                                               const std::vector<Field>& known_lower,
                                               const std::vector<Field>& truths) {
    if (K < 2)
        throw InvalidArgument("q recovery needs K >= 2");
    if (static_cast<int>(data.size()) < K + 1)
        throw InvalidArgument("data must hold one trace vector per order 2.." + std::to_string(K));
    const SolverOptions& so = opts.sensitivity.solver;
    const GridPtr& g = background.grid_ptr();
    const Field f1 = first_order_solution(background, probe, so);

    std::vector<Field> q_bg = sample_taylor(as_taylor(background.coefficients().nonlinearity, K), g);
    q_bg.resize(K + 1);
    std::vector<Field> q_model = q_bg;

    std::vector<RecoveryResult> out;
    for (int m = 2; m <= K; ++m) {
        RecoveryResult r;
        r.label = "q" + std::to_string(m);
        try {
            // Data shift: remove the order-m response of the recovered lower orders.
            std::vector<double> d = data[m];
            if (m > 2) {
                std::vector<Field> q_lo = q_model;
                q_lo[m] = q_bg[m];
                const auto bg = solve_hierarchy(background, probe.h, m, q_bg, so, probe_incoming(probe));
                const auto model = solve_hierarchy(background, probe.h, m, q_lo, so, probe_incoming(probe));
                const auto t_bg = dtrace_vector(bg.jet[m]);
                const auto t_model = dtrace_vector(model.jet[m]);
                if (t_bg.size() != d.size())
                    throw InvalidArgument("order " + std::to_string(m) + " data have the wrong length");
                for (std::size_t k = 0; k < d.size(); ++k)
                    d[k] += t_bg[k] - t_model[k];
            }
            const SensitivityMatrix J = build_sensitivity_q(background, basis, f1, m, opts.sensitivity);
            const LeastSquaresSolution ls = tikhonov_solve(J, d, opts);
            fill(r, ls, d, J);
            r.outer_iterations = 1;
        } catch (const Error&) {
            return out;
        }
        r.estimate = lambda_project(basis.synthesize(r.c), basis.lambda_class());
        const Field base = q_bg[m].levels() > 0 ? q_bg[m] : Field::fixed(g);
        r.coefficient = base + r.estimate;
        if (m < static_cast<int>(truths.size()) && truths[m].levels() > 0)
            r.relative_l2_error = relative_l2(r.estimate, truths[m]);

        const bool known = m < static_cast<int>(known_lower.size()) && known_lower[m].levels() > 0;
        const Field& delta = known ? known_lower[m] : r.estimate;
        q_model[m] = (q_bg[m].levels() > 0 ? q_bg[m] : Field::fixed(g)) + delta;
        out.push_back(std::move(r));
    }
    return out;
}

//---------------------------------------------------------------------------//
// Stability ensembles
//---------------------------------------------------------------------------//

void StabilityTable::write_csv(std::ostream& os) const {
    os << "draw,delta_norm,data_norm,ratio\n";
    os.precision(12);
    for (const auto& r : rows)
        os << r.draw << ',' << r.delta_norm << ',' << r.data_norm << ',' << r.ratio << '\n';
}

StabilityTable stability_experiment(const TransportSolver& background, const CoefficientBasis& basis,
                                    const Probe& probe, StabilityTarget target, int n_draws, double delta_norm,
                                    std::uint64_t seed) {
    if (n_draws < 1)
        throw InvalidArgument("stability ensemble needs at least one draw");
    if (!(delta_norm > 0.0))
        throw InvalidArgument("perturbation norm must be positive");
    const SolverOptions so{1e-13, 1000};
    const Field f1 = first_order_solution(background, probe, so);
    const Field f1_sq = pointwise_product(f1, f1);
    const Field sigma = Field::sample_static(background.grid_ptr(), background.coefficients().sigma);

    StabilityTable table;
    table.label = target == StabilityTarget::Sigma ? "sigma" : "q2";
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    const int max_attempts = 20 * n_draws;
    for (int attempt = 0; static_cast<int>(table.rows.size()) < n_draws; ++attempt) {
        if (attempt >= max_attempts)
            throw NonConvergence("too many degenerate stability draws", {});
        std::vector<double> c(basis.size());
        for (double& x : c)
            x = normal(rng);
        Field delta = basis.synthesize(c);
        const double nrm = delta.l2_norm();
        if (nrm == 0.0) {
            ++table.redrawn;
            continue;
        }
        delta *= delta_norm / nrm;

        Field response;
        if (target == StabilityTarget::Sigma) {
            // Absorption must stay non-negative.
            if ((sigma + delta).min_value() < 0.0) {
                ++table.redrawn;
                continue;
            }
            response = perturbed_solution(
                           background, f1,
                           [&](const Field& f) { return -1.0 * pointwise_product(delta, f); }, so) -
                       f1;
        } else {
            const Field src = -1.0 * pointwise_product(delta, f1_sq);
            response = background.solve_linear(&src, nullptr, nullptr, so).first;
        }
        const double data_norm = vec_norm(dtrace_vector(response));
        if (!(data_norm > 0.0) || !std::isfinite(data_norm)) {
            ++table.redrawn;
            continue;
        }
        StabilityRow row;
        row.draw = static_cast<int>(table.rows.size());
        row.delta_norm = delta.l2_norm();
        row.data_norm = data_norm;
        row.ratio = row.delta_norm / data_norm;
        table.rows.push_back(row);
    }

    std::vector<double> r;
    for (const auto& row : table.rows)
        r.push_back(row.ratio);
    std::sort(r.begin(), r.end());
    table.min = r.front();
    table.max = r.back();
    const std::size_t n = r.size();
    table.median = n % 2 ? r[n / 2] : 0.5 * (r[n / 2 - 1] + r[n / 2]);
    return table;
}

} // namespace ktie
