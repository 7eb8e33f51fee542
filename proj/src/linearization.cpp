#include "ktie/linearization.hpp"

#include "ktie/errors.hpp"

#include <cmath>
#include <ostream>
#include <string>

namespace ktie {

namespace {

double factorial(int k) {
    double r = 1.0;
    for (int i = 2; i <= k; ++i)
        r *= i;
    return r;
}

// Series-coefficient product c_n = sum_{i+j=n} a_i b_j (index 0 is order 1, no constant term).
template <class T, class Mul, class Axpy>
std::vector<T> series_product(const std::vector<T>& a, const std::vector<T>& b, int out_order,
                              const T& zero, Mul mul, Axpy axpy) {
    std::vector<T> c(out_order, zero);
    for (int n = 2; n <= out_order; ++n)
        for (int i = 1; i < n; ++i) {
            const int j = n - i;
            if (i <= static_cast<int>(a.size()) && j <= static_cast<int>(b.size()))
                axpy(c[n - 1], mul(a[i - 1], b[j - 1]));
        }
    return c;
}

} // namespace

EpsJet::EpsJet(std::vector<Field> derivatives) : d_(std::move(derivatives)) {
    for (std::size_t k = 1; k < d_.size(); ++k)
        d_[0].require_compatible(d_[k]);
}

EpsJet EpsJet::zeros(const Field& like, int order) {
    Field z = like;
    z *= 0.0;
    return EpsJet(std::vector<Field>(order, z));
}

const Field& EpsJet::operator[](int k) const {
    if (k < 1 || k > order())
        throw InvalidArgument("jet order " + std::to_string(k) + " not populated");
    return d_[k - 1];
}

Field& EpsJet::operator[](int k) {
    if (k < 1 || k > order())
        throw InvalidArgument("jet order " + std::to_string(k) + " not populated");
    return d_[k - 1];
}

void EpsJet::push(Field f) {
    if (!d_.empty())
        d_[0].require_compatible(f);
    d_.push_back(std::move(f));
}

EpsJet EpsJet::truncated(int m) const {
    if (m > order())
        throw InvalidArgument("cannot truncate a jet of order " + std::to_string(order()) +
                              " to order " + std::to_string(m));
    return EpsJet(std::vector<Field>(d_.begin(), d_.begin() + m));
}

EpsJet jet_power(const EpsJet& jet, int k, int out_order) {
    if (k < 1)
        throw InvalidArgument("jet_power needs k >= 1");
    if (jet.order() == 0)
        throw InvalidArgument("jet_power of an empty jet");
    const int m = out_order > 0 ? out_order : jet.order();
    std::vector<Field> a;
    for (int j = 1; j <= std::min(m, jet.order()); ++j) {
        Field c = jet[j];
        c *= 1.0 / factorial(j);
        a.push_back(std::move(c));
    }
    Field zero = jet[1];
    zero *= 0.0;
    while (static_cast<int>(a.size()) < m)
        a.push_back(zero);

    const auto mul = [](const Field& x, const Field& y) { return pointwise_product(x, y); };
    const auto axpy = [](Field& acc, const Field& x) { acc += x; };
    std::vector<Field> p = a;
    for (int e = 2; e <= k; ++e)
        p = series_product(p, a, m, zero, mul, axpy);
    for (int j = 1; j <= m; ++j)
        p[j - 1] *= factorial(j);
    return EpsJet(std::move(p));
}

std::vector<double> jet_power(const std::vector<double>& derivs, int k, int out_order) {
    if (k < 1)
        throw InvalidArgument("jet_power needs k >= 1");
    const int m = out_order > 0 ? out_order : static_cast<int>(derivs.size());
    std::vector<double> a(m, 0.0);
    for (int j = 1; j <= std::min<int>(m, derivs.size()); ++j)
        a[j - 1] = derivs[j - 1] / factorial(j);
    const auto mul = [](double x, double y) { return x * y; };
    const auto axpy = [](double& acc, double x) { acc += x; };
    std::vector<double> p = a;
    for (int e = 2; e <= k; ++e)
        p = series_product(p, a, m, 0.0, mul, axpy);
    for (int j = 1; j <= m; ++j)
        p[j - 1] *= factorial(j);
    return p;
}

std::vector<Field> sample_taylor(const TaylorN& n, const GridPtr& grid) {
    std::vector<Field> q(std::max(n.max_order() + 1, 0));
    for (int k = 2; k <= n.max_order(); ++k)
        if (n.has(k))
            q[k] = Field::sample_static(grid, n.q[k]);
    return q;
}

Field remainder(const std::vector<Field>& q, const EpsJet& jet, int m) {
    if (m < 2)
        throw InvalidArgument("remainder needs m >= 2");
    if (jet.order() < m - 1)
        throw InvalidArgument("remainder of order " + std::to_string(m) + " needs jet orders 1.." +
                              std::to_string(m - 1));
    const EpsJet low = jet.truncated(m - 1);
    Field r = low[1];
    r *= 0.0;
    for (int k = 2; k <= m - 1 && k < static_cast<int>(q.size()); ++k) {
        if (q[k].levels() == 0)
            continue;
        Field term = jet_power(low, k, m)[m];
        term = pointwise_product(term, q[k]);
        term *= 1.0 / factorial(k);
        r += term;
    }
    return r;
}

HierarchySolution solve_hierarchy(const TransportSolver& solver, const Field& h, int m,
                                  const SolverOptions& opts) {
    const TaylorN taylor = as_taylor(solver.coefficients().nonlinearity, std::max(m, 5));
    return solve_hierarchy(solver, h, m, sample_taylor(taylor, solver.grid_ptr()), opts);
}

HierarchySolution solve_hierarchy(const TransportSolver& solver, const Field& h, int m,
                                  const std::vector<Field>& q, const SolverOptions& opts,
                                  const Field* g) {
    if (m < 1)
        throw InvalidArgument("hierarchy order must be >= 1");
    HierarchySolution out;
    out.sources.resize(m + 1);
    out.reports.resize(m + 1);
    auto [f1, rep1] = solver.solve_linear(nullptr, &h, g, opts);
    out.reports[1] = std::move(rep1);
    out.jet.push(std::move(f1));
    for (int k = 2; k <= m; ++k) {
        Field src = remainder(q, out.jet, k);
        if (k < static_cast<int>(q.size()) && q[k].levels() > 0) {
            Field lead = q[k];
            for (int e = 0; e < k; ++e)
                lead = pointwise_product(lead, out.jet[1]);
            src += lead;
        }
        src *= -1.0;
        auto [fk, rep] = solver.solve_linear(&src, nullptr, nullptr, opts);
        out.sources[k] = std::move(src);
        out.reports[k] = std::move(rep);
        out.jet.push(std::move(fk));
    }
    return out;
}

Field fd_linearize(const TransportSolver& solver, const Field& h, int k, double eps,
                   const NonlinearOptions& opts, const Field* g) {
    if (k < 1 || k > 3)
        throw InvalidArgument("finite-difference linearization supports k = 1, 2, 3");
    if (!(eps > 0.0))
        throw InvalidArgument("eps must be positive");
    const double amp = std::max(h.sup_norm(), g ? g->sup_norm() : 0.0);
    const double reach = (k == 3 ? 2.0 : 1.0) * eps * amp;
    if (reach > opts.delta)
        throw SmallnessGate("finite-difference stencil reaches amplitude " + std::to_string(reach) +
                            " above the smallness gate " + std::to_string(opts.delta));
    const auto at = [&](double e) {
        Field data = h;
        data *= e;
        if (!g)
            return solver.solve_nonlinear(&data, nullptr, opts).first;
        Field in = *g;
        in *= e;
        return solver.solve_nonlinear(&data, &in, opts).first;
    };
    if (k == 1) {
        Field d = at(eps) - at(-eps);
        d *= 1.0 / (2.0 * eps);
        return d;
    }
    if (k == 2) {
        Field zero = at(0.0);
        Field d = at(eps) + at(-eps);
        zero *= 2.0;
        d -= zero;
        d *= 1.0 / (eps * eps);
        return d;
    }
    Field inner = at(eps) - at(-eps);
    inner *= 2.0;
    Field d = at(2.0 * eps) - at(-2.0 * eps);
    d -= inner;
    d *= 1.0 / (2.0 * eps * eps * eps);
    return d;
}

std::vector<ConsistencyRow> consistency_table(const TransportSolver& solver, const Field& h,
                                              const HierarchySolution& hier, int k,
                                              double eps_start, int halvings,
                                              const NonlinearOptions& opts) {
    const Field& ref = hier.jet[k];
    const double scale = ref.l2_norm();
    std::vector<ConsistencyRow> rows;
    double eps = eps_start;
    for (int r = 0; r <= halvings; ++r, eps *= 0.5) {
        const Field fd = fd_linearize(solver, h, k, eps, opts);
        ConsistencyRow row;
        row.k = k;
        row.eps = eps;
        row.rel_error = (fd - ref).l2_norm() / (scale > 0.0 ? scale : 1.0);
        if (!rows.empty() && row.rel_error > 0.0)
            row.ratio = rows.back().rel_error / row.rel_error;
        rows.push_back(row);
    }
    return rows;
}

void write_consistency_csv(std::ostream& os, const std::vector<ConsistencyRow>& rows) {
    os << "k,eps,rel_error,ratio\n";
    os.precision(10);
    for (const auto& r : rows)
        os << r.k << ',' << r.eps << ',' << r.rel_error << ',' << r.ratio << '\n';
}

} // namespace ktie
