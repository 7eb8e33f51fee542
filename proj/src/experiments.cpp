#include "ktie/experiments.hpp"

#include "ktie/errors.hpp"
#include "ktie/io.hpp"
#include "ktie/linearization.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <numbers>
#include <ostream>
#include <random>
#include <sstream>

namespace ktie {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

// Radical inverse in base b.
double halton(int i, int b) {
    double f = 1.0, r = 0.0;
    while (i > 0) {
        f /= b;
        r += f * (i % b);
        i /= b;
    }
    return r;
}

// C^2 cut-off equal to 1 before 0.4 T and 0 after 0.8 T.
double time_cutoff(double t, double T) {
    const double a = 0.4 * T, b = 0.8 * T;
    if (t <= a)
        return 1.0;
    if (t >= b)
        return 0.0;
    const double u = (t - a) / (b - a);
    return 1.0 - u * u * u * (10.0 - 15.0 * u + 6.0 * u * u);
}

// (1 - |x - c|^2 / rho^2)_+^k
double compact_bump(const Vec2& x, const Vec2& c, double rho, int k) {
    const Vec2 d = x - c;
    const double r2 = dot(d, d) / (rho * rho);
    return r2 < 1.0 ? std::pow(1.0 - r2, k) : 0.0;
}

bool closed_form_applies(const ExperimentConfig& cfg) {
    const auto& k = cfg.coefficients;
    return k.sigma == "constant" && k.mu == "none" && (k.nonlinearity == "none" || cfg.data.eps == 0.0) &&
           cfg.data.initial == "constant" && cfg.data.incoming == "zero";
}

Field incoming_for(const ExperimentConfig& cfg, const Field& h) {
    return cfg.data.incoming == "compatible" ? broadcast_in_time(h) : Field{};
}

Probe probe_for(const ExperimentConfig& cfg, const Field& h) {
    if (cfg.data.incoming == "compatible")
        return Probe::compatible(h);
    return Probe{h, Field{}};
}

NonlinearOptions nonlinear_options(const ExperimentConfig& cfg) {
    return {cfg.solver.tol, cfg.solver.delta, cfg.solver.max_iter};
}

std::string format_double(double v) {
    std::ostringstream os;
    os.precision(6);
    os << v;
    return os.str();
}

// Stage bookkeeping: each stage runs inside a guard that turns library errors
// into a recorded status and an exit code.
class Stages {
  public:
    explicit Stages(RunManifest& m) : m_(m) {}

    bool run(const std::string& name, const std::function<std::string()>& body) {
        StageStatus st;
        st.name = name;
        const auto t0 = Clock::now();
        try {
            st.message = body();
        } catch (const NonConvergence& e) {
            fail(st, "error", e.what(), kExitNonConvergence);
        } catch (const ConfigError&) {
            throw;
        } catch (const PreconditionViolation& e) {
            fail(st, "error", e.what(), kExitConfig);
        } catch (const SmallnessGate& e) {
            fail(st, "error", e.what(), kExitConfig);
        } catch (const InvalidArgument& e) {
            fail(st, "error", e.what(), kExitConfig);
        } catch (const Error& e) {
            fail(st, "error", e.what(), kExitCheckFailed);
        }
        st.seconds = seconds_since(t0);
        const bool ok = st.status == "ok";
        m_.stages.push_back(std::move(st));
        return ok;
    }

    // Marks the most recent stage failed by a check.
    void check(bool passed, const std::string& what) {
        if (passed)
            return;
        auto& st = m_.stages.back();
        st.status = "failed";
        st.message += st.message.empty() ? what : "; " + what;
        if (m_.exit_code == kExitOk)
            m_.exit_code = kExitCheckFailed;
    }

  private:
    void fail(StageStatus& st, const char* status, const std::string& msg, int code) {
        st.status = status;
        st.message = msg;
        if (m_.exit_code == kExitOk)
            m_.exit_code = code;
    }

    RunManifest& m_;
};

} // namespace

// ---------------------------------------------------------------------------

void RunManifest::write_json(std::ostream& os) const {
    nlohmann::ordered_json j;
    j["subcommand"] = subcommand;
    j["config_hash"] = config_hash;
    j["seed"] = seed;
    j["output_dir"] = output_dir.string();
    j["files"] = files;
    j["wall_clock_seconds"] = wall_clock;
    j["exit_code"] = exit_code;
    auto stages_json = nlohmann::ordered_json::array();
    for (const auto& s : stages)
        stages_json.push_back(
            {{"name", s.name}, {"status", s.status}, {"message", s.message}, {"seconds", s.seconds}});
    j["stages"] = stages_json;
    os << j.dump(2) << '\n';
}

const std::vector<std::string>& subcommands() {
    static const std::vector<std::string> names{"forward", "linearize", "carleman-check", "invert", "stability"};
    return names;
}

// ---------------------------------------------------------------------------

AbsorptionComparison compare_absorption(const Field& f, double sigma0, double f0) {
    const PhaseGrid& g = f.grid();
    AbsorptionComparison out;
    out.sigma0 = sigma0;
    out.level_error.assign(g.n_levels(), 0.0);
    std::vector<double> tau(static_cast<std::size_t>(g.n_dir()) * g.n_space());
    for (int j = 0; j < g.n_dir(); ++j)
        for (int i = 0; i < g.n_space(); ++i)
            tau[static_cast<std::size_t>(j) * g.n_space() + i] =
                exit_time(g.domain(), PhasePoint{g.node(i), g.angle(j)}, Sign::Minus);
    for (int n = 0; n < g.n_levels(); ++n) {
        const double t = g.time(n);
        double worst = 0.0;
        for (int j = 0; j < g.n_dir(); ++j)
            for (int i = 0; i < g.n_space(); ++i) {
                const double exact =
                    t < tau[static_cast<std::size_t>(j) * g.n_space() + i] - 1e-12 ? f0 * std::exp(-sigma0 * t) : 0.0;
                worst = std::max(worst, std::abs(f.at(n, j, i) - exact));
            }
        out.level_error[n] = worst;
        out.max_error = std::max(out.max_error, worst);
    }
    return out;
}

double absorption_interpolant_l1(const Field& f, double sigma0, double f0, double time_step, int n_points) {
    const PhaseGrid& g = f.grid();
    const double R = g.domain().radius();
    std::vector<Vec2> pts;
    for (int k = 1; static_cast<int>(pts.size()) < n_points; ++k) {
        const Vec2 p{R * (2.0 * halton(k, 2) - 1.0), R * (2.0 * halton(k, 3) - 1.0)};
        if (norm(p) < 0.999 * R)
            pts.push_back(p);
    }
    const int stride = static_cast<int>(std::lround(time_step / g.dt()));
    if (stride < 1 || std::abs(stride * g.dt() - time_step) > 1e-12)
        throw InvalidArgument("time step of the comparison must be a multiple of the grid dt");

    double sum = 0.0;
    long count = 0;
    for (int j = 0; j < g.n_dir(); ++j)
        for (const Vec2& p : pts) {
            const Stencil st = g.locate(p, j);
            const double tau = exit_time(g.domain(), PhasePoint{p, g.angle(j)}, Sign::Minus);
            for (int n = 0; n < g.n_levels(); n += stride) {
                const double t = g.time(n);
                const double exact = t < tau ? f0 * std::exp(-sigma0 * t) : 0.0;
                sum += std::abs(apply(st, f.level(n)) - exact);
                ++count;
            }
        }
    return sum / static_cast<double>(count);
}

AbsorptionConvergence absorption_convergence(double sigma0, double dx, double dt, int n_v) {
    const auto t0 = Clock::now();
    AbsorptionConvergence out;
    out.sigma0 = sigma0;
    const Domain disk = Domain::make(DomainKind::EuclideanDisk, 1.0);
    const double T = 2.0 * disk.diameter();
    for (int level = 0; level < 2; ++level) {
        const double h = level == 0 ? 2.0 * dx : dx;
        const double k = level == 0 ? 2.0 * dt : dt;
        GridSpec spec;
        spec.dx = h;
        spec.n_v = level == 0 ? n_v / 2 : n_v;
        spec.dt = k;
        spec.n_t = static_cast<int>(std::lround(T / k));
        const GridPtr g = PhaseGrid::make(disk, spec);
        CoefficientSet c;
        c.sigma = constant_fn(sigma0);
        const TransportSolver solver(g, c);
        const Field one = Field::fixed(g, 1.0);
        const Field f = solver.solve_linear(nullptr, &one, nullptr, {1e-12, 100}).first;
        const double max_err = compare_absorption(f, sigma0, 1.0).max_error;
        const double l1 = absorption_interpolant_l1(f, sigma0, 1.0, 2.0 * dt);
        (level == 0 ? out.coarse_max : out.fine_max) = max_err;
        (level == 0 ? out.coarse_l1 : out.fine_l1) = l1;
    }
    out.order = std::log2(out.coarse_l1 / out.fine_l1);
    out.seconds = seconds_since(t0);
    return out;
}

// ---------------------------------------------------------------------------

bool richardson_consistent(const std::vector<ConsistencyRow>& rows) {
    if (rows.empty() || rows.back().rel_error > 1e-3)
        return false;
    for (std::size_t k = 1; k < rows.size(); ++k)
        if (rows[k].rel_error > kRichardsonFloor && (rows[k].ratio < 3.0 || rows[k].ratio > 5.0))
            return false;
    return true;
}

// ---------------------------------------------------------------------------

bool CarlemanFamily::members_hold() const {
    return !members.empty() &&
           std::all_of(members.begin(), members.end(), [](const InequalityReport& r) { return r.holds; });
}

bool CarlemanFamily::negative_violated_at_small_s() const {
    if (!negative || negative->s_values.empty())
        return false;
    // "Small s": the lower half of the ladder.
    const std::size_t half = (negative->s_values.size() + 1) / 2;
    for (std::size_t k = 0; k < half; ++k)
        if (negative->lhs[k] > fitted_C * negative->rhs[k])
            return true;
    return false;
}

CarlemanFamily euclidean_carleman_family(const GridPtr& grid, const EuclideanWeight& w, double sigma0,
                                         const std::vector<double>& s_values, double slack) {
    const auto t0 = Clock::now();
    const double T = grid->horizon();
    const Vec2 centre{0.0, 0.0};
    const double rho = 0.6;
    const int k = 4;
    const auto psi = [=](const Vec2& x) { return compact_bump(x, centre, rho, k); };
    const auto p = [&w](double th) {
        const double c = std::max(0.0, dot(w.gamma, unit(th)) - w.gamma0);
        return c * c;
    };

    CoefficientSet coeffs;
    coeffs.sigma = constant_fn(sigma0);
    const Field manufactured = Field::sample(
        grid, [&](double t, const Vec2& x, double th) { return time_cutoff(t, T) * std::exp(-t) * psi(x) * p(th); });
    const TransportSolver solver(grid, coeffs);
    const Field f0 = Field::sample_static(grid, [&](const Vec2& x, double th) { return psi(x) * p(th); });
    const Field truth = solver.solve_linear(nullptr, &f0, nullptr, {1e-12, 100}).first;

    CarlemanFamily fam;
    fam.geometry = "euclidean";
    const std::vector<std::string> labels{"euclidean_manufactured", "euclidean_true_solution"};
    const auto reports = calibrate_family(labels,
                                          {carleman_functional_euclidean(manufactured, w, coeffs, s_values),
                                           carleman_functional_euclidean(truth, w, coeffs, s_values)},
                                          slack);
    fam.members = reports;
    fam.fitted_C = reports.front().fitted_C;

    // A kernel that reproduces most of P f for the manufactured member, so
    // K f nearly cancels the residual and the budget on mu is far exceeded.
    double p2 = 0.0;
    for (int j = 0; j < grid->n_dir(); ++j)
        p2 += grid->quadrature().weights[j] * p(grid->angle(j)) * p(grid->angle(j));
    CoefficientSet negative = coeffs;
    negative.mu = Scattering::make_dense([=](const Vec2& x, double tin, double tout) {
        const Vec2 d = x - centre;
        const double r2 = dot(d, d) / (rho * rho);
        if (r2 >= 1.0)
            return 0.0;
        const Vec2 grad_log_psi = (-2.0 * k / (rho * rho * (1.0 - r2))) * d;
        const double m = std::clamp(p(tout) * (sigma0 - 1.0 + dot(unit(tout), grad_log_psi)), -50.0, 50.0);
        return p(tin) * m / p2;
    });
    fam.negative = check_inequality("euclidean_negative_control",
                                    carleman_functional_euclidean(manufactured, w, negative, s_values),
                                    fam.fitted_C, true);
    fam.seconds = seconds_since(t0);
    return fam;
}

CarlemanFamily riemannian_carleman_family(const GridPtr& grid, double beta, const PhaseFn& sigma,
                                          const std::vector<double>& s_values, double slack) {
    const auto t0 = Clock::now();
    const double T = grid->horizon();
    const RiemannianWeight w(grid, beta);
    const Field u1 = Field::sample(grid, [](double t, const Vec2&, double) { return std::exp(-t); });
    const Field u2 = Field::sample(
        grid, [](double t, const Vec2& x, double th) { return std::exp(-t) * (1.0 + 0.3 * x.x * std::cos(th)); });
    const Field u3 = Field::sample(grid, [T](double t, const Vec2& x, double th) {
        return time_cutoff(t, T) * std::exp(-t) * compact_bump(x, {0.0, 0.0}, 0.6, 4) * (1.0 + 0.5 * std::cos(th));
    });
    CoefficientSet coeffs;
    coeffs.sigma = sigma;
    const TransportSolver solver(grid, coeffs);
    const Field f0 =
        Field::sample_static(grid, [](const Vec2& x, double th) { return 1.0 + 0.3 * x.x * std::cos(th); });
    const Field truth = solver.solve_linear(nullptr, &f0, nullptr, {1e-12, 100}).first;

    CarlemanFamily fam;
    fam.geometry = "riemannian";
    fam.members = calibrate_family(
        {"riemannian_exp", "riemannian_exp_aniso", "riemannian_cutoff", "riemannian_true_solution"},
        {carleman_functional_riemannian(u1, w, sigma, s_values), carleman_functional_riemannian(u2, w, sigma, s_values),
         carleman_functional_riemannian(u3, w, sigma, s_values),
         carleman_functional_riemannian(truth, w, sigma, s_values)},
        slack);
    fam.fitted_C = fam.members.front().fitted_C;
    fam.seconds = seconds_since(t0);
    return fam;
}

// ---------------------------------------------------------------------------

void EnergyEnsemble::write_csv(std::ostream& os) const {
    os.precision(10);
    os << "draw,split,lhs_volume,lhs_boundary,rhs\n";
    for (const auto& d : draws)
        os << d.draw << ',' << (d.calibration ? "calibration" : "heldout") << ',' << d.lhs_volume << ','
           << d.lhs_boundary << ',' << d.rhs << '\n';
}

EnergyEnsemble energy_ensemble(const GridPtr& grid, const CoefficientSet& coeffs, bool with_incoming,
                               int n_draws, std::uint64_t seed, double slack, const SolverOptions& opts) {
    const auto t0 = Clock::now();
    EnergyEnsemble out;
    out.label = with_incoming ? "energy_with_incoming" : "energy";
    const TransportSolver solver(grid, coeffs);
    const UpwindOperator op(grid);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit_draw(0.0, 1.0);
    const auto uniform = [&](double a, double b) { return a + (b - a) * unit_draw(rng); };
    const double R = grid->domain().radius();

    // Bumps of radius <= 0.55 R centred within 0.4 R stay inside 0.95 R. The
    // source and the initial data share one support per draw, with their own
    // direction modulation.
    struct Support {
        Vec2 centre;
        double width;
    };
    const auto random_support = [&]() {
        const double r = 0.4 * R * std::sqrt(unit_draw(rng));
        const double a = uniform(0.0, 2.0 * std::numbers::pi);
        return Support{{r * std::cos(a), r * std::sin(a)}, uniform(0.3, 0.55) * R};
    };
    const auto random_shape = [&](const Support& sup) {
        const double b = uniform(0.0, 0.5);
        const double th0 = uniform(0.0, 2.0 * std::numbers::pi);
        return [=](const Vec2& x, double th) {
            return compact_bump(x, sup.centre, sup.width, 3) * (1.0 + b * std::cos(th - th0));
        };
    };

    double c_vol = 0.0, c_bdry = 0.0;
    for (int d = 0; d < 2 * n_draws; ++d) {
        // Every component keeps a comparable share of the data.
        const double a_s = uniform(0.25, 1.0), a_0 = uniform(0.25, 1.0);
        const double omega = uniform(0.5, 2.0), phase = uniform(0.0, 2.0 * std::numbers::pi);
        const Support support = random_support();
        const auto s_shape = random_shape(support);
        const auto f0_shape = random_shape(support);
        const double a_m = with_incoming ? uniform(0.25, 1.0) : 0.0;
        const double b_m = uniform(0.0, 0.5), th_m = uniform(0.0, 2.0 * std::numbers::pi);

        const Field s_tilde = Field::sample_static(grid, [&](const Vec2& x, double th) { return a_s * s_shape(x, th); });
        const Field source = Field::sample(grid, [&](double t, const Vec2& x, double th) {
            return a_s * s_shape(x, th) * std::cos(omega * t + phase);
        });
        const Field f0 = Field::sample_static(grid, [&](const Vec2& x, double th) { return a_0 * f0_shape(x, th); });
        Field f_minus;
        if (with_incoming)
            f_minus = Field::sample(grid, [&](double t, const Vec2&, double th) {
                return a_m * t * t / (1.0 + t * t) * (1.0 + b_m * std::cos(th - th_m));
            });
        const Field* fm = with_incoming ? &f_minus : nullptr;
        const Field f = solver.solve_linear(&source, &f0, fm, opts).first;
        const EnergyValue e = energy_functional(f, s_tilde, &f0, fm, &op);

        EnergyDraw row{d, d < n_draws, e.lhs_volume, e.lhs_boundary, e.rhs};
        if (e.rhs > 0.0) {
            if (row.calibration) {
                c_vol = std::max(c_vol, e.lhs_volume / e.rhs);
                c_bdry = std::max(c_bdry, e.lhs_boundary / e.rhs);
            }
        }
        out.draws.push_back(row);
    }
    out.C_volume = slack * c_vol;
    out.C_boundary = slack * c_bdry;
    for (const auto& row : out.draws)
        if (!row.calibration &&
            (row.lhs_volume > out.C_volume * row.rhs || row.lhs_boundary > out.C_boundary * row.rhs))
            ++out.violations;
    out.seconds = seconds_since(t0);
    return out;
}

// ---------------------------------------------------------------------------

std::vector<double> phantom_coefficients(const CoefficientBasis& basis, double amp, const Vec2& at) {
    std::vector<double> c(basis.size());
    for (int k = 0; k < basis.size(); ++k) {
        const Vec2 d = basis.center(k) - at;
        c[k] = amp * std::exp(-dot(d, d) / 0.3);
    }
    return c;
}

namespace {

// Phantom centre for order m of the q sequence (sigma and mu use order 2).
Vec2 phantom_centre(int m) {
    static const Vec2 centres[] = {{0.2, -0.1}, {-0.3, 0.2}, {0.1, 0.3}, {-0.2, -0.3}};
    return centres[(m - 2) % 4];
}

// Adds relative Gaussian noise of norm level * ||d||; returns the noise norm.
double add_noise(std::vector<double>& d, double level, std::mt19937_64& rng) {
    if (level <= 0.0)
        return 0.0;
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> xi(d.size());
    double dn = 0.0, xn = 0.0;
    for (std::size_t k = 0; k < d.size(); ++k) {
        xi[k] = normal(rng);
        dn += d[k] * d[k];
        xn += xi[k] * xi[k];
    }
    const double scale = level * std::sqrt(dn) / std::sqrt(xn);
    for (std::size_t k = 0; k < d.size(); ++k)
        d[k] += scale * xi[k];
    return level * std::sqrt(dn);
}

LambdaClass lambda_class_of(const ExperimentConfig& cfg) {
    const EuclideanWeight w = make_euclidean_weight(cfg);
    return LambdaClass{w.gamma, w.gamma0};
}

RecoveryOptions recovery_options(const ExperimentConfig& cfg) {
    RecoveryOptions o;
    o.lambda = cfg.inversion.lambda;
    o.lambda_rel = cfg.inversion.lambda_rel;
    o.outer_iterations = cfg.inversion.outer_iterations;
    return o;
}

// d_t trace data of a first-order difference, computed on the configured grid
// or on the refined grid and restricted back.
template <class Solve>
std::vector<double> trace_data(const ExperimentConfig& cfg, const GridPtr& coarse, Solve&& difference) {
    if (!cfg.inversion.refined_data)
        return dtrace_vector(difference(coarse));
    const GridPtr fine = make_refined_grid(cfg);
    return dtrace_vector(time_derivative_trace(restrict_trace(measure(difference(fine)), coarse)));
}

TaylorN taylor_background(const ExperimentConfig& cfg, int K) {
    const CoefficientSet c = make_coefficients(cfg);
    TaylorN t = as_taylor(c.nonlinearity, K);
    t.q.resize(K + 1);
    for (int m = 2; m <= K; ++m)
        if (!t.q[m])
            t.q[m] = constant_fn(0.0);
    return t;
}

} // namespace

InversionOutcome inversion_experiment(const ExperimentConfig& cfg) {
    const auto t0 = Clock::now();
    const auto& inv = cfg.inversion;
    const GridPtr g = make_grid(cfg);
    const CoefficientBasis basis(g, inv.basis_size, lambda_class_of(cfg));
    const Field h = make_initial_data(cfg, g);
    const Probe probe = probe_for(cfg, h);
    const SolverOptions tight{std::min(cfg.solver.tol, 1e-13), cfg.solver.max_iter};
    RecoveryOptions opts = recovery_options(cfg);
    std::mt19937_64 rng(cfg.seed);

    const CoefficientSet background = make_coefficients(cfg);
    const TransportSolver bg(g, background);
    InversionOutcome out;

    const auto first_order = [&](const GridPtr& grid, const CoefficientSet& c) {
        const Field hh = make_initial_data(cfg, grid);
        const Probe pp = probe_for(cfg, hh);
        return first_order_solution(TransportSolver(grid, c), pp, tight);
    };

    if (inv.target == "sigma" || inv.target == "mu") {
        const std::vector<double> ct = phantom_coefficients(basis, inv.phantom_amplitude, phantom_centre(2));
        const Field truth = basis.synthesize(ct);
        const PhaseFn delta = basis.function(ct);
        CoefficientSet perturbed = background;
        PhaseFn mu2;
        KernelFn p;
        if (inv.target == "sigma") {
            const PhaseFn s2 = background.sigma;
            perturbed.sigma = [s2, delta](const Vec2& x, double th) { return s2(x, th) + delta(x, th); };
        } else {
            if (background.mu.kind == Scattering::Kind::Dense)
                throw ConfigError({"inversion.target = mu needs coefficients.mu = none or separable"});
            p = make_kernel_p(cfg);
            if (background.mu.kind == Scattering::Kind::Separable)
                mu2 = background.mu.mu_tilde;
            const PhaseFn base = mu2 ? mu2 : constant_fn(0.0);
            perturbed.mu =
                Scattering::separable([base, delta](const Vec2& x, double th) { return base(x, th) + delta(x, th); }, p);
        }
        std::vector<double> data = trace_data(cfg, g, [&](const GridPtr& grid) {
            return first_order(grid, perturbed) - first_order(grid, background);
        });
        opts.noise_norm = add_noise(data, inv.noise, rng);
        out.results.push_back(inv.target == "sigma"
                                  ? recover_sigma(data, bg, basis, probe, opts, &truth)
                                  : recover_mu_tilde(data, bg, mu2, p, basis, probe, opts, &truth));
    } else {
        const int K = inv.K;
        const bool fd = cfg.data.eps > 0.0;
        if (fd && K > 3)
            throw ConfigError({"finite-difference q data (data.eps > 0) supports K <= 3"});
        const TaylorN t2 = taylor_background(cfg, K);
        TaylorN t1 = t2;
        std::vector<Field> truths(K + 1);
        for (int m = 2; m <= K; ++m) {
            const std::vector<double> ct = phantom_coefficients(basis, inv.phantom_amplitude, phantom_centre(m));
            truths[m] = basis.synthesize(ct);
            const PhaseFn delta = basis.function(ct);
            const PhaseFn base = t2.q[m];
            t1.q[m] = [base, delta](const Vec2& x, double th) { return base(x, th) + delta(x, th); };
        }
        CoefficientSet c1 = background, c2 = background;
        c1.nonlinearity = t1;
        c2.nonlinearity = t2;

        std::vector<std::vector<double>> data(K + 1);
        const auto order_difference = [&](const GridPtr& grid, int m) {
            const Field hh = make_initial_data(cfg, grid);
            const Probe pp = probe_for(cfg, hh);
            const TransportSolver s1(grid, c1), s2(grid, c2);
            if (fd) {
                const NonlinearOptions nl{1e-13, cfg.solver.delta, cfg.solver.max_iter};
                return fd_linearize(s1, hh, m, cfg.data.eps, nl, probe_incoming(pp)) -
                       fd_linearize(s2, hh, m, cfg.data.eps, nl, probe_incoming(pp));
            }
            const auto a = solve_hierarchy(s1, hh, m, sample_taylor(t1, grid), tight, probe_incoming(pp));
            const auto b = solve_hierarchy(s2, hh, m, sample_taylor(t2, grid), tight, probe_incoming(pp));
            return a.jet[m] - b.jet[m];
        };
        double noise_sq = 0.0;
        for (int m = 2; m <= K; ++m) {
            data[m] = trace_data(cfg, g, [&](const GridPtr& grid) { return order_difference(grid, m); });
            const double nn = add_noise(data[m], inv.noise, rng);
            noise_sq = std::max(noise_sq, nn);
        }
        opts.noise_norm = noise_sq;
        const TransportSolver s2(g, c2);
        out.results = recover_q_sequence(data, s2, basis, probe, K, opts, {}, truths);
        if (K >= 3) {
            std::vector<Field> known(K + 1);
            for (int m = 2; m < K; ++m)
                known[m] = truths[m];
            auto with_known = recover_q_sequence(data, s2, basis, probe, K, opts, known, truths);
            if (!with_known.empty() && static_cast<int>(with_known.size()) == K - 1)
                out.known_lower = with_known.back();
        }
    }
    out.seconds = seconds_since(t0);
    return out;
}

StabilityTable stability_from_config(const ExperimentConfig& cfg) {
    const GridPtr g = make_grid(cfg);
    const CoefficientBasis basis(g, cfg.inversion.basis_size, lambda_class_of(cfg));
    const Probe probe = probe_for(cfg, make_initial_data(cfg, g));
    CoefficientSet c = make_coefficients(cfg);
    const StabilityTarget target =
        cfg.inversion.stability_target == "q" ? StabilityTarget::Q : StabilityTarget::Sigma;
    if (target == StabilityTarget::Q) {
        TaylorN t = taylor_background(cfg, 2);
        c.nonlinearity = t;
    }
    const TransportSolver bg(g, c);
    return stability_experiment(bg, basis, probe, target, cfg.inversion.ensemble_size,
                                cfg.inversion.perturbation_norm, cfg.seed);
}

// ---------------------------------------------------------------------------

namespace {

void run_forward(const ExperimentConfig& cfg, ArtifactWriter& out, Stages& stages) {
    const GridPtr g = make_grid(cfg);
    const CoefficientSet coeffs = make_coefficients(cfg);
    Field f;
    SolveReport report;
    stages.run("solve", [&] {
        validate(coeffs, *g);
        const TransportSolver solver(g, coeffs);
        const Field f0 = make_initial_data(cfg, g);
        const Field fm = incoming_for(cfg, f0);
        const Field* fm_ptr = fm.levels() > 0 ? &fm : nullptr;
        if (cfg.data.eps > 0.0 && !coeffs.is_linear()) {
            const Field a = cfg.data.eps * f0;
            Field b;
            if (fm_ptr)
                b = cfg.data.eps * fm;
            std::tie(f, report) = solver.solve_nonlinear(&a, fm_ptr ? &b : nullptr, nonlinear_options(cfg));
        } else {
            std::tie(f, report) = solver.solve_linear(nullptr, &f0, fm_ptr, make_solver_options(cfg));
        }
        out.write("solve_report.txt", [&](std::ostream& os) { report.write(os); });
        return "iterations " + std::to_string(report.iterations);
    });
    if (f.levels() == 0)
        return;
    stages.run("measure", [&] {
        const BoundaryTrace tr = measure(f);
        out.write("trace.csv", [&](std::ostream& os) { tr.write_csv(os); });
        out.write("dtrace.csv", [&](std::ostream& os) { time_derivative_trace(tr).write_csv(os); });
        out.write_binary_field("solution.bin", f);
        return "trace L2 " + format_double(tr.l2_norm());
    });
    if (!closed_form_applies(cfg))
        return;
    double max_error = 0.0;
    stages.run("closed_form", [&] {
        const auto cmp = compare_absorption(f, cfg.coefficients.sigma_value, cfg.data.initial_value);
        out.write("comparison.csv", [&](std::ostream& os) {
            os.precision(10);
            os << "t,max_error\n";
            for (int n = 0; n < g->n_levels(); ++n)
                os << g->time(n) << ',' << cmp.level_error[n] << '\n';
        });
        max_error = cmp.max_error;
        return "max error " + format_double(max_error);
    });
    stages.check(max_error <= 5e-3, "closed-form max error above 5e-3");
}

void run_linearize(const ExperimentConfig& cfg, ArtifactWriter& out, Stages& stages) {
    const GridPtr g = make_grid(cfg);
    const CoefficientSet coeffs = make_coefficients(cfg);
    const int order = cfg.linearize.order;
    const TransportSolver solver(g, coeffs);
    const Field h = make_initial_data(cfg, g);
    HierarchySolution hier;
    stages.run("hierarchy", [&] {
        hier = solve_hierarchy(solver, h, order, sample_taylor(as_taylor(coeffs.nonlinearity, order), g),
                               {std::min(cfg.solver.tol, 1e-13), cfg.solver.max_iter});
        out.write("hierarchy.csv", [&](std::ostream& os) {
            os.precision(10);
            os << "k,l2_norm,sup_norm,trace_l2\n";
            for (int k = 1; k <= order; ++k)
                os << k << ',' << hier.jet[k].l2_norm() << ',' << hier.jet[k].sup_norm() << ','
                   << measure(hier.jet[k]).l2_norm() << '\n';
        });
        return "orders 1.." + std::to_string(order);
    });
    if (hier.jet.order() < order)
        return;
    const NonlinearOptions nl{std::min(cfg.solver.tol, 1e-13), cfg.solver.delta, cfg.solver.max_iter};
    for (int k = 1; k <= std::min(order, 3); ++k) {
        bool ok = false;
        const bool ran = stages.run("consistency_k" + std::to_string(k), [&] {
            const auto rows = consistency_table(solver, h, hier, k, cfg.linearize.eps_start, cfg.linearize.halvings, nl);
            out.write("consistency_k" + std::to_string(k) + ".csv",
                      [&](std::ostream& os) { write_consistency_csv(os, rows); });
            ok = richardson_consistent(rows);
            return "final relative error " + format_double(rows.back().rel_error);
        });
        if (ran)
            stages.check(ok, "Richardson ratio outside [3, 5] or final error above 1e-3");
    }
}

void write_family(const CarlemanFamily& fam, ArtifactWriter& out) {
    const auto write_report = [&](const InequalityReport& r) {
        out.write("carleman_" + r.label + ".csv", [&](std::ostream& os) { r.write_csv(os); });
    };
    for (const auto& r : fam.members)
        write_report(r);
    if (fam.negative)
        write_report(*fam.negative);
    out.write("carleman_" + fam.geometry + "_verdict.txt", [&](std::ostream& os) {
        os << "fitted_C " << fam.fitted_C << '\n';
        for (const auto& r : fam.members)
            os << r.label << ": " << r.verdict() << '\n';
        if (fam.negative)
            os << fam.negative->label << ": "
               << (fam.negative_violated_at_small_s() ? "violated at small s (expected)" : "not violated") << '\n';
    });
}

void run_carleman_check(const ExperimentConfig& cfg, ArtifactWriter& out, Stages& stages) {
    const GridPtr g = make_grid(cfg);
    const CoefficientSet coeffs = make_coefficients(cfg);
    const bool euclidean = cfg.geometry.kind == "euclidean";
    const std::vector<double> s = make_s_grid(cfg, g->domain().diameter());

    bool family_ok = false;
    const bool ran = stages.run(euclidean ? "euclidean_family" : "riemannian_family", [&] {
        const CarlemanFamily fam =
            euclidean ? euclidean_carleman_family(g, make_euclidean_weight(cfg), cfg.coefficients.sigma_value, s,
                                                  cfg.weight.slack)
                      : riemannian_carleman_family(g, cfg.weight.riemannian_beta, coeffs.sigma, s, cfg.weight.slack);
        write_family(fam, out);
        family_ok = fam.passed();
        return "fitted C " + format_double(fam.fitted_C);
    });
    if (ran)
        stages.check(family_ok, "inequality violated by a family member, or negative control not violated");

    if (cfg.weight.energy_draws <= 0)
        return;
    bool energy_ok = false;
    const bool ran_energy = stages.run("energy_ensemble", [&] {
        const EnergyEnsemble e = energy_ensemble(g, coeffs, !euclidean, cfg.weight.energy_draws, cfg.seed,
                                                 cfg.weight.energy_slack, make_solver_options(cfg));
        out.write("energy.csv", [&](std::ostream& os) { e.write_csv(os); });
        energy_ok = e.passed();
        return "held-out violations " + std::to_string(e.violations);
    });
    if (ran_energy)
        stages.check(energy_ok, "energy inequality violated on the held-out split");
}

void run_invert(const ExperimentConfig& cfg, ArtifactWriter& out, Stages& stages) {
    InversionOutcome res;
    const bool ran = stages.run("recover", [&] {
        res = inversion_experiment(cfg);
        for (const auto& r : res.results)
            out.write("estimate_" + r.label + ".csv", [&](std::ostream& os) { write_field_csv(os, r.estimate); });
        out.write("recovery.csv", [&](std::ostream& os) {
            os.precision(10);
            os << "label,relative_l2_error,residual,zero_residual,lambda,condition_number,ill_conditioned,outer_iterations\n";
            auto row = [&](const RecoveryResult& r, const std::string& label) {
                os << label << ',' << r.relative_l2_error << ',' << r.residual << ',' << r.zero_residual << ','
                   << r.lambda << ',' << r.condition_number << ',' << (r.ill_conditioned ? 1 : 0) << ','
                   << r.outer_iterations << '\n';
            };
            for (const auto& r : res.results)
                row(r, r.label);
            if (res.known_lower)
                row(*res.known_lower, res.known_lower->label + "_known_lower");
        });
        out.write("recovery.txt", [&](std::ostream& os) {
            for (const auto& r : res.results)
                os << r.summary() << '\n';
            if (res.known_lower)
                os << "known lower orders: " << res.known_lower->summary() << '\n';
        });
        return res.results.empty() ? std::string("no result") : res.results.front().summary();
    });
    if (!ran || cfg.inversion.noise > 0.0)
        return;
    const double limit = cfg.inversion.refined_data ? 0.15 : 0.05;
    const bool complete = cfg.inversion.target != "q" || static_cast<int>(res.results.size()) == cfg.inversion.K - 1;
    stages.check(complete, "q sequence stopped early");
    if (!res.results.empty())
        stages.check(res.results.front().relative_l2_error <= limit,
                     "relative error of " + res.results.front().label + " above " + format_double(limit));
    if (complete && res.known_lower)
        stages.check(res.results.back().relative_l2_error <= 2.0 * res.known_lower->relative_l2_error,
                     "sequential q error above twice the known-lower counterpart");
}

void run_stability(const ExperimentConfig& cfg, ArtifactWriter& out, Stages& stages) {
    double spread = 0.0;
    const bool ran = stages.run("ensemble", [&] {
        const StabilityTable t = stability_from_config(cfg);
        out.write("stability.csv", [&](std::ostream& os) { t.write_csv(os); });
        spread = t.spread();
        return t.label + " max/median " + format_double(spread);
    });
    if (ran)
        stages.check(spread <= 10.0, "stability ratio spread above 10");
}

} // namespace

RunManifest run(const std::string& subcommand, const ExperimentConfig& cfg) {
    const auto t0 = Clock::now();
    RunManifest m;
    m.subcommand = subcommand;
    m.config_hash = config_hash(cfg);
    m.seed = cfg.seed;
    m.output_dir = cfg.output_dir;
    std::filesystem::create_directories(m.output_dir);
    ArtifactWriter out(m.output_dir);
    out.write("config.ini", [&](std::ostream& os) { os << serialize_config(cfg); });

    Stages stages(m);
    if (subcommand == "forward")
        run_forward(cfg, out, stages);
    else if (subcommand == "linearize")
        run_linearize(cfg, out, stages);
    else if (subcommand == "carleman-check")
        run_carleman_check(cfg, out, stages);
    else if (subcommand == "invert")
        run_invert(cfg, out, stages);
    else if (subcommand == "stability")
        run_stability(cfg, out, stages);
    else
        throw ConfigError({"unknown subcommand '" + subcommand + "'"});

    m.files = out.files();
    m.files.push_back("manifest.json");
    m.wall_clock = seconds_since(t0);
    std::ofstream os(m.output_dir / "manifest.json");
    m.write_json(os);
    return m;
}

} // namespace ktie
