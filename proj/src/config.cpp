#include "ktie/config.hpp"

#include "ktie/errors.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

namespace ktie {

namespace {

using Problems = std::vector<std::string>;

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos)
        return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

// Shortest representation that reads back to the same double.
std::string format(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}
std::string format(int v) { return std::to_string(v); }
std::string format(std::uint64_t v) { return std::to_string(v); }
std::string format(bool v) { return v ? "true" : "false"; }
std::string format(const std::string& v) { return v; }
std::string format(const std::vector<double>& v) {
    std::string out;
    for (std::size_t k = 0; k < v.size(); ++k)
        out += (k ? ", " : "") + format(v[k]);
    return out;
}

template <class T>
bool parse_number(const std::string& text, T& out) {
    const std::string t = trim(text);
    if (t.empty())
        return false;
    const auto res = std::from_chars(t.data(), t.data() + t.size(), out);
    return res.ec == std::errc() && res.ptr == t.data() + t.size();
}

bool parse(const std::string& text, double& out) { return parse_number(text, out) && std::isfinite(out); }
bool parse(const std::string& text, int& out) { return parse_number(text, out); }
bool parse(const std::string& text, std::uint64_t& out) { return parse_number(text, out); }
bool parse(const std::string& text, std::string& out) {
    out = trim(text);
    return true;
}
bool parse(const std::string& text, bool& out) {
    const std::string t = trim(text);
    if (t == "true" || t == "1" || t == "yes") {
        out = true;
        return true;
    }
    if (t == "false" || t == "0" || t == "no") {
        out = false;
        return true;
    }
    return false;
}
bool parse(const std::string& text, std::vector<double>& out) {
    out.clear();
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        double v = 0.0;
        if (!parse(item, v))
            return false;
        out.push_back(v);
    }
    return !out.empty();
}

struct Key {
    std::string section;
    std::string name;
    std::function<std::string(const ExperimentConfig&)> get;
    std::function<bool(ExperimentConfig&, const std::string&)> set;
    std::vector<std::string> choices; // non-empty for catalog names
};

template <class Access>
Key make_key(std::string section, std::string name, Access access, std::vector<std::string> choices = {}) {
    Key k;
    k.section = std::move(section);
    k.name = std::move(name);
    k.get = [access](const ExperimentConfig& c) { return format(access(c)); };
    k.set = [access](ExperimentConfig& c, const std::string& text) { return parse(text, access(c)); };
    k.choices = std::move(choices);
    return k;
}

#define KTIE_KEY(section, name, member, ...) \
    make_key(section, name, [](auto& c) -> auto& { return c.member; }, ##__VA_ARGS__)

const std::vector<Key>& key_table() {
    static const std::vector<Key> keys = {
        KTIE_KEY("run", "seed", seed),
        KTIE_KEY("run", "output_dir", output_dir),
        KTIE_KEY("geometry", "kind", geometry.kind, {"euclidean", "conformal"}),
        KTIE_KEY("geometry", "radius", geometry.radius),
        KTIE_KEY("geometry", "factor", geometry.factor, {"constant", "gaussian_bump"}),
        KTIE_KEY("geometry", "factor_value", geometry.factor_value),
        KTIE_KEY("geometry", "bump_amplitude", geometry.bump_amplitude),
        KTIE_KEY("geometry", "bump_width", geometry.bump_width),
        KTIE_KEY("grid", "dx", grid.dx),
        KTIE_KEY("grid", "n_v", grid.n_v),
        KTIE_KEY("grid", "dt", grid.dt),
        KTIE_KEY("grid", "T", grid.T),
        KTIE_KEY("grid", "n_ring", grid.n_ring),
        KTIE_KEY("coefficients", "sigma", coefficients.sigma, {"constant", "gaussian_bump", "linear_x", "lambda_bump"}),
        KTIE_KEY("coefficients", "sigma_value", coefficients.sigma_value),
        KTIE_KEY("coefficients", "sigma_amplitude", coefficients.sigma_amplitude),
        KTIE_KEY("coefficients", "sigma_width", coefficients.sigma_width),
        KTIE_KEY("coefficients", "sigma_center_x", coefficients.sigma_center_x),
        KTIE_KEY("coefficients", "sigma_center_y", coefficients.sigma_center_y),
        KTIE_KEY("coefficients", "mu", coefficients.mu, {"none", "isotropic", "separable"}),
        KTIE_KEY("coefficients", "mu_value", coefficients.mu_value),
        KTIE_KEY("coefficients", "mu_anisotropy", coefficients.mu_anisotropy),
        KTIE_KEY("coefficients", "nonlinearity", coefficients.nonlinearity, {"none", "taylor", "product"}),
        KTIE_KEY("coefficients", "q2", coefficients.q2),
        KTIE_KEY("coefficients", "q3", coefficients.q3),
        KTIE_KEY("coefficients", "product_base", coefficients.product_base, {"square", "cube"}),
        KTIE_KEY("coefficients", "product_q", coefficients.product_q),
        KTIE_KEY("data", "initial", data.initial, {"constant", "probe"}),
        KTIE_KEY("data", "initial_value", data.initial_value),
        KTIE_KEY("data", "incoming", data.incoming, {"zero", "compatible"}),
        KTIE_KEY("data", "eps", data.eps),
        KTIE_KEY("weight", "gamma_x", weight.gamma_x),
        KTIE_KEY("weight", "gamma_y", weight.gamma_y),
        KTIE_KEY("weight", "gamma0", weight.gamma0),
        KTIE_KEY("weight", "beta", weight.beta),
        KTIE_KEY("weight", "riemannian_beta", weight.riemannian_beta),
        KTIE_KEY("weight", "s_multipliers", weight.s_multipliers),
        KTIE_KEY("weight", "slack", weight.slack),
        KTIE_KEY("weight", "energy_draws", weight.energy_draws),
        KTIE_KEY("weight", "energy_slack", weight.energy_slack),
        KTIE_KEY("solver", "tol", solver.tol),
        KTIE_KEY("solver", "max_iter", solver.max_iter),
        KTIE_KEY("solver", "delta", solver.delta),
        KTIE_KEY("linearize", "order", linearize.order),
        KTIE_KEY("linearize", "eps_start", linearize.eps_start),
        KTIE_KEY("linearize", "halvings", linearize.halvings),
        KTIE_KEY("inversion", "target", inversion.target, {"sigma", "mu", "q"}),
        KTIE_KEY("inversion", "basis_size", inversion.basis_size),
        KTIE_KEY("inversion", "lambda", inversion.lambda),
        KTIE_KEY("inversion", "lambda_rel", inversion.lambda_rel),
        KTIE_KEY("inversion", "outer_iterations", inversion.outer_iterations),
        KTIE_KEY("inversion", "K", inversion.K),
        KTIE_KEY("inversion", "phantom_amplitude", inversion.phantom_amplitude),
        KTIE_KEY("inversion", "refined_data", inversion.refined_data),
        KTIE_KEY("inversion", "noise", inversion.noise),
        KTIE_KEY("inversion", "ensemble_size", inversion.ensemble_size),
        KTIE_KEY("inversion", "perturbation_norm", inversion.perturbation_norm),
        KTIE_KEY("inversion", "stability_target", inversion.stability_target, {"sigma", "q"}),
    };
    return keys;
}

#undef KTIE_KEY

int level_count(const ExperimentConfig::Grid& g) { return static_cast<int>(std::lround(g.T / g.dt)); }

void check_invariants(const ExperimentConfig& c, Problems& out) {
    const auto need = [&](bool ok, const std::string& msg) {
        if (!ok)
            out.push_back(msg);
    };
    const auto& g = c.geometry;
    need(g.radius > 0.0, "geometry.radius must be positive");
    if (g.kind == "conformal") {
        need(g.factor != "constant" || g.factor_value > 0.0, "geometry.factor_value must be positive");
        need(g.factor != "gaussian_bump" || g.bump_width > 0.0, "geometry.bump_width must be positive");
        need(g.factor != "gaussian_bump" || g.bump_amplitude > -1.0,
             "geometry.bump_amplitude must exceed -1 (positive conformal factor)");
    }

    const auto& gr = c.grid;
    bool grid_ok = gr.dx > 0.0 && gr.dt > 0.0 && gr.T > 0.0;
    need(gr.dx > 0.0, "grid.dx must be positive");
    need(gr.dt > 0.0, "grid.dt must be positive");
    need(gr.T > 0.0, "grid.T must be positive");
    if (grid_ok) {
        need(gr.dt <= gr.dx * (1.0 + 1e-12), "grid.dt must not exceed grid.dx");
        const double cells = 2.0 * g.radius / gr.dx;
        if (std::abs(cells - std::round(cells)) > 1e-9) {
            out.push_back("2 R / grid.dx must be an integer");
            grid_ok = false;
        }
        if (std::abs(level_count(gr) * gr.dt - gr.T) > 1e-9 * gr.T) {
            out.push_back("grid.T must be a multiple of grid.dt");
            grid_ok = false;
        }
    }
    try {
        direction_quadrature(gr.n_v);
    } catch (const InvalidQuadrature& e) {
        out.push_back(std::string("grid.n_v: ") + e.what());
    }
    need(gr.n_ring >= 0, "grid.n_ring must be non-negative");
    if (grid_ok && g.radius > 0.0) {
        try {
            const Domain d = make_domain(c);
            if (gr.T < 2.0 * d.diameter() - 1e-12)
                out.push_back("grid.T = " + format(gr.T) + " violates T >= 2 D_metric = " +
                              format(2.0 * d.diameter()));
        } catch (const Error& e) {
            out.push_back(std::string("geometry: ") + e.what());
        }
    }

    const auto& k = c.coefficients;
    need(k.sigma_value >= 0.0, "coefficients.sigma_value must be non-negative");
    need(k.sigma_width > 0.0, "coefficients.sigma_width must be positive");
    need(k.mu_value >= 0.0, "coefficients.mu_value must be non-negative");
    need(std::abs(k.mu_anisotropy) < 1.0, "coefficients.mu_anisotropy must lie in (-1, 1) so p > 0");
    need(k.mu == "none" || g.kind == "euclidean", "scattering is only supported on the Euclidean disk");

    need(c.data.initial_value > 0.0, "data.initial_value must be positive");
    need(c.data.eps >= 0.0, "data.eps must be non-negative");

    const auto& w = c.weight;
    need(std::hypot(w.gamma_x, w.gamma_y) > 0.0, "weight.gamma must be nonzero");
    need(w.beta > 0.0 && w.beta < w.gamma0 && w.gamma0 <= 1.0, "weight needs 0 < beta < gamma0 <= 1");
    need(w.riemannian_beta > 0.0 && w.riemannian_beta < 1.0, "weight.riemannian_beta must lie in (0, 1)");
    bool increasing = !w.s_multipliers.empty() && w.s_multipliers.front() > 0.0;
    for (std::size_t i = 1; i < w.s_multipliers.size(); ++i)
        increasing = increasing && w.s_multipliers[i] > w.s_multipliers[i - 1];
    need(increasing, "weight.s_multipliers must be positive and increasing");
    need(w.slack >= 1.0, "weight.slack must be at least 1");
    need(w.energy_draws >= 0, "weight.energy_draws must be non-negative");
    need(w.energy_slack >= 1.0, "weight.energy_slack must be at least 1");

    need(c.solver.tol > 0.0, "solver.tol must be positive");
    need(c.solver.max_iter >= 1, "solver.max_iter must be at least 1");
    need(c.solver.delta > 0.0, "solver.delta must be positive");

    need(c.linearize.order >= 1 && c.linearize.order <= 3, "linearize.order must be 1, 2 or 3");
    need(c.linearize.eps_start > 0.0, "linearize.eps_start must be positive");
    need(c.linearize.halvings >= 1, "linearize.halvings must be at least 1");

    const auto& inv = c.inversion;
    need(inv.basis_size >= 2, "inversion.basis_size must be at least 2");
    need(inv.lambda_rel > 0.0, "inversion.lambda_rel must be positive");
    need(inv.outer_iterations >= 1, "inversion.outer_iterations must be at least 1");
    need(inv.K >= 2, "inversion.K must be at least 2");
    need(inv.phantom_amplitude > 0.0, "inversion.phantom_amplitude must be positive");
    need(inv.noise >= 0.0, "inversion.noise must be non-negative");
    need(inv.ensemble_size >= 1, "inversion.ensemble_size must be at least 1");
    need(inv.perturbation_norm > 0.0, "inversion.perturbation_norm must be positive");
    need(inv.target != "mu" || g.kind == "euclidean", "inversion.target = mu needs the Euclidean disk");
}

} // namespace

ExperimentConfig parse_config_string(const std::string& text) {
    namespace pt = boost::property_tree;
    pt::ptree tree;
    try {
        std::istringstream is(text);
        pt::ini_parser::read_ini(is, tree);
    } catch (const pt::ini_parser_error& e) {
        throw ConfigError({std::string("malformed configuration: ") + e.message() + " (line " +
                           std::to_string(e.line()) + ")"});
    }

    std::map<std::string, std::map<std::string, const Key*>> index;
    for (const Key& k : key_table())
        index[k.section][k.name] = &k;

    ExperimentConfig cfg;
    Problems problems;
    for (const auto& [section, body] : tree) {
        auto sec = index.find(section);
        if (sec == index.end()) {
            problems.push_back(!body.data().empty() ? "key '" + section + "' outside any section"
                                                    : "unknown section [" + section + "]");
            continue;
        }
        for (const auto& [name, node] : body) {
            auto it = sec->second.find(name);
            if (it == sec->second.end()) {
                problems.push_back("unknown key " + section + "." + name);
                continue;
            }
            const Key& k = *it->second;
            const std::string value = node.get_value<std::string>();
            if (!k.choices.empty()) {
                const std::string v = trim(value);
                bool ok = false;
                for (const auto& c : k.choices)
                    ok = ok || c == v;
                if (!ok) {
                    std::string list;
                    for (const auto& c : k.choices)
                        list += (list.empty() ? "" : ", ") + c;
                    problems.push_back(section + "." + name + " = '" + v + "' is not one of " + list);
                    continue;
                }
            }
            if (!k.set(cfg, value))
                problems.push_back(section + "." + name + ": cannot parse '" + trim(value) + "'");
        }
    }
    check_invariants(cfg, problems);
    if (!problems.empty())
        throw ConfigError(problems);
    return cfg;
}

ExperimentConfig parse_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in)
        throw ConfigError({"cannot open configuration file " + path.string()});
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config_string(ss.str());
}

std::string serialize_config(const ExperimentConfig& cfg) {
    std::string out, section;
    for (const Key& k : key_table()) {
        if (k.section != section) {
            out += (section.empty() ? "" : "\n") + std::string("[") + k.section + "]\n";
            section = k.section;
        }
        out += k.name + " = " + k.get(cfg) + "\n";
    }
    return out;
}

std::string config_hash(const ExperimentConfig& cfg) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char ch : serialize_config(cfg)) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

//---------------------------------------------------------------------------//
// Builders
//---------------------------------------------------------------------------//

Domain make_domain(const ExperimentConfig& cfg) {
    const auto& g = cfg.geometry;
    if (g.kind == "euclidean")
        return Domain::make(DomainKind::EuclideanDisk, g.radius);
    const ConformalFactor f = g.factor == "constant" ? ConformalFactor::constant(g.factor_value)
                                                      : ConformalFactor::gaussian_bump(g.bump_amplitude, g.bump_width);
    return Domain::make(DomainKind::ConformalDisk, g.radius, f);
}

GridPtr make_grid(const ExperimentConfig& cfg) {
    const auto& g = cfg.grid;
    return PhaseGrid::make(make_domain(cfg), {g.dx, g.n_v, g.dt, level_count(g), g.n_ring});
}

GridPtr make_refined_grid(const ExperimentConfig& cfg) {
    const auto& g = cfg.grid;
    return PhaseGrid::make(make_domain(cfg),
                           {g.dx / 2, g.n_v, g.dt / 2, 2 * level_count(g), g.n_ring > 0 ? 2 * g.n_ring : 0});
}

namespace {

double direction_profile(const ExperimentConfig& cfg, double theta) {
    const double gn = std::hypot(cfg.weight.gamma_x, cfg.weight.gamma_y);
    const double a = std::abs((cfg.weight.gamma_x * std::cos(theta) + cfg.weight.gamma_y * std::sin(theta)) / gn) -
                     cfg.weight.gamma0;
    const double top = 1.0 - cfg.weight.gamma0;
    return a > 0.0 ? a * a / (top * top) : 0.0;
}

} // namespace

CoefficientSet make_coefficients(const ExperimentConfig& cfg) {
    const auto& k = cfg.coefficients;
    CoefficientSet c;
    const double v0 = k.sigma_value, amp = k.sigma_amplitude, w = k.sigma_width;
    const Vec2 ctr{k.sigma_center_x, k.sigma_center_y};
    if (k.sigma == "constant") {
        c.sigma = constant_fn(v0);
    } else if (k.sigma == "gaussian_bump") {
        c.sigma = [=](const Vec2& x, double) {
            const Vec2 d = x - ctr;
            return v0 + amp * std::exp(-dot(d, d) / (w * w));
        };
    } else if (k.sigma == "linear_x") {
        c.sigma = [=](const Vec2& x, double) { return v0 + amp * x.x; };
    } else {
        c.sigma = [=](const Vec2& x, double th) {
            const Vec2 d = x - ctr;
            return v0 + amp * std::exp(-dot(d, d) / (w * w)) * direction_profile(cfg, th);
        };
    }

    if (k.mu == "isotropic") {
        const double m = k.mu_value;
        c.mu = Scattering::make_dense([m](const Vec2&, double, double) { return m; });
    } else if (k.mu == "separable") {
        c.mu = Scattering::separable(constant_fn(k.mu_value), make_kernel_p(cfg));
    }

    if (k.nonlinearity == "taylor") {
        TaylorN t;
        t.q.resize(k.q3 != 0.0 ? 4 : 3);
        t.q[2] = constant_fn(k.q2);
        if (k.q3 != 0.0)
            t.q[3] = constant_fn(k.q3);
        c.nonlinearity = t;
    } else if (k.nonlinearity == "product") {
        c.nonlinearity = ProductN{constant_fn(k.product_q),
                                  k.product_base == "cube" ? ProductN::Base::Cube : ProductN::Base::Square};
    }
    return c;
}

KernelFn make_kernel_p(const ExperimentConfig& cfg) {
    const double a = cfg.coefficients.mu_anisotropy;
    return [a](const Vec2&, double tin, double tout) { return 1.0 + a * std::cos(tin - tout); };
}

Field make_initial_data(const ExperimentConfig& cfg, const GridPtr& grid) {
    const double v = cfg.data.initial_value;
    if (cfg.data.initial == "constant")
        return Field::fixed(grid, v);
    return Field::sample_static(
        grid, [v](const Vec2& x, double th) { return v * (1.0 + 0.3 * x.x * std::cos(th) + 0.2 * x.y); });
}

EuclideanWeight make_euclidean_weight(const ExperimentConfig& cfg) {
    return EuclideanWeight::make({cfg.weight.gamma_x, cfg.weight.gamma_y}, cfg.weight.gamma0, cfg.weight.beta);
}

std::vector<double> make_s_grid(const ExperimentConfig& cfg, double diameter) {
    std::vector<double> s;
    for (double m : cfg.weight.s_multipliers)
        s.push_back(m / diameter);
    return s;
}

SolverOptions make_solver_options(const ExperimentConfig& cfg) { return {cfg.solver.tol, cfg.solver.max_iter}; }

} // namespace ktie
