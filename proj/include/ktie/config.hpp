#pragma once

#include "ktie/carleman.hpp"
#include "ktie/coefficients.hpp"
#include "ktie/grid.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace ktie {

// Sectioned INI configuration. Coefficients come from a small named catalog;
// see README.md for every key and its default.
struct ExperimentConfig {
    struct Geometry {
        std::string kind = "euclidean";     // euclidean | conformal
        double radius = 1.0;
        std::string factor = "gaussian_bump"; // constant | gaussian_bump (conformal only)
        double factor_value = 1.0;
        double bump_amplitude = 0.1;
        double bump_width = 1.0;
        bool operator==(const Geometry&) const = default;
    };
    struct Grid {
        double dx = 0.1;
        int n_v = 16;
        double dt = 0.05;
        double T = 4.0;
        int n_ring = 0;
        bool operator==(const Grid&) const = default;
    };
    struct Coefficients {
        // sigma = value + amplitude * shape(x, v)
        std::string sigma = "constant"; // constant | gaussian_bump | linear_x | lambda_bump
        double sigma_value = 0.5;
        double sigma_amplitude = 0.0;
        double sigma_width = 0.5;
        double sigma_center_x = 0.0;
        double sigma_center_y = 0.0;
        std::string mu = "none"; // none | isotropic | separable
        double mu_value = 0.0;
        double mu_anisotropy = 0.5; // separable kernel p = 1 + a cos(v' - v)
        std::string nonlinearity = "none"; // none | taylor | product
        double q2 = 1.0;
        double q3 = 0.0;
        std::string product_base = "square"; // square | cube
        double product_q = 1.0;
        bool operator==(const Coefficients&) const = default;
    };
    struct Data {
        std::string initial = "constant"; // constant | probe
        double initial_value = 1.0;
        std::string incoming = "zero"; // zero | compatible
        double eps = 0.0;              // > 0: nonlinear forward solve at amplitude eps
        bool operator==(const Data&) const = default;
    };
    struct Weight {
        double gamma_x = 1.0;
        double gamma_y = 0.0;
        double gamma0 = 0.3;
        double beta = 0.15;
        double riemannian_beta = 0.5;
        std::vector<double> s_multipliers{10, 20, 40, 80, 160}; // s = multiplier / diameter
        double slack = 1.1;
        int energy_draws = 100; // per split; 0 skips the energy ensemble
        // Energy constants are energy_slack * max calibration ratio. The max of
        // 100 draws sits a few percent under the supremum, hence more than slack.
        double energy_slack = 1.25;
        bool operator==(const Weight&) const = default;
    };
    struct Solver {
        double tol = 1e-12;
        int max_iter = 1000;
        double delta = 0.05;
        bool operator==(const Solver&) const = default;
    };
    struct Linearize {
        int order = 3;
        double eps_start = 0.016;
        int halvings = 2;
        bool operator==(const Linearize&) const = default;
    };
    struct Inversion {
        std::string target = "sigma"; // sigma | mu | q
        int basis_size = 6;
        double lambda = -1.0; // negative: lambda_rel * ||J^T J||
        double lambda_rel = 1e-8;
        int outer_iterations = 3;
        int K = 3;
        double phantom_amplitude = 0.2;
        bool refined_data = false;
        double noise = 0.0; // relative additive data noise
        int ensemble_size = 100;
        double perturbation_norm = 0.05;
        std::string stability_target = "sigma"; // sigma | q
        bool operator==(const Inversion&) const = default;
    };

    Geometry geometry;
    Grid grid;
    Coefficients coefficients;
    Data data;
    Weight weight;
    Solver solver;
    Linearize linearize;
    Inversion inversion;
    std::string output_dir = "out";
    std::uint64_t seed = 1;

    bool operator==(const ExperimentConfig&) const = default;
};

// Throws ConfigError listing every problem: unknown sections or keys, values
// that do not parse, catalog names that do not exist, and violated invariants
// (T >= 2 D_metric, even N_v >= 8, 2R / dx integral, ...).
ExperimentConfig parse_config(const std::filesystem::path& path);
ExperimentConfig parse_config_string(const std::string& text);

// Every key, defaults included, in a form parse_config_string reads back to an
// equal structure.
std::string serialize_config(const ExperimentConfig& cfg);

// 64-bit FNV-1a of serialize_config, as 16 hex digits.
std::string config_hash(const ExperimentConfig& cfg);

// Objects described by a configuration.
Domain make_domain(const ExperimentConfig& cfg);
GridPtr make_grid(const ExperimentConfig& cfg);
// Same domain, dx and dt halved, n_t doubled (refined-data runs).
GridPtr make_refined_grid(const ExperimentConfig& cfg);
CoefficientSet make_coefficients(const ExperimentConfig& cfg);
// Separable kernel p of the catalog, whatever the mu entry.
KernelFn make_kernel_p(const ExperimentConfig& cfg);
Field make_initial_data(const ExperimentConfig& cfg, const GridPtr& grid);
EuclideanWeight make_euclidean_weight(const ExperimentConfig& cfg);
std::vector<double> make_s_grid(const ExperimentConfig& cfg, double diameter);
SolverOptions make_solver_options(const ExperimentConfig& cfg);

} // namespace ktie
