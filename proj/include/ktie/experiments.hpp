#pragma once

#include "ktie/carleman.hpp"
#include "ktie/config.hpp"
#include "ktie/inversion.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace ktie {

// Process exit codes shared by the CLI and the manifest.
enum ExitCode : int {
    kExitOk = 0,
    kExitConfig = 2,
    kExitNonConvergence = 3,
    kExitCheckFailed = 4,
};

struct StageStatus {
    std::string name;
    std::string status = "ok"; // ok | failed | error
    std::string message;
    double seconds = 0.0;
};

struct RunManifest {
    std::string subcommand;
    std::string config_hash;
    std::uint64_t seed = 0;
    std::filesystem::path output_dir;
    // Every file written by the run, relative to output_dir, manifest.json included.
    std::vector<std::string> files;
    std::vector<StageStatus> stages;
    double wall_clock = 0.0;
    int exit_code = kExitOk;

    void write_json(std::ostream& os) const;
};

const std::vector<std::string>& subcommands();

// Runs one subcommand into cfg.output_dir and writes manifest.json there.
// Library errors become failed stages; ConfigError propagates to the caller.
RunManifest run(const std::string& subcommand, const ExperimentConfig& cfg);

// ---------------------------------------------------------------------------
// Pure absorption against e^{-sigma0 t} f0 H(tau_- - t).

struct AbsorptionComparison {
    double sigma0 = 0.0;
    double max_error = 0.0;
    std::vector<double> level_error; // max over nodes, per time level
};

// Requires f to be the solution for constant sigma0, f0 constant and zero
// incoming data. Nodes within 1e-12 of the front take the value before it.
AbsorptionComparison compare_absorption(const Field& f, double sigma0, double f0);

// Mean absolute error of the grid interpolant at fixed Halton points of the
// disk (on-grid directions, times k * time_step up to the horizon). The
// points do not depend on the grid, so values on nested grids are comparable.
double absorption_interpolant_l1(const Field& f, double sigma0, double f0, double time_step,
                                 int n_points = 4000);

struct AbsorptionConvergence {
    double sigma0 = 0.0;
    double coarse_max = 0.0, fine_max = 0.0;
    double coarse_l1 = 0.0, fine_l1 = 0.0;
    double order = 0.0; // log2(coarse_l1 / fine_l1)
    double seconds = 0.0;
};

// Unit Euclidean disk, f0 = 1, fine grid (dx, dt, n_v) and the coarse grid with
// dx and dt doubled and n_v halved. Each grid is averaged over its own directions.
AbsorptionConvergence absorption_convergence(double sigma0, double dx, double dt, int n_v);

// ---------------------------------------------------------------------------

// Hierarchy against finite differences: every ratio of a row whose error is
// above kRichardsonFloor lies in [3, 5], and the last row agrees to 1e-3.
inline constexpr double kRichardsonFloor = 1e-9;
bool richardson_consistent(const std::vector<ConsistencyRow>& rows);

// ---------------------------------------------------------------------------
// Carleman families.

struct CarlemanFamily {
    std::string geometry;
    std::vector<InequalityReport> members;
    std::optional<InequalityReport> negative;
    double fitted_C = 0.0;
    double seconds = 0.0;

    bool members_hold() const;
    bool negative_violated_at_small_s() const;
    bool passed() const { return members_hold() && (!negative || negative_violated_at_small_s()); }
};

// Manufactured member chi(t) e^{-t} psi(x) p(v) with p = (gamma.v - gamma0)_+^2,
// the true solution with f(0) = psi p, and a dense negative-control kernel
// that cancels most of the residual of the manufactured member.
CarlemanFamily euclidean_carleman_family(const GridPtr& grid, const EuclideanWeight& w, double sigma0,
                                         const std::vector<double>& s_values, double slack);

// e^{-t}, e^{-t}(1 + 0.3 x1 cos v), a compactly supported cut-off member and
// the true solution with f0 = 1 + 0.3 x1 cos v.
CarlemanFamily riemannian_carleman_family(const GridPtr& grid, double beta, const PhaseFn& sigma,
                                          const std::vector<double>& s_values, double slack);

// ---------------------------------------------------------------------------
// Energy ensembles: random (S~, S0, f0, f_minus) on fixed coefficients.

struct EnergyDraw {
    int draw = 0;
    bool calibration = true;
    double lhs_volume = 0.0, lhs_boundary = 0.0, rhs = 0.0;
};

struct EnergyEnsemble {
    std::string label;
    std::vector<EnergyDraw> draws;
    double C_volume = 0.0, C_boundary = 0.0; // slack * max calibration ratio
    int violations = 0;                       // held-out draws above either constant
    double seconds = 0.0;

    bool passed() const { return violations == 0 && !draws.empty(); }
    // Columns draw, split, lhs_volume, lhs_boundary, rhs.
    void write_csv(std::ostream& os) const;
};

// n_draws per split. Amplitudes of S~, f0 (and f_minus) are drawn in [0.25, 1];
// with_incoming adds random incoming data starting like t^2.
EnergyEnsemble energy_ensemble(const GridPtr& grid, const CoefficientSet& coeffs, bool with_incoming,
                               int n_draws, std::uint64_t seed, double slack, const SolverOptions& opts);

// ---------------------------------------------------------------------------
// Inversion.

// Smooth bump sampled at the basis centres: amp * exp(-|c - at|^2 / 0.3).
std::vector<double> phantom_coefficients(const CoefficientBasis& basis, double amp, const Vec2& at);

struct InversionOutcome {
    std::vector<RecoveryResult> results;
    // q target only: order-K recovery with the exact lower orders supplied.
    std::optional<RecoveryResult> known_lower;
    double seconds = 0.0;
};

// Phantom -> synthetic data (same grid, or the refined grid restricted back)
// -> recovery, for cfg.inversion.target.
InversionOutcome inversion_experiment(const ExperimentConfig& cfg);

StabilityTable stability_from_config(const ExperimentConfig& cfg);

} // namespace ktie
