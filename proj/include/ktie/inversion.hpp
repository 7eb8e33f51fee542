#pragma once

#include "ktie/carleman.hpp"
#include "ktie/linearization.hpp"

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace ktie {

// Unknown coefficient perturbations: bilinear hats on an n_b x n_b lattice over
// [-R, R]^2 (hats centred inside the disk only) times one even direction profile
// (|gamma . v| - gamma0)_+^2, normalised to unit maximum. Every element and
// every combination lies in the Lambda class node-exactly.
class CoefficientBasis {
  public:
    CoefficientBasis(GridPtr grid, int n_b, LambdaClass cls = {});

    int size() const { return static_cast<int>(elements_.size()); }
    int lattice_size() const { return n_b_; }
    const Field& element(int k) const { return elements_.at(k); }
    const Vec2& center(int k) const { return centers_.at(k); }
    const LambdaClass& lambda_class() const { return cls_; }
    const GridPtr& grid_ptr() const { return grid_; }

    // sum_k c_k b_k as a static field.
    Field synthesize(const std::vector<double>& c) const;
    // The same combination as a coefficient function, for sampling on other grids.
    PhaseFn function(const std::vector<double>& c) const;

  private:
    double raw(int k, const Vec2& x, double theta) const;

    GridPtr grid_;
    int n_b_;
    double spacing_ = 0.0;
    LambdaClass cls_;
    std::vector<Vec2> centers_;
    std::vector<double> scale_;
    std::vector<Field> elements_;
};

// Probing data of the first-order problem: initial data h and incoming data g.
// compatible() takes g(t) = h on the incoming boundary, which makes the
// solution continuous across the front t = tau_-, so the d_t trace carries no
// jump spike.
struct Probe {
    Field h;
    Field g; // timed; empty means zero incoming data

    static Probe compatible(const Field& h);
};

// &probe.g, or null for zero incoming data.
const Field* probe_incoming(const Probe& p);

// First-order solution of the background problem for a probe. Throws
// InvalidArgument unless h > 0 at every node.
Field first_order_solution(const TransportSolver& background, const Probe& probe,
                           const SolverOptions& opts = {1e-13, 1000});

// Flattened d_t outgoing trace, each sample weighted by sqrt(dt_n <n, v> dxi), so
// the Euclidean norm of the vector is the L2(d_+ S Omega_T) norm.
std::vector<double> dtrace_vector(const Field& f);
std::vector<double> dtrace_vector(const BoundaryTrace& dtrace);

// Samples a trace from a refined grid at the pairs and time levels of `coarse`:
// linear in the ring angle and in time, directions matched by angle.
BoundaryTrace restrict_trace(const BoundaryTrace& fine, const GridPtr& coarse);

struct SensitivityMatrix {
    int rows = 0;
    int cols = 0;
    std::vector<double> data; // column-major
    // Largest relative discrepancy of the re-solved spot-check columns.
    double verification_error = 0.0;
    std::vector<int> verified_columns;

    double at(int r, int c) const { return data[static_cast<std::size_t>(c) * rows + r]; }
    std::vector<double> apply(const std::vector<double>& c) const;
};

struct SensitivityOptions {
    SolverOptions solver{1e-13, 1000};
    std::uint64_t verify_seed = 7;
    int verify_columns = 2;
};

// Column j: d_t trace of solve_linear with source -b_j F, F the first-order
// solution with initial data h (or a supplied driving field).
SensitivityMatrix build_sensitivity_sigma(const TransportSolver& background, const CoefficientBasis& basis,
                                          const Field& drive, const SensitivityOptions& opts = {});
// Column j: source +b_j(x, v) int p(x, v', v) F(t, x, v') dw(v').
SensitivityMatrix build_sensitivity_mu(const TransportSolver& background, const CoefficientBasis& basis,
                                       const Field& drive, const KernelFn& p,
                                       const SensitivityOptions& opts = {});
// Column j: source -b_j (F1)^m, the order-m hierarchy source of a Taylor
// coefficient perturbation b_j.
SensitivityMatrix build_sensitivity_q(const TransportSolver& background, const CoefficientBasis& basis,
                                      const Field& f1, int m, const SensitivityOptions& opts = {});

// int p(x, v', v) f(t, x, v') dw(v') at every node.
Field kernel_moment(const Field& f, const KernelFn& p);

struct RecoveryOptions {
    // Absolute Tikhonov parameter; negative selects lambda_rel * ||J^T J||.
    double lambda = -1.0;
    double lambda_rel = 1e-8;
    // When positive, lambda follows the discrepancy principle ||J c - d|| = tau * noise_norm.
    double noise_norm = 0.0;
    double discrepancy_tau = 1.0;
    // Re-linearization sweeps: the driving field is recomputed from the current estimate.
    int outer_iterations = 1;
    SensitivityOptions sensitivity{};
};

struct RecoveryResult {
    std::string label;
    Field estimate;    // recovered perturbation (Lambda class)
    Field coefficient; // background + estimate
    std::vector<double> c;
    double relative_l2_error = -1.0; // of the perturbation; negative when no truth is given
    double residual = 0.0;
    double zero_residual = 0.0;
    double lambda = 0.0;
    double condition_number = 0.0;
    bool ill_conditioned = false;
    bool residual_ok = true;
    int outer_iterations = 0;
    double sensitivity_check = 0.0;

    std::string summary() const;
};

// Tikhonov least squares (J^T J + lambda I) c = J^T d, on its own.
struct LeastSquaresSolution {
    std::vector<double> c;
    double lambda = 0.0;
    double condition_number = 0.0;
    double residual = 0.0;
};
LeastSquaresSolution tikhonov_solve(const SensitivityMatrix& J, const std::vector<double>& d,
                                    const RecoveryOptions& opts);

// data: d_t trace vector of F1(sigma_1) - F1(sigma_2) for the probe.
RecoveryResult recover_sigma(const std::vector<double>& data, const TransportSolver& background,
                             const CoefficientBasis& basis, const Probe& probe,
                             const RecoveryOptions& opts = {}, const Field* truth = nullptr);

// Separable scattering mu = mu_tilde(x, v) p(x, v', v) with p known; the
// background solver carries mu_tilde_2 (possibly zero). `background_mu_tilde`
// is that mu_tilde_2.
RecoveryResult recover_mu_tilde(const std::vector<double>& data, const TransportSolver& background,
                                const PhaseFn& background_mu_tilde, const KernelFn& p,
                                const CoefficientBasis& basis, const Probe& probe,
                                const RecoveryOptions& opts = {}, const Field* truth = nullptr);

// data[m] (m = 2..K) is the d_t trace vector of F^(m)_1 - F^(m)_2. Orders are
// recovered in sequence; lower orders use the recovered estimates unless
// `known_lower[m]` is non-empty. truths[m] are optional perturbation truths.
// A failing order stops the sequence and the partial list is returned.
std::vector<RecoveryResult> recover_q_sequence(const std::vector<std::vector<double>>& data,
                                               const TransportSolver& background, const CoefficientBasis& basis,
                                               const Probe& probe, int K, const RecoveryOptions& opts = {},
                                               const std::vector<Field>& known_lower = {},
                                               const std::vector<Field>& truths = {});

// Relative L2 error of an estimate against a truth (absolute if the truth vanishes).
double relative_l2(const Field& estimate, const Field& truth);

enum class StabilityTarget { Sigma, Q };

struct StabilityRow {
    int draw = 0;
    double delta_norm = 0.0;
    double data_norm = 0.0;
    double ratio = 0.0;
};

struct StabilityTable {
    std::string label;
    std::vector<StabilityRow> rows;
    int redrawn = 0;
    double min = 0.0, median = 0.0, max = 0.0;

    double spread() const { return median > 0.0 ? max / median : 0.0; }
    // Columns draw, delta_norm, data_norm, ratio.
    void write_csv(std::ostream& os) const;
};

// r = ||delta|| / ||d_t delta F||_{L2(d_+)} over random normalised basis
// combinations. Sigma: delta F = F1(sigma + delta) - F1(sigma). Q: delta F is the
// order-2 hierarchy difference for q_2 + delta (q_2 = background Taylor entry).
StabilityTable stability_experiment(const TransportSolver& background, const CoefficientBasis& basis,
                                    const Probe& probe, StabilityTarget target, int n_draws,
                                    double delta_norm, std::uint64_t seed);

} // namespace ktie
