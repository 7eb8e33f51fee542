#pragma once

#include "ktie/coefficients.hpp"
#include "ktie/grid.hpp"

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <utility>
#include <vector>

namespace ktie {

struct SolveReport {
    int iterations = 0;
    std::vector<double> residual_history; // sup-norm of successive increments
    double kappa_bound = 0.0;             // 1 - exp(-sigma0 D_metric)
    bool converged = false;
    // Largest increment ratio after the first iteration (0 when fewer than 2 increments).
    double max_ratio = 0.0;
    // ||f||_inf / (||f0||_inf + ||f_minus||_inf + ||S||_inf); 0 for zero data.
    double stability_constant = 0.0;
    // Nonlinear solves: ||f||_inf / ||f_hat||_inf.
    double linear_part_ratio = 0.0;

    void write(std::ostream& os) const;
};

struct SolverOptions {
    double tol = 1e-10;
    int max_iter = 1000;
};

struct NonlinearOptions {
    double tol = 1e-12;
    double delta = 0.05; // smallness gate on ||f0||_inf and ||f_minus||_inf
    int max_iter = 200;
};

// Outgoing boundary restriction of a timed field with the <n, v> dxi dt measure.
struct BoundaryTrace {
    GridPtr grid;
    std::vector<int> node;      // ring node id per pair
    std::vector<int> direction; // direction index per pair
    std::vector<double> weight; // boundary measure weight per pair, strictly positive
    std::vector<double> values; // levels x pairs, row-major

    int pairs() const { return static_cast<int>(node.size()); }
    int levels() const { return pairs() == 0 ? 0 : static_cast<int>(values.size()) / pairs(); }
    double& at(int n, int p) { return values[static_cast<std::size_t>(n) * pairs() + p]; }
    double at(int n, int p) const { return values[static_cast<std::size_t>(n) * pairs() + p]; }

    double l2_norm() const;
    double sup_norm() const;
    // Columns t, x1, x2, theta, weight, value.
    void write_csv(std::ostream& os) const;
};

BoundaryTrace measure(const Field& f);
BoundaryTrace time_derivative_trace(const BoundaryTrace& trace);
BoundaryTrace operator-(const BoundaryTrace& a, const BoundaryTrace& b);

// Solver context for one (grid, sigma, mu) triple. Back-traced characteristics
// (interpolation stencils and attenuation at every time step) and the
// scattering matrix are built once and reused by every solve.
class TransportSolver {
  public:
    TransportSolver(GridPtr grid, CoefficientSet coeffs);

    const PhaseGrid& grid() const { return *grid_; }
    const GridPtr& grid_ptr() const { return grid_; }
    const CoefficientSet& coefficients() const { return coeffs_; }
    double kappa() const { return kappa_; }
    double sigma_bound() const { return sigma0_; }

    // exp(-int_0^s sigma(phi_{-r}(x, v)) dr) by the composite trapezoid rule.
    double attenuation(const Vec2& x, double theta, double s, double max_step = 0.0) const;

    // K(f) at every node of a timed (or static) field.
    Field scatter(const Field& f) const;
    // Attenuated time convolution of a source along the back-traced characteristic.
    Field duhamel(const Field& source) const;
    // Initial-data and incoming-data summands of the Picard seed.
    Field homogeneous(const Field* f0, const Field* f_minus) const;
    // Full Picard seed f^(0); any argument may be null for zero data.
    Field free_streaming(const Field* source, const Field* f0, const Field* f_minus) const;

    std::pair<Field, SolveReport> solve_linear(const Field* source, const Field* f0,
                                               const Field* f_minus,
                                               const SolverOptions& opts = {}) const;

    std::pair<Field, SolveReport> solve_nonlinear(const Field* f0, const Field* f_minus,
                                                  const NonlinearOptions& opts = {}) const;

    // Discrete residual of the transport operator, (f - f^(0)[S] - L K f) on the grid;
    // used to check that a field solves its recorded problem.
    double residual(const Field& f, const Field* source, const Field* f0,
                    const Field* f_minus) const;

  private:
    // Cached backward characteristic of one (node, direction) pair: samples at
    // s_k = k dt for k = 0..last (all strictly before the exit) plus the exit
    // point at tau_-. Sample stencils live in the flat arrays below.
    struct Ray {
        std::size_t first = 0; // index of sample 0 in the sample arrays
        int last = -1;         // -1 when tau_- vanishes (incoming boundary pair)
        double tau = 0.0;
        double tail = 0.0;     // tau_- - last * dt
        PhasePoint exit;
        double exit_atten = 1.0;
        std::size_t exit_sample = 0;
    };

    // Samples of the backward characteristic at s = t_n (t_n < tau_-) and at tau_-.
    struct BackTrace {
        std::vector<PhasePoint> points;
        std::vector<double> atten;
        PhasePoint exit;
        double exit_atten = 1.0;
        double tau = 0.0;
    };

    double sample(std::size_t k, const double* level) const {
        double v = 0.0;
        for (std::uint32_t m = sample_begin_[k]; m < sample_begin_[k + 1]; ++m)
            v += sample_weight_[m] * level[sample_offset_[m]];
        return v;
    }
    void push_sample(const Stencil& st);

    BackTrace back_trace(int i, int j) const;
    PhasePoint back_step(const PhasePoint& p, double s) const;
    double interpolate_boundary(const Field& f_minus, const PhasePoint& exit, double t) const;

    GridPtr grid_;
    CoefficientSet coeffs_;
    double sigma0_ = 0.0;
    double kappa_ = 0.0;
    std::vector<Ray> rays_;
    std::vector<std::uint32_t> sample_begin_;
    std::vector<int> sample_offset_;
    std::vector<double> sample_weight_;
    std::vector<double> sample_atten_;
    // mu(x_i, v_jin, v_jout) w_jin laid out [i][jout][jin].
    std::vector<double> scatter_;
};

} // namespace ktie
