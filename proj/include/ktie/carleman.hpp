#pragma once

#include "ktie/transport.hpp"

#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

namespace ktie {

// Linear weight phi(t, x) = gamma . x - beta t on the velocity set
// V = {v : gamma . v >= gamma0}, where B(v) = gamma . v - beta >= a = gamma0 - beta.
struct EuclideanWeight {
    Vec2 gamma{1.0, 0.0};
    double gamma0 = 0.3;
    double beta = 0.15;

    // Normalizes gamma; throws InvalidArgument unless 0 < beta < gamma0 <= 1.
    static EuclideanWeight make(Vec2 gamma, double gamma0, double beta);

    double a() const { return gamma0 - beta; }
    double B(double theta) const { return dot(gamma, unit(theta)) - beta; }
    double phi(double t, const Vec2& x) const { return dot(gamma, x) - beta * t; }
    bool in_V(double theta) const { return dot(gamma, unit(theta)) >= gamma0 - 1e-12; }
};

// One-step upwind transport derivative (d_t + X) f along characteristics:
// backward difference where the flow -dt stays inside, forward otherwise.
// Stencils are built once per grid; nodes with neither neighbour get NaN.
class UpwindOperator {
  public:
    explicit UpwindOperator(GridPtr grid);
    // Reuses tabulated forward exit times (layout [j][i]); tau_- comes from the
    // opposite direction.
    UpwindOperator(GridPtr grid, const std::vector<double>& tau_plus);

    Field apply(const Field& f) const;
    // X g of a static field with step dt: centred where both stencils exist.
    Field apply_static(const Field& g) const;
    const PhaseGrid& grid() const { return *grid_; }

  private:
    void build(const std::vector<double>& tau_plus);

    GridPtr grid_;
    std::vector<Stencil> back_, fwd_;
    std::vector<char> has_back_, has_fwd_;
};

// Forward exit times of every grid node, layout [j][i].
std::vector<double> tabulate_tau_plus(const PhaseGrid& grid);

// phi(t, x, v) = -beta t - tau_+(x, v) with P0 phi = 1 - beta. Exit times and
// the upwind stencils are tabulated once per grid.
class RiemannianWeight {
  public:
    // Throws InvalidArgument unless 0 < beta < 1.
    RiemannianWeight(GridPtr grid, double beta);

    double beta() const { return beta_; }
    double B() const { return 1.0 - beta_; }
    // B below this is reported as a degenerate weight.
    static constexpr double degenerate_B = 1e-3;
    bool degenerate() const { return B() < degenerate_B; }
    double tau_plus(int j, int i) const { return tau_plus_[static_cast<std::size_t>(j) * n_space_ + i]; }
    double phi(int n, int j, int i) const;
    const UpwindOperator& upwind() const { return *upwind_; }

  private:
    GridPtr grid_;
    double beta_;
    int n_space_ = 0;
    std::vector<double> tau_plus_;
    std::shared_ptr<const UpwindOperator> upwind_;
};

// Largest |(phi(t + h, x + h v) - phi(t, x)) / h - B(v)| over interior nodes.
double weight_identity_residual(const PhaseGrid& grid, const EuclideanWeight& w, double h);
// Largest |tau_+(phi_h(x, v)) - (tau_+(x, v) - h)| over interior nodes, the
// discrete form of P0 phi = 1 - beta for the exit-time weight.
double weight_identity_residual(const RiemannianWeight& w, const PhaseGrid& grid, double h);

// Coefficients p that are even in v and vanish where |gamma . v| <= gamma0.
struct LambdaClass {
    Vec2 gamma{1.0, 0.0};
    double gamma0 = 0.3;

    bool admits(double theta) const { return std::abs(dot(gamma, unit(theta))) > gamma0 + 1e-12; }
    // Node-exact membership test on a static or timed field.
    bool contains(const Field& p) const;
};

// (p(x, v) + p(x, -v)) / 2, then zero at directions outside the class.
Field lambda_project(const Field& p, const LambdaClass& cls);

// Hypothesis constants of the Euclidean estimate, by quadrature on the grid.
struct CarlemanHypotheses {
    double c_sigma = 0.0; // sup B^{-1} |sigma| over directions with |B| <= gamma1
    double c_mu = 0.0;    // sup_{x, v} sum_j w_j B(v_j)^{-2} mu(x, v_j, v)^2
    double sigma_sup = 0.0;
};

CarlemanHypotheses carleman_hypotheses(const PhaseGrid& grid, const EuclideanWeight& w,
                                       const CoefficientSet& coeffs, double gamma1 = 0.3);

// Both sides of a weighted inequality at one s. Every term carries the common
// factor exp(-2 s max phi), max over the support of the field, which cancels in lhs / rhs.
struct CarlemanValue {
    double s = 0.0;
    double lhs = 0.0;
    double rhs = 0.0;
    double log_scale = 0.0; // 2 s max phi over the support
    // Components, already multiplied by their s powers.
    double initial = 0.0;
    double volume = 0.0;
    double final_term = 0.0;
    double boundary = 0.0;
    double residual = 0.0;
    bool degenerate = false;
};

// lhs = s int_V int |f(0)|^2 e^{2 s phi(0)} + s^2 int B^2 |f|^2 e^{2 s phi};
// rhs = int |P f - K f|^2 e^{2 s phi} + s int_{boundary} |f|^2 e^{2 s phi} <n, v>.
// P f uses the upwind operator. Requires f(T) = 0 and f(0) supported in V;
// throws PreconditionViolation otherwise. One value per entry of s_values.
std::vector<CarlemanValue> carleman_functional_euclidean(const Field& f, const EuclideanWeight& w,
                                                         const CoefficientSet& coeffs,
                                                         const std::vector<double>& s_values);
CarlemanValue carleman_functional_euclidean(const Field& f, const EuclideanWeight& w,
                                            const CoefficientSet& coeffs, double s);

// lhs = s^2 B^2 vol + s B init - s B final - s B bdry (signed <n, v> measure);
// rhs = int e^{2 s phi} |P u|^2 with P = d_t + X + sigma.
std::vector<CarlemanValue> carleman_functional_riemannian(const Field& u, const RiemannianWeight& w,
                                                          const PhaseFn& sigma,
                                                          const std::vector<double>& s_values);
CarlemanValue carleman_functional_riemannian(const Field& u, const RiemannianWeight& w,
                                             const PhaseFn& sigma, double s);

// Default s ladder {10, 20, 40, 80, 160} / diam.
std::vector<double> default_s_grid(double diameter);

struct InequalityReport {
    std::string label;
    bool negative_control = false;
    std::vector<double> s_values;
    std::vector<double> lhs;
    std::vector<double> rhs;
    double fitted_C = 0.0;
    double s0 = 0.0;
    int violations = 0;
    bool holds = false;

    double ratio(std::size_t k) const;
    // Columns s, lhs, rhs, ratio.
    void write_csv(std::ostream& os) const;
    std::string verdict() const;
};

// fitted_C = slack * lhs / rhs at the smallest s; holds iff lhs <= fitted_C rhs at every s.
InequalityReport calibrate_inequality(std::string label, const std::vector<CarlemanValue>& values,
                                      double slack = 1.1);
// Family version: one constant, the largest calibration ratio over all members.
std::vector<InequalityReport> calibrate_family(const std::vector<std::string>& labels,
                                               const std::vector<std::vector<CarlemanValue>>& members,
                                               double slack = 1.1);
// Checks values against an externally fitted constant (negative controls).
InequalityReport check_inequality(std::string label, const std::vector<CarlemanValue>& values,
                                  double fitted_C, bool negative_control);

// Energy inequality: lhs = max_t ||d_t f(t)||_{L2(SO)} and ||d_t f||_{L2(out, T)};
// rhs = ||S~|| + ||f0|| + ||X f0|| (+ ||d_t f_minus||_{L2(in, T)} when f_minus given).
struct EnergyValue {
    double lhs_volume = 0.0;
    double lhs_boundary = 0.0;
    double rhs = 0.0;
};

// X f0 uses `op` when given (ensembles reuse one operator per grid), otherwise
// transport_derivative with step dx.
EnergyValue energy_functional(const Field& f, const Field& s_tilde, const Field* f0,
                              const Field* f_minus, const UpwindOperator* op = nullptr);

// Directional derivative X g of a static field (centred along the characteristic
// where both neighbours are inside, one-sided otherwise).
Field transport_derivative(const Field& g, double h);

// d_t of a timed field: centred inside, second-order one-sided at both ends.
Field time_derivative(const Field& f);

// Incoming-boundary L2 norm with the |<n, v>| dxi dt measure.
double incoming_l2_norm(const Field& f);

} // namespace ktie
