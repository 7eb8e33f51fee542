#pragma once

#include "ktie/transport.hpp"

#include <iosfwd>
#include <vector>

namespace ktie {

// Truncated power series in the data amplitude eps with Field coefficients.
// Stores derivatives: f(eps) = sum_{k=1}^{m} eps^k F^(k) / k!, F^(0) = 0.
class EpsJet {
  public:
    EpsJet() = default;
    explicit EpsJet(std::vector<Field> derivatives);
    // Order-m jet with every coefficient a zero field shaped like `like`.
    static EpsJet zeros(const Field& like, int order);

    int order() const { return static_cast<int>(d_.size()); }
    // k-th derivative, 1 <= k <= order().
    const Field& operator[](int k) const;
    Field& operator[](int k);
    void push(Field f);
    // Copy restricted to orders 1..m.
    EpsJet truncated(int m) const;

  private:
    std::vector<Field> d_;
};

// k-th power of the jet, truncated at order `out_order` (defaults to the jet's
// order), in the same derivative convention.
EpsJet jet_power(const EpsJet& jet, int k, int out_order = 0);

// Scalar counterpart used by the configuration-free oracles: derivs[k-1] = F^(k).
std::vector<double> jet_power(const std::vector<double>& derivs, int k, int out_order = 0);

// Node samples of the Taylor coefficients q_k, k = 0..K (empty fields for absent orders).
std::vector<Field> sample_taylor(const TaylorN& n, const GridPtr& grid);

// R_m = d^m/deps^m sum_{k=2}^{m-1} q_k f^k / k! at eps = 0. Only orders 1..m-1 of
// the jet are read; asking for m beyond order() + 1 throws InvalidArgument.
Field remainder(const std::vector<Field>& q, const EpsJet& jet, int m);

struct HierarchySolution {
    EpsJet jet;
    // sources[k] is the source fed to the order-k solve (sources[0], sources[1] empty).
    std::vector<Field> sources;
    std::vector<SolveReport> reports;
};

// F^(1) solves the linear problem with initial data h; F^(k) for k >= 2 solves it
// with zero data and source -q_k (F^(1))^k - R_k.
HierarchySolution solve_hierarchy(const TransportSolver& solver, const Field& h, int m,
                                  const SolverOptions& opts = {1e-13, 1000});

// Same cascade for caller-supplied Taylor coefficient samples (see sample_taylor).
// F^(1) also takes the incoming data g when given.
HierarchySolution solve_hierarchy(const TransportSolver& solver, const Field& h, int m,
                                  const std::vector<Field>& q,
                                  const SolverOptions& opts = {1e-13, 1000},
                                  const Field* g = nullptr);

// Centred finite difference in eps of solve_nonlinear(eps h, eps g), k in {1, 2, 3};
// g = null means zero incoming data. Stencil nodes are 0, +-eps (k <= 2) and
// +-eps, +-2 eps (k = 3).
Field fd_linearize(const TransportSolver& solver, const Field& h, int k, double eps,
                   const NonlinearOptions& opts = {}, const Field* g = nullptr);

struct ConsistencyRow {
    int k = 0;
    double eps = 0.0;
    double rel_error = 0.0;
    double ratio = 0.0; // error at previous (2x larger) eps over this one; 0 on the first row
};

// Relative L2 discrepancy between hierarchy and finite differences over a halving eps ladder.
std::vector<ConsistencyRow> consistency_table(const TransportSolver& solver, const Field& h,
                                              const HierarchySolution& hier, int k,
                                              double eps_start, int halvings,
                                              const NonlinearOptions& opts = {});

void write_consistency_csv(std::ostream& os, const std::vector<ConsistencyRow>& rows);

} // namespace ktie
