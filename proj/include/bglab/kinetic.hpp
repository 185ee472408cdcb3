#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <vector>

#include "bglab/ensemble.hpp"

// Spatially homogeneous kinetic reference stack on a uniform velocity grid.
// The torus has unit volume, so the spatial delta of the scattering measure
// integrates to 1 and every operator acts on velocity only.
//
// Values at the post-collision velocities v', w' are interpolated from the
// grid (tensor quadratic on the three nearest nodes per axis by default,
// multilinear on the containing cell as an option). Test functions are
// extrapolated past the grid, so 1, v (and |v|^2 for the quadratic rule) are
// reproduced exactly everywhere. Densities vanish outside the grid and use
// nonnegative multilinear weights on the clamped point wherever the stencil
// would leave the grid. Q(f,f) is the scatter (weak) form with the density
// weights, so gains are nonnegative except for quadratic overshoot in the
// interior.

namespace bglab::kin {

using hs::Vec;
using Eigen::MatrixXd;
using Eigen::VectorXd;

struct SphereRule {
    std::vector<Vec> nodes;
    std::vector<double> weights;
};

// d = 2: n uniform angles (n even). d = 3: n Gauss-Legendre nodes in cos(theta)
// times 2n uniform azimuths, exact for polynomials of degree 2n-1.
SphereRule sphere_rule(int d, int n);
double sphere_area(int d);

enum class Interpolation { multilinear, quadratic };

class VelocityGrid {
public:
    // Nodes v = -vmax + (k + 1/2) h per axis, h = 2 vmax / M, weights h^d.
    // sphere_nodes = 0 selects 32 angles (d = 2) or n = 6 (d = 3).
    VelocityGrid(int d, int M, double vmax, int sphere_nodes = 0,
                 Interpolation order = Interpolation::quadratic);

    int dimension() const { return d_; }
    int per_axis() const { return M_; }
    double vmax() const { return vmax_; }
    double spacing() const { return h_; }
    double weight() const { return w_; }
    std::size_t size() const { return n_; }
    Vec node(std::size_t i) const;
    const SphereRule& sphere() const { return sphere_; }
    Interpolation interpolation() const { return order_; }

    // Lattice-difference stencil entry: for node pairs with index difference
    // D = i - j and sphere node k, b = alpha_k ((v_i - v_j).omega)_+ and delta
    // = v' - v_i in index units (w' - v_j = -delta).
    struct Pair {
        std::array<int, 3> D;  // lexicographically positive; (-D, -omega) is implied
        double b;
        Vec delta;
    };
    const std::vector<Pair>& pairs() const { return pairs_; }

private:
    int d_, M_;
    double vmax_, h_, w_;
    Interpolation order_;
    std::size_t n_;
    SphereRule sphere_;
    std::vector<Pair> pairs_;
};

// Nodal values of a velocity law (mass included) and of common test functions.
VectorXd discretize(const VelocityGrid& g, const ens::InitialLaw& law);
VectorXd maxwellian(const VelocityGrid& g, double beta, double mass = 1.0, Vec mean = {0, 0, 0});
// psi(v) = v_axis^k (axis < 0 means |v|^2).
VectorXd monomial(const VelocityGrid& g, int axis, int k);
VectorXd bump(const VelocityGrid& g, Vec center, double width);

double integrate(const VelocityGrid& g, const VectorXd& f);                      // sum W f
double inner(const VelocityGrid& g, const VectorXd& a, const VectorXd& b);       // sum W a b
// max over collision invariants {1, v_a, |v|^2} of |sum W phi q|.
double conservation_residual(const VelocityGrid& g, const VectorXd& q);
double h_functional(const VelocityGrid& g, const VectorXd& f);

// Q(f,f) by quadrature; `correct` applies the least-norm projection (in the
// metric weighted by 1/f) that removes the d+2 conserved moments.
VectorXd collision_operator(const VelocityGrid& g, const VectorXd& f, bool correct = true);
// Largest collision frequency sum_j W f_j sum_k b over nodes.
double collision_frequency(const VelocityGrid& g, const VectorXd& f);
// Step bound for the explicit integrator: 1 / collision_frequency (the
// midpoint rule is stable for real decay rates up to 2 / dt).
double stable_dt(const VelocityGrid& g, const VectorXd& f);

// Density path stored at step times, linearly interpolated in between.
struct DensityPath {
    std::vector<double> times;
    std::vector<VectorXd> f;
    std::vector<double> H;  // discrete H-functional at each stored time
    bool stationary = false;
    VectorXd at(double t) const;
    static DensityPath constant(const VectorXd& f, double T);
};

// Explicit midpoint steps with the conservation projection inside Q.
DensityPath solve_boltzmann(const VelocityGrid& g, const VectorXd& f0, double T, double dt);

struct DsmcResult {
    std::vector<double> times;
    std::vector<std::vector<Vec>> velocities;
    std::size_t collisions = 0;
    std::size_t candidates = 0;
};
// Particle Monte Carlo for the homogeneous equation with mass law.mass carried
// by N particles; pair candidates form a Poisson process with majorant
// rate_scale * 2 max|v| in continuous time and are accepted with probability
// |u| / majorant.
DsmcResult dsmc_relax(const ens::InitialLaw& law, int d, int N, const std::vector<double>& times, double rate_scale,
                      std::uint64_t seed);

// L*_f psi(v) = int f(w) Delta psi b dw domega (gather form).
VectorXd linearized_adjoint(const VelocityGrid& g, const VectorXd& f, const VectorXd& psi);
MatrixXd linearized_adjoint_matrix(const VelocityGrid& g, const VectorXd& f);
// L_f h as the exact weighted transpose of L*_f: sum W (L_f h) psi = sum W h (L*_f psi).
VectorXd linearized(const VelocityGrid& g, const VectorXd& f, const VectorXd& h);

// psi_s for s on the step grid from t down to s0 (index 0 is time t).
struct BackwardPath {
    std::vector<double> times;
    std::vector<VectorXd> psi;
};
BackwardPath backward_semigroup(const VelocityGrid& g, const DensityPath& f, const VectorXd& phi, double t, double s,
                                double dt);

double noise_covariance(const VelocityGrid& g, const VectorXd& f, const VectorXd& phi, const VectorXd& psi);
// Matrix S with phi^T S psi = Cov_f(phi, psi).
MatrixXd noise_covariance_matrix(const VelocityGrid& g, const VectorXd& f);

// C(phi, psi) = phi^T C psi. Equilibrium start: diag(W f0).
MatrixXd equilibrium_covariance(const VelocityGrid& g, const VectorXd& f);
struct CovariancePath {
    std::vector<double> times;
    std::vector<MatrixXd> C;
};
CovariancePath covariance_evolution(const VelocityGrid& g, const DensityPath& f, const MatrixXd& C0, double T,
                                    double dt);

// R(g,g)(v_i, v_j) = sum_k b [g(v')g(w') - g(v_i)g(v_j)].
MatrixXd recollision_matrix(const VelocityGrid& g, const VectorXd& f);
// sum_j W_j R(f,f)(v_i, v_j) phi_j.
VectorXd recollision_apply(const VelocityGrid& g, const VectorXd& f, const VectorXd& phi);
// sum_ij W_i W_j R(f,f)_ij a_i b_j.
double recollision_form(const VelocityGrid& g, const VectorXd& f, const VectorXd& a, const VectorXd& b);

// int psi phi f_t + int_0^t dtau R-form of (U*(t,tau) psi, U*(t,tau) phi) (trapezoid in tau).
double spohn_covariance(const VelocityGrid& g, const DensityPath& f, const VectorXd& phi, const VectorXd& psi,
                        double t, double dt);

VectorXd sigma_apply(const VelocityGrid& g, const VectorXd& f, const VectorXd& psi);
// Weighted L1 norm (sum W |r|) of
// Sigma phi + f L* phi + L(f phi) - fdot phi - sum_j W_j R_ij phi_j.
double sigma_identity_residual(const VelocityGrid& g, const VectorXd& f, const VectorXd& fdot, const VectorXd& phi);
VectorXd sigma_identity_residual_vector(const VelocityGrid& g, const VectorXd& f, const VectorXd& fdot,
                                       const VectorXd& phi);

// Predicted gap between the two covariance routes on the grid,
//   int_0^t [Cov_u(phi_u, psi_u) - <psi_u, Sigma_u phi_u> + <psi_u, r_u(phi_u)>] du,
// with r the sigma-identity residual vector and fdot = Q(f_u) (0 on a
// stationary path). In exact arithmetic with exact time integration
// covariance_evolution - spohn_covariance equals this value, since the
// discrete L is the exact adjoint of L*; what remains is integrator error.
double dual_route_defect(const VelocityGrid& g, const DensityPath& f, const VectorXd& phi, const VectorXd& psi,
                         double t, double dt);

// int_0^t Cov(psi_u, psi_u) du - (int M phi^2 - int M psi_0^2), psi_u = U*_eq(t,u) phi,
// time integral by the trapezoid rule on the step grid.
double fluctuation_dissipation_gap(const VelocityGrid& g, const VectorXd& M, const VectorXd& phi, double t,
                                   double dt);

// (1/2) sum W W phi phi b (exp(Delta p) - 1).
double ld_hamiltonian(const VelocityGrid& g, const VectorXd& phi, const VectorXd& p);

}  // namespace bglab::kin
