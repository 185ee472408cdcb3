#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "bglab/ensemble.hpp"

// Empirical measures, fluctuation fields and replica estimators of
// correlation functions and scaled cumulants.

namespace bglab::obs {

using hs::Vec;

struct Estimate {
    double value = 0.0;
    double se = 0.0;  // standard error
};

struct Growth {
    enum class Kind { bounded, gaussian };
    Kind kind = Kind::bounded;
    double bound = 1.0;   // bounded: sup |h|
    double alpha0 = 0.0;  // gaussian: |h| <= exp(alpha0 + beta0/4 |v|^2)
    double beta0 = 0.0;
};

struct TestFunction {
    std::string name;
    std::function<double(const Vec& x, const Vec& v)> eval;
    Growth growth;

    double operator()(const Vec& x, const Vec& v) const { return eval(x, v); }

    static TestFunction constant(double c);
    // sum_k coef_k * prod_a v_a^{exp_k[a]}; alpha0 is derived for the given beta0.
    struct Monomial {
        double coef;
        std::array<int, 3> exp;
    };
    static TestFunction polynomial(std::vector<Monomial> terms, double beta0);
    static TestFunction gaussian_bump(Vec center, double width, double amplitude = 1.0);
    // Indicator of a velocity box [lo, hi) (and, optionally, of a position box).
    static TestFunction indicator_box(Vec vlo, Vec vhi, std::optional<std::pair<Vec, Vec>> xbox = std::nullopt);
};

// Largest value of |h| / envelope over random probes (|v| up to `radius`,
// uniform x); <= 1 means the growth tag holds on the probes.
double growth_ratio(const TestFunction& h, int d, Philox& rng, int probes = 2000, double radius = 8.0);

// v_max such that the Gaussian envelope puts mass < tol outside [-v_max, v_max]^d.
double truncation_vmax(const ens::InitialLaw& law, int d, double tol = 1e-8);

struct PhaseBins {
    int dimension = 2;
    std::vector<std::vector<double>> vedges;  // per axis, increasing
    int xcells = 1;                           // uniform position cells per axis

    static PhaseBins uniform(int d, double vmax, int nv, int xcells = 1);
    std::size_t count() const;
    double volume(std::size_t bin) const;
    Vec center(std::size_t bin) const;  // velocity center
    Vec xcenter(std::size_t bin) const;
    // Bin of (x, v), or nullopt when v lies outside the velocity boxes.
    std::optional<std::size_t> locate(const Vec& x, const Vec& v) const;
};

struct BinnedDensity {
    std::vector<double> density, se;
    double overflow = 0.0;  // replica-mean number of particles outside the boxes
};

double empirical_measure(const hs::SystemState& s, const TestFunction& h, double mu);
double fluctuation_field(const hs::SystemState& s, const TestFunction& h, double reference, double mu);

// Per-replica pi(h) and (1/mu) sum h^2 at a sampled time (needs snapshots).
std::vector<double> pi_samples(const ens::ReplicaEnsemble& e, const TestFunction& h, double t);
std::vector<double> square_samples(const ens::ReplicaEnsemble& e, const TestFunction& h, double t);

// Run-time observables recording pi(h) and (1/mu) sum h^2, for ensembles
// that do not keep snapshots.
ens::Observable pi_observable(const TestFunction& h, std::string id);
ens::Observable square_observable(const TestFunction& h, std::string id);

enum class Centering { leave_one_out, ensemble_mean, external };
// zeta_r = sqrt(mu) (pi_r - ref_r).
std::vector<double> fluctuation_samples(const std::vector<double>& pi, double mu, Centering c,
                                        double external_reference = 0.0);

BinnedDensity estimate_F1(const ens::ReplicaEnsemble& e, const PhaseBins& bins, double t);

// mu Var(pi(h)) - mean((1/mu) sum h^2), from per-replica samples; jackknife error.
Estimate f2_connected(const std::vector<double>& pi, const std::vector<double>& sq, double mu);
Estimate estimate_F2_connected(const ens::ReplicaEnsemble& e, const TestFunction& h, double t);

// mu Cov(pi_s(h1), pi_t(h2)) = Cov(zeta_s(h1), zeta_t(h2)) with ensemble-mean centering.
Estimate covariance(const std::vector<double>& a, const std::vector<double>& b, double mu);
Estimate estimate_covariance(const ens::ReplicaEnsemble& e, const TestFunction& h1, const TestFunction& h2, double s,
                             double t);

// (1/mu) log mean exp(mu pi(h)) by log-sum-exp; jackknife error.
Estimate log_mgf(const std::vector<double>& sums, double mu);
Estimate estimate_log_mgf(const ens::ReplicaEnsemble& e, const TestFunction& h, double t);

// Unbiased k-statistic of order 1..4 (orders 3 and 4 are experimental for
// cumulant estimation: their variance grows with mu).
double k_statistic(const std::vector<double>& x, int order);

// Deterministic pairwise summation.
double pairwise_sum(const double* x, std::size_t n);

}  // namespace bglab::obs
