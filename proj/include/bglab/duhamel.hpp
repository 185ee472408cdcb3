#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <vector>

#include <boost/multiprecision/cpp_int.hpp>

#include "bglab/ensemble.hpp"
#include "bglab/observables.hpp"

// Signed collision-tree expansion of the one-particle correlation function:
// pseudo-trajectories built backward from time t, Monte Carlo over trees and
// creation parameters, recollision/overlap bookkeeping for pairs of trees.
//
// Particle indices: roots are 0..n-1, the particle created at the i-th
// creation (i = 1..m) is n+i-1.

namespace bglab::duh {

using hs::Vec;
using boost::multiprecision::cpp_int;

struct CollisionTreeSpec {
    int n = 1;
    int m = 0;
    std::vector<int> parents;  // parents[i-1] in [0, n+i-2]
    std::vector<int> signs;    // +1 or -1

    void validate() const;
};

// n (n+1) ... (n+m-1).
cpp_int count_collision_trees(int n, int m);
// All unsigned trees (signs set to +1) in lexicographic order of parents.
std::vector<CollisionTreeSpec> enumerate_collision_trees(int n, int m);

struct CreationParams {
    std::vector<double> times;  // t >= t_1 > ... > t_m >= 0
    std::vector<Vec> omegas;
    std::vector<Vec> velocities;

    void validate(int m, int d, double t) const;
};

struct RootState {
    Vec x{}, v{};
};

enum class Mode { finite, zero };

struct PseudoTrajectory {
    struct Segment {
        double t_hi, t_lo;  // alive on [t_lo, t_hi], t_lo < t_hi or a point
        Vec x_hi;           // unwrapped position at t_hi
        Vec v;              // physical velocity on the segment
        Vec at(double tau) const { return hs::operator+(x_hi, hs::operator*(tau - t_hi, v)); }
    };
    struct Event {
        enum class Kind { creation, scattering };
        Kind kind;
        double time;
        int i, j;  // creation: i is the new particle, j its parent
        Vec omega;  // scattering: (x_i - x_j)/|.| at contact; creation: omega_i
        bool scattered = false;
        Vec vi_after{}, vj_after{};  // velocities just before `time` (backward side)
        Vec vi_before{}, vj_before{};
    };

    int d = 2;
    int n = 1, m = 0;
    double eps = 0.0;  // 0 in the limiting mode
    double t = 0.0;
    std::vector<int> root_of;       // root ancestor of each particle
    std::vector<double> birth;      // t for roots, t_i for created particles
    std::vector<std::vector<Segment>> segments;  // per particle, ordered backward in time
    std::vector<Event> events;      // ordered backward in time (decreasing time)

    std::size_t size() const { return segments.size(); }
    // Unwrapped position and velocity of particle q at time tau (q must be alive).
    Vec position(int q, double tau) const;
    Vec velocity(int q, double tau) const;
    std::vector<Vec> final_velocities() const;  // at time 0
};

// Backward construction. Finite mode (eps > 0) runs the hard-sphere flow of
// the particles present at diameter eps on the unit torus and adjoins particle
// i at x_{a_i} + s_i eps omega_i; zero mode adjoins at x_{a_i} and uses free
// flow. With s_i = +1 and (v_i - v_{a_i}).omega_i > 0 the pair is scattered.
// Returns nullopt when an adjoined particle lands within eps of another one.
std::optional<PseudoTrajectory> build_pseudo_trajectory(const CollisionTreeSpec& spec,
                                                        const std::vector<RootState>& roots,
                                                        const CreationParams& params, double eps, double t,
                                                        Mode mode, int d);

// CSV dump in the dynamics event format (time,i,j,omega...); creations list
// the parent as j.
void write_pseudo_events(std::ostream& os, const PseudoTrajectory& p);

struct DuhamelOptions {
    int m0 = 3;
    std::size_t samples = 100000;  // total over orders 0..m0 (pilot, then Neyman allocation)
    Mode mode = Mode::zero;
    double target_rel_error = 0.0;  // 0: no target
    int threads = 1;
    // finite mode: rho_eps = E[N]/mu; <= 0 selects the low-density virial estimate
    double density_ratio = 0.0;
};

struct OrderEstimate {
    int m = 0;
    double value = 0.0, se = 0.0;
    double positive = 0.0, negative = 0.0;  // sign split of the mean (negative <= 0)
    double positive_se = 0.0, negative_se = 0.0;
    double mass = 0.0;  // mean |weight|
    std::size_t samples = 0, rejected = 0;
};

struct DuhamelEstimate {
    double value = 0.0, se = 0.0;
    std::vector<OrderEstimate> orders;
    double series_ratio = 0.0;  // max_m mass_m / mass_{m-1}
    double tail_bound = 0.0;    // mass_{m0} r / (1 - r), r the last ratio (inf when r >= 1)
    bool dilute = true;         // series_ratio < 0.5
    bool target_met = true;
};

// Expected particle count over mu for the exclusion-conditioned Poisson law,
// by inverting the fugacity expansion to third order.
double virial_density_ratio(const ens::GCConfig& cfg);

// int F_1(t) h by the truncated signed series (one root, m <= m0).
DuhamelEstimate estimate_F1_duhamel(const ens::GCConfig& cfg, double t, const obs::TestFunction& h,
                                    const DuhamelOptions& opt);

// Recollisions: scatterings between particles that were already present.
struct RecollisionRecord {
    int label_i, label_j;  // subtree labels of the participants
    int i, j;
    double time;
    Vec omega;
    bool external;
};
// labels[r] is the subtree label of root r (empty: each root its own label).
std::vector<RecollisionRecord> classify_recollisions(const PseudoTrajectory& p, const std::vector<int>& labels = {});

struct OverlapInterval {
    double lo, hi;
    int a, b;  // a pair realizing the overlap at the latest time of the interval
};
// Maximal time intervals in [0, min(t_A, t_B)] where some particle of A and
// some particle of B lie at minimal-image distance < eps (strict).
std::vector<OverlapInterval> detect_overlaps(const PseudoTrajectory& A, const PseudoTrajectory& B, double eps);

struct ClusteringReport {
    struct Edge {
        int u, v;     // subtree (root) labels
        int sign;     // +1 clustering recollision, -1 clustering overlap
        double time;  // clustering time
    };
    std::vector<RecollisionRecord> recollisions;
    struct Overlap {
        int forest_a, forest_b;
        int u, v;
        double time;  // sup of the overlap times
    };
    std::vector<Overlap> overlaps;
    std::vector<Edge> graph;
    bool minimal = false;
};

// forests[k] is the pseudo-trajectory of forest k, whose roots carry the
// global labels lambda[k] (lambda[k][r] for root r of forests[k]). jungles
// partitions the forest indices. Recollision edges come from the backward
// time order with the no-cycle filter inside each forest; overlap edges join
// forests of one jungle in decreasing order of overlap time, also acyclic.
ClusteringReport clustering_graph(const std::vector<PseudoTrajectory>& forests,
                                  const std::vector<std::vector<int>>& lambda,
                                  const std::vector<std::vector<int>>& jungles);

struct ScanOptions {
    int creations = 1;  // per tree
    std::optional<ens::InitialLaw> law_b;  // default: cfg.law for both trees
    std::optional<Vec> root_a, root_b;     // default: uniform positions
    int threads = 1;
};

struct ScanRow {
    double eps, mu;
    std::size_t samples, events;
    double p, lo, hi;  // estimate and 95% Wilson interval
};
struct ScanResult {
    std::vector<ScanRow> rows;
    double slope = 0.0;  // least squares of log p against log mu
    bool starved = false;
};

// Probability that two independently built single-root trees (finite eps,
// creations with v from the law and omega oriented into the positive
// hemisphere) overlap on [0, t].
ScanResult clustering_probability_scan(const ens::GCConfig& cfg, double t, const std::vector<double>& eps_list,
                                       std::size_t samples, const ScanOptions& opt = {});

}  // namespace bglab::duh
