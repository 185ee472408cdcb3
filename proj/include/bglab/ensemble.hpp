#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "bglab/hardsphere.hpp"
#include "bglab/rng.hpp"

// Grand-canonical hard-sphere initial data (uniform in x, product velocity
// law) and seeded replica runs.

namespace bglab::ens {

using hs::Vec;

struct InitialLaw {
    enum class Kind { maxwellian, bimodal, tabulated };
    Kind kind = Kind::maxwellian;
    double beta = 1.0;
    double separation = 0.0;  // bimodal: centers at +-(separation/2) e1
    double mass = 1.0;        // integral of f0 over (x, v)
    // tabulated: one-dimensional marginal density on nodes (piecewise linear,
    // normalized on construction); the velocity law is its d-fold product.
    std::vector<double> nodes, values;
    // Envelope f0(v) <= C0 exp(-beta0 |v|^2 / 2). C0 is user-supplied only for
    // tabulated laws; envelope_C0 derives it for the Gaussian families.
    double C0 = 0.0, beta0 = 0.0;

    static InitialLaw maxwellian(double beta, double mass = 1.0);
    static InitialLaw bimodal(double beta, double separation, double mass = 1.0);
    static InitialLaw tabulated(std::vector<double> nodes, std::vector<double> values, double C0, double beta0,
                                double mass = 1.0);
    static Kind kind_from_name(const std::string& name);
    std::string name() const;

    // Density f0(v) at dimension d (includes `mass`).
    double density(const Vec& v, int d) const;
    // E v_axis^k for the normalized velocity law, k <= 4.
    double moment(int axis, int k) const;
    double envelope_C0(int d) const;
};

// Ratio max f0(v) / (C0 exp(-beta0|v|^2/2)) over `probes` sampled velocities;
// values above 1 indicate a wrong envelope.
double envelope_ratio(const InitialLaw& law, int d, Philox& rng, int probes = 1000);

Vec sample_velocity(const InitialLaw& law, int d, Philox& rng);

struct GCConfig {
    int dimension = 2;
    double diameter = 0.01;
    double intensity = 0.0;  // mu_eps; <= 0 selects eps^{-(d-1)}
    InitialLaw law;
    double horizon = 1.0;
    std::uint64_t seed = 1;
    std::size_t replicas = 1;

    double mu() const;
    void validate() const;
};

// Estimated whole-configuration acceptance exp(-(nbar^2/2) |B_eps|).
double expected_acceptance(const GCConfig& cfg);

inline constexpr std::size_t kMaxAttempts = 100000;

struct SampleInfo {
    std::size_t attempts = 0;
};

// Exact sample of the exclusion-conditioned Poisson law: draw N, draw N
// i.i.d. particles, restart on any overlap. Diameter 0 gives the ideal gas.
hs::SystemState sample_grand_canonical(const GCConfig& cfg, Philox& rng, SampleInfo* info = nullptr);

struct Observable {
    std::string id;
    std::function<double(const hs::SystemState&, double mu)> eval;
};

struct ReplicaRecord {
    std::uint64_t replica = 0;
    bool failed = false;
    std::string error;
    std::size_t initial_particles = 0;
    std::size_t attempts = 0;
    std::size_t collisions = 0;
    std::vector<std::vector<double>> values;  // [observable][time index]
    std::vector<hs::SystemState> snapshots;   // one per time when requested
};

struct RunOptions {
    std::vector<double> times{0.0};
    std::uint64_t first_replica = 0;
    int threads = 1;
    bool keep_snapshots = false;
};

class ReplicaEnsemble {
public:
    GCConfig config;
    std::vector<std::string> observable_ids;
    std::vector<double> times;
    std::map<std::uint64_t, ReplicaRecord> records;

    std::size_t size() const { return records.size(); }
    std::size_t failed() const;
    std::size_t observable_index(const std::string& id) const;
    std::size_t time_index(double t) const;  // throws if t was not sampled

    // Values of one observable at one time over successful replicas, in replica-id order.
    std::vector<double> values(const std::string& id, double t) const;
    // Snapshots at time t over successful replicas, in replica-id order.
    std::vector<const hs::SystemState*> snapshots(double t) const;

    // Union with a compatible ensemble; replica ids must be disjoint.
    void merge(const ReplicaEnsemble& other);
};

ReplicaEnsemble run_replicas(const GCConfig& cfg, const std::vector<Observable>& observables,
                             const RunOptions& options);

// CSV: replica,time,value for one observable; failed replicas omitted.
void write_observable_csv(std::ostream& os, const ReplicaEnsemble& e, const std::string& id);
// JSON metadata sidecar (config, generator, replica counts).
std::string metadata_json(const ReplicaEnsemble& e);

}  // namespace bglab::ens
