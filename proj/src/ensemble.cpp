#include "bglab/ensemble.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numbers>
#include <ostream>
#include <stdexcept>
#include <thread>

#include "json.hpp"

namespace bglab::ens {

using hs::operator-;

namespace {

double gauss_norm(double beta, int d) { return std::pow(beta / (2.0 * std::numbers::pi), 0.5 * d); }

double ball_volume(double r, int d) { return d == 2 ? std::numbers::pi * r * r : 4.0 / 3.0 * std::numbers::pi * r * r * r; }

// Piecewise-linear marginal, value at v.
double tab_eval(const InitialLaw& law, double v) {
    const auto& x = law.nodes;
    if (v < x.front() || v > x.back()) return 0.0;
    auto it = std::upper_bound(x.begin(), x.end(), v);
    std::size_t k = it == x.end() ? x.size() - 1 : static_cast<std::size_t>(it - x.begin());
    if (k == 0) k = 1;
    const double a = x[k - 1], b = x[k];
    const double s = (v - a) / (b - a);
    return (1.0 - s) * law.values[k - 1] + s * law.values[k];
}

double tab_sample(const InitialLaw& law, Philox& rng) {
    const auto& x = law.nodes;
    const auto& f = law.values;
    double m = rng.uniform();
    for (std::size_t k = 1; k < x.size(); ++k) {
        const double h = x[k] - x[k - 1];
        const double seg = 0.5 * h * (f[k - 1] + f[k]);
        if (m < seg || k + 1 == x.size()) {
            m = std::min(m, seg);
            const double slope = (f[k] - f[k - 1]) / h;
            const double disc = std::max(0.0, f[k - 1] * f[k - 1] + 2.0 * slope * m);
            const double den = f[k - 1] + std::sqrt(disc);
            const double dx = den > 0.0 ? 2.0 * m / den : 0.0;
            return x[k - 1] + std::min(h, dx);
        }
        m -= seg;
    }
    return x.back();
}

}  // namespace

InitialLaw InitialLaw::maxwellian(double beta, double mass) {
    if (!(beta > 0.0) || !(mass >= 0.0)) throw std::invalid_argument("maxwellian: need beta > 0, mass >= 0");
    InitialLaw l;
    l.kind = Kind::maxwellian;
    l.beta = beta;
    l.mass = mass;
    l.beta0 = beta;
    return l;
}

InitialLaw InitialLaw::bimodal(double beta, double separation, double mass) {
    if (!(beta > 0.0) || !(mass >= 0.0) || !(separation >= 0.0))
        throw std::invalid_argument("bimodal: need beta > 0, separation >= 0, mass >= 0");
    InitialLaw l;
    l.kind = Kind::bimodal;
    l.beta = beta;
    l.separation = separation;
    l.mass = mass;
    l.beta0 = 0.5 * beta;
    return l;
}

InitialLaw InitialLaw::tabulated(std::vector<double> nodes, std::vector<double> values, double C0, double beta0,
                                 double mass) {
    if (nodes.size() < 2 || nodes.size() != values.size())
        throw std::invalid_argument("tabulated: need >= 2 nodes and matching values");
    for (std::size_t k = 1; k < nodes.size(); ++k)
        if (!(nodes[k] > nodes[k - 1])) throw std::invalid_argument("tabulated: nodes must increase");
    double z = 0.0;
    for (std::size_t k = 0; k < values.size(); ++k) {
        if (!(values[k] >= 0.0) || !std::isfinite(values[k]))
            throw std::invalid_argument("tabulated: values must be finite and nonnegative");
        if (k > 0) z += 0.5 * (nodes[k] - nodes[k - 1]) * (values[k] + values[k - 1]);
    }
    if (!(z > 0.0)) throw std::invalid_argument("tabulated: zero total mass");
    for (auto& v : values) v /= z;
    InitialLaw l;
    l.kind = Kind::tabulated;
    l.nodes = std::move(nodes);
    l.values = std::move(values);
    l.C0 = C0;
    l.beta0 = beta0;
    l.mass = mass;
    return l;
}

InitialLaw::Kind InitialLaw::kind_from_name(const std::string& name) {
    if (name == "maxwellian") return Kind::maxwellian;
    if (name == "bimodal") return Kind::bimodal;
    if (name == "tabulated") return Kind::tabulated;
    throw std::invalid_argument("unknown velocity profile '" + name + "'");
}

std::string InitialLaw::name() const {
    switch (kind) {
        case Kind::maxwellian: return "maxwellian";
        case Kind::bimodal: return "bimodal";
        case Kind::tabulated: return "tabulated";
    }
    return "?";
}

double InitialLaw::density(const Vec& v, int d) const {
    switch (kind) {
        case Kind::maxwellian: {
            double r2 = 0;
            for (int k = 0; k < d; ++k) r2 += v[k] * v[k];
            return mass * gauss_norm(beta, d) * std::exp(-0.5 * beta * r2);
        }
        case Kind::bimodal: {
            const double c = 0.5 * separation;
            double r2 = 0;
            for (int k = 1; k < d; ++k) r2 += v[k] * v[k];
            const double a = (v[0] - c) * (v[0] - c), b = (v[0] + c) * (v[0] + c);
            return mass * gauss_norm(beta, d) * 0.5 * (std::exp(-0.5 * beta * (r2 + a)) + std::exp(-0.5 * beta * (r2 + b)));
        }
        case Kind::tabulated: {
            double p = mass;
            for (int k = 0; k < d; ++k) p *= tab_eval(*this, v[k]);
            return p;
        }
    }
    return 0.0;
}

double InitialLaw::moment(int axis, int k) const {
    if (k < 0 || k > 4) throw std::invalid_argument("moment: order must be in 0..4");
    if (k == 0) return 1.0;
    const double s2 = 1.0 / beta;
    switch (kind) {
        case Kind::maxwellian:
        case Kind::bimodal: {
            const double c = (kind == Kind::bimodal && axis == 0) ? 0.5 * separation : 0.0;
            if (k == 1 || k == 3) return 0.0;
            if (k == 2) return c * c + s2;
            return c * c * c * c + 6.0 * c * c * s2 + 3.0 * s2 * s2;
        }
        case Kind::tabulated: {
            // three-point Gauss-Legendre per segment: exact for v^k times a linear density, k <= 4
            static const double gx[3] = {-std::sqrt(0.6), 0.0, std::sqrt(0.6)};
            static const double gw[3] = {5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0};
            double m = 0.0;
            for (std::size_t s = 1; s < nodes.size(); ++s) {
                const double a = nodes[s - 1], b = nodes[s], h = b - a;
                for (int q = 0; q < 3; ++q) {
                    const double v = a + 0.5 * h * (1.0 + gx[q]);
                    const double f = values[s - 1] + (values[s] - values[s - 1]) * (v - a) / h;
                    m += 0.5 * h * gw[q] * std::pow(v, k) * f;
                }
            }
            return m;
        }
    }
    return 0.0;
}

double InitialLaw::envelope_C0(int d) const {
    const InitialLaw& law = *this;
    switch (law.kind) {
        case InitialLaw::Kind::maxwellian: return law.mass * gauss_norm(law.beta, d);
        case InitialLaw::Kind::bimodal: {
            const double c = 0.5 * law.separation;
            return law.mass * gauss_norm(law.beta, d) * std::exp(0.5 * law.beta * c * c);
        }
        case InitialLaw::Kind::tabulated: return law.C0;
    }
    return law.C0;
}

double envelope_ratio(const InitialLaw& law, int d, Philox& rng, int probes) {
    const double C0 = law.envelope_C0(d);
    double worst = 0.0;
    for (int p = 0; p < probes; ++p) {
        const Vec v = sample_velocity(law, d, rng);
        double r2 = 0;
        for (int k = 0; k < d; ++k) r2 += v[k] * v[k];
        const double env = C0 * std::exp(-0.5 * law.beta0 * r2);
        const double f = law.density(v, d);
        if (f > 0.0) worst = std::max(worst, env > 0.0 ? f / env : std::numeric_limits<double>::infinity());
    }
    return worst;
}

Vec sample_velocity(const InitialLaw& law, int d, Philox& rng) {
    Vec v{0, 0, 0};
    switch (law.kind) {
        case InitialLaw::Kind::maxwellian: {
            const double s = 1.0 / std::sqrt(law.beta);
            for (int k = 0; k < d; ++k) v[k] = s * rng.normal();
            break;
        }
        case InitialLaw::Kind::bimodal: {
            const double s = 1.0 / std::sqrt(law.beta);
            const double c = rng.uniform() < 0.5 ? -0.5 * law.separation : 0.5 * law.separation;
            for (int k = 0; k < d; ++k) v[k] = s * rng.normal();
            v[0] += c;
            break;
        }
        case InitialLaw::Kind::tabulated:
            for (int k = 0; k < d; ++k) v[k] = tab_sample(law, rng);
            break;
    }
    return v;
}

double GCConfig::mu() const { return intensity > 0.0 ? intensity : std::pow(diameter, -(dimension - 1)); }

void GCConfig::validate() const {
    if (dimension != 2 && dimension != 3) throw std::invalid_argument("dimension must be 2 or 3");
    if (!(diameter >= 0.0) || diameter >= 0.5) throw std::invalid_argument("diameter must be in [0, 1/2)");
    if (!(intensity > 0.0) && diameter == 0.0) throw std::invalid_argument("diameter 0 needs an explicit intensity");
    if (!(horizon >= 0.0)) throw std::invalid_argument("horizon must be >= 0");
    if (!(law.mass >= 0.0)) throw std::invalid_argument("law mass must be >= 0");
}

double expected_acceptance(const GCConfig& cfg) {
    const double nbar = cfg.mu() * cfg.law.mass;
    return std::exp(-0.5 * nbar * nbar * ball_volume(cfg.diameter, cfg.dimension));
}

hs::SystemState sample_grand_canonical(const GCConfig& cfg, Philox& rng, SampleInfo* info) {
    cfg.validate();
    const int d = cfg.dimension;
    const double eps = cfg.diameter;
    const double nbar = cfg.mu() * cfg.law.mass;
    if (expected_acceptance(cfg) < 1e-3)
        throw std::domain_error("rejection sampling infeasible: expected acceptance below 1e-3");

    hs::SystemState s;
    s.diameter = eps;
    s.dimension = d;

    // Hash grid with cells of side >= eps so overlaps are found among neighbours.
    const std::size_t cap = std::max<std::size_t>(64, static_cast<std::size_t>(8.0 * nbar + 8.0));
    int nc = eps > 0.0 ? static_cast<int>(std::floor(1.0 / eps)) : 0;
    while (nc >= 3 && std::pow(static_cast<double>(nc), d) > static_cast<double>(cap)) --nc;
    if (nc < 3) nc = 0;
    std::vector<std::vector<int>> cells(nc > 0 ? static_cast<std::size_t>(std::pow(nc, d)) : 0);
    std::vector<std::size_t> used;
    auto cell_of = [&](const Vec& x) {
        std::array<int, 3> c{0, 0, 0};
        for (int k = 0; k < d; ++k) c[k] = std::min(nc - 1, static_cast<int>(x[k] * nc));
        return c;
    };
    auto flat = [&](std::array<int, 3> c) {
        std::size_t id = 0;
        for (int k = d - 1; k >= 0; --k) id = id * nc + static_cast<std::size_t>(((c[k] % nc) + nc) % nc);
        return id;
    };

    for (std::size_t attempt = 1; attempt <= kMaxAttempts; ++attempt) {
        const std::uint64_t n = rng.poisson(nbar);
        s.particles.clear();
        s.particles.reserve(n);
        for (auto id : used) cells[id].clear();
        used.clear();
        bool ok = true;
        for (std::uint64_t p = 0; p < n && ok; ++p) {
            hs::ParticleState q;
            for (int k = 0; k < d; ++k) q.position[k] = rng.uniform();
            q.velocity = sample_velocity(cfg.law, d, rng);
            if (eps > 0.0) {
                auto close = [&](int other) {
                    return hs::norm(hs::minimal_image(q.position - s.particles[other].position, d)) < eps;
                };
                if (nc == 0) {
                    for (std::size_t o = 0; o < s.particles.size() && ok; ++o)
                        if (close(static_cast<int>(o))) ok = false;
                } else {
                    const auto c = cell_of(q.position);
                    const int zr = d == 3 ? 1 : 0;
                    for (int a = -1; a <= 1 && ok; ++a)
                        for (int b = -1; b <= 1 && ok; ++b)
                            for (int z = -zr; z <= zr && ok; ++z)
                                for (int o : cells[flat({c[0] + a, c[1] + b, c[2] + z})])
                                    if (close(o)) {
                                        ok = false;
                                        break;
                                    }
                    if (ok) {
                        const auto id = flat(c);
                        if (cells[id].empty()) used.push_back(id);
                        cells[id].push_back(static_cast<int>(s.particles.size()));
                    }
                }
            }
            if (ok) s.particles.push_back(q);
        }
        if (ok) {
            if (info) info->attempts = attempt;
            return s;
        }
    }
    throw std::runtime_error("rejection sampling exceeded the attempt cap");
}

std::size_t ReplicaEnsemble::failed() const {
    std::size_t n = 0;
    for (const auto& [id, r] : records) n += r.failed;
    return n;
}

std::size_t ReplicaEnsemble::observable_index(const std::string& id) const {
    for (std::size_t k = 0; k < observable_ids.size(); ++k)
        if (observable_ids[k] == id) return k;
    throw std::out_of_range("observable '" + id + "' not recorded");
}

std::size_t ReplicaEnsemble::time_index(double t) const {
    for (std::size_t k = 0; k < times.size(); ++k)
        if (std::abs(times[k] - t) <= 1e-12 * (1.0 + std::abs(t))) return k;
    throw std::out_of_range("time not sampled in the ensemble");
}

std::vector<double> ReplicaEnsemble::values(const std::string& id, double t) const {
    const auto o = observable_index(id);
    const auto k = time_index(t);
    std::vector<double> out;
    out.reserve(records.size());
    for (const auto& [rid, r] : records)
        if (!r.failed) out.push_back(r.values[o][k]);
    return out;
}

std::vector<const hs::SystemState*> ReplicaEnsemble::snapshots(double t) const {
    const auto k = time_index(t);
    std::vector<const hs::SystemState*> out;
    for (const auto& [rid, r] : records) {
        if (r.failed) continue;
        if (r.snapshots.size() <= k) throw std::out_of_range("snapshots were not kept");
        out.push_back(&r.snapshots[k]);
    }
    return out;
}

void ReplicaEnsemble::merge(const ReplicaEnsemble& other) {
    if (other.observable_ids != observable_ids || other.times != times)
        throw std::invalid_argument("merge: observables or times differ");
    if (other.config.seed != config.seed || other.config.diameter != config.diameter ||
        other.config.dimension != config.dimension || other.config.mu() != config.mu())
        throw std::invalid_argument("merge: configurations differ");
    for (const auto& [id, r] : other.records)
        if (records.count(id)) throw std::invalid_argument("merge: duplicate replica id");
    for (const auto& [id, r] : other.records) records.emplace(id, r);
    config.replicas = records.size();
}

ReplicaEnsemble run_replicas(const GCConfig& cfg, const std::vector<Observable>& observables,
                             const RunOptions& options) {
    cfg.validate();
    if (expected_acceptance(cfg) < 1e-3)
        throw std::domain_error("rejection sampling infeasible: expected acceptance below 1e-3");
    for (std::size_t k = 0; k < options.times.size(); ++k) {
        const double t = options.times[k];
        if (!(t >= 0.0) || t > cfg.horizon * (1.0 + 1e-12) || (k > 0 && !(t > options.times[k - 1])))
            throw std::invalid_argument("sample times must increase within [0, horizon]");
    }
    ReplicaEnsemble e;
    e.config = cfg;
    e.times = options.times;
    for (const auto& o : observables) e.observable_ids.push_back(o.id);
    const double mu = cfg.mu();

    std::vector<ReplicaRecord> out(cfg.replicas);
    auto one = [&](std::size_t slot) {
        ReplicaRecord& rec = out[slot];
        rec.replica = options.first_replica + slot;
        rec.values.assign(observables.size(), std::vector<double>(options.times.size(), 0.0));
        try {
            Philox rng(cfg.seed, rec.replica);
            SampleInfo info;
            auto s0 = sample_grand_canonical(cfg, rng, &info);
            rec.initial_particles = s0.particles.size();
            rec.attempts = info.attempts;
            auto record = [&](std::size_t k, const hs::SystemState& st) {
                for (std::size_t o = 0; o < observables.size(); ++o) rec.values[o][k] = observables[o].eval(st, mu);
                if (options.keep_snapshots) rec.snapshots.push_back(st);
            };
            if (cfg.diameter == 0.0) {
                for (std::size_t k = 0; k < options.times.size(); ++k) {
                    auto st = hs::free_flow(s0, options.times[k]);
                    st.time = options.times[k];
                    record(k, st);
                }
            } else {
                hs::Engine eng(std::move(s0));
                for (std::size_t k = 0; k < options.times.size(); ++k) {
                    rec.collisions += eng.advance(options.times[k]);
                    record(k, eng.state());
                }
            }
        } catch (const std::exception& ex) {
            rec.failed = true;
            rec.error = ex.what();
            rec.snapshots.clear();
        }
    };

    const int nt = std::max(1, std::min<int>(options.threads, static_cast<int>(cfg.replicas)));
    if (nt == 1) {
        for (std::size_t r = 0; r < cfg.replicas; ++r) one(r);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> pool;
        for (int w = 0; w < nt; ++w)
            pool.emplace_back([&] {
                for (std::size_t r; (r = next.fetch_add(1)) < cfg.replicas;) one(r);
            });
        for (auto& th : pool) th.join();
    }
    for (auto& r : out) e.records.emplace(r.replica, std::move(r));
    return e;
}

void write_observable_csv(std::ostream& os, const ReplicaEnsemble& e, const std::string& id) {
    const auto o = e.observable_index(id);
    os << "replica,time,value\n";
    char buf[64];
    for (const auto& [rid, r] : e.records) {
        if (r.failed) continue;
        for (std::size_t k = 0; k < e.times.size(); ++k) {
            std::snprintf(buf, sizeof buf, "%.17g,%.17g", e.times[k], r.values[o][k]);
            os << rid << ',' << buf << '\n';
        }
    }
}

std::string metadata_json(const ReplicaEnsemble& e) {
    nlohmann::ordered_json j;
    const auto& c = e.config;
    j["dimension"] = c.dimension;
    j["diameter"] = c.diameter;
    j["intensity"] = c.mu();
    j["law"] = {{"profile", c.law.name()}, {"beta", c.law.beta}, {"separation", c.law.separation}, {"mass", c.law.mass}};
    j["horizon"] = c.horizon;
    j["seed"] = c.seed;
    j["generator"] = Philox::kName;
    j["stream_rule"] = "stream = replica id";
    j["times"] = e.times;
    j["observables"] = e.observable_ids;
    j["replicas"] = e.size();
    j["failed"] = e.failed();
    nlohmann::ordered_json errs = nlohmann::ordered_json::array();
    for (const auto& [id, r] : e.records)
        if (r.failed) errs.push_back({{"replica", id}, {"error", r.error}});
    j["failures"] = errs;
    return j.dump(2);
}

}  // namespace bglab::ens
