#include "doctest.h"

#include <cmath>
#include <cstring>
#include <random>
#include <sstream>

#include "bglab/ensemble.hpp"
#include "json.hpp"
#include "oracles.hpp"

using namespace bglab;
using namespace bglab::ens;

namespace {

struct Stat {
    double n = 0, s = 0, s2 = 0;
    void add(double x) { n += 1, s += x, s2 += x * x; }
    double mean() const { return s / n; }
    double se() const { return std::sqrt((s2 / n - mean() * mean()) / (n - 1)); }
};

// Sample moments of order 1..4 on every axis against the analytic values.
void check_moments(const InitialLaw& law, int d, int n, std::uint64_t seed) {
    Philox rng(seed, 0);
    std::vector<Stat> st(4 * d);
    for (int s = 0; s < n; ++s) {
        const Vec v = sample_velocity(law, d, rng);
        for (int a = 0; a < d; ++a) {
            double p = 1.0;
            for (int k = 1; k <= 4; ++k) st[4 * a + k - 1].add(p *= v[a]);
        }
    }
    for (int a = 0; a < d; ++a)
        for (int k = 1; k <= 4; ++k) {
            const int axis = law.kind == InitialLaw::Kind::tabulated ? 0 : a;
            CAPTURE(a);
            CAPTURE(k);
            const auto& x = st[4 * a + k - 1];
            CHECK(std::abs(x.mean() - law.moment(axis, k)) < 4.0 * x.se() + 1e-14);
        }
}

GCConfig small_config(double eps = 0.05, std::size_t R = 10) {
    GCConfig c;
    c.dimension = 2;
    c.diameter = eps;
    c.law = InitialLaw::maxwellian(1.0);
    c.horizon = 0.3;
    c.seed = 77;
    c.replicas = R;
    return c;
}

std::vector<Observable> basic_observables() {
    return {
        {"count", [](const hs::SystemState& s, double mu) { return s.particles.size() / mu; }},
        {"vx4",
         [](const hs::SystemState& s, double mu) {
             double a = 0;
             for (const auto& p : s.particles) a += std::pow(p.velocity[0], 4);
             return a / mu;
         }},
    };
}

}  // namespace

TEST_CASE("velocity laws: sample moments") {
    check_moments(InitialLaw::maxwellian(2.0), 3, 1000000, 1);
    check_moments(InitialLaw::bimodal(1.0, 3.0), 2, 1000000, 2);
    auto tri = InitialLaw::tabulated({-1.0, 0.0, 2.0}, {0.0, 1.0, 0.0}, 2.0, 0.5);
    check_moments(tri, 2, 1000000, 3);

    // bimodal is symmetric
    auto bi = InitialLaw::bimodal(1.0, 3.0);
    CHECK(bi.moment(0, 1) == 0.0);
    CHECK(bi.moment(0, 2) == doctest::Approx(1.0 + 2.25));

    Philox rng(4, 0);
    auto cold = InitialLaw::maxwellian(1e14);
    for (int k = 0; k < 1000; ++k) CHECK(hs::norm(sample_velocity(cold, 2, rng)) < 1e-5);

    CHECK_THROWS(InitialLaw::kind_from_name("kappa"));
    CHECK(InitialLaw::kind_from_name("bimodal") == InitialLaw::Kind::bimodal);
    CHECK_THROWS(InitialLaw::tabulated({0.0}, {1.0}, 1, 1));
    CHECK_THROWS(InitialLaw::tabulated({0.0, 1.0}, {1.0, -1.0}, 1, 1));
}

TEST_CASE("velocity laws: densities and envelopes") {
    // density integrates to mass on a fine grid
    for (auto law : {InitialLaw::maxwellian(1.5, 2.0), InitialLaw::bimodal(2.0, 2.0, 0.5)}) {
        double s = 0.0;
        const double h = 0.02;
        for (double x = -8; x < 8; x += h)
            for (double y = -8; y < 8; y += h) s += law.density({x + h / 2, y + h / 2, 0}, 2) * h * h;
        CHECK(s == doctest::Approx(law.mass).epsilon(1e-6));
    }
    Philox rng(5, 0);
    CHECK(envelope_ratio(InitialLaw::maxwellian(1.0), 2, rng) <= 1.0 + 1e-12);
    CHECK(envelope_ratio(InitialLaw::bimodal(1.0, 4.0), 3, rng) <= 1.0 + 1e-12);
    auto tri = InitialLaw::tabulated({-1.0, 0.0, 2.0}, {0.0, 1.0, 0.0}, 0.5, 0.5);
    CHECK(envelope_ratio(tri, 2, rng) <= 1.0);
    auto bad = InitialLaw::tabulated({-1.0, 0.0, 2.0}, {0.0, 1.0, 0.0}, 0.1, 0.5);
    CHECK(envelope_ratio(bad, 2, rng) > 1.0);
}

TEST_CASE("grand-canonical sampler: trivial cases and validation") {
    auto c = small_config();
    c.law.mass = 0.0;
    Philox rng(1, 0);
    for (int k = 0; k < 20; ++k) CHECK(sample_grand_canonical(c, rng).particles.empty());

    c = small_config();
    c.diameter = 0.2;
    c.intensity = 200.0;
    CHECK(expected_acceptance(c) < 1e-3);
    CHECK_THROWS_AS(sample_grand_canonical(c, rng), std::domain_error);
    c.dimension = 4;
    CHECK_THROWS(sample_grand_canonical(c, rng));

    // ideal gas: N is Poisson
    c = small_config(0.0);
    c.intensity = 30.0;
    Stat n;
    for (int k = 0; k < 4000; ++k) n.add(sample_grand_canonical(c, rng).particles.size());
    CHECK(std::abs(n.mean() - 30.0) < 4.0 * std::sqrt(30.0 / 4000));

    // samples respect the exclusion
    c = small_config(0.01);
    for (int k = 0; k < 20; ++k) {
        auto s = sample_grand_canonical(c, rng);
        if (s.particles.size() > 1) CHECK(hs::min_pair_distance(s) >= 0.01);
        for (const auto& p : s.particles)
            for (int a = 0; a < 2; ++a) CHECK((p.position[a] >= 0.0 && p.position[a] < 1.0));
    }
}

TEST_CASE("grand-canonical sampler: mean particle number against an independent rejection oracle") {
    const double mu = 200.0, eps = 1.0 / 200.0;
    GCConfig c;
    c.dimension = 2;
    c.diameter = eps;
    c.law = InitialLaw::maxwellian(1.0);
    const int draws = 5000;

    Philox rng(11, 0);
    Stat got;
    for (int k = 0; k < draws; ++k) got.add(sample_grand_canonical(c, rng).particles.size());

    // oracle: independent generator, brute-force exclusion, acceptance-weighted N
    std::mt19937_64 g(99);
    std::poisson_distribution<int> P(mu);
    std::uniform_real_distribution<double> U(0.0, 1.0);
    Stat ref;
    std::vector<std::array<double, 2>> x;
    while (ref.n < draws) {
        const int n = P(g);
        x.clear();
        bool ok = true;
        for (int i = 0; i < n && ok; ++i) {
            std::array<double, 2> p{U(g), U(g)};
            for (const auto& q : x) {
                double r2 = 0;
                for (int a = 0; a < 2; ++a) {
                    double dd = std::abs(p[a] - q[a]);
                    dd = std::min(dd, 1.0 - dd);
                    r2 += dd * dd;
                }
                if (r2 < eps * eps) {
                    ok = false;
                    break;
                }
            }
            x.push_back(p);
        }
        if (ok) ref.add(n);
    }
    CAPTURE(got.mean());
    CAPTURE(ref.mean());
    CHECK(std::abs(got.mean() - ref.mean()) < 3.0 * std::hypot(got.se(), ref.se()));
    // the exclusion is visible: E N ~ mu (1 - mu pi eps^2)
    CHECK(got.mean() < mu - 4.0 * got.se());
}

TEST_CASE("grand-canonical sampler: tiny-instance configuration-size law") {
    const double lambda = 1.5, eps = 0.2;
    GCConfig c;
    c.dimension = 2;
    c.diameter = eps;
    c.intensity = lambda;
    c.law = InitialLaw::maxwellian(1.0);
    const auto p = oracle::tiny_instance_law(lambda, eps);
    Philox rng(21, 0);
    std::array<double, 4> cnt{};
    double kept = 0;
    for (int k = 0; k < 60000; ++k) {
        const auto n = sample_grand_canonical(c, rng).particles.size();
        if (n <= 3) cnt[n] += 1, kept += 1;
    }
    for (int k = 0; k < 4; ++k) {
        const double f = cnt[k] / kept;
        CAPTURE(k);
        CAPTURE(f);
        CAPTURE(p[k]);
        CHECK(std::abs(f - p[k]) < 4.0 * std::sqrt(p[k] * (1 - p[k]) / kept));
    }
    // the ideal-gas law is rejected at this sample size
    const double poisson2 = lambda * lambda / 2 / (1 + lambda + lambda * lambda / 2 + lambda * lambda * lambda / 6);
    CHECK(std::abs(cnt[2] / kept - poisson2) > 4.0 * std::sqrt(poisson2 * (1 - poisson2) / kept));
}

TEST_CASE("run_replicas: metadata-only, determinism, threads") {
    auto c = small_config(0.05, 1);
    RunOptions opt;
    opt.times = {0.0};
    auto e = run_replicas(c, {}, opt);
    CHECK(e.size() == 1);
    CHECK(e.observable_ids.empty());
    auto meta = nlohmann::json::parse(metadata_json(e));
    CHECK(meta["generator"] == Philox::kName);
    CHECK(meta["replicas"] == 1);

    c.replicas = 12;
    opt.times = {0.0, 0.1, 0.3};
    opt.keep_snapshots = true;
    auto a = run_replicas(c, basic_observables(), opt);
    auto b = run_replicas(c, basic_observables(), opt);
    opt.threads = 3;
    auto t = run_replicas(c, basic_observables(), opt);
    for (const auto* other : {&b, &t}) {
        REQUIRE(other->size() == a.size());
        for (const auto& [id, r] : a.records) {
            const auto& q = other->records.at(id);
            CHECK(r.values == q.values);
            REQUIRE(r.snapshots.size() == q.snapshots.size());
            for (std::size_t k = 0; k < r.snapshots.size(); ++k) {
                REQUIRE(r.snapshots[k].particles.size() == q.snapshots[k].particles.size());
                for (std::size_t i = 0; i < r.snapshots[k].particles.size(); ++i) {
                    CHECK(std::memcmp(&r.snapshots[k].particles[i].position, &q.snapshots[k].particles[i].position,
                                      sizeof(Vec)) == 0);
                    CHECK(std::memcmp(&r.snapshots[k].particles[i].velocity, &q.snapshots[k].particles[i].velocity,
                                      sizeof(Vec)) == 0);
                }
            }
        }
    }
    CHECK(a.snapshots(0.3).size() == 12);
    CHECK(a.snapshots(0.3)[0]->time == doctest::Approx(0.3));
    CHECK_THROWS(a.values("count", 0.2));
    CHECK_THROWS(a.values("nope", 0.1));

    std::ostringstream csv;
    write_observable_csv(csv, a, "count");
    const auto text = csv.str();
    CHECK(text.rfind("replica,time,value\n", 0) == 0);
    CHECK(std::count(text.begin(), text.end(), '\n') == 1 + 12 * 3);

    opt.times = {0.2, 0.1};
    CHECK_THROWS(run_replicas(c, {}, opt));
    opt.times = {0.5};
    CHECK_THROWS(run_replicas(c, {}, opt));
}

TEST_CASE("run_replicas: split and merge equals a single run") {
    auto c = small_config(0.05, 100);
    RunOptions opt;
    opt.times = {0.0, 0.2};
    auto whole = run_replicas(c, basic_observables(), opt);
    c.replicas = 60;
    auto first = run_replicas(c, basic_observables(), opt);
    c.replicas = 40;
    opt.first_replica = 60;
    auto second = run_replicas(c, basic_observables(), opt);

    auto ab = first, ba = second;
    ab.merge(second);
    ba.merge(first);
    for (const auto* m : {&ab, &ba}) {
        REQUIRE(m->size() == 100);
        for (const char* id : {"count", "vx4"})
            for (double t : {0.0, 0.2}) {
                const auto x = m->values(id, t), y = whole.values(id, t);
                CHECK(x == y);
                double sx = 0, sy = 0;
                for (double v : x) sx += v;
                for (double v : y) sy += v;
                CHECK(sx == sy);
            }
    }
    CHECK_THROWS(ab.merge(first));
    auto other = second;
    other.config.seed = 5;
    auto base = first;
    CHECK_THROWS(base.merge(other));
}

TEST_CASE("run_replicas: failed replicas are recorded and excluded") {
    auto c = small_config(0.05, 20);
    RunOptions opt;
    opt.times = {0.0};
    std::vector<Observable> obs{{"picky", [](const hs::SystemState& s, double) {
                                    if (s.particles.size() % 2) throw std::runtime_error("odd");
                                    return 1.0;
                                }}};
    auto e = run_replicas(c, obs, opt);
    CHECK(e.size() == 20);
    CHECK(e.failed() > 0);
    CHECK(e.failed() < 20);
    CHECK(e.values("picky", 0.0).size() == 20 - e.failed());
    auto meta = nlohmann::json::parse(metadata_json(e));
    CHECK(meta["failed"] == e.failed());
    CHECK(meta["failures"][0]["error"] == "odd");
}

TEST_CASE("equilibrium stationarity of velocity moments") {
    GCConfig c;
    c.dimension = 2;
    c.diameter = 0.02;  // mu = 50
    c.law = InitialLaw::maxwellian(1.0);
    c.horizon = 1.0;
    c.seed = 3;
    c.replicas = 400;
    std::vector<Observable> obs;
    for (int k = 1; k <= 4; ++k)
        obs.push_back({"vx" + std::to_string(k), [k](const hs::SystemState& s, double mu) {
                           double a = 0;
                           for (const auto& p : s.particles) a += std::pow(p.velocity[0], k);
                           return a / mu;
                       }});
    RunOptions opt;
    opt.times = {0.0, 1.0};
    auto e = run_replicas(c, obs, opt);
    REQUIRE(e.failed() == 0);
    std::size_t collisions = 0;
    for (const auto& [id, r] : e.records) collisions += r.collisions;
    CHECK(collisions > 400 * 20);
    for (int k = 1; k <= 4; ++k) {
        const auto a = e.values("vx" + std::to_string(k), 0.0), b = e.values("vx" + std::to_string(k), 1.0);
        Stat diff;
        for (std::size_t r = 0; r < a.size(); ++r) diff.add(b[r] - a[r]);
        CAPTURE(k);
        CHECK(std::abs(diff.mean()) < 3.0 * diff.se());
    }
}
