#include "doctest.h"

#include <cmath>
#include <random>
#include <sstream>

#include "bglab/hardsphere.hpp"
#include "oracles.hpp"

using namespace bglab::hs;

TEST_CASE("scattering law") {
    auto [a, b] = scatter({1, 0, 0}, {-1, 0, 0}, {1, 0, 0});
    CHECK(a[0] == doctest::Approx(-1.0));
    CHECK(b[0] == doctest::Approx(1.0));
    auto [c, e] = scatter({0, 1, 0}, {0, -1, 0}, {1, 0, 0});
    CHECK(c == Vec{0, 1, 0});
    CHECK(e == Vec{0, -1, 0});
    CHECK_THROWS(scatter({1, 0, 0}, {0, 0, 0}, {1.0, 1e-5, 0}));

    std::mt19937_64 rng(3);
    std::normal_distribution<double> G;
    for (int trial = 0; trial < 1000; ++trial) {
        Vec v{G(rng), G(rng), G(rng)}, w{G(rng), G(rng), G(rng)}, om{G(rng), G(rng), G(rng)};
        om = (1.0 / norm(om)) * om;
        auto [vp, wp] = scatter(v, w, om);
        const double e0 = dot(v, v) + dot(w, w);
        CHECK(std::abs(dot(vp, vp) + dot(wp, wp) - e0) <= 1e-12 * e0);
        for (int k = 0; k < 3; ++k) CHECK(std::abs(vp[k] + wp[k] - v[k] - w[k]) <= 1e-12 * (1 + std::abs(v[k] + w[k])));
        auto [v2, w2] = scatter(vp, wp, om);
        for (int k = 0; k < 3; ++k) {
            CHECK(v2[k] == doctest::Approx(v[k]).epsilon(1e-12));
            CHECK(w2[k] == doctest::Approx(w[k]).epsilon(1e-12));
        }
    }
}

TEST_CASE("pair prediction") {
    const double eps = 0.01;
    ParticleState a{{0.2, 0.5, 0}, {1, 0, 0}, 0}, b{{0.2 + 3 * eps, 0.5, 0}, {0, 0, 0}, 0};
    auto t = predict_pair_collision(a, b, eps, 1.0, 2);
    REQUIRE(t);
    CHECK(*t == doctest::Approx(2 * eps).epsilon(1e-12));

    ParticleState r{{0.2, 0.5, 0}, {-1, 0, 0}, 0};
    CHECK_FALSE(predict_pair_collision(r, b, eps, 0.5, 2));
    // over a full period the receding particle meets the periodic image
    CHECK(predict_pair_collision(r, b, eps, 1.0, 2));

    ParticleState p{{0.99, 0.5, 0}, {1, 0, 0}, 0}, q{{0.01, 0.5, 0}, {0, 0, 0}, 0};
    auto tw = predict_pair_collision(p, q, 0.005, 1.0, 2);
    REQUIRE(tw);
    CHECK(*tw == doctest::Approx(0.015).epsilon(1e-10));

    // horizon limits the search
    CHECK_FALSE(predict_pair_collision(a, b, eps, eps, 2));
    ParticleState o{{0.2 + 0.5 * eps, 0.5, 0}, {0, 0, 0}, 0};
    CHECK_THROWS(predict_pair_collision(a, o, eps, 1.0, 2));
    // a long horizon reaches the contact after several wraps
    ParticleState far{{0.5, 0.5 + 2.5 * eps, 0}, {0, 0, 0}, 0}, mover{{0.1, 0.5, 0}, {0, 1.0 / 3.0, 0}, 0};
    auto tl = predict_pair_collision(mover, far, eps, 5.0, 2);
    CHECK_FALSE(tl);
    ParticleState mover2{{0.1, 0.5, 0}, {1.0, 0.5 * eps, 0}, 0};
    auto tl2 = predict_pair_collision(mover2, far, eps, 10.0, 2);
    CHECK(tl2);
}

TEST_CASE("free flow") {
    SystemState s;
    s.diameter = 0.01;
    s.particles.push_back({{0.3, 0.4, 0}, {1, 0, 0}, 0});
    CHECK(free_flow(s, 0.0).particles[0].position == s.particles[0].position);
    auto full = free_flow(s, 1.0);
    CHECK(full.particles[0].position[0] == doctest::Approx(0.3));
    s.particles[0].velocity = {0.5, 0, 0};
    CHECK(free_flow(s, 0.5).particles[0].position[0] == doctest::Approx(0.55));
}

TEST_CASE("advance: trivial and two-body cases") {
    SystemState empty;
    empty.diameter = 0.01;
    auto out = advance(empty, 2.0);
    CHECK(out.log.empty());
    CHECK(out.state.time == 2.0);

    const double eps = 0.01;
    SystemState s;
    s.diameter = eps;
    s.particles.push_back({{0.2, 0.5, 0}, {1, 0, 0}, 0});
    s.particles.push_back({{0.2 + 3 * eps, 0.5, 0}, {0, 0, 0}, 0});
    auto two = advance(s, 0.05);
    REQUIRE(two.log.size() == 1);
    CHECK(two.log[0].time == doctest::Approx(2 * eps).epsilon(1e-12));
    CHECK(two.state.particles[0].velocity[0] == doctest::Approx(0.0));
    CHECK(two.state.particles[1].velocity[0] == doctest::Approx(1.0));
    CHECK(two.state.particles[1].position[0] == doctest::Approx(0.2 + 3 * eps + 0.05 - 2 * eps));
    std::ostringstream os;
    write_event_log(os, two.log, 2);
    CHECK(os.str().rfind("time,i,j,omega1,omega2\n", 0) == 0);
    std::ostringstream snap;
    write_snapshot(snap, two.state);
    CHECK(snap.str().rfind("id,x1,x2,v1,v2\n", 0) == 0);
}

TEST_CASE("conservation over many collisions") {
    std::mt19937_64 rng(5);
    auto s = oracle::random_state(100, 0.01, 2, rng);
    const double e0 = kinetic_energy(s);
    const Vec m0 = total_momentum(s);
    Engine eng(s);
    CHECK(eng.cells_per_axis() >= 3);
    const auto done = eng.advance(1e9, nullptr, 20000);
    CHECK(done == 20000);
    const auto& st = eng.state();
    CHECK(std::abs(kinetic_energy(st) - e0) / e0 < 1e-10);
    double speed = 0;
    for (const auto& p : st.particles) speed = std::max(speed, norm(p.velocity));
    CHECK(norm(total_momentum(st) - m0) < 1e-10 * speed * 100);
    CHECK(min_pair_distance(st) >= 0.01 * (1 - 1e-9));
}

TEST_CASE("cell lists agree with all-pairs prediction") {
    std::mt19937_64 rng(9);
    for (int d : {2, 3}) {
        auto s = oracle::random_state(40, 0.06, d, rng);
        Engine a(s, true), b(s, false);
        REQUIRE(a.cells_per_axis() >= 3);
        std::vector<CollisionRecord> la, lb;
        // Rounding differs between the two schedules and the gas is chaotic, so
        // only the first 60 collisions are compared.
        a.advance(10.0, &la, 60);
        b.advance(10.0, &lb, 60);
        REQUIRE(la.size() == 60);
        REQUIRE(lb.size() == 60);
        for (std::size_t k = 0; k < la.size(); ++k) {
            CHECK(la[k].i == lb[k].i);
            CHECK(la[k].j == lb[k].j);
            CHECK(std::abs(la[k].time - lb[k].time) < (k < 30 ? 1e-9 : 1e-4));
        }
    }
}

TEST_CASE("event log matches the fine-step oracle for small N") {
    std::mt19937_64 rng(13);
    int total = 0;
    for (int trial = 0; trial < 40; ++trial) {
        const int n = 2 + trial % 3;
        auto s = oracle::random_state(n, 0.15, 2, rng);
        auto ref = oracle::brute_force_dynamics(s, 0.4);
        auto got = advance(s, 0.4).log;
        REQUIRE(got.size() == ref.size());
        for (std::size_t k = 0; k < ref.size(); ++k) {
            CHECK(got[k].i == ref[k].i);
            CHECK(got[k].j == ref[k].j);
            CHECK(std::abs(got[k].time - ref[k].time) < 1e-9);
        }
        total += static_cast<int>(ref.size());
    }
    CHECK(total > 10);
}

TEST_CASE("time reversal") {
    std::mt19937_64 rng(17);
    auto s = oracle::random_state(30, 0.05, 2, rng);
    Engine fwd(s);
    fwd.advance(1e9, nullptr, 20);
    const double tau = fwd.time();
    auto mid = fwd.state();
    for (auto& p : mid.particles) p.velocity = -1.0 * p.velocity;
    mid.time = 0.0;
    Engine back(mid);
    std::vector<CollisionRecord> log;
    back.advance(tau, &log);
    CHECK(log.size() >= 19);
    const auto& end = back.state();
    double err = 0;
    for (std::size_t i = 0; i < s.particles.size(); ++i)
        err = std::max(err, norm(minimal_image(end.particles[i].position - s.particles[i].position, 2)));
    CHECK(err < 1e-6);
}

TEST_CASE("engine rejects invalid input") {
    SystemState s;
    s.diameter = 0.0;
    CHECK_THROWS(Engine{s});
    s.diameter = 0.1;
    s.dimension = 4;
    CHECK_THROWS(Engine{s});
    s.dimension = 2;
    s.particles.push_back({{0.5, 0.5, 0}, {0, 0, 0}, 0});
    s.particles.push_back({{0.52, 0.5, 0}, {0, 0, 0}, 0});
    Engine e(s);
    CHECK_THROWS(e.advance(1.0));
}
