// Acceptance gate: one PASS/FAIL line per criterion. Exit status 1 if any fails.

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

#include "bglab/combinatorics.hpp"
#include "bglab/duhamel.hpp"
#include "bglab/kinetic.hpp"
#include "bglab/observables.hpp"
#include "experiment.hpp"
#include "oracles.hpp"

using namespace bglab;
using hs::Vec;
using hs::operator-;
using hs::operator*;
using kin::VectorXd;
using kin::VelocityGrid;

namespace {

struct Outcome {
    bool pass = true;
    std::ostringstream detail;

    void require(bool ok, const std::string& what) {
        if (!ok) {
            pass = false;
            detail << "[failed: " << what << "] ";
        }
    }
};

double mean(const std::vector<double>& x) { return obs::pairwise_sum(x.data(), x.size()) / x.size(); }

double stderr_of(const std::vector<double>& x) {
    const double m = mean(x);
    double s = 0.0;
    for (double y : x) s += (y - m) * (y - m);
    return std::sqrt(s / (x.size() - 1) / x.size());
}

double Phi(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---- 1 ------------------------------------------------------------------------

comb::ConnectionRelation relation_from(comb::EdgeMask e, int n) {
    comb::ConnectionRelation rel(n);
    for (int k = 0; k < comb::pair_count(n); ++k)
        if ((e >> k) & 1u) {
            auto [i, j] = comb::pair_of_index(k, n);
            rel.connect(i, j);
        }
    return rel;
}

void criterion1(Outcome& o) {
    const auto t0 = std::chrono::steady_clock::now();
    using comb::Integer;
    for (int n = 2; n <= 7; ++n) {
        const auto trees = comb::enumerate_trees(n);
        o.require(Integer(trees.size()) == boost::multiprecision::pow(Integer(n), n - 2), "Cayley n=" + std::to_string(n));
        if (n < 3) continue;
        std::map<std::vector<int>, long long> by_degree;
        for (const auto& t : trees) {
            std::vector<int> deg(n, 0);
            for (auto [u, v] : t.edges) ++deg[u], ++deg[v];
            ++by_degree[deg];
        }
        for (const auto& [deg, cnt] : by_degree)
            o.require(comb::count_trees_with_degrees(deg) == cnt, "degree count n=" + std::to_string(n));
        // every degree sequence with d_i >= 1 summing to 2n-2 occurs: C(2n-3, n-1) of them
        Integer comps = 1;
        for (int k = 0; k < n - 1; ++k) comps = comps * (2 * n - 3 - k) / (k + 1);
        o.require(Integer(by_degree.size()) == comps, "degree sequences n=" + std::to_string(n));
    }
    for (int n = 2; n <= 10; ++n) {
        const auto [a, b] = comb::combinatorial_identity_sums(n);
        o.require(a == 0 && b == 0, "identity sums n=" + std::to_string(n));
    }
    std::mt19937_64 rng(101);
    for (int trial = 0; trial < 100; ++trial) {
        const int n = 1 + static_cast<int>(rng() % 8);
        comb::MomentFamily G(n);
        for (comb::Mask s = 1; s < (comb::Mask{1} << n); ++s)
            G[s] = comb::Rational(static_cast<long long>(rng() % 41) - 20, 1 + static_cast<long long>(rng() % 9));
        o.require(comb::cumulants_to_moments(comb::moments_to_cumulants(G)) == G, "moment->cumulant->moment");
        o.require(comb::moments_to_cumulants(comb::cumulants_to_moments(G)) == G, "cumulant->moment->cumulant");
    }
    const double secs = seconds_since(t0);
    o.require(secs < 60.0, "runtime < 60 s");
    o.detail << "Cayley and degree counts n<=7, identity sums n<=10, 100+100 round trips; " << secs << " s";
}

// ---- 2 ------------------------------------------------------------------------

void criterion2(Outcome& o) {
    const auto t0 = std::chrono::steady_clock::now();
    std::mt19937_64 rng(202);
    long long subgraphs = 0;
    int fibers_ok = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        const int n = 2 + trial % 5;
        const comb::EdgeMask all = (comb::EdgeMask{1} << comb::pair_count(n)) - 1;
        const comb::EdgeMask e = trial < 5 ? all : (rng() & all);  // include the complete graphs
        const auto rel = relation_from(e, n);
        const comb::Rational phi = comb::truncated_function(rel);
        o.require(abs(phi) <= comb::tree_inequality_bound(rel), "tree inequality");
        o.require(phi == comb::disconnection_family(rel)[(comb::Mask{1} << n) - 1], "phi equals the cumulant");
        // Penrose partition of the connected subgraphs of rel into intervals [T, T + (E'(T) & rel)]
        std::map<comb::EdgeMask, long long> hits;
        long long connected = 0;
        bool interval = true;
        for (comb::EdgeMask g = e;; g = (g - 1) & e) {
            if (comb::graph_connected(g, n)) {
                ++connected;
                const auto T = comb::tree_edges(comb::penrose_map(g, n, 0));
                const auto esc = comb::penrose_escape_edges(comb::penrose_map(g, n, 0), 0);
                interval &= (T & ~g) == 0 && (g & ~(T | esc)) == 0;
                ++hits[T];
            }
            if (g == 0) break;
        }
        long long total = 0;
        for (const auto& [T, cnt] : hits) {
            const auto esc = comb::penrose_escape_edges(comb::tree_from_edges(T, n), 0);
            interval &= cnt == (1LL << std::popcount(esc & e));
            total += cnt;
        }
        o.require(interval && total == connected, "Penrose fibers");
        // the alternating sum over connected subgraphs collapses onto the fibers of size 1
        long long trees_avoiding = 0;
        for (const auto& [T, cnt] : hits)
            if (cnt == 1) ++trees_avoiding;
        o.require(phi == comb::Rational((n % 2 ? 1 : -1) * trees_avoiding), "Penrose resummation");
        subgraphs += connected;
        fibers_ok += interval;
    }
    const double secs = seconds_since(t0);
    o.require(secs < 120.0, "runtime < 120 s");
    o.detail << "1000 relations n<=6, " << subgraphs << " connected subgraphs, " << fibers_ok
             << " interval partitions; " << secs << " s";
}

// ---- 3 ------------------------------------------------------------------------

void criterion3(Outcome& o) {
    std::mt19937_64 rng(303);
    auto s = oracle::random_state(100, 0.01, 2, rng);
    const double e0 = hs::kinetic_energy(s);
    const Vec p0 = hs::total_momentum(s);
    double scale = 0.0;
    for (const auto& p : s.particles) scale += hs::norm(p.velocity);
    hs::Engine eng(s);
    const auto done = eng.advance(1e12, nullptr, 100000);
    const auto& st = eng.state();
    const double de = std::abs(hs::kinetic_energy(st) - e0) / e0;
    const double dp = hs::norm(hs::total_momentum(st) - p0) / scale;
    const double gap = hs::min_pair_distance(st);
    o.require(done == 100000, "10^5 collisions");
    o.require(de < 1e-8, "energy drift");
    o.require(dp < 1e-10, "momentum drift");
    o.require(gap >= 0.01 * (1 - 1e-9), "no overlap");
    o.detail << "energy " << de << ", momentum " << dp << " (relative to sum |v|), min gap/eps " << gap / 0.01 << "; ";

    int matched = 0;
    std::size_t events = 0;
    double worst = 0.0;
    for (int trial = 0; trial < 500; ++trial) {
        const int n = 2 + trial % 3;
        const auto init = oracle::random_state(n, 0.15, 2, rng);
        const auto ref = oracle::brute_force_dynamics(init, 0.3);
        const auto got = hs::advance(init, 0.3).log;
        bool same = got.size() == ref.size();
        for (std::size_t k = 0; same && k < ref.size(); ++k) {
            same = got[k].i == ref[k].i && got[k].j == ref[k].j && std::abs(got[k].time - ref[k].time) < 1e-9;
            worst = std::max(worst, std::abs(got[k].time - ref[k].time));
        }
        matched += same;
        events += ref.size();
    }
    o.require(matched == 500, "event logs match the bisection oracle");
    o.detail << matched << "/500 oracle logs (" << events << " events, worst dt " << worst << "); ";

    auto r0 = oracle::random_state(30, 0.05, 2, rng);
    hs::Engine fwd(r0);
    fwd.advance(1e9, nullptr, 20);
    const double tau = fwd.time();
    auto mid = fwd.state();
    for (auto& p : mid.particles) p.velocity = -1.0 * p.velocity;
    mid.time = 0.0;
    hs::Engine back(mid);
    back.advance(tau);
    double err = 0.0;
    for (std::size_t i = 0; i < r0.particles.size(); ++i)
        err = std::max(err, hs::norm(hs::minimal_image(back.state().particles[i].position - r0.particles[i].position, 2)));
    o.require(err < 1e-6, "time reversal");
    o.detail << "reversal error " << err;
}

// ---- 4 ------------------------------------------------------------------------

void criterion4(Outcome& o) {
    ens::GCConfig c;
    c.dimension = 2;
    c.intensity = 200.0;
    c.diameter = 1.0 / 200.0;
    c.law = ens::InitialLaw::maxwellian(1.0);
    c.replicas = 2000;
    c.seed = 404;
    const Vec center{0.5, -0.3, 0.0};
    const double w = 0.8;
    const Vec lo{-0.5, -1.0, -1.0}, hi{1.0, 0.7, 1.0};
    struct Case {
        obs::TestFunction h;
        double exact;  // int h^2 f0
    };
    auto bump_sq = [&](double ca) { return std::exp(-ca * ca / (w * w + 2.0)) / std::sqrt(1.0 + 2.0 / (w * w)); };
    const std::vector<Case> cases{
        {obs::TestFunction::polynomial({{1.0, {2, 0, 0}}}, c.law.beta0), 3.0},
        {obs::TestFunction::gaussian_bump(center, w), bump_sq(center[0]) * bump_sq(center[1])},
        {obs::TestFunction::indicator_box(lo, hi), (Phi(hi[0]) - Phi(lo[0])) * (Phi(hi[1]) - Phi(lo[1]))}};
    std::vector<ens::Observable> observables;
    for (std::size_t k = 0; k < cases.size(); ++k) observables.push_back(obs::pi_observable(cases[k].h, std::to_string(k)));
    ens::RunOptions ro;
    ro.times = {0.0};
    const auto e = ens::run_replicas(c, observables, ro);
    for (std::size_t k = 0; k < cases.size(); ++k) {
        const auto pi = e.values(std::to_string(k), 0.0);
        const auto var = obs::covariance(pi, pi, c.mu());  // Var zeta_0(h)
        const bool ok = std::abs(var.value - cases[k].exact) < 3.0 * var.se;
        o.require(ok, "Var zeta_0 of " + cases[k].h.name);
        o.detail << cases[k].h.name << " " << var.value << "+-" << var.se << " vs " << cases[k].exact << "; ";
    }

    const double lambda = 1.5, eps = 0.2;
    ens::GCConfig tiny;
    tiny.dimension = 2;
    tiny.diameter = eps;
    tiny.intensity = lambda;
    tiny.law = ens::InitialLaw::maxwellian(1.0);
    const auto p = oracle::tiny_instance_law(lambda, eps);
    Philox rng(405, 0);
    std::array<double, 4> cnt{};
    double kept = 0.0;
    for (int k = 0; k < 60000; ++k) {
        const auto n = ens::sample_grand_canonical(tiny, rng).particles.size();
        if (n <= 3) cnt[n] += 1, kept += 1;
    }
    double worst = 0.0;
    for (int k = 0; k < 4; ++k)
        worst = std::max(worst, std::abs(cnt[k] / kept - p[k]) / std::sqrt(p[k] * (1 - p[k]) / kept));
    o.require(worst < 4.0, "tiny-instance law");
    o.detail << "tiny instance worst deviation " << worst << " se";
}

// ---- 5 ------------------------------------------------------------------------

void criterion5(Outcome& o) {
    const auto law = ens::InitialLaw::bimodal(1.0, 2.5);
    const std::vector<double> times{0.25, 0.5, 1.0};
    ens::GCConfig c;
    c.dimension = 2;
    c.diameter = 0.002;  // mu = 500
    c.law = law;
    c.horizon = 1.0;
    c.replicas = 100;
    c.seed = 505;
    const auto vx2 = obs::TestFunction::polynomial({{1.0, {2, 0, 0}}}, law.beta0);
    ens::RunOptions ro;
    ro.times = times;
    const auto e = ens::run_replicas(c, {obs::pi_observable(vx2, "vx2"), obs::pi_observable(obs::TestFunction::constant(1.0), "n")}, ro);
    o.require(e.failed() == 0, "no failed replicas");

    VelocityGrid g(2, 24, 6.0);
    const auto path = kin::solve_boltzmann(g, kin::discretize(g, law), 1.0, 0.025);
    const VectorXd x2 = kin::monomial(g, 0, 2);

    std::vector<std::vector<double>> ds(times.size());
    for (int r = 0; r < 4; ++r) {
        const auto res = kin::dsmc_relax(law, 2, 10000, times, 1.2, 510 + r);
        for (std::size_t k = 0; k < times.size(); ++k) {
            double s = 0.0;
            for (const auto& v : res.velocities[k]) s += v[0] * v[0];
            ds[k].push_back(s / res.velocities[k].size());
        }
    }
    o.detail << "mu " << c.mu() << ": ";
    for (std::size_t k = 0; k < times.size(); ++k) {
        const auto a = e.values("vx2", times[k]), n = e.values("n", times[k]);
        std::vector<double> ratio(a.size());
        for (std::size_t r = 0; r < a.size(); ++r) ratio[r] = a[r] / n[r];
        const double sim = mean(ratio), se = stderr_of(ratio);
        const double grid = kin::inner(g, path.at(times[k]), x2) / kin::integrate(g, path.at(times[k]));
        const double dsmc = mean(ds[k]), dse = stderr_of(ds[k]);
        o.require(std::abs(sim - grid) < 3.0 * se + 0.05 * grid, "particles vs grid at t=" + std::to_string(times[k]));
        o.require(std::abs(sim - dsmc) < 3.0 * std::hypot(se, dse) + 0.05 * dsmc,
                  "particles vs DSMC at t=" + std::to_string(times[k]));
        o.detail << "t=" << times[k] << " sim " << sim << "+-" << se << " grid " << grid << " dsmc " << dsmc << "+-"
                 << dse << "; ";
    }
}

// ---- 6 ------------------------------------------------------------------------

void criterion6(Outcome& o) {
    std::vector<double> res;
    for (int M : {8, 16, 32}) {
        VelocityGrid g(2, M, 6.0);
        res.push_back(g.weight() * kin::collision_operator(g, kin::maxwellian(g, 1.0)).cwiseAbs().sum());
    }
    const double order = std::log2(res[0] / res[2]) / 2.0;
    o.require(res[1] < res[0] && res[2] < res[1] && order > 2.5, "Q(M,M) order");
    o.detail << "|Q(M,M)| " << res[0] << " " << res[1] << " " << res[2] << " (order " << order << "); ";

    VelocityGrid g(2, 16, 6.0);
    const auto path = kin::solve_boltzmann(g, kin::discretize(g, ens::InitialLaw::bimodal(1.0, 2.5)), 3.0, 0.05);
    double worst = -hs::kInf;
    for (std::size_t k = 1; k < path.H.size(); ++k)
        worst = std::max(worst, (path.H[k] - path.H[k - 1]) / (path.times[k] - path.times[k - 1]));
    o.require(worst <= 1e-8, "H nonincreasing");
    o.detail << "max dH/dt " << worst << "; ";

    VelocityGrid gl(2, 12, 5.0);
    Philox rng(606, 0);
    VectorXd f = kin::maxwellian(gl, 0.8), phi(gl.size()), psi(gl.size());
    for (Eigen::Index i = 0; i < f.size(); ++i)
        f[i] *= 0.5 + rng.uniform(), phi[i] = rng.uniform() - 0.5, psi[i] = rng.uniform() - 0.5;
    const double scale = kin::collision_frequency(gl, f) * 25.0;
    double inv = 0.0;
    for (int a = -1; a < 2; ++a)
        inv = std::max(inv, kin::linearized_adjoint(gl, f, a < 0 ? kin::monomial(gl, -1, 2) : kin::monomial(gl, a, 1))
                                .cwiseAbs()
                                .maxCoeff());
    inv = std::max(inv, kin::linearized_adjoint(gl, f, VectorXd::Ones(gl.size())).cwiseAbs().maxCoeff());
    o.require(inv < 1e-12 * scale, "L* annihilates invariants");
    const double lhs = kin::inner(gl, kin::linearized(gl, f, phi), psi);
    const double rhs = kin::inner(gl, phi, kin::linearized_adjoint(gl, f, psi));
    const double adj = std::abs(lhs - rhs) / (std::abs(lhs) + 1.0);
    o.require(adj < 1e-10, "adjointness");
    o.detail << "|L* invariants| " << inv / scale << " (relative), adjointness " << adj << "; ";

    std::vector<double> rn;
    for (int M : {8, 16, 32}) {
        VelocityGrid gg(2, M, 6.0);
        const auto R = kin::recollision_matrix(gg, kin::maxwellian(gg, 1.0));
        rn.push_back(gg.weight() * gg.weight() * R.cwiseAbs().sum());
        o.require((R - R.transpose()).cwiseAbs().maxCoeff() < 1e-15, "R symmetric");
    }
    o.require(rn[1] < rn[0] / 3.0 && rn[2] < rn[1] / 3.0, "R(M,M) vanishes under refinement");
    o.detail << "|R(M,M)| " << rn[0] << " " << rn[1] << " " << rn[2];
}

// ---- 7 ------------------------------------------------------------------------

void criterion7(Outcome& o) {
    VelocityGrid g(2, 10, 5.0);
    const VectorXd M = kin::maxwellian(g, 1.0);
    const std::vector<std::pair<std::string, VectorXd>> fns{{"bump", kin::bump(g, {0.4, -0.2, 0}, 1.0)},
                                                           {"vx2", kin::monomial(g, 0, 2)},
                                                           {"vxvy", kin::monomial(g, 0, 1).cwiseProduct(kin::monomial(g, 1, 1))}};
    const double dts[3] = {0.1, 0.05, 0.025};
    for (const auto& [name, phi] : fns) {
        double gap[3];
        for (int k = 0; k < 3; ++k) gap[k] = kin::fluctuation_dissipation_gap(g, M, phi, 0.5, dts[k]);
        const double ratio = (gap[0] - gap[1]) / (gap[1] - gap[2]);
        o.require(ratio > 3.5 && ratio < 4.5, "FD gap order for " + name);
        o.detail << "FD " << name << " Richardson " << ratio << "; ";
    }

    const VectorXd phi = kin::bump(g, {0.5, 0.0, 0}, 1.0), psi = kin::bump(g, {-0.3, 0.4, 0}, 1.2);
    const VectorXd f0 = kin::discretize(g, ens::InitialLaw::bimodal(1.0, 2.0));
    for (bool eq : {true, false}) {
        double resid[2];
        for (int k = 0; k < 2; ++k) {
            const double dt = dts[k + 1];
            const auto p = eq ? kin::DensityPath::constant(M, 0.3) : kin::solve_boltzmann(g, f0, 0.3, dt);
            const auto cp = kin::covariance_evolution(g, p, kin::equilibrium_covariance(g, p.f.front()), 0.3, dt);
            resid[k] = phi.dot(cp.C.back() * psi) - kin::spohn_covariance(g, p, phi, psi, 0.3, dt) -
                       kin::dual_route_defect(g, p, phi, psi, 0.3, dt);
        }
        o.require(std::abs(resid[1]) < std::abs(resid[0] - resid[1]) && std::abs(resid[1]) < 1e-4,
                  std::string("covariance routes, ") + (eq ? "equilibrium" : "relaxing"));
        o.detail << (eq ? "equilibrium" : "relaxing") << " route residual " << resid[0] << " -> " << resid[1] << "; ";
    }

    double r[2], n16 = 0.0;
    int k = 0;
    for (int Mg : {8, 16}) {
        VelocityGrid gg(2, Mg, 6.0);
        const VectorXd Mw = kin::maxwellian(gg, 1.0);
        const VectorXd b = kin::bump(gg, {0.7, -0.3, 0}, 1.0);
        r[k++] = kin::sigma_identity_residual(gg, Mw, VectorXd::Zero(gg.size()), b);
        n16 = gg.weight() * kin::sigma_apply(gg, Mw, b).cwiseAbs().sum();
    }
    o.require(r[1] < r[0] / 4.0 && r[1] < 0.1 * n16, "sigma identity residual");
    o.detail << "sigma residual " << r[0] << " -> " << r[1] << " (" << r[1] / n16 << " of |Sigma phi|)";
}

// ---- 8 ------------------------------------------------------------------------

void criterion8(Outcome& o) {
    ens::GCConfig cfg;
    cfg.dimension = 2;
    cfg.diameter = 0.002;
    cfg.law = ens::InitialLaw::bimodal(1.0, 2.5);
    cfg.seed = 808;
    const double t = 0.02;
    const auto h = obs::TestFunction::polynomial({{1.0, {2, 0, 0}}}, cfg.law.beta0);
    duh::DuhamelOptions opt;
    opt.m0 = 3;
    opt.samples = 400000;
    const auto z = duh::estimate_F1_duhamel(cfg, t, h, opt);
    VelocityGrid g(2, 32, 6.5);
    const VectorXd f0 = kin::discretize(g, cfg.law);
    const double grid = kin::inner(g, kin::solve_boltzmann(g, f0, t, t / 4).f.back(), kin::monomial(g, 0, 2));
    o.require(z.series_ratio < 0.3, "series ratio < 0.3");
    o.require(std::abs(z.value - grid) < 3.0 * z.se + z.tail_bound, "zero mode vs grid");
    o.detail << "zero mode " << z.value << "+-" << z.se << " (ratio " << z.series_ratio << ", tail " << z.tail_bound
             << ") grid " << grid << "; ";

    // m = 1 sign split against the grid collision operator
    const VectorXd q = kin::collision_operator(g, f0), x2 = kin::monomial(g, 0, 2);
    double loss = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) {
        double nu = 0.0;
        for (std::size_t j = 0; j < g.size(); ++j) nu += g.weight() * f0[j] * 2.0 * hs::norm(g.node(i) - g.node(j));
        loss += g.weight() * x2[i] * f0[i] * nu;
    }
    const double qh = kin::inner(g, q, x2);
    const auto& o1 = z.orders[1];
    o.require(std::abs(o1.value / t - qh) < 3.0 * o1.se / t, "m=1 term vs int Q h");
    o.require(std::abs(o1.positive / t - (qh + loss)) < 3.0 * o1.positive_se / t, "m=1 positive part vs gain");
    o.require(std::abs(-o1.negative / t - loss) < 3.0 * o1.negative_se / t, "m=1 negative part vs loss");
    o.detail << "m=1 " << o1.value / t << "+-" << o1.se / t << " vs int Q h " << qh << "; ";

    // finite eps against the direct simulation at the same eps
    ens::GCConfig fin = cfg;
    fin.diameter = 0.01;
    fin.horizon = t;
    fin.replicas = 20000;
    opt.mode = duh::Mode::finite;
    const auto f = duh::estimate_F1_duhamel(fin, t, h, opt);
    ens::RunOptions ro;
    ro.times = {t};
    const auto e = ens::run_replicas(fin, {obs::pi_observable(h, "vx2")}, ro);
    const auto pi = e.values("vx2", t);
    const double sim = mean(pi), sse = stderr_of(pi);
    o.require(std::abs(f.value - sim) < 3.0 * std::hypot(f.se, sse), "finite mode vs simulation");
    o.detail << "finite eps=" << fin.diameter << " " << f.value << "+-" << f.se << " vs simulation " << sim << "+-" << sse;
}

// ---- 9 ------------------------------------------------------------------------

void criterion9(Outcome& o) {
    ens::GCConfig cfg;
    cfg.dimension = 2;
    cfg.law = ens::InitialLaw::bimodal(1.0, 2.5);
    cfg.seed = 909;
    const double t = 0.5;
    const auto scan = duh::clustering_probability_scan(cfg, t, {0.02, 0.01}, 20000);
    const double pr = scan.rows[0].p / scan.rows[1].p;
    o.require(std::abs(pr - 2.0) < 0.6, "clustering probability ratio");
    o.detail << "P(ov) " << scan.rows[0].p << " -> " << scan.rows[1].p << " ratio " << pr << "; ";

    // h = v_x: sum h is conserved, so mu Var pi_t(h) stays at its initial value and the
    // connected part is the drop of int h^2 f_t
    const auto h = obs::TestFunction::polynomial({{1.0, {1, 0, 0}}}, cfg.law.beta0);
    double unscaled[2];
    obs::Estimate scaled[2];
    int k = 0;
    for (double eps : {0.02, 0.01}) {
        ens::GCConfig c = cfg;
        c.diameter = eps;
        c.horizon = t;
        c.replicas = 10000;
        ens::RunOptions ro;
        ro.times = {t};
        const auto e = ens::run_replicas(c, {obs::pi_observable(h, "pi"), obs::square_observable(h, "sq")}, ro);
        scaled[k] = obs::f2_connected(e.values("pi", t), e.values("sq", t), c.mu());
        unscaled[k] = scaled[k].value / c.mu();
        ++k;
    }
    const double ur = unscaled[0] / unscaled[1];
    o.require(std::abs(ur - 2.0) < 0.6, "connected correlation ratio");
    o.require(std::abs(scaled[0].value - scaled[1].value) < 3.0 * std::hypot(scaled[0].se, scaled[1].se),
              "scaled f2 eps-stable");
    VelocityGrid g(2, 24, 6.0);
    const VectorXd f0 = kin::discretize(g, cfg.law), x2 = kin::monomial(g, 0, 2);
    const double kinetic = kin::inner(g, f0, x2) - kin::inner(g, kin::solve_boltzmann(g, f0, t, 0.025).f.back(), x2);
    o.detail << "connected ratio " << ur << ", f2hat " << scaled[0].value << "+-" << scaled[0].se << " / "
             << scaled[1].value << "+-" << scaled[1].se << " (kinetic limit " << kinetic << ")";
}

// ---- 10 -----------------------------------------------------------------------

void criterion10(Outcome& o) {
    namespace fs = std::filesystem;
    const fs::path base = fs::temp_directory_path() / "bglab_acceptance";
    fs::remove_all(base);
    auto slurp = [](const fs::path& p) {
        std::ifstream in(p, std::ios::binary);
        std::ostringstream os;
        os << in.rdbuf();
        return os.str();
    };
    int specs = 0, files = 0;
    std::vector<fs::path> configs;
    for (const auto& e : fs::directory_iterator(fs::path(BGLAB_SOURCE_DIR) / "configs"))
        if (e.path().extension() == ".json") configs.push_back(e.path());
    std::sort(configs.begin(), configs.end());
    for (const auto& path : configs) {
        const std::string stem = path.stem().string();
        std::vector<cli::RunResult> runs;
        for (int r = 0; r < 2; ++r) {
            cli::RunOverrides ov;
            ov.output = (base / (stem + "_" + std::to_string(r))).string();
            ov.threads = r + 1;
            runs.push_back(cli::run_experiment(path.string(), ov));
        }
        // third run regenerated from the first provenance record
        cli::RunOverrides ov;
        ov.output = (base / (stem + "_prov")).string();
        runs.push_back(cli::run_experiment((base / (stem + "_0") / "provenance.json").string(), ov));
        bool ok = true;
        for (const auto& r : runs) ok &= r.exit_code == 0;
        if (ok)
            for (std::size_t r = 1; r < runs.size(); ++r) {
                ok &= runs[r].artifacts == runs[0].artifacts;
                for (const auto& f : runs[0].artifacts)
                    ok &= slurp(fs::path(runs[0].output_dir) / f) == slurp(fs::path(runs[r].output_dir) / f);
            }
        o.require(ok, "byte-identical artifacts for " + stem);
        ++specs;
        files += static_cast<int>(runs[0].artifacts.size());
    }
    o.require(specs >= 6, "all shipped specs present");
    o.detail << specs << " specs, " << files << " artifacts, identical across 2 runs (1 and 2 threads) and a provenance rerun";
}

}  // namespace

int main(int argc, char** argv) {
    std::vector<std::pair<int, std::function<void(Outcome&)>>> criteria{
        {1, criterion1}, {2, criterion2}, {3, criterion3}, {4, criterion4}, {5, criterion5},
        {6, criterion6}, {7, criterion7}, {8, criterion8}, {9, criterion9}, {10, criterion10}};
    std::set<int> only;
    for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
    int failed = 0;
    for (auto& [id, fn] : criteria) {
        if (!only.empty() && !only.count(id)) continue;
        Outcome o;
        const auto t0 = std::chrono::steady_clock::now();
        try {
            fn(o);
        } catch (const std::exception& e) {
            o.pass = false;
            o.detail << "[exception: " << e.what() << "]";
        }
        std::printf("CRITERION %d %s (%.1f s): %s\n", id, o.pass ? "PASS" : "FAIL", seconds_since(t0),
                    o.detail.str().c_str());
        std::fflush(stdout);
        failed += !o.pass;
    }
    return failed ? 1 : 0;
}
