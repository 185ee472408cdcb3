#include "bglab/duhamel.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numbers>
#include <numeric>
#include <ostream>
#include <stdexcept>
#include <thread>

namespace bglab::duh {

using hs::operator+;
using hs::operator-;
using hs::operator*;

namespace {

constexpr std::uint64_t kDuhamelStream = 0xD000000000000000ULL;
constexpr std::uint64_t kScanStream = 0xC000000000000000ULL;

// Runs body(k) for k in [0, count) on `threads` workers; each k writes its own slot.
void parallel_for(std::size_t count, int threads, const std::function<void(std::size_t)>& body) {
    const std::size_t workers = std::max<std::size_t>(1, std::min<std::size_t>(threads > 0 ? threads : 1, count));
    if (workers == 1) {
        for (std::size_t k = 0; k < count; ++k) body(k);
        return;
    }
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    for (std::size_t w = 0; w < workers; ++w)
        pool.emplace_back([&, w] {
            try {
                for (std::size_t k = w; k < count; k += workers) body(k);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    for (auto& th : pool) th.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

double sphere_area(int d) { return d == 2 ? 2.0 * std::numbers::pi : 4.0 * std::numbers::pi; }

Vec uniform_direction(int d, Philox& rng) {
    if (d == 2) {
        const double th = 2.0 * std::numbers::pi * rng.uniform();
        return {std::cos(th), std::sin(th), 0.0};
    }
    while (true) {
        Vec g{rng.normal(), rng.normal(), rng.normal()};
        const double r = hs::norm(g);
        if (r > 1e-12) return (1.0 / r) * g;
    }
}

Vec uniform_position(int d, Philox& rng) {
    Vec x{};
    for (int k = 0; k < d; ++k) x[k] = rng.uniform();
    return x;
}

double sq(const Vec& a) { return hs::dot(a, a); }

struct UnionFind {
    std::vector<int> up;
    explicit UnionFind(int n) : up(n) { std::iota(up.begin(), up.end(), 0); }
    int find(int a) { return up[a] == a ? a : up[a] = find(up[a]); }
    bool unite(int a, int b) {
        a = find(a), b = find(b);
        if (a == b) return false;
        up[a] = b;
        return true;
    }
};

double mean_of(const std::vector<double>& x) {
    return x.empty() ? 0.0 : obs::pairwise_sum(x.data(), x.size()) / static_cast<double>(x.size());
}

double se_of(const std::vector<double>& x, double mean) {
    if (x.size() < 2) return 0.0;
    std::vector<double> dev(x.size());
    for (std::size_t k = 0; k < x.size(); ++k) dev[k] = (x[k] - mean) * (x[k] - mean);
    return std::sqrt(obs::pairwise_sum(dev.data(), dev.size()) / static_cast<double>(x.size() - 1) /
                     static_cast<double>(x.size()));
}

}  // namespace

void CollisionTreeSpec::validate() const {
    if (n < 1 || m < 0) throw std::invalid_argument("collision tree: need n >= 1, m >= 0");
    if (static_cast<int>(parents.size()) != m || static_cast<int>(signs.size()) != m)
        throw std::invalid_argument("collision tree: parents and signs need m entries");
    for (int i = 1; i <= m; ++i) {
        if (parents[i - 1] < 0 || parents[i - 1] > n + i - 2)
            throw std::invalid_argument("collision tree: parent of creation " + std::to_string(i) + " out of range");
        if (signs[i - 1] != 1 && signs[i - 1] != -1) throw std::invalid_argument("collision tree: signs must be +-1");
    }
}

cpp_int count_collision_trees(int n, int m) {
    if (n < 1 || m < 0) throw std::invalid_argument("count_collision_trees: need n >= 1, m >= 0");
    cpp_int c = 1;
    for (int k = 0; k < m; ++k) c *= n + k;
    return c;
}

std::vector<CollisionTreeSpec> enumerate_collision_trees(int n, int m) {
    if (n < 1 || m < 0) throw std::invalid_argument("enumerate_collision_trees: need n >= 1, m >= 0");
    std::vector<CollisionTreeSpec> out;
    CollisionTreeSpec s{n, m, std::vector<int>(m, 0), std::vector<int>(m, 1)};
    while (true) {
        out.push_back(s);
        int k = m - 1;
        while (k >= 0 && s.parents[k] == n + k - 1) s.parents[k--] = 0;
        if (k < 0) break;
        ++s.parents[k];
    }
    return out;
}

void CreationParams::validate(int m, int d, double t) const {
    if (static_cast<int>(times.size()) != m || static_cast<int>(omegas.size()) != m ||
        static_cast<int>(velocities.size()) != m)
        throw std::invalid_argument("creation parameters: need m times, angles and velocities");
    for (int i = 0; i < m; ++i) {
        const double lo = 0.0, hi = i == 0 ? t : times[i - 1];
        if (!(times[i] >= lo) || !(i == 0 ? times[i] <= hi : times[i] < hi))
            throw std::invalid_argument("creation parameters: times must satisfy 0 <= t_m < ... < t_1 <= t");
        if (std::abs(sq(omegas[i]) - 1.0) > 1e-12) throw std::invalid_argument("creation parameters: omega not unit");
        if (d == 2 && (omegas[i][2] != 0.0 || velocities[i][2] != 0.0))
            throw std::invalid_argument("creation parameters: third component must vanish in d = 2");
    }
}

Vec PseudoTrajectory::position(int q, double tau) const {
    for (const auto& s : segments.at(q))
        if (tau >= s.t_lo && tau <= s.t_hi) return s.at(tau);
    throw std::out_of_range("pseudo-trajectory: particle not alive at this time");
}

Vec PseudoTrajectory::velocity(int q, double tau) const {
    for (const auto& s : segments.at(q))
        if (tau >= s.t_lo && tau <= s.t_hi) return s.v;
    throw std::out_of_range("pseudo-trajectory: particle not alive at this time");
}

std::vector<Vec> PseudoTrajectory::final_velocities() const {
    std::vector<Vec> out;
    for (const auto& s : segments) out.push_back(s.back().v);
    return out;
}

namespace {

class Builder {
public:
    Builder(PseudoTrajectory& p, Mode mode) : p_(p), mode_(mode) {}

    void add(int root, Vec x, Vec v, double tau) {
        p_.root_of.push_back(root);
        p_.birth.push_back(tau);
        p_.segments.push_back({{tau, tau, x, v}});
    }

    Vec x(int q, double tau) const { return p_.segments[q].back().at(tau); }
    Vec v(int q) const { return p_.segments[q].back().v; }

    void kick(int q, double tau, Vec vnew) {
        auto& seg = p_.segments[q];
        seg.back().t_lo = tau;
        seg.push_back({tau, tau, seg.back().at(tau), vnew});
    }

    // Backward flow from tau to tau_next < tau.
    void flow(double tau, double tau_next) {
        const int N = static_cast<int>(p_.size());
        if (mode_ == Mode::zero || N < 2 || tau_next >= tau) return;
        hs::SystemState s;
        s.dimension = p_.d;
        s.diameter = p_.eps;
        s.time = 0.0;
        for (int q = 0; q < N; ++q) s.particles.push_back({hs::wrap(x(q, tau), p_.d), -1.0 * v(q), 0});
        hs::Engine eng(std::move(s), false);
        std::vector<hs::CollisionRecord> log;
        while (true) {
            log.clear();
            if (eng.advance(tau - tau_next, &log, 1) == 0) break;
            const auto& r = log.front();
            const double tc = tau - r.time;
            const auto& st = eng.state();
            PseudoTrajectory::Event e{PseudoTrajectory::Event::Kind::scattering, tc, r.i, r.j, r.omega};
            e.scattered = true;
            e.vi_before = v(r.i);
            e.vj_before = v(r.j);
            e.vi_after = -1.0 * st.particles[r.i].velocity;
            e.vj_after = -1.0 * st.particles[r.j].velocity;
            kick(r.i, tc, e.vi_after);
            kick(r.j, tc, e.vj_after);
            p_.events.push_back(e);
        }
    }

    void close() {
        for (auto& seg : p_.segments) seg.back().t_lo = 0.0;
    }

private:
    PseudoTrajectory& p_;
    Mode mode_;
};

}  // namespace

std::optional<PseudoTrajectory> build_pseudo_trajectory(const CollisionTreeSpec& spec,
                                                        const std::vector<RootState>& roots,
                                                        const CreationParams& params, double eps, double t,
                                                        Mode mode, int d) {
    spec.validate();
    if (d != 2 && d != 3) throw std::invalid_argument("pseudo-trajectory: dimension must be 2 or 3");
    if (!(t >= 0.0)) throw std::invalid_argument("pseudo-trajectory: t must be >= 0");
    if (static_cast<int>(roots.size()) != spec.n) throw std::invalid_argument("pseudo-trajectory: need n roots");
    params.validate(spec.m, d, t);
    if (mode == Mode::finite && !(eps > 0.0 && eps < 0.5))
        throw std::invalid_argument("pseudo-trajectory: finite mode needs eps in (0, 1/2)");

    PseudoTrajectory p;
    p.d = d;
    p.n = spec.n;
    p.m = spec.m;
    p.eps = mode == Mode::finite ? eps : 0.0;
    p.t = t;
    Builder b(p, mode);
    for (int r = 0; r < spec.n; ++r) {
        if (d == 2 && (roots[r].x[2] != 0.0 || roots[r].v[2] != 0.0))
            throw std::invalid_argument("pseudo-trajectory: third component must vanish in d = 2");
        b.add(r, roots[r].x, roots[r].v, t);
    }
    if (mode == Mode::finite)
        for (int a = 0; a < spec.n; ++a)
            for (int c = a + 1; c < spec.n; ++c)
                if (hs::norm(hs::minimal_image(roots[a].x - roots[c].x, d)) < eps * (1.0 - hs::kContactTol))
                    throw std::invalid_argument("pseudo-trajectory: roots overlap");

    double tau = t;
    for (int i = 1; i <= spec.m; ++i) {
        const double ti = params.times[i - 1];
        b.flow(tau, ti);
        tau = ti;
        const int a = spec.parents[i - 1], s = spec.signs[i - 1];
        const Vec& om = params.omegas[i - 1];
        const Vec vi = params.velocities[i - 1];
        const Vec xa = b.x(a, ti), va = b.v(a);
        const Vec xi = mode == Mode::finite ? xa + (s * eps) * om : xa;
        if (mode == Mode::finite)
            for (int q = 0; q < static_cast<int>(p.size()); ++q)
                if (q != a && hs::norm(hs::minimal_image(xi - b.x(q, ti), d)) < eps) return std::nullopt;
        PseudoTrajectory::Event e{PseudoTrajectory::Event::Kind::creation, ti, spec.n + i - 1, a, om};
        e.vi_before = e.vi_after = vi;
        e.vj_before = e.vj_after = va;
        const int q = static_cast<int>(p.size());
        b.add(p.root_of[a], xi, vi, ti);
        if (s > 0 && hs::dot(vi - va, om) > 0.0) {
            const auto [va2, vi2] = hs::scatter(va, vi, om);
            e.scattered = true;
            e.vj_after = va2;
            e.vi_after = vi2;
            b.kick(a, ti, va2);
            p.segments[q].back().v = vi2;
        }
        p.events.push_back(e);
    }
    b.flow(tau, 0.0);
    b.close();
    return p;
}

void write_pseudo_events(std::ostream& os, const PseudoTrajectory& p) {
    std::vector<hs::CollisionRecord> log;
    for (const auto& e : p.events) log.push_back({e.time, e.i, e.j, e.omega});
    hs::write_event_log(os, log, p.d);
}

double virial_density_ratio(const ens::GCConfig& cfg) {
    cfg.validate();
    const double z = cfg.mu() * cfg.law.mass;
    const double eps = cfg.diameter;
    if (eps == 0.0 || z == 0.0) return cfg.law.mass;
    const int d = cfg.dimension;
    const double ball = d == 2 ? std::numbers::pi * eps * eps : 4.0 / 3.0 * std::numbers::pi * eps * eps * eps;
    const double B2 = 0.5 * ball;
    const double B3 = d == 2 ? B2 * B2 * (4.0 / 3.0 - std::sqrt(3.0) / std::numbers::pi) : 0.625 * B2 * B2;
    // z = rho exp(2 B2 rho + 3/2 B3 rho^2), solved for rho by Newton from rho = z
    double rho = z;
    for (int it = 0; it < 50; ++it) {
        const double g = std::log(rho) + 2.0 * B2 * rho + 1.5 * B3 * rho * rho - std::log(z);
        const double dg = 1.0 / rho + 2.0 * B2 + 3.0 * B3 * rho;
        const double step = g / dg;
        rho -= step;
        if (!(rho > 0.0)) throw std::domain_error("virial_density_ratio: density too high for the expansion");
        if (std::abs(step) < 1e-15 * rho) break;
    }
    return rho / cfg.mu();
}

DuhamelEstimate estimate_F1_duhamel(const ens::GCConfig& cfg, double t, const obs::TestFunction& h,
                                    const DuhamelOptions& opt) {
    cfg.validate();
    if (!(t >= 0.0)) throw std::invalid_argument("estimate_F1_duhamel: t must be >= 0");
    if (opt.m0 < 0) throw std::invalid_argument("estimate_F1_duhamel: m0 must be >= 0");
    if (opt.samples < static_cast<std::size_t>(2 * (opt.m0 + 1)))
        throw std::invalid_argument("estimate_F1_duhamel: need at least two samples per order");
    const int d = cfg.dimension;
    const auto& law = cfg.law;
    const double beta0 = law.beta0;
    if (!(beta0 > 0.0)) throw std::invalid_argument("estimate_F1_duhamel: law needs an envelope beta0 > 0");
    const bool finite = opt.mode == Mode::finite;
    if (finite && !(cfg.diameter > 0.0)) throw std::invalid_argument("estimate_F1_duhamel: finite mode needs eps > 0");
    const double eps = cfg.diameter;
    // collision prefactor mu eps^{d-1} (1 in the Boltzmann-Grad scaling)
    const double kappa = finite ? cfg.mu() * std::pow(eps, d - 1) : 1.0;
    double F0scale = 1.0;
    if (finite) {
        const double rho = opt.density_ratio > 0.0 ? opt.density_ratio : virial_density_ratio(cfg);
        F0scale = law.mass > 0.0 ? rho / law.mass : 0.0;
    }
    const double var = 2.0 / beta0, sd = std::sqrt(var);
    const double lognorm_q = -0.5 * d * std::log(2.0 * std::numbers::pi * var);
    const double area = sphere_area(d);
    const int orders = opt.m0 + 1;

    // weight of sample k of order m; rejected samples are flagged and weigh 0
    auto sample = [&](int m, std::size_t k, char& rejected) -> double {
        Philox rng(cfg.seed, kDuhamelStream | (static_cast<std::uint64_t>(m) << 48) | k);
        auto gauss = [&] {
            Vec v{};
            for (int a = 0; a < d; ++a) v[a] = sd * rng.normal();
            return v;
        };
        RootState root{uniform_position(d, rng), gauss()};
        CollisionTreeSpec spec{1, m, std::vector<int>(m), std::vector<int>(m)};
        CreationParams par;
        double logq = lognorm_q - 0.5 * sq(root.v) / var;
        for (int i = 0; i < m; ++i) {
            spec.parents[i] = std::min(i, static_cast<int>(rng.uniform() * (i + 1)));
            spec.signs[i] = rng.uniform() < 0.5 ? 1 : -1;
            par.times.push_back(t * rng.uniform_open());
            par.omegas.push_back(uniform_direction(d, rng));
            par.velocities.push_back(gauss());
            logq += lognorm_q - 0.5 * sq(par.velocities.back()) / var;
        }
        std::sort(par.times.begin(), par.times.end(), std::greater<>());
        for (int i = 1; i < m; ++i)
            if (!(par.times[i] < par.times[i - 1])) return 0.0;  // tie: measure zero
        const double hv = h(root.x, root.v);
        if (hv == 0.0) return 0.0;
        // the factor (v_i - v_{a_i}).omega_i needs the parent velocity after the
        // flow, so build first and read it from the creation events
        const auto psi = build_pseudo_trajectory(spec, {root}, par, eps, t, opt.mode, d);
        if (!psi) {
            rejected = 1;
            return 0.0;
        }
        double cross = 1.0;
        for (const auto& e : psi->events) {
            if (e.kind != PseudoTrajectory::Event::Kind::creation) continue;
            const double c = hs::dot(e.vi_before - e.vj_before, e.omega);
            if (c <= 0.0) return 0.0;
            cross *= spec.signs[e.i - spec.n] * c;
        }
        double F0 = 1.0;
        for (const auto& v : psi->final_velocities()) F0 *= F0scale * law.density(v, d);
        return hv * cross * F0 * std::pow(t * 2.0 * area * kappa, m) * std::exp(-logq);
    };

    std::vector<std::vector<double>> w(orders);
    std::vector<std::vector<char>> rej(orders);
    auto extend = [&](int m, std::size_t count) {
        const std::size_t from = w[m].size();
        if (count <= from) return;
        w[m].resize(count, 0.0);
        rej[m].resize(count, 0);
        parallel_for(count - from, opt.threads, [&](std::size_t k) { w[m][from + k] = sample(m, from + k, rej[m][from + k]); });
    };
    // pilot of a tenth of the budget, then Neyman allocation of the rest by the
    // per-order standard deviations (orders m >= 1 vanish identically at t = 0)
    const int active = t == 0.0 ? 1 : orders;
    const std::size_t pilot = std::max<std::size_t>(2, opt.samples / (10 * static_cast<std::size_t>(active)));
    std::vector<double> sdev(orders, 0.0);
    for (int m = 0; m < active; ++m) {
        extend(m, pilot);
        const double mu = mean_of(w[m]);
        sdev[m] = se_of(w[m], mu) * std::sqrt(static_cast<double>(pilot));
    }
    const double left = opt.samples > pilot * active ? static_cast<double>(opt.samples - pilot * active) : 0.0;
    const double sum_sd = std::accumulate(sdev.begin(), sdev.end(), 0.0);
    for (int m = 0; m < active; ++m) {
        const double share = sum_sd > 0.0 ? sdev[m] / sum_sd : 1.0 / active;
        extend(m, pilot + static_cast<std::size_t>(std::floor(share * left)));
    }

    DuhamelEstimate out;
    for (int m = 0; m < orders; ++m) {
        OrderEstimate oe;
        oe.m = m;
        const std::size_t N = w[m].size();
        std::vector<double> pos(N), neg(N), ab(N);
        for (std::size_t k = 0; k < N; ++k) {
            pos[k] = std::max(w[m][k], 0.0);
            neg[k] = std::min(w[m][k], 0.0);
            ab[k] = std::abs(w[m][k]);
            oe.rejected += rej[m][k];
        }
        oe.samples = N;
        oe.value = mean_of(w[m]);
        oe.se = se_of(w[m], oe.value);
        oe.positive = mean_of(pos);
        oe.positive_se = se_of(pos, oe.positive);
        oe.negative = mean_of(neg);
        oe.negative_se = se_of(neg, oe.negative);
        oe.mass = mean_of(ab);
        out.orders.push_back(oe);
    }
    double var_total = 0.0;
    for (const auto& o : out.orders) {
        out.value += o.value;
        var_total += o.se * o.se;
    }
    out.se = std::sqrt(var_total);
    double last = 0.0;
    for (int m = 1; m <= opt.m0; ++m) {
        const double prev = out.orders[m - 1].mass, cur = out.orders[m].mass;
        last = prev > 0.0 ? cur / prev : (cur > 0.0 ? hs::kInf : 0.0);
        out.series_ratio = std::max(out.series_ratio, last);
    }
    if (opt.m0 >= 1) {
        const double mass = out.orders[opt.m0].mass;
        out.tail_bound = mass == 0.0 ? 0.0 : (last < 1.0 ? mass * last / (1.0 - last) : hs::kInf);
    }
    out.dilute = out.series_ratio < 0.5;
    out.target_met = !(opt.target_rel_error > 0.0) || out.se <= opt.target_rel_error * std::abs(out.value);
    return out;
}

std::vector<RecollisionRecord> classify_recollisions(const PseudoTrajectory& p, const std::vector<int>& labels) {
    if (!labels.empty() && static_cast<int>(labels.size()) != p.n)
        throw std::invalid_argument("classify_recollisions: need one label per root");
    auto label = [&](int q) { return labels.empty() ? p.root_of[q] : labels[p.root_of[q]]; };
    std::vector<RecollisionRecord> out;
    for (const auto& e : p.events) {
        if (e.kind != PseudoTrajectory::Event::Kind::scattering) continue;
        const int li = label(e.i), lj = label(e.j);
        out.push_back({li, lj, e.i, e.j, e.time, e.omega, li != lj});
    }
    return out;
}

std::vector<OverlapInterval> detect_overlaps(const PseudoTrajectory& A, const PseudoTrajectory& B, double eps) {
    if (A.d != B.d) throw std::invalid_argument("detect_overlaps: dimension mismatch");
    const int d = A.d;
    const double top = std::min(A.t, B.t);
    std::vector<OverlapInterval> raw;
    for (int a = 0; a < static_cast<int>(A.size()); ++a)
        for (int b = 0; b < static_cast<int>(B.size()); ++b)
            for (const auto& sa : A.segments[a])
                for (const auto& sb : B.segments[b]) {
                    const double hi = std::min({sa.t_hi, sb.t_hi, top}), lo = std::max(sa.t_lo, sb.t_lo);
                    if (lo > hi) continue;
                    // r(tau) = r0 + u (tau - hi), tau in [lo, hi]
                    const Vec r0 = hs::minimal_image(sa.at(hi) - sb.at(hi), d);
                    const Vec u = sa.v - sb.v;
                    const double uu = sq(u), len = hi - lo;
                    const int range = static_cast<int>(std::ceil(std::sqrt(uu) * len)) + 1;
                    std::array<int, 3> k{-range, d > 1 ? -range : 0, d > 2 ? -range : 0};
                    while (true) {
                        const Vec r{r0[0] + k[0], r0[1] + k[1], r0[2] + k[2]};
                        const double c = sq(r) - eps * eps, bb = hs::dot(r, u);
                        double s_lo = -len, s_hi = 0.0;
                        bool hit = false;
                        if (uu == 0.0 || len == 0.0) {
                            hit = c < 0.0;
                        } else {
                            const double disc = bb * bb - uu * c;
                            if (disc > 0.0) {
                                const double sr = std::sqrt(disc);
                                // stable roots of uu s^2 + 2 bb s + c
                                const double q = -(bb + std::copysign(sr, bb));
                                double r1 = q / uu, r2 = q != 0.0 ? c / q : r1;
                                if (r1 > r2) std::swap(r1, r2);
                                s_lo = std::max(s_lo, r1);
                                s_hi = std::min(s_hi, r2);
                                hit = s_lo < s_hi || (s_lo == s_hi && c < 0.0);
                            }
                        }
                        if (hit) raw.push_back({hi + s_lo, hi + s_hi, a, b});
                        int ax = 0;
                        while (ax < d && k[ax] == range) k[ax++] = -range;
                        if (ax == d) break;
                        ++k[ax];
                    }
                }
    std::sort(raw.begin(), raw.end(), [](const auto& x, const auto& y) { return x.lo < y.lo; });
    std::vector<OverlapInterval> out;
    for (const auto& r : raw) {
        if (!out.empty() && r.lo <= out.back().hi) {
            if (r.hi > out.back().hi) out.back() = {out.back().lo, r.hi, r.a, r.b};
        } else {
            out.push_back(r);
        }
    }
    return out;
}

ClusteringReport clustering_graph(const std::vector<PseudoTrajectory>& forests,
                                  const std::vector<std::vector<int>>& lambda,
                                  const std::vector<std::vector<int>>& jungles) {
    const int F = static_cast<int>(forests.size());
    if (static_cast<int>(lambda.size()) != F) throw std::invalid_argument("clustering_graph: one label set per forest");
    int n = 0;
    for (int k = 0; k < F; ++k) {
        if (static_cast<int>(lambda[k].size()) != forests[k].n)
            throw std::invalid_argument("clustering_graph: forest " + std::to_string(k) + " label count != roots");
        n += forests[k].n;
    }
    std::vector<int> seen(n, 0);
    for (const auto& l : lambda)
        for (int x : l) {
            if (x < 0 || x >= n || seen[x]++) throw std::invalid_argument("clustering_graph: labels must partition 0..n-1");
        }
    std::vector<int> jungle_of(F, -1);
    for (int j = 0; j < static_cast<int>(jungles.size()); ++j)
        for (int k : jungles[j]) {
            if (k < 0 || k >= F || jungle_of[k] >= 0)
                throw std::invalid_argument("clustering_graph: jungles must partition the forests");
            jungle_of[k] = j;
        }
    for (int k = 0; k < F; ++k)
        if (jungle_of[k] < 0) throw std::invalid_argument("clustering_graph: forest not in any jungle");

    ClusteringReport rep;
    bool minimal = true;
    for (int k = 0; k < F; ++k) {
        auto recs = classify_recollisions(forests[k], lambda[k]);
        std::stable_sort(recs.begin(), recs.end(), [](const auto& a, const auto& b) { return a.time > b.time; });
        UnionFind uf(n);
        int edges = 0;
        for (const auto& r : recs) {
            rep.recollisions.push_back(r);
            if (r.external && uf.unite(r.label_i, r.label_j)) {
                rep.graph.push_back({r.label_i, r.label_j, +1, r.time});
                ++edges;
            }
        }
        if (edges != forests[k].n - 1) minimal = false;
    }
    for (const auto& jungle : jungles) {
        std::vector<ClusteringReport::Overlap> ov;
        for (std::size_t x = 0; x < jungle.size(); ++x)
            for (std::size_t y = x + 1; y < jungle.size(); ++y) {
                const int fa = jungle[x], fb = jungle[y];
                if (forests[fa].eps != forests[fb].eps || !(forests[fa].eps > 0.0))
                    throw std::invalid_argument("clustering_graph: overlaps need a common eps > 0");
                const auto iv = detect_overlaps(forests[fa], forests[fb], forests[fa].eps);
                if (iv.empty()) continue;
                const auto last = *std::max_element(iv.begin(), iv.end(),
                                                    [](const auto& p, const auto& q) { return p.hi < q.hi; });
                ov.push_back({fa, fb, lambda[fa][forests[fa].root_of[last.a]], lambda[fb][forests[fb].root_of[last.b]],
                              last.hi});
            }
        std::stable_sort(ov.begin(), ov.end(), [](const auto& a, const auto& b) { return a.time > b.time; });
        UnionFind uf(F);
        int edges = 0;
        for (const auto& o : ov) {
            rep.overlaps.push_back(o);
            if (uf.unite(o.forest_a, o.forest_b)) {
                rep.graph.push_back({o.u, o.v, -1, o.time});
                ++edges;
            }
        }
        if (edges != static_cast<int>(jungle.size()) - 1) minimal = false;
    }
    rep.minimal = minimal;
    return rep;
}

namespace {

// One single-root tree with `m` creations whose angles are oriented into the
// positive hemisphere of the parent's velocity at creation.
std::optional<PseudoTrajectory> random_tree(const ens::InitialLaw& law, int d, double eps, double t, int m,
                                            std::optional<Vec> x0, Philox& rng) {
    RootState root{x0 ? *x0 : uniform_position(d, rng), ens::sample_velocity(law, d, rng)};
    CollisionTreeSpec spec{1, 0, {}, {}};
    CreationParams par;
    std::vector<double> times;
    for (int i = 0; i < m; ++i) times.push_back(t * rng.uniform_open());
    std::sort(times.begin(), times.end(), std::greater<>());
    std::optional<PseudoTrajectory> p = build_pseudo_trajectory(spec, {root}, par, eps, t, Mode::finite, d);
    for (int i = 0; i < m && p; ++i) {
        if (i > 0 && !(times[i] < times[i - 1])) return std::nullopt;
        const int a = std::min(i, static_cast<int>(rng.uniform() * (i + 1)));
        const Vec va = p->velocity(a, times[i]);
        Vec om = uniform_direction(d, rng);
        const Vec v = ens::sample_velocity(law, d, rng);
        if (hs::dot(v - va, om) < 0.0) om = -1.0 * om;
        spec.m = i + 1;
        spec.parents.push_back(a);
        spec.signs.push_back(rng.uniform() < 0.5 ? 1 : -1);
        par.times.push_back(times[i]);
        par.omegas.push_back(om);
        par.velocities.push_back(v);
        p = build_pseudo_trajectory(spec, {root}, par, eps, t, Mode::finite, d);
    }
    return p;
}

}  // namespace

ScanResult clustering_probability_scan(const ens::GCConfig& cfg, double t, const std::vector<double>& eps_list,
                                       std::size_t samples, const ScanOptions& opt) {
    cfg.validate();
    if (eps_list.size() < 2) throw std::invalid_argument("clustering_probability_scan: need at least two eps values");
    if (samples == 0) throw std::invalid_argument("clustering_probability_scan: need samples > 0");
    if (!(t >= 0.0)) throw std::invalid_argument("clustering_probability_scan: t must be >= 0");
    const int d = cfg.dimension;
    const ens::InitialLaw& la = cfg.law;
    const ens::InitialLaw& lb = opt.law_b ? *opt.law_b : cfg.law;
    const int m = t > 0.0 ? opt.creations : 0;
    ScanResult res;
    for (std::size_t e = 0; e < eps_list.size(); ++e) {
        const double eps = eps_list[e];
        if (!(eps > 0.0 && eps < 0.5)) throw std::invalid_argument("clustering_probability_scan: eps must be in (0, 1/2)");
        std::vector<char> hit(samples, 0);
        parallel_for(samples, opt.threads, [&](std::size_t k) {
            Philox rng(cfg.seed, kScanStream | (static_cast<std::uint64_t>(e) << 48) | k);
            for (int attempt = 0; attempt < 1000; ++attempt) {
                const auto A = random_tree(la, d, eps, t, m, opt.root_a, rng);
                if (!A) continue;
                const auto B = random_tree(lb, d, eps, t, m, opt.root_b, rng);
                if (!B) continue;
                hit[k] = !detect_overlaps(*A, *B, eps).empty();
                return;
            }
            throw std::runtime_error("clustering_probability_scan: tree construction keeps failing");
        });
        ScanRow row{eps, std::pow(eps, -(d - 1)), samples, 0, 0.0, 0.0, 0.0};
        for (char c : hit) row.events += c;
        const double nn = static_cast<double>(samples), ph = row.events / nn, z = 1.959963984540054;
        const double den = 1.0 + z * z / nn, mid = (ph + z * z / (2.0 * nn)) / den;
        const double half = z * std::sqrt(ph * (1.0 - ph) / nn + z * z / (4.0 * nn * nn)) / den;
        row.p = ph;
        row.lo = std::max(0.0, mid - half);
        row.hi = std::min(1.0, mid + half);
        if (row.events == 0) res.starved = true;
        res.rows.push_back(row);
    }
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    int cnt = 0;
    for (const auto& r : res.rows)
        if (r.p > 0.0) {
            const double x = std::log(r.mu), y = std::log(r.p);
            sx += x, sy += y, sxx += x * x, sxy += x * y;
            ++cnt;
        }
    const double den = cnt * sxx - sx * sx;
    res.slope = cnt >= 2 && den > 0.0 ? (cnt * sxy - sx * sy) / den : std::nan("");
    return res;
}

}  // namespace bglab::duh
