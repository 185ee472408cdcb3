#include "bglab/kinetic.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

#include <boost/math/special_functions/legendre.hpp>

namespace bglab::kin {

using hs::operator-;
using hs::operator+;
using hs::operator*;

namespace {

// Gauss-Legendre nodes/weights on [-1, 1] by Newton iteration on P_n.
void gauss_legendre(int n, std::vector<double>& x, std::vector<double>& w) {
    x.assign(n, 0.0);
    w.assign(n, 0.0);
    for (int k = 0; k < n; ++k) {
        double z = std::cos(std::numbers::pi * (k + 0.75) / (n + 0.5));
        for (int it = 0; it < 100; ++it) {
            const double p = boost::math::legendre_p(n, z);
            const double dp = boost::math::legendre_p_prime(n, z);
            const double dz = p / dp;
            z -= dz;
            if (std::abs(dz) < 1e-16) break;
        }
        const double dp = boost::math::legendre_p_prime(n, z);
        x[k] = z;
        w[k] = 2.0 / ((1.0 - z * z) * dp * dp);
    }
    // symmetrize so that the rule is exactly invariant under z -> -z
    for (int k = 0; k < n / 2; ++k) {
        const double a = 0.5 * (x[k] - x[n - 1 - k]);
        const double b = 0.5 * (w[k] + w[n - 1 - k]);
        x[k] = a;
        x[n - 1 - k] = -a;
        w[k] = w[n - 1 - k] = b;
    }
    if (n % 2 == 1) x[n / 2] = 0.0;
}

struct Stencil {
    int n = 0;
    std::size_t base = 0;
    const std::size_t* off = nullptr;
    const double* w = nullptr;
    bool outside = false;  // point lies outside the grid cells
    // Density weights: the same stencil in the interior; near the boundary,
    // nonnegative multilinear weights at the point clamped onto the node hull.
    int dn = 0;
    std::size_t dbase = 0;
    const std::size_t* doff = nullptr;
    const double* dw = nullptr;

    std::size_t index(int c) const { return base + off[c]; }
    std::size_t dindex(int c) const { return dbase + doff[c]; }
    double apply(const double* x) const {
        const double* y = x + base;
        double s = 0.0;
        for (int c = 0; c < n; ++c) s += w[c] * y[off[c]];
        return s;
    }
    // Densities vanish outside the grid.
    double density(const double* x) const {
        if (outside) return 0.0;
        const double* y = x + dbase;
        double s = 0.0;
        for (int c = 0; c < dn; ++c) s += dw[c] * y[doff[c]];
        return s;
    }
    void share_density() { dn = n, dbase = base, doff = off, dw = w; }
};

struct StencilShape {
    int k = 2;  // nodes per axis
    int n = 4;
    std::array<int, 3> lead{};  // first stencil node relative to the anchor node, per axis
    std::array<std::size_t, 27> off{};
    std::array<double, 27> w{};
};

inline int anchor_of(double p, int k) { return k == 2 ? static_cast<int>(std::floor(p)) : static_cast<int>(std::floor(p + 0.5)); }

inline std::array<double, 3> axis_weights(double t, int k) {
    if (k == 2) return {1.0 - t, t, 0.0};
    return {0.5 * t * (t - 1.0), 1.0 - t * t, 0.5 * t * (t + 1.0)};
}

// Weights for p = (node) + shift, valid whenever the stencil stays on the grid.
void build_shape(const Vec& shift, int d, const std::size_t* stride, int k, StencilShape& sh) {
    sh.k = k;
    std::array<std::array<double, 3>, 3> wa{};
    for (int a = 0; a < d; ++a) {
        const int c = anchor_of(shift[a], k);
        wa[a] = axis_weights(shift[a] - c, k);
        sh.lead[a] = k == 2 ? c : c - 1;
    }
    sh.n = 1;
    for (int a = 0; a < d; ++a) sh.n *= k;
    for (int c = 0; c < sh.n; ++c) {
        std::size_t idx = 0;
        double w = 1.0;
        int r = c;
        for (int a = 0; a < d; ++a) {
            const int o = r % k;
            r /= k;
            idx += o * stride[a];
            w *= wa[a][o];
        }
        sh.off[c] = idx;
        sh.w[c] = w;
    }
}

// General case: the stencil is clamped to the grid, so points outside are
// extrapolated.
void build_clamped(const double* p, int d, int M, const std::size_t* stride, int k, std::size_t* idx, double* wt,
                   Stencil& st) {
    std::array<std::size_t, 3> base{};
    std::array<std::array<double, 3>, 3> wa{};
    for (int a = 0; a < d; ++a) {
        const int c = k == 2 ? std::clamp(anchor_of(p[a], k), 0, M - 2) : std::clamp(anchor_of(p[a], k), 1, M - 2);
        wa[a] = axis_weights(p[a] - c, k);
        base[a] = static_cast<std::size_t>(k == 2 ? c : c - 1);
    }
    st.n = 1;
    for (int a = 0; a < d; ++a) st.n *= k;
    for (int c = 0; c < st.n; ++c) {
        std::size_t ix = 0;
        double w = 1.0;
        int r = c;
        for (int a = 0; a < d; ++a) {
            const int o = r % k;
            r /= k;
            ix += (base[a] + o) * stride[a];
            w *= wa[a][o];
        }
        idx[c] = ix;
        wt[c] = w;
    }
    st.base = 0;
    st.off = idx;
    st.w = wt;
}

void build_positive(const double* p, int d, int M, const std::size_t* stride, std::size_t* idx, double* wt,
                    Stencil& st) {
    std::array<std::size_t, 3> base{};
    std::array<double, 3> sa{};
    for (int a = 0; a < d; ++a) {
        const double x = std::clamp(p[a], 0.0, M - 1.0);
        const int c = std::min(static_cast<int>(std::floor(x)), M - 2);
        base[a] = static_cast<std::size_t>(c);
        sa[a] = x - c;
    }
    st.dn = 1 << d;
    for (int c = 0; c < st.dn; ++c) {
        std::size_t ix = 0;
        double w = 1.0;
        for (int a = 0; a < d; ++a) {
            const int bit = (c >> a) & 1;
            ix += (base[a] + bit) * stride[a];
            w *= bit ? sa[a] : 1.0 - sa[a];
        }
        idx[c] = ix;
        wt[c] = w;
    }
    st.dbase = 0;
    st.doff = idx;
    st.dw = wt;
}

// Visits every unordered collision triple {(i, j, omega), (j, i, -omega)}
// with positive kernel: fn(i, j, b, stencil at v', stencil at w').
template <class F>
void for_each_triple(const VelocityGrid& g, F&& fn) {
    const int d = g.dimension();
    const int M = g.per_axis();
    const int k = g.interpolation() == Interpolation::quadratic ? 3 : 2;
    std::array<std::size_t, 3> stride{1, 1, 1};
    for (int a = 1; a < d; ++a) stride[a] = stride[a - 1] * M;
    StencilShape shp, shq;
    std::array<std::size_t, 27> ip{}, iq{};
    std::array<double, 27> wp{}, wq{};
    std::array<std::size_t, 8> dip{}, diq{};
    std::array<double, 8> dwp{}, dwq{};
    Stencil sp, sq;
    std::array<int, 3> lo{}, hi{}, j{};
    double p[3], q[3];
    for (const auto& pr : g.pairs()) {
        for (int a = 0; a < d; ++a) {
            lo[a] = std::max(0, -pr.D[a]);
            hi[a] = std::min(M, M - pr.D[a]);
        }
        bool empty = false;
        for (int a = 0; a < d; ++a) empty = empty || lo[a] >= hi[a];
        if (empty) continue;
        const Vec neg{-pr.delta[0], -pr.delta[1], -pr.delta[2]};
        build_shape(pr.delta, d, stride.data(), k, shp);
        build_shape(neg, d, stride.data(), k, shq);
        j = lo;
        while (true) {
            std::size_t jf = 0, iflat = 0, bp = 0, bq = 0;
            bool clamp_p = false, clamp_q = false;
            sp.outside = sq.outside = false;
            for (int a = 0; a < d; ++a) {
                const int ia = j[a] + pr.D[a];
                jf += j[a] * stride[a];
                iflat += ia * stride[a];
                p[a] = ia + pr.delta[a];
                q[a] = j[a] - pr.delta[a];
                const int lp = ia + shp.lead[a], lq = j[a] + shq.lead[a];
                clamp_p = clamp_p || lp < 0 || lp > M - k;
                clamp_q = clamp_q || lq < 0 || lq > M - k;
                bp += static_cast<std::size_t>(std::max(lp, 0)) * stride[a];
                bq += static_cast<std::size_t>(std::max(lq, 0)) * stride[a];
                sp.outside = sp.outside || p[a] < -0.5 || p[a] > M - 0.5;
                sq.outside = sq.outside || q[a] < -0.5 || q[a] > M - 0.5;
            }
            if (clamp_p) {
                build_clamped(p, d, M, stride.data(), k, ip.data(), wp.data(), sp);
                build_positive(p, d, M, stride.data(), dip.data(), dwp.data(), sp);
            } else {
                sp.n = shp.n, sp.base = bp, sp.off = shp.off.data(), sp.w = shp.w.data();
                sp.share_density();
            }
            if (clamp_q) {
                build_clamped(q, d, M, stride.data(), k, iq.data(), wq.data(), sq);
                build_positive(q, d, M, stride.data(), diq.data(), dwq.data(), sq);
            } else {
                sq.n = shq.n, sq.base = bq, sq.off = shq.off.data(), sq.w = shq.w.data();
                sq.share_density();
            }
            fn(iflat, jf, pr.b, sp, sq);
            int a = 0;
            while (a < d) {
                if (++j[a] < hi[a]) break;
                j[a] = lo[a];
                ++a;
            }
            if (a == d) break;
        }
    }
}

inline double delta_of(const double* x, std::size_t i, std::size_t j, const Stencil& sp, const Stencil& sq) {
    return sp.apply(x) + sq.apply(x) - x[i] - x[j];
}

// Adds c * dDelta/dx_l / W into out.
inline void deposit(double* out, double c, std::size_t i, std::size_t j, const Stencil& sp, const Stencil& sq) {
    for (int k = 0; k < sp.n; ++k) out[sp.index(k)] += c * sp.w[k];
    for (int k = 0; k < sq.n; ++k) out[sq.index(k)] += c * sq.w[k];
    out[i] -= c;
    out[j] -= c;
}

void require_size(const VelocityGrid& g, const VectorXd& x, const char* what) {
    if (static_cast<std::size_t>(x.size()) != g.size())
        throw std::invalid_argument(std::string(what) + ": grid function has wrong size");
}

// Columns 1, v_a, |v|^2 (scaled by vmax when `scaled`).
Eigen::MatrixXd invariant_basis(const VelocityGrid& g, bool scaled = false) {
    const int d = g.dimension();
    const double s = scaled ? 1.0 / g.vmax() : 1.0;
    Eigen::MatrixXd B(g.size(), d + 2);
    for (std::size_t n = 0; n < g.size(); ++n) {
        const Vec v = s * g.node(n);
        B(n, 0) = 1.0;
        double e = 0.0;
        for (int a = 0; a < d; ++a) {
            B(n, 1 + a) = v[a];
            e += v[a] * v[a];
        }
        B(n, d + 1) = e;
    }
    return B;
}

}  // namespace

SphereRule sphere_rule(int d, int n) {
    SphereRule r;
    if (d == 2) {
        if (n < 2 || n % 2 != 0) throw std::invalid_argument("sphere_rule: d = 2 needs an even node count");
        for (int k = 0; k < n; ++k) {
            const double th = 2.0 * std::numbers::pi * k / n;
            r.nodes.push_back({std::cos(th), std::sin(th), 0.0});
            r.weights.push_back(2.0 * std::numbers::pi / n);
        }
    } else if (d == 3) {
        if (n < 1) throw std::invalid_argument("sphere_rule: d = 3 needs n >= 1");
        std::vector<double> z, wz;
        gauss_legendre(n, z, wz);
        const int na = 2 * n;
        for (int k = 0; k < n; ++k) {
            const double st = std::sqrt(std::max(0.0, 1.0 - z[k] * z[k]));
            for (int m = 0; m < na; ++m) {
                const double ph = 2.0 * std::numbers::pi * (m + 0.5) / na;
                r.nodes.push_back({st * std::cos(ph), st * std::sin(ph), z[k]});
                r.weights.push_back(wz[k] * 2.0 * std::numbers::pi / na);
            }
        }
    } else {
        throw std::invalid_argument("sphere_rule: dimension must be 2 or 3");
    }
    return r;
}

double sphere_area(int d) { return d == 2 ? 2.0 * std::numbers::pi : 4.0 * std::numbers::pi; }

VelocityGrid::VelocityGrid(int d, int M, double vmax, int sphere_nodes, Interpolation order)
    : d_(d), M_(M), vmax_(vmax), order_(order) {
    if (d != 2 && d != 3) throw std::invalid_argument("VelocityGrid: dimension must be 2 or 3");
    if (M < 3) throw std::invalid_argument("VelocityGrid: need at least 3 nodes per axis");
    if (!(vmax > 0.0) || !std::isfinite(vmax)) throw std::invalid_argument("VelocityGrid: vmax must be positive");
    if (sphere_nodes <= 0) sphere_nodes = d == 2 ? 32 : 6;
    h_ = 2.0 * vmax / M;
    w_ = std::pow(h_, d);
    n_ = 1;
    for (int a = 0; a < d; ++a) n_ *= static_cast<std::size_t>(M);
    sphere_ = sphere_rule(d, sphere_nodes);

    std::array<int, 3> D{0, 0, 0};
    const int span = 2 * M - 1;
    std::size_t total = 1;
    for (int a = 0; a < d; ++a) total *= span;
    for (std::size_t c = 0; c < total; ++c) {
        std::size_t r = c;
        for (int a = 0; a < d; ++a) {
            D[a] = static_cast<int>(r % span) - (M - 1);
            r /= span;
        }
        // keep the lexicographically positive half (last axis most significant)
        int lead = 0;
        for (int a = d - 1; a >= 0; --a)
            if (D[a] != 0) {
                lead = D[a];
                break;
            }
        if (lead <= 0) continue;
        for (std::size_t k = 0; k < sphere_.nodes.size(); ++k) {
            const Vec& om = sphere_.nodes[k];
            double dw = 0.0;
            for (int a = 0; a < d; ++a) dw += D[a] * om[a];
            if (dw <= 0.0) continue;
            Pair p;
            p.D = D;
            p.b = sphere_.weights[k] * h_ * dw;
            p.delta = {0, 0, 0};
            for (int a = 0; a < d; ++a) p.delta[a] = -dw * om[a];
            pairs_.push_back(p);
        }
    }
}

Vec VelocityGrid::node(std::size_t i) const {
    Vec v{0, 0, 0};
    for (int a = 0; a < d_; ++a) {
        v[a] = -vmax_ + (static_cast<double>(i % M_) + 0.5) * h_;
        i /= M_;
    }
    return v;
}

VectorXd discretize(const VelocityGrid& g, const ens::InitialLaw& law) {
    VectorXd f(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) f[i] = law.density(g.node(i), g.dimension());
    return f;
}

VectorXd maxwellian(const VelocityGrid& g, double beta, double mass, Vec mean) {
    const int d = g.dimension();
    const double c = mass * std::pow(beta / (2.0 * std::numbers::pi), 0.5 * d);
    VectorXd f(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
        const Vec v = g.node(i) - mean;
        double e = 0.0;
        for (int a = 0; a < d; ++a) e += v[a] * v[a];
        f[i] = c * std::exp(-0.5 * beta * e);
    }
    return f;
}

VectorXd monomial(const VelocityGrid& g, int axis, int k) {
    VectorXd f(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
        const Vec v = g.node(i);
        if (axis < 0) {
            double e = 0.0;
            for (int a = 0; a < g.dimension(); ++a) e += v[a] * v[a];
            f[i] = e;
        } else {
            f[i] = std::pow(v[axis], k);
        }
    }
    return f;
}

VectorXd bump(const VelocityGrid& g, Vec center, double width) {
    VectorXd f(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
        const Vec v = g.node(i) - center;
        double e = 0.0;
        for (int a = 0; a < g.dimension(); ++a) e += v[a] * v[a];
        f[i] = std::exp(-0.5 * e / (width * width));
    }
    return f;
}

double integrate(const VelocityGrid& g, const VectorXd& f) { return g.weight() * f.sum(); }

double inner(const VelocityGrid& g, const VectorXd& a, const VectorXd& b) { return g.weight() * a.dot(b); }

double conservation_residual(const VelocityGrid& g, const VectorXd& q) {
    require_size(g, q, "conservation_residual");
    const Eigen::MatrixXd B = invariant_basis(g);
    return (g.weight() * (B.transpose() * q)).cwiseAbs().maxCoeff();
}

double h_functional(const VelocityGrid& g, const VectorXd& f) {
    double s = 0.0;
    for (Eigen::Index i = 0; i < f.size(); ++i)
        if (f[i] > 0.0) s += f[i] * std::log(f[i]);
    return g.weight() * s;
}

VectorXd collision_operator(const VelocityGrid& g, const VectorXd& f, bool correct) {
    require_size(g, f, "collision_operator");
    VectorXd gain = VectorXd::Zero(g.size()), loss = VectorXd::Zero(g.size());
    const double* x = f.data();
    const double W = g.weight();
    // weak form: sum_l W q_l psi_l = sum_{unordered} W^2 b f_i f_j Delta psi
    for_each_triple(g, [&](std::size_t i, std::size_t j, double b, const Stencil& sp, const Stencil& sq) {
        const double c = W * b * x[i] * x[j];
        if (c == 0.0) return;
        if (!sp.outside)
            for (int k = 0; k < sp.dn; ++k) gain[sp.dindex(k)] += c * sp.dw[k];
        if (!sq.outside)
            for (int k = 0; k < sq.dn; ++k) gain[sq.dindex(k)] += c * sq.dw[k];
        loss[i] += c;
        loss[j] += c;
    });
    // quadratic overshoot can leave small negative gains in steep tails
    VectorXd q = gain.cwiseMax(0.0) - loss;
    if (correct) {
        // least-norm removal of the conserved moments in the metric diag(1/m),
        // m = max(f, 0) + floor: the correction m * (a + b.v + c|v|^2) follows f
        // and leaves the tails alone. Two passes clean up roundoff.
        const Eigen::MatrixXd B = invariant_basis(g, true);
        const double fmax = std::max(f.cwiseAbs().maxCoeff(), std::numeric_limits<double>::min());
        const VectorXd m = f.cwiseMax(0.0).array() + 1e-14 * fmax;
        const Eigen::MatrixXd G = B.transpose() * m.asDiagonal() * B;
        const Eigen::LDLT<Eigen::MatrixXd> ldlt(G);
        for (int pass = 0; pass < 2; ++pass) {
            const VectorXd lambda = ldlt.solve(B.transpose() * q);
            q -= m.cwiseProduct(B * lambda);
        }
    }
    return q;
}

double collision_frequency(const VelocityGrid& g, const VectorXd& f) {
    require_size(g, f, "collision_frequency");
    VectorXd nu = VectorXd::Zero(g.size());
    const double W = g.weight();
    for_each_triple(g, [&](std::size_t i, std::size_t j, double b, const Stencil&, const Stencil&) {
        nu[i] += W * b * f[j];
        nu[j] += W * b * f[i];
    });
    return nu.cwiseAbs().maxCoeff();
}

double stable_dt(const VelocityGrid& g, const VectorXd& f) {
    const double nu = collision_frequency(g, f);
    return nu > 0.0 ? 1.0 / nu : std::numeric_limits<double>::infinity();
}

VectorXd DensityPath::at(double t) const {
    if (f.empty()) throw std::logic_error("DensityPath: empty path");
    if (stationary || f.size() == 1 || t <= times.front()) return f.front();
    if (t >= times.back()) return f.back();
    const auto it = std::upper_bound(times.begin(), times.end(), t);
    const std::size_t k = static_cast<std::size_t>(it - times.begin());
    const double a = (t - times[k - 1]) / (times[k] - times[k - 1]);
    return (1.0 - a) * f[k - 1] + a * f[k];
}

DensityPath DensityPath::constant(const VectorXd& f, double T) {
    DensityPath p;
    p.times = {0.0, T};
    p.f = {f, f};
    p.stationary = true;
    return p;
}

namespace {

void check_density(const VectorXd& f, double t) {
    const double fmax = f.maxCoeff();
    if (!std::isfinite(fmax) || !f.allFinite()) throw std::runtime_error("solve_boltzmann: non-finite density");
    if (f.minCoeff() < -1e-10 * fmax)
        throw std::runtime_error("solve_boltzmann: negative density at t = " + std::to_string(t) +
                                 " (step too large or grid too coarse)");
}

std::size_t step_count(double span, double dt) {
    if (!(dt > 0.0)) throw std::invalid_argument("time step must be positive");
    return static_cast<std::size_t>(std::max(1.0, std::ceil(span / dt - 1e-9)));
}

}  // namespace

DensityPath solve_boltzmann(const VelocityGrid& g, const VectorXd& f0, double T, double dt) {
    require_size(g, f0, "solve_boltzmann");
    if (T < 0.0) throw std::invalid_argument("solve_boltzmann: negative horizon");
    const double bound = stable_dt(g, f0);
    if (dt > bound * (1.0 + 1e-12))
        throw std::invalid_argument("solve_boltzmann: dt exceeds the stability bound " + std::to_string(bound));
    DensityPath path;
    path.times.push_back(0.0);
    path.f.push_back(f0);
    path.H.push_back(h_functional(g, f0));
    if (T == 0.0) return path;
    const std::size_t K = step_count(T, dt);
    const double h = T / K;
    VectorXd f = f0;
    for (std::size_t k = 0; k < K; ++k) {
        const VectorXd mid = f + 0.5 * h * collision_operator(g, f);
        f += h * collision_operator(g, mid);
        const double t = (k + 1 == K) ? T : (k + 1) * h;
        check_density(f, t);
        path.times.push_back(t);
        path.f.push_back(f);
        path.H.push_back(h_functional(g, f));
    }
    return path;
}

namespace {

Vec sample_hemisphere(const Vec& u, int d, Philox& rng) {
    // density proportional to (u_hat . omega)_+ on the sphere
    const double n = hs::norm(u);
    const Vec e = (1.0 / n) * u;
    if (d == 2) {
        const double th = std::asin(2.0 * rng.uniform() - 1.0);
        const Vec perp{-e[1], e[0], 0.0};
        return std::cos(th) * e + std::sin(th) * perp;
    }
    const double c = std::sqrt(rng.uniform());
    const double s = std::sqrt(std::max(0.0, 1.0 - c * c));
    const double ph = 2.0 * std::numbers::pi * rng.uniform();
    Vec a = std::abs(e[0]) < 0.9 ? Vec{1, 0, 0} : Vec{0, 1, 0};
    const double ae = hs::dot(a, e);
    Vec p1 = a - ae * e;
    p1 = (1.0 / hs::norm(p1)) * p1;
    const Vec p2{e[1] * p1[2] - e[2] * p1[1], e[2] * p1[0] - e[0] * p1[2], e[0] * p1[1] - e[1] * p1[0]};
    Vec om = c * e + (s * std::cos(ph)) * p1 + (s * std::sin(ph)) * p2;
    return (1.0 / hs::norm(om)) * om;
}

}  // namespace

DsmcResult dsmc_relax(const ens::InitialLaw& law, int d, int N, const std::vector<double>& times, double rate_scale,
                      std::uint64_t seed) {
    if (d != 2 && d != 3) throw std::invalid_argument("dsmc_relax: dimension must be 2 or 3");
    if (N < 1000) throw std::invalid_argument("dsmc_relax: need N >= 1000 particles");
    if (!(rate_scale > 0.0)) throw std::invalid_argument("dsmc_relax: rate scale must be positive");
    for (std::size_t k = 0; k < times.size(); ++k)
        if (times[k] < 0.0 || (k > 0 && times[k] < times[k - 1]))
            throw std::invalid_argument("dsmc_relax: output times must be nonnegative and sorted");
    Philox rng(seed, 0);
    std::vector<Vec> v(N);
    for (auto& x : v) x = ens::sample_velocity(law, d, rng);
    const double kernel = d == 2 ? 2.0 : std::numbers::pi;  // int (e.omega)_+ domega
    auto max_speed = [&] {
        double m = 0.0;
        for (const auto& x : v) m = std::max(m, hs::norm(x));
        return m;
    };
    double vmax = max_speed();
    DsmcResult out;
    out.times = times;
    double t = 0.0;
    std::size_t k = 0;
    std::size_t since_refresh = 0;
    while (k < times.size()) {
        const double g = rate_scale * 2.0 * vmax;
        const double rate = 0.5 * (N - 1) * law.mass * kernel * g;
        const double tau = rate > 0.0 ? -std::log(rng.uniform_open()) / rate : std::numeric_limits<double>::infinity();
        if (t + tau >= times[k]) {
            t = times[k];
            out.velocities.push_back(v);
            ++k;
            continue;
        }
        t += tau;
        ++out.candidates;
        const std::size_t i = static_cast<std::size_t>(rng.uniform() * N);
        std::size_t j = static_cast<std::size_t>(rng.uniform() * (N - 1));
        if (j >= i) ++j;
        const Vec u = v[i] - v[j];
        const double un = hs::norm(u);
        if (un > g) throw std::runtime_error("dsmc_relax: majorant underflow (rate scale too small)");
        if (un > 0.0 && rng.uniform() * g < un) {
            const Vec om = sample_hemisphere(u, d, rng);
            auto [a, b] = hs::scatter(v[i], v[j], om);
            v[i] = a;
            v[j] = b;
            ++out.collisions;
            vmax = std::max({vmax, hs::norm(a), hs::norm(b)});
        }
        if (++since_refresh >= static_cast<std::size_t>(N)) {
            vmax = max_speed();
            since_refresh = 0;
        }
    }
    return out;
}

VectorXd linearized_adjoint(const VelocityGrid& g, const VectorXd& f, const VectorXd& psi) {
    require_size(g, f, "linearized_adjoint");
    require_size(g, psi, "linearized_adjoint");
    VectorXd out = VectorXd::Zero(g.size());
    const double W = g.weight();
    const double* x = psi.data();
    for_each_triple(g, [&](std::size_t i, std::size_t j, double b, const Stencil& sp, const Stencil& sq) {
        const double dl = delta_of(x, i, j, sp, sq);
        out[i] += W * b * f[j] * dl;
        out[j] += W * b * f[i] * dl;
    });
    return out;
}

MatrixXd linearized_adjoint_matrix(const VelocityGrid& g, const VectorXd& f) {
    require_size(g, f, "linearized_adjoint_matrix");
    const std::size_t n = g.size();
    MatrixXd A = MatrixXd::Zero(n, n);
    const double W = g.weight();
    for_each_triple(g, [&](std::size_t i, std::size_t j, double b, const Stencil& sp, const Stencil& sq) {
        const double ci = W * b * f[j], cj = W * b * f[i];
        for (int k = 0; k < sp.n; ++k) {
            A(i, sp.index(k)) += ci * sp.w[k];
            A(j, sp.index(k)) += cj * sp.w[k];
        }
        for (int k = 0; k < sq.n; ++k) {
            A(i, sq.index(k)) += ci * sq.w[k];
            A(j, sq.index(k)) += cj * sq.w[k];
        }
        A(i, i) -= ci;
        A(i, j) -= ci;
        A(j, i) -= cj;
        A(j, j) -= cj;
    });
    return A;
}

VectorXd linearized(const VelocityGrid& g, const VectorXd& f, const VectorXd& h) {
    require_size(g, f, "linearized");
    require_size(g, h, "linearized");
    VectorXd out = VectorXd::Zero(g.size());
    const double W = g.weight();
    // sum_l W out_l psi_l = sum_i W h_i (L* psi)_i, with uniform weights
    for_each_triple(g, [&](std::size_t i, std::size_t j, double b, const Stencil& sp, const Stencil& sq) {
        const double c = W * b * (h[i] * f[j] + h[j] * f[i]);
        if (c != 0.0) deposit(out.data(), c, i, j, sp, sq);
    });
    return out;
}

BackwardPath backward_semigroup(const VelocityGrid& g, const DensityPath& f, const VectorXd& phi, double t, double s,
                                double dt) {
    require_size(g, phi, "backward_semigroup");
    if (s > t) throw std::invalid_argument("backward_semigroup: need s <= t");
    BackwardPath out;
    out.times.push_back(t);
    out.psi.push_back(phi);
    if (s == t) return out;
    const std::size_t K = step_count(t - s, dt);
    const double h = (t - s) / K;
    const double scale = std::max(1.0, phi.cwiseAbs().maxCoeff());
    VectorXd psi = phi;
    for (std::size_t k = 0; k < K; ++k) {
        const double tk = t - k * h;
        const VectorXd mid = psi + 0.5 * h * linearized_adjoint(g, f.at(tk), psi);
        psi += h * linearized_adjoint(g, f.at(tk - 0.5 * h), mid);
        if (!psi.allFinite() || psi.cwiseAbs().maxCoeff() > 1e8 * scale)
            throw std::runtime_error("backward_semigroup: unstable (norm growth); reduce dt");
        out.times.push_back(k + 1 == K ? s : t - (k + 1) * h);
        out.psi.push_back(psi);
    }
    return out;
}

double noise_covariance(const VelocityGrid& g, const VectorXd& f, const VectorXd& phi, const VectorXd& psi) {
    require_size(g, f, "noise_covariance");
    require_size(g, phi, "noise_covariance");
    require_size(g, psi, "noise_covariance");
    const double W2 = g.weight() * g.weight();
    double s = 0.0;
    for_each_triple(g, [&](std::size_t i, std::size_t j, double b, const Stencil& sp, const Stencil& sq) {
        const double ff = f[i] * f[j];
        if (ff == 0.0) return;
        s += W2 * b * ff * delta_of(phi.data(), i, j, sp, sq) * delta_of(psi.data(), i, j, sp, sq);
    });
    return s;
}

MatrixXd noise_covariance_matrix(const VelocityGrid& g, const VectorXd& f) {
    require_size(g, f, "noise_covariance_matrix");
    const std::size_t n = g.size();
    MatrixXd S = MatrixXd::Zero(n, n);
    const double W2 = g.weight() * g.weight();
    std::array<std::size_t, 56> idx{};
    std::array<double, 56> w{};
    for_each_triple(g, [&](std::size_t i, std::size_t j, double b, const Stencil& sp, const Stencil& sq) {
        const double c = W2 * b * f[i] * f[j];
        if (c == 0.0) return;
        int m = 0;
        for (int k = 0; k < sp.n; ++k) idx[m] = sp.index(k), w[m++] = sp.w[k];
        for (int k = 0; k < sq.n; ++k) idx[m] = sq.index(k), w[m++] = sq.w[k];
        idx[m] = i, w[m++] = -1.0;
        idx[m] = j, w[m++] = -1.0;
        for (int a = 0; a < m; ++a) {
            const double ca = c * w[a];
            for (int bb = 0; bb < m; ++bb) S(idx[a], idx[bb]) += ca * w[bb];
        }
    });
    return S;
}

MatrixXd equilibrium_covariance(const VelocityGrid& g, const VectorXd& f) {
    require_size(g, f, "equilibrium_covariance");
    return (g.weight() * f).asDiagonal();
}

CovariancePath covariance_evolution(const VelocityGrid& g, const DensityPath& f, const MatrixXd& C0, double T,
                                    double dt) {
    const auto n = static_cast<Eigen::Index>(g.size());
    if (C0.rows() != n || C0.cols() != n) throw std::invalid_argument("covariance_evolution: C0 has wrong shape");
    if ((C0 - C0.transpose()).cwiseAbs().maxCoeff() > 1e-12 * std::max(1.0, C0.cwiseAbs().maxCoeff()))
        throw std::invalid_argument("covariance_evolution: C0 is not symmetric");
    CovariancePath out;
    out.times.push_back(0.0);
    out.C.push_back(C0);
    if (T <= 0.0) return out;
    const std::size_t K = step_count(T, dt);
    const double h = T / K;
    auto rhs = [](const MatrixXd& C, const MatrixXd& A, const MatrixXd& S) -> MatrixXd {
        MatrixXd CA = C * A;
        return CA + CA.transpose() + S;
    };
    MatrixXd A0 = linearized_adjoint_matrix(g, f.at(0.0));
    MatrixXd S0 = noise_covariance_matrix(g, f.at(0.0));
    const double bound = 1e8 * std::max(1.0, C0.cwiseAbs().maxCoeff());
    MatrixXd C = C0;
    for (std::size_t k = 0; k < K; ++k) {
        const double tk = k * h;
        MatrixXd Am, Sm, A1, S1;
        if (f.stationary) {
            Am = A1 = A0;
            Sm = S1 = S0;
        } else {
            const VectorXd fm = f.at(tk + 0.5 * h), f1 = f.at(tk + h);
            Am = linearized_adjoint_matrix(g, fm);
            Sm = noise_covariance_matrix(g, fm);
            A1 = linearized_adjoint_matrix(g, f1);
            S1 = noise_covariance_matrix(g, f1);
        }
        const MatrixXd Cm = C + 0.5 * h * rhs(C, A0, S0);
        C += h * rhs(Cm, Am, Sm);
        C = 0.5 * (C + C.transpose()).eval();
        if (!C.allFinite() || C.cwiseAbs().maxCoeff() > bound)
            throw std::runtime_error("covariance_evolution: unstable; reduce dt");
        out.times.push_back(k + 1 == K ? T : (k + 1) * h);
        out.C.push_back(C);
        A0 = std::move(A1);
        S0 = std::move(S1);
    }
    return out;
}

MatrixXd recollision_matrix(const VelocityGrid& g, const VectorXd& f) {
    require_size(g, f, "recollision_matrix");
    const std::size_t n = g.size();
    MatrixXd R = MatrixXd::Zero(n, n);
    for_each_triple(g, [&](std::size_t i, std::size_t j, double b, const Stencil& sp, const Stencil& sq) {
        const double r = b * (sp.density(f.data()) * sq.density(f.data()) - f[i] * f[j]);
        R(i, j) += r;
        R(j, i) += r;
    });
    return R;
}

VectorXd recollision_apply(const VelocityGrid& g, const VectorXd& f, const VectorXd& phi) {
    require_size(g, f, "recollision_apply");
    require_size(g, phi, "recollision_apply");
    VectorXd out = VectorXd::Zero(g.size());
    const double W = g.weight();
    for_each_triple(g, [&](std::size_t i, std::size_t j, double b, const Stencil& sp, const Stencil& sq) {
        const double r = W * b * (sp.density(f.data()) * sq.density(f.data()) - f[i] * f[j]);
        out[i] += r * phi[j];
        out[j] += r * phi[i];
    });
    return out;
}

double recollision_form(const VelocityGrid& g, const VectorXd& f, const VectorXd& a, const VectorXd& bv) {
    require_size(g, f, "recollision_form");
    require_size(g, a, "recollision_form");
    require_size(g, bv, "recollision_form");
    const double W2 = g.weight() * g.weight();
    double s = 0.0;
    for_each_triple(g, [&](std::size_t i, std::size_t j, double b, const Stencil& sp, const Stencil& sq) {
        const double r = b * (sp.density(f.data()) * sq.density(f.data()) - f[i] * f[j]);
        s += W2 * r * (a[i] * bv[j] + a[j] * bv[i]);
    });
    return s;
}

double spohn_covariance(const VelocityGrid& g, const DensityPath& f, const VectorXd& phi, const VectorXd& psi,
                        double t, double dt) {
    require_size(g, phi, "spohn_covariance");
    require_size(g, psi, "spohn_covariance");
    const VectorXd ft = f.at(t);
    double value = g.weight() * (psi.array() * phi.array() * ft.array()).sum();
    if (t <= 0.0) return value;
    const BackwardPath P = backward_semigroup(g, f, psi, t, 0.0, dt);
    const BackwardPath F = backward_semigroup(g, f, phi, t, 0.0, dt);
    const std::size_t K = P.times.size() - 1;
    double integral = 0.0;
    for (std::size_t k = 0; k <= K; ++k) {
        const double tau = P.times[k];
        const double wk = (k == 0 || k == K) ? 0.5 : 1.0;
        integral += wk * recollision_form(g, f.at(tau), P.psi[k], F.psi[k]);
    }
    return value + integral * (t / K);
}

VectorXd sigma_apply(const VelocityGrid& g, const VectorXd& f, const VectorXd& psi) {
    require_size(g, f, "sigma_apply");
    require_size(g, psi, "sigma_apply");
    VectorXd out = VectorXd::Zero(g.size());
    const double W = g.weight();
    for_each_triple(g, [&](std::size_t i, std::size_t j, double b, const Stencil& sp, const Stencil& sq) {
        const double c = W * b * (f[i] * f[j] + sp.density(f.data()) * sq.density(f.data()));
        if (c == 0.0) return;
        const double dl = delta_of(psi.data(), i, j, sp, sq);
        out[i] -= c * dl;
        out[j] -= c * dl;
    });
    return out;
}

VectorXd sigma_identity_residual_vector(const VelocityGrid& g, const VectorXd& f, const VectorXd& fdot,
                                       const VectorXd& phi) {
    require_size(g, fdot, "sigma_identity_residual");
    const VectorXd fphi = f.cwiseProduct(phi);
    return sigma_apply(g, f, phi) + f.cwiseProduct(linearized_adjoint(g, f, phi)) + linearized(g, f, fphi) -
           fdot.cwiseProduct(phi) - recollision_apply(g, f, phi);
}

double sigma_identity_residual(const VelocityGrid& g, const VectorXd& f, const VectorXd& fdot, const VectorXd& phi) {
    return g.weight() * sigma_identity_residual_vector(g, f, fdot, phi).cwiseAbs().sum();
}

double dual_route_defect(const VelocityGrid& g, const DensityPath& f, const VectorXd& phi, const VectorXd& psi,
                         double t, double dt) {
    if (t <= 0.0) return 0.0;
    const BackwardPath P = backward_semigroup(g, f, psi, t, 0.0, dt);
    const BackwardPath F = backward_semigroup(g, f, phi, t, 0.0, dt);
    const std::size_t K = P.times.size() - 1;
    double integral = 0.0;
    for (std::size_t k = 0; k <= K; ++k) {
        const VectorXd fu = f.at(P.times[k]);
        const VectorXd fdot = f.stationary ? VectorXd::Zero(g.size()) : collision_operator(g, fu);
        const VectorXd& a = F.psi[k];
        const VectorXd& b = P.psi[k];
        const double sym = noise_covariance(g, fu, a, b) - inner(g, b, sigma_apply(g, fu, a));
        const double id = inner(g, b, sigma_identity_residual_vector(g, fu, fdot, a));
        const double wk = (k == 0 || k == K) ? 0.5 : 1.0;
        integral += wk * (sym + id);
    }
    return integral * (t / K);
}

double fluctuation_dissipation_gap(const VelocityGrid& g, const VectorXd& M, const VectorXd& phi, double t,
                                   double dt) {
    require_size(g, M, "fluctuation_dissipation_gap");
    if (t <= 0.0) return 0.0;
    const DensityPath eq = DensityPath::constant(M, t);
    const BackwardPath P = backward_semigroup(g, eq, phi, t, 0.0, dt);
    const std::size_t K = P.times.size() - 1;
    double integral = 0.0;
    for (std::size_t k = 0; k <= K; ++k) {
        const double wk = (k == 0 || k == K) ? 0.5 : 1.0;
        integral += wk * noise_covariance(g, M, P.psi[k], P.psi[k]);
    }
    integral *= t / K;
    const VectorXd& psi0 = P.psi.back();
    const double loss = g.weight() * ((phi.array().square() - psi0.array().square()) * M.array()).sum();
    return integral - loss;
}

double ld_hamiltonian(const VelocityGrid& g, const VectorXd& phi, const VectorXd& p) {
    require_size(g, phi, "ld_hamiltonian");
    require_size(g, p, "ld_hamiltonian");
    const double W2 = g.weight() * g.weight();
    double s = 0.0;
    for_each_triple(g, [&](std::size_t i, std::size_t j, double b, const Stencil& sp, const Stencil& sq) {
        const double pp = phi[i] * phi[j];
        if (pp == 0.0) return;
        const double dl = delta_of(p.data(), i, j, sp, sq);
        if (dl > 700.0) throw std::overflow_error("ld_hamiltonian: exp overflow (p too large near the grid boundary)");
        s += W2 * b * pp * std::expm1(dl);
    });
    return s;
}

}  // namespace bglab::kin
