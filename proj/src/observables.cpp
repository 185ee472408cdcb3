#include "bglab/observables.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace bglab::obs {

using hs::operator-;

double pairwise_sum(const double* x, std::size_t n) {
    if (n <= 16) {
        double s = 0.0;
        for (std::size_t k = 0; k < n; ++k) s += x[k];
        return s;
    }
    const std::size_t h = n / 2;
    return pairwise_sum(x, h) + pairwise_sum(x + h, n - h);
}

namespace {

double sum(const std::vector<double>& x) { return pairwise_sum(x.data(), x.size()); }
double mean(const std::vector<double>& x) { return sum(x) / static_cast<double>(x.size()); }

// Jackknife standard error from leave-one-out values.
double jackknife_se(const std::vector<double>& loo) {
    const double n = static_cast<double>(loo.size());
    const double m = mean(loo);
    std::vector<double> d2(loo.size());
    for (std::size_t i = 0; i < loo.size(); ++i) d2[i] = (loo[i] - m) * (loo[i] - m);
    return std::sqrt((n - 1.0) / n * sum(d2));
}

void require_same_size(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw std::invalid_argument("sample vectors differ in length");
}

double vnorm2(const Vec& v, int d) {
    double s = 0;
    for (int k = 0; k < d; ++k) s += v[k] * v[k];
    return s;
}

}  // namespace

TestFunction TestFunction::constant(double c) {
    TestFunction h;
    h.name = "constant";
    h.eval = [c](const Vec&, const Vec&) { return c; };
    h.growth = {Growth::Kind::bounded, std::abs(c), 0.0, 0.0};
    return h;
}

TestFunction TestFunction::polynomial(std::vector<Monomial> terms, double beta0) {
    int deg = 0;
    for (const auto& t : terms) {
        for (int e : t.exp)
            if (e < 0) throw std::invalid_argument("polynomial: negative exponent");
        deg = std::max(deg, t.exp[0] + t.exp[1] + t.exp[2]);
    }
    if (deg > 0 && !(beta0 > 0.0)) throw std::invalid_argument("polynomial: growth envelope needs beta0 > 0");
    // |p(v)| <= P(r) = sum |c| r^deg_k with r = |v|; P is nondecreasing, so on
    // each grid cell [r_k, r_{k+1}] log P(r_{k+1}) - beta0 r_k^2/4 bounds the
    // log-ratio. Past sqrt(2 deg/beta0) the ratio decreases.
    auto P = [&](double r) {
        double s = 0;
        for (const auto& t : terms) s += std::abs(t.coef) * std::pow(r, t.exp[0] + t.exp[1] + t.exp[2]);
        return s;
    };
    double alpha0 = -std::numeric_limits<double>::infinity();
    if (deg == 0) {
        alpha0 = std::log(std::max(P(0.0), std::numeric_limits<double>::min()));
    } else {
        const double rmax = std::sqrt(2.0 * deg / beta0) + 1.0;
        const int n = 4000;
        for (int k = 0; k < n; ++k) {
            const double r0 = rmax * k / n, r1 = rmax * (k + 1) / n;
            const double p = P(r1);
            if (p > 0) alpha0 = std::max(alpha0, std::log(p) - 0.25 * beta0 * r0 * r0);
        }
        if (!std::isfinite(alpha0)) alpha0 = 0.0;
    }
    TestFunction h;
    h.name = "polynomial";
    h.eval = [terms = std::move(terms)](const Vec&, const Vec& v) {
        double s = 0;
        for (const auto& t : terms) {
            double m = t.coef;
            for (int a = 0; a < 3; ++a)
                for (int e = 0; e < t.exp[a]; ++e) m *= v[a];
            s += m;
        }
        return s;
    };
    h.growth = {Growth::Kind::gaussian, 0.0, alpha0, beta0};
    return h;
}

TestFunction TestFunction::gaussian_bump(Vec center, double width, double amplitude) {
    if (!(width > 0.0)) throw std::invalid_argument("gaussian_bump: width must be positive");
    TestFunction h;
    h.name = "gaussian_bump";
    const double s = 0.5 / (width * width);
    h.eval = [center, s, amplitude](const Vec&, const Vec& v) {
        const Vec d = v - center;
        return amplitude * std::exp(-s * hs::dot(d, d));
    };
    h.growth = {Growth::Kind::bounded, std::abs(amplitude), 0.0, 0.0};
    return h;
}

TestFunction TestFunction::indicator_box(Vec vlo, Vec vhi, std::optional<std::pair<Vec, Vec>> xbox) {
    TestFunction h;
    h.name = "indicator_box";
    h.eval = [vlo, vhi, xbox](const Vec& x, const Vec& v) {
        for (int a = 0; a < 3; ++a) {
            if (v[a] < vlo[a] || v[a] >= vhi[a]) return 0.0;
            if (xbox && (x[a] < xbox->first[a] || x[a] >= xbox->second[a])) return 0.0;
        }
        return 1.0;
    };
    h.growth = {Growth::Kind::bounded, 1.0, 0.0, 0.0};
    return h;
}

double growth_ratio(const TestFunction& h, int d, Philox& rng, int probes, double radius) {
    double worst = 0.0;
    for (int p = 0; p < probes; ++p) {
        Vec x{0, 0, 0}, v{0, 0, 0};
        for (int k = 0; k < d; ++k) x[k] = rng.uniform(), v[k] = radius * (2.0 * rng.uniform() - 1.0);
        const double val = std::abs(h(x, v));
        double env;
        if (h.growth.kind == Growth::Kind::bounded)
            env = h.growth.bound;
        else
            env = std::exp(h.growth.alpha0 + 0.25 * h.growth.beta0 * vnorm2(v, d));
        if (val > 0) worst = std::max(worst, env > 0 ? val / env : std::numeric_limits<double>::infinity());
    }
    return worst;
}

double truncation_vmax(const ens::InitialLaw& law, int d, double tol) {
    const double C0 = law.envelope_C0(d), b = law.beta0;
    if (!(b > 0.0)) throw std::invalid_argument("truncation_vmax: envelope needs beta0 > 0");
    const double total = C0 * std::pow(2.0 * std::numbers::pi / b, 0.5 * d);
    auto outside = [&](double V) { return d * total * std::erfc(V * std::sqrt(0.5 * b)); };
    double lo = 0.0, hi = 1.0;
    while (outside(hi) >= tol) hi *= 2.0;
    for (int it = 0; it < 100; ++it) {
        const double mid = 0.5 * (lo + hi);
        (outside(mid) >= tol ? lo : hi) = mid;
    }
    return hi;
}

PhaseBins PhaseBins::uniform(int d, double vmax, int nv, int xcells) {
    if (d != 2 && d != 3) throw std::invalid_argument("PhaseBins: dimension must be 2 or 3");
    if (nv < 1 || xcells < 1 || !(vmax > 0.0)) throw std::invalid_argument("PhaseBins: bad sizes");
    PhaseBins b;
    b.dimension = d;
    b.xcells = xcells;
    b.vedges.assign(d, std::vector<double>(nv + 1));
    for (int a = 0; a < d; ++a)
        for (int k = 0; k <= nv; ++k) b.vedges[a][k] = -vmax + 2.0 * vmax * k / nv;
    return b;
}

std::size_t PhaseBins::count() const {
    std::size_t n = 1;
    for (int a = 0; a < dimension; ++a) n *= (vedges[a].size() - 1) * xcells;
    return n;
}

namespace {
struct BinIndex {
    std::array<std::size_t, 3> v{}, x{};
};

BinIndex split(const PhaseBins& b, std::size_t bin) {
    BinIndex r;
    std::size_t xs = 1;
    for (int a = 0; a < b.dimension; ++a) xs *= b.xcells;
    std::size_t xf = bin % xs, vf = bin / xs;
    for (int a = 0; a < b.dimension; ++a) {
        r.x[a] = xf % b.xcells, xf /= b.xcells;
        const std::size_t nv = b.vedges[a].size() - 1;
        r.v[a] = vf % nv, vf /= nv;
    }
    return r;
}
}  // namespace

double PhaseBins::volume(std::size_t bin) const {
    const auto ix = split(*this, bin);
    double vol = 1.0;
    for (int a = 0; a < dimension; ++a)
        vol *= (vedges[a][ix.v[a] + 1] - vedges[a][ix.v[a]]) / static_cast<double>(xcells);
    return vol;
}

Vec PhaseBins::center(std::size_t bin) const {
    const auto ix = split(*this, bin);
    Vec c{0, 0, 0};
    for (int a = 0; a < dimension; ++a) c[a] = 0.5 * (vedges[a][ix.v[a] + 1] + vedges[a][ix.v[a]]);
    return c;
}

Vec PhaseBins::xcenter(std::size_t bin) const {
    const auto ix = split(*this, bin);
    Vec c{0, 0, 0};
    for (int a = 0; a < dimension; ++a) c[a] = (ix.x[a] + 0.5) / xcells;
    return c;
}

std::optional<std::size_t> PhaseBins::locate(const Vec& x, const Vec& v) const {
    std::size_t vf = 0, xf = 0;
    for (int a = dimension - 1; a >= 0; --a) {
        const auto& e = vedges[a];
        if (v[a] < e.front() || v[a] >= e.back()) return std::nullopt;
        const std::size_t k = static_cast<std::size_t>(std::upper_bound(e.begin(), e.end(), v[a]) - e.begin()) - 1;
        vf = vf * (e.size() - 1) + k;
        const int xc = std::min(xcells - 1, std::max(0, static_cast<int>(x[a] * xcells)));
        xf = xf * xcells + xc;
    }
    std::size_t xs = 1;
    for (int a = 0; a < dimension; ++a) xs *= xcells;
    return vf * xs + xf;
}

double empirical_measure(const hs::SystemState& s, const TestFunction& h, double mu) {
    std::vector<double> vals(s.particles.size());
    for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = h(s.particles[i].position, s.particles[i].velocity);
    return sum(vals) / mu;
}

double fluctuation_field(const hs::SystemState& s, const TestFunction& h, double reference, double mu) {
    return std::sqrt(mu) * (empirical_measure(s, h, mu) - reference);
}

std::vector<double> pi_samples(const ens::ReplicaEnsemble& e, const TestFunction& h, double t) {
    const double mu = e.config.mu();
    std::vector<double> out;
    for (const auto* s : e.snapshots(t)) out.push_back(empirical_measure(*s, h, mu));
    return out;
}

std::vector<double> square_samples(const ens::ReplicaEnsemble& e, const TestFunction& h, double t) {
    const double mu = e.config.mu();
    TestFunction h2{h.name + "^2", [&h](const Vec& x, const Vec& v) { return h(x, v) * h(x, v); }, h.growth};
    std::vector<double> out;
    for (const auto* s : e.snapshots(t)) out.push_back(empirical_measure(*s, h2, mu));
    return out;
}

ens::Observable pi_observable(const TestFunction& h, std::string id) {
    return {std::move(id), [h](const hs::SystemState& s, double mu) { return empirical_measure(s, h, mu); }};
}

ens::Observable square_observable(const TestFunction& h, std::string id) {
    TestFunction h2{h.name + "^2", [h](const Vec& x, const Vec& v) { return h(x, v) * h(x, v); }, h.growth};
    return {std::move(id), [h2](const hs::SystemState& s, double mu) { return empirical_measure(s, h2, mu); }};
}

std::vector<double> fluctuation_samples(const std::vector<double>& pi, double mu, Centering c,
                                        double external_reference) {
    const std::size_t n = pi.size();
    if (n == 0) return {};
    if (c == Centering::leave_one_out && n < 2) throw std::invalid_argument("leave-one-out centering needs >= 2 replicas");
    const double total = sum(pi);
    std::vector<double> z(n);
    for (std::size_t r = 0; r < n; ++r) {
        double ref = external_reference;
        if (c == Centering::ensemble_mean) ref = total / n;
        if (c == Centering::leave_one_out) ref = (total - pi[r]) / static_cast<double>(n - 1);
        z[r] = std::sqrt(mu) * (pi[r] - ref);
    }
    return z;
}

BinnedDensity estimate_F1(const ens::ReplicaEnsemble& e, const PhaseBins& bins, double t) {
    const auto snaps = e.snapshots(t);
    if (snaps.empty()) throw std::invalid_argument("estimate_F1: empty ensemble");
    const double mu = e.config.mu();
    const std::size_t nb = bins.count();
    std::vector<double> s(nb, 0.0), s2(nb, 0.0), cnt(nb, 0.0);
    std::vector<std::size_t> touched;
    double overflow = 0.0;
    for (const auto* st : snaps) {
        for (const auto& p : st->particles) {
            const auto b = bins.locate(p.position, p.velocity);
            if (!b) {
                overflow += 1.0;
                continue;
            }
            if (cnt[*b] == 0.0) touched.push_back(*b);
            cnt[*b] += 1.0;
        }
        for (auto b : touched) s[b] += cnt[b], s2[b] += cnt[b] * cnt[b], cnt[b] = 0.0;
        touched.clear();
    }
    const double R = static_cast<double>(snaps.size());
    BinnedDensity out;
    out.density.resize(nb);
    out.se.resize(nb);
    for (std::size_t b = 0; b < nb; ++b) {
        const double m = s[b] / R;
        const double var = R > 1 ? std::max(0.0, (s2[b] - R * m * m) / (R - 1.0)) : 0.0;
        const double scale = 1.0 / (mu * bins.volume(b));
        out.density[b] = m * scale;
        out.se[b] = std::sqrt(var / R) * scale;
    }
    out.overflow = overflow / R;
    return out;
}

Estimate f2_connected(const std::vector<double>& pi, const std::vector<double>& sq, double mu) {
    require_same_size(pi, sq);
    const std::size_t n = pi.size();
    if (n < 3) throw std::invalid_argument("f2_connected: too few replicas");
    // center first; the variance is shift-invariant
    const double c = mean(pi);
    std::vector<double> a(n), a2(n);
    for (std::size_t r = 0; r < n; ++r) a[r] = pi[r] - c, a2[r] = a[r] * a[r];
    const double S1 = sum(a), S2 = sum(a2), S3 = sum(sq);
    auto theta = [&](double s1, double s2, double s3, double m) {
        const double var = (s2 - s1 * s1 / m) / (m - 1.0);
        return mu * var - s3 / m;
    };
    Estimate e;
    e.value = theta(S1, S2, S3, static_cast<double>(n));
    std::vector<double> loo(n);
    for (std::size_t r = 0; r < n; ++r) loo[r] = theta(S1 - a[r], S2 - a2[r], S3 - sq[r], static_cast<double>(n - 1));
    e.se = jackknife_se(loo);
    return e;
}

Estimate estimate_F2_connected(const ens::ReplicaEnsemble& e, const TestFunction& h, double t) {
    const auto pi = pi_samples(e, h, t);
    if (pi.size() < 100) throw std::invalid_argument("estimate_F2_connected: needs at least 100 replicas");
    return f2_connected(pi, square_samples(e, h, t), e.config.mu());
}

Estimate covariance(const std::vector<double>& a, const std::vector<double>& b, double mu) {
    require_same_size(a, b);
    const std::size_t n = a.size();
    if (n < 3) throw std::invalid_argument("covariance: too few replicas");
    const double ca = mean(a), cb = mean(b);
    std::vector<double> x(n), y(n), xy(n);
    for (std::size_t r = 0; r < n; ++r) x[r] = a[r] - ca, y[r] = b[r] - cb, xy[r] = x[r] * y[r];
    const double Sx = sum(x), Sy = sum(y), Sxy = sum(xy);
    auto theta = [&](double sx, double sy, double sxy, double m) { return mu * (sxy - sx * sy / m) / (m - 1.0); };
    Estimate e;
    e.value = theta(Sx, Sy, Sxy, static_cast<double>(n));
    std::vector<double> loo(n);
    for (std::size_t r = 0; r < n; ++r) loo[r] = theta(Sx - x[r], Sy - y[r], Sxy - xy[r], static_cast<double>(n - 1));
    e.se = jackknife_se(loo);
    return e;
}

Estimate estimate_covariance(const ens::ReplicaEnsemble& e, const TestFunction& h1, const TestFunction& h2, double s,
                             double t) {
    return covariance(pi_samples(e, h1, s), pi_samples(e, h2, t), e.config.mu());
}

Estimate log_mgf(const std::vector<double>& sums, double mu) {
    const std::size_t n = sums.size();
    if (n < 2) throw std::invalid_argument("log_mgf: too few replicas");
    for (double s : sums)
        if (!std::isfinite(s)) throw std::overflow_error("log_mgf: non-finite exponent");
    const double top = *std::max_element(sums.begin(), sums.end());
    std::vector<double> w(n);
    for (std::size_t r = 0; r < n; ++r) w[r] = std::exp(sums[r] - top);
    const double W = sum(w);
    Estimate e;
    e.value = (top + std::log(W / n)) / mu;
    std::vector<double> loo(n);
    for (std::size_t r = 0; r < n; ++r) {
        double rest = W - w[r];
        if (!(rest > 1e-12 * W)) {
            // the removed replica dominates; recompute without it
            double t2 = -std::numeric_limits<double>::infinity();
            for (std::size_t q = 0; q < n; ++q)
                if (q != r) t2 = std::max(t2, sums[q]);
            std::vector<double> u;
            for (std::size_t q = 0; q < n; ++q)
                if (q != r) u.push_back(std::exp(sums[q] - t2));
            loo[r] = (t2 + std::log(sum(u) / (n - 1))) / mu;
            continue;
        }
        loo[r] = (top + std::log(rest / (n - 1))) / mu;
    }
    e.se = jackknife_se(loo);
    return e;
}

Estimate estimate_log_mgf(const ens::ReplicaEnsemble& e, const TestFunction& h, double t) {
    if (h.growth.kind != Growth::Kind::bounded) throw std::invalid_argument("estimate_log_mgf: h must be bounded");
    auto s = pi_samples(e, h, t);
    const double mu = e.config.mu();
    for (auto& x : s) x *= mu;
    return log_mgf(s, mu);
}

double k_statistic(const std::vector<double>& x, int order) {
    if (order < 1 || order > 4) throw std::invalid_argument("k_statistic: order must be 1..4");
    const std::size_t n = x.size();
    if (n < static_cast<std::size_t>(order) || n == 0) throw std::invalid_argument("k_statistic: too few samples");
    const double N = static_cast<double>(n);
    const double m = mean(x);
    if (order == 1) return m;
    std::vector<double> d2(n), d3(n), d4(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double d = x[i] - m;
        d2[i] = d * d, d3[i] = d2[i] * d, d4[i] = d2[i] * d2[i];
    }
    const double m2 = sum(d2) / N;
    if (order == 2) return N / (N - 1.0) * m2;
    const double m3 = sum(d3) / N;
    if (order == 3) return N * N / ((N - 1.0) * (N - 2.0)) * m3;
    const double m4 = sum(d4) / N;
    return N * N * ((N + 1.0) * m4 - 3.0 * (N - 1.0) * m2 * m2) / ((N - 1.0) * (N - 2.0) * (N - 3.0));
}

}  // namespace bglab::obs
