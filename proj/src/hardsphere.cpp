#include "bglab/hardsphere.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <stdexcept>
#include <string>

namespace bglab::hs {

namespace {

std::string fmt17(double x) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

// Earliest contact of the relative motion dx0 + dv*t with the sphere |.| = eps,
// over images dx0 + k, k in [-range, range]^d, for t in [0, horizon].
std::optional<double> contact_time(const Vec& dx0, const Vec& dv, double eps, double horizon, int range,
                                   int d) {
    const double a = dot(dv, dv);
    if (a == 0.0) return std::nullopt;
    const double speed = std::sqrt(a);
    std::optional<double> best;
    std::array<int, 3> k{-range, d > 1 ? -range : 0, d > 2 ? -range : 0};
    while (true) {
        const Vec dx{dx0[0] + k[0], dx0[1] + k[1], dx0[2] + k[2]};
        const double b = dot(dx, dv);
        if (b < 0.0) {
            const double c = dot(dx, dx) - eps * eps;
            const double disc = b * b - a * c;
            const double approach = -b / std::sqrt(dot(dx, dx));
            if (disc >= 0.0 && approach >= kGrazingTol * speed) {
                const double t = c > 0.0 ? c / (-b + std::sqrt(disc)) : 0.0;
                if (t <= horizon && (!best || t < *best)) best = t;
            }
        }
        int ax = 0;
        while (ax < d && k[ax] == range) k[ax++] = -range;
        if (ax == d) break;
        ++k[ax];
    }
    return best;
}

}  // namespace

double norm(const Vec& a) { return std::sqrt(dot(a, a)); }

Vec wrap(Vec x, int d) {
    for (int k = 0; k < d; ++k) {
        x[k] -= std::floor(x[k]);
        if (x[k] >= 1.0) x[k] = 0.0;
    }
    return x;
}

Vec minimal_image(Vec dx, int d) {
    for (int k = 0; k < d; ++k) dx[k] -= std::floor(dx[k] + 0.5);
    return dx;
}

std::pair<Vec, Vec> scatter(const Vec& v, const Vec& w, const Vec& omega) {
    if (std::abs(dot(omega, omega) - 1.0) > 1e-12) throw std::invalid_argument("scatter: omega is not a unit vector");
    const double c = dot(v - w, omega);
    return {v - c * omega, w + c * omega};
}

std::optional<double> predict_pair_collision(const ParticleState& a, const ParticleState& b, double eps,
                                             double horizon, int d) {
    const Vec dx0 = minimal_image(a.position - b.position, d);
    if (norm(dx0) < eps * (1.0 - kContactTol)) throw std::runtime_error("predict_pair_collision: particles overlap");
    const Vec dv = a.velocity - b.velocity;
    if (horizon < 0.0) return std::nullopt;
    const int range = static_cast<int>(std::ceil(norm(dv) * horizon)) + 1;
    return contact_time(dx0, dv, eps, horizon, range, d);
}

SystemState free_flow(SystemState s, double dt) {
    for (auto& p : s.particles) p.position = wrap(p.position + dt * p.velocity, s.dimension);
    s.time += dt;
    return s;
}

double min_pair_distance(const SystemState& s) {
    double best = kInf;
    for (std::size_t i = 0; i < s.particles.size(); ++i)
        for (std::size_t j = i + 1; j < s.particles.size(); ++j)
            best = std::min(best, norm(minimal_image(s.particles[i].position - s.particles[j].position, s.dimension)));
    return best;
}

double kinetic_energy(const SystemState& s) {
    double e = 0.0;
    for (const auto& p : s.particles) e += dot(p.velocity, p.velocity);
    return e;
}

Vec total_momentum(const SystemState& s) {
    Vec m{};
    for (const auto& p : s.particles) m = m + p.velocity;
    return m;
}

Engine::Engine(SystemState s, bool allow_cells) : s_(std::move(s)), time_(s_.time), d_(s_.dimension) {
    if (d_ != 2 && d_ != 3) throw std::invalid_argument("dimension must be 2 or 3");
    if (!(s_.diameter > 0.0) || s_.diameter >= 0.5) throw std::invalid_argument("diameter must lie in (0, 1/2)");
    const int n = static_cast<int>(s_.particles.size());
    for (auto& p : s_.particles) {
        for (int k = 0; k < 3; ++k)
            if (!std::isfinite(p.position[k]) || !std::isfinite(p.velocity[k]))
                throw std::invalid_argument("non-finite particle state");
        p.position = wrap(p.position, d_);
        if (d_ == 2) p.position[2] = p.velocity[2] = 0.0;
    }
    local_time_.assign(n, time_);
    const int max_cells = static_cast<int>(std::floor(1.0 / s_.diameter));
    const int target = std::max(3, static_cast<int>(std::floor(std::pow(static_cast<double>(n), 1.0 / d_))));
    if (allow_cells && max_cells >= 3 && n >= 16) nc_ = std::min(max_cells, target);
}

void Engine::sync(int i) {
    auto& p = s_.particles[i];
    const double dt = time_ - local_time_[i];
    if (dt != 0.0) p.position = wrap(p.position + dt * p.velocity, d_);
    local_time_[i] = time_;
}

const SystemState& Engine::state() {
    for (int i = 0; i < static_cast<int>(s_.particles.size()); ++i) sync(i);
    s_.time = time_;
    return s_;
}

int Engine::cell_index(const std::array<int, 3>& c) const {
    int idx = 0;
    for (int k = d_ - 1; k >= 0; --k) idx = idx * nc_ + c[k];
    return idx;
}

void Engine::check_overlap(int i, int j) const {
    const Vec dx = minimal_image(s_.particles[i].position - s_.particles[j].position, d_);
    if (norm(dx) < s_.diameter * (1.0 - kContactTol))
        throw std::runtime_error("overlap detected between particles " + std::to_string(i) + " and " +
                                 std::to_string(j));
}

void Engine::predict_pair(int i, int j) {
    sync(i);
    sync(j);
    const auto& a = s_.particles[i];
    const auto& b = s_.particles[j];
    const Vec dx0 = minimal_image(a.position - b.position, d_);
    if (norm(dx0) < s_.diameter * (1.0 - kContactTol)) check_overlap(i, j);
    const Vec dv = a.velocity - b.velocity;
    std::optional<double> t;
    if (nc_ > 0) {
        t = contact_time(dx0, dv, s_.diameter, kInf, 1, d_);
    } else {
        const double horizon = window_end_ - time_;
        if (horizon < 0.0) return;
        t = contact_time(dx0, dv, s_.diameter, horizon, static_cast<int>(std::ceil(norm(dv) * horizon)) + 1, d_);
    }
    if (t) {
        const int lo = std::min(i, j), hi = std::max(i, j);
        queue_.push(Event{time_ + *t, lo, hi, s_.particles[lo].collision_count, s_.particles[hi].collision_count, 0});
    }
}

void Engine::predict_pairs(int i) {
    const int n = static_cast<int>(s_.particles.size());
    if (nc_ == 0) {
        for (int j = 0; j < n; ++j)
            if (j != i) predict_pair(i, j);
        return;
    }
    const auto& c = cell_of_[i];
    std::array<int, 3> off{-1, -1, d_ > 2 ? -1 : 0};
    while (true) {
        std::array<int, 3> nb{0, 0, 0};
        for (int k = 0; k < d_; ++k) nb[k] = ((c[k] + off[k]) % nc_ + nc_) % nc_;
        for (int j : cells_[cell_index(nb)])
            if (j != i) predict_pair(i, j);
        int ax = 0;
        while (ax < d_ && off[ax] == 1) off[ax++] = -1;
        if (ax == d_) break;
        ++off[ax];
    }
}

void Engine::predict_crossing(int i) {
    if (nc_ == 0) return;
    sync(i);
    const auto& p = s_.particles[i];
    const double width = 1.0 / nc_;
    double best = kInf;
    int axis = -1, dir = 0;
    for (int k = 0; k < d_; ++k) {
        const double v = p.velocity[k];
        if (v == 0.0) continue;
        double rel = p.position[k] - cell_of_[i][k] * width;
        rel -= std::floor(rel + 0.5);
        const double dt = std::max(0.0, v > 0.0 ? (width - rel) / v : -rel / v);
        if (dt < best) {
            best = dt;
            axis = k;
            dir = v > 0.0 ? 1 : -1;
        }
    }
    if (axis >= 0) queue_.push(Event{time_ + best, i, -1 - axis, p.collision_count, 0, dir});
}

void Engine::rebuild(double until) {
    queue_ = {};
    const int n = static_cast<int>(s_.particles.size());
    for (int i = 0; i < n; ++i) sync(i);
    if (nc_ > 0) {
        int total = 1;
        for (int k = 0; k < d_; ++k) total *= nc_;
        cells_.assign(total, {});
        cell_of_.assign(n, {0, 0, 0});
        for (int i = 0; i < n; ++i) {
            for (int k = 0; k < d_; ++k)
                cell_of_[i][k] = std::min(nc_ - 1, static_cast<int>(std::floor(s_.particles[i].position[k] * nc_)));
            cells_[cell_index(cell_of_[i])].push_back(i);
        }
        for (int i = 0; i < n; ++i) predict_crossing(i);
    } else {
        // Without cells, predictions cover a window short enough that every
        // particle moves less than half a period; a refresh event renews it.
        double vmax = 0.0;
        for (const auto& p : s_.particles) vmax = std::max(vmax, norm(p.velocity));
        window_end_ = vmax > 0.0 ? std::min(until, time_ + 0.5 / vmax) : until;
        if (window_end_ < until) queue_.push(Event{window_end_, -1, -1, 0, 0, 0});
    }
    // Each unordered pair is predicted from both sides; duplicates carry equal
    // times and die by epoch once the first executes.
    for (int i = 0; i < n; ++i) predict_pairs(i);
}

std::size_t Engine::advance(double until, std::vector<CollisionRecord>* log, std::size_t max_collisions) {
    if (until < time_) throw std::invalid_argument("advance: target time precedes the state time");
    std::size_t collisions = 0;
    if (max_collisions == 0) return 0;
    rebuild(until);
    bool stopped = false;
    while (!queue_.empty() && queue_.top().t <= until) {
        const Event e = queue_.top();
        queue_.pop();
        if (e.i < 0) {
            time_ = e.t;
            rebuild(until);
        } else if (e.j >= 0) {
            auto& a = s_.particles[e.i];
            auto& b = s_.particles[e.j];
            if (a.collision_count != e.ei || b.collision_count != e.ej) continue;
            if (e.t < time_) throw std::runtime_error("event queue inconsistency: event in the past");
            time_ = e.t;
            sync(e.i);
            sync(e.j);
            const Vec dx = minimal_image(a.position - b.position, d_);
            const double dist = norm(dx);
            if (std::abs(dist / s_.diameter - 1.0) > 1e-6)
                throw std::runtime_error("event queue inconsistency: pair not at contact");
            const Vec omega = (1.0 / dist) * dx;
            auto [va, vb] = scatter(a.velocity, b.velocity, omega);
            a.velocity = va;
            b.velocity = vb;
            ++a.collision_count;
            ++b.collision_count;
            ++events_;
            if (log) log->push_back(CollisionRecord{time_, e.i, e.j, omega});
            if (++collisions >= max_collisions) {
                stopped = true;
                break;
            }
            predict_crossing(e.i);
            predict_crossing(e.j);
            predict_pairs(e.i);
            predict_pairs(e.j);
        } else {
            auto& p = s_.particles[e.i];
            if (p.collision_count != e.ei) continue;
            time_ = e.t;
            sync(e.i);
            const int axis = -1 - e.j;
            auto& bucket = cells_[cell_index(cell_of_[e.i])];
            bucket.erase(std::find(bucket.begin(), bucket.end(), e.i));
            cell_of_[e.i][axis] = ((cell_of_[e.i][axis] + e.dir) % nc_ + nc_) % nc_;
            cells_[cell_index(cell_of_[e.i])].push_back(e.i);
            ++events_;
            predict_crossing(e.i);
            predict_pairs(e.i);
        }
    }
    if (!stopped) time_ = until;
    return collisions;
}

AdvanceOutcome advance(const SystemState& s, double until) {
    Engine e(s);
    AdvanceOutcome out;
    e.advance(until, &out.log);
    out.state = e.state();
    return out;
}

void write_event_log(std::ostream& os, const std::vector<CollisionRecord>& log, int d) {
    os << "time,i,j";
    for (int k = 1; k <= d; ++k) os << ",omega" << k;
    os << '\n';
    for (const auto& r : log) {
        os << fmt17(r.time) << ',' << r.i << ',' << r.j;
        for (int k = 0; k < d; ++k) os << ',' << fmt17(r.omega[k]);
        os << '\n';
    }
}

void write_snapshot(std::ostream& os, const SystemState& s) {
    const int d = s.dimension;
    os << "id";
    for (int k = 1; k <= d; ++k) os << ",x" << k;
    for (int k = 1; k <= d; ++k) os << ",v" << k;
    os << '\n';
    for (std::size_t i = 0; i < s.particles.size(); ++i) {
        os << i;
        for (int k = 0; k < d; ++k) os << ',' << fmt17(s.particles[i].position[k]);
        for (int k = 0; k < d; ++k) os << ',' << fmt17(s.particles[i].velocity[k]);
        os << '\n';
    }
}

}  // namespace bglab::hs
