#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <limits>
#include <optional>
#include <queue>
#include <vector>

// Event-driven dynamics of hard spheres of diameter eps on the unit torus
// [0,1)^d, d in {2,3}. Vectors always carry three components; the unused one
// stays zero in two dimensions.

namespace bglab::hs {

using Vec = std::array<double, 3>;

inline constexpr double kContactTol = 1e-9;
inline constexpr double kGrazingTol = 1e-12;
inline constexpr double kInf = std::numeric_limits<double>::infinity();

inline double dot(const Vec& a, const Vec& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
inline Vec operator+(const Vec& a, const Vec& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
inline Vec operator-(const Vec& a, const Vec& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
inline Vec operator*(double s, const Vec& a) { return {s * a[0], s * a[1], s * a[2]}; }
double norm(const Vec& a);

// Wraps each of the first d coordinates into [0,1).
Vec wrap(Vec x, int d);
// Representative of x in [-1/2, 1/2)^d.
Vec minimal_image(Vec dx, int d);

struct ParticleState {
    Vec position{};
    Vec velocity{};
    std::uint64_t collision_count = 0;  // epoch used to invalidate queued events
};

struct SystemState {
    std::vector<ParticleState> particles;
    double time = 0.0;
    double diameter = 0.0;
    int dimension = 2;
};

struct CollisionRecord {
    double time;
    int i, j;
    Vec omega;  // (x_i - x_j)/|x_i - x_j| at contact, minimal image
};

// v' = v - ((v-w).w)w, w' = w + ((v-w).w)w. Throws if |omega| != 1 within 1e-12.
std::pair<Vec, Vec> scatter(const Vec& v, const Vec& w, const Vec& omega);

// Contact time (relative to the common current time of a and b) within
// horizon, scanning periodic images up to ceil(|dv|*horizon)+1 per axis.
std::optional<double> predict_pair_collision(const ParticleState& a, const ParticleState& b, double eps,
                                             double horizon, int d);

SystemState free_flow(SystemState s, double dt);

// Smallest minimal-image distance over all pairs (O(N^2); diagnostics only).
double min_pair_distance(const SystemState& s);

class Engine {
public:
    // allow_cells=false forces all-pairs prediction (used to cross-check the cell lists).
    explicit Engine(SystemState s, bool allow_cells = true);

    // Runs the exact event sequence up to `until`, or stops right after the
    // `max_collisions`-th collision. Returns the number of collisions executed.
    std::size_t advance(double until, std::vector<CollisionRecord>* log = nullptr,
                        std::size_t max_collisions = std::numeric_limits<std::size_t>::max());

    // State with every particle synchronized to the engine clock.
    const SystemState& state();
    double time() const { return time_; }
    std::size_t events_processed() const { return events_; }
    int cells_per_axis() const { return nc_; }

private:
    struct Event {
        double t;
        int i, j;  // j < 0: cell crossing of i along axis -j-1; i < 0: prediction refresh
        std::uint64_t ei, ej;
        int dir;
        bool operator>(const Event& o) const {
            if (t != o.t) return t > o.t;
            if (i != o.i) return i > o.i;
            return j > o.j;
        }
    };

    void sync(int i);
    void rebuild(double until);
    void predict_pairs(int i);
    void predict_pair(int i, int j);
    void predict_crossing(int i);
    int cell_index(const std::array<int, 3>& c) const;
    void check_overlap(int i, int j) const;

    SystemState s_;
    std::vector<double> local_time_;
    double time_;
    int d_;
    int nc_ = 0;  // cells per axis; 0 selects all-pairs prediction
    double window_end_ = 0.0;
    std::vector<std::array<int, 3>> cell_of_;
    std::vector<std::vector<int>> cells_;
    std::priority_queue<Event, std::vector<Event>, std::greater<Event>> queue_;
    std::size_t events_ = 0;
};

struct AdvanceOutcome {
    SystemState state;
    std::vector<CollisionRecord> log;
};

AdvanceOutcome advance(const SystemState& s, double until);

// CSV helpers; numbers use 17 significant digits.
void write_event_log(std::ostream& os, const std::vector<CollisionRecord>& log, int d);
void write_snapshot(std::ostream& os, const SystemState& s);

double kinetic_energy(const SystemState& s);  // sum |v|^2 (no 1/2)
Vec total_momentum(const SystemState& s);

}  // namespace bglab::hs
