#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>

// Philox4x32-10 counter-based generator (Salmon et al., SC'11). A (seed,
// stream) pair selects an independent sequence; the draw position is the low
// half of the counter.

namespace bglab {

class Philox {
public:
    using result_type = std::uint64_t;
    static constexpr const char* kName = "philox4x32-10";

    Philox(std::uint64_t seed, std::uint64_t stream) : key_{lo(seed), hi(seed)}, stream_(stream) {}

    static constexpr result_type min() { return 0; }
    static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

    result_type operator()() {
        if (idx_ == 2) {
            block_ = generate(pos_++);
            idx_ = 0;
        }
        const auto& b = block_;
        const result_type r = idx_ == 0 ? (result_type(b[0]) << 32 | b[1]) : (result_type(b[2]) << 32 | b[3]);
        ++idx_;
        return r;
    }

    // Uniform on [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }
    // Uniform on (0, 1).
    double uniform_open() {
        double u;
        do u = uniform();
        while (u == 0.0);
        return u;
    }

    // Box-Muller; the second variate of each pair is kept for the next call.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = uniform_open(), u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        spare_ = r * std::sin(2.0 * std::numbers::pi * u2);
        has_spare_ = true;
        return r * std::cos(2.0 * std::numbers::pi * u2);
    }

    std::uint64_t poisson(double mean);

    std::uint64_t stream() const { return stream_; }

    // Jumps to block `pos` of the stream (each block yields two draws).
    void seek(std::uint64_t pos) {
        pos_ = pos;
        idx_ = 2;
        has_spare_ = false;
    }

private:
    using Block = std::array<std::uint32_t, 4>;
    static std::uint32_t lo(std::uint64_t x) { return static_cast<std::uint32_t>(x); }
    static std::uint32_t hi(std::uint64_t x) { return static_cast<std::uint32_t>(x >> 32); }

    Block generate(std::uint64_t pos) const {
        Block c{lo(pos), hi(pos), lo(stream_), hi(stream_)};
        std::array<std::uint32_t, 2> k = key_;
        for (int round = 0; round < 10; ++round) {
            const std::uint64_t p0 = std::uint64_t{0xD2511F53u} * c[0];
            const std::uint64_t p1 = std::uint64_t{0xCD9E8D57u} * c[2];
            c = {hi(p1) ^ c[1] ^ k[0], lo(p1), hi(p0) ^ c[3] ^ k[1], lo(p0)};
            k[0] += 0x9E3779B9u;
            k[1] += 0xBB67AE85u;
        }
        return c;
    }

    std::array<std::uint32_t, 2> key_;
    std::uint64_t stream_;
    std::uint64_t pos_ = 0;
    Block block_{};
    int idx_ = 2;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

inline std::uint64_t Philox::poisson(double mean) {
    if (!(mean >= 0.0)) return 0;
    if (mean == 0.0) return 0;
    if (mean < 12.0) {
        // multiplication method
        const double L = std::exp(-mean);
        std::uint64_t k = 0;
        double p = uniform();
        while (p > L) {
            ++k;
            p *= uniform();
        }
        return k;
    }
    // PTRS transformed rejection (Hoermann 1993)
    const double slam = std::sqrt(mean), loglam = std::log(mean);
    const double b = 0.931 + 2.53 * slam;
    const double a = -0.059 + 0.02483 * b;
    const double invalpha = 1.1239 + 1.1328 / (b - 3.4);
    const double vr = 0.9277 - 3.6224 / (b - 2.0);
    while (true) {
        const double U = uniform() - 0.5;
        const double V = uniform();
        const double us = 0.5 - std::abs(U);
        const double k = std::floor((2.0 * a / us + b) * U + mean + 0.43);
        if (us >= 0.07 && V <= vr) return static_cast<std::uint64_t>(k);
        if (k < 0.0 || (us < 0.013 && V > us)) continue;
        if (std::log(V) + std::log(invalpha) - std::log(a / (us * us) + b) <=
            -mean + k * loglam - std::lgamma(k + 1.0))
            return static_cast<std::uint64_t>(k);
    }
}

}  // namespace bglab
