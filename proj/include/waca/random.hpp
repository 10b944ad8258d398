#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

#include "waca/tensor.hpp"

namespace waca {

// Portable draws on top of mt19937_64: the standard distributions are
// implementation-defined, which would break byte-identical reruns across
// toolchains.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(splitmix(seed)) {}

    // Independent stream keyed by several integers, e.g. (seed, epoch, index).
    static Rng keyed(std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) {
        return Rng(splitmix(splitmix(splitmix(a) ^ (b + 0x632be59bd9b4e019ULL)) ^ (c + 0x9e3779b97f4a7c15ULL)));
    }

    std::uint64_t next() { return engine_(); }

    // [0, 1)
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Integer in [lo, hi].
    std::int64_t integer(std::int64_t lo, std::int64_t hi) {
        const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
        return lo + static_cast<std::int64_t>(engine_() % span);
    }

    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    template <class It>
    void shuffle(It first, It last) {
        const auto n = static_cast<std::int64_t>(last - first);
        for (std::int64_t i = n - 1; i > 0; --i) std::swap(first[i], first[integer(0, i)]);
    }

private:
    static std::uint64_t splitmix(std::uint64_t x) {
        x += 0x9e3779b97f4a7c15ULL;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
        return x ^ (x >> 31);
    }

    std::mt19937_64 engine_;
};

// Normal(0, std) resampled until within two standard deviations.
template <class T>
Tensor<T> trunc_normal(Shape shape, double stddev, Rng& rng) {
    Tensor<T> t(std::move(shape));
    for (auto& v : t.mutable_data()) {
        double z = rng.normal();
        while (std::abs(z) > 2.0) z = rng.normal();
        v = static_cast<T>(z * stddev);
    }
    return t;
}

template <class T>
Tensor<T> uniform_tensor(Shape shape, double lo, double hi, Rng& rng) {
    Tensor<T> t(std::move(shape));
    for (auto& v : t.mutable_data()) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
}

}  // namespace waca
