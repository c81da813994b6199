#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <vector>

namespace penwise {

/// Counter-based generator: every draw is a pure function of
/// (seed, stream, counter), so independent streams can be split off
/// without sharing state.
class Rng {
  public:
    explicit Rng(std::uint64_t seed, std::uint64_t stream = 0)
        : m_seed(seed), m_stream(stream), m_key(mix(seed ^ mix(stream + 0x632BE59BD9B4E019ULL)))
    {}

    static constexpr std::uint64_t mix(std::uint64_t x)
    {
        x += 0x9E3779B97F4A7C15ULL;
        x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
        x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
        return x ^ (x >> 31);
    }

    std::uint64_t next_u64() { return mix(m_key + 0x9E3779B97F4A7C15ULL * ++m_counter); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Uniform integer in [0, n).
    std::size_t below(std::size_t n)
    {
        if (n == 0) {
            return 0;
        }
        return static_cast<std::size_t>(uniform() * static_cast<double>(n)) % n;
    }

    bool bernoulli(double p) { return uniform() < p; }

    /// Standard normal via Box-Muller; platform independent, unlike
    /// std::normal_distribution.
    double normal()
    {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) {
            u1 = 1e-300;
        }
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    /// Independent child stream; does not advance this generator.
    [[nodiscard]] Rng split(std::uint64_t index) const
    {
        return Rng(m_seed, mix(m_stream * 0xD1B54A32D192ED03ULL + index + 1));
    }

    template <typename T>
    void shuffle(std::vector<T>& items)
    {
        for (std::size_t i = items.size(); i > 1; --i) {
            std::size_t j = below(i);
            std::swap(items[i - 1], items[j]);
        }
    }

    std::uint64_t seed() const { return m_seed; }

  private:
    std::uint64_t m_seed;
    std::uint64_t m_stream;
    std::uint64_t m_key;
    std::uint64_t m_counter = 0;
};

}  // namespace penwise
