#pragma once

// Seeded randomness with a platform-independent output sequence.
//
// std::mt19937_64 output is fixed by the standard, the distributions are not,
// so bounded integers and shuffles are derived here directly from raw engine
// output. Every random decision in the library goes through this header.

#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

namespace ictx {

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// FNV-1a, 64 bit. Stable across runs and platforms, used to fold string keys
/// (image ids, labels) into seeds.
constexpr std::uint64_t hash_string(std::string_view s) noexcept {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Derives an independent child seed from a parent and a path of keys.
/// Each key is folded in order, so (master, iteration, image) streams never
/// collide with (master, image, iteration) and adding keys elsewhere in a
/// run does not perturb existing streams.
inline std::uint64_t derive_seed(std::uint64_t master, std::initializer_list<std::uint64_t> path) noexcept {
    std::uint64_t s = splitmix64(master);
    for (std::uint64_t k : path) s = splitmix64(s ^ splitmix64(k + 0x632be59bd9b4e019ULL));
    return s;
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(splitmix64(seed)) {}

    std::uint64_t next() { return engine_(); }

    /// Uniform integer in [0, bound). bound must be non-zero.
    std::uint64_t below(std::uint64_t bound) {
        // rejection on the largest multiple of bound
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % bound);
        std::uint64_t x = 0;
        do {
            x = engine_();
        } while (x >= limit);
        return x % bound;
    }

    template <typename T>
    void shuffle(std::span<T> items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(below(i));
            std::swap(items[i - 1], items[j]);
        }
    }

    /// k distinct indices from [0, n), in draw order (partial Fisher-Yates).
    std::vector<std::size_t> sample_indices(std::size_t n, std::size_t k) {
        std::vector<std::size_t> idx(n);
        for (std::size_t i = 0; i < n; ++i) idx[i] = i;
        for (std::size_t i = 0; i < k; ++i) {
            const auto j = i + static_cast<std::size_t>(below(n - i));
            std::swap(idx[i], idx[j]);
        }
        idx.resize(k);
        return idx;
    }

private:
    std::mt19937_64 engine_;
};

}  // namespace ictx
