/** \file rng.hpp
 *  \brief Counter-based splittable random number generator.
 *
 *  Every sample is a pure function of (seed, stream, counter), so any check
 *  can draw its points independently of evaluation order and a report is
 *  reproducible byte-for-byte from the seed alone.  The mixer is the
 *  SplitMix64 finalizer applied to a Weyl-sequenced counter, keyed per
 *  stream; statistical quality is far beyond what the Monte Carlo error
 *  targets here require.
 */
#pragma once

#include <cstdint>
#include <string>

#include "conjlab/rational.hpp"

namespace conjlab {

namespace detail {
inline std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}
/// FNV-1a over a label, used to derive stream keys from check names.
inline std::uint64_t hash_label(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) { h ^= c; h *= 0x100000001b3ULL; }
    return h;
}
}  // namespace detail

class CounterRng {
  public:
    CounterRng(std::uint64_t seed, const std::string& stream)
        : key_(detail::mix64(seed ^ detail::mix64(detail::hash_label(stream)))) {}

    /// i-th raw 64-bit word of the stream.
    std::uint64_t word(std::uint64_t i) const { return detail::mix64(key_ + i * 0x9e3779b97f4a7c15ULL); }

    /// i-th uniform double in [0,1) with 53 random bits.
    double uniform01(std::uint64_t i) const {
        return double(word(i) >> 11) * 0x1.0p-53;
    }

    /// i-th uniform dyadic rational k/2^53 in [0,1), exact.
    Rat uniform_rat(std::uint64_t i) const {
        return Rat(Int(word(i) >> 11), ipow(Int(2), 53));
    }

    /// i-th uniform integer in [0, bound) for an arbitrary-size bound.
    /// Uses enough 64-bit words to make modulo bias negligible (>=64 spare bits).
    Int uniform_int(std::uint64_t i, const Int& bound) const {
        unsigned words = 1;
        Int b = bound;
        while (b > 0) { b >>= 64; ++words; }
        Int acc = 0;
        for (unsigned w = 0; w < words; ++w) {
            acc <<= 64;
            acc += Int(word(i * 0x100 + w + 1));
        }
        return acc % bound;
    }

    /// Derived generator for a sub-stream (e.g. one partition element).
    CounterRng split(std::uint64_t child) const {
        CounterRng r = *this;
        r.key_ = detail::mix64(key_ ^ detail::mix64(child + 0x517cc1b727220a95ULL));
        return r;
    }

  private:
    std::uint64_t key_;
};

}  // namespace conjlab
