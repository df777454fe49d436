#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

namespace cosine {

// All stochastic code draws from this engine. The mapping from raw engine
// output to distributions is done here rather than with <random>
// distributions, whose algorithms differ between standard libraries.
using Rng = std::mt19937_64;

// splitmix64 finalizer; derives independent stream seeds from (seed, index).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

// Uniform on the open interval (0, 1).
double uniform01(Rng& rng);
double uniform(Rng& rng, double lo, double hi);
// Box-Muller, one variate per call.
double normal(Rng& rng, double mean, double stddev);
// Uniform integer in [0, n).
std::uint64_t uniform_index(Rng& rng, std::uint64_t n);

// Shortest decimal string that parses back to exactly `value`.
std::string format_double(double value);
// Strict inverse of format_double (whole string must be consumed).
bool parse_double(std::string_view text, double& out);

// 64-bit FNV-1a, rendered as 16 lowercase hex digits.
std::string fnv1a_hex(std::string_view bytes);

}  // namespace cosine
