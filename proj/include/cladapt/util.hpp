#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace cladapt::util {

// SplitMix64 mix of (base, stream); used to derive independent sub-seeds.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream);
std::uint64_t derive_seed(std::uint64_t base, std::string_view stream);

std::uint64_t fnv1a64(std::string_view bytes);
std::string hex64(std::uint64_t v);

// Shortest decimal text that parses back to the identical double.
std::string format_double(double v);
double parse_double(std::string_view s);
std::int64_t parse_int(std::string_view s);

// Fixed decimals; "-0.0000" is normalized to "0.0000".
std::string format_fixed(double v, int decimals);

// Splits one line of a plain (unquoted) CSV record.
std::vector<std::string> split_csv(std::string_view line);

// Lower-case, alphanumerics kept, everything else collapsed to '-'.
std::string slugify(std::string_view name);

}  // namespace cladapt::util
