#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace attbalance {

// Ordered key-value pairs; the common currency between config files,
// dataset headers, and checkpoint metadata blocks.
using KvPairs = std::vector<std::pair<std::string, std::string>>;

// Shortest round-trip decimal form; exact on reparse.
std::string format_double(double v);
std::string format_int(std::int64_t v);
std::string format_u64(std::uint64_t v);
std::string format_bool(bool v);

double parse_double(const std::string& s);
std::int64_t parse_int(const std::string& s);
std::uint64_t parse_u64(const std::string& s);
bool parse_bool(const std::string& s);

const std::string* find_kv(const KvPairs& kv, const std::string& key);

}  // namespace attbalance
