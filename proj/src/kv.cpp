#include "attbalance/kv.hpp"

#include <charconv>
#include <system_error>

#include "attbalance/errors.hpp"

namespace attbalance {

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string format_int(std::int64_t v) { return std::to_string(v); }
std::string format_u64(std::uint64_t v) { return std::to_string(v); }
std::string format_bool(bool v) { return v ? "true" : "false"; }

double parse_double(const std::string& s) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw ConfigError("cannot parse floating value: '" + s + "'");
  }
  return v;
}

std::int64_t parse_int(const std::string& s) {
  std::int64_t v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw ConfigError("cannot parse integer value: '" + s + "'");
  }
  return v;
}

std::uint64_t parse_u64(const std::string& s) {
  std::uint64_t v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw ConfigError("cannot parse unsigned value: '" + s + "'");
  }
  return v;
}

bool parse_bool(const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError("cannot parse boolean value: '" + s + "'");
}

const std::string* find_kv(const KvPairs& kv, const std::string& key) {
  for (const auto& [k, v] : kv) {
    if (k == key) return &v;
  }
  return nullptr;
}

}  // namespace attbalance
