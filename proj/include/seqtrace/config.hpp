#pragma once

// Canonical key=value serialization + FNV hash, used to stamp every
// artifact (manifest, checkpoint, report) with the config that produced it.

#include <cstdint>
#include <cstdio>
#include <string>

namespace seqtrace {

inline uint64_t fnv1a64(const std::string& s) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return std::string(buf);
}

// Builds "k1=v1;k2=v2;..." in insertion order.
struct KvBuilder {
  std::string s;

  KvBuilder& add(const std::string& k, const std::string& v) {
    s += k;
    s += '=';
    s += v;
    s += ';';
    return *this;
  }
  KvBuilder& add(const std::string& k, long long v) {
    return add(k, std::to_string(v));
  }
  KvBuilder& add(const std::string& k, int v) {
    return add(k, static_cast<long long>(v));
  }
  KvBuilder& add(const std::string& k, unsigned long long v) {
    return add(k, std::to_string(v));
  }
  KvBuilder& add(const std::string& k, double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return add(k, std::string(buf));
  }
  KvBuilder& add(const std::string& k, bool v) {
    return add(k, std::string(v ? "true" : "false"));
  }

  std::string hash() const { return hex64(fnv1a64(s)); }
};

}  // namespace seqtrace
