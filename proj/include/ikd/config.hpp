#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <set>
#include <string>

namespace ikd {

/// Flat `key = value` settings. '#' starts a comment; blank lines are
/// ignored. Keys are unique; later assignments override earlier ones.
class KeyValues {
 public:
  static KeyValues parse(std::istream& is, const std::string& source = "config");
  static KeyValues load(const std::string& path);

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::map<std::string, std::string>& values() const { return values_; }

  std::string get_string(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key, double fallback) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;

  /// Overlays every entry of `other`.
  void merge(const KeyValues& other);
  /// Throws ContractError naming the first key not in `known`.
  void require_known(const std::set<std::string>& known) const;

  void write(std::ostream& os) const;

 private:
  std::map<std::string, std::string> values_;
};

std::string format_double(double v);

}  // namespace ikd
