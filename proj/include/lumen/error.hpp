#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace lumen {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape contract violated by an op; `axis` names the offending dimension.
class DimensionError : public Error {
 public:
  DimensionError(const std::string& op, const std::string& axis, std::size_t expected,
                 std::size_t actual);
  DimensionError(const std::string& op, const std::string& axis, const std::string& detail);

  const std::string& axis() const noexcept { return axis_; }

 private:
  std::string axis_;
};

// Malformed input text or bytes. `location` is a 1-based line number for text
// formats and a byte offset for binary formats.
class ParseError : public Error {
 public:
  ParseError(const std::string& message, std::size_t location);

  std::size_t location() const noexcept { return location_; }

 private:
  std::size_t location_;
};

// Invalid configuration value or unknown key.
class ConfigError : public Error {
 public:
  ConfigError(const std::string& key, const std::string& message);

  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

}  // namespace lumen
