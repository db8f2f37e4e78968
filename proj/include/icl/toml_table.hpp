#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <variant>
#include <vector>

namespace icl::toml {

// Spec files are parsed with toml++ and flattened into "section.key" entries that
// remember their source line, so validation can point at the offending key.
// Nested tables flatten with dots ("a.b.key"); arrays of tables are rejected.

struct Value;
using Array = std::vector<Value>;

struct Value {
  std::variant<std::int64_t, double, bool, std::string, Array> data;
  int line = 0;

  bool is_int() const { return std::holds_alternative<std::int64_t>(data); }
  bool is_float() const { return std::holds_alternative<double>(data); }
  bool is_number() const { return is_int() || is_float(); }
  bool is_bool() const { return std::holds_alternative<bool>(data); }
  bool is_string() const { return std::holds_alternative<std::string>(data); }
  bool is_array() const { return std::holds_alternative<Array>(data); }

  std::int64_t as_int() const { return std::get<std::int64_t>(data); }
  double as_number() const { return is_int() ? static_cast<double>(as_int()) : std::get<double>(data); }
  bool as_bool() const { return std::get<bool>(data); }
  const std::string& as_string() const { return std::get<std::string>(data); }
  const Array& as_array() const { return std::get<Array>(data); }
  std::string type_name() const;
};

using Table = std::map<std::string, Value>;

/// Parse error with a 1-based line number.
struct ParseError {
  int line = 0;
  std::string message;
};

/// Returns false and fills `error` on the first syntax error or unsupported construct.
bool parse(const std::string& text, Table& out, ParseError& error);

}  // namespace icl::toml
