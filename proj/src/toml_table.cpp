#include "icl/toml_table.hpp"

#include <cmath>
#include <string_view>

#define TOML_EXCEPTIONS 1
#include <toml++/toml.hpp>

namespace icl::toml {

std::string Value::type_name() const {
  if (is_int()) return "integer";
  if (is_float()) return "float";
  if (is_bool()) return "boolean";
  if (is_string()) return "string";
  return "array";
}

namespace {

struct Unsupported {
  int line;
  std::string message;
};

int line_of(const ::toml::node& node) { return static_cast<int>(node.source().begin.line); }

Value convert(const ::toml::node& node) {
  Value v;
  v.line = line_of(node);
  switch (node.type()) {
    case ::toml::node_type::integer: v.data = node.as_integer()->get(); break;
    case ::toml::node_type::floating_point: v.data = node.as_floating_point()->get(); break;
    case ::toml::node_type::boolean: v.data = node.as_boolean()->get(); break;
    case ::toml::node_type::string: v.data = node.as_string()->get(); break;
    case ::toml::node_type::array: {
      Array items;
      for (const auto& item : *node.as_array()) {
        if (item.is_table() || item.is_array()) throw Unsupported{line_of(item), "nested arrays and inline tables are not supported"};
        items.push_back(convert(item));
      }
      v.data = std::move(items);
      break;
    }
    default: throw Unsupported{v.line, "dates and times are not supported"};
  }
  return v;
}

void flatten(const ::toml::table& table, const std::string& prefix, Table& out) {
  for (const auto& [key, node] : table) {
    const std::string name = prefix.empty() ? std::string(key.str()) : prefix + "." + std::string(key.str());
    if (const auto* sub = node.as_table()) {
      flatten(*sub, name, out);
    } else if (node.is_array_of_tables()) {
      throw Unsupported{line_of(node), "arrays of tables are not supported (" + name + ")"};
    } else {
      out[name] = convert(node);
    }
  }
}

}  // namespace

bool parse(const std::string& text, Table& out, ParseError& error) {
  out.clear();
  try {
    const ::toml::table root = ::toml::parse(std::string_view(text));
    flatten(root, "", out);
  } catch (const ::toml::parse_error& e) {
    error = {static_cast<int>(e.source().begin.line), std::string(e.description())};
    return false;
  } catch (const Unsupported& e) {
    error = {e.line, e.message};
    return false;
  }
  return true;
}

}  // namespace icl::toml
