#pragma once

#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "aov/error.hpp"

namespace aov {

namespace detail {

inline bool schema_type_matches(const std::string& type, const nlohmann::json& doc) {
  if (type == "object") return doc.is_object();
  if (type == "array") return doc.is_array();
  if (type == "string") return doc.is_string();
  if (type == "boolean") return doc.is_boolean();
  if (type == "integer") return doc.is_number_integer() || doc.is_number_unsigned();
  if (type == "number") return doc.is_number();
  if (type == "null") return doc.is_null();
  throw UsageError("schema: unsupported type \"" + type + "\"");
}

inline void schema_check(const nlohmann::json& schema, const nlohmann::json& doc,
                         const std::string& path, std::vector<std::string>& errors) {
  if (!schema.is_object()) throw UsageError("schema: every schema node must be an object");
  if (schema.contains("type")) {
    const auto type = schema.at("type").get<std::string>();
    if (!schema_type_matches(type, doc)) {
      errors.push_back(path + ": expected " + type + ", got " + doc.type_name());
      return;  // further keyword checks would misfire on the wrong type
    }
  }
  if (schema.contains("enum")) {
    bool hit = false;
    for (const auto& v : schema.at("enum"))
      if (v == doc) {
        hit = true;
        break;
      }
    if (!hit) errors.push_back(path + ": value not in enum");
  }
  if (doc.is_number()) {
    if (schema.contains("minimum") && doc.get<double>() < schema.at("minimum").get<double>())
      errors.push_back(path + ": below minimum " + schema.at("minimum").dump());
    if (schema.contains("maximum") && doc.get<double>() > schema.at("maximum").get<double>())
      errors.push_back(path + ": above maximum " + schema.at("maximum").dump());
  }
  if (doc.is_object()) {
    if (schema.contains("required"))
      for (const auto& key : schema.at("required"))
        if (!doc.contains(key.get<std::string>()))
          errors.push_back(path + ": missing required key \"" + key.get<std::string>() + "\"");
    if (schema.contains("properties"))
      for (auto& [key, sub] : schema.at("properties").items())
        if (doc.contains(key)) schema_check(sub, doc.at(key), path + "." + key, errors);
  }
  if (doc.is_array() && schema.contains("items")) {
    const auto& sub = schema.at("items");
    for (std::size_t i = 0; i < doc.size(); ++i)
      schema_check(sub, doc[i], path + "[" + std::to_string(i) + "]", errors);
  }
}

}  // namespace detail

// Minimal JSON-schema subset: type, required, properties, items, enum,
// minimum, maximum. Returns a list of violations; empty means valid.
inline std::vector<std::string> validate_schema(const nlohmann::json& schema,
                                                const nlohmann::json& doc) {
  std::vector<std::string> errors;
  detail::schema_check(schema, doc, "$", errors);
  return errors;
}

inline nlohmann::json load_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open " + path);
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + ": bad JSON: " + e.what());
  }
}

}  // namespace aov
