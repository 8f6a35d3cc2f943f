#pragma once

// Strict JSON field access: unknown keys and wrong types are ConfigErrors.

#include <initializer_list>
#include <string>

#include <Eigen/Core>
#include <json.hpp>

#include "dcov/errors.hpp"

namespace dcov::json {

using Json = nlohmann::json;

inline void require_object(const Json& j, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
}

inline void reject_unknown(const Json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  require_object(j, where);
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || it.key() == a;
    if (!ok) throw ConfigError(where + ": unknown key '" + it.key() + "'");
  }
}

template <typename T>
void read(const Json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(where + "." + key + ": wrong type");
  }
}

inline void read_vec3(const Json& j, const char* key, Eigen::Vector3d& out, const std::string& where) {
  if (!j.contains(key)) return;
  const Json& v = j.at(key);
  if (!v.is_array() || v.size() != 3) throw ConfigError(where + "." + key + ": expected 3 numbers");
  for (int i = 0; i < 3; ++i) {
    if (!v[static_cast<std::size_t>(i)].is_number()) throw ConfigError(where + "." + key + ": expected 3 numbers");
    out(i) = v[static_cast<std::size_t>(i)].get<double>();
  }
}

}  // namespace dcov::json
