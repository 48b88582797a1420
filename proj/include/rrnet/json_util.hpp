#pragma once

#include <initializer_list>
#include <string>

#include "json.hpp"
#include "rrnet/errors.hpp"

namespace rrnet {

using json = nlohmann::json;

/// Throws ConfigError for any key of `j` outside `allowed`.
inline void reject_unknown_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* k : allowed) known = known || it.key() == k;
    if (!known) throw ConfigError("unknown key '" + (where.empty() ? "" : where + ".") + it.key() + "'");
  }
}

/// Reads `j[key]` into `out` when present.
template <typename T>
void read_field(const json& j, const char* key, T& out, const std::string& where) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    out = it->get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("field '" + (where.empty() ? "" : where + ".") + key + "': " + e.what());
  }
}

}  // namespace rrnet
