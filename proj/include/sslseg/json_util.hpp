#pragma once

#include <initializer_list>
#include <string>

#include <nlohmann/json.hpp>

namespace sslseg {

/// Rejects unknown keys so config typos fail loudly instead of silently
/// falling back to defaults.
inline void check_json_keys(const nlohmann::json& j,
                            std::initializer_list<const char*> allowed,
                            const std::string& who) {
  if (!j.is_object())
    throw std::invalid_argument(who + ": expected a JSON object");
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* a : allowed)
      if (key == a) {
        ok = true;
        break;
      }
    if (!ok) throw std::invalid_argument(who + ": unknown key \"" + key + "\"");
  }
}

template <class T>
T json_get_or(const nlohmann::json& j, const char* key, T fallback) {
  if (const auto it = j.find(key); it != j.end()) return it->get<T>();
  return fallback;
}

}  // namespace sslseg
