#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

namespace dgvae::jsonutil {

using json = nlohmann::json;

[[noreturn]] inline void field_error(const std::string& path, const std::string& what) {
  throw std::invalid_argument("field " + path + ": " + what);
}

// Parse errors become "line L, column C: malformed JSON".
inline json parse_located(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    std::size_t line = 1, col = 1;
    for (std::size_t i = 0; i + 1 < e.byte && i < text.size(); ++i) {
      if (text[i] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
    }
    throw std::invalid_argument("line " + std::to_string(line) + ", column " + std::to_string(col) +
                                ": malformed JSON");
  }
}

inline const json& require(const json& obj, const std::string& key, const std::string& path) {
  if (!obj.is_object()) field_error(path, "expected an object");
  auto it = obj.find(key);
  if (it == obj.end()) field_error(path + "." + key, "missing");
  return *it;
}

inline double number(const json& v, const std::string& path) {
  if (!v.is_number()) field_error(path, "expected a number");
  return v.get<double>();
}

inline std::size_t count(const json& v, const std::string& path) {
  if (!v.is_number_integer() || v.get<std::int64_t>() < 0) field_error(path, "expected a non-negative integer");
  return v.get<std::size_t>();
}

inline bool boolean(const json& v, const std::string& path) {
  if (!v.is_boolean()) field_error(path, "expected true or false");
  return v.get<bool>();
}

inline std::string string(const json& v, const std::string& path) {
  if (!v.is_string()) field_error(path, "expected a string");
  return v.get<std::string>();
}

inline const json& array(const json& v, const std::string& path) {
  if (!v.is_array()) field_error(path, "expected an array");
  return v;
}

inline std::string at(const std::string& path, std::size_t i) { return path + "[" + std::to_string(i) + "]"; }

inline std::vector<double> number_list(const json& v, const std::string& path) {
  std::vector<double> out;
  for (std::size_t i = 0; i < array(v, path).size(); ++i) out.push_back(number(v[i], at(path, i)));
  return out;
}

}  // namespace dgvae::jsonutil
