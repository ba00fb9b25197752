#pragma once

#include <copyattack/common.hpp>
#include <copyattack/hash.hpp>

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>

namespace copyattack {

/// Adds `format` and a checksum over the remaining content.
inline nlohmann::json seal(nlohmann::json body, const std::string& format) {
  body["format"] = format;
  body.erase("checksum");
  body["checksum"] = fnv1a_hex(body.dump());
  return body;
}

/// Checks format tag and checksum; returns the body without the checksum.
inline nlohmann::json unseal(const nlohmann::json& j, const std::string& format) {
  if (!j.is_object() || !j.contains("format") || j["format"] != format) {
    throw IntegrityError("not a " + format + " checkpoint");
  }
  if (!j.contains("checksum") || !j["checksum"].is_string()) {
    throw IntegrityError(format + " checkpoint has no checksum");
  }
  nlohmann::json body = j;
  const std::string stored = body["checksum"];
  body.erase("checksum");
  if (fnv1a_hex(body.dump()) != stored) throw IntegrityError(format + " checkpoint checksum mismatch");
  return body;
}

inline void write_json_file(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump() << '\n';
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception&) {
    throw IntegrityError("not valid JSON: " + path.string());
  }
}

}  // namespace copyattack
