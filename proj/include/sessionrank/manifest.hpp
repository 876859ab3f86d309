// Run manifest written next to every CLI output.

#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "sessionrank/domain.hpp"
#include "sessionrank/error.hpp"

#ifndef SESSIONRANK_BUILD_ID
#define SESSIONRANK_BUILD_ID "unknown"
#endif

namespace sessionrank {

inline constexpr const char* kBuildId = SESSIONRANK_BUILD_ID;

struct RunManifest {
  std::string command;
  Json config = Json::object();
  std::uint64_t seed = 0;
  std::vector<std::pair<std::string, std::string>> inputs;   // role, path
  std::vector<std::pair<std::string, std::string>> outputs;  // role, path
  std::string build_id = kBuildId;
  double wall_time_s = 0.0;
};

inline Json to_json(const RunManifest& m) {
  Json in = Json::object(), out = Json::object();
  for (const auto& [role, path] : m.inputs) in[role] = path;
  for (const auto& [role, path] : m.outputs) out[role] = path;
  return Json{{"command", m.command}, {"config", m.config},     {"seed", m.seed},
              {"inputs", in},         {"outputs", out},         {"build_id", m.build_id},
              {"wall_time_s", m.wall_time_s}};
}

inline void write_json_file(const std::filesystem::path& path, const Json& j) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw Error(ErrorCode::IoError, "write failed for " + path.string());
}

inline Json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  Json j = Json::parse(in, nullptr, false);
  if (j.is_discarded()) throw Error(ErrorCode::ParseError, path.string());
  return j;
}

/// Measures wall time from construction.
class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

}  // namespace sessionrank
