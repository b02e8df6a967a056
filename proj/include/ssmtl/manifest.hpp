#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace ssmtl {

inline constexpr std::string_view kToolVersion = "0.1.0";

// 64-bit FNV-1a.
std::uint64_t fnv1a(std::string_view bytes);
std::string hex64(std::uint64_t v);

// Hash of the canonical JSON dump (sorted keys, no whitespace).
std::string config_hash(const nlohmann::json& config);

std::string utc_timestamp();

struct RunManifest {
  std::string command;
  nlohmann::json config;  // effective configuration
  std::uint64_t seed = 0;
  nlohmann::json inputs = nlohmann::json::object();
  nlohmann::json outputs = nlohmann::json::object();
  nlohmann::json extra = nlohmann::json::object();
  std::string started_at;
  std::string finished_at;

  nlohmann::json to_json() const;
  void write(const std::filesystem::path& file) const;
};

// Records which output paths did not exist before a command ran and deletes exactly those
// unless commit() is called.
class OutputGuard {
 public:
  explicit OutputGuard(std::vector<std::filesystem::path> outputs);
  ~OutputGuard();
  OutputGuard(const OutputGuard&) = delete;
  OutputGuard& operator=(const OutputGuard&) = delete;

  void commit() { committed_ = true; }

 private:
  std::vector<std::filesystem::path> fresh_;
  bool committed_ = false;
};

}  // namespace ssmtl
