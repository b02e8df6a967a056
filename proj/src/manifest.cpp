#include "ssmtl/manifest.hpp"

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>

#include "ssmtl/error.hpp"

namespace ssmtl {

namespace fs = std::filesystem;

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string config_hash(const nlohmann::json& config) { return hex64(fnv1a(config.dump())); }

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

nlohmann::json RunManifest::to_json() const {
  nlohmann::json j = {{"command", command},
                      {"config", config},
                      {"config_hash", config_hash(config)},
                      {"seed", seed},
                      {"inputs", inputs},
                      {"outputs", outputs},
                      {"tool_version", kToolVersion},
                      {"started_at", started_at},
                      {"finished_at", finished_at}};
  for (const auto& [k, v] : extra.items()) j[k] = v;
  return j;
}

void RunManifest::write(const fs::path& file) const {
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  std::ofstream out(file);
  out << to_json().dump(2) << '\n';
  if (!out) throw Error("failed to write " + file.string());
}

OutputGuard::OutputGuard(std::vector<fs::path> outputs) {
  for (auto& p : outputs)
    if (!fs::exists(p)) fresh_.push_back(std::move(p));
}

OutputGuard::~OutputGuard() {
  if (committed_) return;
  std::error_code ec;
  for (const auto& p : fresh_) fs::remove_all(p, ec);
}

}  // namespace ssmtl
