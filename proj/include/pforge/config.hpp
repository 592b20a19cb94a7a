#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include "pforge/cropkit.hpp"
#include "pforge/faceio.hpp"
#include "pforge/genflow.hpp"
#include "pforge/identity.hpp"

namespace pforge {

inline constexpr const char* config_env_var = "PORTRAIT_FORGE_CONFIG";

/// Keys (all optional):
///   face_backend: {kind, location, timeout_ms, pool_size, input_shape}
///   generator:    {endpoint, retries, timeout_ms, replay_log}
///   buckets_file
///   server:       {host, port, state_dir, static_dir}
///   filter:       {mode, k_percent, q, min_n}
///   gallery:      {target_keeps}
struct AppConfig {
  BackendConfig face_backend;
  HttpGeneratorConfig generator{"mock://"};
  std::optional<std::filesystem::path> buckets_file;
  std::string host = "127.0.0.1";
  int port = 8080;
  std::filesystem::path state_dir = "portrait-forge-state";
  std::optional<std::filesystem::path> static_dir;
  FilterPolicy filter;
  int target_keeps = 10;

  BucketSet buckets() const;
};

AppConfig parse_config(std::string_view json_text, const std::filesystem::path& base_dir = {});
/// Reads `path`, or the file named by PORTRAIT_FORGE_CONFIG, or defaults.
AppConfig load_config(const std::optional<std::filesystem::path>& path);

}  // namespace pforge
