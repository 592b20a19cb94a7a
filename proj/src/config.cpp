#include "pforge/config.hpp"

#include <cstdlib>

#include <json.hpp>

#include "pforge/imageio.hpp"

namespace fs = std::filesystem;

namespace pforge {

BucketSet AppConfig::buckets() const { return buckets_file ? BucketSet::load(*buckets_file) : BucketSet::sdxl(); }

AppConfig parse_config(std::string_view json_text, const fs::path& base_dir) {
  AppConfig c;
  auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() || base_dir.empty() ? fs::path(p) : base_dir / p; };
  try {
    const auto j = nlohmann::json::parse(json_text);
    if (j.contains("face_backend")) {
      const auto& b = j["face_backend"];
      c.face_backend.kind = parse_backend_kind(b.value("kind", std::string("stub")));
      c.face_backend.location = b.value("location", std::string{});
      if (c.face_backend.kind == BackendKind::neural_model_file && !c.face_backend.location.empty())
        c.face_backend.location = resolve(c.face_backend.location).string();
      c.face_backend.timeout = std::chrono::milliseconds(b.value("timeout_ms", 30000));
      c.face_backend.pool_size = b.value("pool_size", 1);
      if (b.contains("input_shape")) c.face_backend.input_shape = b["input_shape"].get<std::array<int, 3>>();
    }
    if (j.contains("generator")) {
      const auto& g = j["generator"];
      c.generator.endpoint = g.value("endpoint", std::string("mock://"));
      c.generator.retries = g.value("retries", 2);
      c.generator.timeout = std::chrono::milliseconds(g.value("timeout_ms", 120000));
      if (g.contains("replay_log")) c.generator.replay_log = resolve(g["replay_log"].get<std::string>());
    }
    if (j.contains("buckets_file")) c.buckets_file = resolve(j["buckets_file"].get<std::string>());
    if (j.contains("server")) {
      const auto& s = j["server"];
      c.host = s.value("host", c.host);
      c.port = s.value("port", c.port);
      if (s.contains("state_dir")) c.state_dir = resolve(s["state_dir"].get<std::string>());
      if (s.contains("static_dir")) c.static_dir = resolve(s["static_dir"].get<std::string>());
    }
    if (j.contains("filter")) {
      const auto& f = j["filter"];
      const auto mode = f.value("mode", std::string("top_k_percent"));
      if (mode == "top_k_percent") c.filter.mode = FilterPolicy::Mode::top_k_percent;
      else if (mode == "quantile") c.filter.mode = FilterPolicy::Mode::quantile;
      else fail(ErrorKind::invalid_argument, "filter.mode must be top_k_percent or quantile");
      c.filter.k_percent = f.value("k_percent", c.filter.k_percent);
      c.filter.q = f.value("q", c.filter.q);
      c.filter.min_n = f.value("min_n", c.filter.min_n);
    }
    if (j.contains("gallery")) c.target_keeps = j["gallery"].value("target_keeps", c.target_keeps);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::invalid_argument, std::string("malformed config: ") + e.what());
  }
  return c;
}

AppConfig load_config(const std::optional<fs::path>& path) {
  std::optional<fs::path> file = path;
  if (!file)
    if (const char* env = std::getenv(config_env_var); env != nullptr && *env != '\0') file = fs::path(env);
  if (!file) return AppConfig{};
  return parse_config(read_text(*file), file->parent_path());
}

}  // namespace pforge
