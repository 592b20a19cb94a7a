#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "pforge/config.hpp"
#include "pforge/cropkit.hpp"
#include "pforge/faceio.hpp"
#include "pforge/identity.hpp"

namespace httplib {
class Server;
}

namespace pforge {

using ojson = nlohmann::ordered_json;

/// Similarity applied to a face crop placed on the generator canvas.
/// Rotation is counter-clockwise on screen, about the crop center.
struct PlacementTransform {
  double translate_x = 0.0;
  double translate_y = 0.0;
  double rotation_deg = 0.0;
  double scale = 1.0;
  int canvas_width = 1024;
  int canvas_height = 1024;

  static constexpr double max_scale = 16.0;

  ojson to_json() const;
  static PlacementTransform from_json(const ojson& j);

  friend bool operator==(const PlacementTransform&, const PlacementTransform&) = default;
};

/// Forward 2x3 map from untransformed canvas coordinates to placed ones.
Eigen::Matrix<double, 2, 3> placement_matrix(const PlacementTransform& t);

/// Landmarks with the face-crop center moved to the canvas center.
Landmarks base_placement(const Landmarks& lm, const BBox& face_box, int canvas_width, int canvas_height);

/// c + t + s R (p - c) for every base landmark, c the canvas center.
Landmarks apply_placement(const Landmarks& base, const PlacementTransform& t);

/// Least-squares similarity taking `base` to `placed`, expressed as a
/// transform on the given canvas.
PlacementTransform estimate_placement(const Landmarks& base, const Landmarks& placed, int canvas_width,
                                      int canvas_height);

/// Face crop over a neutral gray canvas under the transform.
ImageBuffer render_placement_preview(const ImageBuffer& reference, const BBox& face_box, const PlacementTransform& t);

struct ReferenceImage {
  std::string id;
  ImageBuffer image;
  std::vector<FaceRecord> faces;
};

enum class Decision { keep, discard };

std::string_view to_string(Decision d);
Decision parse_decision(std::string_view text);

struct GalleryItem {
  std::string id;
  std::optional<double> distance;
  /// "no face" or "backend error" for unranked items.
  std::string badge;
  std::optional<Decision> decision;
  int arrival = 0;
};

struct Session {
  std::string id;
  Bucket bucket;
  int target_keeps = 10;
  std::vector<ReferenceImage> references;
  std::optional<ReferenceProfile> profile;
  std::vector<PlacementTransform> placements;
  std::vector<GalleryItem> gallery;

  int kept() const;
  bool early_stop() const { return kept() >= target_keeps; }
};

struct ApiResponse {
  int status = 200;
  ojson body = ojson::object();
};

/// Session, placement and gallery API under /api/v1. Every state change is
/// appended to state_dir/journal.jsonl; constructing a server over an
/// existing state_dir replays it.
class AppServer {
 public:
  AppServer(AppConfig config, std::shared_ptr<FaceBackend> backend);
  ~AppServer();

  AppServer(const AppServer&) = delete;
  AppServer& operator=(const AppServer&) = delete;

  /// Routes one request. A non-empty request_id makes the call idempotent:
  /// repeats return the first response without touching state.
  ApiResponse handle(std::string_view method, std::string_view path, const std::string& body,
                     const std::string& request_id = {});

  /// Binds host:port (port 0 picks a free one) and returns the bound port.
  int bind(const std::string& host, int port);
  /// Blocks serving requests until stop().
  void listen();
  void stop();

  std::optional<Session> session(const std::string& id) const;
  std::size_t journal_length() const;

 private:
  struct SessionSlot {
    std::mutex mutex;
    Session session;
  };

  ApiResponse dispatch(std::string_view method, const std::vector<std::string>& parts, const std::string& body);
  ApiResponse create_session(const ojson& body);
  ApiResponse add_references(Session& s, const ojson& body);
  ApiResponse frontalness(const Session& s) const;
  ApiResponse placement(Session& s, const ojson& body);
  ApiResponse add_gallery(Session& s, const ojson& body);
  ApiResponse decide(Session& s, const std::string& image_id, const ojson& body);
  ojson session_json(const Session& s) const;
  ojson gallery_json(const Session& s) const;
  std::shared_ptr<SessionSlot> find(const std::string& id) const;
  void append_journal(std::string_view method, std::string_view path, const std::string& body,
                      const std::string& request_id);
  void replay_journal();

  AppConfig config_;
  BucketSet buckets_;
  std::shared_ptr<FaceBackend> backend_;
  mutable std::mutex mutex_;
  std::map<std::string, std::shared_ptr<SessionSlot>> sessions_;
  std::map<std::string, ApiResponse> idempotent_;
  std::uint64_t next_session_ = 1;
  std::size_t journal_length_ = 0;
  bool replaying_ = false;
  std::mutex journal_mutex_;
  std::ofstream journal_;
  std::unique_ptr<httplib::Server> http_;
};

}  // namespace pforge
