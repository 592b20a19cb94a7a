#include "pforge/appserver.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>
#include <sstream>

#include <Eigen/Geometry>
#include <httplib.h>

#include "pforge/genflow.hpp"
#include "pforge/imageio.hpp"
#include "pforge/imgcore.hpp"
#include "pforge/report_io.hpp"

namespace fs = std::filesystem;

namespace pforge {

namespace {

constexpr double deg2rad = std::numbers::pi / 180.0;
constexpr double frontal_limit_deg = 30.0;
const Rgb preview_gray{128, 128, 128};

Eigen::Matrix2d screen_rotation(double deg) {
  const double c = std::cos(deg * deg2rad);
  const double s = std::sin(deg * deg2rad);
  Eigen::Matrix2d r;
  r << c, s, -s, c;
  return r;
}

Eigen::Vector2d canvas_center(int w, int h) { return {w / 2.0, h / 2.0}; }

ApiResponse error_response(int status, std::string kind, const std::string& message) {
  ApiResponse r;
  r.status = status;
  r.body["error"] = std::move(kind);
  r.body["message"] = message;
  return r;
}

int status_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::backend_error:
    case ErrorKind::generator_unreachable:
    case ErrorKind::generation_failed:
      return 502;
    case ErrorKind::io_error:
      return 500;
    default:
      return 422;
  }
}

std::vector<std::string> split_path(std::string_view path) {
  std::vector<std::string> parts;
  std::size_t i = 0;
  while (i < path.size()) {
    while (i < path.size() && path[i] == '/') ++i;
    std::size_t j = i;
    while (j < path.size() && path[j] != '/') ++j;
    if (j > i) parts.emplace_back(path.substr(i, j - i));
    i = j;
  }
  return parts;
}

bool is_mutation(std::string_view method) { return method == "POST"; }

// Index of the reference whose first face is the most frontal.
std::optional<std::size_t> placement_reference(const Session& s) {
  std::optional<std::size_t> best;
  double best_yaw = 0.0;
  for (std::size_t i = 0; i < s.references.size(); ++i) {
    const auto& faces = s.references[i].faces;
    if (faces.empty()) continue;
    const double yaw = std::abs(faces.front().yaw_deg.value_or(0.0));
    if (!best || yaw < best_yaw) {
      best = i;
      best_yaw = yaw;
    }
  }
  return best;
}

}  // namespace

ojson PlacementTransform::to_json() const {
  ojson j;
  j["translate_x"] = translate_x;
  j["translate_y"] = translate_y;
  j["rotation_deg"] = rotation_deg;
  j["scale"] = scale;
  j["canvas_width"] = canvas_width;
  j["canvas_height"] = canvas_height;
  return j;
}

PlacementTransform PlacementTransform::from_json(const ojson& j) {
  PlacementTransform t;
  try {
    t.translate_x = j.value("translate_x", 0.0);
    t.translate_y = j.value("translate_y", 0.0);
    t.rotation_deg = j.value("rotation_deg", 0.0);
    t.scale = j.value("scale", 1.0);
    t.canvas_width = j.value("canvas_width", t.canvas_width);
    t.canvas_height = j.value("canvas_height", t.canvas_height);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::invalid_argument, std::string("malformed transform: ") + e.what());
  }
  if (!std::isfinite(t.translate_x) || !std::isfinite(t.translate_y) || !std::isfinite(t.rotation_deg))
    fail(ErrorKind::invalid_argument, "transform values must be finite");
  if (!(t.scale > 0.0 && t.scale <= max_scale)) fail(ErrorKind::invalid_argument, "scale must lie in (0, 16]");
  return t;
}

Eigen::Matrix<double, 2, 3> placement_matrix(const PlacementTransform& t) {
  const Eigen::Vector2d c = canvas_center(t.canvas_width, t.canvas_height);
  const Eigen::Matrix2d a = t.scale * screen_rotation(t.rotation_deg);
  Eigen::Matrix<double, 2, 3> m;
  m.leftCols<2>() = a;
  m.col(2) = c + Eigen::Vector2d(t.translate_x, t.translate_y) - a * c;
  return m;
}

Landmarks base_placement(const Landmarks& lm, const BBox& face_box, int canvas_width, int canvas_height) {
  const Eigen::Vector2d shift = canvas_center(canvas_width, canvas_height) - face_box.center();
  Landmarks out;
  for (std::size_t i = 0; i < lm.size(); ++i) out[i] = lm[i] + shift;
  return out;
}

Landmarks apply_placement(const Landmarks& base, const PlacementTransform& t) {
  const auto m = placement_matrix(t);
  Landmarks out;
  for (std::size_t i = 0; i < base.size(); ++i) out[i] = m.leftCols<2>() * base[i] + m.col(2);
  return out;
}

PlacementTransform estimate_placement(const Landmarks& base, const Landmarks& placed, int canvas_width,
                                      int canvas_height) {
  Eigen::Matrix<double, 2, 5> src, dst;
  for (int i = 0; i < 5; ++i) {
    src.col(i) = base[i];
    dst.col(i) = placed[i];
  }
  const Eigen::Matrix3d m = Eigen::umeyama(src, dst, true);
  const Eigen::Matrix2d a = m.topLeftCorner<2, 2>();
  PlacementTransform t;
  t.canvas_width = canvas_width;
  t.canvas_height = canvas_height;
  t.scale = std::sqrt(std::abs(a.determinant()));
  t.rotation_deg = std::atan2(a(0, 1), a(0, 0)) / deg2rad;
  const Eigen::Vector2d c = canvas_center(canvas_width, canvas_height);
  const Eigen::Vector2d tr = m.topRightCorner<2, 1>() + a * c - c;
  t.translate_x = tr.x();
  t.translate_y = tr.y();
  return t;
}

ImageBuffer render_placement_preview(const ImageBuffer& reference, const BBox& face_box, const PlacementTransform& t) {
  const int left = std::clamp(static_cast<int>(std::floor(face_box.left)), 0, reference.width() - 1);
  const int top = std::clamp(static_cast<int>(std::floor(face_box.top)), 0, reference.height() - 1);
  const int right = std::clamp(static_cast<int>(std::ceil(face_box.left + face_box.width)), left + 1, reference.width());
  const int bottom =
      std::clamp(static_cast<int>(std::ceil(face_box.top + face_box.height)), top + 1, reference.height());
  const ImageBuffer face = crop(to_rgb(reference), {left, top, right - left, bottom - top});

  // canvas = A (p - box_center + c) + b  =>  p = A^-1 (canvas - b) + box_center - c
  const auto m = placement_matrix(t);
  const Eigen::Matrix2d inv = m.leftCols<2>().inverse();
  const Eigen::Vector2d c = canvas_center(t.canvas_width, t.canvas_height);
  Eigen::Matrix<double, 2, 3> out_to_src;
  out_to_src.leftCols<2>() = inv;
  out_to_src.col(2) = -inv * m.col(2) + face_box.center() - c - Eigen::Vector2d(left, top);
  return warp_affine(face, out_to_src, t.canvas_width, t.canvas_height, preview_gray);
}

std::string_view to_string(Decision d) { return d == Decision::keep ? "keep" : "discard"; }

Decision parse_decision(std::string_view text) {
  if (text == "keep") return Decision::keep;
  if (text == "discard") return Decision::discard;
  fail(ErrorKind::invalid_argument, "decision must be keep or discard");
}

int Session::kept() const {
  return static_cast<int>(std::count_if(gallery.begin(), gallery.end(),
                                        [](const GalleryItem& g) { return g.decision == Decision::keep; }));
}

AppServer::AppServer(AppConfig config, std::shared_ptr<FaceBackend> backend)
    : config_(std::move(config)), buckets_(config_.buckets()), backend_(std::move(backend)) {
  if (!backend_) fail(ErrorKind::invalid_argument, "app server needs a face backend");
  std::error_code ec;
  fs::create_directories(config_.state_dir, ec);
  if (ec) fail(ErrorKind::io_error, "cannot create state dir " + config_.state_dir.string());
  replay_journal();
  journal_.open(config_.state_dir / "journal.jsonl", std::ios::app | std::ios::binary);
  if (!journal_) fail(ErrorKind::io_error, "cannot open journal in " + config_.state_dir.string());
}

AppServer::~AppServer() { stop(); }

void AppServer::replay_journal() {
  const fs::path path = config_.state_dir / "journal.jsonl";
  if (!fs::exists(path)) return;
  std::istringstream lines(read_text(path));
  std::string line;
  replaying_ = true;
  while (std::getline(lines, line)) {
    if (line.empty()) continue;
    ojson e;
    try {
      e = ojson::parse(line);
    } catch (const nlohmann::json::exception&) {
      // a torn final write
      break;
    }
    handle(e.at("method").get<std::string>(), e.at("path").get<std::string>(), e.at("body").get<std::string>(),
           e.value("request_id", std::string{}));
    ++journal_length_;
  }
  replaying_ = false;
}

void AppServer::append_journal(std::string_view method, std::string_view path, const std::string& body,
                               const std::string& request_id) {
  if (replaying_) return;
  ojson e;
  e["method"] = method;
  e["path"] = path;
  e["request_id"] = request_id;
  e["body"] = body;
  std::lock_guard lock(journal_mutex_);
  journal_ << e.dump() << '\n';
  journal_.flush();
  ++journal_length_;
}

std::size_t AppServer::journal_length() const { return journal_length_; }

std::shared_ptr<AppServer::SessionSlot> AppServer::find(const std::string& id) const {
  std::lock_guard lock(mutex_);
  const auto it = sessions_.find(id);
  return it == sessions_.end() ? nullptr : it->second;
}

std::optional<Session> AppServer::session(const std::string& id) const {
  const auto slot = find(id);
  if (!slot) return std::nullopt;
  std::lock_guard lock(slot->mutex);
  return slot->session;
}

ApiResponse AppServer::handle(std::string_view method, std::string_view path, const std::string& body,
                              const std::string& request_id) {
  const bool mutation = is_mutation(method);
  if (mutation && !request_id.empty()) {
    std::lock_guard lock(mutex_);
    if (const auto it = idempotent_.find(request_id); it != idempotent_.end()) return it->second;
  }
  const auto parts = split_path(path);
  if (parts.size() < 3 || parts[0] != "api" || parts[1] != "v1")
    return error_response(404, "not-found", "unknown route");

  ojson json_body = ojson::object();
  if (mutation && !body.empty()) {
    try {
      json_body = ojson::parse(body);
    } catch (const nlohmann::json::exception& e) {
      return error_response(400, "invalid-argument", std::string("malformed JSON body: ") + e.what());
    }
  }

  ApiResponse response;
  const std::vector<std::string> route(parts.begin() + 2, parts.end());
  if (route.size() == 1 && route[0] == "session" && method == "POST") {
    std::lock_guard lock(mutex_);
    try {
      response = create_session(json_body);
    } catch (const Error& e) {
      response = error_response(status_for(e.kind()), std::string(to_string(e.kind())), e.what());
    }
    if (response.status < 300) {
      append_journal(method, path, body, request_id);
      if (!request_id.empty()) idempotent_[request_id] = response;
    }
    return response;
  }

  if (route.size() < 2 || route[0] != "session") return error_response(404, "not-found", "unknown route");
  const auto slot = find(route[1]);
  if (!slot) return error_response(404, "not-found", "unknown session " + route[1]);
  std::lock_guard session_lock(slot->mutex);
  Session& s = slot->session;
  try {
    if (route.size() == 2 && method == "GET") {
      response.body = session_json(s);
    } else if (route.size() == 3 && route[2] == "references" && method == "POST") {
      response = add_references(s, json_body);
    } else if (route.size() == 3 && route[2] == "frontalness" && method == "GET") {
      response = frontalness(s);
    } else if (route.size() == 3 && route[2] == "placement" && method == "POST") {
      response = placement(s, json_body);
    } else if (route.size() == 3 && route[2] == "gallery" && method == "GET") {
      response.body = gallery_json(s);
    } else if (route.size() == 3 && route[2] == "gallery" && method == "POST") {
      response = add_gallery(s, json_body);
    } else if (route.size() == 5 && route[2] == "gallery" && route[4] == "decision" && method == "POST") {
      response = decide(s, route[3], json_body);
    } else {
      return error_response(404, "not-found", "unknown route");
    }
  } catch (const Error& e) {
    response = error_response(status_for(e.kind()), std::string(to_string(e.kind())), e.what());
  } catch (const nlohmann::json::exception& e) {
    response = error_response(422, "invalid-argument", e.what());
  }
  const bool changed = response.status < 300 || (response.status == 502 && route.size() == 3 && route[2] == "gallery");
  if (mutation && changed) {
    append_journal(method, path, body, request_id);
    if (!request_id.empty()) {
      std::lock_guard lock(mutex_);
      idempotent_[request_id] = response;
    }
  }
  return response;
}

ApiResponse AppServer::create_session(const ojson& body) {
  auto slot = std::make_shared<SessionSlot>();
  Session& s = slot->session;
  s.bucket = parse_bucket(body.value("bucket", std::string("1024x1024")));
  const auto& known = buckets_.buckets();
  if (std::find(known.begin(), known.end(), s.bucket) == known.end())
    fail(ErrorKind::invalid_argument, "bucket " + to_string(s.bucket) + " is not in the configured bucket set");
  s.target_keeps = body.value("target_keeps", config_.target_keeps);
  if (s.target_keeps < 1) fail(ErrorKind::invalid_argument, "target_keeps must be positive");
  char id[32];
  std::snprintf(id, sizeof id, "s%06llu", static_cast<unsigned long long>(next_session_++));
  s.id = id;
  sessions_[s.id] = slot;
  ApiResponse r;
  r.status = 201;
  r.body = session_json(s);
  return r;
}

ApiResponse AppServer::add_references(Session& s, const ojson& body) {
  std::vector<ReferenceImage> incoming;
  const auto& images = body.at("images");
  for (const auto& item : images) {
    ReferenceImage ref;
    if (item.is_string()) {
      ref.id = "ref-" + std::to_string(s.references.size() + incoming.size());
      ref.image = image_from_base64(item.get<std::string>());
    } else {
      ref.id = item.value("id", "ref-" + std::to_string(s.references.size() + incoming.size()));
      ref.image = image_from_base64(item.at("png_b64").get<std::string>());
    }
    incoming.push_back(std::move(ref));
  }
  if (incoming.empty()) fail(ErrorKind::invalid_argument, "no reference images given");

  std::vector<Embedding> embeddings;
  for (const auto& r : s.references)
    if (!r.faces.empty()) embeddings.push_back(*r.faces.front().embedding);
  for (auto& ref : incoming) {
    ref.faces = detect_faces(*backend_, ref.image);
    for (auto& f : ref.faces) f.yaw_deg = estimate_yaw(f);
    if (!ref.faces.empty()) {
      ref.faces.front().embedding = embed_face(*backend_, ref.image, ref.faces.front());
      embeddings.push_back(*ref.faces.front().embedding);
    }
  }
  std::optional<ReferenceProfile> profile;
  if (!embeddings.empty()) profile = build_profile(embeddings, s.id);

  for (auto& ref : incoming) s.references.push_back(std::move(ref));
  s.profile = std::move(profile);
  ApiResponse r;
  r.body = session_json(s);
  return r;
}

ApiResponse AppServer::frontalness(const Session& s) const {
  if (s.references.empty()) return error_response(409, "no-references", "session has no reference images");
  ApiResponse r;
  ojson refs = ojson::array();
  bool any_frontal = false;
  for (const auto& ref : s.references) {
    ojson j;
    j["id"] = ref.id;
    if (ref.faces.empty()) {
      j["yaw_deg"] = nullptr;
      j["frontal"] = false;
    } else {
      const double yaw = *ref.faces.front().yaw_deg;
      const bool frontal = std::abs(yaw) <= frontal_limit_deg;
      any_frontal = any_frontal || frontal;
      j["yaw_deg"] = yaw;
      j["frontal"] = frontal;
    }
    refs.push_back(std::move(j));
  }
  r.body["references"] = std::move(refs);
  r.body["threshold_deg"] = frontal_limit_deg;
  r.body["warning"] = !any_frontal;
  return r;
}

ApiResponse AppServer::placement(Session& s, const ojson& body) {
  const auto ref_index = body.contains("reference") ? std::optional<std::size_t>(body["reference"].get<std::size_t>())
                                                    : placement_reference(s);
  if (!ref_index || *ref_index >= s.references.size() || s.references[*ref_index].faces.empty())
    return error_response(409, "no-face", "session has no detected face to place");
  PlacementTransform t;
  try {
    t = PlacementTransform::from_json(body.value("transform", ojson::object()));
  } catch (const Error& e) {
    return error_response(422, "invalid-argument", e.what());
  }
  if (t.canvas_width != s.bucket.width || t.canvas_height != s.bucket.height)
    return error_response(422, "invalid-argument", "canvas must match the session bucket " + to_string(s.bucket));

  const auto& ref = s.references[*ref_index];
  const FaceRecord& face = ref.faces.front();
  const Landmarks placed = apply_placement(base_placement(face.landmarks, face.bbox, t.canvas_width, t.canvas_height), t);
  KeypointImageSpec spec;
  spec.width = t.canvas_width;
  spec.height = t.canvas_height;
  const ImageBuffer keypoints = render_keypoints(placed, spec);
  s.placements.push_back(t);

  ApiResponse r;
  r.body["reference"] = ref.id;
  r.body["transform"] = t.to_json();
  r.body["landmarks"] = to_json(placed);
  r.body["keypoints_png_b64"] = png_base64(keypoints);
  r.body["keypoints_sha256"] = content_hash(keypoints);
  r.body["preview_png_b64"] = png_base64(render_placement_preview(ref.image, face.bbox, t));
  r.body["history_length"] = s.placements.size();
  return r;
}

ApiResponse AppServer::add_gallery(Session& s, const ojson& body) {
  if (!s.profile) return error_response(409, "no-profile", "session has no reference profile");
  if (body.contains("target_keeps")) {
    const int target = body["target_keeps"].get<int>();
    if (target < 1) fail(ErrorKind::invalid_argument, "target_keeps must be positive");
    s.target_keeps = target;
  }
  std::set<std::string> seen;
  for (const auto& g : s.gallery) seen.insert(g.id);
  std::vector<std::pair<std::string, ImageBuffer>> batch;
  for (const auto& item : body.at("images")) {
    const auto id = item.at("id").get<std::string>();
    if (!seen.insert(id).second) fail(ErrorKind::invalid_argument, "duplicate gallery id " + id);
    batch.emplace_back(id, image_from_base64(item.at("png_b64").get<std::string>()));
  }

  std::vector<std::string> backend_errors;
  for (auto& [id, img] : batch) {
    GalleryItem g;
    g.id = id;
    g.arrival = static_cast<int>(s.gallery.size());
    try {
      const auto faces = detect_faces(*backend_, img);
      if (faces.empty()) {
        g.badge = "no face";
      } else {
        g.distance = face_distance(embed_face(*backend_, img, faces.front()), *s.profile);
      }
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::backend_error && e.kind() != ErrorKind::degenerate_landmarks) throw;
      g.badge = "backend error";
      backend_errors.push_back(id + ": " + e.what());
    }
    s.gallery.push_back(std::move(g));
  }
  ApiResponse r;
  r.body = gallery_json(s);
  if (!backend_errors.empty()) {
    r.status = 502;
    r.body["error"] = std::string(to_string(ErrorKind::backend_error));
    r.body["message"] = backend_errors;
  }
  return r;
}

ApiResponse AppServer::decide(Session& s, const std::string& image_id, const ojson& body) {
  const auto it = std::find_if(s.gallery.begin(), s.gallery.end(), [&](const GalleryItem& g) { return g.id == image_id; });
  if (it == s.gallery.end()) return error_response(404, "not-found", "unknown gallery item " + image_id);
  it->decision = parse_decision(body.at("decision").get<std::string>());
  ApiResponse r;
  r.body["id"] = it->id;
  r.body["decision"] = to_string(*it->decision);
  r.body["kept"] = s.kept();
  r.body["target_keeps"] = s.target_keeps;
  r.body["early_stop"] = s.early_stop();
  return r;
}

ojson AppServer::session_json(const Session& s) const {
  ojson j;
  j["id"] = s.id;
  j["bucket"] = to_string(s.bucket);
  j["target_keeps"] = s.target_keeps;
  ojson refs = ojson::array();
  for (const auto& r : s.references) {
    ojson o;
    o["id"] = r.id;
    o["width"] = r.image.width();
    o["height"] = r.image.height();
    ojson faces = ojson::array();
    for (const auto& f : r.faces) faces.push_back(to_json(f));
    o["faces"] = std::move(faces);
    refs.push_back(std::move(o));
  }
  j["references"] = std::move(refs);
  if (s.profile) {
    j["profile"] = {{"n_references", s.profile->n_references}, {"distances", to_json(*s.profile)["distances"]}};
  } else {
    j["profile"] = nullptr;
  }
  ojson history = ojson::array();
  for (const auto& t : s.placements) history.push_back(t.to_json());
  j["placements"] = std::move(history);
  j["gallery_size"] = s.gallery.size();
  j["kept"] = s.kept();
  j["early_stop"] = s.early_stop();
  return j;
}

ojson AppServer::gallery_json(const Session& s) const {
  std::vector<std::pair<std::string, double>> ranked;
  for (const auto& g : s.gallery)
    if (g.distance) ranked.emplace_back(g.id, *g.distance);
  RankingReport report;
  if (!ranked.empty()) report = apply_filter(rank_distances(ranked), config_.filter);

  std::map<std::string, const GalleryItem*> by_id;
  for (const auto& g : s.gallery) by_id[g.id] = &g;
  ojson items = ojson::array();
  for (const auto& ri : report.items) {
    const GalleryItem& g = *by_id.at(ri.id);
    ojson o;
    o["id"] = ri.id;
    o["rank"] = ri.rank;
    o["distance"] = round6(ri.distance);
    o["percentile"] = round6(ri.percentile);
    o["badge"] = "p" + std::to_string(static_cast<int>(std::lround(ri.percentile)));
    o["suggested_keep"] = ri.kept;
    o["decision"] = g.decision ? ojson(to_string(*g.decision)) : ojson(nullptr);
    items.push_back(std::move(o));
  }
  for (const auto& g : s.gallery) {
    if (g.distance) continue;
    ojson o;
    o["id"] = g.id;
    o["rank"] = nullptr;
    o["distance"] = nullptr;
    o["percentile"] = nullptr;
    o["badge"] = g.badge;
    o["suggested_keep"] = false;
    o["decision"] = g.decision ? ojson(to_string(*g.decision)) : ojson(nullptr);
    items.push_back(std::move(o));
  }
  ojson j;
  j["items"] = std::move(items);
  j["suggested_cut"] = report.cut ? ojson(round6(*report.cut)) : ojson(nullptr);
  j["kept"] = s.kept();
  j["target_keeps"] = s.target_keeps;
  j["early_stop"] = s.early_stop();
  return j;
}

int AppServer::bind(const std::string& host, int port) {
  http_ = std::make_unique<httplib::Server>();
  auto route = [this](const httplib::Request& req, httplib::Response& res) {
    std::string request_id = req.get_header_value("Idempotency-Key");
    if (request_id.empty()) request_id = req.get_header_value("X-Request-Id");
    const ApiResponse r = handle(req.method, req.path, req.body, request_id);
    res.status = r.status;
    res.set_content(r.body.dump(), "application/json");
  };
  http_->Get(R"(/api/v1/.*)", route);
  http_->Post(R"(/api/v1/.*)", route);
  if (config_.static_dir && fs::is_directory(*config_.static_dir)) http_->set_mount_point("/", config_.static_dir->string());
  const int bound = port == 0 ? http_->bind_to_any_port(host) : (http_->bind_to_port(host, port) ? port : -1);
  if (bound < 0) fail(ErrorKind::io_error, "cannot bind " + host + ":" + std::to_string(port));
  return bound;
}

void AppServer::listen() {
  if (!http_) fail(ErrorKind::invalid_argument, "bind before listen");
  http_->listen_after_bind();
}

void AppServer::stop() {
  if (http_) http_->stop();
}

}  // namespace pforge
