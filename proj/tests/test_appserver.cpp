#include <gtest/gtest.h>

#include <Eigen/Core>
#include <httplib.h>

#include <cmath>
#include <fstream>
#include <thread>

#include "pforge/appserver.hpp"
#include "pforge/imageio.hpp"
#include "pforge/report_io.hpp"
#include "test_support.hpp"

using namespace pforge;
using testing_support::TempDir;

namespace {

// Stub geometry, except that 33-pixel-wide images have no face and
// 35-pixel-wide images make the backend fail.
class SelectiveBackend : public FaceBackend {
 public:
  std::vector<FaceRecord> detect(const ImageBuffer& img) override {
    if (img.width() == 33) return {};
    if (img.width() == 35) fail(ErrorKind::backend_error, "scripted failure");
    return stub_.detect(img);
  }
  Embedding embed(const ImageBuffer& aligned, const Landmarks& lm) override { return stub_.embed(aligned, lm); }

 private:
  StubBackend stub_;
};

Landmarks frontal(double cx, double cy, double iod) {
  return {Eigen::Vector2d(cx - iod / 2, cy), Eigen::Vector2d(cx + iod / 2, cy), Eigen::Vector2d(cx, cy + 0.5 * iod),
          Eigen::Vector2d(cx - 0.35 * iod, cy + iod), Eigen::Vector2d(cx + 0.35 * iod, cy + iod)};
}

class AppServerTest : public ::testing::Test {
 protected:
  void SetUp() override { server_ = make(); }

  std::unique_ptr<AppServer> make() {
    AppConfig cfg;
    cfg.state_dir = state_.path();
    return std::make_unique<AppServer>(cfg, std::make_shared<SelectiveBackend>());
  }

  ApiResponse post(const std::string& path, const ojson& body, const std::string& rid = {}) {
    return server_->handle("POST", "/api/v1" + path, body.dump(), rid);
  }
  ApiResponse get(const std::string& path) { return server_->handle("GET", "/api/v1" + path, "", ""); }

  std::string new_session(int target = 10) {
    const auto r = post("/session", {{"bucket", "1024x1024"}, {"target_keeps", target}});
    EXPECT_EQ(r.status, 201);
    return r.body["id"].get<std::string>();
  }

  static ojson image_item(const std::string& id, const ImageBuffer& img) {
    return {{"id", id}, {"png_b64", png_base64(img)}};
  }

  void add_refs(const std::string& sid) {
    ojson imgs = ojson::array();
    for (int i = 0; i < 3; ++i) imgs.push_back(image_item("ref" + std::to_string(i), testing_support::portrait(64, 64, i)));
    ASSERT_EQ(post("/session/" + sid + "/references", {{"images", imgs}}).status, 200);
  }

  TempDir state_;
  std::unique_ptr<AppServer> server_;
};

}  // namespace

TEST(Placement, IdentityKeepsBase) {
  const auto base = frontal(512, 480, 100);
  const auto out = apply_placement(base, PlacementTransform{});
  for (int i = 0; i < 5; ++i) EXPECT_LT((out[i] - base[i]).norm(), 1e-12);
}

TEST(Placement, TranslateShiftsEveryPoint) {
  const auto base = frontal(512, 480, 100);
  PlacementTransform t;
  t.translate_x = 10;
  const auto out = apply_placement(base, t);
  for (int i = 0; i < 5; ++i) EXPECT_LT((out[i] - base[i] - Eigen::Vector2d(10, 0)).norm(), 1e-12);
}

TEST(Placement, QuarterTurnIsCounterClockwiseOnScreen) {
  Landmarks base;
  for (auto& p : base) p = {612, 512};
  PlacementTransform t;
  t.rotation_deg = 90;
  const auto out = apply_placement(base, t);
  EXPECT_NEAR(out[0].x(), 512, 1e-9);
  EXPECT_NEAR(out[0].y(), 412, 1e-9);
}

TEST(Placement, RotateThenUnrotate) {
  const auto base = frontal(400, 500, 90);
  PlacementTransform r90, rm90;
  r90.rotation_deg = 90;
  rm90.rotation_deg = -90;
  const auto out = apply_placement(apply_placement(base, r90), rm90);
  for (int i = 0; i < 5; ++i) EXPECT_LT((out[i] - base[i]).norm(), 1e-6);
}

TEST(Placement, EstimateRecoversTransform) {
  Rng rng(3);
  const auto base = frontal(512, 500, 120);
  for (int trial = 0; trial < 20; ++trial) {
    PlacementTransform t;
    t.translate_x = rng.uniform(-200, 200);
    t.translate_y = rng.uniform(-200, 200);
    t.rotation_deg = rng.uniform(-170, 170);
    t.scale = rng.uniform(0.3, 3);
    const auto est = estimate_placement(base, apply_placement(base, t), 1024, 1024);
    EXPECT_NEAR(est.translate_x, t.translate_x, 1e-6);
    EXPECT_NEAR(est.translate_y, t.translate_y, 1e-6);
    EXPECT_NEAR(est.rotation_deg, t.rotation_deg, 1e-6);
    EXPECT_NEAR(est.scale, t.scale, 1e-9);
  }
}

TEST(Placement, JsonValidation) {
  PlacementTransform t;
  t.translate_x = 3.5;
  t.scale = 2;
  EXPECT_EQ(PlacementTransform::from_json(t.to_json()), t);
  EXPECT_THROW(PlacementTransform::from_json({{"scale", 0}}), Error);
  EXPECT_THROW(PlacementTransform::from_json({{"scale", 17}}), Error);
  EXPECT_THROW(PlacementTransform::from_json({{"rotation_deg", "x"}}), Error);
}

TEST(Placement, PreviewCentersFaceCrop) {
  const auto ref = ImageBuffer::filled(200, 200, {250, 10, 10});
  const BBox box{50, 50, 100, 100};
  PlacementTransform t;
  t.canvas_width = 512;
  t.canvas_height = 512;
  const auto img = render_placement_preview(ref, box, t);
  EXPECT_EQ(img.at(256, 256, 0), 250);
  EXPECT_EQ(img.at(5, 5, 0), 128);
}

TEST_F(AppServerTest, SessionCreationValidatesBucket) {
  EXPECT_EQ(post("/session", {{"bucket", "1000x1000"}}).status, 422);
  EXPECT_EQ(post("/session", {{"bucket", "banana"}}).status, 422);
  const auto sid = new_session();
  const auto r = get("/session/" + sid);
  EXPECT_EQ(r.status, 200);
  EXPECT_EQ(r.body["bucket"], "1024x1024");
  EXPECT_EQ(get("/session/nope").status, 404);
  EXPECT_EQ(server_->handle("POST", "/api/v1/session", "{oops", "").status, 400);
}

TEST_F(AppServerTest, FrontalnessFlags) {
  const auto sid = new_session();
  EXPECT_EQ(get("/session/" + sid + "/frontalness").status, 409);
  add_refs(sid);
  auto r = get("/session/" + sid + "/frontalness");
  ASSERT_EQ(r.status, 200);
  EXPECT_FALSE(r.body["warning"].get<bool>());
  EXPECT_EQ(r.body["references"].size(), 3u);
  EXPECT_TRUE(r.body["references"][0]["frontal"].get<bool>());

  const auto sid2 = new_session();
  ASSERT_EQ(post("/session/" + sid2 + "/references",
                 {{"images", {image_item("blank", testing_support::portrait(33, 40, 1))}}})
                .status,
            200);
  r = get("/session/" + sid2 + "/frontalness");
  EXPECT_TRUE(r.body["warning"].get<bool>());
  EXPECT_TRUE(r.body["references"][0]["yaw_deg"].is_null());
}

TEST_F(AppServerTest, ReferenceBackendFailureIsAtomic) {
  const auto sid = new_session();
  ojson imgs = {image_item("ok", testing_support::portrait(64, 64, 1)), image_item("bad", testing_support::portrait(35, 40, 2))};
  const auto r = post("/session/" + sid + "/references", {{"images", imgs}});
  EXPECT_EQ(r.status, 502);
  EXPECT_EQ(r.body["error"], "backend-error");
  EXPECT_TRUE(server_->session(sid)->references.empty());
}

TEST_F(AppServerTest, PlacementRequiresFaceAndMatchingCanvas) {
  const auto sid = new_session();
  EXPECT_EQ(post("/session/" + sid + "/placement", ojson::object()).status, 409);
  add_refs(sid);
  PlacementTransform t;
  t.canvas_width = 896;
  t.canvas_height = 1152;
  EXPECT_EQ(post("/session/" + sid + "/placement", {{"transform", t.to_json()}}).status, 422);
  EXPECT_EQ(post("/session/" + sid + "/placement", {{"transform", {{"scale", -1}}}}).status, 422);
}

TEST_F(AppServerTest, PlacementReplayReproducesKeypointHash) {
  const auto sid = new_session();
  add_refs(sid);
  PlacementTransform t;
  t.translate_x = 37.5;
  t.translate_y = -12;
  t.rotation_deg = 14;
  t.scale = 1.7;
  const auto a = post("/session/" + sid + "/placement", {{"transform", t.to_json()}});
  ASSERT_EQ(a.status, 200);
  const auto b = post("/session/" + sid + "/placement", {{"transform", a.body["transform"]}});
  EXPECT_EQ(a.body["keypoints_sha256"], b.body["keypoints_sha256"]);
  EXPECT_EQ(b.body["history_length"], 2);
  const auto kp = image_from_base64(a.body["keypoints_png_b64"].get<std::string>());
  EXPECT_EQ(content_hash(kp), a.body["keypoints_sha256"].get<std::string>());
  EXPECT_EQ(kp.width(), 1024);

  const auto face = server_->session(sid)->references[0].faces[0];
  const auto expected =
      apply_placement(base_placement(face.landmarks, face.bbox, 1024, 1024), t);
  const auto got = landmarks_from_json(a.body["landmarks"]);
  for (int i = 0; i < 5; ++i) EXPECT_LT((got[i] - expected[i]).norm(), 1e-9);
}

TEST_F(AppServerTest, GalleryOrderMatchesRanking) {
  const auto sid = new_session();
  add_refs(sid);
  ojson imgs = ojson::array();
  std::vector<Candidate> cands;
  StubBackend stub;
  for (int i = 0; i < 9; ++i) {
    const auto img = testing_support::portrait(64, 64, 50 + i);
    imgs.push_back(image_item("g" + std::to_string(i), img));
    cands.push_back({"g" + std::to_string(i), embed_face(stub, img, detect_faces(stub, img).front())});
  }
  imgs.push_back(image_item("faceless", testing_support::portrait(33, 64, 3)));
  const auto r = post("/session/" + sid + "/gallery", {{"images", imgs}});
  ASSERT_EQ(r.status, 200);

  const auto report = apply_filter(rank_images(cands, *server_->session(sid)->profile), FilterPolicy{});
  const auto& items = r.body["items"];
  ASSERT_EQ(items.size(), 10u);
  for (std::size_t i = 0; i < report.items.size(); ++i) {
    EXPECT_EQ(items[i]["id"], report.items[i].id);
    EXPECT_EQ(items[i]["rank"], report.items[i].rank);
    EXPECT_EQ(items[i]["suggested_keep"], report.items[i].kept);
  }
  EXPECT_EQ(items[9]["id"], "faceless");
  EXPECT_EQ(items[9]["badge"], "no face");
  EXPECT_TRUE(items[9]["rank"].is_null());
  EXPECT_EQ(items[0]["badge"], "p0");
  EXPECT_EQ(items[8]["badge"], "p100");
  EXPECT_EQ(get("/session/" + sid + "/gallery").body, r.body);
}

TEST_F(AppServerTest, GalleryNeedsProfileAndUniqueIds) {
  const auto sid = new_session();
  const ojson one = {{"images", {image_item("a", testing_support::portrait(64, 64, 1))}}};
  EXPECT_EQ(post("/session/" + sid + "/gallery", one).status, 409);
  add_refs(sid);
  EXPECT_EQ(post("/session/" + sid + "/gallery", one).status, 200);
  EXPECT_EQ(post("/session/" + sid + "/gallery", one).status, 422);
}

TEST_F(AppServerTest, GalleryBackendErrorBadge) {
  const auto sid = new_session();
  add_refs(sid);
  const auto r = post("/session/" + sid + "/gallery",
                      {{"images", {image_item("x", testing_support::portrait(35, 50, 1)),
                                   image_item("y", testing_support::portrait(64, 64, 2))}}});
  EXPECT_EQ(r.status, 502);
  EXPECT_EQ(r.body["items"].size(), 2u);
  EXPECT_EQ(r.body["items"][1]["badge"], "backend error");
}

TEST_F(AppServerTest, EarlyStopAtTarget) {
  const auto sid = new_session(3);
  add_refs(sid);
  ojson imgs = ojson::array();
  for (int i = 0; i < 5; ++i) imgs.push_back(image_item("g" + std::to_string(i), testing_support::portrait(64, 64, 70 + i)));
  ASSERT_EQ(post("/session/" + sid + "/gallery", {{"images", imgs}}).status, 200);
  ApiResponse r;
  for (int i = 0; i < 3; ++i) {
    r = post("/session/" + sid + "/gallery/g" + std::to_string(i) + "/decision", {{"decision", "keep"}});
    ASSERT_EQ(r.status, 200);
    EXPECT_EQ(r.body["early_stop"].get<bool>(), i == 2);
  }
  EXPECT_EQ(r.body["kept"], 3);
  r = post("/session/" + sid + "/gallery/g0/decision", {{"decision", "discard"}});
  EXPECT_FALSE(r.body["early_stop"].get<bool>());
  EXPECT_EQ(post("/session/" + sid + "/gallery/zzz/decision", {{"decision", "keep"}}).status, 404);
  EXPECT_EQ(post("/session/" + sid + "/gallery/g1/decision", {{"decision", "maybe"}}).status, 422);
}

TEST_F(AppServerTest, IdempotentRetries) {
  const auto a = post("/session", {{"bucket", "1024x1024"}}, "req-1");
  const auto b = post("/session", {{"bucket", "1024x1024"}}, "req-1");
  EXPECT_EQ(a.body["id"], b.body["id"]);
  const auto c = post("/session", {{"bucket", "1024x1024"}}, "req-2");
  EXPECT_NE(a.body["id"], c.body["id"]);
  EXPECT_EQ(server_->journal_length(), 2u);
}

TEST_F(AppServerTest, JournalReplayRebuildsState) {
  const auto sid = new_session(2);
  add_refs(sid);
  ojson imgs = ojson::array();
  for (int i = 0; i < 4; ++i) imgs.push_back(image_item("g" + std::to_string(i), testing_support::portrait(64, 64, 80 + i)));
  post("/session/" + sid + "/gallery", {{"images", imgs}});
  post("/session/" + sid + "/gallery/g2/decision", {{"decision", "keep"}});
  post("/session/" + sid + "/placement", {{"transform", {{"translate_x", 5}}}});
  const auto gallery = get("/session/" + sid + "/gallery").body;
  const auto session = get("/session/" + sid).body;
  const auto length = server_->journal_length();
  server_.reset();
  {
    std::ofstream torn(state_ / "journal.jsonl", std::ios::app);
    torn << R"({"method":"POST","path":"/api/v1/ses)";
  }
  server_ = make();
  EXPECT_EQ(server_->journal_length(), length);
  EXPECT_EQ(get("/session/" + sid + "/gallery").body, gallery);
  EXPECT_EQ(get("/session/" + sid).body, session);
  EXPECT_NE(new_session(), sid);
}

TEST_F(AppServerTest, ServesOverHttp) {
  const int port = server_->bind("127.0.0.1", 0);
  ASSERT_GT(port, 0);
  std::thread t([&] { server_->listen(); });
  httplib::Client client("127.0.0.1", port);
  auto res = client.Post("/api/v1/session", R"({"bucket":"1152x896"})", "application/json");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 201);
  const auto sid = ojson::parse(res->body)["id"].get<std::string>();
  res = client.Get("/api/v1/session/" + sid);
  ASSERT_TRUE(res);
  EXPECT_EQ(ojson::parse(res->body)["bucket"], "1152x896");
  res = client.Get("/api/v1/session/" + sid + "/frontalness");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 409);
  httplib::Headers headers{{"Idempotency-Key", "k1"}};
  auto r1 = client.Post("/api/v1/session", headers, "{}", "application/json");
  auto r2 = client.Post("/api/v1/session", headers, "{}", "application/json");
  ASSERT_TRUE(r1 && r2);
  EXPECT_EQ(r1->body, r2->body);
  server_->stop();
  t.join();
}
