#include <gtest/gtest.h>

#include <Eigen/Core>
#include <httplib.h>

#include <atomic>
#include <cmath>
#include <fstream>
#include <thread>

#include "pforge/genflow.hpp"
#include "pforge/imageio.hpp"
#include "test_support.hpp"

using namespace pforge;
using namespace std::chrono_literals;
using testing_support::TempDir;
namespace fs = std::filesystem;

namespace {

Landmarks frontal(double cx, double cy, double iod) {
  return {Eigen::Vector2d(cx - iod / 2, cy), Eigen::Vector2d(cx + iod / 2, cy), Eigen::Vector2d(cx, cy + 0.5 * iod),
          Eigen::Vector2d(cx - 0.35 * iod, cy + iod), Eigen::Vector2d(cx + 0.35 * iod, cy + iod)};
}

KeypointImageSpec canvas(int w = 128, int h = 128) {
  KeypointImageSpec s;
  s.width = w;
  s.height = h;
  return s;
}

GenRequest request_with(int refs) {
  GenRequest r;
  r.prompt = "a sks person";
  for (int i = 0; i < refs; ++i) {
    r.reference_ids.push_back("r" + std::to_string(i));
    r.reference_images.push_back(testing_support::portrait(32, 32, 10 + i));
  }
  r.keypoints = render_keypoints(frontal(64, 60, 30), canvas());
  r.seed = 5;
  return r;
}

ErrorKind kind_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no error thrown";
  return ErrorKind::io_error;
}

// In-process HTTP generator service whose reply is chosen per call.
class MockService {
 public:
  using Reply = std::function<void(const httplib::Request&, httplib::Response&, int call)>;

  explicit MockService(Reply reply) : reply_(std::move(reply)) {
    server_.Post("/generate", [this](const httplib::Request& req, httplib::Response& res) {
      reply_(req, res, calls_++);
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~MockService() {
    server_.stop();
    thread_.join();
  }

  std::string endpoint() const { return "http://127.0.0.1:" + std::to_string(port_) + "/generate"; }
  int calls() const { return calls_; }

 private:
  Reply reply_;
  httplib::Server server_;
  std::atomic<int> calls_{0};
  int port_ = 0;
  std::thread thread_;
};

void echo_references(const httplib::Request& req, httplib::Response& res, int) {
  const auto j = nlohmann::json::parse(req.body);
  nlohmann::json out;
  out["images_png_b64"] = j.at("reference_images_png_b64");
  res.set_content(out.dump(), "application/json");
}

HttpGeneratorConfig http_config(const std::string& endpoint) {
  HttpGeneratorConfig c;
  c.endpoint = endpoint;
  c.timeout = 5s;
  c.retry_backoff = 1ms;
  return c;
}

class CountingGenerator : public Generator {
 public:
  GenerationResult generate(const GenRequest& request) override {
    requests.push_back(request);
    return inner.generate(request);
  }
  MockGenerator inner;
  std::vector<GenRequest> requests;
};

// Finds the face on the first image it sees, none afterwards.
class FirstImageOnlyBackend : public FaceBackend {
 public:
  std::vector<FaceRecord> detect(const ImageBuffer& img) override {
    if (calls_++ == 0) return stub_.detect(img);
    return {};
  }
  Embedding embed(const ImageBuffer& aligned, const Landmarks& lm) override { return stub_.embed(aligned, lm); }

 private:
  StubBackend stub_;
  int calls_ = 0;
};

std::vector<SynthReference> synth_refs(int n) {
  std::vector<SynthReference> refs;
  StubBackend stub;
  for (int i = 0; i < n; ++i) {
    SynthReference r;
    r.id = "ref" + std::to_string(i);
    r.image = testing_support::portrait(48 + 8 * i, 48, 20 + i);
    r.face = detect_faces(stub, r.image).front();
    refs.push_back(r);
  }
  return refs;
}

}  // namespace

TEST(Perturb, ZeroRhoIsIdentity) {
  const auto lm = frontal(500, 400, 100);
  const auto out = perturb_landmarks(lm, {0.0, 77});
  for (int i = 0; i < 5; ++i) EXPECT_EQ(out[i], lm[i]);
}

TEST(Perturb, DisplacementBoundedByRhoTimesIod) {
  const auto lm = frontal(500, 400, 100);
  double sum_sq = 0;
  int n = 0;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const auto out = perturb_landmarks(lm, {0.05, seed});
    for (int i = 0; i < 5; ++i) {
      const double d = (out[i] - lm[i]).norm();
      EXPECT_LE(d, 5.0 + 1e-9);
      sum_sq += d * d;
      ++n;
    }
    const double iod = interocular_distance(out);
    EXPECT_GE(iod, 90.0 - 1e-9);
    EXPECT_LE(iod, 110.0 + 1e-9);
  }
  // uniform on a disk of radius R has E[r^2] = R^2 / 2
  EXPECT_NEAR(sum_sq / n, 12.5, 0.5);
}

TEST(Perturb, SeedDeterminesOffsets) {
  const auto lm = frontal(50, 50, 20);
  const auto a = perturb_landmarks(lm, {0.1, 3}), b = perturb_landmarks(lm, {0.1, 3}),
             c = perturb_landmarks(lm, {0.1, 4});
  for (int i = 0; i < 5; ++i) EXPECT_EQ(a[i], b[i]);
  EXPECT_NE(a[0], c[0]);
  EXPECT_THROW(perturb_landmarks(lm, {-0.1, 0}), Error);
}

TEST(Keypoints, DisksDrawnInLandmarkColors) {
  const auto spec = canvas(256, 256);
  const auto lm = frontal(128, 100, 60);
  const auto img = render_keypoints(lm, spec);
  for (int i = 0; i < 5; ++i) {
    const int x = static_cast<int>(lm[i].x()), y = static_cast<int>(lm[i].y());
    EXPECT_EQ(img.at(x, y, 0), spec.colors[i].r) << i;
    EXPECT_EQ(img.at(x, y, 1), spec.colors[i].g) << i;
    EXPECT_EQ(img.at(x, y, 2), spec.colors[i].b) << i;
  }
  EXPECT_EQ(img.at(0, 0, 0) | img.at(0, 0, 1) | img.at(0, 0, 2), 0);
  EXPECT_NEAR(canvas(1024, 1024).radius(), 0.01 * std::hypot(1024.0, 1024.0), 1e-12);
  EXPECT_DOUBLE_EQ(canvas(64, 64).radius(), 2.0);
}

TEST(Keypoints, OffCanvasPointsClipped) {
  Landmarks lm;
  for (auto& p : lm) p = {-50, -50};
  const auto img = render_keypoints(lm, canvas());
  for (auto b : img.bytes()) ASSERT_EQ(b, 0);
  lm[0] = {-0.5, 20};
  const auto edge = render_keypoints(lm, canvas());
  EXPECT_EQ(edge.at(0, 20, 0), 255);
  EXPECT_THROW(render_keypoints(lm, canvas(32, 32)), Error);
}

TEST(Keypoints, MapLandmarksScales) {
  const auto m = map_landmarks(frontal(100, 50, 20), 200, 100, 1024, 1024);
  EXPECT_NEAR(m[2].x(), 512, 1e-9);
  EXPECT_NEAR(m[2].y(), 60 * 1024.0 / 100, 1e-9);
}

TEST(MockGenerator, PureFunctionOfRequest) {
  MockGenerator g;
  const auto req = request_with(3);
  const auto a = g.generate(req), b = g.generate(req);
  EXPECT_EQ(a.images, b.images);
  EXPECT_EQ(a.record, b.record);
  EXPECT_EQ(a.images[0].width(), 128);
  EXPECT_EQ(a.record.keypoints_hash, content_hash(req.keypoints));
}

TEST(HttpGenerator, EchoesFourImages) {
  MockService svc(echo_references);
  HttpGenerator g(http_config(svc.endpoint()));
  const auto req = request_with(4);
  const auto r = g.generate(req);
  ASSERT_EQ(r.images.size(), 4u);
  for (int i = 0; i < 4; ++i) EXPECT_EQ(r.images[i], req.reference_images[i]);
  EXPECT_EQ(r.record.retries, 0);
  EXPECT_EQ(svc.calls(), 1);
}

TEST(HttpGenerator, RetriesServerErrors) {
  MockService svc([](const httplib::Request& req, httplib::Response& res, int call) {
    if (call < 2) {
      res.status = 500;
      res.set_content(R"({"error":"busy"})", "application/json");
      return;
    }
    echo_references(req, res, call);
  });
  HttpGenerator g(http_config(svc.endpoint()));
  const auto r = g.generate(request_with(1));
  EXPECT_EQ(r.record.retries, 2);
  EXPECT_EQ(svc.calls(), 3);
}

TEST(HttpGenerator, GivesUpAfterRetryBudget) {
  MockService svc([](const httplib::Request&, httplib::Response& res, int) { res.status = 503; });
  auto cfg = http_config(svc.endpoint());
  cfg.retries = 1;
  HttpGenerator g(cfg);
  EXPECT_EQ(kind_of([&] { g.generate(request_with(1)); }), ErrorKind::generation_failed);
  EXPECT_EQ(svc.calls(), 2);
}

TEST(HttpGenerator, ClientErrorNotRetried) {
  MockService svc([](const httplib::Request&, httplib::Response& res, int) { res.status = 400; });
  HttpGenerator g(http_config(svc.endpoint()));
  EXPECT_EQ(kind_of([&] { g.generate(request_with(1)); }), ErrorKind::generation_failed);
  EXPECT_EQ(svc.calls(), 1);
}

TEST(HttpGenerator, TruncatedBodyIsProtocolError) {
  MockService svc([](const httplib::Request&, httplib::Response& res, int) {
    res.set_content(R"({"images_png_b64": ["iVBOR)", "application/json");
  });
  HttpGenerator g(http_config(svc.endpoint()));
  EXPECT_EQ(kind_of([&] { g.generate(request_with(1)); }), ErrorKind::protocol_error);
}

TEST(HttpGenerator, ErrorFieldIsGenerationFailure) {
  MockService svc([](const httplib::Request&, httplib::Response& res, int) {
    res.set_content(R"({"error":"nsfw filter"})", "application/json");
  });
  HttpGenerator g(http_config(svc.endpoint()));
  EXPECT_EQ(kind_of([&] { g.generate(request_with(1)); }), ErrorKind::generation_failed);
}

TEST(HttpGenerator, UnreachableEndpoint) {
  auto cfg = http_config("http://127.0.0.1:1/generate");
  cfg.retries = 1;
  cfg.timeout = 500ms;
  HttpGenerator g(cfg);
  EXPECT_EQ(kind_of([&] { g.generate(request_with(1)); }), ErrorKind::generator_unreachable);
}

TEST(HttpGenerator, RecordedLogReplays) {
  TempDir dir;
  MockService svc([](const httplib::Request& req, httplib::Response& res, int call) {
    if (call == 0) {
      res.status = 500;
      return;
    }
    echo_references(req, res, call);
  });
  auto cfg = http_config(svc.endpoint());
  cfg.replay_log = dir / "replay.jsonl";
  HttpGenerator live(cfg);
  const auto req = request_with(2);
  const auto a = live.generate(req);

  std::ifstream in(dir / "replay.jsonl");
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) {
    EXPECT_EQ(ReplayEntry::decode(line).encode(), line);
    ++lines;
  }
  EXPECT_EQ(lines, 2);

  ReplayGenerator replay(dir / "replay.jsonl");
  const auto b = replay.generate(req);
  EXPECT_EQ(a.images, b.images);
  EXPECT_EQ(a.record, b.record);
  auto other = req;
  other.seed = 6;
  EXPECT_EQ(kind_of([&] { replay.generate(other); }), ErrorKind::generation_failed);
}

TEST(Replay, GoldenLinesRoundTrip) {
  std::ifstream in(std::string(PFORGE_GOLDEN_DIR) + "/generator_replay.jsonl");
  ASSERT_TRUE(in);
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    EXPECT_EQ(ReplayEntry::decode(line).encode(), line);
    ++n;
  }
  EXPECT_EQ(n, 4);
  EXPECT_THROW(ReplayEntry::decode(R"({"request":{}})"), Error);
}

TEST(GenResponse, DecodesImages) {
  const auto img = ImageBuffer::filled(3, 2, {9, 8, 7});
  const auto imgs = decode_gen_response(R"({"images_png_b64":[")" + png_base64(img) + "\"]}");
  ASSERT_EQ(imgs.size(), 1u);
  EXPECT_EQ(imgs[0], img);
  EXPECT_EQ(kind_of([] { decode_gen_response(R"({"images_png_b64":[]})"); }), ErrorKind::protocol_error);
  EXPECT_EQ(kind_of([] { decode_gen_response(R"({"images_png_b64":["@@@"]})"); }), ErrorKind::protocol_error);
}

TEST(TwoStep, DefaultUsesFourReferences) {
  EXPECT_EQ(default_reference_count, 4);
  StubBackend stub;
  std::vector<NamedImage> refs;
  for (int i = 0; i < 6; ++i) refs.push_back({"r" + std::to_string(i), testing_support::portrait(40, 40, i)});
  const auto plan = make_two_step_plan(refs, testing_support::portrait(80, 60, 9), stub, canvas(), "p", 1);
  EXPECT_EQ(plan.references.size(), 4u);
  EXPECT_EQ(plan.reference_ids.back(), "r3");
  EXPECT_EQ(make_two_step_plan(refs, refs[0].image, stub, canvas(), "p", 1, 2).references.size(), 2u);
}

TEST(TwoStep, SecondStepUsesLandmarksFromFirstOutput) {
  TempDir out;
  StubBackend stub;
  std::vector<NamedImage> refs{{"a", testing_support::portrait(40, 40, 1)}};
  auto plan = make_two_step_plan(refs, testing_support::portrait(80, 60, 2), stub, canvas(), "a sks person", 11);
  for (auto& p : plan.foreign_landmarks) p += Eigen::Vector2d(20, -10);
  CountingGenerator gen;
  const auto r = run_two_step(plan, stub, gen, out.path());
  ASSERT_EQ(gen.requests.size(), 2u);
  EXPECT_EQ(r.records[0].keypoints_hash, content_hash(render_keypoints(plan.foreign_landmarks, plan.canvas)));
  const auto detected = detect_faces(stub, r.step1_image).front().landmarks;
  const auto expected = render_keypoints(map_landmarks(detected, r.step1_image.width(), r.step1_image.height(), 128, 128),
                                         plan.canvas);
  EXPECT_EQ(gen.requests[1].keypoints, expected);
  EXPECT_EQ(r.records[1].keypoints_hash, content_hash(expected));
  EXPECT_NE(r.records[0].keypoints_hash, r.records[1].keypoints_hash);
  EXPECT_EQ(gen.requests[0].reference_images, gen.requests[1].reference_images);
  EXPECT_EQ(gen.requests[0].prompt, gen.requests[1].prompt);
  EXPECT_TRUE(fs::exists(out / "step1.png"));
  EXPECT_TRUE(fs::exists(out / "final.png"));
  const auto log = nlohmann::json::parse(read_text(out / "two_step.json"));
  EXPECT_EQ(log["steps"].size(), 2u);
}

TEST(TwoStep, FailureKeepsFirstStepArtifact) {
  TempDir out;
  FirstImageOnlyBackend backend;
  std::vector<NamedImage> refs{{"a", testing_support::portrait(40, 40, 1)}};
  const auto plan = make_two_step_plan(refs, testing_support::portrait(80, 60, 2), backend, canvas(), "p", 3);
  CountingGenerator gen;
  EXPECT_EQ(kind_of([&] { run_two_step(plan, backend, gen, out.path()); }), ErrorKind::two_step_failed);
  EXPECT_EQ(gen.requests.size(), 1u);
  EXPECT_TRUE(fs::exists(out / "step1.png"));
  EXPECT_FALSE(fs::exists(out / "final.png"));
}

TEST(Synth, RoundRobinPromptsAndReplay) {
  TempDir out;
  const auto refs = synth_refs(3);
  const auto prompts = parse_prompts("a [V] person at the beach\na [V] person in a library\n");
  SynthConfig cfg;
  cfg.count = 5;
  cfg.master_seed = 99;
  cfg.canvas = canvas();
  cfg.rare_token = "sks";
  cfg.class_noun = "person";
  MockGenerator gen;
  const auto r = synth_augment(refs, prompts, cfg, gen, out.path());
  ASSERT_EQ(r.entries.size(), 5u);
  EXPECT_TRUE(r.failures.empty());
  for (int i = 0; i < 5; ++i) {
    const auto& e = r.entries[i];
    EXPECT_EQ(e.concept_tags[0], prompts.prompts[i % 2].concept_tag);
    EXPECT_EQ(e.source, Source::synthetic);
    const auto req = replay_request(e, refs, cfg.canvas);
    EXPECT_EQ(req.prompt.find("sks"), 2u);
    EXPECT_EQ(content_hash(req.keypoints), r.keypoints_hashes[i]);
    EXPECT_EQ(gen.generate(req).images[0], read_image(out / e.path));
  }
}

TEST(Synth, ShareWarning) {
  TempDir out;
  const auto refs = synth_refs(1);
  SynthConfig cfg;
  cfg.count = 8;
  cfg.existing_entries = 20;
  cfg.canvas = canvas();
  MockGenerator gen;
  const auto one = synth_augment(refs, parse_prompts("only prompt"), cfg, gen, out.path());
  ASSERT_EQ(one.warnings.size(), 1u);
  EXPECT_NE(one.warnings[0].find("8/28"), std::string::npos);
  const auto two = synth_augment(refs, parse_prompts("first\nsecond"), cfg, gen, out.path());
  EXPECT_TRUE(two.warnings.empty());
}

TEST(Synth, ZeroRhoSingleReferenceRepeatsKeypoints) {
  TempDir out;
  SynthConfig cfg;
  cfg.count = 4;
  cfg.rho = 0;
  cfg.canvas = canvas();
  MockGenerator gen;
  const auto r = synth_augment(synth_refs(1), parse_prompts("x"), cfg, gen, out.path());
  ASSERT_EQ(r.keypoints_hashes.size(), 4u);
  for (const auto& h : r.keypoints_hashes) EXPECT_EQ(h, r.keypoints_hashes[0]);
}

TEST(Synth, TwoRunsByteIdentical) {
  TempDir a, b;
  SynthConfig cfg;
  cfg.count = 4;
  cfg.master_seed = 1234;
  cfg.canvas = canvas();
  MockGenerator gen;
  const auto refs = synth_refs(2);
  const auto prompts = parse_prompts("p one\np two\np three");
  const auto ra = synth_augment(refs, prompts, cfg, gen, a.path());
  const auto rb = synth_augment(refs, prompts, cfg, gen, b.path());
  EXPECT_EQ(ra.entries, rb.entries);
  EXPECT_EQ(ra.keypoints_hashes, rb.keypoints_hashes);
  for (const auto& e : ra.entries)
    EXPECT_EQ(testing_support::file_bytes(a / e.path), testing_support::file_bytes(b / e.path));
}
