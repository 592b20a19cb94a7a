#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <sys/wait.h>

#include "oracles.hpp"
#include "pforge/composite.hpp"
#include "pforge/cropkit.hpp"
#include "pforge/datasetkit.hpp"
#include "pforge/external_backend.hpp"
#include "pforge/faceio.hpp"
#include "pforge/genflow.hpp"
#include "pforge/identity.hpp"
#include "pforge/imageio.hpp"
#include "pforge/imgcore.hpp"
#include "test_support.hpp"

using namespace pforge;
using testing_support::TempDir;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

void require(bool cond, const std::string& what) {
  if (!cond) throw std::runtime_error(what);
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int max_abs_diff(const ImageBuffer& a, const ImageBuffer& b) {
  require(a.width() == b.width() && a.height() == b.height() && a.channels() == b.channels(), "shape mismatch");
  int m = 0;
  for (std::size_t i = 0; i < a.bytes().size(); ++i) m = std::max(m, std::abs(int(a.bytes()[i]) - int(b.bytes()[i])));
  return m;
}

Embedding random_unit(Rng& rng) {
  Embedding e(embedding_dim);
  for (int i = 0; i < embedding_dim; ++i) e(i) = oracle::box_muller(rng);
  return e.normalized();
}

int discarded(const RankingReport& r) {
  return static_cast<int>(std::count_if(r.items.begin(), r.items.end(), [](const RankedItem& i) { return !i.kept; }));
}

RankingReport uniform_report(int n) {
  std::vector<std::pair<std::string, double>> d;
  for (int i = 1; i <= n; ++i) d.emplace_back("img" + std::to_string(100 + i), i / double(n));
  return rank_distances(d);
}

std::string bytes_of(const fs::path& p) { return read_text(p); }

void poisson_matches_dense() {
  Rng rng(20);
  for (int trial = 0; trial < 20; ++trial) {
    const auto src = oracle::random_image(rng, 7, 7);
    const auto dst = oracle::random_image(rng, 7, 7);
    Mask mask(7, 7, 0);
    for (int y = 1; y < 6; ++y)
      for (int x = 1; x < 6; ++x) mask.at(x, y) = 255;
    const auto t0 = Clock::now();
    const auto sol = poisson_solve<double>(src, dst, mask, {0, 0});
    const double elapsed = seconds_since(t0);
    require(elapsed < 1.0, "solve took " + std::to_string(elapsed) + " s");
    require(sol.relative_residual < 1e-6, "residual " + std::to_string(sol.relative_residual));
    const auto ref = oracle::dense_poisson(src, dst, mask);
    for (int c = 0; c < 3; ++c) {
      std::vector<double> x;
      for (std::size_t i = 0; i < ref.cells.size(); ++i) {
        const auto [px, py] = ref.cells[i];
        const double v = sol.channels[c](py, px);
        x.push_back(v);
        require(std::abs(v - ref.solution[c][i]) < 1e-4, "trial " + std::to_string(trial) + " differs from dense solve");
      }
      require(oracle::relative_residual(ref, c, x) < 1e-6, "dense residual too large");
    }
  }
}

void resampler_matches_reference() {
  Rng rng(50);
  for (int i = 0; i < 50; ++i) {
    const auto img = oracle::random_image(rng, 16, 16);
    for (Kernel k : {Kernel::bilinear, Kernel::bicubic, Kernel::lanczos3})
      for (int size : {8, 23}) {
        const int d = max_abs_diff(resample(img, size, size, k), oracle::resample(img, size, size, k));
        require(d <= 1, std::string(to_string(k)) + " off by " + std::to_string(d));
      }
  }
}

void face_distance_anchors_and_ranking() {
  Rng rng(3);
  const auto v = random_unit(rng);
  const auto single = build_profile(std::vector<Embedding>{v});
  require(std::abs(face_distance(single.mean_face, single)) < 1e-9, "self distance");
  require(std::abs(face_distance(-single.mean_face, single) - 2.0) < 1e-9, "antipodal distance");
  Embedding o = random_unit(rng);
  o -= o.dot(single.mean_face) * single.mean_face;
  require(std::abs(face_distance(o.normalized(), single) - 1.0) < 1e-9, "orthogonal distance");

  const auto p = build_profile(std::vector<Embedding>{random_unit(rng), random_unit(rng), random_unit(rng)});
  std::vector<Candidate> cands, scaled;
  for (int i = 0; i < 100; ++i) {
    const auto e = random_unit(rng);
    cands.push_back({"c" + std::to_string(i), e});
    scaled.push_back({"c" + std::to_string(i), (rng.uniform(0.1, 10.0) * e).normalized()});
  }
  const auto report = rank_images(cands, p);
  std::vector<std::pair<double, std::string>> brute;
  for (const auto& c : cands) brute.emplace_back(1.0 - c.embedding.dot(p.mean_face), c.id);
  std::sort(brute.begin(), brute.end());
  require(report.items.size() == 100, "item count");
  const auto rescaled = rank_images(scaled, p);
  for (std::size_t i = 0; i < brute.size(); ++i) {
    require(report.items[i].id == brute[i].second, "order differs at " + std::to_string(i));
    require(std::abs(report.items[i].distance - brute[i].first) < 1e-12, "distance differs");
    require(rescaled.items[i].id == report.items[i].id, "scaling changed the order");
  }
}

void filter_policies() {
  FilterPolicy top;
  require(discarded(apply_filter(uniform_report(20), top)) == 3, "20 items at 15% must drop 3");
  require(discarded(apply_filter(uniform_report(8), top)) == 1, "8 items at 15% must drop 1");
  std::vector<std::pair<std::string, double>> d;
  for (int i = 1; i <= 10; ++i) d.emplace_back("q" + std::to_string(i), i / 10.0);
  FilterPolicy quant;
  quant.mode = FilterPolicy::Mode::quantile;
  quant.q = 0.8;
  const auto r = apply_filter(rank_distances(d), quant);
  require(r.cut && std::abs(*r.cut - 0.82) < 1e-9, "quantile cut must be 0.82");
  require(discarded(r) == 2, "quantile filter must drop 2");
}

void kde_mode() {
  Rng rng(2024);
  std::vector<double> v;
  for (int i = 0; i < 2000; ++i) v.push_back(0.3 + 0.08 * oracle::box_muller(rng));
  const auto s = summarize_distribution(v);
  require(std::abs(s.kde_mode - 0.3) <= 0.05, "mode " + std::to_string(s.kde_mode));
  const std::vector<double> one{0.4242};
  require(summarize_distribution(one).kde_mode == 0.4242, "single sample mode");
}

DatasetManifest tagged(int total, int tagged_count) {
  DatasetManifest m;
  for (int i = 0; i < total; ++i) {
    ManifestEntry e;
    e.id = "x" + std::to_string(i);
    e.path = "images/" + e.id + ".png";
    e.source = i < tagged_count ? Source::synthetic : Source::real;
    e.concept_tags = {i < tagged_count ? std::string("beach") : "studio-" + std::to_string(i)};
    m.entries.push_back(e);
  }
  return m;
}

void mix_validator() {
  require(validate_mix(tagged(20, 5)).ok(), "25% share must pass");
  const auto bad = validate_mix(tagged(20, 6));
  require(!bad.ok() && bad.violations == std::vector<std::string>{"beach"}, "30% share must fail on beach");
}

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

void determinism() {
  TempDir in, a, b, sa, sb;
  DatasetManifest m;
  m.subject_id = "subj";
  for (int i = 0; i < 6; ++i)
    m.entries.push_back(testing_support::write_entry(in.path(), "e" + std::to_string(i),
                                                     testing_support::portrait(40, 32, 500 + i)));
  AugPlan plan = AugPlan::from_json(ojson::parse(R"({"seed": 42, "steps": [
      {"op": "flip_horizontal", "p": 0.5},
      {"op": "rotate", "p": 1, "params": {"max_deg": 12}},
      {"op": "color_jitter", "p": 0.7, "params": {"brightness_pct": 5, "hue_deg": 8}},
      {"op": "auto_levels", "p": 0.5}]})"));
  const auto ra = apply_plan(m, in.path(), plan, a.path());
  const auto rb = apply_plan(m, in.path(), plan, b.path());
  require(ra.failures.empty() && rb.failures.empty(), "augmentation failures");
  require(bytes_of(a / "manifest.json") == bytes_of(b / "manifest.json"), "augment manifests differ");
  for (const auto& e : ra.manifest.entries)
    require(bytes_of(a / e.path) == bytes_of(b / e.path), "augmented image differs: " + e.id);

  SynthConfig cfg;
  cfg.count = 6;
  cfg.master_seed = 77;
  cfg.canvas.width = 128;
  cfg.canvas.height = 128;
  const auto refs = synth_refs(3);
  const auto prompts = parse_prompts("a [V] person at the beach\na [V] person in a library\n");
  cfg.rare_token = "sks";
  cfg.class_noun = "person";
  MockGenerator gen;
  const auto x = synth_augment(refs, prompts, cfg, gen, sa.path());
  const auto y = synth_augment(refs, prompts, cfg, gen, sb.path());
  require(x.failures.empty() && x.entries.size() == 6, "synthesis failures");
  DatasetManifest mx, my;
  mx.entries = x.entries;
  my.entries = y.entries;
  require(mx.to_json_text() == my.to_json_text(), "synthetic manifests differ");
  for (const auto& e : x.entries)
    require(bytes_of(sa / e.path) == bytes_of(sb / e.path), "synthetic image differs: " + e.id);
}

void builder_stub_fixture() {
  TempDir raw, out;
  const std::vector<std::pair<int, int>> sizes{{400, 300}, {300, 400}, {500, 500}, {300, 1800}, {320, 2000},
                                               {640, 1800}, {900, 600}, {256, 1600}, {800, 1300}, {1200, 700}};
  for (std::size_t i = 0; i < sizes.size(); ++i)
    write_image(raw / ("img" + std::to_string(i) + ".png"),
                testing_support::portrait(sizes[i].first, sizes[i].second, 40 + i));
  StubBackend stub;
  const auto r = build_dataset(raw.path(), out.path(), BucketSet::sdxl(), {"me"}, stub);
  require(r.manifest.entries.size() == sizes.size(), "kept " + std::to_string(r.manifest.entries.size()) + " of 10");
  int unclamped_axes = 0, unclamped_y = 0;
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    const auto& e = r.manifest.entries[i];
    const auto out_img = read_image(out / e.path);
    require(BucketSet::sdxl().contains({out_img.width(), out_img.height()}), e.id + " is not at bucket dims");
    require(out_img.width() == e.width && out_img.height() == e.height, e.id + " dims disagree with manifest");
    const auto src = read_image(raw / (e.id + ".png"));
    const auto face = detect_faces(stub, src).front();
    const auto bucket = nearest_bucket(src.width(), src.height(), BucketSet::sdxl());
    const auto crop = face_anchored_crop(src, face, bucket);
    const auto& rec = e.provenance.back();
    const auto& win = rec.params.at("window");
    require(win[0] == crop.window.left && win[1] == crop.window.top && win[2] == crop.window.width &&
                win[3] == crop.window.height,
            e.id + " window disagrees with provenance");
    const auto c = face.bbox.center();
    const double sx = double(e.width) / crop.window.width, sy = double(e.height) / crop.window.height;
    if (!crop.clamped_x) {
      const double fx = (c.x() - crop.window.left) * sx;
      require(std::abs(fx - e.width / 2.0) <= 1.0, e.id + " horizontal anchor off by " + std::to_string(fx - e.width / 2.0));
      ++unclamped_axes;
    }
    if (!crop.clamped_y) {
      const double fy = (c.y() - crop.window.top) * sy;
      require(std::abs(fy - e.height / 3.0) <= 1.0, e.id + " vertical anchor off by " + std::to_string(fy - e.height / 3.0));
      ++unclamped_axes;
      ++unclamped_y;
    }
  }
  require(unclamped_y > 0 && unclamped_axes > 0, "fixture has no unclamped vertical case");
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

void two_step() {
  require(default_reference_count == 4, "default reference count");
  KeypointImageSpec canvas;
  canvas.width = 128;
  canvas.height = 128;
  StubBackend stub;
  std::vector<NamedImage> refs;
  for (int i = 0; i < 6; ++i) refs.push_back({"r" + std::to_string(i), testing_support::portrait(40, 40, i)});
  const auto foreign = testing_support::portrait(80, 60, 9);
  auto plan = make_two_step_plan(refs, foreign, stub, canvas, "a sks person", 11);
  require(plan.references.size() == 4, "plan must use 4 references");
  for (auto& p : plan.foreign_landmarks) p += Eigen::Vector2d(20, -10);

  TempDir out;
  CountingGenerator gen;
  const auto r = run_two_step(plan, stub, gen, out.path());
  require(gen.requests.size() == 2 && r.records.size() == 2, "expected exactly two generations");
  const auto detected = detect_faces(stub, r.step1_image).front().landmarks;
  const auto expected =
      render_keypoints(map_landmarks(detected, r.step1_image.width(), r.step1_image.height(), 128, 128), canvas);
  require(gen.requests[1].keypoints == expected, "step 2 keypoints not derived from step 1");
  require(r.records[1].keypoints_hash == content_hash(expected), "step 2 record hash");
  require(r.records[0].keypoints_hash == content_hash(render_keypoints(plan.foreign_landmarks, canvas)),
          "step 1 record hash");

  TempDir failed;
  FirstImageOnlyBackend flaky;
  const auto plan2 = make_two_step_plan(refs, foreign, flaky, canvas, "p", 3);
  CountingGenerator gen2;
  bool threw = false;
  try {
    run_two_step(plan2, flaky, gen2, failed.path());
  } catch (const Error& e) {
    threw = e.kind() == ErrorKind::two_step_failed;
  }
  require(threw, "missing two-step-failed error");
  require(fs::exists(failed / "step1.png") && !fs::exists(failed / "final.png"), "step1.png must survive failure");
}

void golden_round_trip() {
  const fs::path dir = PFORGE_GOLDEN_DIR;
  std::ifstream faceio(dir / "faceio_transcript.jsonl");
  require(bool(faceio), "missing faceio transcript");
  std::string line;
  int lines = 0;
  while (std::getline(faceio, line)) {
    const std::string body = line.substr(2);
    const std::string again = line.rfind("> ", 0) == 0 ? BackendRequest::decode(body).encode()
                                                       : BackendResponse::decode(body).encode();
    require(again == body, "faceio line differs: " + line);
    ++lines;
  }
  require(lines == 10, "faceio transcript line count");
  std::ifstream replay(dir / "generator_replay.jsonl");
  require(bool(replay), "missing replay log");
  lines = 0;
  while (std::getline(replay, line)) {
    require(ReplayEntry::decode(line).encode() == line, "replay line differs");
    ++lines;
  }
  require(lines == 4, "replay line count");
}

int run(const std::string& args, const fs::path& stdout_file) {
  const std::string cmd = "env -u PORTRAIT_FORGE_CONFIG " + std::string(PFORGE_CLI) + " " + args + " > " +
                          stdout_file.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

void cli_suite() {
  const auto t0 = Clock::now();
  TempDir dir("accept-cli");
  const auto p = [&](const std::string& name) { return (dir / name).string(); };
  auto expect = [&](int code, const std::string& args) {
    const int got = run(args, dir / "last.txt");
    require(got == code, "'" + args + "' exited " + std::to_string(got) + ": " + read_text(dir / "last.txt"));
    return ojson::parse(read_text(dir / "last.txt"), nullptr, false);
  };

  fs::create_directories(dir / "raw");
  for (int i = 0; i < 4; ++i)
    write_image(dir / ("raw/p" + std::to_string(i) + ".png"), testing_support::portrait(240 + 40 * i, 320, 60 + i));
  expect(0, "--json build-dataset --raw " + p("raw") + " --out " + p("ds") + " --subject s");
  const auto manifest = p("ds/manifest.json");
  require(DatasetManifest::load(manifest).entries.size() == 4, "build-dataset kept count");

  expect(0, "--json --manifest " + manifest + " embed --profile-out " + p("profile.json") + " --subject s");
  const auto report = expect(0, "--json --manifest " + manifest + " rank --profile " + p("profile.json"));
  require(report["items"].size() == 4, "rank item count");
  write_text(dir / "report.json", report.dump());
  expect(0, "--json filter --report " + p("report.json") + " --q 0.5");
  expect(0, "--json summarize --distances " + p("report.json"));
  write_text(dir / "a.txt", "0.30\n0.32\n0.31\n");
  write_text(dir / "b.txt", "0.50\n0.52\n0.49\n");
  expect(0, "--json compare-checkpoints --set a=" + p("a.txt") + " --set b=" + p("b.txt"));

  write_text(dir / "plan.json", R"({"seed": 1, "steps": [{"op": "flip_horizontal", "p": 0.5}]})");
  expect(0, "--seed 9 --manifest " + manifest + " augment --plan " + p("plan.json") + " --out " + p("aug"));
  expect(0, "--manifest " + manifest + " validate-mix");

  write_image(dir / "big.png", testing_support::portrait(1400, 1000, 1));
  expect(0, "--json crop --input " + p("big.png") + " --output " + p("c.png"));
  expect(0, "--json crop --mode face --input " + p("big.png") + " --output " + p("f.png"));

  Mask mask(16, 16, 0);
  for (int y = 4; y < 12; ++y)
    for (int x = 4; x < 12; ++x) mask.at(x, y) = 255;
  write_file(dir / "mask.png", encode_png(mask));
  write_image(dir / "src.png", testing_support::portrait(16, 16, 2));
  write_image(dir / "dst.png", testing_support::portrait(16, 16, 3));
  expect(0, "composite --input " + p("src.png") + " --mask " + p("mask.png") + " --output " + p("bg.png") +
                " --palette pastel");
  expect(0, "--json composite --mode poisson --input " + p("src.png") + " --mask " + p("mask.png") + " --dst " +
                p("dst.png") + " --output " + p("pb.png"));

  const std::string lm = "'[[40,50],[60,50],[50,60],[42,70],[58,70]]'";
  expect(0, "--seed 7 --json perturb --landmarks " + lm + " --rho 0.1");
  expect(0, "--json render-keypoints --landmarks " + lm + " --output " + p("k.png") + " --width 128 --height 128");
  write_image(dir / "foreign.png", testing_support::portrait(90, 70, 9));
  expect(0, "--manifest " + manifest + " --seed 5 two-step --foreign " + p("foreign.png") + " --out " + p("ts") +
                " --width 128 --height 128");
  require(fs::exists(dir / "ts/final.png"), "two-step final.png");
  write_text(dir / "prompts.txt", "a [V] person at the beach\na [V] person in a cafe\n");
  expect(0, "--json --manifest " + manifest + " --seed 11 synth-augment --prompts " + p("prompts.txt") +
                " --count 4 --out " + p("syn") + " --width 128 --height 128 --merge");
  require(DatasetManifest::load(dir / "syn/manifest.json").entries.size() == 8, "merged synthetic manifest size");

  expect(2, "no-such-command");
  expect(1, "crop --input " + p("missing.png") + " --output " + p("x.png"));
  const double elapsed = seconds_since(t0);
  require(elapsed < 60.0, "suite took " + std::to_string(elapsed) + " s");
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<void()>>> criteria{
      {"poisson-matches-dense-solve", poisson_matches_dense},
      {"resampler-matches-reference", resampler_matches_reference},
      {"face-distance-anchors-and-ranking", face_distance_anchors_and_ranking},
      {"filter-policies", filter_policies},
      {"kde-mode-recovery", kde_mode},
      {"concept-mix-validation", mix_validator},
      {"seeded-determinism", determinism},
      {"dataset-builder-stub", builder_stub_fixture},
      {"two-step-generation", two_step},
      {"golden-files-round-trip", golden_round_trip},
      {"cli-suite", cli_suite},
  };
  int failures = 0;
  for (const auto& [name, fn] : criteria) {
    std::string error;
    try {
      fn();
    } catch (const std::exception& e) {
      error = e.what();
    }
    if (error.empty()) {
      std::cout << "PASS " << name << "\n";
    } else {
      std::cout << "FAIL " << name << ": " << error << "\n";
      ++failures;
    }
    std::cout.flush();
  }
  return failures == 0 ? 0 : 1;
}
