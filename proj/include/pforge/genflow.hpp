#pragma once

#include <array>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "pforge/datasetkit.hpp"
#include "pforge/faceio.hpp"
#include "pforge/image.hpp"

namespace pforge {

struct PerturbConfig {
  /// Displacement radius as a fraction of the interocular distance.
  double rho = 0.05;
  std::uint64_t seed = 0;
};

/// Moves each landmark by an independent offset drawn uniformly from the
/// disk of radius rho * IOD.
Landmarks perturb_landmarks(const Landmarks& landmarks, const PerturbConfig& config);

struct KeypointImageSpec {
  int width = 1024;
  int height = 1024;
  /// left eye, right eye, nose, mouth left, mouth right
  std::array<Rgb, 5> colors{Rgb{255, 0, 0}, Rgb{0, 255, 0}, Rgb{0, 0, 255}, Rgb{255, 255, 0}, Rgb{255, 0, 255}};
  double radius_fraction = 0.01;
  int min_radius = 2;

  /// radius_fraction of the canvas diagonal, at least min_radius.
  double radius() const;
};

/// Black canvas with one filled disk per landmark, drawn in landmark order.
/// Landmarks off the canvas are clipped.
ImageBuffer render_keypoints(const Landmarks& landmarks, const KeypointImageSpec& spec);

/// Scales landmark coordinates from a from_w x from_h frame to to_w x to_h.
Landmarks map_landmarks(const Landmarks& lm, int from_w, int from_h, int to_w, int to_h);

inline constexpr int default_reference_count = 4;

struct GenRequest {
  std::string prompt;
  std::vector<std::string> reference_ids;
  std::vector<ImageBuffer> reference_images;
  ImageBuffer keypoints;
  std::uint64_t seed = 0;
  int count = 1;
};

/// Wire form: {"prompt","seed","count","reference_images_png_b64":[...],"keypoints_png_b64"}.
nlohmann::ordered_json encode_gen_request(const GenRequest& request);
/// Parses {"images_png_b64":[...]}; throws protocol_error when malformed and
/// generation_failed when the body carries an "error" field.
std::vector<ImageBuffer> decode_gen_response(std::string_view body);

struct GenerationRecord {
  std::string prompt;
  std::uint64_t seed = 0;
  int count = 1;
  std::vector<std::string> reference_ids;
  std::string keypoints_hash;
  std::vector<std::string> image_hashes;
  int retries = 0;

  friend bool operator==(const GenerationRecord&, const GenerationRecord&) = default;
};

nlohmann::ordered_json to_json(const GenerationRecord& record);

struct GenerationResult {
  std::vector<ImageBuffer> images;
  GenerationRecord record;
};

class Generator {
 public:
  virtual ~Generator() = default;
  virtual GenerationResult generate(const GenRequest& request) = 0;
};

/// Fills record fields that derive from the request and the images.
GenerationRecord make_record(const GenRequest& request, const std::vector<ImageBuffer>& images, int retries);

/// In-process generator whose output is a pure function of the request: each
/// image is a reference image (chosen by seed) resized to the keypoints
/// canvas, tinted by seed, with the keypoint disks drawn on top.
class MockGenerator : public Generator {
 public:
  GenerationResult generate(const GenRequest& request) override;
};

/// One exchange with the generator service as stored in a replay log line:
/// {"request":{...},"status":200,"body":"..."}.
struct ReplayEntry {
  nlohmann::ordered_json request;
  int status = 0;
  std::string body;

  std::string encode() const;
  static ReplayEntry decode(std::string_view line);
};

struct HttpGeneratorConfig {
  /// e.g. http://127.0.0.1:7860/generate
  std::string endpoint;
  int retries = 2;
  std::chrono::milliseconds timeout{120000};
  std::chrono::milliseconds retry_backoff{200};
  std::optional<std::filesystem::path> replay_log{};
};

/// POSTs the JSON request to the endpoint. Connection failures, HTTP 429 and
/// 5xx are retried; other failures surface immediately.
class HttpGenerator : public Generator {
 public:
  explicit HttpGenerator(HttpGeneratorConfig config);
  GenerationResult generate(const GenRequest& request) override;

 private:
  void log_exchange(const nlohmann::ordered_json& request, int status, const std::string& body);

  HttpGeneratorConfig config_;
  std::mutex log_mutex_;
};

/// Serves responses recorded by HttpGenerator, matched by request content.
class ReplayGenerator : public Generator {
 public:
  explicit ReplayGenerator(const std::filesystem::path& log);
  GenerationResult generate(const GenRequest& request) override;

 private:
  std::vector<ReplayEntry> entries_;
};

/// "mock://" selects MockGenerator, "replay://<file>" ReplayGenerator,
/// anything else HttpGenerator.
std::unique_ptr<Generator> make_generator(const HttpGeneratorConfig& config);

struct TwoStepPlan {
  std::vector<std::string> reference_ids;
  std::vector<ImageBuffer> references;
  /// Foreign keypoints (s_kpts), already in canvas coordinates.
  Landmarks foreign_landmarks{};
  KeypointImageSpec canvas;
  std::string prompt;
  std::uint64_t step1_seed = 0;
  std::uint64_t step2_seed = 0;
};

struct NamedImage {
  std::string id;
  ImageBuffer image;
};

/// Uses the first `reference_count` references; the foreign landmarks come
/// from the first face detected on `foreign` and are scaled to the canvas.
TwoStepPlan make_two_step_plan(const std::vector<NamedImage>& references, const ImageBuffer& foreign,
                               FaceBackend& backend, const KeypointImageSpec& canvas, std::string prompt,
                               std::uint64_t seed, int reference_count = default_reference_count);

struct TwoStepResult {
  ImageBuffer step1_image;
  ImageBuffer final_image;
  Landmarks step2_landmarks{};
  std::array<GenerationRecord, 2> records;
};

/// Step 1 generates with the foreign keypoints; the landmarks detected on its
/// output become the keypoints of step 2. When out_dir is given, step1.png
/// (and final.png, two_step.json) are written there; step1.png survives a
/// two-step-failed error.
TwoStepResult run_two_step(const TwoStepPlan& plan, FaceBackend& backend, Generator& generator,
                           const std::optional<std::filesystem::path>& out_dir = std::nullopt);

struct SynthReference {
  std::string id;
  ImageBuffer image;
  FaceRecord face;
};

struct SynthConfig {
  int count = 8;
  std::uint64_t master_seed = 0;
  double rho = 0.05;
  KeypointImageSpec canvas;
  int reference_count = default_reference_count;
  /// Size of the dataset the synthetic entries will be merged into.
  int existing_entries = 0;
  double max_concept_share = 0.25;
  std::string rare_token;
  std::string class_noun;
  std::string id_prefix = "synth";
  std::string image_subdir = "images";
};

struct SynthResult {
  std::vector<ManifestEntry> entries;
  std::vector<std::string> warnings;
  std::vector<EntryFailure> failures;
  /// Keypoint images in sample order (failed samples included).
  std::vector<std::string> keypoints_hashes;
};

/// Round-robins prompts; each sample perturbs the landmarks of a seeded
/// choice of reference, renders keypoints and generates one image into
/// out_dir / image_subdir.
SynthResult synth_augment(const std::vector<SynthReference>& references, const PromptPool& prompts,
                          const SynthConfig& config, Generator& generator, const std::filesystem::path& out_dir);

/// Rebuilds the request recorded in a synthetic entry's provenance.
GenRequest replay_request(const ManifestEntry& entry, const std::vector<SynthReference>& references,
                          const KeypointImageSpec& canvas);

}  // namespace pforge
