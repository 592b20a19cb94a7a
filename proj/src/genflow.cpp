#include "pforge/genflow.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <thread>

#include <httplib.h>

#include "pforge/imageio.hpp"
#include "pforge/imgcore.hpp"
#include "pforge/random.hpp"

namespace fs = std::filesystem;

namespace pforge {

Landmarks perturb_landmarks(const Landmarks& landmarks, const PerturbConfig& config) {
  if (!(config.rho >= 0.0)) fail(ErrorKind::invalid_argument, "perturbation rho must be >= 0");
  const double iod = interocular_distance(landmarks);
  if (iod < 1e-9) fail(ErrorKind::degenerate_landmarks, "eye landmarks coincide");
  if (config.rho == 0.0) return landmarks;
  const double radius = config.rho * iod;
  Rng rng(config.seed);
  Landmarks out = landmarks;
  for (auto& p : out) {
    const double r = radius * std::sqrt(rng.uniform());
    const double theta = 2.0 * EIGEN_PI * rng.uniform();
    p += Eigen::Vector2d(r * std::cos(theta), r * std::sin(theta));
  }
  return out;
}

double KeypointImageSpec::radius() const {
  const double diag = std::hypot(static_cast<double>(width), static_cast<double>(height));
  return std::max(static_cast<double>(min_radius), radius_fraction * diag);
}

ImageBuffer render_keypoints(const Landmarks& landmarks, const KeypointImageSpec& spec) {
  if (spec.width < 64 || spec.height < 64) fail(ErrorKind::invalid_argument, "keypoint canvas must be at least 64x64");
  ImageBuffer img(spec.width, spec.height, 3, 0);
  const double r = spec.radius();
  for (std::size_t i = 0; i < landmarks.size(); ++i) {
    const Eigen::Vector2d& c = landmarks[i];
    if (!c.allFinite()) continue;
    const int x0 = std::max(0, static_cast<int>(std::floor(c.x() - r)));
    const int x1 = std::min(spec.width - 1, static_cast<int>(std::ceil(c.x() + r)));
    const int y0 = std::max(0, static_cast<int>(std::floor(c.y() - r)));
    const int y1 = std::min(spec.height - 1, static_cast<int>(std::ceil(c.y() + r)));
    const Rgb color = spec.colors[i];
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        const double dx = x + 0.5 - c.x();
        const double dy = y + 0.5 - c.y();
        if (dx * dx + dy * dy > r * r) continue;
        img.at(x, y, 0) = color.r;
        img.at(x, y, 1) = color.g;
        img.at(x, y, 2) = color.b;
      }
  }
  return img;
}

Landmarks map_landmarks(const Landmarks& lm, int from_w, int from_h, int to_w, int to_h) {
  Landmarks out;
  const Eigen::Vector2d s(static_cast<double>(to_w) / from_w, static_cast<double>(to_h) / from_h);
  for (std::size_t i = 0; i < lm.size(); ++i) out[i] = lm[i].cwiseProduct(s);
  return out;
}

nlohmann::ordered_json encode_gen_request(const GenRequest& request) {
  nlohmann::ordered_json j;
  j["prompt"] = request.prompt;
  j["seed"] = request.seed;
  j["count"] = request.count;
  j["reference_images_png_b64"] = nlohmann::ordered_json::array();
  for (const auto& img : request.reference_images) j["reference_images_png_b64"].push_back(png_base64(img));
  j["keypoints_png_b64"] = png_base64(request.keypoints);
  return j;
}

std::vector<ImageBuffer> decode_gen_response(std::string_view body) {
  nlohmann::ordered_json j;
  try {
    j = nlohmann::ordered_json::parse(body);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::protocol_error, std::string("generator response is not JSON: ") + e.what());
  }
  if (j.is_object() && j.contains("error"))
    fail(ErrorKind::generation_failed, "generator reported: " + j["error"].dump());
  if (!j.is_object() || !j.contains("images_png_b64") || !j["images_png_b64"].is_array())
    fail(ErrorKind::protocol_error, "generator response lacks images_png_b64");
  std::vector<ImageBuffer> images;
  for (const auto& item : j["images_png_b64"]) {
    if (!item.is_string()) fail(ErrorKind::protocol_error, "image entry is not a string");
    try {
      images.push_back(to_rgb(image_from_base64(item.get<std::string>())));
    } catch (const Error& e) {
      fail(ErrorKind::protocol_error, std::string("undecodable generator image: ") + e.what());
    }
  }
  if (images.empty()) fail(ErrorKind::protocol_error, "generator returned no images");
  return images;
}

nlohmann::ordered_json to_json(const GenerationRecord& r) {
  nlohmann::ordered_json j;
  j["prompt"] = r.prompt;
  j["seed"] = r.seed;
  j["count"] = r.count;
  j["reference_ids"] = r.reference_ids;
  j["keypoints_hash"] = r.keypoints_hash;
  j["image_hashes"] = r.image_hashes;
  j["retries"] = r.retries;
  return j;
}

GenerationRecord make_record(const GenRequest& request, const std::vector<ImageBuffer>& images, int retries) {
  GenerationRecord r;
  r.prompt = request.prompt;
  r.seed = request.seed;
  r.count = request.count;
  r.reference_ids = request.reference_ids;
  r.keypoints_hash = content_hash(request.keypoints);
  for (const auto& img : images) r.image_hashes.push_back(content_hash(img));
  r.retries = retries;
  return r;
}

namespace {

void require_references(const GenRequest& request) {
  if (request.reference_images.empty()) fail(ErrorKind::invalid_argument, "generation needs at least one reference");
  if (request.keypoints.empty()) fail(ErrorKind::invalid_argument, "generation needs a keypoints image");
  if (request.count < 1) fail(ErrorKind::invalid_argument, "sample count must be >= 1");
}

}  // namespace

GenerationResult MockGenerator::generate(const GenRequest& request) {
  require_references(request);
  const int w = request.keypoints.width();
  const int h = request.keypoints.height();
  std::vector<ImageBuffer> images;
  for (int i = 0; i < request.count; ++i) {
    const std::uint64_t s = splitmix64(request.seed + static_cast<std::uint64_t>(i) + fnv1a64(request.prompt));
    const auto& ref = request.reference_images[s % request.reference_images.size()];
    ImageBuffer img = resample(to_rgb(ref), w, h, Kernel::bilinear);
    const int tint = static_cast<int>((s >> 8) % 21) - 10;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const bool key = request.keypoints.at(x, y, 0) | request.keypoints.at(x, y, 1) | request.keypoints.at(x, y, 2);
        for (int c = 0; c < 3; ++c)
          img.at(x, y, c) = key ? request.keypoints.at(x, y, c)
                                : static_cast<std::uint8_t>(std::clamp(img.at(x, y, c) + tint, 0, 255));
      }
    images.push_back(std::move(img));
  }
  GenerationResult result{images, make_record(request, images, 0)};
  return result;
}

std::string ReplayEntry::encode() const {
  nlohmann::ordered_json j;
  j["request"] = request;
  j["status"] = status;
  j["body"] = body;
  return j.dump();
}

ReplayEntry ReplayEntry::decode(std::string_view line) {
  try {
    const auto j = nlohmann::ordered_json::parse(line);
    ReplayEntry e;
    e.request = j.at("request");
    e.status = j.at("status").get<int>();
    e.body = j.at("body").get<std::string>();
    return e;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::protocol_error, std::string("malformed replay line: ") + e.what());
  }
}

HttpGenerator::HttpGenerator(HttpGeneratorConfig config) : config_(std::move(config)) {
  if (config_.endpoint.empty()) fail(ErrorKind::invalid_argument, "generator endpoint is not configured");
  if (config_.retries < 0) fail(ErrorKind::invalid_argument, "retries must be >= 0");
}

void HttpGenerator::log_exchange(const nlohmann::ordered_json& request, int status, const std::string& body) {
  if (!config_.replay_log) return;
  std::lock_guard lock(log_mutex_);
  if (config_.replay_log->has_parent_path()) fs::create_directories(config_.replay_log->parent_path());
  std::ofstream out(*config_.replay_log, std::ios::app | std::ios::binary);
  out << ReplayEntry{request, status, body}.encode() << '\n';
}

GenerationResult HttpGenerator::generate(const GenRequest& request) {
  require_references(request);
  const auto& url = config_.endpoint;
  const auto scheme_end = url.find("://");
  const auto path_start = url.find('/', scheme_end == std::string::npos ? 0 : scheme_end + 3);
  const std::string host = path_start == std::string::npos ? url : url.substr(0, path_start);
  const std::string path = path_start == std::string::npos ? "/" : url.substr(path_start);

  httplib::Client client(host);
  client.set_connection_timeout(config_.timeout);
  client.set_read_timeout(config_.timeout);
  client.set_write_timeout(config_.timeout);

  const auto wire = encode_gen_request(request);
  const std::string body = wire.dump();
  std::string last_error;
  bool last_unreachable = false;
  for (int attempt = 0; attempt <= config_.retries; ++attempt) {
    if (attempt > 0) std::this_thread::sleep_for(config_.retry_backoff * attempt);
    auto res = client.Post(path, body, "application/json");
    if (!res) {
      last_unreachable = true;
      last_error = "cannot reach " + url + ": " + httplib::to_string(res.error());
      log_exchange(wire, 0, "");
      continue;
    }
    log_exchange(wire, res->status, res->body);
    if (res->status == 200) {
      auto images = decode_gen_response(res->body);
      return {images, make_record(request, images, attempt)};
    }
    last_unreachable = false;
    last_error = "generator returned HTTP " + std::to_string(res->status) + ": " + res->body;
    if (res->status == 429 || res->status >= 500) continue;
    fail(ErrorKind::generation_failed, last_error);
  }
  fail(last_unreachable ? ErrorKind::generator_unreachable : ErrorKind::generation_failed,
       last_error + " (after " + std::to_string(config_.retries) + " retries)");
}

ReplayGenerator::ReplayGenerator(const fs::path& log) {
  std::istringstream in(read_text(log));
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) entries_.push_back(ReplayEntry::decode(line));
}

GenerationResult ReplayGenerator::generate(const GenRequest& request) {
  require_references(request);
  const auto wire = encode_gen_request(request);
  int retries = 0;
  for (const auto& e : entries_) {
    if (e.request != wire) continue;
    if (e.status == 200) {
      auto images = decode_gen_response(e.body);
      return {images, make_record(request, images, retries)};
    }
    ++retries;
  }
  fail(ErrorKind::generation_failed, "no recorded successful response for this request");
}

std::unique_ptr<Generator> make_generator(const HttpGeneratorConfig& config) {
  if (config.endpoint == "mock://" || config.endpoint == "mock") return std::make_unique<MockGenerator>();
  if (config.endpoint.rfind("replay://", 0) == 0)
    return std::make_unique<ReplayGenerator>(config.endpoint.substr(std::string("replay://").size()));
  return std::make_unique<HttpGenerator>(config);
}

TwoStepPlan make_two_step_plan(const std::vector<NamedImage>& references, const ImageBuffer& foreign,
                               FaceBackend& backend, const KeypointImageSpec& canvas, std::string prompt,
                               std::uint64_t seed, int reference_count) {
  if (references.empty()) fail(ErrorKind::invalid_argument, "two-step generation needs reference images");
  if (reference_count < 1) fail(ErrorKind::invalid_argument, "reference count must be >= 1");
  const auto foreign_faces = detect_faces(backend, foreign);
  if (foreign_faces.empty()) fail(ErrorKind::invalid_argument, "no face found on the keypoints source image");
  TwoStepPlan plan;
  const auto n = std::min<std::size_t>(references.size(), static_cast<std::size_t>(reference_count));
  for (std::size_t i = 0; i < n; ++i) {
    plan.reference_ids.push_back(references[i].id);
    plan.references.push_back(references[i].image);
  }
  plan.foreign_landmarks =
      map_landmarks(foreign_faces.front().landmarks, foreign.width(), foreign.height(), canvas.width, canvas.height);
  plan.canvas = canvas;
  plan.prompt = std::move(prompt);
  plan.step1_seed = seed;
  plan.step2_seed = splitmix64(seed);
  return plan;
}

TwoStepResult run_two_step(const TwoStepPlan& plan, FaceBackend& backend, Generator& generator,
                           const std::optional<fs::path>& out_dir) {
  GenRequest step1;
  step1.prompt = plan.prompt;
  step1.reference_ids = plan.reference_ids;
  step1.reference_images = plan.references;
  step1.keypoints = render_keypoints(plan.foreign_landmarks, plan.canvas);
  step1.seed = plan.step1_seed;
  auto first = generator.generate(step1);

  TwoStepResult result;
  result.step1_image = first.images.front();
  result.records[0] = first.record;
  if (out_dir) write_image(*out_dir / "step1.png", result.step1_image);

  const auto faces = detect_faces(backend, result.step1_image);
  if (faces.empty()) fail(ErrorKind::two_step_failed, "no face detected on the step-1 output");
  result.step2_landmarks = map_landmarks(faces.front().landmarks, result.step1_image.width(),
                                         result.step1_image.height(), plan.canvas.width, plan.canvas.height);

  GenRequest step2 = step1;
  step2.keypoints = render_keypoints(result.step2_landmarks, plan.canvas);
  step2.seed = plan.step2_seed;
  auto second = generator.generate(step2);
  result.final_image = second.images.front();
  result.records[1] = second.record;

  if (out_dir) {
    write_image(*out_dir / "final.png", result.final_image);
    nlohmann::ordered_json j;
    j["steps"] = {to_json(result.records[0]), to_json(result.records[1])};
    j["step2_keypoints_source"] = "step1.png";
    write_text(*out_dir / "two_step.json", j.dump(2) + "\n");
  }
  return result;
}

namespace {

nlohmann::ordered_json landmarks_to_json(const Landmarks& lm) {
  auto arr = nlohmann::ordered_json::array();
  for (const auto& p : lm) arr.push_back({p.x(), p.y()});
  return arr;
}

Landmarks landmarks_from_json(const nlohmann::ordered_json& j) {
  Landmarks lm;
  for (std::size_t i = 0; i < 5; ++i) lm[i] = {j.at(i).at(0).get<double>(), j.at(i).at(1).get<double>()};
  return lm;
}

}  // namespace

SynthResult synth_augment(const std::vector<SynthReference>& references, const PromptPool& prompts,
                          const SynthConfig& config, Generator& generator, const fs::path& out_dir) {
  if (references.empty()) fail(ErrorKind::invalid_argument, "synthetic augmentation needs a reference");
  if (prompts.prompts.empty()) fail(ErrorKind::invalid_argument, "prompt pool is empty");
  if (config.count < 0) fail(ErrorKind::invalid_argument, "count must be >= 0");

  SynthResult result;
  const auto n_prompts = prompts.prompts.size();
  std::map<std::string, int> per_concept;
  for (int i = 0; i < config.count; ++i) per_concept[prompts.prompts[static_cast<std::size_t>(i) % n_prompts].concept_tag]++;
  const int merged = config.existing_entries + config.count;
  for (const auto& [tag, uses] : per_concept) {
    const double share = merged > 0 ? static_cast<double>(uses) / merged : 0.0;
    if (share > config.max_concept_share) {
      std::ostringstream msg;
      msg << "concept '" << tag << "' would make up " << uses << "/" << merged << " of the merged dataset";
      result.warnings.push_back(msg.str());
    }
  }

  const auto n_used = std::min<std::size_t>(references.size(), static_cast<std::size_t>(config.reference_count));
  GenRequest base;
  for (std::size_t i = 0; i < n_used; ++i) {
    base.reference_ids.push_back(references[i].id);
    base.reference_images.push_back(references[i].image);
  }

  for (int i = 0; i < config.count; ++i) {
    char id_buf[64];
    std::snprintf(id_buf, sizeof id_buf, "%s-%04d", config.id_prefix.c_str(), i);
    const std::string id = id_buf;
    const std::uint64_t entry_seed = derive_entry_seed(config.master_seed, id);
    Rng rng(entry_seed);
    const auto ref_index = static_cast<std::size_t>(rng.below(references.size()));
    const std::uint64_t perturb_seed = rng.next();
    const Prompt& prompt = prompts.prompts[static_cast<std::size_t>(i) % n_prompts];
    try {
      const auto& ref = references[ref_index];
      const Landmarks on_canvas = map_landmarks(ref.face.landmarks, ref.image.width(), ref.image.height(),
                                                config.canvas.width, config.canvas.height);
      const Landmarks perturbed = perturb_landmarks(on_canvas, {config.rho, perturb_seed});
      GenRequest request = base;
      request.prompt = config.rare_token.empty() && config.class_noun.empty()
                           ? prompt.text
                           : instantiate_prompt(prompt.text, config.rare_token, config.class_noun);
      request.keypoints = render_keypoints(perturbed, config.canvas);
      request.seed = entry_seed & 0xffffffffULL;
      result.keypoints_hashes.push_back(content_hash(request.keypoints));
      auto generated = generator.generate(request);
      const ImageBuffer& img = generated.images.front();
      const std::string rel = (fs::path(config.image_subdir) / (id + ".png")).generic_string();
      write_image(out_dir / rel, img);

      ManifestEntry entry;
      entry.id = id;
      entry.path = rel;
      entry.width = img.width();
      entry.height = img.height();
      entry.source = Source::synthetic;
      entry.concept_tags = {prompt.concept_tag};
      ProvenanceRecord rec;
      rec.op = "generate";
      rec.seed = entry_seed;
      rec.params["prompt"] = request.prompt;
      rec.params["gen_seed"] = request.seed;
      rec.params["reference_ids"] = request.reference_ids;
      rec.params["landmark_reference"] = ref.id;
      rec.params["rho"] = config.rho;
      rec.params["landmarks"] = landmarks_to_json(perturbed);
      rec.params["canvas"] = std::to_string(config.canvas.width) + "x" + std::to_string(config.canvas.height);
      rec.params["keypoints_hash"] = generated.record.keypoints_hash;
      rec.params["image_hash"] = generated.record.image_hashes.front();
      rec.params["retries"] = generated.record.retries;
      entry.provenance.push_back(std::move(rec));
      result.entries.push_back(std::move(entry));
    } catch (const Error& e) {
      if (result.keypoints_hashes.size() < static_cast<std::size_t>(i) + 1) result.keypoints_hashes.emplace_back();
      result.failures.push_back({id, e.what()});
    }
  }
  return result;
}

GenRequest replay_request(const ManifestEntry& entry, const std::vector<SynthReference>& references,
                          const KeypointImageSpec& canvas) {
  auto it = std::find_if(entry.provenance.begin(), entry.provenance.end(),
                         [](const ProvenanceRecord& r) { return r.op == "generate"; });
  if (it == entry.provenance.end()) fail(ErrorKind::invalid_argument, entry.id + " has no generation record");
  const auto& p = it->params;
  GenRequest request;
  request.prompt = p.at("prompt").get<std::string>();
  request.seed = p.at("gen_seed").get<std::uint64_t>();
  for (const auto& rid : p.at("reference_ids")) {
    const auto id = rid.get<std::string>();
    auto ref = std::find_if(references.begin(), references.end(), [&](const SynthReference& r) { return r.id == id; });
    if (ref == references.end()) fail(ErrorKind::invalid_argument, "unknown reference id " + id);
    request.reference_ids.push_back(id);
    request.reference_images.push_back(ref->image);
  }
  request.keypoints = render_keypoints(landmarks_from_json(p.at("landmarks")), canvas);
  return request;
}

}  // namespace pforge
