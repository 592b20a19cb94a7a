#include "pforge/datasetkit.hpp"

#include <algorithm>
#include <set>
#include <sstream>

#include "pforge/composite.hpp"
#include "pforge/imageio.hpp"
#include "pforge/imgcore.hpp"
#include "pforge/random.hpp"

namespace fs = std::filesystem;

namespace pforge {

std::string_view to_string(Source source) { return source == Source::real ? "real" : "synthetic"; }

Source parse_source(std::string_view text) {
  if (text == "real") return Source::real;
  if (text == "synthetic") return Source::synthetic;
  fail(ErrorKind::invalid_argument, "source must be real or synthetic, got " + std::string(text));
}

void to_json(ojson& j, const ProvenanceRecord& r) {
  j = ojson::object();
  j["op"] = r.op;
  j["params"] = r.params;
  j["seed"] = r.seed;
}

void from_json(const ojson& j, ProvenanceRecord& r) {
  r.op = j.at("op").get<std::string>();
  r.params = j.value("params", ojson::object());
  r.seed = j.value("seed", std::uint64_t{0});
}

void to_json(ojson& j, const ManifestEntry& e) {
  j = ojson::object();
  j["id"] = e.id;
  j["path"] = e.path;
  j["width"] = e.width;
  j["height"] = e.height;
  j["source"] = to_string(e.source);
  j["concept_tags"] = e.concept_tags;
  j["provenance"] = e.provenance;
}

void from_json(const ojson& j, ManifestEntry& e) {
  e.id = j.at("id").get<std::string>();
  e.path = j.at("path").get<std::string>();
  e.width = j.at("width").get<int>();
  e.height = j.at("height").get<int>();
  e.source = parse_source(j.at("source").get<std::string>());
  e.concept_tags = j.value("concept_tags", std::vector<std::string>{});
  e.provenance = j.value("provenance", std::vector<ProvenanceRecord>{});
}

void DatasetManifest::validate() const {
  if (schema_version != current_schema)
    fail(ErrorKind::invalid_argument, "unsupported manifest schema_version " + schema_version);
  std::set<std::string> ids;
  for (const auto& e : entries)
    if (!ids.insert(e.id).second) fail(ErrorKind::invalid_argument, "duplicate manifest entry id " + e.id);
}

const ManifestEntry* DatasetManifest::find(std::string_view id) const {
  auto it = std::find_if(entries.begin(), entries.end(), [&](const ManifestEntry& e) { return e.id == id; });
  return it == entries.end() ? nullptr : &*it;
}

std::string DatasetManifest::to_json_text() const {
  ojson j;
  j["schema_version"] = schema_version;
  j["subject_id"] = subject_id;
  j["entries"] = entries;
  return j.dump(2) + "\n";
}

DatasetManifest DatasetManifest::from_json_text(std::string_view text) {
  DatasetManifest m;
  try {
    const ojson j = ojson::parse(text);
    m.schema_version = j.at("schema_version").get<std::string>();
    m.subject_id = j.value("subject_id", std::string{});
    m.entries = j.at("entries").get<std::vector<ManifestEntry>>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::invalid_argument, std::string("malformed manifest: ") + e.what());
  }
  m.validate();
  return m;
}

DatasetManifest DatasetManifest::load(const fs::path& file) { return from_json_text(read_text(file)); }

void DatasetManifest::save(const fs::path& file) const {
  validate();
  write_text(file, to_json_text());
}

BuildResult build_dataset(const fs::path& raw_dir, const fs::path& out_dir, const BucketSet& buckets,
                          const BuildConfig& config, FaceBackend& backend) {
  if (!fs::is_directory(raw_dir)) fail(ErrorKind::io_error, "not a directory: " + raw_dir.string());
  std::vector<fs::path> files;
  for (const auto& de : fs::directory_iterator(raw_dir))
    if (de.is_regular_file() && is_image_path(de.path())) files.push_back(de.path());
  std::sort(files.begin(), files.end());

  BuildResult result;
  result.manifest.subject_id = config.subject_id;
  std::set<std::string> used_ids;
  auto reject = [&](const fs::path& file, std::string reason, std::string detail = {}) {
    result.reasons[reason] += 1;
    result.rejected.push_back({file.filename().string(), detail.empty() ? reason : reason + ": " + detail});
  };

  for (const auto& file : files) {
    ImageBuffer img;
    try {
      img = to_rgb(read_image(file));
    } catch (const Error& e) {
      reject(file, "unreadable", e.what());
      continue;
    }
    const auto faces = detect_faces(backend, img);
    const auto confident = std::count_if(faces.begin(), faces.end(), [&](const FaceRecord& f) {
      return f.confidence >= config.min_confidence;
    });
    if (confident == 0) {
      reject(file, faces.empty() ? "no-face" : "low-confidence");
      continue;
    }
    if (confident > 1) {
      reject(file, "multi-face");
      continue;
    }
    const FaceRecord& face = faces.front();
    const Bucket bucket = nearest_bucket(img.width(), img.height(), buckets);
    FaceCropResult cropped;
    try {
      cropped = face_anchored_crop(img, face, bucket);
    } catch (const Error& e) {
      reject(file, "face-outside-image", e.what());
      continue;
    }

    std::string id = file.stem().string();
    for (int k = 2; used_ids.count(id); ++k) id = file.stem().string() + "-" + std::to_string(k);
    used_ids.insert(id);
    const std::string rel = (fs::path(config.image_subdir) / (id + ".png")).generic_string();
    write_image(out_dir / rel, cropped.image);

    ManifestEntry entry;
    entry.id = id;
    entry.path = rel;
    entry.width = cropped.image.width();
    entry.height = cropped.image.height();
    entry.source = Source::real;
    ProvenanceRecord ingest{"ingest", ojson::object(), 0};
    ingest.params["file"] = file.filename().string();
    ingest.params["width"] = img.width();
    ingest.params["height"] = img.height();
    ProvenanceRecord detect{"detect_faces", ojson::object(), 0};
    detect.params["faces"] = faces.size();
    detect.params["confidence"] = face.confidence;
    detect.params["min_confidence"] = config.min_confidence;
    ProvenanceRecord crop_rec{"face_anchored_crop", ojson::object(), 0};
    const auto& w = cropped.window;
    crop_rec.params["window"] = {w.left, w.top, w.width, w.height};
    crop_rec.params["bucket"] = to_string(bucket);
    crop_rec.params["clamped_x"] = cropped.clamped_x;
    crop_rec.params["clamped_y"] = cropped.clamped_y;
    crop_rec.params["face_offset_x"] = cropped.face_offset_x;
    crop_rec.params["face_offset_y"] = cropped.face_offset_y;
    crop_rec.params["kernel"] = "lanczos3";
    entry.provenance = {ingest, detect, crop_rec};
    result.manifest.entries.push_back(std::move(entry));
  }
  result.manifest.save(out_dir / "manifest.json");
  return result;
}

AugPlan AugPlan::from_json(const ojson& j) {
  AugPlan plan;
  try {
    plan.master_seed = j.value("seed", std::uint64_t{0});
    for (const auto& s : j.value("steps", ojson::array())) {
      AugStep step;
      step.op = s.at("op").get<std::string>();
      step.probability = s.value("p", 1.0);
      if (!(step.probability >= 0.0 && step.probability <= 1.0))
        fail(ErrorKind::invalid_argument, "step " + step.op + ": p must lie in [0, 1]");
      step.params = s.value("params", ojson::object());
      plan.steps.push_back(std::move(step));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::invalid_argument, std::string("malformed augmentation plan: ") + e.what());
  }
  return plan;
}

AugPlan AugPlan::load(const fs::path& file) {
  try {
    return from_json(ojson::parse(read_text(file)));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::invalid_argument, file.string() + ": " + e.what());
  }
}

namespace {

double signed_draw(Rng& rng, double magnitude, bool random_sign) {
  if (!random_sign) return magnitude;
  return rng.bernoulli(0.5) ? magnitude : -magnitude;
}

// Executes one step; returns the provenance parameters actually used.
ojson run_step(const AugStep& step, ImageBuffer& img, Rng& rng, const ManifestEntry& entry,
               const fs::path& manifest_dir) {
  const ojson& p = step.params;
  ojson used = ojson::object();
  if (step.op == "flip_horizontal") {
    img = flip_horizontal(img);
  } else if (step.op == "rotate") {
    double angle = 0.0;
    if (p.contains("angle_deg")) {
      angle = p.at("angle_deg").get<double>();
    } else {
      const double max_deg = p.value("max_deg", 15.0);
      angle = rng.uniform(-max_deg, max_deg);
    }
    const Rgb fill = parse_hex_color(p.value("fill", std::string("#000000")));
    img = rotate(img, angle, fill);
    used["angle_deg"] = angle;
    used["fill"] = p.value("fill", std::string("#000000"));
  } else if (step.op == "color_jitter") {
    const bool random_sign = p.value("random_sign", true);
    ColorJitterParams jp;
    jp.brightness_pct = signed_draw(rng, p.value("brightness_pct", 0.0), random_sign);
    jp.saturation_pct = signed_draw(rng, p.value("saturation_pct", 0.0), random_sign);
    jp.hue_deg = signed_draw(rng, p.value("hue_deg", 0.0), random_sign);
    img = color_jitter(img, jp);
    used["brightness_pct"] = jp.brightness_pct;
    used["saturation_pct"] = jp.saturation_pct;
    used["hue_deg"] = jp.hue_deg;
    used["color_space"] = "hsv";
  } else if (step.op == "auto_levels") {
    const double clip = p.value("clip_fraction", 0.005);
    img = auto_levels(img, clip);
    used["clip_fraction"] = clip;
  } else if (step.op == "resize") {
    ResamplePolicy policy;
    policy.mode = parse_resample_mode(p.value("mode", std::string("down_then_up")));
    policy.kernel = parse_kernel(p.value("kernel", std::string("lanczos3")));
    policy.down_scale = p.value("down_scale", 0.5);
    policy.up_scale = p.value("up_scale", 2.0);
    img = apply_resize_policy(img, policy);
    used["mode"] = to_string(policy.mode);
    used["kernel"] = to_string(policy.kernel);
    used["down_scale"] = policy.down_scale;
    used["up_scale"] = policy.up_scale;
  } else if (step.op == "center_crop") {
    const double target = p.value("target_mp", 1.0);
    auto r = center_crop_megapixel(img, target);
    img = std::move(r.image);
    used["target_mp"] = target;
    used["window"] = {r.window.left, r.window.top, r.window.width, r.window.height};
    used["bucket"] = to_string(r.bucket);
  } else if (step.op == "replace_background") {
    const fs::path mask_dir = manifest_dir / p.at("mask_dir").get<std::string>();
    Mask mask = read_mask(mask_dir / (entry.id + ".png"));
    if (mask.width() != img.width() || mask.height() != img.height())
      fail(ErrorKind::invalid_argument, "mask for " + entry.id + " does not match the image size");
    mask = feather_mask(mask, p.value("feather_radius", 0));
    used["mask_dir"] = p.at("mask_dir");
    const std::uint64_t bg_seed = rng.next();
    if (p.contains("background_dir")) {
      const fs::path dir = manifest_dir / p.at("background_dir").get<std::string>();
      std::vector<fs::path> files;
      for (const auto& de : fs::directory_iterator(dir))
        if (de.is_regular_file() && is_image_path(de.path())) files.push_back(de.path());
      std::sort(files.begin(), files.end());
      if (files.empty()) fail(ErrorKind::invalid_argument, "no background images in " + dir.string());
      const auto& chosen = files[bg_seed % files.size()];
      img = replace_background(img, mask, read_image(chosen), bg_seed);
      used["background"] = chosen.filename().string();
    } else {
      const Palette palette = Palette::by_name(p.value("palette", std::string("gray")));
      const Rgb color = palette.pick(bg_seed);
      img = replace_background(img, mask, palette, bg_seed);
      used["palette"] = palette.name;
      char hex[8];
      std::snprintf(hex, sizeof hex, "#%02x%02x%02x", color.r, color.g, color.b);
      used["color"] = hex;
    }
  } else {
    fail(ErrorKind::invalid_argument, "unknown augmentation op: " + step.op);
  }
  return used;
}

}  // namespace

ApplyResult apply_plan(const DatasetManifest& manifest, const fs::path& manifest_dir, const AugPlan& plan,
                       const fs::path& out_dir) {
  manifest.validate();
  ApplyResult result;
  result.manifest.schema_version = manifest.schema_version;
  result.manifest.subject_id = manifest.subject_id;
  for (const auto& entry : manifest.entries) {
    const std::uint64_t seed = derive_entry_seed(plan.master_seed, entry.id);
    Rng rng(seed);
    try {
      ImageBuffer img = read_image(manifest_dir / entry.path);
      ManifestEntry out = entry;
      for (const auto& step : plan.steps) {
        if (!rng.bernoulli(step.probability)) continue;
        ProvenanceRecord rec;
        rec.op = step.op;
        rec.params = run_step(step, img, rng, entry, manifest_dir);
        rec.params["p"] = step.probability;
        rec.seed = seed;
        out.provenance.push_back(std::move(rec));
      }
      out.path = (fs::path("images") / (entry.id + ".png")).generic_string();
      out.width = img.width();
      out.height = img.height();
      write_image(out_dir / out.path, img);
      result.manifest.entries.push_back(std::move(out));
    } catch (const Error& e) {
      result.failures.push_back({entry.id, e.what()});
    } catch (const nlohmann::json::exception& e) {
      result.failures.push_back({entry.id, std::string("bad step parameters: ") + e.what()});
    }
  }
  result.manifest.save(out_dir / "manifest.json");
  return result;
}

MixReport validate_mix(const DatasetManifest& manifest, const MixPolicy& policy) {
  if (manifest.entries.empty()) fail(ErrorKind::invalid_argument, "validate_mix: empty manifest");
  MixReport report;
  report.total = static_cast<int>(manifest.entries.size());
  int real = 0;
  bool any_tag = false;
  bool untagged_synthetic = false;
  for (const auto& e : manifest.entries) {
    if (e.source == Source::real) ++real;
    if (e.concept_tags.empty() && e.source == Source::synthetic) untagged_synthetic = true;
    std::set<std::string> unique(e.concept_tags.begin(), e.concept_tags.end());
    for (const auto& tag : unique) {
      report.shares[tag].count += 1;
      any_tag = true;
    }
  }
  for (auto& [tag, s] : report.shares) {
    s.share = static_cast<double>(s.count) / report.total;
    if (s.share > policy.max_concept_share) report.violations.push_back(tag);
  }
  report.real_fraction = static_cast<double>(real) / report.total;
  report.synthetic_fraction = 1.0 - report.real_fraction;
  if (policy.min_real_fraction && report.real_fraction < *policy.min_real_fraction)
    report.violations.push_back("min_real_fraction");
  if (!any_tag) report.warnings.push_back("no concept tags in manifest; share check skipped");
  else if (untagged_synthetic) report.warnings.push_back("untagged synthetic entries cannot be share-checked");
  return report;
}

PromptPool parse_prompts(std::string_view text) {
  PromptPool pool;
  std::set<std::string> seen;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto first = line.find_first_not_of(" \t");
    if (first == std::string::npos || line[first] == '#') continue;
    Prompt prompt;
    if (const auto tab = line.find('\t', first); tab != std::string::npos) {
      prompt.concept_tag = line.substr(first, tab - first);
      prompt.text = line.substr(tab + 1);
    } else {
      prompt.text = line.substr(first);
    }
    prompt.text.erase(0, prompt.text.find_first_not_of(" \t"));
    prompt.text.erase(prompt.text.find_last_not_of(" \t") + 1);
    if (prompt.text.empty()) continue;
    if (prompt.concept_tag.empty()) prompt.concept_tag = prompt.text;
    if (!seen.insert(prompt.text).second) continue;
    pool.prompts.push_back(std::move(prompt));
  }
  if (pool.prompts.empty()) pool.prompts.push_back({PromptPool::default_prompt, PromptPool::default_prompt});
  return pool;
}

PromptPool ingest_prompts(const fs::path& file) { return parse_prompts(read_text(file)); }

std::string instantiate_prompt(std::string_view prompt, std::string_view rare_token, std::string_view class_noun) {
  std::string out(prompt);
  const std::string_view placeholder = PromptPool::rare_token_placeholder;
  const auto pos = out.find(placeholder);
  if (pos != std::string::npos) {
    if (out.find(placeholder, pos + placeholder.size()) != std::string::npos)
      fail(ErrorKind::invalid_argument, "prompt contains the rare-token placeholder more than once");
    out.replace(pos, placeholder.size(), rare_token);
  }
  if (!rare_token.empty()) {
    const auto first = out.find(rare_token);
    if (first != std::string::npos && out.find(rare_token, first + rare_token.size()) != std::string::npos)
      fail(ErrorKind::invalid_argument, "rare token appears more than once");
  }
  if (!class_noun.empty() && out.find(class_noun) == std::string::npos)
    fail(ErrorKind::invalid_argument, "prompt does not mention the class noun '" + std::string(class_noun) + "'");
  return out;
}

}  // namespace pforge
