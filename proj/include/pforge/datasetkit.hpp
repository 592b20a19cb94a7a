#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "pforge/cropkit.hpp"
#include "pforge/faceio.hpp"
#include "pforge/image.hpp"

namespace pforge {

using ojson = nlohmann::ordered_json;

enum class Source { real, synthetic };

std::string_view to_string(Source source);
Source parse_source(std::string_view text);

struct ProvenanceRecord {
  std::string op;
  ojson params = ojson::object();
  std::uint64_t seed = 0;

  friend bool operator==(const ProvenanceRecord&, const ProvenanceRecord&) = default;
};

struct ManifestEntry {
  std::string id;
  /// Relative to the manifest's directory.
  std::string path;
  int width = 0;
  int height = 0;
  Source source = Source::real;
  std::vector<std::string> concept_tags;
  std::vector<ProvenanceRecord> provenance;

  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

struct DatasetManifest {
  static constexpr const char* current_schema = "1";

  std::string schema_version = current_schema;
  std::string subject_id;
  std::vector<ManifestEntry> entries;

  /// Throws invalid_argument on duplicate ids or an unknown schema.
  void validate() const;
  const ManifestEntry* find(std::string_view id) const;

  std::string to_json_text() const;
  static DatasetManifest from_json_text(std::string_view text);

  static DatasetManifest load(const std::filesystem::path& file);
  void save(const std::filesystem::path& file) const;

  friend bool operator==(const DatasetManifest&, const DatasetManifest&) = default;
};

void to_json(ojson& j, const ProvenanceRecord& r);
void from_json(const ojson& j, ProvenanceRecord& r);
void to_json(ojson& j, const ManifestEntry& e);
void from_json(const ojson& j, ManifestEntry& e);

struct BuildConfig {
  std::string subject_id;
  double min_confidence = 0.95;
  std::string image_subdir = "images";
};

struct Rejection {
  std::string file;
  std::string reason;
};

struct BuildResult {
  DatasetManifest manifest;
  std::vector<Rejection> rejected;
  /// Counts per rejection reason ("no-face", "multi-face", "low-confidence",
  /// "unreadable", ...).
  std::map<std::string, int> reasons;
};

/// Keeps images with exactly one confident face, crops each around the face
/// to its nearest bucket, and writes images plus manifest.json into out_dir.
/// Unreadable files are skipped; backend errors abort.
BuildResult build_dataset(const std::filesystem::path& raw_dir, const std::filesystem::path& out_dir,
                          const BucketSet& buckets, const BuildConfig& config, FaceBackend& backend);

struct AugStep {
  std::string op;
  double probability = 1.0;
  ojson params = ojson::object();
};

/// Ordered augmentation steps applied per entry with randomness derived from
/// the master seed and the entry id. Supported ops: flip_horizontal, rotate,
/// color_jitter, auto_levels, resize, center_crop, replace_background.
struct AugPlan {
  std::uint64_t master_seed = 0;
  std::vector<AugStep> steps;

  static AugPlan from_json(const ojson& j);
  static AugPlan load(const std::filesystem::path& file);
};

struct EntryFailure {
  std::string id;
  std::string error;
};

struct ApplyResult {
  DatasetManifest manifest;
  std::vector<EntryFailure> failures;
};

/// Runs the plan over every entry (resolved against manifest_dir) and writes
/// outputs plus manifest.json to out_dir. Inputs are never modified.
ApplyResult apply_plan(const DatasetManifest& manifest, const std::filesystem::path& manifest_dir, const AugPlan& plan,
                       const std::filesystem::path& out_dir);

struct MixPolicy {
  double max_concept_share = 0.25;
  std::optional<double> min_real_fraction;
};

struct ConceptShare {
  int count = 0;
  double share = 0.0;
};

struct MixReport {
  int total = 0;
  std::map<std::string, ConceptShare> shares;
  std::vector<std::string> violations;
  std::vector<std::string> warnings;
  double real_fraction = 0.0;
  double synthetic_fraction = 0.0;

  bool ok() const { return violations.empty(); }
};

/// A concept violates the policy when its share is strictly above the limit.
MixReport validate_mix(const DatasetManifest& manifest, const MixPolicy& policy = {});

struct Prompt {
  std::string text;
  /// Concept tag; the prompt text itself unless given as "tag<TAB>prompt".
  std::string concept_tag;
};

struct PromptPool {
  static constexpr const char* default_prompt =
      "A professional headshot of a subject wearing a suit in a well-lit studio, DSLR.";
  static constexpr const char* rare_token_placeholder = "[V]";

  std::vector<Prompt> prompts;
};

/// One prompt per line; blank lines and '#' comments dropped, duplicates
/// removed keeping the first, default prompt used when nothing remains.
PromptPool ingest_prompts(const std::filesystem::path& file);
PromptPool parse_prompts(std::string_view text);

/// Replaces the "[V]" placeholder with the rare token. The result must
/// mention the class noun and contain the token at most once.
std::string instantiate_prompt(std::string_view prompt, std::string_view rare_token, std::string_view class_noun);

}  // namespace pforge
