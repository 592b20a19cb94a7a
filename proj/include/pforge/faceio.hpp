#pragma once

#include <array>
#include <chrono>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "pforge/image.hpp"

namespace pforge {

enum class LandmarkId : int { left_eye = 0, right_eye = 1, nose = 2, mouth_left = 3, mouth_right = 4 };

/// Five points in continuous image coordinates (pixel (i, j) covers
/// [i, i+1) x [j, j+1)), ordered as LandmarkId.
using Landmarks = std::array<Eigen::Vector2d, 5>;

inline const Eigen::Vector2d& landmark(const Landmarks& lm, LandmarkId id) { return lm[static_cast<int>(id)]; }

struct BBox {
  double left = 0;
  double top = 0;
  double width = 0;
  double height = 0;

  Eigen::Vector2d center() const { return {left + width / 2.0, top + height / 2.0}; }
};

using Embedding = Eigen::VectorXd;
inline constexpr int embedding_dim = 128;

struct FaceRecord {
  BBox bbox;
  Landmarks landmarks{};
  double confidence = 0.0;
  std::optional<Embedding> embedding;
  std::optional<double> yaw_deg;
};

/// Swaps the eye pair and the mouth-corner pair when their x order is
/// reversed.
Landmarks canonicalize(Landmarks lm);

double interocular_distance(const Landmarks& lm);

/// Face analysis provider. Implementations must be safe to call from
/// several threads.
class FaceBackend {
 public:
  virtual ~FaceBackend() = default;
  virtual std::vector<FaceRecord> detect(const ImageBuffer& img) = 0;
  /// `aligned` is the output of align_face; `landmarks` are in its frame.
  virtual Embedding embed(const ImageBuffer& aligned, const Landmarks& landmarks) = 0;
};

/// Deterministic backend for tests: one face per image whose bbox is the
/// centered square of side min(w, h) / 2, with a fixed landmark layout; the
/// embedding is 8x8 pooled gray means tiled twice and L2-normalized.
class StubBackend : public FaceBackend {
 public:
  std::vector<FaceRecord> detect(const ImageBuffer& img) override;
  Embedding embed(const ImageBuffer& aligned, const Landmarks& landmarks) override;

  static Landmarks layout(const BBox& box);
  static constexpr double confidence = 0.99;
};

/// One-layer embedder read from a JSON model file
/// {"input_shape": [h, w, c], "weights": [[...] x 128], "bias": [...]}.
/// The aligned crop is resized to the input shape, scaled to [0, 1], and
/// projected. Detection uses the stub geometry.
class LinearModelBackend : public FaceBackend {
 public:
  LinearModelBackend(const std::filesystem::path& model_file, std::optional<std::array<int, 3>> expected_shape);

  std::vector<FaceRecord> detect(const ImageBuffer& img) override;
  Embedding embed(const ImageBuffer& aligned, const Landmarks& landmarks) override;

  const std::array<int, 3>& input_shape() const noexcept { return shape_; }

 private:
  std::array<int, 3> shape_{};
  Eigen::MatrixXd weights_;
  Eigen::VectorXd bias_;
  StubBackend detector_;
};

enum class BackendKind { external_process, neural_model_file, stub };

BackendKind parse_backend_kind(std::string_view name);
std::string_view to_string(BackendKind kind);

struct BackendConfig {
  BackendKind kind = BackendKind::stub;
  /// Command line for external_process, model path for neural_model_file.
  std::string location;
  std::chrono::milliseconds timeout{30000};
  int pool_size = 1;
  std::optional<std::array<int, 3>> input_shape;
};

std::shared_ptr<FaceBackend> make_backend(const BackendConfig& config);

/// Backend detections in canonical landmark order, by descending confidence.
std::vector<FaceRecord> detect_faces(FaceBackend& backend, const ImageBuffer& img);

inline constexpr int default_aligned_size = 160;

/// Similarity (2x3) taking image coordinates to the aligned frame: the eyes
/// land on (0.35 S, 0.40 S) and (0.65 S, 0.40 S).
Eigen::Matrix<double, 2, 3> alignment_transform(const Landmarks& lm, int size = default_aligned_size);

ImageBuffer align_face(const ImageBuffer& img, const FaceRecord& face, int size = default_aligned_size);

/// Aligns, embeds through the backend, and renormalizes to unit length.
Embedding embed_face(FaceBackend& backend, const ImageBuffer& img, const FaceRecord& face);

/// Crude yaw proxy from the nose offset relative to the eye midpoint:
/// asin(2 r) with r = (nose.x - mid.x) / IOD, positive toward the right eye.
double estimate_yaw(const Landmarks& lm);
inline double estimate_yaw(const FaceRecord& face) { return estimate_yaw(face.landmarks); }

}  // namespace pforge
