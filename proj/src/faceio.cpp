#include "pforge/faceio.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Geometry>

#include <json.hpp>

#include "pforge/external_backend.hpp"
#include "pforge/imageio.hpp"
#include "pforge/imgcore.hpp"

namespace pforge {

Landmarks canonicalize(Landmarks lm) {
  auto& le = lm[static_cast<int>(LandmarkId::left_eye)];
  auto& re = lm[static_cast<int>(LandmarkId::right_eye)];
  if (le.x() > re.x()) std::swap(le, re);
  auto& ml = lm[static_cast<int>(LandmarkId::mouth_left)];
  auto& mr = lm[static_cast<int>(LandmarkId::mouth_right)];
  if (ml.x() > mr.x()) std::swap(ml, mr);
  return lm;
}

double interocular_distance(const Landmarks& lm) {
  return (landmark(lm, LandmarkId::right_eye) - landmark(lm, LandmarkId::left_eye)).norm();
}

Landmarks StubBackend::layout(const BBox& box) {
  auto at = [&](double fx, double fy) {
    return Eigen::Vector2d(box.left + fx * box.width, box.top + fy * box.height);
  };
  return {at(0.30, 0.40), at(0.70, 0.40), at(0.50, 0.60), at(0.35, 0.80), at(0.65, 0.80)};
}

std::vector<FaceRecord> StubBackend::detect(const ImageBuffer& img) {
  const double side = std::min(img.width(), img.height()) / 2.0;
  FaceRecord face;
  face.bbox = {(img.width() - side) / 2.0, (img.height() - side) / 2.0, side, side};
  face.landmarks = layout(face.bbox);
  face.confidence = confidence;
  return {face};
}

Embedding StubBackend::embed(const ImageBuffer& aligned, const Landmarks&) {
  constexpr int grid = 8;
  Eigen::Matrix<double, grid, grid> sums = Eigen::Matrix<double, grid, grid>::Zero();
  Eigen::Matrix<double, grid, grid> counts = Eigen::Matrix<double, grid, grid>::Zero();
  for (int y = 0; y < aligned.height(); ++y)
    for (int x = 0; x < aligned.width(); ++x) {
      const int gy = y * grid / aligned.height();
      const int gx = x * grid / aligned.width();
      sums(gy, gx) += (aligned.at(x, y, 0) + aligned.at(x, y, 1) + aligned.at(x, y, 2)) / 3.0;
      counts(gy, gx) += 1.0;
    }
  Embedding e(embedding_dim);
  for (int i = 0; i < grid * grid; ++i) {
    const int gy = i / grid, gx = i % grid;
    const double mean = counts(gy, gx) > 0 ? sums(gy, gx) / counts(gy, gx) : 0.0;
    e(i) = mean;
    e(i + grid * grid) = mean;
  }
  const double norm = e.norm();
  if (!(norm > 0.0)) fail(ErrorKind::backend_error, "stub embedding of an all-black crop has no direction");
  return e / norm;
}

LinearModelBackend::LinearModelBackend(const std::filesystem::path& model_file,
                                       std::optional<std::array<int, 3>> expected_shape) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text(model_file));
    shape_ = j.at("input_shape").get<std::array<int, 3>>();
    const auto rows = j.at("weights").get<std::vector<std::vector<double>>>();
    const long inputs = static_cast<long>(shape_[0]) * shape_[1] * shape_[2];
    if (shape_[0] < 1 || shape_[1] < 1 || (shape_[2] != 1 && shape_[2] != 3))
      fail(ErrorKind::backend_error, "model input_shape must be [h, w, 1|3]");
    if (rows.empty()) fail(ErrorKind::backend_error, "model has no weights");
    weights_.resize(static_cast<Eigen::Index>(rows.size()), inputs);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      if (static_cast<long>(rows[r].size()) != inputs)
        fail(ErrorKind::backend_error, "model weight row " + std::to_string(r) + " does not match input_shape");
      weights_.row(static_cast<Eigen::Index>(r)) = Eigen::Map<const Eigen::RowVectorXd>(rows[r].data(), inputs);
    }
    bias_ = Eigen::VectorXd::Zero(weights_.rows());
    if (j.contains("bias")) {
      const auto bias = j.at("bias").get<std::vector<double>>();
      if (static_cast<Eigen::Index>(bias.size()) != weights_.rows())
        fail(ErrorKind::backend_error, "model bias length does not match weights");
      bias_ = Eigen::Map<const Eigen::VectorXd>(bias.data(), weights_.rows());
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::backend_error, "model file " + model_file.string() + ": " + e.what());
  }
  if (expected_shape && *expected_shape != shape_)
    fail(ErrorKind::backend_error, "model input_shape does not match the configured input shape");
}

std::vector<FaceRecord> LinearModelBackend::detect(const ImageBuffer& img) { return detector_.detect(img); }

Embedding LinearModelBackend::embed(const ImageBuffer& aligned, const Landmarks&) {
  const ImageBuffer input = resample(aligned, shape_[1], shape_[0], Kernel::bilinear);
  Eigen::VectorXd x(weights_.cols());
  Eigen::Index k = 0;
  for (int y = 0; y < shape_[0]; ++y)
    for (int xx = 0; xx < shape_[1]; ++xx) {
      if (shape_[2] == 1) {
        x(k++) = (input.at(xx, y, 0) + input.at(xx, y, 1) + input.at(xx, y, 2)) / (3.0 * 255.0);
      } else {
        for (int c = 0; c < 3; ++c) x(k++) = input.at(xx, y, c) / 255.0;
      }
    }
  return weights_ * x + bias_;
}

BackendKind parse_backend_kind(std::string_view name) {
  if (name == "external_process") return BackendKind::external_process;
  if (name == "neural_model_file") return BackendKind::neural_model_file;
  if (name == "stub") return BackendKind::stub;
  fail(ErrorKind::invalid_argument, "unknown face backend kind: " + std::string(name));
}

std::string_view to_string(BackendKind kind) {
  switch (kind) {
    case BackendKind::external_process: return "external_process";
    case BackendKind::neural_model_file: return "neural_model_file";
    case BackendKind::stub: return "stub";
  }
  return "?";
}

std::shared_ptr<FaceBackend> make_backend(const BackendConfig& config) {
  switch (config.kind) {
    case BackendKind::stub:
      return std::make_shared<StubBackend>();
    case BackendKind::neural_model_file:
      return std::make_shared<LinearModelBackend>(config.location, config.input_shape);
    case BackendKind::external_process:
      if (config.location.empty()) fail(ErrorKind::invalid_argument, "external_process backend needs a command");
      return std::make_shared<ExternalProcessBackend>(config.location, config.timeout, config.pool_size);
  }
  fail(ErrorKind::invalid_argument, "unknown backend");
}

std::vector<FaceRecord> detect_faces(FaceBackend& backend, const ImageBuffer& img) {
  auto faces = backend.detect(img);
  for (auto& f : faces) f.landmarks = canonicalize(f.landmarks);
  std::stable_sort(faces.begin(), faces.end(),
                   [](const FaceRecord& a, const FaceRecord& b) { return a.confidence > b.confidence; });
  return faces;
}

Eigen::Matrix<double, 2, 3> alignment_transform(const Landmarks& lm, int size) {
  const Eigen::Vector2d le = landmark(lm, LandmarkId::left_eye);
  const Eigen::Vector2d re = landmark(lm, LandmarkId::right_eye);
  const Eigen::Vector2d src = re - le;
  if (src.norm() < 1e-9) fail(ErrorKind::degenerate_landmarks, "eye landmarks coincide");
  const Eigen::Vector2d target_left(0.35 * size, 0.40 * size);
  const Eigen::Vector2d target = Eigen::Vector2d(0.65 * size, 0.40 * size) - target_left;
  // Complex-number form of the similarity taking src onto target.
  const double denom = src.squaredNorm();
  const double a = (target.x() * src.x() + target.y() * src.y()) / denom;
  const double b = (target.y() * src.x() - target.x() * src.y()) / denom;
  Eigen::Matrix<double, 2, 3> m;
  m << a, -b, 0, b, a, 0;
  m.col(2) = target_left - m.leftCols<2>() * le;
  return m;
}

namespace {

Eigen::Matrix<double, 2, 3> invert_affine(const Eigen::Matrix<double, 2, 3>& m) {
  Eigen::Matrix<double, 2, 3> inv;
  const Eigen::Matrix2d li = m.leftCols<2>().inverse();
  inv.leftCols<2>() = li;
  inv.col(2) = -li * m.col(2);
  return inv;
}

}  // namespace

ImageBuffer align_face(const ImageBuffer& img, const FaceRecord& face, int size) {
  const auto to_aligned = alignment_transform(face.landmarks, size);
  return warp_affine(img, invert_affine(to_aligned), size, size, Rgb{0, 0, 0});
}

Embedding embed_face(FaceBackend& backend, const ImageBuffer& img, const FaceRecord& face) {
  const auto to_aligned = alignment_transform(face.landmarks, default_aligned_size);
  const ImageBuffer aligned = warp_affine(img, invert_affine(to_aligned), default_aligned_size,
                                          default_aligned_size, Rgb{0, 0, 0});
  Landmarks mapped;
  for (int i = 0; i < 5; ++i) mapped[i] = to_aligned * face.landmarks[i].homogeneous();
  Embedding e = backend.embed(aligned, mapped);
  const double norm = e.norm();
  if (!std::isfinite(norm) || norm < 1e-12) fail(ErrorKind::backend_error, "backend returned a degenerate embedding");
  return e / norm;
}

double estimate_yaw(const Landmarks& lm) {
  const double iod = interocular_distance(lm);
  if (iod < 1e-9) fail(ErrorKind::degenerate_landmarks, "eye landmarks coincide");
  const Eigen::Vector2d mid =
      (landmark(lm, LandmarkId::left_eye) + landmark(lm, LandmarkId::right_eye)) / 2.0;
  const double r = std::clamp((landmark(lm, LandmarkId::nose).x() - mid.x()) / iod, -1.0, 1.0);
  return std::asin(std::clamp(2.0 * r, -1.0, 1.0)) * 180.0 / EIGEN_PI;
}

}  // namespace pforge
