#pragma once

#include <algorithm>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "pforge/image.hpp"

namespace pforge {

struct FaceRecord;

struct Bucket {
  int width = 0;
  int height = 0;

  double aspect() const { return static_cast<double>(width) / height; }
  long area() const { return static_cast<long>(width) * height; }
  friend bool operator==(const Bucket&, const Bucket&) = default;
};

std::string to_string(const Bucket& bucket);
/// Parses "WxH".
Bucket parse_bucket(std::string_view text);

/// Set of ~1 MP training resolutions with distinct aspect ratios.
class BucketSet {
 public:
  BucketSet() = default;
  explicit BucketSet(std::vector<Bucket> buckets);

  /// SDXL training resolutions, 512x2048 through 2048x512.
  static const BucketSet& sdxl();
  /// One "WxH" per line (blank lines and '#' comments skipped), or a JSON
  /// array of "WxH" strings.
  static BucketSet load(const std::filesystem::path& path);

  const std::vector<Bucket>& buckets() const noexcept { return buckets_; }
  bool empty() const noexcept { return buckets_.empty(); }
  bool contains(const Bucket& b) const { return std::find(buckets_.begin(), buckets_.end(), b) != buckets_.end(); }

  static constexpr long min_area = 900000;
  static constexpr long max_area = 1100000;

 private:
  std::vector<Bucket> buckets_;
};

struct CropWindow {
  int left = 0;
  int top = 0;
  int width = 0;
  int height = 0;

  friend bool operator==(const CropWindow&, const CropWindow&) = default;
};

/// Bucket minimizing |ln(aspect / bucket aspect)|; ties go to the larger
/// area, then the smaller width.
Bucket nearest_bucket(int w, int h, const BucketSet& buckets);

ImageBuffer crop(const ImageBuffer& img, const CropWindow& window);

/// Largest window with the bucket's aspect ratio that fits a w x h image.
CropWindow largest_window(int w, int h, const Bucket& bucket);

struct CenterCropResult {
  ImageBuffer image;
  CropWindow window;
  Bucket bucket;
};

/// Centered crop to the nearest bucket's aspect, resampled (lanczos3) to the
/// bucket. Inputs below half the target area are rejected.
CenterCropResult center_crop_megapixel(const ImageBuffer& img, double target_mp,
                                       const BucketSet& buckets = BucketSet::sdxl());

struct FaceCropResult {
  ImageBuffer image;
  CropWindow window;
  bool clamped_x = false;
  bool clamped_y = false;
  /// Face center inside the window minus the (w/2, h/3) anchor, source px.
  double face_offset_x = 0.0;
  double face_offset_y = 0.0;
};

/// Places the face center at (w/2, h/3) of the largest bucket-aspect window,
/// clamping the window into the image when that placement overflows.
FaceCropResult face_anchored_crop(const ImageBuffer& img, const FaceRecord& face, const Bucket& bucket);

}  // namespace pforge
