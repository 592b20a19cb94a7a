#pragma once

#include <optional>
#include <string>
#include <string_view>

#include <Eigen/Core>

#include "pforge/image.hpp"

namespace pforge {

enum class Kernel { bilinear, bicubic, lanczos3 };

std::string_view to_string(Kernel kernel);
Kernel parse_kernel(std::string_view name);

/// Kernel radius in source pixels at unit scale.
double kernel_support(Kernel kernel);

/// Triangle, Keys cubic (a = -0.5) and Lanczos with three lobes.
template <typename Scalar>
Scalar kernel_weight(Kernel kernel, Scalar x) {
  using std::abs;
  using std::sin;
  const Scalar ax = abs(x);
  switch (kernel) {
    case Kernel::bilinear:
      return ax < Scalar(1) ? Scalar(1) - ax : Scalar(0);
    case Kernel::bicubic: {
      constexpr double a = -0.5;
      if (ax < Scalar(1)) return ((Scalar(a + 2) * ax - Scalar(a + 3)) * ax) * ax + Scalar(1);
      if (ax < Scalar(2)) return ((Scalar(a) * ax - Scalar(5 * a)) * ax + Scalar(8 * a)) * ax - Scalar(4 * a);
      return Scalar(0);
    }
    case Kernel::lanczos3: {
      if (ax == Scalar(0)) return Scalar(1);
      if (ax >= Scalar(3)) return Scalar(0);
      const Scalar pi = Scalar(EIGEN_PI);
      return Scalar(3) * sin(pi * ax) * sin(pi * ax / Scalar(3)) / (pi * pi * ax * ax);
    }
  }
  return Scalar(0);
}

/// Separable resampling. Output pixel x samples the source at
/// (x + 0.5) * in/out - 0.5; when shrinking, the kernel is widened by the
/// scale factor. Source coordinates are clamped at the edges and weights are
/// normalized per output pixel. Rounds half up once, at the end.
ImageBuffer resample(const ImageBuffer& img, int out_w, int out_h, Kernel kernel);

ImageBuffer flip_horizontal(const ImageBuffer& img);

/// Rotates counter-clockwise (as seen on screen) about the image center.
/// The canvas grows to the bounding box of the rotated image and uncovered
/// pixels take `fill`.
ImageBuffer rotate(const ImageBuffer& img, double angle_deg, Rgb fill = {});

/// Continuous pixel coordinates: pixel (i, j) covers [i, i+1) x [j, j+1).
/// Each output pixel center is mapped through `out_to_src` and sampled
/// bilinearly; points outside the source extent take `fill`.
ImageBuffer warp_affine(const ImageBuffer& img, const Eigen::Matrix<double, 2, 3>& out_to_src, int out_w,
                        int out_h, Rgb fill = {});

struct ColorJitterParams {
  double brightness_pct = 0.0;
  double saturation_pct = 0.0;
  double hue_deg = 0.0;

  static constexpr double mild = 5.0;
  static constexpr double strong = 15.0;
};

/// HSV jitter: hue shifted additively (mod 360), S and V scaled by
/// (1 + pct / 100) and clamped. Alpha, if present, passes through.
ImageBuffer color_jitter(const ImageBuffer& img, const ColorJitterParams& params);

/// Per-channel linear stretch taking the clip_fraction and
/// 1 - clip_fraction quantiles to 0 and 255. Channels whose quantiles
/// coincide pass through unchanged.
ImageBuffer auto_levels(const ImageBuffer& img, double clip_fraction = 0.0);

enum class ResampleMode { none, upsample_only, down_then_up };

std::string_view to_string(ResampleMode mode);
ResampleMode parse_resample_mode(std::string_view name);

struct ResamplePolicy {
  ResampleMode mode = ResampleMode::none;
  Kernel kernel = Kernel::lanczos3;
  double down_scale = 0.5;
  double up_scale = 2.0;
};

/// Stage sizes are round(dim * factor), at least 1.
ImageBuffer apply_resize_policy(const ImageBuffer& img, const ResamplePolicy& policy);

/// Drops the alpha channel if present.
ImageBuffer to_rgb(const ImageBuffer& img);

}  // namespace pforge
