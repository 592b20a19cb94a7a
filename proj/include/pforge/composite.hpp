#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "pforge/image.hpp"

namespace pforge {

/// Flat background colors: either a discrete list or an inclusive gray range.
struct Palette {
  std::string name;
  std::vector<Rgb> colors;
  std::optional<std::pair<int, int>> gray_range;

  /// Deterministic choice of one color (or one gray level) from `seed`.
  Rgb pick(std::uint64_t seed) const;

  static const Palette& pastel();
  static const Palette& rainbow();
  static const Palette& gray();
  static const Palette& dark_gray();
  static const Palette& light_gray();
  /// Built-in by name ("pastel", "rainbow", "gray", "dark_gray",
  /// "light_gray"), or a single "#rrggbb" color.
  static Palette by_name(std::string_view name);
};

using Background = std::variant<ImageBuffer, Palette>;

/// Separable box blur of radius `radius`; radius 0 returns the mask.
Mask feather_mask(const Mask& mask, int radius);

/// out = m * img + (1 - m) * background with m = mask / 255, rounded half up.
/// Image backgrounds are resampled to the image size first.
ImageBuffer replace_background(const ImageBuffer& img, const Mask& mask, const Background& background,
                               std::uint64_t seed = 0);

/// out = m * src + (1 - m) * dst with m = mask / 255.
ImageBuffer alpha_blend(const ImageBuffer& src, const ImageBuffer& dst, const Mask& mask);

struct Offset {
  int x = 0;
  int y = 0;
};

struct PoissonOptions {
  int max_iters = 20000;
  /// Required relative residual ||b - Ax|| / ||b|| of the returned solution.
  double tolerance = 1e-6;
  /// Per edge, keep whichever of the source or destination gradient is larger.
  bool mixed_gradients = false;
};

template <typename Scalar>
struct PoissonSolution {
  /// Destination-sized planes: solved values inside the region, dst elsewhere.
  std::vector<Plane<Scalar>> channels;
  double relative_residual = 0.0;
  int iterations = 0;
  int unknowns = 0;
};

/// Seamless cloning. The region is {mask >= 128} in source coordinates,
/// placed at source + offset in dst, and must keep a one pixel border inside
/// dst. Per channel, solves the 4-neighbour Poisson equation whose guidance
/// field is the source gradient, with Dirichlet values taken from dst.
/// Source neighbours beyond the source edge are clamped.
template <typename Scalar = double>
PoissonSolution<Scalar> poisson_solve(const ImageBuffer& src, const ImageBuffer& dst, const Mask& mask,
                                      Offset offset, const PoissonOptions& options = {});

/// poisson_solve rounded and clamped to 8 bits; dst channel layout.
ImageBuffer poisson_blend(const ImageBuffer& src, const ImageBuffer& dst, const Mask& mask, Offset offset,
                          const PoissonOptions& options = {});

}  // namespace pforge
