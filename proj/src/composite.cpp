#include "pforge/composite.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/IterativeLinearSolvers>
#include <Eigen/SparseCore>

#include "pforge/imgcore.hpp"
#include "pforge/random.hpp"

namespace pforge {

Rgb Palette::pick(std::uint64_t seed) const {
  const std::uint64_t h = splitmix64(seed ^ fnv1a64(name));
  if (gray_range) {
    const auto [lo, hi] = *gray_range;
    const auto v = static_cast<std::uint8_t>(lo + static_cast<int>(h % static_cast<std::uint64_t>(hi - lo + 1)));
    return {v, v, v};
  }
  if (colors.empty()) fail(ErrorKind::invalid_argument, "palette " + name + " has no colors");
  return colors[h % colors.size()];
}

namespace {

Palette from_hex(std::string name, std::initializer_list<const char*> hex) {
  Palette p{std::move(name), {}, std::nullopt};
  for (const char* h : hex) p.colors.push_back(parse_hex_color(h));
  return p;
}

}  // namespace

const Palette& Palette::pastel() {
  static const Palette p = from_hex(
      "pastel", {"#55efc4", "#81ecec", "#74b9ff", "#a29bfe", "#ffeaa7", "#fab1a0", "#ff7675", "#fd79a8"});
  return p;
}

const Palette& Palette::rainbow() {
  static const Palette p = from_hex("rainbow", {"#2ecc71", "#3498db", "#9b59b6", "#f1c40f", "#e67e22", "#e74c3c"});
  return p;
}

const Palette& Palette::gray() {
  static const Palette p{"gray", {}, std::pair{0, 255}};
  return p;
}

const Palette& Palette::dark_gray() {
  static const Palette p{"dark_gray", {}, std::pair{0, 127}};
  return p;
}

const Palette& Palette::light_gray() {
  static const Palette p{"light_gray", {}, std::pair{128, 255}};
  return p;
}

Palette Palette::by_name(std::string_view name) {
  if (name == "pastel") return pastel();
  if (name == "rainbow") return rainbow();
  if (name == "gray") return gray();
  if (name == "dark_gray") return dark_gray();
  if (name == "light_gray") return light_gray();
  if (!name.empty() && name.front() == '#') return Palette{std::string(name), {parse_hex_color(name)}, std::nullopt};
  fail(ErrorKind::invalid_argument, "unknown palette: " + std::string(name));
}

Mask feather_mask(const Mask& mask, int radius) {
  if (radius < 0) fail(ErrorKind::invalid_argument, "feather radius must be >= 0");
  if (radius == 0) return mask;
  const int w = mask.width();
  const int h = mask.height();
  std::vector<double> tmp(static_cast<std::size_t>(w) * h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0;
      for (int k = -radius; k <= radius; ++k) s += mask.at(std::clamp(x + k, 0, w - 1), y);
      tmp[static_cast<std::size_t>(y) * w + x] = s / (2 * radius + 1);
    }
  Mask out(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0;
      for (int k = -radius; k <= radius; ++k) s += tmp[static_cast<std::size_t>(std::clamp(y + k, 0, h - 1)) * w + x];
      out.at(x, y) = to_byte(s / (2 * radius + 1));
    }
  return out;
}

namespace {

void require_same_dims(const ImageBuffer& img, const Mask& mask, const char* what) {
  if (img.width() != mask.width() || img.height() != mask.height())
    fail(ErrorKind::invalid_argument, std::string(what) + ": mask dimensions do not match image");
}

}  // namespace

ImageBuffer alpha_blend(const ImageBuffer& src, const ImageBuffer& dst, const Mask& mask) {
  require_same_dims(src, mask, "alpha_blend");
  require_same_dims(dst, mask, "alpha_blend");
  const int ch = std::min(src.channels(), dst.channels());
  ImageBuffer out(src.width(), src.height(), ch);
  for (int y = 0; y < src.height(); ++y)
    for (int x = 0; x < src.width(); ++x) {
      const double m = mask.at(x, y) / 255.0;
      for (int c = 0; c < ch; ++c) out.at(x, y, c) = to_byte(m * src.at(x, y, c) + (1.0 - m) * dst.at(x, y, c));
    }
  return out;
}

ImageBuffer replace_background(const ImageBuffer& img, const Mask& mask, const Background& background,
                               std::uint64_t seed) {
  require_same_dims(img, mask, "replace_background");
  const ImageBuffer rgb = to_rgb(img);
  ImageBuffer bg;
  if (const auto* palette = std::get_if<Palette>(&background)) {
    bg = ImageBuffer::filled(img.width(), img.height(), palette->pick(seed));
  } else {
    const auto& b = to_rgb(std::get<ImageBuffer>(background));
    bg = (b.width() == img.width() && b.height() == img.height())
             ? b
             : resample(b, img.width(), img.height(), Kernel::lanczos3);
  }
  return alpha_blend(rgb, bg, mask);
}

template <typename Scalar>
PoissonSolution<Scalar> poisson_solve(const ImageBuffer& src, const ImageBuffer& dst, const Mask& mask,
                                      Offset offset, const PoissonOptions& options) {
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  if (src.width() != mask.width() || src.height() != mask.height())
    fail(ErrorKind::invalid_argument, "poisson_blend: mask dimensions do not match source");
  const int sw = src.width(), sh = src.height();
  const int dw = dst.width(), dh = dst.height();

  // Unknown index per source pixel, -1 outside the region.
  std::vector<int> index(static_cast<std::size_t>(sw) * sh, -1);
  std::vector<std::pair<int, int>> cells;
  for (int y = 0; y < sh; ++y)
    for (int x = 0; x < sw; ++x) {
      if (mask.at(x, y) < 128) continue;
      const int tx = x + offset.x, ty = y + offset.y;
      if (tx < 1 || ty < 1 || tx > dw - 2 || ty > dh - 2)
        fail(ErrorKind::invalid_argument, "poisson_blend: region touches or leaves the destination border");
      index[static_cast<std::size_t>(y) * sw + x] = static_cast<int>(cells.size());
      cells.emplace_back(x, y);
    }

  PoissonSolution<Scalar> result;
  result.unknowns = static_cast<int>(cells.size());
  for (int c = 0; c < dst.channels(); ++c) result.channels.push_back(channel_plane<Scalar>(dst, c));
  if (cells.empty()) return result;

  const int n = static_cast<int>(cells.size());
  static constexpr int nbr[4][2] = {{1, 0}, {-1, 0}, {0, 1}, {0, -1}};
  std::vector<Eigen::Triplet<Scalar>> triplets;
  triplets.reserve(static_cast<std::size_t>(n) * 5);
  for (int i = 0; i < n; ++i) {
    const auto [x, y] = cells[static_cast<std::size_t>(i)];
    triplets.emplace_back(i, i, Scalar(4));
    for (const auto& d : nbr) {
      const int qx = x + d[0], qy = y + d[1];
      if (qx >= 0 && qy >= 0 && qx < sw && qy < sh) {
        const int j = index[static_cast<std::size_t>(qy) * sw + qx];
        if (j >= 0) triplets.emplace_back(i, j, Scalar(-1));
      }
    }
  }
  Eigen::SparseMatrix<Scalar> A(n, n);
  A.setFromTriplets(triplets.begin(), triplets.end());

  Eigen::ConjugateGradient<Eigen::SparseMatrix<Scalar>, Eigen::Lower | Eigen::Upper> cg;
  cg.setMaxIterations(options.max_iters);
  cg.setTolerance(static_cast<typename Eigen::NumTraits<Scalar>::Real>(options.tolerance * 1e-2));
  cg.compute(A);

  const int sch = std::min(src.channels(), dst.channels());
  for (int c = 0; c < sch; ++c) {
    Vector b = Vector::Zero(n);
    for (int i = 0; i < n; ++i) {
      const auto [x, y] = cells[static_cast<std::size_t>(i)];
      const int tx = x + offset.x, ty = y + offset.y;
      Scalar rhs = 0;
      for (const auto& d : nbr) {
        const int qx = x + d[0], qy = y + d[1];
        const bool inside = qx >= 0 && qy >= 0 && qx < sw && qy < sh;
        if (!inside || index[static_cast<std::size_t>(qy) * sw + qx] < 0)
          rhs += Scalar(dst.at(tx + d[0], ty + d[1], c));
        Scalar g = Scalar(src.at(x, y, c)) - Scalar(src.at(std::clamp(qx, 0, sw - 1), std::clamp(qy, 0, sh - 1), c));
        if (options.mixed_gradients) {
          const Scalar gd = Scalar(dst.at(tx, ty, c)) - Scalar(dst.at(tx + d[0], ty + d[1], c));
          if (std::abs(gd) > std::abs(g)) g = gd;
        }
        rhs += g;
      }
      b(i) = rhs;
    }
    Vector sol = cg.solve(b);
    result.iterations = std::max(result.iterations, static_cast<int>(cg.iterations()));
    const double bnorm = static_cast<double>(b.norm());
    const double rnorm = static_cast<double>((b - A * sol).norm());
    const double rel = bnorm > 0.0 ? rnorm / bnorm : rnorm;
    result.relative_residual = std::max(result.relative_residual, rel);
    if (!(rel < options.tolerance))
      throw SolverFailed("poisson_blend: solver did not reach the residual target (residual " +
                             std::to_string(rel) + ")",
                         rel);
    auto& plane = result.channels[static_cast<std::size_t>(c)];
    for (int i = 0; i < n; ++i) {
      const auto [x, y] = cells[static_cast<std::size_t>(i)];
      plane(y + offset.y, x + offset.x) = sol(i);
    }
  }
  return result;
}

template PoissonSolution<float> poisson_solve<float>(const ImageBuffer&, const ImageBuffer&, const Mask&, Offset,
                                                     const PoissonOptions&);
template PoissonSolution<double> poisson_solve<double>(const ImageBuffer&, const ImageBuffer&, const Mask&, Offset,
                                                       const PoissonOptions&);

ImageBuffer poisson_blend(const ImageBuffer& src, const ImageBuffer& dst, const Mask& mask, Offset offset,
                          const PoissonOptions& options) {
  const auto solution = poisson_solve<double>(src, dst, mask, offset, options);
  ImageBuffer out = dst;
  for (int c = 0; c < dst.channels(); ++c) {
    const auto& plane = solution.channels[static_cast<std::size_t>(c)];
    for (int y = 0; y < dst.height(); ++y)
      for (int x = 0; x < dst.width(); ++x) out.at(x, y, c) = to_byte(plane(y, x));
  }
  return out;
}

}  // namespace pforge
