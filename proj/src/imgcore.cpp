#include "pforge/imgcore.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <vector>

namespace pforge {
namespace {

struct Tap {
  int index;
  double weight;
};

// One list of (source index, normalized weight) per output coordinate.
std::vector<std::vector<Tap>> weight_table(int in_size, int out_size, Kernel kernel) {
  const double scale = static_cast<double>(in_size) / out_size;
  const double filter_scale = std::max(scale, 1.0);
  const double radius = kernel_support(kernel) * filter_scale;
  std::vector<std::vector<Tap>> table(static_cast<std::size_t>(out_size));
  for (int x = 0; x < out_size; ++x) {
    const double center = (x + 0.5) * scale - 0.5;
    const int first = static_cast<int>(std::ceil(center - radius));
    const int last = static_cast<int>(std::floor(center + radius));
    auto& taps = table[static_cast<std::size_t>(x)];
    double sum = 0.0;
    for (int i = first; i <= last; ++i) {
      const double w = kernel_weight(kernel, (i - center) / filter_scale);
      if (w == 0.0) continue;
      taps.push_back({std::clamp(i, 0, in_size - 1), w});
      sum += w;
    }
    for (auto& t : taps) t.weight /= sum;
  }
  return table;
}

double snap_extent(double v) {
  const double r = std::round(v);
  if (std::abs(v - r) < 1e-6) return r;
  return std::ceil(v);
}

}  // namespace

std::string_view to_string(Kernel kernel) {
  switch (kernel) {
    case Kernel::bilinear: return "bilinear";
    case Kernel::bicubic: return "bicubic";
    case Kernel::lanczos3: return "lanczos3";
  }
  return "?";
}

Kernel parse_kernel(std::string_view name) {
  if (name == "bilinear") return Kernel::bilinear;
  if (name == "bicubic") return Kernel::bicubic;
  if (name == "lanczos3" || name == "lanczos") return Kernel::lanczos3;
  fail(ErrorKind::invalid_argument, "unknown kernel: " + std::string(name));
}

double kernel_support(Kernel kernel) {
  switch (kernel) {
    case Kernel::bilinear: return 1.0;
    case Kernel::bicubic: return 2.0;
    case Kernel::lanczos3: return 3.0;
  }
  return 1.0;
}

ImageBuffer resample(const ImageBuffer& img, int out_w, int out_h, Kernel kernel) {
  if (out_w < 1 || out_h < 1) fail(ErrorKind::invalid_argument, "resample: output dimensions must be >= 1");
  const int in_w = img.width();
  const int in_h = img.height();
  const int ch = img.channels();
  const auto xs = weight_table(in_w, out_w, kernel);
  const auto ys = weight_table(in_h, out_h, kernel);

  // Horizontal pass into a float buffer of in_h rows.
  std::vector<double> tmp(static_cast<std::size_t>(in_h) * out_w * ch, 0.0);
  for (int y = 0; y < in_h; ++y)
    for (int x = 0; x < out_w; ++x)
      for (const auto& t : xs[static_cast<std::size_t>(x)])
        for (int c = 0; c < ch; ++c)
          tmp[(static_cast<std::size_t>(y) * out_w + x) * ch + c] += t.weight * img.at(t.index, y, c);

  ImageBuffer out(out_w, out_h, ch);
  std::vector<double> acc(static_cast<std::size_t>(ch));
  for (int y = 0; y < out_h; ++y)
    for (int x = 0; x < out_w; ++x) {
      std::fill(acc.begin(), acc.end(), 0.0);
      for (const auto& t : ys[static_cast<std::size_t>(y)])
        for (int c = 0; c < ch; ++c)
          acc[static_cast<std::size_t>(c)] += t.weight * tmp[(static_cast<std::size_t>(t.index) * out_w + x) * ch + c];
      for (int c = 0; c < ch; ++c) out.at(x, y, c) = to_byte(acc[static_cast<std::size_t>(c)]);
    }
  return out;
}

ImageBuffer flip_horizontal(const ImageBuffer& img) {
  ImageBuffer out(img.width(), img.height(), img.channels());
  const int w = img.width();
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < img.channels(); ++c) out.at(x, y, c) = img.at(w - 1 - x, y, c);
  return out;
}

ImageBuffer warp_affine(const ImageBuffer& img, const Eigen::Matrix<double, 2, 3>& out_to_src, int out_w,
                        int out_h, Rgb fill) {
  ImageBuffer out(out_w, out_h, img.channels());
  const int w = img.width();
  const int h = img.height();
  const std::array<std::uint8_t, 4> fill_px{fill.r, fill.g, fill.b, 255};
  constexpr double eps = 1e-9;
  for (int y = 0; y < out_h; ++y)
    for (int x = 0; x < out_w; ++x) {
      const Eigen::Vector2d src = out_to_src * Eigen::Vector3d(x + 0.5, y + 0.5, 1.0);
      if (src.x() < -eps || src.y() < -eps || src.x() > w + eps || src.y() > h + eps) {
        for (int c = 0; c < img.channels(); ++c) out.at(x, y, c) = fill_px[static_cast<std::size_t>(c)];
        continue;
      }
      const double u = src.x() - 0.5;
      const double v = src.y() - 0.5;
      const int x0 = static_cast<int>(std::floor(u));
      const int y0 = static_cast<int>(std::floor(v));
      const double fx = u - x0;
      const double fy = v - y0;
      const int xa = std::clamp(x0, 0, w - 1), xb = std::clamp(x0 + 1, 0, w - 1);
      const int ya = std::clamp(y0, 0, h - 1), yb = std::clamp(y0 + 1, 0, h - 1);
      for (int c = 0; c < img.channels(); ++c) {
        const double top = (1 - fx) * img.at(xa, ya, c) + fx * img.at(xb, ya, c);
        const double bottom = (1 - fx) * img.at(xa, yb, c) + fx * img.at(xb, yb, c);
        out.at(x, y, c) = to_byte((1 - fy) * top + fy * bottom);
      }
    }
  return out;
}

ImageBuffer rotate(const ImageBuffer& img, double angle_deg, Rgb fill) {
  if (!std::isfinite(angle_deg)) fail(ErrorKind::invalid_argument, "rotate: angle must be finite");
  if (angle_deg == 0.0) return img;
  const double t = angle_deg * EIGEN_PI / 180.0;
  const double c = std::cos(t);
  const double s = std::sin(t);
  const int w = img.width();
  const int h = img.height();
  const int out_w = std::max(1, static_cast<int>(snap_extent(std::abs(w * c) + std::abs(h * s))));
  const int out_h = std::max(1, static_cast<int>(snap_extent(std::abs(w * s) + std::abs(h * c))));
  // out -> src: src = c_in + R^-1 (p - c_out), R being CCW on a y-down raster.
  Eigen::Matrix2d inv;
  inv << c, -s, s, c;
  const Eigen::Vector2d c_in(w / 2.0, h / 2.0);
  const Eigen::Vector2d c_out(out_w / 2.0, out_h / 2.0);
  Eigen::Matrix<double, 2, 3> m;
  m.leftCols<2>() = inv;
  m.col(2) = c_in - inv * c_out;
  return warp_affine(img, m, out_w, out_h, fill);
}

namespace {

struct Hsv {
  double h, s, v;  // h in degrees [0, 360), s and v in [0, 1]
};

Hsv rgb_to_hsv(double r, double g, double b) {
  const double mx = std::max({r, g, b});
  const double mn = std::min({r, g, b});
  const double d = mx - mn;
  double h = 0.0;
  if (d > 0.0) {
    if (mx == r)
      h = 60.0 * std::fmod((g - b) / d + 6.0, 6.0);
    else if (mx == g)
      h = 60.0 * ((b - r) / d + 2.0);
    else
      h = 60.0 * ((r - g) / d + 4.0);
  }
  return {h, mx > 0.0 ? d / mx : 0.0, mx};
}

void hsv_to_rgb(const Hsv& hsv, double& r, double& g, double& b) {
  const double c = hsv.v * hsv.s;
  const double hp = hsv.h / 60.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  const double m = hsv.v - c;
  double r1 = 0, g1 = 0, b1 = 0;
  switch (static_cast<int>(std::floor(hp)) % 6) {
    case 0: r1 = c; g1 = x; break;
    case 1: r1 = x; g1 = c; break;
    case 2: g1 = c; b1 = x; break;
    case 3: g1 = x; b1 = c; break;
    case 4: r1 = x; b1 = c; break;
    default: r1 = c; b1 = x; break;
  }
  r = r1 + m;
  g = g1 + m;
  b = b1 + m;
}

}  // namespace

ImageBuffer color_jitter(const ImageBuffer& img, const ColorJitterParams& params) {
  ImageBuffer out = img;
  const double s_gain = 1.0 + params.saturation_pct / 100.0;
  const double v_gain = 1.0 + params.brightness_pct / 100.0;
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x) {
      Hsv hsv = rgb_to_hsv(img.at(x, y, 0) / 255.0, img.at(x, y, 1) / 255.0, img.at(x, y, 2) / 255.0);
      hsv.h = std::fmod(hsv.h + params.hue_deg, 360.0);
      if (hsv.h < 0.0) hsv.h += 360.0;
      if (hsv.h >= 360.0) hsv.h -= 360.0;
      hsv.s = std::clamp(hsv.s * s_gain, 0.0, 1.0);
      hsv.v = std::clamp(hsv.v * v_gain, 0.0, 1.0);
      double r, g, b;
      hsv_to_rgb(hsv, r, g, b);
      out.at(x, y, 0) = to_byte(r * 255.0);
      out.at(x, y, 1) = to_byte(g * 255.0);
      out.at(x, y, 2) = to_byte(b * 255.0);
    }
  return out;
}

ImageBuffer auto_levels(const ImageBuffer& img, double clip_fraction) {
  if (!(clip_fraction >= 0.0 && clip_fraction < 0.5))
    fail(ErrorKind::invalid_argument, "auto_levels: clip_fraction must be in [0, 0.5)");
  ImageBuffer out = img;
  const double n = static_cast<double>(img.width()) * img.height();
  const double cut = clip_fraction * n;
  for (int c = 0; c < 3; ++c) {
    std::array<double, 256> hist{};
    for (int y = 0; y < img.height(); ++y)
      for (int x = 0; x < img.width(); ++x) hist[img.at(x, y, c)] += 1.0;
    int lo = 0;
    for (double acc = 0.0; lo < 255; ++lo) {
      acc += hist[static_cast<std::size_t>(lo)];
      if (acc > cut) break;
    }
    int hi = 255;
    for (double acc = 0.0; hi > 0; --hi) {
      acc += hist[static_cast<std::size_t>(hi)];
      if (acc > cut) break;
    }
    if (hi <= lo) continue;
    const double gain = 255.0 / (hi - lo);
    for (int y = 0; y < img.height(); ++y)
      for (int x = 0; x < img.width(); ++x) out.at(x, y, c) = to_byte((img.at(x, y, c) - lo) * gain);
  }
  return out;
}

std::string_view to_string(ResampleMode mode) {
  switch (mode) {
    case ResampleMode::none: return "none";
    case ResampleMode::upsample_only: return "upsample_only";
    case ResampleMode::down_then_up: return "down_then_up";
  }
  return "?";
}

ResampleMode parse_resample_mode(std::string_view name) {
  if (name == "none") return ResampleMode::none;
  if (name == "upsample_only") return ResampleMode::upsample_only;
  if (name == "down_then_up") return ResampleMode::down_then_up;
  fail(ErrorKind::invalid_argument, "unknown resize mode: " + std::string(name));
}

ImageBuffer apply_resize_policy(const ImageBuffer& img, const ResamplePolicy& policy) {
  if (!(policy.down_scale > 0.0) || !(policy.up_scale > 0.0))
    fail(ErrorKind::invalid_argument, "resize policy: stage scales must be > 0");
  auto scaled = [](int dim, double f) { return std::max(1, static_cast<int>(std::lround(dim * f))); };
  switch (policy.mode) {
    case ResampleMode::none:
      return img;
    case ResampleMode::upsample_only:
      return resample(img, scaled(img.width(), policy.up_scale), scaled(img.height(), policy.up_scale),
                      policy.kernel);
    case ResampleMode::down_then_up: {
      const ImageBuffer down = resample(img, scaled(img.width(), policy.down_scale),
                                        scaled(img.height(), policy.down_scale), policy.kernel);
      return resample(down, scaled(down.width(), policy.up_scale), scaled(down.height(), policy.up_scale),
                      policy.kernel);
    }
  }
  return img;
}

ImageBuffer to_rgb(const ImageBuffer& img) {
  if (img.channels() == 3) return img;
  ImageBuffer out(img.width(), img.height(), 3);
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x)
      for (int c = 0; c < 3; ++c) out.at(x, y, c) = img.at(x, y, c);
  return out;
}

}  // namespace pforge
