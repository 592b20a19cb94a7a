#include "pforge/cropkit.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "pforge/faceio.hpp"
#include "pforge/imageio.hpp"
#include "pforge/imgcore.hpp"

namespace pforge {

std::string to_string(const Bucket& bucket) {
  return std::to_string(bucket.width) + "x" + std::to_string(bucket.height);
}

Bucket parse_bucket(std::string_view text) {
  const auto x = text.find_first_of("xX");
  if (x == std::string_view::npos) fail(ErrorKind::invalid_argument, "bucket must look like WxH: " + std::string(text));
  try {
    const int w = std::stoi(std::string(text.substr(0, x)));
    const int h = std::stoi(std::string(text.substr(x + 1)));
    if (w < 1 || h < 1) throw std::out_of_range("non-positive");
    return {w, h};
  } catch (const std::logic_error&) {
    fail(ErrorKind::invalid_argument, "bucket must look like WxH: " + std::string(text));
  }
}

BucketSet::BucketSet(std::vector<Bucket> buckets) : buckets_(std::move(buckets)) {
  std::set<std::pair<int, int>> ratios;
  for (const auto& b : buckets_) {
    if (b.area() < min_area || b.area() > max_area)
      fail(ErrorKind::invalid_argument, "bucket " + to_string(b) + " is not ~1 MP");
    const int g = std::gcd(b.width, b.height);
    if (!ratios.insert({b.width / g, b.height / g}).second)
      fail(ErrorKind::invalid_argument, "duplicate bucket aspect ratio: " + to_string(b));
  }
}

const BucketSet& BucketSet::sdxl() {
  static const BucketSet set({
      {512, 2048}, {512, 1984}, {512, 1920}, {512, 1856}, {576, 1792}, {576, 1728}, {576, 1664},
      {640, 1600}, {640, 1536}, {704, 1472}, {704, 1408}, {704, 1344}, {768, 1344}, {768, 1280},
      {832, 1216}, {832, 1152}, {896, 1152}, {896, 1088}, {960, 1088}, {960, 1024}, {1024, 1024},
      {1024, 960}, {1088, 960}, {1088, 896}, {1152, 896}, {1152, 832}, {1216, 832}, {1280, 768},
      {1344, 768}, {1344, 704}, {1408, 704}, {1472, 704}, {1536, 640}, {1600, 640}, {1664, 576},
      {1728, 576}, {1792, 576}, {1856, 512}, {1920, 512}, {1984, 512}, {2048, 512},
  });
  return set;
}

BucketSet BucketSet::load(const std::filesystem::path& path) {
  const std::string text = read_text(path);
  std::vector<Bucket> buckets;
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && text[first] == '[') {
    for (const auto& item : nlohmann::json::parse(text)) buckets.push_back(parse_bucket(item.get<std::string>()));
  } else {
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
      line.erase(0, line.find_first_not_of(" \t\r"));
      line.erase(line.find_last_not_of(" \t\r") + 1);
      if (line.empty() || line.front() == '#') continue;
      buckets.push_back(parse_bucket(line));
    }
  }
  return BucketSet(std::move(buckets));
}

Bucket nearest_bucket(int w, int h, const BucketSet& buckets) {
  if (w < 1 || h < 1) fail(ErrorKind::invalid_argument, "nearest_bucket: dimensions must be >= 1");
  if (buckets.empty()) fail(ErrorKind::invalid_argument, "nearest_bucket: empty bucket set");
  const double aspect = static_cast<double>(w) / h;
  const Bucket* best = nullptr;
  double best_dist = 0.0;
  for (const auto& b : buckets.buckets()) {
    const double d = std::abs(std::log(aspect / b.aspect()));
    if (best == nullptr || d < best_dist - 1e-12 ||
        (std::abs(d - best_dist) <= 1e-12 &&
         (b.area() > best->area() || (b.area() == best->area() && b.width < best->width)))) {
      best = &b;
      best_dist = d;
    }
  }
  return *best;
}

ImageBuffer crop(const ImageBuffer& img, const CropWindow& win) {
  if (win.left < 0 || win.top < 0 || win.width < 1 || win.height < 1 || win.left + win.width > img.width() ||
      win.top + win.height > img.height())
    fail(ErrorKind::invalid_argument, "crop window outside image");
  ImageBuffer out(win.width, win.height, img.channels());
  for (int y = 0; y < win.height; ++y)
    for (int x = 0; x < win.width; ++x)
      for (int c = 0; c < img.channels(); ++c) out.at(x, y, c) = img.at(win.left + x, win.top + y, c);
  return out;
}

CropWindow largest_window(int w, int h, const Bucket& bucket) {
  // Compare w/h against bw/bh without division.
  if (static_cast<long>(w) * bucket.height >= static_cast<long>(h) * bucket.width) {
    const int win_w = std::clamp(static_cast<int>(std::lround(static_cast<double>(h) * bucket.aspect())), 1, w);
    return {0, 0, win_w, h};
  }
  const int win_h = std::clamp(static_cast<int>(std::lround(w / bucket.aspect())), 1, h);
  return {0, 0, w, win_h};
}

CenterCropResult center_crop_megapixel(const ImageBuffer& img, double target_mp, const BucketSet& buckets) {
  if (!(target_mp > 0.0)) fail(ErrorKind::invalid_argument, "target_mp must be > 0");
  const double area = static_cast<double>(img.width()) * img.height();
  if (area < target_mp * 1e6 * 0.5)
    fail(ErrorKind::too_small_input, "image area " + std::to_string(static_cast<long>(area)) +
                                         " px is below half the " + std::to_string(target_mp) + " MP target");
  const Bucket bucket = nearest_bucket(img.width(), img.height(), buckets);
  CropWindow win = largest_window(img.width(), img.height(), bucket);
  win.left = (img.width() - win.width) / 2;
  win.top = (img.height() - win.height) / 2;
  ImageBuffer cropped = crop(img, win);
  if (cropped.width() != bucket.width || cropped.height() != bucket.height)
    cropped = resample(cropped, bucket.width, bucket.height, Kernel::lanczos3);
  return {std::move(cropped), win, bucket};
}

FaceCropResult face_anchored_crop(const ImageBuffer& img, const FaceRecord& face, const Bucket& bucket) {
  const auto& box = face.bbox;
  if (box.left < 0 || box.top < 0 || box.width <= 0 || box.height <= 0 || box.left + box.width > img.width() ||
      box.top + box.height > img.height())
    fail(ErrorKind::invalid_argument, "face bbox outside image");
  const double cx = box.left + box.width / 2.0;
  const double cy = box.top + box.height / 2.0;
  CropWindow win = largest_window(img.width(), img.height(), bucket);
  const int ideal_left = static_cast<int>(std::lround(cx - win.width / 2.0));
  const int ideal_top = static_cast<int>(std::lround(cy - win.height / 3.0));
  win.left = std::clamp(ideal_left, 0, img.width() - win.width);
  win.top = std::clamp(ideal_top, 0, img.height() - win.height);

  FaceCropResult result;
  result.window = win;
  result.clamped_x = win.left != ideal_left;
  result.clamped_y = win.top != ideal_top;
  result.face_offset_x = (cx - win.left) - win.width / 2.0;
  result.face_offset_y = (cy - win.top) - win.height / 3.0;
  ImageBuffer cropped = crop(img, win);
  if (cropped.width() != bucket.width || cropped.height() != bucket.height)
    cropped = resample(cropped, bucket.width, bucket.height, Kernel::lanczos3);
  result.image = std::move(cropped);
  return result;
}

}  // namespace pforge
