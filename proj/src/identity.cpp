#include "pforge/identity.hpp"

#include <algorithm>
#include <numeric>

namespace pforge {

ReferenceProfile build_profile(std::span<const Embedding> embeddings, std::string subject_id) {
  if (embeddings.empty()) fail(ErrorKind::invalid_argument, "build_profile: no reference embeddings");
  const Eigen::Index dim = embeddings.front().size();
  Embedding sum = Embedding::Zero(dim);
  for (const auto& e : embeddings) {
    if (e.size() != dim) fail(ErrorKind::invalid_argument, "build_profile: embedding dimensions differ");
    if (std::abs(e.norm() - 1.0) > unit_norm_tolerance)
      fail(ErrorKind::invalid_argument, "build_profile: embeddings must be unit length");
    sum += e;
  }
  const Embedding mean = sum / static_cast<double>(embeddings.size());
  if (mean.norm() < 1e-6) fail(ErrorKind::degenerate_profile, "mean face vector vanishes (antipodal references)");

  ReferenceProfile profile;
  profile.subject_id = std::move(subject_id);
  profile.mean_face = mean.normalized();
  profile.n_references = static_cast<int>(embeddings.size());
  for (const auto& e : embeddings)
    profile.distances.push_back(std::clamp(cosine_distance(e, profile.mean_face), 0.0, 2.0));
  return profile;
}

double face_distance(const Embedding& e, const ReferenceProfile& profile) {
  if (e.size() != profile.mean_face.size())
    fail(ErrorKind::invalid_argument, "face_distance: embedding dimension does not match profile");
  if (std::abs(e.norm() - 1.0) > unit_norm_tolerance)
    fail(ErrorKind::invalid_argument, "face_distance: embedding is not unit length");
  return std::clamp(cosine_distance(e, profile.mean_face), 0.0, 2.0);
}

int RankingReport::kept_count() const {
  return static_cast<int>(std::count_if(items.begin(), items.end(), [](const RankedItem& i) { return i.kept; }));
}

RankingReport rank_distances(std::vector<std::pair<std::string, double>> distances) {
  std::sort(distances.begin(), distances.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second < b.second;
    return a.first < b.first;
  });
  RankingReport report;
  const auto n = distances.size();
  for (std::size_t i = 0; i < n; ++i) {
    RankedItem item;
    item.id = distances[i].first;
    item.distance = distances[i].second;
    item.rank = static_cast<int>(i) + 1;
    item.percentile = n > 1 ? 100.0 * static_cast<double>(i) / static_cast<double>(n - 1) : 0.0;
    report.items.push_back(std::move(item));
  }
  return report;
}

RankingReport rank_images(std::span<const Candidate> candidates, const ReferenceProfile& profile) {
  if (candidates.empty()) fail(ErrorKind::invalid_argument, "rank_images: no candidates");
  std::vector<std::pair<std::string, double>> distances;
  distances.reserve(candidates.size());
  for (const auto& c : candidates) distances.emplace_back(c.id, face_distance(c.embedding, profile));
  return rank_distances(std::move(distances));
}

double quantile_sorted(std::span<const double> sorted, double q) {
  if (sorted.empty()) fail(ErrorKind::invalid_argument, "quantile of empty data");
  const double h = (static_cast<double>(sorted.size()) - 1.0) * q;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

RankingReport apply_filter(const RankingReport& report, const FilterPolicy& policy) {
  if (report.items.empty()) fail(ErrorKind::invalid_argument, "apply_filter: empty report");
  RankingReport out = report;
  for (auto& item : out.items) {
    item.kept = true;
    item.reason.clear();
  }
  out.cut.reset();
  const int n = static_cast<int>(out.items.size());

  if (policy.mode == FilterPolicy::Mode::top_k_percent) {
    if (!(policy.k_percent >= 0.0 && policy.k_percent <= 100.0))
      fail(ErrorKind::invalid_argument, "k must lie in [0, 100]");
    if (n < policy.min_n) {
      for (auto& item : out.items) item.reason = "n below min_n; top-k rule not applied";
      return out;
    }
    const int discard = static_cast<int>(std::floor(policy.k_percent * n / 100.0 + 1e-9));
    for (int i = n - discard; i < n; ++i) {
      out.items[static_cast<std::size_t>(i)].kept = false;
      out.items[static_cast<std::size_t>(i)].reason = "top-k distant";
    }
    if (discard > 0 && discard < n) out.cut = out.items[static_cast<std::size_t>(n - discard - 1)].distance;
    return out;
  }

  if (!(policy.q >= 0.0 && policy.q <= 1.0)) fail(ErrorKind::invalid_argument, "q must lie in [0, 1]");
  std::vector<double> sorted;
  for (const auto& item : out.items) sorted.push_back(item.distance);
  std::sort(sorted.begin(), sorted.end());
  const double cut = quantile_sorted(sorted, policy.q);
  out.cut = cut;
  for (auto& item : out.items)
    if (item.distance > cut) {
      item.kept = false;
      item.reason = "above quantile";
    }
  return out;
}

double silverman_bandwidth(std::span<const double> values) {
  const auto n = values.size();
  if (n < 2) return min_bandwidth;
  const Eigen::Map<const Eigen::ArrayXd> x(values.data(), static_cast<Eigen::Index>(n));
  const double mean = x.mean();
  const double sd = std::sqrt((x - mean).square().sum() / static_cast<double>(n - 1));
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  const double iqr = quantile_sorted(sorted, 0.75) - quantile_sorted(sorted, 0.25);
  const double h = 0.9 * std::min(sd, iqr / 1.34) * std::pow(static_cast<double>(n), -0.2);
  return std::max(h, min_bandwidth);
}

DistributionSummary summarize_distribution(std::span<const double> distances) {
  if (distances.empty()) fail(ErrorKind::invalid_argument, "summarize_distribution: no samples");
  const Eigen::Map<const Eigen::ArrayXd> x(distances.data(), static_cast<Eigen::Index>(distances.size()));
  std::vector<double> sorted(distances.begin(), distances.end());
  std::sort(sorted.begin(), sorted.end());

  DistributionSummary s;
  s.count = static_cast<int>(distances.size());
  s.mean = x.mean();
  s.min = sorted.front();
  s.max = sorted.back();
  s.median = quantile_sorted(sorted, 0.5);
  s.bandwidth = silverman_bandwidth(distances);
  if (s.max == s.min) {
    s.kde_mode = s.min;
    return s;
  }
  const double lo = s.min - 3.0 * s.bandwidth;
  const double hi = s.max + 3.0 * s.bandwidth;
  const Eigen::ArrayXd grid = Eigen::ArrayXd::LinSpaced(kde_grid_points, lo, hi);
  Eigen::Index best = 0;
  double best_density = -1.0;
  for (Eigen::Index i = 0; i < grid.size(); ++i) {
    const double density = (-0.5 * ((x - grid(i)) / s.bandwidth).square()).exp().sum();
    if (density > best_density) {
      best_density = density;
      best = i;
    }
  }
  s.kde_mode = grid(best);
  return s;
}

std::vector<CheckpointEntry> compare_checkpoints(const std::map<std::string, std::vector<double>>& named_sets,
                                                 const std::map<std::string, double>& detection_failure_rates) {
  if (named_sets.empty()) fail(ErrorKind::invalid_argument, "compare_checkpoints: no sets");
  std::vector<CheckpointEntry> healthy, diverged;
  for (const auto& [name, distances] : named_sets) {
    CheckpointEntry e;
    e.name = name;
    if (auto it = detection_failure_rates.find(name); it != detection_failure_rates.end()) e.failure_rate = it->second;
    e.diverged = e.failure_rate > divergence_failure_rate;
    if (!distances.empty()) e.summary = summarize_distribution(distances);
    else e.diverged = true;
    (e.diverged ? diverged : healthy).push_back(std::move(e));
  }
  std::stable_sort(healthy.begin(), healthy.end(), [](const CheckpointEntry& a, const CheckpointEntry& b) {
    if (a.summary.kde_mode != b.summary.kde_mode) return a.summary.kde_mode < b.summary.kde_mode;
    return a.summary.mean < b.summary.mean;
  });
  for (std::size_t i = 0; i < healthy.size(); ++i) {
    healthy[i].position = static_cast<int>(i) + 1;
    if (i > 0)
      healthy[i].indistinguishable =
          std::abs(healthy[i].summary.kde_mode - healthy[i - 1].summary.kde_mode) < indistinguishable_mode_gap;
  }
  healthy.insert(healthy.end(), diverged.begin(), diverged.end());
  return healthy;
}

}  // namespace pforge
