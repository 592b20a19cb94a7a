#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "pforge/error.hpp"
#include "pforge/faceio.hpp"

namespace pforge {

/// Cosine distance 1 - <a, b> between unit vectors; lies in [0, 2].
template <typename DerivedA, typename DerivedB>
typename DerivedA::Scalar cosine_distance(const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b) {
  using Scalar = typename DerivedA::Scalar;
  return Scalar(1) - a.dot(b);
}

/// A subject's anchor: the renormalized mean of its reference embeddings.
struct ReferenceProfile {
  std::string subject_id;
  Embedding mean_face;
  /// Distance of each reference to mean_face, in input order.
  std::vector<double> distances;
  int n_references = 0;
};

inline constexpr double unit_norm_tolerance = 1e-3;

ReferenceProfile build_profile(std::span<const Embedding> embeddings, std::string subject_id = {});

/// 1 - <e, mean_face>. Rejects inputs whose norm is off by more than 1e-3.
double face_distance(const Embedding& e, const ReferenceProfile& profile);

struct Candidate {
  std::string id;
  Embedding embedding;
};

struct RankedItem {
  std::string id;
  double distance = 0.0;
  int rank = 0;
  /// 0 for the closest item, 100 for the farthest.
  double percentile = 0.0;
  bool kept = true;
  std::string reason;
};

struct RankingReport {
  std::vector<RankedItem> items;
  /// Distance threshold applied by the last filter, if any.
  std::optional<double> cut;

  int kept_count() const;
};

/// Ascending distance, ties broken by id.
RankingReport rank_images(std::span<const Candidate> candidates, const ReferenceProfile& profile);
RankingReport rank_distances(std::vector<std::pair<std::string, double>> distances);

struct FilterPolicy {
  enum class Mode { top_k_percent, quantile };
  Mode mode = Mode::top_k_percent;
  double k_percent = 15.0;
  double q = 0.80;
  int min_n = 8;
};

/// Linear interpolation between order statistics of sorted data.
double quantile_sorted(std::span<const double> sorted, double q);

/// top_k_percent drops the floor(k n / 100) farthest items when n >= min_n;
/// quantile drops items strictly above the q-quantile of the distances.
RankingReport apply_filter(const RankingReport& report, const FilterPolicy& policy);

struct DistributionSummary {
  double mean = 0.0;
  double min = 0.0;
  double max = 0.0;
  double median = 0.0;
  double kde_mode = 0.0;
  double bandwidth = 0.0;
  int count = 0;
};

inline constexpr int kde_grid_points = 512;
inline constexpr double min_bandwidth = 1e-4;

/// 0.9 min(sd, IQR / 1.34) n^(-1/5), floored at 1e-4.
double silverman_bandwidth(std::span<const double> values);

/// Gaussian KDE; the mode is the argmax over 512 points spanning
/// [min - 3h, max + 3h] (first maximum wins).
DistributionSummary summarize_distribution(std::span<const double> distances);

struct CheckpointEntry {
  std::string name;
  DistributionSummary summary;
  double failure_rate = 0.0;
  bool diverged = false;
  /// Mode within 0.01 of the entry ranked just ahead of it.
  bool indistinguishable = false;
  /// 1-based position among non-diverged sets, 0 when diverged.
  int position = 0;
};

inline constexpr double divergence_failure_rate = 0.20;
inline constexpr double indistinguishable_mode_gap = 0.01;

/// Non-diverged sets first, by KDE mode then mean; diverged sets follow.
std::vector<CheckpointEntry> compare_checkpoints(const std::map<std::string, std::vector<double>>& named_sets,
                                                 const std::map<std::string, double>& detection_failure_rates = {});

}  // namespace pforge
