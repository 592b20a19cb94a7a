#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "pforge/datasetkit.hpp"
#include "pforge/faceio.hpp"
#include "pforge/identity.hpp"

namespace pforge {

using ojson = nlohmann::ordered_json;

/// Distances are written with six decimal digits.
double round6(double v);

ojson to_json(const Landmarks& lm);
Landmarks landmarks_from_json(const ojson& j);
ojson to_json(const FaceRecord& face);

ojson to_json(const ReferenceProfile& profile);
ReferenceProfile profile_from_json(const ojson& j);

ojson to_json(const RankingReport& report);
RankingReport report_from_json(const ojson& j);
/// Header: rank,id,distance,percentile,kept,reason
std::string to_csv(const RankingReport& report);

ojson to_json(const DistributionSummary& summary);
ojson to_json(const std::vector<CheckpointEntry>& comparison);
ojson to_json(const MixReport& report);

ojson embedding_to_json(const Embedding& e);
Embedding embedding_from_json(const ojson& j);

}  // namespace pforge
