#include "pforge/report_io.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

namespace pforge {

double round6(double v) { return std::round(v * 1e6) / 1e6; }

ojson to_json(const Landmarks& lm) {
  ojson arr = ojson::array();
  for (const auto& p : lm) arr.push_back({p.x(), p.y()});
  return arr;
}

Landmarks landmarks_from_json(const ojson& j) {
  if (!j.is_array() || j.size() != 5) fail(ErrorKind::invalid_argument, "landmarks must be five [x, y] pairs");
  Landmarks lm;
  for (std::size_t i = 0; i < 5; ++i) lm[i] = {j[i].at(0).get<double>(), j[i].at(1).get<double>()};
  return lm;
}

ojson to_json(const FaceRecord& face) {
  ojson j;
  j["bbox"] = {face.bbox.left, face.bbox.top, face.bbox.width, face.bbox.height};
  j["landmarks"] = to_json(face.landmarks);
  j["confidence"] = face.confidence;
  if (face.yaw_deg) j["yaw_deg"] = *face.yaw_deg;
  return j;
}

ojson embedding_to_json(const Embedding& e) { return std::vector<double>(e.data(), e.data() + e.size()); }

Embedding embedding_from_json(const ojson& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Embedding>(v.data(), static_cast<Eigen::Index>(v.size()));
}

ojson to_json(const ReferenceProfile& p) {
  ojson j;
  j["subject_id"] = p.subject_id;
  j["n_references"] = p.n_references;
  j["mean_face_vector"] = embedding_to_json(p.mean_face);
  ojson d = ojson::array();
  for (double v : p.distances) d.push_back(round6(v));
  j["distances"] = d;
  return j;
}

ReferenceProfile profile_from_json(const ojson& j) {
  ReferenceProfile p;
  try {
    p.subject_id = j.value("subject_id", std::string{});
    p.mean_face = embedding_from_json(j.at("mean_face_vector"));
    p.distances = j.value("distances", std::vector<double>{});
    p.n_references = j.value("n_references", static_cast<int>(p.distances.size()));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::invalid_argument, std::string("malformed profile: ") + e.what());
  }
  if (std::abs(p.mean_face.norm() - 1.0) > unit_norm_tolerance)
    fail(ErrorKind::invalid_argument, "profile mean_face_vector is not unit length");
  return p;
}

ojson to_json(const RankingReport& r) {
  ojson j;
  ojson items = ojson::array();
  for (const auto& i : r.items) {
    ojson o;
    o["id"] = i.id;
    o["distance"] = round6(i.distance);
    o["rank"] = i.rank;
    o["percentile"] = round6(i.percentile);
    o["kept"] = i.kept;
    o["reason"] = i.reason;
    items.push_back(std::move(o));
  }
  j["items"] = std::move(items);
  j["kept"] = r.kept_count();
  j["discarded"] = static_cast<int>(r.items.size()) - r.kept_count();
  if (r.cut) j["cut"] = round6(*r.cut);
  return j;
}

RankingReport report_from_json(const ojson& j) {
  RankingReport r;
  try {
    for (const auto& o : j.at("items")) {
      RankedItem i;
      i.id = o.at("id").get<std::string>();
      i.distance = o.at("distance").get<double>();
      i.rank = o.value("rank", 0);
      i.percentile = o.value("percentile", 0.0);
      i.kept = o.value("kept", true);
      i.reason = o.value("reason", std::string{});
      r.items.push_back(std::move(i));
    }
    if (j.contains("cut")) r.cut = j.at("cut").get<double>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::invalid_argument, std::string("malformed ranking report: ") + e.what());
  }
  return r;
}

std::string to_csv(const RankingReport& r) {
  std::ostringstream out;
  out << "rank,id,distance,percentile,kept,reason\n";
  char buf[64];
  for (const auto& i : r.items) {
    out << i.rank << ',' << i.id << ',';
    std::snprintf(buf, sizeof buf, "%.6f,%.6f", i.distance, i.percentile);
    out << buf << ',' << (i.kept ? "true" : "false") << ',' << i.reason << '\n';
  }
  return out.str();
}

ojson to_json(const DistributionSummary& s) {
  ojson j;
  j["count"] = s.count;
  j["mean"] = round6(s.mean);
  j["min"] = round6(s.min);
  j["max"] = round6(s.max);
  j["median"] = round6(s.median);
  j["kde_mode"] = round6(s.kde_mode);
  j["bandwidth"] = round6(s.bandwidth);
  return j;
}

ojson to_json(const std::vector<CheckpointEntry>& comparison) {
  ojson arr = ojson::array();
  for (const auto& e : comparison) {
    ojson j;
    j["name"] = e.name;
    j["position"] = e.position;
    j["diverged"] = e.diverged;
    j["indistinguishable"] = e.indistinguishable;
    j["failure_rate"] = round6(e.failure_rate);
    j["summary"] = to_json(e.summary);
    arr.push_back(std::move(j));
  }
  return arr;
}

ojson to_json(const MixReport& r) {
  ojson j;
  j["ok"] = r.ok();
  j["total"] = r.total;
  ojson shares = ojson::object();
  for (const auto& [tag, s] : r.shares) shares[tag] = {{"count", s.count}, {"share", round6(s.share)}};
  j["shares"] = shares;
  j["violations"] = r.violations;
  j["warnings"] = r.warnings;
  j["real_fraction"] = round6(r.real_fraction);
  j["synthetic_fraction"] = round6(r.synthetic_fraction);
  return j;
}

}  // namespace pforge
