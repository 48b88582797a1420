#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "rrnet/decoder.hpp"
#include "rrnet/errors.hpp"
#include "rrnet/geometry.hpp"
#include "rrnet/synthdata.hpp"

namespace rrnet::evaluator {

using decoder::Detection;

struct GtTriplet {
  BBox human_box;
  BBox object_box;
  int verb = 0;
  int object_class = 0;
  bool matched = false;
};

inline std::vector<GtTriplet> ground_truth(const synthdata::SceneSpec& scene) {
  std::vector<GtTriplet> out;
  for (const auto& r : scene.interactions) {
    const auto& o = scene.objects[static_cast<std::size_t>(r.object)];
    out.push_back({scene.humans[static_cast<std::size_t>(r.human)], o.box, r.verb, o.class_id, false});
  }
  return out;
}

/// Prediction maps equal to the encoded targets.
inline decoder::PredictionMaps perfect_maps(const synthdata::TargetMaps& t) {
  return {t.hm_h, t.hm_o, t.hm_i, t.disp, t.wh, t.off};
}

/// One detection after matching, in descending score order.
struct MatchLabel {
  std::size_t detection = 0;  // index into the input list
  double score = 0.0;
  int verb = 0;
  bool true_positive = false;
  std::optional<std::size_t> gt;  // matched ground-truth index
};

/// Greedy matching in score order. A detection claims the unmatched ground truth of the
/// same verb and object class maximising min(IoU_h, IoU_o), provided both IoUs reach
/// `iou_thr`; ties go to the lowest ground-truth index.
inline std::vector<MatchLabel> match_scene(const std::vector<Detection>& dets, std::vector<GtTriplet>& gts,
                                           double iou_thr = 0.5) {
  std::vector<std::size_t> order(dets.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
  std::vector<MatchLabel> labels;
  for (std::size_t di : order) {
    const Detection& d = dets[di];
    MatchLabel lab{di, d.score, d.verb, false, std::nullopt};
    double best = -1.0;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const GtTriplet& gt = gts[g];
      if (gt.matched || gt.verb != d.verb || gt.object_class != d.object_class) continue;
      const double ih = iou(d.human_box, gt.human_box), io = iou(d.object_box, gt.object_box);
      if (ih < iou_thr || io < iou_thr) continue;
      const double q = std::min(ih, io);
      if (q > best) {
        best = q;
        lab.gt = g;
      }
    }
    if (lab.gt) {
      gts[*lab.gt].matched = true;
      lab.true_positive = true;
    }
    labels.push_back(lab);
  }
  return labels;
}

/// All-point interpolated AP of labels sorted by score descending; nullopt when n_gt == 0.
inline std::optional<double> average_precision(const std::vector<bool>& tp_in_rank_order, std::size_t n_gt) {
  if (n_gt == 0) return std::nullopt;
  const std::size_t n = tp_in_rank_order.size();
  std::vector<double> precision(n), recall(n);
  std::size_t tp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    tp += tp_in_rank_order[i] ? 1 : 0;
    precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
    recall[i] = static_cast<double>(tp) / static_cast<double>(n_gt);
  }
  for (std::size_t i = n; i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double ap = 0.0, prev_recall = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    ap += (recall[i] - prev_recall) * precision[i];
    prev_recall = recall[i];
  }
  return ap;
}

struct VerbCounts {
  std::size_t n_gt = 0;
  std::size_t n_tp = 0;
  std::size_t n_fp = 0;
};

struct EvalReport {
  std::map<int, double> ap_per_verb;  // verbs with at least one ground truth
  std::map<int, VerbCounts> counts;   // every verb seen in ground truth or detections
  double map_role = 0.0;
};

/// Per-verb AP pooled over all scenes; map_role is the unweighted mean over verbs with ground truth.
inline EvalReport evaluate(const std::vector<std::vector<Detection>>& dets_by_scene,
                           const std::vector<std::vector<GtTriplet>>& gts_by_scene, double iou_thr = 0.5) {
  if (dets_by_scene.size() != gts_by_scene.size()) {
    throw EvaluationError("detections cover " + std::to_string(dets_by_scene.size()) + " scenes but ground truth has " +
                          std::to_string(gts_by_scene.size()));
  }
  struct Ranked {
    double score;
    bool tp;
  };
  std::map<int, std::vector<Ranked>> ranked;
  EvalReport report;
  for (std::size_t s = 0; s < gts_by_scene.size(); ++s) {
    std::vector<GtTriplet> gts = gts_by_scene[s];
    for (auto& g : gts) {
      g.matched = false;
      ++report.counts[g.verb].n_gt;
    }
    for (const MatchLabel& lab : match_scene(dets_by_scene[s], gts, iou_thr)) {
      ranked[lab.verb].push_back({lab.score, lab.true_positive});
      auto& c = report.counts[lab.verb];
      ++(lab.true_positive ? c.n_tp : c.n_fp);
    }
  }
  double total = 0.0;
  std::size_t included = 0;
  for (const auto& [verb, c] : report.counts) {
    auto& r = ranked[verb];
    std::stable_sort(r.begin(), r.end(), [](const Ranked& a, const Ranked& b) { return a.score > b.score; });
    std::vector<bool> tps;
    for (const Ranked& x : r) tps.push_back(x.tp);
    if (auto ap = average_precision(tps, c.n_gt)) {
      report.ap_per_verb[verb] = *ap;
      total += *ap;
      ++included;
    }
  }
  report.map_role = included ? total / static_cast<double>(included) : 0.0;
  return report;
}

/// CSV: verb,n_gt,n_tp,n_fp,ap then a final "map_role,<value>" line.
inline std::string report_csv(const EvalReport& r) {
  auto num = [](double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return std::string(buf);
  };
  std::string s = "verb,n_gt,n_tp,n_fp,ap\n";
  for (const auto& [verb, c] : r.counts) {
    auto it = r.ap_per_verb.find(verb);
    s += std::to_string(verb) + "," + std::to_string(c.n_gt) + "," + std::to_string(c.n_tp) + "," +
         std::to_string(c.n_fp) + "," + (it == r.ap_per_verb.end() ? std::string("") : num(it->second)) + "\n";
  }
  return s + "map_role," + num(r.map_role) + "\n";
}

inline void write_report(const EvalReport& r, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << report_csv(r);
  if (!os) throw IoError("write failed for " + path.string());
}

}  // namespace rrnet::evaluator
