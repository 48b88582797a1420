#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "rrnet/errors.hpp"
#include "rrnet/geometry.hpp"
#include "rrnet/json_util.hpp"
#include "rrnet/tensor.hpp"

namespace rrnet::decoder {

/// A surviving local maximum of one heatmap channel.
struct Peak {
  Point point;            // integer cell
  double score = 0.0;     // heatmap value at (class_id, point)
  int class_id = 0;
  std::size_t index = 0;  // row-major flat index class_id*H*W + y*W + x
  bool operator==(const Peak&) const = default;
};

struct Detection {
  BBox human_box;
  BBox object_box;
  int object_class = 0;
  int verb = 0;
  double score = 0.0;
  bool operator==(const Detection&) const = default;
};

inline bool peak_order(const Peak& a, const Peak& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.index < b.index;
}

/// Local maxima of every channel of `hm` (C×H×W), pooled and cut to the best `top_t`.
///
/// A cell is a candidate when it is >= all 8 neighbours. Equal-valued candidates that
/// touch (8-connectivity) form a plateau; only the plateau cell with the lowest
/// row-major index survives; zero-valued survivors are dropped. Survivors are ordered by score descending, then index.
inline std::vector<Peak> extract_peaks(const Tensor& hm, std::size_t top_t) {
  if (hm.rank() != 3) throw DimensionError("extract_peaks: heatmap must be C×H×W, got " + shape_str(hm.shape));
  if (top_t < 1) throw ConfigError("extract_peaks: T must be >= 1");
  const int C = static_cast<int>(hm.dim(0)), H = static_cast<int>(hm.dim(1)), W = static_cast<int>(hm.dim(2));
  std::vector<Peak> peaks;
  std::vector<char> candidate(static_cast<std::size_t>(H) * W), visited(candidate.size());
  std::vector<int> stack;
  for (int c = 0; c < C; ++c) {
    const double* plane = hm.data.data() + static_cast<std::size_t>(c) * H * W;
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        const double v = plane[y * W + x];
        bool ok = true;
        for (int dy = -1; dy <= 1 && ok; ++dy) {
          for (int dx = -1; dx <= 1 && ok; ++dx) {
            const int ny = y + dy, nx = x + dx;
            if ((dy || dx) && ny >= 0 && ny < H && nx >= 0 && nx < W) ok = v >= plane[ny * W + nx];
          }
        }
        candidate[static_cast<std::size_t>(y * W + x)] = ok;
      }
    }
    std::fill(visited.begin(), visited.end(), 0);
    for (int start = 0; start < H * W; ++start) {
      if (!candidate[static_cast<std::size_t>(start)] || visited[static_cast<std::size_t>(start)]) continue;
      // Row-major scan reaches each plateau first at its lowest index.
      const int sy = start / W, sx = start % W;
      const double v = plane[start];
      if (v > 0.0) {
        peaks.push_back({Point{static_cast<double>(sx), static_cast<double>(sy)}, v, c,
                         static_cast<std::size_t>(c) * H * W + static_cast<std::size_t>(start)});
      }
      visited[static_cast<std::size_t>(start)] = 1;
      stack.assign(1, start);
      while (!stack.empty()) {
        const int cur = stack.back();
        stack.pop_back();
        const int cy = cur / W, cx = cur % W;
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            const int ny = cy + dy, nx = cx + dx;
            if (ny < 0 || ny >= H || nx < 0 || nx >= W) continue;
            const int n = ny * W + nx;
            if (!visited[static_cast<std::size_t>(n)] && candidate[static_cast<std::size_t>(n)] && plane[n] == v) {
              visited[static_cast<std::size_t>(n)] = 1;
              stack.push_back(n);
            }
          }
        }
      }
    }
  }
  std::stable_sort(peaks.begin(), peaks.end(), peak_order);
  if (peaks.size() > top_t) peaks.resize(top_t);
  return peaks;
}

/// Box of an instance peak: centre from cell + offset, size read directly in pixels.
/// Sizes are floored at 1e-3 px so that a poorly regressed map still yields a valid box.
inline BBox reconstruct_box(const Peak& peak, const Tensor& wh, const Tensor& off, const GridSpec& grid) {
  const auto x = static_cast<std::size_t>(peak.point.x), y = static_cast<std::size_t>(peak.point.y);
  return {(peak.point.x + off.at(0, y, x)) * grid.stride, (peak.point.y + off.at(1, y, x)) * grid.stride,
          std::max(wh.at(0, y, x), 1e-3), std::max(wh.at(1, y, x), 1e-3)};
}

inline double score_triplet(double s_h, double s_i, double s_o) { return s_h * s_i * s_o; }

/// Ranks an instance candidate against the position regressed from an I point; lower wins.
using CandidateCost = std::function<double(const Peak& candidate, Point target)>;

/// Distance to the regressed target divided by the candidate's confidence.
inline double distance_over_score(const Peak& candidate, Point target) {
  if (!(candidate.score > 0.0)) return std::numeric_limits<double>::infinity();
  return std::hypot(candidate.point.x - target.x, candidate.point.y - target.y) / candidate.score;
}

/// Best candidate for `target`: lowest cost, then higher score, then lower index.
inline const Peak* pick_candidate(const std::vector<Peak>& candidates, Point target, const CandidateCost& cost) {
  const Peak* best = nullptr;
  double best_cost = 0.0;
  for (const Peak& c : candidates) {
    double v = cost(c, target);
    if (std::isnan(v)) v = std::numeric_limits<double>::infinity();
    if (!best || v < best_cost || (v == best_cost && (c.score > best->score ||
                                                      (c.score == best->score && c.index < best->index)))) {
      best = &c;
      best_cost = v;
    }
  }
  return best;
}

struct GroupingOptions {
  double s_min = 0.01;
  CandidateCost cost = distance_over_score;
};

/// Groups every I peak with its best human and object candidates.
/// `disp` is 4×H×W (dp_ih.x, dp_ih.y, dp_io.x, dp_io.y); output is sorted by score descending.
inline std::vector<Detection> group_triplets(const std::vector<Peak>& h_peaks, const std::vector<Peak>& o_peaks,
                                             const std::vector<Peak>& i_peaks, const Tensor& disp, const Tensor& wh,
                                             const Tensor& off, const GridSpec& grid,
                                             const GroupingOptions& opt = {}) {
  std::vector<Detection> out;
  if (h_peaks.empty() || o_peaks.empty()) return out;
  for (const Peak& ip : i_peaks) {
    if (!(ip.score > opt.s_min)) continue;
    const auto x = static_cast<std::size_t>(ip.point.x), y = static_cast<std::size_t>(ip.point.y);
    const Point target_h = ip.point + Displacement{disp.at(0, y, x), disp.at(1, y, x)};
    const Point target_o = ip.point + Displacement{disp.at(2, y, x), disp.at(3, y, x)};
    const Peak* h = pick_candidate(h_peaks, target_h, opt.cost);
    const Peak* o = pick_candidate(o_peaks, target_o, opt.cost);
    out.push_back({reconstruct_box(*h, wh, off, grid), reconstruct_box(*o, wh, off, grid), o->class_id,
                   ip.class_id, score_triplet(h->score, ip.score, o->score)});
  }
  std::stable_sort(out.begin(), out.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
  return out;
}

/// Per-scene prediction maps consumed by decode().
struct PredictionMaps {
  Tensor hm_h;  // 1×H×W
  Tensor hm_o;  // K×H×W
  Tensor hm_i;  // N×H×W
  Tensor disp;  // 4×H×W
  Tensor wh;    // 2×H×W
  Tensor off;   // 2×H×W
};

struct DecodeOptions {
  std::size_t top_t = 100;
  GroupingOptions grouping;
};

inline std::vector<Detection> decode(const PredictionMaps& m, const GridSpec& grid, const DecodeOptions& opt = {}) {
  return group_triplets(extract_peaks(m.hm_h, opt.top_t), extract_peaks(m.hm_o, opt.top_t),
                        extract_peaks(m.hm_i, opt.top_t), m.disp, m.wh, m.off, grid, opt.grouping);
}

// ---- detections JSONL ------------------------------------------------------

namespace detail {

inline std::string fmt_double(double v, int digits) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.*g", digits, v);
  return buf;
}

inline std::string fmt_box(const BBox& b) {
  return "[" + fmt_double(b.cx, 17) + "," + fmt_double(b.cy, 17) + "," + fmt_double(b.w, 17) + "," +
         fmt_double(b.h, 17) + "]";
}

}  // namespace detail

/// {"scene":idx,"detections":[{"verb":..,"object_class":..,"score":..,"human_box":[..],"object_box":[..]}]}
/// Scores carry 9 significant digits; box coordinates 17.
inline std::string detections_line(std::size_t scene, const std::vector<Detection>& dets) {
  std::string s = "{\"scene\":" + std::to_string(scene) + ",\"detections\":[";
  for (std::size_t i = 0; i < dets.size(); ++i) {
    const Detection& d = dets[i];
    if (i) s += ",";
    s += "{\"verb\":" + std::to_string(d.verb) + ",\"object_class\":" + std::to_string(d.object_class) +
         ",\"score\":" + detail::fmt_double(d.score, 9) + ",\"human_box\":" + detail::fmt_box(d.human_box) +
         ",\"object_box\":" + detail::fmt_box(d.object_box) + "}";
  }
  return s + "]}";
}

struct SceneDetections {
  std::size_t scene = 0;
  std::vector<Detection> detections;
};

inline void write_detections(const std::vector<SceneDetections>& all, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  for (const auto& sd : all) os << detections_line(sd.scene, sd.detections) << '\n';
  if (!os) throw IoError("write failed for " + path.string());
}

inline std::vector<SceneDetections> read_detections(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open detections " + path.string());
  std::vector<SceneDetections> out;
  std::string text;
  std::size_t line = 0;
  auto box = [&](const json& a) {
    if (!a.is_array() || a.size() != 4) throw ParseError(line, "box needs [cx,cy,w,h]");
    return BBox{a[0].get<double>(), a[1].get<double>(), a[2].get<double>(), a[3].get<double>()};
  };
  while (std::getline(is, text)) {
    ++line;
    if (text.empty()) continue;
    try {
      const json j = json::parse(text);
      SceneDetections sd;
      sd.scene = j.at("scene").get<std::size_t>();
      for (const auto& d : j.at("detections")) {
        sd.detections.push_back({box(d.at("human_box")), box(d.at("object_box")), d.at("object_class").get<int>(),
                                 d.at("verb").get<int>(), d.at("score").get<double>()});
      }
      out.push_back(std::move(sd));
    } catch (const ParseError&) {
      throw;
    } catch (const std::exception& e) {
      throw ParseError(line, e.what());
    }
  }
  return out;
}

}  // namespace rrnet::decoder
