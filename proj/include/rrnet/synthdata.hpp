#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "rrnet/errors.hpp"
#include "rrnet/geometry.hpp"
#include "rrnet/json_util.hpp"
#include "rrnet/tensor.hpp"

namespace rrnet::synthdata {

struct IntRange {
  int min = 1;
  int max = 1;
  bool operator==(const IntRange&) const = default;
};

struct DataConfig {
  int image_size = 64;
  GridSpec grid{16, 16, 4};
  int num_object_classes = 3;  // K
  int num_verbs = 4;           // N
  IntRange humans_per_scene{1, 2};
  IntRange objects_per_scene{1, 2};
  std::uint64_t seed = 7;
  std::size_t num_scenes = 200;
  std::size_t first_index = 0;

  void validate() const {
    grid.validate();
    if (num_object_classes < 1) throw ConfigError("data.num_object_classes must be >= 1");
    if (num_verbs < 1) throw ConfigError("data.num_verbs must be >= 1");
    if (image_size != grid.width * grid.stride || image_size != grid.height * grid.stride) {
      throw ConfigError("data.image_size must equal grid.width*stride and grid.height*stride");
    }
    if (humans_per_scene.min < 1 || humans_per_scene.max < humans_per_scene.min) {
      throw ConfigError("data.humans_per_scene must be a range with 1 <= min <= max");
    }
    if (objects_per_scene.min < 1 || objects_per_scene.max < objects_per_scene.min) {
      throw ConfigError("data.objects_per_scene must be a range with 1 <= min <= max");
    }
  }
  bool operator==(const DataConfig&) const = default;
};

struct ObjectInstance {
  int class_id = 0;
  BBox box;
  bool operator==(const ObjectInstance&) const = default;
};

struct Interaction {
  int human = 0;
  int object = 0;
  int verb = 0;
  bool operator==(const Interaction&) const = default;
};

struct SceneSpec {
  std::vector<BBox> humans;
  std::vector<ObjectInstance> objects;
  std::vector<Interaction> interactions;
  bool operator==(const SceneSpec&) const = default;
};

/// 3×S×S image, values in [0,1].
struct RasterImage {
  int channels = 3;
  int size = 0;
  std::vector<float> data;

  float& at(int c, int y, int x) { return data[(static_cast<std::size_t>(c) * size + y) * size + x]; }
  Tensor to_tensor() const {
    Tensor t({static_cast<std::size_t>(channels), static_cast<std::size_t>(size), static_cast<std::size_t>(size)});
    std::copy(data.begin(), data.end(), t.data.begin());
    return t;
  }
  bool operator==(const RasterImage&) const = default;
};

struct TargetMaps {
  Tensor hm_h;       // 1×H×W
  Tensor hm_o;       // K×H×W
  Tensor hm_i;       // N×H×W
  Tensor disp;       // 4×H×W: dp_ih.x, dp_ih.y, dp_io.x, dp_io.y
  Tensor wh;         // 2×H×W: w, h in image pixels
  Tensor off;        // 2×H×W: quantization residual in cells
  Tensor disp_mask;  // 1×H×W
  Tensor reg_mask;   // 1×H×W
  std::size_t collisions = 0;
};

/// Quantized grid cell holding the centre of `box`.
inline Point box_cell(const BBox& box, const GridSpec& grid) {
  return {std::floor(box.cx / grid.stride), std::floor(box.cy / grid.stride)};
}

/// Interaction cell of a human/object pair: floor of the midpoint of their cells.
inline Point interaction_cell(const BBox& human, const BBox& object, const GridSpec& grid) {
  const Point m = midpoint(box_cell(human, grid), box_cell(object, grid));
  return {std::floor(m.x), std::floor(m.y)};
}

/// Verb encoded by the direction from human to object: N equal angular sectors,
/// sector 0 centred on +x (image right), increasing clockwise on screen (+y is down).
inline int verb_from_geometry(const BBox& human, const BBox& object, int num_verbs) {
  const double angle = std::atan2(object.cy - human.cy, object.cx - human.cx);
  const double sector = 2.0 * std::numbers::pi / num_verbs;
  double a = angle + sector / 2.0;
  if (a < 0.0) a += 2.0 * std::numbers::pi;
  return static_cast<int>(std::floor(a / sector)) % num_verbs;
}

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline int uniform_int(std::mt19937_64& rng, int lo, int hi) {
  return lo + static_cast<int>(rng() % static_cast<std::uint64_t>(hi - lo + 1));
}

inline double uniform_real(std::mt19937_64& rng, double lo, double hi) {
  return lo + (hi - lo) * (static_cast<double>(rng() >> 11) * 0x1.0p-53);
}

inline int chebyshev(Point a, Point b) {
  return static_cast<int>(std::max(std::abs(a.x - b.x), std::abs(a.y - b.y)));
}

inline bool inside_image(const BBox& b, int size) {
  return b.x0() >= 0.0 && b.y0() >= 0.0 && b.x1() <= size && b.y1() <= size;
}

inline BBox box_from_corner(int x0, int y0, int w, int h) {
  return {x0 + w / 2.0, y0 + h / 2.0, static_cast<double>(w), static_cast<double>(h)};
}

/// Peaks closer than this many cells (Chebyshev) could merge into one plateau.
inline constexpr int kMinCellSeparation = 2;
inline constexpr int kMaxAttempts = 2000;

inline void fill_rect(RasterImage& img, int c, const BBox& b, float v) {
  const int x0 = static_cast<int>(std::floor(b.x0())), y0 = static_cast<int>(std::floor(b.y0()));
  const int x1 = static_cast<int>(std::ceil(b.x1())), y1 = static_cast<int>(std::ceil(b.y1()));
  for (int y = std::max(0, y0); y < std::min(img.size, y1); ++y)
    for (int x = std::max(0, x0); x < std::min(img.size, x1); ++x) img.at(c, y, x) = std::max(img.at(c, y, x), v);
}

inline void outline_rect(RasterImage& img, int c, const BBox& b, float v, int thickness) {
  const int x0 = static_cast<int>(std::floor(b.x0())), y0 = static_cast<int>(std::floor(b.y0()));
  const int x1 = static_cast<int>(std::ceil(b.x1())), y1 = static_cast<int>(std::ceil(b.y1()));
  for (int y = std::max(0, y0); y < std::min(img.size, y1); ++y) {
    for (int x = std::max(0, x0); x < std::min(img.size, x1); ++x) {
      const bool edge = y < y0 + thickness || y >= y1 - thickness || x < x0 + thickness || x >= x1 - thickness;
      if (edge) img.at(c, y, x) = std::max(img.at(c, y, x), v);
    }
  }
}

inline void draw_human(RasterImage& img, const BBox& b) {
  fill_rect(img, 0, b, 1.0f);
  // Head marker on the green channel over the top quarter.
  fill_rect(img, 1, BBox{b.cx, b.y0() + b.h / 8.0, b.w, b.h / 4.0}, 0.5f);
}

/// Class k: style k%3 (green fill, blue fill, green+blue outline), dimmer for larger k.
inline void draw_object(RasterImage& img, const ObjectInstance& o) {
  const float level = 1.0f - 0.25f * static_cast<float>((o.class_id / 3) % 3);
  switch (o.class_id % 3) {
    case 0: fill_rect(img, 1, o.box, level); break;
    case 1: fill_rect(img, 2, o.box, level); break;
    default:
      outline_rect(img, 1, o.box, level, 2);
      outline_rect(img, 2, o.box, level, 2);
      break;
  }
}

}  // namespace detail

inline RasterImage render_scene(const SceneSpec& scene, int image_size) {
  RasterImage img;
  img.size = image_size;
  img.data.assign(static_cast<std::size_t>(3) * image_size * image_size, 0.0f);
  for (const BBox& h : scene.humans) detail::draw_human(img, h);
  for (const ObjectInstance& o : scene.objects) detail::draw_object(img, o);
  return img;
}

/// True when no two instance cells, and no two interaction cells, lie closer than
/// two cells apart.
inline bool collision_free(const SceneSpec& scene, const GridSpec& grid) {
  std::vector<Point> inst, inter;
  for (const BBox& h : scene.humans) inst.push_back(box_cell(h, grid));
  for (const ObjectInstance& o : scene.objects) inst.push_back(box_cell(o.box, grid));
  for (const Interaction& r : scene.interactions) {
    inter.push_back(interaction_cell(scene.humans[r.human], scene.objects[r.object].box, grid));
  }
  for (const auto* pts : {&inst, &inter}) {
    for (std::size_t a = 0; a < pts->size(); ++a)
      for (std::size_t b = a + 1; b < pts->size(); ++b)
        if (detail::chebyshev((*pts)[a], (*pts)[b]) < detail::kMinCellSeparation) return false;
  }
  return true;
}

/// Scene `index` of the corpus defined by `config`; a pure function of (seed, index).
inline std::pair<SceneSpec, RasterImage> generate_scene(const DataConfig& config, std::size_t index) {
  using namespace detail;
  config.validate();
  std::mt19937_64 rng(splitmix64(config.seed ^ splitmix64(index + 0x5CE7Eull)));
  const int S = config.image_size;
  const double s = config.grid.stride;
  const int N = config.num_verbs;
  const double sector = 2.0 * std::numbers::pi / N;

  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    SceneSpec scene;
    const int nh = uniform_int(rng, config.humans_per_scene.min, config.humans_per_scene.max);
    const int no = uniform_int(rng, config.objects_per_scene.min, config.objects_per_scene.max);
    bool ok = true;
    for (int i = 0; i < nh && ok; ++i) {
      const int w = uniform_int(rng, static_cast<int>(2 * s), static_cast<int>(3 * s));
      const int h = uniform_int(rng, static_cast<int>(3.5 * s), static_cast<int>(5 * s));
      if (w > S || h > S) {
        ok = false;
        break;
      }
      scene.humans.push_back(box_from_corner(uniform_int(rng, 0, S - w), uniform_int(rng, 0, S - h), w, h));
    }
    for (int j = 0; j < no && ok; ++j) {
      const int parent = j % nh;
      const BBox& hb = scene.humans[static_cast<std::size_t>(parent)];
      const int k = uniform_int(rng, 0, config.num_object_classes - 1);
      const int v = uniform_int(rng, 0, N - 1);
      // Stay well inside the verb's sector so the bucket is unambiguous.
      const double angle = v * sector + uniform_real(rng, -0.3, 0.3) * sector;
      const double dist = uniform_real(rng, 3.5 * s, 6.0 * s);
      const int w = uniform_int(rng, static_cast<int>(1.5 * s), static_cast<int>(3 * s));
      const int h = uniform_int(rng, static_cast<int>(1.5 * s), static_cast<int>(3 * s));
      const double cx = hb.cx + dist * std::cos(angle);
      const double cy = hb.cy + dist * std::sin(angle);
      const BBox ob = box_from_corner(static_cast<int>(std::lround(cx - w / 2.0)),
                                      static_cast<int>(std::lround(cy - h / 2.0)), w, h);
      if (!inside_image(ob, S)) {
        ok = false;
        break;
      }
      scene.objects.push_back({k, ob});
      scene.interactions.push_back({parent, j, verb_from_geometry(hb, ob, N)});
    }
    if (!ok) continue;
    std::vector<BBox> all = scene.humans;
    for (const auto& o : scene.objects) all.push_back(o.box);
    for (std::size_t a = 0; a < all.size() && ok; ++a)
      for (std::size_t b = a + 1; b < all.size() && ok; ++b) ok = iou(all[a], all[b]) <= 0.25;
    if (!ok || !collision_free(scene, config.grid)) continue;
    RasterImage img = render_scene(scene, S);
    return {std::move(scene), std::move(img)};
  }
  throw GenerationError(index, "no feasible placement after " + std::to_string(kMaxAttempts) + " attempts");
}

/// Encodes ground truth into heatmaps, displacement/size/offset maps and masks.
inline TargetMaps encode_targets(const SceneSpec& scene, const DataConfig& config) {
  const GridSpec& g = config.grid;
  const std::size_t H = static_cast<std::size_t>(g.height), W = static_cast<std::size_t>(g.width);
  const std::size_t K = static_cast<std::size_t>(config.num_object_classes);
  const std::size_t N = static_cast<std::size_t>(config.num_verbs);
  TargetMaps t;
  t.hm_h = Tensor({1, H, W});
  t.hm_o = Tensor({K, H, W});
  t.hm_i = Tensor({N, H, W});
  t.disp = Tensor({4, H, W});
  t.wh = Tensor({2, H, W});
  t.off = Tensor({2, H, W});
  t.disp_mask = Tensor({1, H, W});
  t.reg_mask = Tensor({1, H, W});

  auto plane = [&](Tensor& m, std::size_t c) {
    return PlaneRef{std::span<double>(m.data).subspan(c * H * W, H * W), g.height, g.width};
  };
  auto write_instance = [&](const BBox& box, Tensor& hm, std::size_t channel) {
    const Point cell = box_cell(box, g);
    gaussian_splat(plane(hm, channel), cell, gaussian_radius(box, g));
    const auto y = static_cast<std::size_t>(cell.y), x = static_cast<std::size_t>(cell.x);
    if (t.reg_mask.at(0, y, x) == 1.0) {
      ++t.collisions;
      return;
    }
    t.reg_mask.at(0, y, x) = 1.0;
    t.wh.at(0, y, x) = box.w;
    t.wh.at(1, y, x) = box.h;
    t.off.at(0, y, x) = box.cx / g.stride - cell.x;
    t.off.at(1, y, x) = box.cy / g.stride - cell.y;
  };
  for (const BBox& h : scene.humans) write_instance(h, t.hm_h, 0);
  for (const ObjectInstance& o : scene.objects) write_instance(o.box, t.hm_o, static_cast<std::size_t>(o.class_id));

  for (const Interaction& r : scene.interactions) {
    const BBox& hb = scene.humans[static_cast<std::size_t>(r.human)];
    const BBox& ob = scene.objects[static_cast<std::size_t>(r.object)].box;
    const Point hc = box_cell(hb, g), oc = box_cell(ob, g);
    const Point ic = interaction_cell(hb, ob, g);
    const int radius = std::min(gaussian_radius(hb, g), gaussian_radius(ob, g));
    gaussian_splat(plane(t.hm_i, static_cast<std::size_t>(r.verb)), ic, radius);
    const auto y = static_cast<std::size_t>(ic.y), x = static_cast<std::size_t>(ic.x);
    if (t.disp_mask.at(0, y, x) == 1.0) {
      ++t.collisions;
      continue;
    }
    const auto [dh, dobj] = displacements(ic, hc, oc);
    t.disp_mask.at(0, y, x) = 1.0;
    t.disp.at(0, y, x) = dh.dx;
    t.disp.at(1, y, x) = dh.dy;
    t.disp.at(2, y, x) = dobj.dx;
    t.disp.at(3, y, x) = dobj.dy;
  }
  return t;
}

struct Dataset {
  DataConfig config;
  std::vector<SceneSpec> scenes;
  std::vector<RasterImage> images;
  std::size_t size() const { return scenes.size(); }
};

/// Scenes [first_index, first_index + num_scenes) of `config`.
inline Dataset make_dataset(const DataConfig& config) {
  config.validate();
  Dataset ds;
  ds.config = config;
  for (std::size_t i = 0; i < config.num_scenes; ++i) {
    auto [scene, img] = generate_scene(config, config.first_index + i);
    ds.scenes.push_back(std::move(scene));
    ds.images.push_back(std::move(img));
  }
  return ds;
}

// ---- JSON ----------------------------------------------------------------

inline json to_json(const DataConfig& c) {
  return json{{"image_size", c.image_size},
              {"grid", {{"height", c.grid.height}, {"width", c.grid.width}, {"stride", c.grid.stride}}},
              {"num_object_classes", c.num_object_classes},
              {"num_verbs", c.num_verbs},
              {"humans_per_scene", {c.humans_per_scene.min, c.humans_per_scene.max}},
              {"objects_per_scene", {c.objects_per_scene.min, c.objects_per_scene.max}},
              {"seed", c.seed},
              {"num_scenes", c.num_scenes},
              {"first_index", c.first_index}};
}

/// Applies the keys present in `j` on top of `c`; unknown keys are rejected.
inline void apply_json(const json& j, DataConfig& c) {
  reject_unknown_keys(j,
                      {"image_size", "grid", "num_object_classes", "num_verbs", "humans_per_scene",
                       "objects_per_scene", "seed", "num_scenes", "first_index"},
                      "data");
  read_field(j, "image_size", c.image_size, "data");
  if (auto g = j.find("grid"); g != j.end()) {
    reject_unknown_keys(*g, {"height", "width", "stride"}, "data.grid");
    read_field(*g, "height", c.grid.height, "data.grid");
    read_field(*g, "width", c.grid.width, "data.grid");
    read_field(*g, "stride", c.grid.stride, "data.grid");
  }
  read_field(j, "num_object_classes", c.num_object_classes, "data");
  read_field(j, "num_verbs", c.num_verbs, "data");
  for (auto [key, range] : {std::pair{"humans_per_scene", &c.humans_per_scene},
                            std::pair{"objects_per_scene", &c.objects_per_scene}}) {
    std::vector<int> v{range->min, range->max};
    read_field(j, key, v, "data");
    if (v.size() != 2) throw ConfigError(std::string("field 'data.") + key + "' must be [min, max]");
    *range = {v[0], v[1]};
  }
  read_field(j, "seed", c.seed, "data");
  read_field(j, "num_scenes", c.num_scenes, "data");
  read_field(j, "first_index", c.first_index, "data");
}

inline json scene_to_json(const SceneSpec& s) {
  json humans = json::array(), objects = json::array(), inter = json::array();
  for (const BBox& b : s.humans) humans.push_back({b.cx, b.cy, b.w, b.h});
  for (const ObjectInstance& o : s.objects) objects.push_back({o.class_id, o.box.cx, o.box.cy, o.box.w, o.box.h});
  for (const Interaction& r : s.interactions) inter.push_back({r.human, r.object, r.verb});
  return json{{"humans", humans}, {"objects", objects}, {"interactions", inter}};
}

/// Parses one scene line; errors cite `line`.
inline SceneSpec scene_from_json(const json& j, std::size_t line, const DataConfig& cfg) {
  SceneSpec s;
  try {
    reject_unknown_keys(j, {"humans", "objects", "interactions"}, "scene");
    for (const auto& h : j.at("humans")) {
      if (h.size() != 4) throw ParseError(line, "human box needs [cx,cy,w,h]");
      s.humans.push_back({h[0].get<double>(), h[1].get<double>(), h[2].get<double>(), h[3].get<double>()});
    }
    for (const auto& o : j.at("objects")) {
      if (o.size() != 5) throw ParseError(line, "object needs [class,cx,cy,w,h]");
      s.objects.push_back(
          {o[0].get<int>(), {o[1].get<double>(), o[2].get<double>(), o[3].get<double>(), o[4].get<double>()}});
    }
    for (const auto& r : j.at("interactions")) {
      if (r.size() != 3) throw ParseError(line, "interaction needs [h_idx,o_idx,verb]");
      s.interactions.push_back({r[0].get<int>(), r[1].get<int>(), r[2].get<int>()});
    }
  } catch (const ParseError&) {
    throw;
  } catch (const std::exception& e) {
    throw ParseError(line, e.what());
  }
  for (const BBox& b : s.humans)
    if (!b.valid()) throw ParseError(line, "human box with non-positive size");
  for (const ObjectInstance& o : s.objects) {
    if (!o.box.valid()) throw ParseError(line, "object box with non-positive size");
    if (o.class_id < 0 || o.class_id >= cfg.num_object_classes) throw ParseError(line, "object class out of range");
  }
  for (const Interaction& r : s.interactions) {
    if (r.human < 0 || r.human >= static_cast<int>(s.humans.size()) || r.object < 0 ||
        r.object >= static_cast<int>(s.objects.size()) || r.verb < 0 || r.verb >= cfg.num_verbs) {
      throw ParseError(line, "interaction index out of range");
    }
  }
  return s;
}

// ---- files ---------------------------------------------------------------

inline constexpr int kDatasetVersion = 1;
inline constexpr char kRasterMagic[4] = {'R', 'R', 'N', 'R'};

/// Sidecar raster path: the dataset path with its extension replaced by ".raster".
inline std::filesystem::path raster_path(const std::filesystem::path& dataset) {
  auto p = dataset;
  return p.replace_extension(".raster");
}

inline void write_dataset(const Dataset& ds, const std::filesystem::path& path) {
  {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    os << json{{"version", kDatasetVersion}, {"config", to_json(ds.config)}}.dump() << '\n';
    for (const SceneSpec& s : ds.scenes) os << scene_to_json(s).dump() << '\n';
    if (!os) throw IoError("write failed for " + path.string());
  }
  const auto rp = raster_path(path);
  std::ofstream rs(rp, std::ios::binary | std::ios::trunc);
  if (!rs) throw IoError("cannot open " + rp.string() + " for writing");
  const std::uint32_t header[3] = {static_cast<std::uint32_t>(ds.images.size()), 3u,
                                   static_cast<std::uint32_t>(ds.config.image_size)};
  rs.write(kRasterMagic, 4);
  rs.write(reinterpret_cast<const char*>(header), sizeof(header));
  for (const RasterImage& img : ds.images) {
    if (img.size != ds.config.image_size || img.channels != 3) throw IoError("raster size differs from config");
    rs.write(reinterpret_cast<const char*>(img.data.data()), static_cast<std::streamsize>(img.data.size() * 4));
  }
  if (!rs) throw IoError("write failed for " + rp.string());
}

inline Dataset read_dataset(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open dataset " + path.string());
  Dataset ds;
  std::string text;
  std::size_t line = 0;
  bool have_header = false;
  while (std::getline(is, text)) {
    ++line;
    if (text.empty()) continue;
    json j;
    try {
      j = json::parse(text);
    } catch (const json::parse_error& e) {
      throw ParseError(line, e.what());
    }
    if (!have_header) {
      if (!j.is_object() || !j.contains("version")) throw ParseError(line, "missing header line");
      if (j["version"] != kDatasetVersion) {
        throw FormatVersionError("dataset version " + j["version"].dump() + " is not supported (expected " +
                                 std::to_string(kDatasetVersion) + ")");
      }
      try {
        apply_json(j.at("config"), ds.config);
        ds.config.validate();
      } catch (const ConfigError& e) {
        throw ParseError(line, e.what());
      } catch (const json::exception& e) {
        throw ParseError(line, e.what());
      }
      have_header = true;
      continue;
    }
    ds.scenes.push_back(scene_from_json(j, line, ds.config));
  }
  if (!have_header) throw ParseError(line + 1, "missing header line");

  const auto rp = raster_path(path);
  std::ifstream rs(rp, std::ios::binary);
  if (!rs) throw IoError("cannot open raster sidecar " + rp.string());
  char magic[4];
  std::uint32_t header[3];
  rs.read(magic, 4);
  rs.read(reinterpret_cast<char*>(header), sizeof(header));
  if (!rs || std::memcmp(magic, kRasterMagic, 4) != 0) throw FormatVersionError("bad raster header in " + rp.string());
  if (header[0] != ds.scenes.size() || header[1] != 3u ||
      header[2] != static_cast<std::uint32_t>(ds.config.image_size)) {
    throw IoError("raster sidecar dimensions do not match " + path.string());
  }
  for (std::size_t i = 0; i < ds.scenes.size(); ++i) {
    RasterImage img;
    img.size = ds.config.image_size;
    img.data.resize(static_cast<std::size_t>(3) * img.size * img.size);
    rs.read(reinterpret_cast<char*>(img.data.data()), static_cast<std::streamsize>(img.data.size() * 4));
    if (!rs) throw IoError("truncated raster sidecar " + rp.string());
    ds.images.push_back(std::move(img));
  }
  return ds;
}

}  // namespace rrnet::synthdata
