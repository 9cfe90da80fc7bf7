// SPDX-License-Identifier: Apache-2.0
//
// Deterministic synthetic person-search scenes.
//
// Each identity is a procedurally rendered figure with a fixed two-color
// palette and stripe texture; scenes add position/scale nuisance, color
// jitter, background clutter, and optional unlabeled distractor figures.
// Datasets serialize to a directory of binary PPM images plus line-delimited
// annotation files; pixels are quantized to 8 bits at render time so the
// round trip is exact.

#pragma once

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "pskd/autodiff.hpp"
#include "pskd/core.hpp"

namespace pskd {

struct Identity {
  int id = 0;
  std::array<double, 3> top_color{};
  std::array<double, 3> bottom_color{};
  int stripe_period = 3;
  double stripe_phase = 0;
};

// A scene image with its box annotations. Boxes with no identity are
// unlabeled distractors: real figures for the detection task, excluded from
// identity supervision.
struct Scene {
  int id = 0;
  ad::Tensor image;  // {3,H,W}, values k/255
  std::vector<BoundingBox> boxes;

  int height() const { return image.dim(1); }
  int width() const { return image.dim(2); }
};

struct SplitSpec {
  int n_identities = 32;
  int n_train_scenes = 96;
  int n_gallery_scenes = 64;
  int n_queries = 32;
  uint64_t seed = 1;

  // generator knobs
  int scene_h = 128;
  int scene_w = 192;
  double min_box_h = 24;
  double max_box_h = 56;
  int figures_min = 2;
  int figures_max = 4;
  double distractor_rate = 0.25;

  void validate() const {
    check(n_identities >= 1, "SplitSpec: need at least one identity");
    check(n_train_scenes >= 1 && n_gallery_scenes >= 1 && n_queries >= 1,
          "SplitSpec: all split sizes must be >= 1");
    check(scene_h >= 64 && scene_w >= 64, "SplitSpec: scene too small");
    check(min_box_h >= 12 && max_box_h >= min_box_h, "SplitSpec: bad box size range");
    check(max_box_h <= scene_h - 20, "SplitSpec: boxes do not fit the scene");
    check(figures_min >= 1 && figures_max >= figures_min, "SplitSpec: bad figure range");
    check(distractor_rate >= 0 && distractor_rate <= 1, "SplitSpec: bad distractor rate");
    const int distinct_queries = std::min(n_queries, n_identities);
    check(distinct_queries <= n_gallery_scenes * figures_max,
          "SplitSpec: infeasible, more query identities than gallery slots");
  }
};

struct Dataset {
  SplitSpec spec;
  std::vector<Identity> identities;
  std::vector<Scene> train;
  std::vector<Scene> queries;  // single labeled figure per scene
  std::vector<Scene> gallery;

  int num_classes() const { return static_cast<int>(identities.size()); }
};

namespace detail {

inline std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  h = h - std::floor(h);
  const double c = v * s;
  const double hp = h * 6.0;
  const double x = c * (1 - std::abs(std::fmod(hp, 2.0) - 1));
  double r = 0, g = 0, b = 0;
  if (hp < 1) {
    r = c;
    g = x;
  } else if (hp < 2) {
    r = x;
    g = c;
  } else if (hp < 3) {
    g = c;
    b = x;
  } else if (hp < 4) {
    g = x;
    b = c;
  } else if (hp < 5) {
    r = x;
    b = c;
  } else {
    r = c;
    b = x;
  }
  const double m = v - c;
  return {r + m, g + m, b + m};
}

inline double descriptor_dist(const Identity& a, const Identity& b) {
  double s = 0;
  for (int k = 0; k < 3; ++k) {
    s += (a.top_color[k] - b.top_color[k]) * (a.top_color[k] - b.top_color[k]);
    s += (a.bottom_color[k] - b.bottom_color[k]) * (a.bottom_color[k] - b.bottom_color[k]);
  }
  return std::sqrt(s);
}

// Saturated palettes kept apart so identities stay separable under jitter.
inline std::vector<Identity> make_identities(int n, Rng& rng) {
  std::vector<Identity> out;
  for (int i = 0; i < n; ++i) {
    Identity best;
    double best_sep = -1;
    for (int attempt = 0; attempt < 400; ++attempt) {
      Identity cand;
      cand.id = i;
      cand.top_color = hsv_to_rgb(rng.uniform(), rng.uniform(0.75, 1.0), rng.uniform(0.7, 1.0));
      cand.bottom_color = hsv_to_rgb(rng.uniform(), rng.uniform(0.75, 1.0), rng.uniform(0.7, 1.0));
      cand.stripe_period = rng.uniform_int(2, 5);
      cand.stripe_phase = rng.uniform();
      double sep = std::numeric_limits<double>::infinity();
      for (const auto& other : out) sep = std::min(sep, descriptor_dist(cand, other));
      if (sep > best_sep) {
        best_sep = sep;
        best = cand;
      }
      if (best_sep >= 0.45 || out.empty()) break;
    }
    out.push_back(best);
  }
  return out;
}

inline void put_pixel(ad::Tensor& img, int y, int x, const std::array<double, 3>& c) {
  const int h = img.dim(1), w = img.dim(2);
  if (y < 0 || y >= h || x < 0 || x >= w) return;
  for (int ch = 0; ch < 3; ++ch) img.at3(ch, y, x) = std::clamp(c[ch], 0.0, 1.0);
}

inline void fill_rect(ad::Tensor& img, int y0, int x0, int y1, int x1,
                      const std::array<double, 3>& c) {
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) put_pixel(img, y, x, c);
}

inline std::array<double, 3> jitter(const std::array<double, 3>& c, double f0, double f1,
                                    double f2) {
  return {c[0] * f0, c[1] * f1, c[2] * f2};
}

inline void render_figure(ad::Tensor& img, const BoundingBox& box, const Identity& ident,
                          Rng& rng) {
  const int x0 = static_cast<int>(std::lround(box.x));
  const int y0 = static_cast<int>(std::lround(box.y));
  const int w = static_cast<int>(std::lround(box.w));
  const int h = static_cast<int>(std::lround(box.h));
  const double f0 = rng.uniform(0.95, 1.05);
  const double f1 = rng.uniform(0.95, 1.05);
  const double f2 = rng.uniform(0.95, 1.05);

  const int head_end = y0 + std::max(2, static_cast<int>(0.18 * h));
  const int torso_end = y0 + static_cast<int>(0.58 * h);

  // head: narrow block of a fixed skin tone
  const int head_w = std::max(2, static_cast<int>(0.4 * w));
  const int head_x = x0 + (w - head_w) / 2;
  fill_rect(img, y0, head_x, head_end, head_x + head_w, jitter({0.87, 0.72, 0.58}, f0, f1, f2));

  // torso: top color with horizontal stripes
  const auto top = jitter(ident.top_color, f0, f1, f2);
  const auto top_dark = jitter({ident.top_color[0] * 0.55, ident.top_color[1] * 0.55,
                                ident.top_color[2] * 0.55},
                               f0, f1, f2);
  const int phase = static_cast<int>(ident.stripe_phase * ident.stripe_period);
  for (int y = head_end; y < torso_end; ++y) {
    const bool dark = ((y - head_end + phase) % ident.stripe_period) <
                      (ident.stripe_period + 1) / 2;
    for (int x = x0; x < x0 + w; ++x)
      put_pixel(img, y, x, dark ? top_dark : top);
  }

  // legs: bottom color, two columns with a gap
  const auto bottom = jitter(ident.bottom_color, f0, f1, f2);
  const int leg_w = std::max(1, static_cast<int>(0.32 * w));
  fill_rect(img, torso_end, x0 + static_cast<int>(0.08 * w), y0 + h,
            x0 + static_cast<int>(0.08 * w) + leg_w, bottom);
  fill_rect(img, torso_end, x0 + w - static_cast<int>(0.08 * w) - leg_w, y0 + h,
            x0 + w - static_cast<int>(0.08 * w), bottom);
}

inline void render_background(ad::Tensor& img, Rng& rng) {
  const int h = img.dim(1), w = img.dim(2);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double g = 0.35 + 0.3 * rng.uniform();
      for (int ch = 0; ch < 3; ++ch)
        img.at3(ch, y, x) = std::clamp(g + 0.04 * (rng.uniform() - 0.5), 0.0, 1.0);
    }
  const int n_clutter = rng.uniform_int(3, 7);
  for (int i = 0; i < n_clutter; ++i) {
    const int cw = rng.uniform_int(8, 40), chh = rng.uniform_int(8, 40);
    const int cx = rng.uniform_int(0, std::max(0, w - cw));
    const int cy = rng.uniform_int(0, std::max(0, h - chh));
    const double tone = rng.uniform(0.2, 0.75);
    const double dev = rng.uniform(-0.05, 0.05);
    fill_rect(img, cy, cx, cy + chh, cx + cw, {tone + dev, tone, tone - dev});
  }
}

inline void quantize(ad::Tensor& img) {
  for (double& v : img.data) v = std::lround(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
}

// Boxes stay >= 8 px inside the borders so augmentation shifts at default
// ranges never cross the image edge.
constexpr int kBorderMargin = 8;

inline BoundingBox sample_box(const SplitSpec& spec, Rng& rng,
                              const std::vector<BoundingBox>& placed) {
  for (int attempt = 0; attempt < 60; ++attempt) {
    const double h = rng.uniform(spec.min_box_h, spec.max_box_h);
    const double w = std::max(8.0, h * rng.uniform(0.4, 0.6));
    const double x = std::floor(rng.uniform(kBorderMargin, spec.scene_w - kBorderMargin - w));
    const double y = std::floor(rng.uniform(kBorderMargin, spec.scene_h - kBorderMargin - h));
    BoundingBox box{x, y, std::floor(w), std::floor(h)};
    bool ok = true;
    for (const auto& other : placed)
      if (iou(box, other) > 0.3) ok = false;
    if (ok || attempt == 59) return box;
  }
  return {};  // unreachable
}

struct FigureRequest {
  std::optional<int> identity;  // nullopt = distractor
};

inline Scene render_scene(int scene_id, const SplitSpec& spec,
                          const std::vector<Identity>& identities,
                          const std::vector<FigureRequest>& figures, Rng rng) {
  Scene scene;
  scene.id = scene_id;
  scene.image = ad::Tensor({3, spec.scene_h, spec.scene_w});
  render_background(scene.image, rng);
  for (const auto& req : figures) {
    BoundingBox box = sample_box(spec, rng, scene.boxes);
    box.identity = req.identity;
    if (req.identity) {
      render_figure(scene.image, box, identities[*req.identity], rng);
    } else {
      Identity fake;
      fake.id = -1;
      fake.top_color = hsv_to_rgb(rng.uniform(), rng.uniform(0.1, 0.5), rng.uniform(0.3, 0.9));
      fake.bottom_color = hsv_to_rgb(rng.uniform(), rng.uniform(0.1, 0.5), rng.uniform(0.3, 0.9));
      fake.stripe_period = rng.uniform_int(2, 5);
      fake.stripe_phase = rng.uniform();
      render_figure(scene.image, box, fake, rng);
    }
    scene.boxes.push_back(box);
  }
  quantize(scene.image);
  return scene;
}

}  // namespace detail

// Deterministic dataset generation; the same spec always yields bit-identical
// scenes and annotations.
inline Dataset generate(const SplitSpec& spec) {
  spec.validate();
  Dataset ds;
  ds.spec = spec;
  Rng master(spec.seed);
  Rng ident_rng = master.split(1);
  Rng train_rng = master.split(2);
  Rng gallery_rng = master.split(3);
  Rng query_rng = master.split(4);

  ds.identities = detail::make_identities(spec.n_identities, ident_rng);

  auto pick_ids = [&](Rng& rng, int count, int forced_first) {
    std::set<int> ids;
    if (forced_first >= 0) ids.insert(forced_first);
    int guard = 0;
    while (static_cast<int>(ids.size()) < count && guard++ < 1000)
      ids.insert(rng.uniform_int(0, spec.n_identities - 1));
    return std::vector<int>(ids.begin(), ids.end());
  };

  for (int i = 0; i < spec.n_train_scenes; ++i) {
    Rng rng = train_rng.split(static_cast<uint64_t>(i));
    const int want = std::min(rng.uniform_int(spec.figures_min, spec.figures_max),
                              spec.n_identities);
    std::vector<detail::FigureRequest> figs;
    for (int id : pick_ids(rng, want, i % spec.n_identities)) figs.push_back({id});
    if (rng.uniform() < spec.distractor_rate) figs.push_back({std::nullopt});
    ds.train.push_back(detail::render_scene(i, spec, ds.identities, figs, rng.split(99)));
  }

  // gallery: every queried identity must appear in at least one scene
  const int distinct_queries = std::min(spec.n_queries, spec.n_identities);
  std::vector<std::vector<int>> forced(spec.n_gallery_scenes);
  for (int q = 0; q < distinct_queries; ++q) forced[q % spec.n_gallery_scenes].push_back(q);
  for (int j = 0; j < spec.n_gallery_scenes; ++j) {
    check(static_cast<int>(forced[j].size()) <= spec.figures_max,
          "generate: infeasible query coverage");
    Rng rng = gallery_rng.split(static_cast<uint64_t>(j));
    const int want = std::min(
        std::max(static_cast<int>(forced[j].size()),
                 rng.uniform_int(spec.figures_min, spec.figures_max)),
        spec.n_identities);
    std::set<int> ids(forced[j].begin(), forced[j].end());
    int guard = 0;
    while (static_cast<int>(ids.size()) < want && guard++ < 1000)
      ids.insert(rng.uniform_int(0, spec.n_identities - 1));
    std::vector<detail::FigureRequest> figs;
    for (int id : ids) figs.push_back({id});
    if (rng.uniform() < spec.distractor_rate) figs.push_back({std::nullopt});
    ds.gallery.push_back(detail::render_scene(j, spec, ds.identities, figs, rng.split(99)));
  }

  for (int q = 0; q < spec.n_queries; ++q) {
    Rng rng = query_rng.split(static_cast<uint64_t>(q));
    std::vector<detail::FigureRequest> figs{{q % spec.n_identities}};
    ds.queries.push_back(detail::render_scene(q, spec, ds.identities, figs, rng.split(99)));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Patch cropping (bilinear crop-and-resize, clamp-to-edge sampling)
// ---------------------------------------------------------------------------

inline ad::Tensor crop_patch(const ad::Tensor& image, const BoundingBox& box, int out_h,
                             int out_w) {
  check(out_h >= 1 && out_w >= 1, "crop_patch: bad output size");
  box.validate();
  const int c = image.dim(0), h = image.dim(1), w = image.dim(2);
  check(box.x >= 0 && box.y >= 0 && box.right() <= w && box.bottom() <= h,
        "crop_patch: box out of image bounds");
  ad::Tensor out({c, out_h, out_w});
  for (int iy = 0; iy < out_h; ++iy)
    for (int ix = 0; ix < out_w; ++ix) {
      // pixel-area convention: pixel k spans [k-0.5, k+0.5]
      const double sy = box.y + (iy + 0.5) * box.h / out_h - 0.5;
      const double sx = box.x + (ix + 0.5) * box.w / out_w - 0.5;
      const double cy = std::clamp(sy, 0.0, static_cast<double>(h - 1));
      const double cx = std::clamp(sx, 0.0, static_cast<double>(w - 1));
      const int y0 = std::min(static_cast<int>(std::floor(cy)), h - 1);
      const int x0 = std::min(static_cast<int>(std::floor(cx)), w - 1);
      const int y1 = std::min(y0 + 1, h - 1);
      const int x1 = std::min(x0 + 1, w - 1);
      const double ay = cy - y0, ax = cx - x0;
      for (int ch = 0; ch < c; ++ch) {
        const double v0 = image.at3(ch, y0, x0) * (1 - ax) + image.at3(ch, y0, x1) * ax;
        const double v1 = image.at3(ch, y1, x0) * (1 - ax) + image.at3(ch, y1, x1) * ax;
        out.at3(ch, iy, ix) = v0 * (1 - ay) + v1 * ay;
      }
    }
  return out;
}

inline ad::Tensor crop_patch(const Scene& scene, const BoundingBox& box, int out_h, int out_w) {
  return crop_patch(scene.image, box, out_h, out_w);
}

// ---------------------------------------------------------------------------
// Serialization: binary PPM per scene + annotations per split + meta.json
// ---------------------------------------------------------------------------

namespace detail {

inline void save_ppm(const std::string& path, const ad::Tensor& image) {
  const int h = image.dim(1), w = image.dim(2);
  std::ofstream f(path, std::ios::binary);
  check(f.good(), "save_ppm: cannot open " + path);
  f << "P6\n" << w << " " << h << "\n255\n";
  std::vector<unsigned char> row(static_cast<size_t>(w) * 3);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < 3; ++ch)
        row[static_cast<size_t>(x) * 3 + ch] =
            static_cast<unsigned char>(std::lround(image.at3(ch, y, x) * 255.0));
    f.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  check(f.good(), "save_ppm: write failed for " + path);
}

inline ad::Tensor load_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  check(f.good(), "load_ppm: cannot open " + path);
  std::string magic;
  int w = 0, h = 0, maxv = 0;
  f >> magic >> w >> h >> maxv;
  check(magic == "P6" && maxv == 255 && w > 0 && h > 0, "load_ppm: unsupported format");
  f.get();  // single whitespace after header
  ad::Tensor image({3, h, w});
  std::vector<unsigned char> row(static_cast<size_t>(w) * 3);
  for (int y = 0; y < h; ++y) {
    f.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size()));
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < 3; ++ch)
        image.at3(ch, y, x) = row[static_cast<size_t>(x) * 3 + ch] / 255.0;
  }
  check(f.good(), "load_ppm: truncated file " + path);
  return image;
}

inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline void save_split(const std::string& dir, const std::vector<Scene>& scenes) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::ofstream ann(dir + "/annotations.txt");
  check(ann.good(), "save_split: cannot write annotations in " + dir);
  for (const auto& scene : scenes) {
    char name[64];
    std::snprintf(name, sizeof(name), "/scene_%05d.ppm", scene.id);
    save_ppm(dir + name, scene.image);
    for (const auto& box : scene.boxes)
      ann << scene.id << ' ' << fmt_double(box.x) << ' ' << fmt_double(box.y) << ' '
          << fmt_double(box.w) << ' ' << fmt_double(box.h) << ' '
          << (box.identity ? *box.identity : -1) << '\n';
  }
}

inline std::vector<Scene> load_split(const std::string& dir) {
  std::ifstream ann(dir + "/annotations.txt");
  check(ann.good(), "load_split: missing annotations in " + dir);
  std::map<int, std::vector<BoundingBox>> boxes;
  std::string line;
  while (std::getline(ann, line)) {
    if (line.empty()) continue;
    int scene_id = 0, identity = -1;
    double x, y, w, h;
    check(std::sscanf(line.c_str(), "%d %lf %lf %lf %lf %d", &scene_id, &x, &y, &w, &h,
                      &identity) == 6,
          "load_split: malformed annotation line");
    BoundingBox box{x, y, w, h};
    if (identity >= 0) box.identity = identity;
    boxes[scene_id].push_back(box);
  }
  std::vector<Scene> scenes;
  for (auto& [id, bs] : boxes) {
    char name[64];
    std::snprintf(name, sizeof(name), "/scene_%05d.ppm", id);
    Scene scene;
    scene.id = id;
    scene.image = load_ppm(dir + name);
    scene.boxes = std::move(bs);
    scenes.push_back(std::move(scene));
  }
  return scenes;
}

}  // namespace detail

inline void save_dataset(const Dataset& ds, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  detail::save_split(dir + "/train", ds.train);
  detail::save_split(dir + "/gallery", ds.gallery);
  detail::save_split(dir + "/query", ds.queries);

  nlohmann::json meta;
  meta["format_version"] = 1;
  meta["spec"] = {{"n_identities", ds.spec.n_identities},
                  {"n_train_scenes", ds.spec.n_train_scenes},
                  {"n_gallery_scenes", ds.spec.n_gallery_scenes},
                  {"n_queries", ds.spec.n_queries},
                  {"seed", ds.spec.seed},
                  {"scene_h", ds.spec.scene_h},
                  {"scene_w", ds.spec.scene_w},
                  {"min_box_h", ds.spec.min_box_h},
                  {"max_box_h", ds.spec.max_box_h},
                  {"figures_min", ds.spec.figures_min},
                  {"figures_max", ds.spec.figures_max},
                  {"distractor_rate", ds.spec.distractor_rate}};
  meta["identities"] = nlohmann::json::array();
  for (const auto& ident : ds.identities)
    meta["identities"].push_back({{"id", ident.id},
                                  {"top", ident.top_color},
                                  {"bottom", ident.bottom_color},
                                  {"stripe_period", ident.stripe_period},
                                  {"stripe_phase", ident.stripe_phase}});
  std::ofstream f(dir + "/meta.json");
  check(f.good(), "save_dataset: cannot write meta.json");
  f << meta.dump(2) << '\n';
}

inline Dataset load_dataset(const std::string& dir) {
  std::ifstream f(dir + "/meta.json");
  check(f.good(), "load_dataset: missing meta.json in " + dir);
  nlohmann::json meta = nlohmann::json::parse(f);
  check(meta.value("format_version", 0) == 1, "load_dataset: unsupported format version");

  Dataset ds;
  const auto& s = meta.at("spec");
  ds.spec.n_identities = s.at("n_identities");
  ds.spec.n_train_scenes = s.at("n_train_scenes");
  ds.spec.n_gallery_scenes = s.at("n_gallery_scenes");
  ds.spec.n_queries = s.at("n_queries");
  ds.spec.seed = s.at("seed");
  ds.spec.scene_h = s.at("scene_h");
  ds.spec.scene_w = s.at("scene_w");
  ds.spec.min_box_h = s.at("min_box_h");
  ds.spec.max_box_h = s.at("max_box_h");
  ds.spec.figures_min = s.at("figures_min");
  ds.spec.figures_max = s.at("figures_max");
  ds.spec.distractor_rate = s.at("distractor_rate");

  for (const auto& j : meta.at("identities")) {
    Identity ident;
    ident.id = j.at("id");
    ident.top_color = j.at("top");
    ident.bottom_color = j.at("bottom");
    ident.stripe_period = j.at("stripe_period");
    ident.stripe_phase = j.at("stripe_phase");
    ds.identities.push_back(ident);
  }

  ds.train = detail::load_split(dir + "/train");
  ds.gallery = detail::load_split(dir + "/gallery");
  ds.queries = detail::load_split(dir + "/query");
  return ds;
}

}  // namespace pskd
