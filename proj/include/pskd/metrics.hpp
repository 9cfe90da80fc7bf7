// SPDX-License-Identifier: Apache-2.0
//
// Person-search evaluation: detection AP/Recall with greedy IoU matching,
// per-query retrieval AP, and CMC top-K. Gallery detections count as
// relevant for a query only at IoU >= 0.5 against an unmatched ground-truth
// box of the query identity (greedy in rank order, so duplicate detections
// of the same box do not inflate AP). Detection AP uses the all-points
// interpolated area under the precision-recall curve.

#pragma once

#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "pskd/core.hpp"
#include "pskd/data.hpp"
#include "pskd/models.hpp"

namespace pskd {

// ---------------------------------------------------------------------------
// Detection metrics
// ---------------------------------------------------------------------------

struct PrPoint {
  double recall = 0;
  double precision = 0;
};

struct DetectionEval {
  double ap = 0;
  double recall = 0;
  std::vector<PrPoint> pr_curve;
};

// predictions[i] and ground_truth[i] describe the same scene. Matching is
// greedy in descending score order; each ground-truth box matches at most
// once at IoU >= iou_thresh.
inline DetectionEval detection_ap_recall(
    const std::vector<std::vector<ScoredBox>>& predictions,
    const std::vector<std::vector<BoundingBox>>& ground_truth, double iou_thresh) {
  check(iou_thresh > 0 && iou_thresh < 1, "detection_ap_recall: iou threshold must be in (0,1)");
  check(predictions.size() == ground_truth.size(),
        "detection_ap_recall: scene count mismatch");
  int total_gt = 0;
  for (const auto& g : ground_truth) total_gt += static_cast<int>(g.size());
  check(total_gt > 0, "detection_ap_recall: empty ground truth (recall undefined)");

  struct Entry {
    double score;
    int scene;
    int index;
  };
  std::vector<Entry> order;
  for (size_t s = 0; s < predictions.size(); ++s)
    for (size_t i = 0; i < predictions[s].size(); ++i) {
      check(std::isfinite(predictions[s][i].score), "detection_ap_recall: non-finite score");
      order.push_back({predictions[s][i].score, static_cast<int>(s), static_cast<int>(i)});
    }
  std::sort(order.begin(), order.end(), [](const Entry& a, const Entry& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.scene != b.scene) return a.scene < b.scene;
    return a.index < b.index;
  });

  std::vector<std::vector<bool>> matched(ground_truth.size());
  for (size_t s = 0; s < ground_truth.size(); ++s)
    matched[s].assign(ground_truth[s].size(), false);

  DetectionEval out;
  int tp = 0, fp = 0;
  std::vector<double> precisions, recalls;
  for (const auto& e : order) {
    const auto& box = predictions[e.scene][e.index].box;
    int best = -1;
    double best_iou = 0;
    for (size_t g = 0; g < ground_truth[e.scene].size(); ++g) {
      if (matched[e.scene][g]) continue;
      const double v = iou(box, ground_truth[e.scene][g]);
      if (v >= iou_thresh && v > best_iou) {
        best_iou = v;
        best = static_cast<int>(g);
      }
    }
    if (best >= 0) {
      matched[e.scene][best] = true;
      ++tp;
    } else {
      ++fp;
    }
    precisions.push_back(static_cast<double>(tp) / (tp + fp));
    recalls.push_back(static_cast<double>(tp) / total_gt);
  }

  // all-points interpolation: area under max-precision-at-recall>=r
  double ap = 0;
  double prev_recall = 0;
  for (size_t k = 0; k < precisions.size(); ++k) {
    double interp = 0;
    for (size_t j = k; j < precisions.size(); ++j) interp = std::max(interp, precisions[j]);
    ap += (recalls[k] - prev_recall) * interp;
    prev_recall = recalls[k];
    out.pr_curve.push_back({recalls[k], precisions[k]});
  }
  out.ap = ap;
  out.recall = static_cast<double>(tp) / total_gt;
  return out;
}

// ---------------------------------------------------------------------------
// Retrieval metrics
// ---------------------------------------------------------------------------

struct RankedEntry {
  double score = 0;
  int scene_id = 0;
  BoundingBox box;
  bool relevant = false;
};

// One query's ranked gallery detections, scores non-increasing.
struct RankedGallery {
  std::vector<RankedEntry> entries;

  void validate() const {
    for (size_t i = 1; i < entries.size(); ++i)
      check(entries[i - 1].score >= entries[i].score,
            "RankedGallery: scores must be non-increasing");
  }
};

// AP = (1/n_relevant) * sum over relevant ranks r of precision@r.
inline double query_ap(const RankedGallery& ranked, int n_relevant) {
  check(n_relevant >= 1, "query_ap: need n_relevant >= 1 (query excluded upstream)");
  ranked.validate();
  double ap = 0;
  int hits = 0;
  for (size_t r = 0; r < ranked.entries.size(); ++r) {
    if (!ranked.entries[r].relevant) continue;
    ++hits;
    ap += static_cast<double>(hits) / static_cast<double>(r + 1);
  }
  return ap / n_relevant;
}

// 1 iff any of the top-k entries is relevant.
inline bool cmc_hit(const RankedGallery& ranked, int k) {
  check(k >= 1, "cmc_hit: k must be >= 1");
  ranked.validate();
  const int limit = std::min<int>(k, static_cast<int>(ranked.entries.size()));
  for (int r = 0; r < limit; ++r)
    if (ranked.entries[r].relevant) return true;
  return false;
}

// ---------------------------------------------------------------------------
// Search evaluation
// ---------------------------------------------------------------------------

struct MetricsReport {
  double detection_ap = 0;
  double detection_recall = 0;
  double reid_map = 0;
  std::map<int, double> cmc;
  int skipped_queries = 0;
  std::vector<PrPoint> detection_pr;

  std::string to_text() const {
    char buf[64];
    std::string out;
    auto line = [&](const std::string& key, double v) {
      std::snprintf(buf, sizeof(buf), "%.17g", v);
      out += key + "\t" + buf + "\n";
    };
    line("detection_ap", detection_ap);
    line("detection_recall", detection_recall);
    line("reid_map", reid_map);
    for (const auto& [k, v] : cmc) line("cmc_top" + std::to_string(k), v);
    out += "skipped_queries\t" + std::to_string(skipped_queries) + "\n";
    return out;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["detection_ap"] = detection_ap;
    j["detection_recall"] = detection_recall;
    j["reid_map"] = reid_map;
    for (const auto& [k, v] : cmc) j["cmc"][std::to_string(k)] = v;
    j["skipped_queries"] = skipped_queries;
    return j;
  }
};

// Detection + embedding provider: the trained student at evaluation time, or
// an oracle in tests.
class SearchBackend {
 public:
  virtual ~SearchBackend() = default;
  virtual std::vector<ScoredBox> detect(const Scene& scene) const = 0;
  virtual Embedding embed(const Scene& scene, const BoundingBox& box) const = 0;
};

namespace detail {

inline double cosine(const Embedding& a, const Embedding& b) {
  check(a.dim() == b.dim(), "cosine: dimension mismatch");
  double dot = 0, na = 0, nb = 0;
  for (int i = 0; i < a.dim(); ++i) {
    dot += a.values[i] * b.values[i];
    na += a.values[i] * a.values[i];
    nb += b.values[i] * b.values[i];
  }
  if (na < 1e-24 || nb < 1e-24) return 0;
  return dot / std::sqrt(na * nb);
}

}  // namespace detail

// Runs detection over gallery scenes, embeds detections and queries, ranks by
// cosine similarity, and aggregates mAP/CMC over queries plus AP/Recall over
// detections. Each query searches a deterministic nested subset of the
// gallery: scenes containing the query identity come first (ordered by id),
// the rest follow in a seed-shuffled order, and the subset is the first
// `gallery_size` entries. Growing the gallery therefore only adds
// distractors.
inline MetricsReport evaluate_search(const SearchBackend& backend,
                                     const std::vector<Scene>& queries,
                                     const std::vector<Scene>& gallery, int gallery_size,
                                     uint64_t seed, const std::vector<int>& cmc_ks = {1, 2, 5,
                                                                                      10}) {
  check(!queries.empty() && !gallery.empty(), "evaluate_search: empty inputs");
  check(gallery_size >= 1 && gallery_size <= static_cast<int>(gallery.size()),
        "evaluate_search: gallery_size must be in [1, #gallery scenes]");

  // order-independent: work on an id-sorted view
  std::vector<const Scene*> scenes;
  for (const auto& s : gallery) scenes.push_back(&s);
  std::sort(scenes.begin(), scenes.end(),
            [](const Scene* a, const Scene* b) { return a->id < b->id; });

  struct GalleryDetections {
    std::vector<ScoredBox> dets;
    std::vector<Embedding> embs;
  };
  std::vector<GalleryDetections> cache(scenes.size());
  for (size_t i = 0; i < scenes.size(); ++i) {
    cache[i].dets = backend.detect(*scenes[i]);
    for (const auto& det : cache[i].dets)
      cache[i].embs.push_back(backend.embed(*scenes[i], det.box));
  }

  MetricsReport report;
  double ap_sum = 0;
  int evaluated = 0;
  std::map<int, int> cmc_hits;
  for (int k : cmc_ks) cmc_hits[k] = 0;

  for (size_t qi = 0; qi < queries.size(); ++qi) {
    const Scene& query = queries[qi];
    check(!query.boxes.empty() && query.boxes.front().identity.has_value(),
          "evaluate_search: query scenes need one labeled box");
    const int query_id = *query.boxes.front().identity;
    const Embedding query_emb = backend.embed(query, query.boxes.front());

    // nested deterministic subset: relevant scenes first, seeded fill after
    std::vector<int> relevant_scenes, other_scenes;
    for (size_t i = 0; i < scenes.size(); ++i) {
      bool has_id = false;
      for (const auto& box : scenes[i]->boxes)
        if (box.identity && *box.identity == query_id) has_id = true;
      (has_id ? relevant_scenes : other_scenes).push_back(static_cast<int>(i));
    }
    Rng rng = Rng(seed).split(qi + 1);
    for (size_t i = other_scenes.size(); i > 1; --i)
      std::swap(other_scenes[i - 1], other_scenes[rng.uniform_int(0, static_cast<int>(i) - 1)]);

    std::vector<int> subset;
    for (int idx : relevant_scenes)
      if (static_cast<int>(subset.size()) < gallery_size) subset.push_back(idx);
    for (int idx : other_scenes)
      if (static_cast<int>(subset.size()) < gallery_size) subset.push_back(idx);

    int n_relevant_gt = 0;
    for (int idx : subset)
      for (const auto& box : scenes[idx]->boxes)
        if (box.identity && *box.identity == query_id) ++n_relevant_gt;
    if (n_relevant_gt == 0) {
      ++report.skipped_queries;
      continue;
    }

    struct Cand {
      double score;
      int scene_index;
      int det_index;
    };
    std::vector<Cand> cands;
    for (int idx : subset)
      for (size_t d = 0; d < cache[idx].dets.size(); ++d)
        cands.push_back({detail::cosine(query_emb, cache[idx].embs[d]), idx,
                         static_cast<int>(d)});
    std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.scene_index != b.scene_index) return a.scene_index < b.scene_index;
      return a.det_index < b.det_index;
    });

    // greedy per-ground-truth relevance in rank order
    std::map<int, std::vector<bool>> gt_used;
    RankedGallery ranked;
    for (const auto& cand : cands) {
      const Scene& scene = *scenes[cand.scene_index];
      auto& used = gt_used[cand.scene_index];
      if (used.empty()) used.assign(scene.boxes.size(), false);
      const auto& det = cache[cand.scene_index].dets[cand.det_index];
      bool relevant = false;
      double best_iou = 0;
      int best_g = -1;
      for (size_t g = 0; g < scene.boxes.size(); ++g) {
        const auto& gt = scene.boxes[g];
        if (!gt.identity || *gt.identity != query_id || used[g]) continue;
        const double v = iou(det.box, gt);
        if (v >= 0.5 && v > best_iou) {
          best_iou = v;
          best_g = static_cast<int>(g);
        }
      }
      if (best_g >= 0) {
        used[best_g] = true;
        relevant = true;
      }
      ranked.entries.push_back({cand.score, scene.id, det.box, relevant});
    }

    ap_sum += query_ap(ranked, n_relevant_gt);
    ++evaluated;
    for (int k : cmc_ks)
      if (cmc_hit(ranked, k)) ++cmc_hits[k];
  }

  check(evaluated > 0, "evaluate_search: every query was skipped");
  report.reid_map = ap_sum / evaluated;
  for (int k : cmc_ks) report.cmc[k] = static_cast<double>(cmc_hits[k]) / evaluated;

  // detection metrics over the full gallery
  std::vector<std::vector<ScoredBox>> preds;
  std::vector<std::vector<BoundingBox>> gts;
  for (size_t i = 0; i < scenes.size(); ++i) {
    preds.push_back(cache[i].dets);
    gts.push_back(scenes[i]->boxes);
  }
  const DetectionEval det = detection_ap_recall(preds, gts, 0.5);
  report.detection_ap = det.ap;
  report.detection_recall = det.recall;
  report.detection_pr = det.pr_curve;
  return report;
}

// ---------------------------------------------------------------------------
// Backends
// ---------------------------------------------------------------------------

// Inference through a trained student checkpoint. Caches per-scene feature
// maps; only the student is needed (no teacher at evaluation time).
class StudentBackend : public SearchBackend {
 public:
  explicit StudentBackend(StudentModel model, DetectConfig cfg = {})
      : model_(std::move(model)), cfg_(cfg) {}

  std::vector<ScoredBox> detect(const Scene& scene) const override {
    const SceneFeatures& f = features(scene);
    return decode_detections(f, model_.arch, scene.width(), scene.height(), cfg_);
  }

  Embedding embed(const Scene& scene, const BoundingBox& box) const override {
    return student_embed(model_, features(scene), box);
  }

 private:
  const SceneFeatures& features(const Scene& scene) const {
    auto it = cache_.find(&scene);
    if (it == cache_.end())
      it = cache_.emplace(&scene, student_scene_features(model_, scene.image)).first;
    return it->second;
  }

  mutable StudentModel model_;
  DetectConfig cfg_;
  mutable std::map<const Scene*, SceneFeatures> cache_;
};

// Reads the annotations directly: perfect detections with distinct scores and
// one-hot identity embeddings. Upper bound for the search metrics.
class OracleBackend : public SearchBackend {
 public:
  explicit OracleBackend(int n_classes) : n_classes_(n_classes) {}

  std::vector<ScoredBox> detect(const Scene& scene) const override {
    std::vector<ScoredBox> out;
    for (size_t i = 0; i < scene.boxes.size(); ++i)
      out.push_back({scene.boxes[i], 1.0 - 1e-3 * static_cast<double>(i)});
    return out;
  }

  Embedding embed(const Scene& scene, const BoundingBox& box) const override {
    Embedding e;
    e.values.assign(n_classes_ + 1, 0.0);
    double best = 0;
    int id = n_classes_;  // distractor bucket
    for (const auto& gt : scene.boxes) {
      const double v = iou(box, gt);
      if (v > best && v >= 0.5) {
        best = v;
        id = gt.identity ? *gt.identity : n_classes_;
      }
    }
    e.values[id] = 1.0;
    return e;
  }

 private:
  int n_classes_;
};

}  // namespace pskd
