// SPDX-License-Identifier: Apache-2.0
//
// Training orchestration: experiment configuration (with content hashing),
// teacher pretraining on ground-truth or shifted-crop patches, joint student
// training under any ablation flag combination, and the seed-swept ablation
// runner. One training run is single-threaded and fully deterministic; the
// ablation sweep may run independent configurations on worker threads.

#pragma once

#include <chrono>
#include <cmath>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "pskd/core.hpp"
#include "pskd/data.hpp"
#include "pskd/losses.hpp"
#include "pskd/metrics.hpp"
#include "pskd/models.hpp"
#include "pskd/spatial.hpp"

namespace pskd {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

// Which loss terms and augmentations a run uses. `use_isa` selects the
// shifted-crop-trained teacher variant; it is a teacher property rather than
// a student loss switch, but lives here so one flag set names one table row.
struct AblationFlags {
  bool use_lp = false;
  bool use_lpr = false;
  bool use_ltr = false;
  bool use_isa = false;
  bool use_fsa = false;

  bool needs_teacher() const { return use_lp || use_lpr || use_ltr; }
};

struct OptimConfig {
  int iterations = 2000;
  int batch_scenes = 4;
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double lr_decay_factor = 0.1;
  double lr_decay_frac = 0.6;  // decay once at this fraction of the schedule
};

struct TeacherOptimConfig {
  int epochs = 60;
  int batch = 32;
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 5e-4;
};

struct ModelConfig {
  int c1 = 6;
  int c2 = 12;
  int det_ch = 8;
  int reid_ch = 12;
  int embed_dim = 32;
  int roi_h = 4;
  int roi_w = 2;
  double base_w = 20.0;
  double base_h = 36.0;
  int teacher_c1 = 8;
  int teacher_c2 = 16;
};

struct ExperimentConfig {
  uint64_t seed = 1;
  SplitSpec data;
  LossConfig loss;
  AugConfig aug;
  AblationFlags flags;
  OptimConfig optim;
  TeacherOptimConfig teacher_optim;
  ModelConfig model;

  void validate() const {
    data.validate();
    loss.validate();
    aug.validate();
    check(optim.iterations >= 1 && optim.batch_scenes >= 1, "config: bad optimizer settings");
    check(optim.lr > 0 && optim.momentum >= 0 && optim.weight_decay >= 0,
          "config: bad optimizer settings");
    check(teacher_optim.epochs >= 1 && teacher_optim.batch >= 1 && teacher_optim.lr > 0,
          "config: bad teacher optimizer settings");
  }
};

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  nlohmann::json j;
  j["seed"] = c.seed;
  j["data"] = {{"n_identities", c.data.n_identities},
               {"n_train_scenes", c.data.n_train_scenes},
               {"n_gallery_scenes", c.data.n_gallery_scenes},
               {"n_queries", c.data.n_queries},
               {"seed", c.data.seed},
               {"scene_h", c.data.scene_h},
               {"scene_w", c.data.scene_w},
               {"min_box_h", c.data.min_box_h},
               {"max_box_h", c.data.max_box_h},
               {"figures_min", c.data.figures_min},
               {"figures_max", c.data.figures_max},
               {"distractor_rate", c.data.distractor_rate}};
  j["loss"] = {{"lambda", c.loss.lambda},       {"beta_p", c.loss.beta_p},
               {"beta_pr", c.loss.beta_pr},     {"beta_tr", c.loss.beta_tr},
               {"margin", c.loss.margin},       {"normalize_embeddings",
                                                 c.loss.normalize_embeddings}};
  j["aug"] = {{"alpha", c.aug.alpha},
              {"delta_p", c.aug.delta_p},
              {"patch_h", c.aug.patch_h},
              {"patch_w", c.aug.patch_w},
              {"stride", c.aug.stride}};
  j["flags"] = {{"use_lp", c.flags.use_lp},
                {"use_lpr", c.flags.use_lpr},
                {"use_ltr", c.flags.use_ltr},
                {"use_isa", c.flags.use_isa},
                {"use_fsa", c.flags.use_fsa}};
  j["optim"] = {{"iterations", c.optim.iterations},
                {"batch_scenes", c.optim.batch_scenes},
                {"lr", c.optim.lr},
                {"momentum", c.optim.momentum},
                {"weight_decay", c.optim.weight_decay},
                {"lr_decay_factor", c.optim.lr_decay_factor},
                {"lr_decay_frac", c.optim.lr_decay_frac}};
  j["teacher_optim"] = {{"epochs", c.teacher_optim.epochs},
                        {"batch", c.teacher_optim.batch},
                        {"lr", c.teacher_optim.lr},
                        {"momentum", c.teacher_optim.momentum},
                        {"weight_decay", c.teacher_optim.weight_decay}};
  j["model"] = {{"c1", c.model.c1},
                {"c2", c.model.c2},
                {"det_ch", c.model.det_ch},
                {"reid_ch", c.model.reid_ch},
                {"embed_dim", c.model.embed_dim},
                {"roi_h", c.model.roi_h},
                {"roi_w", c.model.roi_w},
                {"base_w", c.model.base_w},
                {"base_h", c.model.base_h},
                {"teacher_c1", c.model.teacher_c1},
                {"teacher_c2", c.model.teacher_c2}};
  return j;
}

// Missing fields keep their defaults, so partial config files stay valid.
inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  c.seed = j.value("seed", c.seed);
  if (j.contains("data")) {
    const auto& d = j["data"];
    c.data.n_identities = d.value("n_identities", c.data.n_identities);
    c.data.n_train_scenes = d.value("n_train_scenes", c.data.n_train_scenes);
    c.data.n_gallery_scenes = d.value("n_gallery_scenes", c.data.n_gallery_scenes);
    c.data.n_queries = d.value("n_queries", c.data.n_queries);
    c.data.seed = d.value("seed", c.data.seed);
    c.data.scene_h = d.value("scene_h", c.data.scene_h);
    c.data.scene_w = d.value("scene_w", c.data.scene_w);
    c.data.min_box_h = d.value("min_box_h", c.data.min_box_h);
    c.data.max_box_h = d.value("max_box_h", c.data.max_box_h);
    c.data.figures_min = d.value("figures_min", c.data.figures_min);
    c.data.figures_max = d.value("figures_max", c.data.figures_max);
    c.data.distractor_rate = d.value("distractor_rate", c.data.distractor_rate);
  }
  if (j.contains("loss")) {
    const auto& l = j["loss"];
    c.loss.lambda = l.value("lambda", c.loss.lambda);
    c.loss.beta_p = l.value("beta_p", c.loss.beta_p);
    c.loss.beta_pr = l.value("beta_pr", c.loss.beta_pr);
    c.loss.beta_tr = l.value("beta_tr", c.loss.beta_tr);
    c.loss.margin = l.value("margin", c.loss.margin);
    c.loss.normalize_embeddings = l.value("normalize_embeddings", c.loss.normalize_embeddings);
  }
  if (j.contains("aug")) {
    const auto& a = j["aug"];
    c.aug.alpha = a.value("alpha", c.aug.alpha);
    c.aug.delta_p = a.value("delta_p", c.aug.delta_p);
    c.aug.patch_h = a.value("patch_h", c.aug.patch_h);
    c.aug.patch_w = a.value("patch_w", c.aug.patch_w);
    c.aug.stride = a.value("stride", c.aug.stride);
  }
  if (j.contains("flags")) {
    const auto& f = j["flags"];
    c.flags.use_lp = f.value("use_lp", c.flags.use_lp);
    c.flags.use_lpr = f.value("use_lpr", c.flags.use_lpr);
    c.flags.use_ltr = f.value("use_ltr", c.flags.use_ltr);
    c.flags.use_isa = f.value("use_isa", c.flags.use_isa);
    c.flags.use_fsa = f.value("use_fsa", c.flags.use_fsa);
  }
  if (j.contains("optim")) {
    const auto& o = j["optim"];
    c.optim.iterations = o.value("iterations", c.optim.iterations);
    c.optim.batch_scenes = o.value("batch_scenes", c.optim.batch_scenes);
    c.optim.lr = o.value("lr", c.optim.lr);
    c.optim.momentum = o.value("momentum", c.optim.momentum);
    c.optim.weight_decay = o.value("weight_decay", c.optim.weight_decay);
    c.optim.lr_decay_factor = o.value("lr_decay_factor", c.optim.lr_decay_factor);
    c.optim.lr_decay_frac = o.value("lr_decay_frac", c.optim.lr_decay_frac);
  }
  if (j.contains("teacher_optim")) {
    const auto& t = j["teacher_optim"];
    c.teacher_optim.epochs = t.value("epochs", c.teacher_optim.epochs);
    c.teacher_optim.batch = t.value("batch", c.teacher_optim.batch);
    c.teacher_optim.lr = t.value("lr", c.teacher_optim.lr);
    c.teacher_optim.momentum = t.value("momentum", c.teacher_optim.momentum);
    c.teacher_optim.weight_decay = t.value("weight_decay", c.teacher_optim.weight_decay);
  }
  if (j.contains("model")) {
    const auto& m = j["model"];
    c.model.c1 = m.value("c1", c.model.c1);
    c.model.c2 = m.value("c2", c.model.c2);
    c.model.det_ch = m.value("det_ch", c.model.det_ch);
    c.model.reid_ch = m.value("reid_ch", c.model.reid_ch);
    c.model.embed_dim = m.value("embed_dim", c.model.embed_dim);
    c.model.roi_h = m.value("roi_h", c.model.roi_h);
    c.model.roi_w = m.value("roi_w", c.model.roi_w);
    c.model.base_w = m.value("base_w", c.model.base_w);
    c.model.base_h = m.value("base_h", c.model.base_h);
    c.model.teacher_c1 = m.value("teacher_c1", c.model.teacher_c1);
    c.model.teacher_c2 = m.value("teacher_c2", c.model.teacher_c2);
  }
  return c;
}

// FNV-1a over the canonical (key-sorted) JSON dump.
inline uint64_t config_hash(const ExperimentConfig& c) {
  const std::string dump = config_to_json(c).dump();
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : dump) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string config_hash_hex(const ExperimentConfig& c) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(config_hash(c)));
  return buf;
}

// ---------------------------------------------------------------------------
// Teacher pretraining
// ---------------------------------------------------------------------------

struct TeacherTrainResult {
  TeacherModel model;
  double final_ce = 0;  // mean cross-entropy over the last epoch
  std::vector<double> epoch_ce = {};
};

inline StudentArch student_arch_of(const ExperimentConfig& cfg, int n_classes) {
  StudentArch a;
  a.c1 = cfg.model.c1;
  a.c2 = cfg.model.c2;
  a.det_ch = cfg.model.det_ch;
  a.reid_ch = cfg.model.reid_ch;
  a.embed_dim = cfg.model.embed_dim;
  a.n_classes = n_classes;
  a.stride = cfg.aug.stride;  // trunk stride and pooling stride are one symbol
  a.roi_h = cfg.model.roi_h;
  a.roi_w = cfg.model.roi_w;
  a.base_w = cfg.model.base_w;
  a.base_h = cfg.model.base_h;
  return a;
}

inline TeacherArch teacher_arch_of(const ExperimentConfig& cfg, int n_classes) {
  TeacherArch a;
  a.t1 = cfg.model.teacher_c1;
  a.t2 = cfg.model.teacher_c2;
  a.embed_dim = cfg.model.embed_dim;
  a.n_classes = n_classes;
  a.patch_h = cfg.aug.patch_h;
  a.patch_w = cfg.aug.patch_w;
  return a;
}

// Patch classifier training on ground-truth crops (plain) or shifted crops
// (isa = true). Aborts with a diagnostic if the loss diverges.
inline TeacherTrainResult train_teacher(const Dataset& ds, bool isa,
                                        const ExperimentConfig& cfg, uint64_t seed) {
  cfg.validate();
  struct Sample {
    int scene;
    BoundingBox box;
    int label;
  };
  std::vector<Sample> samples;
  for (size_t s = 0; s < ds.train.size(); ++s)
    for (const auto& box : ds.train[s].boxes)
      if (box.identity) samples.push_back({static_cast<int>(s), box, *box.identity});
  check(!samples.empty(), "train_teacher: dataset has no labeled boxes");

  Rng root(seed);
  Rng init_rng = root.split(1);
  Rng order_rng = root.split(2);
  Rng crop_rng = root.split(3);

  TeacherTrainResult out{TeacherModel::init(teacher_arch_of(cfg, ds.num_classes()), init_rng)};
  TeacherModel& model = out.model;

  for (int epoch = 0; epoch < cfg.teacher_optim.epochs; ++epoch) {
    std::vector<int> order(samples.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[order_rng.uniform_int(0, static_cast<int>(i) - 1)]);

    double ce_sum = 0;
    int ce_batches = 0;
    for (size_t start = 0; start < order.size(); start += cfg.teacher_optim.batch) {
      const size_t end = std::min(order.size(), start + cfg.teacher_optim.batch);
      auto bound = bind_params(model.params, true);
      std::vector<ad::Value> logit_rows;
      std::vector<int> labels;
      for (size_t k = start; k < end; ++k) {
        const Sample& sample = samples[order[k]];
        const Scene& scene = ds.train[sample.scene];
        BoundingBox box = sample.box;
        if (isa)
          box = isa_expand_and_crop(box, cfg.aug, scene.width(), scene.height(), crop_rng);
        const ad::Tensor patch =
            crop_patch(scene, box, model.arch.patch_h, model.arch.patch_w);
        auto [emb, logits] = teacher_head(model, bound, patch);
        logit_rows.push_back(ad::reshape(logits, {model.arch.n_classes}));
        labels.push_back(sample.label);
      }
      ad::Value loss = reid_ce(ad::stack_rows(logit_rows), labels);
      const double ce = ad::scalar(loss);
      if (!std::isfinite(ce))
        throw std::runtime_error("train_teacher: loss diverged (non-finite cross-entropy)");
      ce_sum += ce;
      ++ce_batches;
      zero_grads(model.params);
      run_backward(loss, model.params, bound);
      sgd_step(model.params, cfg.teacher_optim.lr, cfg.teacher_optim.momentum,
               cfg.teacher_optim.weight_decay);
    }
    out.epoch_ce.push_back(ce_sum / ce_batches);
  }
  out.final_ce = out.epoch_ce.back();
  return out;
}

// ---------------------------------------------------------------------------
// Student training
// ---------------------------------------------------------------------------

struct RunRecord {
  std::string config_hash;
  std::vector<LossBreakdown> iterations;
  MetricsReport final_metrics;
  bool has_metrics = false;
  double wall_seconds = 0;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["config_hash"] = config_hash;
    j["wall_seconds"] = wall_seconds;
    j["iterations"] = nlohmann::json::array();
    for (const auto& it : iterations)
      j["iterations"].push_back({it.l_det, it.l_reid, it.l_p, it.l_pr, it.l_tr, it.total});
    if (has_metrics) j["final_metrics"] = final_metrics.to_json();
    return j;
  }
};

struct StudentTrainResult {
  StudentModel model;
  RunRecord record = {};
};

inline MetricsReport evaluate_student(const StudentModel& model, const Dataset& ds,
                                      int gallery_size, uint64_t seed) {
  StudentBackend backend(model);
  return evaluate_search(backend, ds.queries, ds.gallery, gallery_size, seed);
}

// Joint training. Ground-truth proposals feed the Re-ID/KD path; the
// detection head trains concurrently on the same images. The teacher is
// consulted forward-only and must be supplied iff a KD flag is set.
inline StudentTrainResult train_student(const Dataset& ds, const TeacherModel* teacher,
                                        const ExperimentConfig& cfg,
                                        bool evaluate_at_end = true) {
  cfg.validate();
  if (cfg.flags.needs_teacher())
    check(teacher != nullptr, "train_student: KD flags set but no teacher given");
  if (teacher) {
    check(teacher->arch.embed_dim == cfg.model.embed_dim,
          "train_student: teacher embedding dimension mismatch");
    check(teacher->arch.n_classes == ds.num_classes(),
          "train_student: teacher class count mismatch");
  }

  const auto t0 = std::chrono::steady_clock::now();
  Rng root(cfg.seed);
  Rng init_rng = root.split(11);
  Rng sample_rng = root.split(12);
  Rng shift_rng = root.split(13);

  StudentTrainResult out{StudentModel::init(student_arch_of(cfg, ds.num_classes()), init_rng)};
  StudentModel& model = out.model;
  out.record.config_hash = config_hash_hex(cfg);

  const int n_train = static_cast<int>(ds.train.size());
  for (int iter = 0; iter < cfg.optim.iterations; ++iter) {
    const bool decayed = iter >= cfg.optim.lr_decay_frac * cfg.optim.iterations;
    const double lr = cfg.optim.lr * (decayed ? cfg.optim.lr_decay_factor : 1.0);

    std::vector<int> scene_ids;
    for (int b = 0; b < cfg.optim.batch_scenes; ++b)
      scene_ids.push_back(sample_rng.uniform_int(0, n_train - 1));

    auto bound = bind_params(model.params, true);
    StudentGraph graph(model, bound);

    std::vector<ad::Value> det_losses;
    std::vector<ad::Value> emb_rows, logit_rows, logit_rows_shifted;
    std::vector<int> labels;
    std::vector<Embedding> teacher_embs;
    std::vector<ProbabilityVector> teacher_probs, teacher_probs_shifted;

    for (int sid : scene_ids) {
      const Scene& scene = ds.train[sid];
      ad::Value fm = graph.trunk(scene.image);
      auto [obj, box_head] = graph.det_head(fm);
      const DetectionTargets targets = detection_targets(scene, model.arch);
      const int cells = obj->val.dim(1) * obj->val.dim(2);
      ad::Value l_obj =
          ad::bce_with_logits_sum(ad::reshape(obj, {cells}), targets.obj, targets.obj_weight);
      ad::Value l_box = ad::smooth_l1_sum(ad::reshape(box_head, {4 * cells}), targets.box,
                                          targets.box_weight);
      det_losses.push_back(ad::add(l_obj, l_box));

      ad::Value rfm = graph.reid_fm(fm);
      for (const auto& gt : scene.boxes) {
        if (!gt.identity) continue;  // distractors train detection only
        labels.push_back(*gt.identity);

        ShiftedProposal unshifted{gt, 0, 0};
        auto head = graph.reid_head(rfm, unshifted);
        emb_rows.push_back(ad::reshape(head.embedding, {model.arch.embed_dim}));
        logit_rows.push_back(ad::reshape(head.logits, {model.arch.n_classes}));

        if (teacher) {
          const ad::Tensor patch =
              crop_patch(scene, gt, teacher->arch.patch_h, teacher->arch.patch_w);
          const TeacherOutput t = teacher_forward(*teacher, patch);
          teacher_embs.push_back(t.embedding);
          teacher_probs.push_back(t.probs);
        }

        if (cfg.flags.use_fsa) {
          // shrink the sampled range so the shifted rectangle stays inside
          // the image for both the pooling window and the teacher crop
          CropRange range = isa_crop_range(gt, cfg.aug);
          range.r_w = std::min({range.r_w, gt.x, scene.width() - gt.right()});
          range.r_h = std::min({range.r_h, gt.y, scene.height() - gt.bottom()});
          range.r_w = std::max(0.0, range.r_w);
          range.r_h = std::max(0.0, range.r_h);
          const ShiftedProposal shifted = fsa_shift(gt, range, cfg.aug, shift_rng);
          auto shifted_head = graph.reid_head(rfm, shifted);
          logit_rows_shifted.push_back(
              ad::reshape(shifted_head.logits, {model.arch.n_classes}));
          if (teacher) {
            const ad::Tensor shifted_patch = crop_patch(
                scene, shifted.shifted(), teacher->arch.patch_h, teacher->arch.patch_w);
            teacher_probs_shifted.push_back(
                teacher_forward(*teacher, shifted_patch).probs);
          }
        }
      }
    }

    ad::Value l_det = det_losses.front();
    for (size_t i = 1; i < det_losses.size(); ++i) l_det = ad::add(l_det, det_losses[i]);
    l_det = ad::scale(l_det, 1.0 / det_losses.size());

    const int batch = static_cast<int>(labels.size());
    ad::Value zero = ad::constant(ad::Tensor::scalar(0.0));
    ad::Value l_reid = zero, l_p = zero, l_pr = zero, l_tr = zero;

    if (batch >= 1) {
      ad::Value logits = ad::stack_rows(logit_rows);
      l_reid = reid_ce(logits, labels);

      if (teacher) {
        ad::Tensor t_emb({batch, model.arch.embed_dim});
        ad::Tensor t_probs({batch, ds.num_classes()});
        for (int i = 0; i < batch; ++i)
          for (int k = 0; k < model.arch.embed_dim; ++k)
            t_emb.at2(i, k) = teacher_embs[i].values[k];
        for (int i = 0; i < batch; ++i)
          for (int k = 0; k < ds.num_classes(); ++k)
            t_probs.at2(i, k) = teacher_probs[i].probs[k];

        if (cfg.flags.use_lp) {
          ad::Value probs = ad::softmax_rows(logits);
          if (cfg.flags.use_fsa) {
            ad::Tensor t_probs_shifted({batch, ds.num_classes()});
            for (int i = 0; i < batch; ++i)
              for (int k = 0; k < ds.num_classes(); ++k)
                t_probs_shifted.at2(i, k) = teacher_probs_shifted[i].probs[k];
            ad::Value probs_shifted = ad::softmax_rows(ad::stack_rows(logit_rows_shifted));
            l_p = prob_kd_fsa(probs, probs_shifted, t_probs, t_probs_shifted);
          } else {
            l_p = prob_kd(probs, t_probs);
          }
        }
        if (batch >= 2) {
          ad::Value emb = ad::stack_rows(emb_rows);
          if (cfg.flags.use_lpr) l_pr = pairwise_relation_kd(emb, t_emb);
          if (cfg.flags.use_ltr)
            l_tr = triplet_relation_kd(emb, t_emb, cfg.loss.margin,
                                       cfg.loss.normalize_embeddings);
        }
      }
    }

    ad::Value total = total_loss_value(l_det, l_reid, l_p, l_pr, l_tr, cfg.loss);
    out.record.iterations.push_back(total_loss(ad::scalar(l_det), ad::scalar(l_reid),
                                               ad::scalar(l_p), ad::scalar(l_pr),
                                               ad::scalar(l_tr), cfg.loss));

    zero_grads(model.params);
    run_backward(total, model.params, bound);
    sgd_step(model.params, lr, cfg.optim.momentum, cfg.optim.weight_decay);
  }

  if (evaluate_at_end) {
    out.record.final_metrics = evaluate_student(
        model, ds, static_cast<int>(ds.gallery.size()), cfg.seed);
    out.record.has_metrics = true;
  }
  out.record.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

// ---------------------------------------------------------------------------
// Ablation sweep
// ---------------------------------------------------------------------------

struct AblationRowSpec {
  std::string name;
  AblationFlags flags;
};

// Flag patterns for the named configurations. Relation rows distill from the
// shifted-crop teacher; probability KD without `use_isa` reads the plain one.
inline const std::vector<AblationRowSpec>& all_rows() {
  static const std::vector<AblationRowSpec> rows = {
      {"ours-0", {false, false, false, false, false}},
      {"ours-1", {true, false, false, false, false}},
      {"ours-2", {true, false, false, true, false}},
      {"ours-3", {true, false, false, true, true}},
      {"ours-4", {false, true, false, true, false}},
      {"ours-5", {false, false, true, true, false}},
      {"ours-6", {false, true, true, true, false}},
      {"ours-7", {true, true, false, true, true}},
      {"ours-8", {true, false, true, true, true}},
      {"ours", {true, true, true, true, true}},
  };
  return rows;
}

inline AblationRowSpec row_by_name(const std::string& name) {
  for (const auto& row : all_rows())
    if (row.name == name) return row;
  throw std::invalid_argument("unknown ablation row: " + name);
}

// The supervision-guidance table sweeps these rows.
inline std::vector<AblationRowSpec> default_ablation_rows() {
  return {row_by_name("ours-0"), row_by_name("ours-4"), row_by_name("ours-5"),
          row_by_name("ours-6"), row_by_name("ours-7"), row_by_name("ours-8"),
          row_by_name("ours")};
}

struct AblationCell {
  uint64_t seed = 0;
  double reid_map = 0;
  double top1 = 0;
};

struct AblationRowResult {
  AblationRowSpec row;
  std::vector<AblationCell> cells;
  double map_mean = 0, map_std = 0;
  double top1_mean = 0, top1_std = 0;
};

struct AblationResult {
  std::vector<AblationRowResult> rows;
  double wall_seconds = 0;
};

// Teacher seed derivation keeps a (seed, variant) teacher shared across rows.
inline uint64_t teacher_seed(uint64_t run_seed, bool isa) {
  return detail::mix64(run_seed * 2 + (isa ? 1 : 0));
}

inline AblationResult run_ablation(const Dataset& ds, const std::vector<AblationRowSpec>& rows,
                                   const std::vector<uint64_t>& seeds,
                                   const ExperimentConfig& base, int jobs) {
  check(!rows.empty() && !seeds.empty(), "run_ablation: need at least one row and one seed");
  jobs = std::max(1, jobs);
  const auto t0 = std::chrono::steady_clock::now();

  // teachers first (shared across rows within a seed)
  std::map<std::pair<uint64_t, bool>, TeacherModel> teachers;
  for (uint64_t seed : seeds)
    for (const auto& row : rows)
      if (row.flags.needs_teacher()) {
        const auto key = std::make_pair(seed, row.flags.use_isa);
        if (!teachers.count(key)) {
          ExperimentConfig cfg = base;
          cfg.seed = seed;
          teachers.emplace(key, train_teacher(ds, row.flags.use_isa, cfg,
                                              teacher_seed(seed, row.flags.use_isa))
                                    .model);
        }
      }

  struct Job {
    int row_index;
    uint64_t seed;
  };
  std::vector<Job> queue;
  for (size_t r = 0; r < rows.size(); ++r)
    for (uint64_t seed : seeds) queue.push_back({static_cast<int>(r), seed});

  std::vector<std::vector<AblationCell>> cells(rows.size());
  std::mutex mu;
  size_t next = 0;
  std::exception_ptr first_error;

  auto worker = [&]() {
    for (;;) {
      size_t index;
      {
        std::lock_guard<std::mutex> lock(mu);
        if (next >= queue.size() || first_error) return;
        index = next++;
      }
      const Job job = queue[index];
      try {
        ExperimentConfig cfg = base;
        cfg.flags = rows[job.row_index].flags;
        cfg.seed = job.seed;
        const TeacherModel* teacher = nullptr;
        if (cfg.flags.needs_teacher())
          teacher = &teachers.at({job.seed, cfg.flags.use_isa});
        StudentTrainResult result = train_student(ds, teacher, cfg);
        AblationCell cell{job.seed, result.record.final_metrics.reid_map,
                          result.record.final_metrics.cmc.at(1)};
        std::lock_guard<std::mutex> lock(mu);
        cells[job.row_index].push_back(cell);
      } catch (...) {
        std::lock_guard<std::mutex> lock(mu);
        if (!first_error) first_error = std::current_exception();
        return;
      }
    }
  };

  std::vector<std::thread> pool;
  for (int t = 0; t < jobs; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);

  AblationResult out;
  for (size_t r = 0; r < rows.size(); ++r) {
    AblationRowResult row{rows[r], cells[r]};
    std::sort(row.cells.begin(), row.cells.end(),
              [](const AblationCell& a, const AblationCell& b) { return a.seed < b.seed; });
    double map_sum = 0, top1_sum = 0;
    for (const auto& c : row.cells) {
      map_sum += c.reid_map;
      top1_sum += c.top1;
    }
    const double n = static_cast<double>(row.cells.size());
    row.map_mean = map_sum / n;
    row.top1_mean = top1_sum / n;
    if (row.cells.size() > 1) {
      double v1 = 0, v2 = 0;
      for (const auto& c : row.cells) {
        v1 += (c.reid_map - row.map_mean) * (c.reid_map - row.map_mean);
        v2 += (c.top1 - row.top1_mean) * (c.top1 - row.top1_mean);
      }
      row.map_std = std::sqrt(v1 / (n - 1));
      row.top1_std = std::sqrt(v2 / (n - 1));
    }
    out.rows.push_back(std::move(row));
  }
  out.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

// Row layout: name, loss-term checkmarks, then mAP and top-1 as mean +/- std.
inline std::string format_ablation_table(const AblationResult& result) {
  std::string out;
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%-8s %-4s %-4s %-4s %-4s %-4s %-18s %-18s\n", "row", "Lpr",
                "Ltr", "Lp", "ISA", "FSA", "mAP", "top-1");
  out += buf;
  for (const auto& row : result.rows) {
    const auto& f = row.row.flags;
    std::snprintf(buf, sizeof(buf), "%-8s %-4s %-4s %-4s %-4s %-4s %.4f +/- %.4f  %.4f +/- %.4f\n",
                  row.row.name.c_str(), f.use_lpr ? "x" : "-", f.use_ltr ? "x" : "-",
                  f.use_lp ? "x" : "-", f.use_isa ? "x" : "-", f.use_fsa ? "x" : "-",
                  row.map_mean, row.map_std, row.top1_mean, row.top1_std);
    out += buf;
  }
  return out;
}

}  // namespace pskd
