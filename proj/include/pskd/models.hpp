// SPDX-License-Identifier: Apache-2.0
//
// Miniature differentiable networks.
//
// The student is a shared stride-S convolutional trunk with two task heads
// that share no parameters beyond the trunk: a per-cell detection head
// (objectness logit + 4 box deltas) and a Re-ID head (RoI pooling followed
// by a linear projection, a learned per-sample standardization, and an
// identity classifier). The teacher is an independent patch classifier with
// the same embedding interface; it is never part of a gradient graph.

#pragma once

#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "pskd/autodiff.hpp"
#include "pskd/core.hpp"
#include "pskd/data.hpp"
#include "pskd/spatial.hpp"

namespace pskd {

struct Param {
  std::string name;
  ad::Tensor value;
  ad::Tensor grad;
  ad::Tensor momentum;
};

// Standard SGD with momentum: v <- mu*v + (g + wd*p); p <- p - lr*v.
// Momentum buffers persist across steps.
inline void sgd_step(std::vector<Param>& params, double lr, double momentum,
                     double weight_decay) {
  for (auto& p : params) {
    check(p.grad.shape == p.value.shape, "sgd_step: gradient shape mismatch for " + p.name);
    if (p.momentum.shape != p.value.shape) p.momentum = ad::Tensor(p.value.shape);
    for (int i = 0; i < p.value.numel(); ++i) {
      const double g = p.grad.data[i] + weight_decay * p.value.data[i];
      p.momentum.data[i] = momentum * p.momentum.data[i] + g;
      p.value.data[i] -= lr * p.momentum.data[i];
    }
  }
}

inline void zero_grads(std::vector<Param>& params) {
  for (auto& p : params) {
    p.grad.shape = p.value.shape;
    p.grad.data.assign(p.value.data.size(), 0.0);
  }
}

namespace detail {

inline ad::Tensor he_init(std::vector<int> shape, Rng& rng, double gain = 2.0) {
  ad::Tensor t(shape);
  int fan_in = 1;
  for (size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
  const double std = std::sqrt(gain / fan_in);
  for (double& v : t.data) v = rng.normal() * std;
  return t;
}

// Small random bias init keeps ReLU pre-activations off exact zero, so
// finite-difference probes never straddle the kink.
inline ad::Tensor bias_init(int n, Rng& rng) {
  ad::Tensor t({n});
  for (double& v : t.data) v = rng.normal() * 0.01;
  return t;
}

inline int log2_exact(int v) {
  int n = 0;
  while ((1 << n) < v) ++n;
  check((1 << n) == v, "stride must be a power of two");
  return n;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Student
// ---------------------------------------------------------------------------

struct StudentArch {
  int c1 = 6;
  int c2 = 12;
  int det_ch = 8;
  int reid_ch = 12;
  int embed_dim = 32;
  int n_classes = 0;
  int stride = 4;  // total trunk downsampling, power of two (blocks of stride 2)
  int roi_h = 4;
  int roi_w = 2;
  double base_w = 20.0;  // box-size priors for delta encoding
  double base_h = 36.0;

  int n_blocks() const { return detail::log2_exact(stride); }
};

class StudentModel {
 public:
  StudentArch arch;
  std::vector<Param> params;

  static StudentModel init(const StudentArch& arch, Rng& rng) {
    check(arch.n_classes >= 1, "StudentModel: need at least one class");
    StudentModel m;
    m.arch = arch;
    auto add = [&](const std::string& name, ad::Tensor t) {
      m.params.push_back({name, std::move(t), {}, {}});
    };
    int in_ch = 3;
    for (int b = 0; b < arch.n_blocks(); ++b) {
      const int out_ch = b == 0 ? arch.c1 : arch.c2;
      add("trunk.conv" + std::to_string(b) + ".w", detail::he_init({out_ch, in_ch, 3, 3}, rng));
      add("trunk.conv" + std::to_string(b) + ".b", detail::bias_init(out_ch, rng));
      in_ch = out_ch;
    }
    add("det.conv.w", detail::he_init({arch.det_ch, arch.c2, 3, 3}, rng));
    add("det.conv.b", detail::bias_init(arch.det_ch, rng));
    add("det.obj.w", detail::he_init({1, arch.det_ch, 1, 1}, rng, 1.0));
    add("det.obj.b", detail::bias_init(1, rng));
    add("det.box.w", detail::he_init({4, arch.det_ch, 1, 1}, rng, 1.0));
    add("det.box.b", detail::bias_init(4, rng));
    add("reid.conv.w", detail::he_init({arch.reid_ch, arch.c2, 1, 1}, rng));
    add("reid.conv.b", detail::bias_init(arch.reid_ch, rng));
    add("reid.fc.w",
        detail::he_init({arch.embed_dim, arch.reid_ch * arch.roi_h * arch.roi_w}, rng, 1.0));
    add("reid.fc.b", detail::bias_init(arch.embed_dim, rng));
    add("reid.norm.gamma", ad::Tensor({arch.embed_dim}, 1.0));
    add("reid.norm.beta", ad::Tensor({arch.embed_dim}));
    add("reid.cls.w", detail::he_init({arch.n_classes, arch.embed_dim}, rng, 1.0));
    add("reid.cls.b", detail::bias_init(arch.n_classes, rng));
    return m;
  }

  int index_of(const std::string& name) const {
    for (size_t i = 0; i < params.size(); ++i)
      if (params[i].name == name) return static_cast<int>(i);
    throw std::invalid_argument("StudentModel: unknown parameter " + name);
  }
};

inline std::vector<ad::Value> bind_params(std::vector<Param>& params, bool requires_grad) {
  std::vector<ad::Value> out;
  out.reserve(params.size());
  for (auto& p : params) out.push_back(ad::leaf(p.value, requires_grad, p.name));
  return out;
}

// Read-only binding for frozen models (values copied into constant leaves).
inline std::vector<ad::Value> bind_params_const(const std::vector<Param>& params) {
  std::vector<ad::Value> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back(ad::leaf(p.value, false, p.name));
  return out;
}

// Per-forward graph over one scene image. Binds the parameter leaves once;
// trunk/head outputs are built lazily and cached.
class StudentGraph {
 public:
  StudentGraph(StudentModel& model, const std::vector<ad::Value>& bound)
      : model_(&model), bound_(&bound) {}

  ad::Value trunk(const ad::Tensor& image) {
    const auto& arch = model_->arch;
    check(image.shape.size() == 3 && image.dim(0) == 3, "student: image must be {3,H,W}");
    check(image.dim(1) % arch.stride == 0 && image.dim(2) % arch.stride == 0,
          "student: image dimensions must be divisible by the trunk stride");
    ad::Value x = ad::constant(image);
    for (int b = 0; b < arch.n_blocks(); ++b) {
      x = ad::relu(ad::conv2d(x, p("trunk.conv" + std::to_string(b) + ".w"),
                              p("trunk.conv" + std::to_string(b) + ".b"), 2, 1));
    }
    return x;
  }

  // Detection head outputs: objectness logits {1,gh,gw} and deltas {4,gh,gw}.
  std::pair<ad::Value, ad::Value> det_head(const ad::Value& fm) {
    ad::Value hidden = ad::relu(ad::conv2d(fm, p("det.conv.w"), p("det.conv.b"), 1, 1));
    return {ad::conv2d(hidden, p("det.obj.w"), p("det.obj.b"), 1, 0),
            ad::conv2d(hidden, p("det.box.w"), p("det.box.b"), 1, 0)};
  }

  ad::Value reid_fm(const ad::Value& fm) {
    return ad::relu(ad::conv2d(fm, p("reid.conv.w"), p("reid.conv.b"), 1, 0));
  }

  struct ReidOut {
    ad::Value pre_norm;   // {1,d} projection before standardization
    ad::Value embedding;  // {1,d}
    ad::Value logits;     // {1,C}
  };

  ReidOut reid_head(const ad::Value& reid_fm, const ShiftedProposal& proposal) {
    const auto& arch = model_->arch;
    ad::Value pooled = roi_align(reid_fm, arch.stride, proposal, arch.roi_h, arch.roi_w);
    ad::Value flat = ad::reshape(pooled, {1, arch.reid_ch * arch.roi_h * arch.roi_w});
    ReidOut out;
    out.pre_norm = ad::linear_rows(flat, p("reid.fc.w"), p("reid.fc.b"));
    out.embedding =
        ad::layer_standardize_rows(out.pre_norm, p("reid.norm.gamma"), p("reid.norm.beta"));
    out.logits = ad::linear_rows(out.embedding, p("reid.cls.w"), p("reid.cls.b"));
    return out;
  }

 private:
  const ad::Value& p(const std::string& name) { return (*bound_)[model_->index_of(name)]; }

  StudentModel* model_;
  const std::vector<ad::Value>* bound_;
};

// ---------------------------------------------------------------------------
// Teacher
// ---------------------------------------------------------------------------

struct TeacherArch {
  int t1 = 8;
  int t2 = 16;
  int embed_dim = 32;
  int n_classes = 0;
  int patch_h = 32;
  int patch_w = 16;
  int pool_h = 2;  // vertical halves keep the top/bottom color layout
  int pool_w = 1;
};

class TeacherModel {
 public:
  TeacherArch arch;
  std::vector<Param> params;

  static TeacherModel init(const TeacherArch& arch, Rng& rng) {
    check(arch.n_classes >= 1, "TeacherModel: need at least one class");
    TeacherModel m;
    m.arch = arch;
    auto add = [&](const std::string& name, ad::Tensor t) {
      m.params.push_back({name, std::move(t), {}, {}});
    };
    add("conv0.w", detail::he_init({arch.t1, 3, 3, 3}, rng));
    add("conv0.b", detail::bias_init(arch.t1, rng));
    add("conv1.w", detail::he_init({arch.t2, arch.t1, 3, 3}, rng));
    add("conv1.b", detail::bias_init(arch.t2, rng));
    add("fc.w", detail::he_init({arch.embed_dim, arch.t2 * arch.pool_h * arch.pool_w}, rng, 1.0));
    add("fc.b", detail::bias_init(arch.embed_dim, rng));
    add("norm.gamma", ad::Tensor({arch.embed_dim}, 1.0));
    add("norm.beta", ad::Tensor({arch.embed_dim}));
    add("cls.w", detail::he_init({arch.n_classes, arch.embed_dim}, rng, 1.0));
    add("cls.b", detail::bias_init(arch.n_classes, rng));
    return m;
  }

  int index_of(const std::string& name) const {
    for (size_t i = 0; i < params.size(); ++i)
      if (params[i].name == name) return static_cast<int>(i);
    throw std::invalid_argument("TeacherModel: unknown parameter " + name);
  }
};

// Embedding and logits for one patch, as graph nodes over bound parameters.
inline std::pair<ad::Value, ad::Value> teacher_head(const TeacherModel& model,
                                                    const std::vector<ad::Value>& bound,
                                                    const ad::Tensor& patch) {
  const auto& arch = model.arch;
  check(patch.shape.size() == 3 && patch.dim(0) == 3 && patch.dim(1) == arch.patch_h &&
            patch.dim(2) == arch.patch_w,
        "teacher: patch must be {3,patch_h,patch_w}");
  auto p = [&](const std::string& name) -> const ad::Value& {
    return bound[model.index_of(name)];
  };
  ad::Value x = ad::constant(patch);
  x = ad::relu(ad::conv2d(x, p("conv0.w"), p("conv0.b"), 2, 1));
  x = ad::relu(ad::conv2d(x, p("conv1.w"), p("conv1.b"), 2, 1));
  x = ad::avg_pool_grid(x, arch.pool_h, arch.pool_w);
  x = ad::reshape(x, {1, arch.t2 * arch.pool_h * arch.pool_w});
  ad::Value pre = ad::linear_rows(x, p("fc.w"), p("fc.b"));
  ad::Value emb = ad::layer_standardize_rows(pre, p("norm.gamma"), p("norm.beta"));
  ad::Value logits = ad::linear_rows(emb, p("cls.w"), p("cls.b"));
  return {emb, logits};
}

struct TeacherOutput {
  Embedding embedding;
  ProbabilityVector probs;
};

// Frozen inference: no gradients can flow to or from the teacher.
inline TeacherOutput teacher_forward(const TeacherModel& model, const ad::Tensor& patch) {
  auto bound = bind_params_const(model.params);
  auto [emb, logits] = teacher_head(model, bound, patch);
  TeacherOutput out;
  out.embedding.values = emb->val.data;
  ad::Value probs = ad::softmax_rows(logits);
  out.probs.probs = probs->val.data;
  return out;
}

// ---------------------------------------------------------------------------
// Student inference wrappers
// ---------------------------------------------------------------------------

struct StudentForwardResult {
  ad::Tensor objectness;  // {1,gh,gw} logits
  ad::Tensor box_deltas;  // {4,gh,gw}
  std::vector<Embedding> embeddings;
  std::vector<ProbabilityVector> probs;
  std::vector<Embedding> embeddings_shifted;
  std::vector<ProbabilityVector> probs_shifted;
  std::vector<int> failed_proposals;  // indices that fell outside the map
};

// Full forward pass without gradients: detection outputs over the grid plus,
// for each proposal, Re-ID outputs from the base box and from its shifted
// counterpart. Out-of-bounds proposals are reported and skipped; the batch
// continues.
inline StudentForwardResult student_forward(StudentModel& model, const ad::Tensor& image,
                                            const std::vector<ShiftedProposal>& proposals) {
  auto bound = bind_params(model.params, false);
  StudentGraph graph(model, bound);
  ad::Value fm = graph.trunk(image);
  auto [obj, box] = graph.det_head(fm);
  ad::Value rfm = graph.reid_fm(fm);

  StudentForwardResult out;
  out.objectness = obj->val;
  out.box_deltas = box->val;
  for (size_t i = 0; i < proposals.size(); ++i) {
    try {
      ShiftedProposal base = proposals[i];
      base.dx = 0;
      base.dy = 0;
      auto plain = graph.reid_head(rfm, base);
      auto shifted = graph.reid_head(rfm, proposals[i]);
      out.embeddings.push_back(Embedding{plain.embedding->val.data});
      out.probs.push_back(ProbabilityVector{ad::softmax_rows(plain.logits)->val.data});
      out.embeddings_shifted.push_back(Embedding{shifted.embedding->val.data});
      out.probs_shifted.push_back(
          ProbabilityVector{ad::softmax_rows(shifted.logits)->val.data});
    } catch (const std::invalid_argument&) {
      out.failed_proposals.push_back(static_cast<int>(i));
    }
  }
  return out;
}

// Cached per-scene features for evaluation-time embedding extraction.
struct SceneFeatures {
  ad::Tensor reid_fm;
  ad::Tensor objectness;
  ad::Tensor box_deltas;
  int stride = 1;
};

inline SceneFeatures student_scene_features(StudentModel& model, const ad::Tensor& image) {
  auto bound = bind_params(model.params, false);
  StudentGraph graph(model, bound);
  ad::Value fm = graph.trunk(image);
  auto [obj, box] = graph.det_head(fm);
  SceneFeatures f;
  f.reid_fm = graph.reid_fm(fm)->val;
  f.objectness = obj->val;
  f.box_deltas = box->val;
  f.stride = model.arch.stride;
  return f;
}

inline Embedding student_embed(StudentModel& model, const SceneFeatures& features,
                               const BoundingBox& box) {
  auto bound = bind_params(model.params, false);
  StudentGraph graph(model, bound);
  auto head = graph.reid_head(ad::constant(features.reid_fm), ShiftedProposal{box, 0, 0});
  return Embedding{head.embedding->val.data};
}

// ---------------------------------------------------------------------------
// Detection targets and decoding
// ---------------------------------------------------------------------------

struct DetectionTargets {
  ad::Tensor obj;         // {gh*gw} 0/1
  ad::Tensor obj_weight;  // positive and negative cells each average to 1/2
  ad::Tensor box;         // {4*gh*gw} deltas
  ad::Tensor box_weight;  // 1/(4*n_pos) at positive cells
  int n_pos = 0;
};

// One positive cell per ground-truth box (the cell containing its center).
inline DetectionTargets detection_targets(const Scene& scene, const StudentArch& arch) {
  const int gh = scene.height() / arch.stride;
  const int gw = scene.width() / arch.stride;
  DetectionTargets t;
  t.obj = ad::Tensor({gh * gw});
  t.obj_weight = ad::Tensor({gh * gw});
  t.box = ad::Tensor({4 * gh * gw});
  t.box_weight = ad::Tensor({4 * gh * gw});

  const double s = arch.stride;
  for (const auto& box : scene.boxes) {
    const int gx = std::clamp(static_cast<int>(box.cx() / s), 0, gw - 1);
    const int gy = std::clamp(static_cast<int>(box.cy() / s), 0, gh - 1);
    const int cell = gy * gw + gx;
    if (t.obj.data[cell] == 1.0) continue;  // a competing center already owns the cell
    t.obj.data[cell] = 1.0;
    ++t.n_pos;
    const double tx = (box.cx() - (gx + 0.5) * s) / s;
    const double ty = (box.cy() - (gy + 0.5) * s) / s;
    t.box.data[0 * gh * gw + cell] = tx;
    t.box.data[1 * gh * gw + cell] = ty;
    t.box.data[2 * gh * gw + cell] = std::log(box.w / arch.base_w);
    t.box.data[3 * gh * gw + cell] = std::log(box.h / arch.base_h);
  }

  const int n_neg = gh * gw - t.n_pos;
  for (int i = 0; i < gh * gw; ++i) {
    if (t.obj.data[i] == 1.0) {
      t.obj_weight.data[i] = 0.5 / t.n_pos;
      for (int k = 0; k < 4; ++k) t.box_weight.data[k * gh * gw + i] = 1.0 / (4.0 * t.n_pos);
    } else if (n_neg > 0) {
      t.obj_weight.data[i] = 0.5 / n_neg;
    }
  }
  return t;
}

struct ScoredBox {
  BoundingBox box;
  double score = 0;
};

struct DetectConfig {
  double score_thresh = 0.25;
  double nms_iou = 0.5;
  int max_detections = 10;
};

// Decode per-cell predictions and apply greedy IoU suppression.
inline std::vector<ScoredBox> decode_detections(const SceneFeatures& features,
                                                const StudentArch& arch, int image_w,
                                                int image_h, const DetectConfig& cfg = {}) {
  const int gh = features.objectness.dim(1), gw = features.objectness.dim(2);
  const double s = arch.stride;
  std::vector<ScoredBox> cands;
  for (int gy = 0; gy < gh; ++gy)
    for (int gx = 0; gx < gw; ++gx) {
      const double logit = features.objectness.at3(0, gy, gx);
      const double score = 1.0 / (1.0 + std::exp(-logit));
      if (score < cfg.score_thresh) continue;
      const double tx = features.box_deltas.at3(0, gy, gx);
      const double ty = features.box_deltas.at3(1, gy, gx);
      const double tw = std::clamp(features.box_deltas.at3(2, gy, gx), -2.0, 2.0);
      const double th = std::clamp(features.box_deltas.at3(3, gy, gx), -2.0, 2.0);
      const double cx = (gx + 0.5) * s + tx * s;
      const double cy = (gy + 0.5) * s + ty * s;
      const double w = arch.base_w * std::exp(tw);
      const double h = arch.base_h * std::exp(th);
      BoundingBox box{cx - w / 2, cy - h / 2, w, h};
      box.x = std::clamp(box.x, 0.0, static_cast<double>(image_w) - 2.0);
      box.y = std::clamp(box.y, 0.0, static_cast<double>(image_h) - 2.0);
      box.w = std::min(box.w, image_w - box.x);
      box.h = std::min(box.h, image_h - box.y);
      if (box.w < 2 || box.h < 2) continue;
      cands.push_back({box, score});
    }
  std::sort(cands.begin(), cands.end(), [](const ScoredBox& a, const ScoredBox& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.box.x != b.box.x) return a.box.x < b.box.x;
    return a.box.y < b.box.y;
  });
  std::vector<ScoredBox> kept;
  for (const auto& cand : cands) {
    bool suppressed = false;
    for (const auto& k : kept)
      if (iou(cand.box, k.box) >= cfg.nms_iou) suppressed = true;
    if (!suppressed) kept.push_back(cand);
    if (static_cast<int>(kept.size()) >= cfg.max_detections) break;
  }
  return kept;
}

// ---------------------------------------------------------------------------
// Gradient extraction
// ---------------------------------------------------------------------------

// Reverse pass plus copy-out of parameter gradients, accumulating into
// Param::grad. Throws (naming the parameter) if any gradient is non-finite.
inline void run_backward(const ad::Value& loss, std::vector<Param>& params,
                         const std::vector<ad::Value>& bound) {
  check(bound.size() == params.size(), "run_backward: bound/param mismatch");
  ad::backward(loss);
  for (size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (p.grad.shape != p.value.shape) {
      p.grad.shape = p.value.shape;
      p.grad.data.assign(p.value.data.size(), 0.0);
    }
    if (bound[i]->grad.data.size() == p.value.data.size()) {
      for (int k = 0; k < p.value.numel(); ++k) {
        const double g = bound[i]->grad.data[k];
        if (!std::isfinite(g))
          throw std::runtime_error("run_backward: non-finite gradient in " + p.name);
        p.grad.data[k] += g;
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Checkpoints: magic, version, JSON topology, raw little-endian doubles.
// ---------------------------------------------------------------------------

struct Checkpoint {
  std::string kind;  // "student" | "teacher"
  nlohmann::json arch;
  std::vector<std::pair<std::string, ad::Tensor>> tensors;
};

namespace detail {

constexpr char kCkptMagic[8] = {'P', 'S', 'K', 'D', 'C', 'K', 'P', '1'};

inline void write_u32(std::ofstream& f, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 24)};
  f.write(reinterpret_cast<const char*>(b), 4);
}

inline uint32_t read_u32(std::ifstream& f) {
  unsigned char b[4];
  f.read(reinterpret_cast<char*>(b), 4);
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

inline void write_doubles_le(std::ofstream& f, const std::vector<double>& values) {
  for (double v : values) {
    uint64_t bits;
    std::memcpy(&bits, &v, 8);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(bits >> (8 * i));
    f.write(reinterpret_cast<const char*>(b), 8);
  }
}

inline void read_doubles_le(std::ifstream& f, std::vector<double>& values) {
  for (double& v : values) {
    unsigned char b[8];
    f.read(reinterpret_cast<char*>(b), 8);
    uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<uint64_t>(b[i]) << (8 * i);
    std::memcpy(&v, &bits, 8);
  }
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream f(path, std::ios::binary);
  check(f.good(), "save_checkpoint: cannot open " + path);
  f.write(detail::kCkptMagic, 8);
  detail::write_u32(f, 1);  // format version
  nlohmann::json topo;
  topo["kind"] = ckpt.kind;
  topo["arch"] = ckpt.arch;
  topo["params"] = nlohmann::json::array();
  for (const auto& [name, tensor] : ckpt.tensors)
    topo["params"].push_back({{"name", name}, {"shape", tensor.shape}});
  const std::string blob = topo.dump();
  detail::write_u32(f, static_cast<uint32_t>(blob.size()));
  f.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  for (const auto& [name, tensor] : ckpt.tensors) detail::write_doubles_le(f, tensor.data);
  check(f.good(), "save_checkpoint: write failed for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  check(f.good(), "load_checkpoint: cannot open " + path);
  char magic[8];
  f.read(magic, 8);
  check(std::memcmp(magic, detail::kCkptMagic, 8) == 0, "load_checkpoint: bad magic");
  check(detail::read_u32(f) == 1, "load_checkpoint: unsupported version");
  const uint32_t len = detail::read_u32(f);
  std::string blob(len, '\0');
  f.read(blob.data(), len);
  nlohmann::json topo = nlohmann::json::parse(blob);
  Checkpoint ckpt;
  ckpt.kind = topo.at("kind");
  ckpt.arch = topo.at("arch");
  for (const auto& p : topo.at("params")) {
    ad::Tensor t(p.at("shape").get<std::vector<int>>());
    detail::read_doubles_le(f, t.data);
    ckpt.tensors.push_back({p.at("name"), std::move(t)});
  }
  check(f.good(), "load_checkpoint: truncated file " + path);
  return ckpt;
}

inline nlohmann::json student_arch_json(const StudentArch& a) {
  return {{"c1", a.c1},         {"c2", a.c2},           {"det_ch", a.det_ch},
          {"reid_ch", a.reid_ch}, {"embed_dim", a.embed_dim}, {"n_classes", a.n_classes},
          {"stride", a.stride},  {"roi_h", a.roi_h},     {"roi_w", a.roi_w},
          {"base_w", a.base_w},  {"base_h", a.base_h}};
}

inline StudentArch student_arch_from_json(const nlohmann::json& j) {
  StudentArch a;
  a.c1 = j.at("c1");
  a.c2 = j.at("c2");
  a.det_ch = j.at("det_ch");
  a.reid_ch = j.at("reid_ch");
  a.embed_dim = j.at("embed_dim");
  a.n_classes = j.at("n_classes");
  a.stride = j.at("stride");
  a.roi_h = j.at("roi_h");
  a.roi_w = j.at("roi_w");
  a.base_w = j.at("base_w");
  a.base_h = j.at("base_h");
  return a;
}

inline nlohmann::json teacher_arch_json(const TeacherArch& a) {
  return {{"t1", a.t1},           {"t2", a.t2},           {"embed_dim", a.embed_dim},
          {"n_classes", a.n_classes}, {"patch_h", a.patch_h}, {"patch_w", a.patch_w},
          {"pool_h", a.pool_h},   {"pool_w", a.pool_w}};
}

inline TeacherArch teacher_arch_from_json(const nlohmann::json& j) {
  TeacherArch a;
  a.t1 = j.at("t1");
  a.t2 = j.at("t2");
  a.embed_dim = j.at("embed_dim");
  a.n_classes = j.at("n_classes");
  a.patch_h = j.at("patch_h");
  a.patch_w = j.at("patch_w");
  a.pool_h = j.at("pool_h");
  a.pool_w = j.at("pool_w");
  return a;
}

inline Checkpoint to_checkpoint(const StudentModel& m) {
  Checkpoint c;
  c.kind = "student";
  c.arch = student_arch_json(m.arch);
  for (const auto& p : m.params) c.tensors.push_back({p.name, p.value});
  return c;
}

inline Checkpoint to_checkpoint(const TeacherModel& m) {
  Checkpoint c;
  c.kind = "teacher";
  c.arch = teacher_arch_json(m.arch);
  for (const auto& p : m.params) c.tensors.push_back({p.name, p.value});
  return c;
}

inline StudentModel student_from_checkpoint(const Checkpoint& c) {
  check(c.kind == "student", "checkpoint: expected a student checkpoint, got " + c.kind);
  Rng rng(0);
  StudentModel m = StudentModel::init(student_arch_from_json(c.arch), rng);
  check(c.tensors.size() == m.params.size(), "checkpoint: parameter count mismatch");
  for (size_t i = 0; i < m.params.size(); ++i) {
    check(c.tensors[i].first == m.params[i].name && c.tensors[i].second.shape ==
              m.params[i].value.shape,
          "checkpoint: topology mismatch at " + m.params[i].name);
    m.params[i].value = c.tensors[i].second;
  }
  return m;
}

inline TeacherModel teacher_from_checkpoint(const Checkpoint& c) {
  check(c.kind == "teacher", "checkpoint: expected a teacher checkpoint, got " + c.kind);
  Rng rng(0);
  TeacherModel m = TeacherModel::init(teacher_arch_from_json(c.arch), rng);
  check(c.tensors.size() == m.params.size(), "checkpoint: parameter count mismatch");
  for (size_t i = 0; i < m.params.size(); ++i) {
    check(c.tensors[i].first == m.params[i].name && c.tensors[i].second.shape ==
              m.params[i].value.shape,
          "checkpoint: topology mismatch at " + m.params[i].name);
    m.params[i].value = c.tensors[i].second;
  }
  return m;
}

}  // namespace pskd
