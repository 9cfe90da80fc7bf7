// SPDX-License-Identifier: Apache-2.0
//
// Spatial-invariant augmentation geometry.
//
// Image level: ground-truth boxes are expanded and re-cropped at a random
// offset bounded by a size-adaptive range, so the patch model learns to
// tolerate loose boxes. Feature level: the RoI pooling window is shifted by
// the same range divided by the feature stride, and the equivalent
// image-space shift is recorded so the patch model can crop the matching
// rectangle from the raw image.

#pragma once

#include <cmath>
#include <utility>

#include "pskd/autodiff.hpp"
#include "pskd/core.hpp"

namespace pskd {

// Maximum crop offsets, per axis, for one ground-truth box.
struct CropRange {
  double r_w = 0;
  double r_h = 0;
};

// A pooling window: base box in image pixels plus an image-space shift.
struct ShiftedProposal {
  BoundingBox base;
  double dx = 0;
  double dy = 0;

  BoundingBox shifted() const {
    BoundingBox b = base;
    b.x += dx;
    b.y += dy;
    return b;
  }
};

// Carrier for a trunk feature map with its pixels-per-cell stride.
struct FeatureMap {
  ad::Tensor tensor;  // {C,H,W}
  int stride = 1;
};

// r = min(2 * size * delta_p / patch_size, alpha), per axis. The min keeps
// crops of large boxes from drifting far from the ground truth.
inline CropRange isa_crop_range(const BoundingBox& box, const AugConfig& cfg) {
  box.validate();
  cfg.validate();
  CropRange r;
  r.r_h = std::min(2.0 * box.h * cfg.delta_p / cfg.patch_h, cfg.alpha);
  r.r_w = std::min(2.0 * box.w * cfg.delta_p / cfg.patch_w, cfg.alpha);
  return r;
}

// Expand the ground-truth box by alpha (same centroid), then take a random
// crop of the original size whose offset is uniform in [-r_w, r_w] x
// [-r_h, r_h]. The crop keeps (w, h); clipping clamps the position so the
// box stays inside the image. A box that cannot fit at all is returned
// unchanged and counted.
inline BoundingBox isa_expand_and_crop(const BoundingBox& box, const AugConfig& cfg,
                                       double image_w, double image_h, Rng& rng,
                                       int* oversize_count = nullptr) {
  const CropRange r = isa_crop_range(box, cfg);
  const double dx = rng.uniform(-r.r_w, r.r_w);
  const double dy = rng.uniform(-r.r_h, r.r_h);
  if (box.w > image_w || box.h > image_h) {
    if (oversize_count) ++*oversize_count;
    return box;
  }
  BoundingBox out = box;
  out.x = std::clamp(box.x + dx, 0.0, image_w - box.w);
  out.y = std::clamp(box.y + dy, 0.0, image_h - box.h);
  return out;
}

// Sample a feature-space shift uniform in [-r_w/S, r_w/S] x [-r_h/S, r_h/S]
// and record the equivalent image-space shift (dx, dy) = feature shift * S.
// The same (dx, dy) crops the teacher patch from the raw image.
inline ShiftedProposal fsa_shift(const BoundingBox& box, const CropRange& range,
                                 const AugConfig& cfg, Rng& rng) {
  box.validate();
  cfg.validate();
  const double s = static_cast<double>(cfg.stride);
  const double fx = rng.uniform(-range.r_w / s, range.r_w / s);
  const double fy = rng.uniform(-range.r_h / s, range.r_h / s);
  ShiftedProposal p;
  p.base = box;
  p.dx = fx * s;
  p.dy = fy * s;
  return p;
}

namespace detail {

// Bilinear read with grid points at integer coordinates; neighbors outside
// the grid contribute 0.
inline double bilinear_or_zero(const ad::Tensor& fm, int c, double y, double x) {
  const int h = fm.dim(1), w = fm.dim(2);
  const int x0 = static_cast<int>(std::floor(x));
  const int y0 = static_cast<int>(std::floor(y));
  const double ax = x - x0, ay = y - y0;
  double v = 0;
  for (int jy = 0; jy <= 1; ++jy)
    for (int jx = 0; jx <= 1; ++jx) {
      const int yy = y0 + jy, xx = x0 + jx;
      const double wgt = (jx ? ax : 1 - ax) * (jy ? ay : 1 - ay);
      if (wgt == 0 || yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
      v += wgt * fm.at3(c, yy, xx);
    }
  return v;
}

struct RoiWindow {
  double x0, y0, x1, y1;  // feature coordinates
};

inline RoiWindow roi_window(const ShiftedProposal& proposal, int stride, int fm_h, int fm_w) {
  const BoundingBox b = proposal.shifted();
  const double s = static_cast<double>(stride);
  RoiWindow win{b.x / s, b.y / s, (b.x + b.w) / s, (b.y + b.h) / s};
  check(win.x1 > win.x0 && win.y1 > win.y0, "roi_align: window must have positive extent");
  check(win.x1 > 0 && win.x0 < fm_w && win.y1 > 0 && win.y0 < fm_h,
        "roi_align: proposal lies fully outside the feature map");
  return win;
}

inline std::pair<double, double> roi_sample_center(const RoiWindow& w, int out_h, int out_w,
                                                   int iy, int ix) {
  const double cy = w.y0 + (iy + 0.5) * (w.y1 - w.y0) / out_h;
  const double cx = w.x0 + (ix + 0.5) * (w.x1 - w.x0) / out_w;
  return {cy, cx};
}

}  // namespace detail

// RoIAlign with one bilinear sample per output cell, taken at the cell
// center in continuous (non-quantized) feature coordinates. Exact on linear
// fields.
inline ad::Tensor roi_align(const FeatureMap& fm, const ShiftedProposal& proposal,
                            int out_h, int out_w) {
  check(out_h >= 1 && out_w >= 1, "roi_align: output grid must be positive");
  const int c = fm.tensor.dim(0);
  const auto win = detail::roi_window(proposal, fm.stride, fm.tensor.dim(1), fm.tensor.dim(2));
  ad::Tensor out({c, out_h, out_w});
  for (int ch = 0; ch < c; ++ch)
    for (int iy = 0; iy < out_h; ++iy)
      for (int ix = 0; ix < out_w; ++ix) {
        const auto [cy, cx] = detail::roi_sample_center(win, out_h, out_w, iy, ix);
        out.at3(ch, iy, ix) = detail::bilinear_or_zero(fm.tensor, ch, cy, cx);
      }
  return out;
}

// Differentiable RoIAlign over a feature-map node.
inline ad::Value roi_align(const ad::Value& fm, int stride, const ShiftedProposal& proposal,
                           int out_h, int out_w) {
  check(out_h >= 1 && out_w >= 1, "roi_align: output grid must be positive");
  check(fm->val.shape.size() == 3, "roi_align: feature map must be {C,H,W}");
  const int c = fm->val.dim(0), h = fm->val.dim(1), w = fm->val.dim(2);
  const auto win = detail::roi_window(proposal, stride, h, w);
  ad::Tensor out({c, out_h, out_w});
  for (int ch = 0; ch < c; ++ch)
    for (int iy = 0; iy < out_h; ++iy)
      for (int ix = 0; ix < out_w; ++ix) {
        const auto [cy, cx] = detail::roi_sample_center(win, out_h, out_w, iy, ix);
        out.at3(ch, iy, ix) = detail::bilinear_or_zero(fm->val, ch, cy, cx);
      }
  return ad::make_op({fm}, std::move(out), [c, h, w, out_h, out_w, win](ad::Node& n) {
    ad::Node* fm = n.parents[0].get();
    for (int ch = 0; ch < c; ++ch)
      for (int iy = 0; iy < out_h; ++iy)
        for (int ix = 0; ix < out_w; ++ix) {
          const double g = n.grad.at3(ch, iy, ix);
          if (g == 0) continue;
          const auto [cy, cx] = detail::roi_sample_center(win, out_h, out_w, iy, ix);
          const int x0 = static_cast<int>(std::floor(cx));
          const int y0 = static_cast<int>(std::floor(cy));
          const double ax = cx - x0, ay = cy - y0;
          for (int jy = 0; jy <= 1; ++jy)
            for (int jx = 0; jx <= 1; ++jx) {
              const int yy = y0 + jy, xx = x0 + jx;
              const double wgt = (jx ? ax : 1 - ax) * (jy ? ay : 1 - ay);
              if (wgt == 0 || yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
              fm->grad.at3(ch, yy, xx) += g * wgt;
            }
        }
  });
}

}  // namespace pskd
