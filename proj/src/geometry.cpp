#include "attbalance/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace attbalance {

CornerBox to_corners(const BoxSpec& b) {
  return {b.cx - b.w / 2.0, b.cy - b.h / 2.0, b.cx + b.w / 2.0, b.cy + b.h / 2.0};
}

BoxSpec from_corners(const CornerBox& c) {
  return {(c.x1 + c.x2) / 2.0, (c.y1 + c.y2) / 2.0, c.x2 - c.x1, c.y2 - c.y1};
}

CornerBox clip_to_unit(const CornerBox& c) {
  const auto clip01 = [](double v) { return std::min(1.0, std::max(0.0, v)); };
  return {clip01(c.x1), clip01(c.y1), clip01(c.x2), clip01(c.y2)};
}

double iou(const BoxSpec& a, const BoxSpec& b) {
  const CornerBox ca = to_corners(a);
  const CornerBox cb = to_corners(b);
  const double iw = std::min(ca.x2, cb.x2) - std::max(ca.x1, cb.x1);
  const double ih = std::min(ca.y2, cb.y2) - std::max(ca.y1, cb.y1);
  const double inter = std::max(0.0, iw) * std::max(0.0, ih);
  const double uni = ca.area() + cb.area() - inter;
  if (uni <= 0.0) return 0.0;
  return inter / uni;
}

double box_ratio(const BoxSpec& b) {
  const CornerBox c = clip_to_unit(to_corners(b));
  const double a = c.area();
  if (a <= 0.0) {
    throw ContractError("box_ratio: box has no positive area inside the unit square");
  }
  return a;
}

int SegMask::count() const {
  int n = 0;
  for (const auto v : cells) n += v ? 1 : 0;
  return n;
}

SegMask SegMask::complement() const {
  SegMask m{height, width, cells};
  for (auto& v : m.cells) v = v ? 0 : 1;
  return m;
}

std::vector<double> SegMask::as_flat_doubles() const {
  std::vector<double> out(cells.size());
  for (std::size_t i = 0; i < cells.size(); ++i) out[i] = cells[i] ? 1.0 : 0.0;
  return out;
}

std::vector<double> SegMask::complement_flat_doubles() const {
  std::vector<double> out(cells.size());
  for (std::size_t i = 0; i < cells.size(); ++i) out[i] = cells[i] ? 0.0 : 1.0;
  return out;
}

SegMask rasterize_mask(const BoxSpec& b, int grid_h, int grid_w) {
  if (grid_h < 1 || grid_w < 1) {
    throw DimensionError("rasterize_mask: grid must be at least 1x1, got " +
                         std::to_string(grid_h) + "x" + std::to_string(grid_w));
  }
  const CornerBox c = clip_to_unit(to_corners(b));
  if (c.area() <= 0.0) {
    throw ContractError("rasterize_mask: degenerate ground truth box");
  }
  SegMask mask{grid_h, grid_w,
               std::vector<std::uint8_t>(static_cast<std::size_t>(grid_h) * grid_w, 0)};
  bool any = false;
  for (int r = 0; r < grid_h; ++r) {
    const double ycen = (r + 0.5) / grid_h;
    for (int col = 0; col < grid_w; ++col) {
      const double xcen = (col + 0.5) / grid_w;
      if (xcen >= c.x1 && xcen <= c.x2 && ycen >= c.y1 && ycen <= c.y2) {
        mask.cells[static_cast<std::size_t>(r) * grid_w + col] = 1;
        any = true;
      }
    }
  }
  if (!any) {
    // Tiny box between cell centers: force the nearest cell.
    const double bx = (c.x1 + c.x2) / 2.0;
    const double by = (c.y1 + c.y2) / 2.0;
    double best = std::numeric_limits<double>::infinity();
    std::size_t best_idx = 0;
    for (int r = 0; r < grid_h; ++r) {
      const double ycen = (r + 0.5) / grid_h;
      for (int col = 0; col < grid_w; ++col) {
        const double xcen = (col + 0.5) / grid_w;
        const double d = (xcen - bx) * (xcen - bx) + (ycen - by) * (ycen - by);
        if (d < best) {
          best = d;
          best_idx = static_cast<std::size_t>(r) * grid_w + col;
        }
      }
    }
    mask.cells[best_idx] = 1;
  }
  return mask;
}

namespace {

void check_pred_shape(const char* op, const Tensor& pred) {
  if (pred.numel() != 4) {
    throw DimensionError(std::string(op) + ": predicted box must have 4 values, got shape " +
                         shape_str(pred.shape()));
  }
}

struct PredCorners {
  Tensor x1, y1, x2, y2;
};

// Differentiable corner form; x1 <= x2 holds because w >= 0.
PredCorners pred_corners(const Tensor& pred) {
  Tensor p = reshape(pred, {1, 4});
  Tensor cx = slice_cols(p, 0, 1);
  Tensor cy = slice_cols(p, 1, 2);
  Tensor w = slice_cols(p, 2, 3);
  Tensor h = slice_cols(p, 3, 4);
  Tensor half_w = scale(w, 0.5);
  Tensor half_h = scale(h, 0.5);
  return {sub(cx, half_w), sub(cy, half_h), add(cx, half_w), add(cy, half_h)};
}

}  // namespace

Tensor giou_loss(const Tensor& pred, const BoxSpec& gt) {
  check_pred_shape("giou_loss", pred);
  const CornerBox g = to_corners(gt);

  // Degenerate guard: both boxes collapsed. Constant loss, no gradient.
  {
    const auto& pv = pred.data();
    const CornerBox pc = to_corners({pv[0], pv[1], pv[2], pv[3]});
    const double enclose_w = std::max(pc.x2, g.x2) - std::min(pc.x1, g.x1);
    const double enclose_h = std::max(pc.y2, g.y2) - std::min(pc.y1, g.y1);
    if (enclose_w * enclose_h <= 0.0) return Tensor::scalar(1.0);
    if (pc.area() + g.area() <= 0.0) return Tensor::scalar(2.0);
  }

  PredCorners p = pred_corners(pred);
  const Tensor gx1 = Tensor::scalar(g.x1);
  const Tensor gy1 = Tensor::scalar(g.y1);
  const Tensor gx2 = Tensor::scalar(g.x2);
  const Tensor gy2 = Tensor::scalar(g.y2);

  Tensor iw = relu(sub(minimum(p.x2, gx2), maximum(p.x1, gx1)));
  Tensor ih = relu(sub(minimum(p.y2, gy2), maximum(p.y1, gy1)));
  Tensor inter = mul(iw, ih);

  Tensor area_p = mul(sub(p.x2, p.x1), sub(p.y2, p.y1));
  Tensor area_g = Tensor::scalar(g.area());
  Tensor uni = sub(add(area_p, area_g), inter);
  Tensor iou_t = div(inter, uni);

  Tensor ew = sub(maximum(p.x2, gx2), minimum(p.x1, gx1));
  Tensor eh = sub(maximum(p.y2, gy2), minimum(p.y1, gy1));
  Tensor area_c = mul(ew, eh);

  Tensor giou = sub(iou_t, div(sub(area_c, uni), area_c));
  return reshape(sub(Tensor::scalar(1.0), giou), {1});
}

Tensor l1_loss(const Tensor& pred, const BoxSpec& gt, bool average) {
  check_pred_shape("l1_loss", pred);
  Tensor p = reshape(pred, {4});
  Tensor g = Tensor::from_data({4}, {gt.cx, gt.cy, gt.w, gt.h});
  Tensor total = sum_all(abs(sub(p, g)));
  return average ? scale(total, 0.25) : total;
}

}  // namespace attbalance
