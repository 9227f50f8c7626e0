#pragma once

#include <cstdint>
#include <vector>

#include "attbalance/ops.hpp"
#include "attbalance/tensor.hpp"

namespace attbalance {

struct CornerBox {
  double x1 = 0.0;
  double y1 = 0.0;
  double x2 = 0.0;
  double y2 = 0.0;

  double area() const { return (x2 - x1) * (y2 - y1); }
};

// Normalized center-size box; all coordinates relative to the unit square.
struct BoxSpec {
  double cx = 0.0;
  double cy = 0.0;
  double w = 0.0;
  double h = 0.0;
};

CornerBox to_corners(const BoxSpec& b);
BoxSpec from_corners(const CornerBox& c);

// Intersects the corner form with the unit square. Masks, box ratios and the
// training pipeline clip through this; the loss math itself is pure box
// geometry (the sigmoid head already bounds predictions).
CornerBox clip_to_unit(const CornerBox& c);

double iou(const BoxSpec& a, const BoxSpec& b);

// Ground-truth box area relative to the image, after clipping.
double box_ratio(const BoxSpec& b);

// Binary mask over the visual-feature grid, row-major cells.
struct SegMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> cells;

  int count() const;
  SegMask complement() const;
  std::vector<double> as_flat_doubles() const;
  std::vector<double> complement_flat_doubles() const;
};

// Cell (r, c) is set iff its center lies inside the clipped box; when no
// center falls inside a positive-area box, the cell nearest the box center
// is forced on so the in-mask attention sum cannot be exactly zero.
SegMask rasterize_mask(const BoxSpec& b, int grid_h, int grid_w);

// Differentiable losses over a predicted (cx, cy, w, h) tensor of 4 values.
// pred must have w, h >= 0 (the model head guarantees this via sigmoid).
Tensor giou_loss(const Tensor& pred, const BoxSpec& gt);
Tensor l1_loss(const Tensor& pred, const BoxSpec& gt, bool average = true);

}  // namespace attbalance
