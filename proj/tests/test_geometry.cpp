#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "attbalance/geometry.hpp"
#include "attbalance/rng.hpp"
#include "oracles.hpp"

using namespace attbalance;
using testing_oracles::fd_gradient;
using testing_oracles::max_rel_err;

namespace {

struct TapeReset {
  TapeReset() { Tape::active().reset(); }
  ~TapeReset() { Tape::active().reset(); }
};

BoxSpec box_from_corners(double x1, double y1, double x2, double y2) {
  return from_corners({x1, y1, x2, y2});
}

}  // namespace

TEST_CASE("corner conversions are exact and mutually inverse") {
  CornerBox full = to_corners({0.5, 0.5, 1.0, 1.0});
  CHECK(full.x1 == 0.0);
  CHECK(full.y1 == 0.0);
  CHECK(full.x2 == 1.0);
  CHECK(full.y2 == 1.0);

  CornerBox quadrant = to_corners({0.25, 0.25, 0.5, 0.5});
  CHECK(quadrant.x1 == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(quadrant.x2 == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(quadrant.y2 == doctest::Approx(0.5).epsilon(1e-15));

  Rng rng(3);
  for (int i = 0; i < 200; ++i) {
    BoxSpec b{rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0, 1)};
    BoxSpec rt = from_corners(to_corners(b));
    CHECK(std::fabs(rt.cx - b.cx) < 1e-15);
    CHECK(std::fabs(rt.cy - b.cy) < 1e-15);
    CHECK(std::fabs(rt.w - b.w) < 1e-15);
    CHECK(std::fabs(rt.h - b.h) < 1e-15);
  }
}

TEST_CASE("iou identities and worked example") {
  BoxSpec a{0.4, 0.4, 0.3, 0.5};
  CHECK(iou(a, a) == doctest::Approx(1.0).epsilon(1e-15));

  BoxSpec left = box_from_corners(0.0, 0.0, 0.2, 0.2);
  BoxSpec right = box_from_corners(0.5, 0.5, 0.9, 0.9);
  CHECK(iou(left, right) == 0.0);

  // Direct area computation: inter = 1*0.5, union = 1 + 1 - 0.5 = 1.5.
  BoxSpec x = box_from_corners(0.0, 0.0, 1.0, 1.0);
  BoxSpec y = box_from_corners(0.0, 0.5, 1.0, 1.5);
  CHECK(iou(x, y) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  // Symmetry on random boxes.
  Rng rng(17);
  for (int i = 0; i < 100; ++i) {
    BoxSpec p{rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0.05, 0.8),
              rng.uniform(0.05, 0.8)};
    BoxSpec q{rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0.05, 0.8),
              rng.uniform(0.05, 0.8)};
    CHECK(iou(p, q) == iou(q, p));
    CHECK(iou(p, q) >= 0.0);
    CHECK(iou(p, q) <= 1.0);
  }
}

TEST_CASE("giou loss matches direct evaluation") {
  TapeReset guard;

  // pred == gt with positive area: GIoU = 1, loss 0.
  BoxSpec gt{0.5, 0.5, 0.4, 0.6};
  Tensor pred_eq = Tensor::from_data({4}, {gt.cx, gt.cy, gt.w, gt.h}, true);
  CHECK(giou_loss(pred_eq, gt).item() == doctest::Approx(0.0).epsilon(1e-12));

  // Corner boxes A=(0,0,1,1), B=(1,1,2,2): GIoU = -(4-2)/4 = -0.5, loss 1.5.
  BoxSpec b = box_from_corners(1.0, 1.0, 2.0, 2.0);
  BoxSpec a = box_from_corners(0.0, 0.0, 1.0, 1.0);
  Tensor pred_a = Tensor::from_data({4}, {a.cx, a.cy, a.w, a.h}, true);
  CHECK(giou_loss(pred_a, b).item() == doctest::Approx(1.5).epsilon(1e-12));

  // Containment: GIoU == IoU when one box contains the other.
  BoxSpec outer = box_from_corners(0.1, 0.1, 0.9, 0.9);
  BoxSpec inner = box_from_corners(0.3, 0.3, 0.5, 0.5);
  Tensor pred_inner = Tensor::from_data({4}, {inner.cx, inner.cy, inner.w, inner.h});
  const double loss = giou_loss(pred_inner, outer).item();
  CHECK(1.0 - loss == doctest::Approx(iou(inner, outer)).epsilon(1e-12));

  // Gradient vs finite differences on random predictions.
  Rng rng(29);
  for (int i = 0; i < 20; ++i) {
    BoxSpec g{rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.1, 0.4),
              rng.uniform(0.1, 0.4)};
    Tensor pred = Tensor::from_data(
        {4}, {rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.1, 0.5),
              rng.uniform(0.1, 0.5)},
        true);
    Tape::active().reset();
    Tensor l = giou_loss(pred, g);
    Tape::active().backward(l);
    const double err = max_rel_err(
        pred.grad(), fd_gradient([&]() { return giou_loss(pred, g).item(); }, pred));
    CHECK(err < 1e-5);
  }

  // GIoU stays in (-1, 1] on random pairs.
  for (int i = 0; i < 100; ++i) {
    Tensor pred = Tensor::from_data(
        {4}, {rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0.01, 0.9),
              rng.uniform(0.01, 0.9)});
    BoxSpec g{rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0.01, 0.9),
              rng.uniform(0.01, 0.9)};
    const double giou = 1.0 - giou_loss(pred, g).item();
    CHECK(giou > -1.0);
    CHECK(giou <= 1.0 + 1e-12);
  }
}

TEST_CASE("l1 loss definition and subgradient") {
  TapeReset guard;
  BoxSpec gt{0.5, 0.5, 0.2, 0.3};
  Tensor exact = Tensor::from_data({4}, {0.5, 0.5, 0.2, 0.3}, true);
  CHECK(l1_loss(exact, gt).item() == doctest::Approx(0.0).epsilon(1e-15));

  Tensor offset = Tensor::from_data({4}, {0.6, 0.6, 0.3, 0.4}, true);
  CHECK(l1_loss(offset, gt).item() == doctest::Approx(0.1).epsilon(1e-12));

  // Sum convention is available behind the flag.
  CHECK(l1_loss(offset, gt, /*average=*/false).item() == doctest::Approx(0.4).epsilon(1e-12));

  Tensor mixed = Tensor::from_data({4}, {0.7, 0.4, 0.2, 0.1}, true);
  Tensor loss = l1_loss(mixed, gt);
  Tape::active().backward(loss);
  CHECK(mixed.grad()[0] == doctest::Approx(0.25).epsilon(1e-12));   // above gt
  CHECK(mixed.grad()[1] == doctest::Approx(-0.25).epsilon(1e-12));  // below gt
  CHECK(mixed.grad()[2] == doctest::Approx(0.0).epsilon(1e-12));    // tie
  CHECK(mixed.grad()[3] == doctest::Approx(-0.25).epsilon(1e-12));
}

TEST_CASE("mask rasterization") {
  SegMask full = rasterize_mask({0.5, 0.5, 1.0, 1.0}, 4, 4);
  CHECK(full.count() == 16);

  // Corner box (0,0,0.5,0.5): centers at 0.125 and 0.375 fall inside.
  SegMask corner = rasterize_mask(box_from_corners(0.0, 0.0, 0.5, 0.5), 4, 4);
  CHECK(corner.count() == 4);
  for (int r = 0; r < 4; ++r) {
    for (int c = 0; c < 4; ++c) {
      const bool expected = r < 2 && c < 2;
      CHECK(static_cast<bool>(corner.cells[static_cast<std::size_t>(r) * 4 + c]) == expected);
    }
  }

  // Tiny box between centers still gets its nearest cell.
  SegMask tiny = rasterize_mask({0.26, 0.26, 0.005, 0.005}, 4, 4);
  CHECK(tiny.count() == 1);

  CHECK_THROWS_AS(rasterize_mask({0.5, 0.5, 0.0, 0.1}, 4, 4), ContractError);
  CHECK_THROWS_AS(rasterize_mask({0.5, 0.5, 0.1, 0.1}, 0, 4), DimensionError);

  // Mask and complement partition the grid; any positive-area box is non-empty.
  Rng rng(41);
  for (int i = 0; i < 100; ++i) {
    BoxSpec b{rng.uniform(0.05, 0.95), rng.uniform(0.05, 0.95), rng.uniform(0.01, 0.6),
              rng.uniform(0.01, 0.6)};
    SegMask m = rasterize_mask(b, 8, 8);
    CHECK(m.count() >= 1);
    CHECK(m.count() + m.complement().count() == 64);
  }
}

TEST_CASE("box ratio") {
  CHECK(box_ratio({0.5, 0.5, 1.0, 1.0}) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(box_ratio({0.3, 0.7, 0.5, 0.5}) == doctest::Approx(0.25).epsilon(1e-15));

  // Oversized boxes clip to the unit square, never exceeding 1.
  CHECK(box_ratio({0.5, 0.5, 3.0, 3.0}) == doctest::Approx(1.0).epsilon(1e-15));
  Rng rng(53);
  for (int i = 0; i < 100; ++i) {
    BoxSpec b{rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0.05, 2.0),
              rng.uniform(0.05, 2.0)};
    const double r = box_ratio(b);
    CHECK(r > 0.0);
    CHECK(r <= 1.0);
  }

  CHECK_THROWS_AS(box_ratio({2.0, 2.0, 0.1, 0.1}), ContractError);  // outside the image
}
