#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <chrono>
#include <cmath>

#include "attbalance/losses.hpp"
#include "attbalance/model.hpp"
#include "attbalance/ops.hpp"
#include "attbalance/synthetic.hpp"
#include "oracles.hpp"

using namespace attbalance;
using testing_oracles::fd_gradient;
using testing_oracles::max_rel_err;

namespace {

struct TapeReset {
  TapeReset() { Tape::active().reset(); }
  ~TapeReset() { Tape::active().reset(); }
};

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.n_layers = 3;
  cfg.grid_h = 4;
  cfg.grid_w = 4;
  cfg.max_text_len = 6;
  cfg.vocab_size = vocab::size();
  cfg.mlp_hidden = 16;
  cfg.visual_feature_dim = vocab::feature_dim();
  return cfg;
}

DatasetConfig tiny_data() {
  DatasetConfig d;
  d.n_train = 12;
  d.n_val = 6;
  d.grid_h = 4;
  d.grid_w = 4;
  d.box_ratio_min = 0.05;
  d.box_ratio_max = 0.5;
  d.seed = 99;
  return d;
}

GroundingSample uniform_visual_sample(const ModelConfig& cfg) {
  GroundingSample s;
  s.id = 7;
  s.grid_h = cfg.grid_h;
  s.grid_w = cfg.grid_w;
  s.feature_dim = cfg.visual_feature_dim;
  s.features.assign(static_cast<std::size_t>(cfg.n_visual()) * cfg.visual_feature_dim, 0.25);
  s.tokens = {vocab::shape_word(1)};
  s.box = {0.5, 0.5, 0.5, 0.5};
  return s;
}

}  // namespace

TEST_CASE("captured maps are normalized probability rows") {
  TapeReset guard;
  const ModelConfig cfg = tiny_config();
  const ModelParams params = init_params(cfg, 11);
  Dataset ds = generate(tiny_data());

  ForwardResult fwd = forward(params, ds.train[0], {0, 1, 2});
  REQUIRE(fwd.attention.layers.size() == 3);
  int previous = -1;
  for (const auto& la : fwd.attention.layers) {
    CHECK(la.layer > previous);  // strictly increasing layer indices
    previous = la.layer;
    REQUIRE(static_cast<int>(la.map.numel()) == cfg.n_visual());
    double total = 0.0;
    for (const double v : la.map.data()) {
      CHECK(v >= 0.0);
      total += v;
    }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-9));

    // In-mask plus out-mask mass is exactly the full probability.
    const SegMask mask = rasterize_mask(ds.train[0].box, cfg.grid_h, cfg.grid_w);
    const double inside = in_mask_sum(la, mask);
    double outside = 0.0;
    for (std::size_t i = 0; i < la.map.numel(); ++i) {
      if (!mask.cells[i]) outside += la.map.data()[i];
    }
    CHECK(inside + outside == doctest::Approx(1.0).epsilon(1e-9));
  }

  // Predicted box sits inside the unit square.
  for (const double v : fwd.pred_box.data()) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
}

TEST_CASE("identical visual tokens give a uniform captured map") {
  TapeReset guard;
  ModelConfig cfg = tiny_config();
  ModelParams params = init_params(cfg, 5);
  // Remove the positional signal so every visual token state is identical.
  for (auto& v : params.pos_row.data()) v = 0.0;
  for (auto& v : params.pos_col.data()) v = 0.0;

  const GroundingSample sample = uniform_visual_sample(cfg);
  ForwardResult fwd = forward(params, sample, {0, 1, 2});
  const double expected = 1.0 / cfg.n_visual();
  for (const auto& la : fwd.attention.layers) {
    for (const double v : la.map.data()) {
      CHECK(v == doctest::Approx(expected).epsilon(1e-9));
    }
  }
}

TEST_CASE("in-mask attention gradient matches finite differences") {
  TapeReset guard;
  const ModelConfig cfg = tiny_config();
  ModelParams params = init_params(cfg, 23);
  Dataset ds = generate(tiny_data());
  const GroundingSample sample = ds.train[1];
  const SegMask mask = rasterize_mask(sample.box, cfg.grid_h, cfg.grid_w);
  Tensor mask_t = Tensor::from_data({cfg.n_visual()}, mask.as_flat_doubles());

  auto objective = [&]() {
    ForwardResult fwd = forward(params, sample, {0});
    return sum_all(mul(fwd.attention.layers[0].map, mask_t));
  };

  Tape::active().reset();
  Tensor loss = objective();
  Tape::active().backward(loss);

  Tensor wq = params.layers[0].w_q;
  const double err =
      max_rel_err(wq.grad(), fd_gradient([&]() { return objective().item(); }, wq), 1e-7);
  CHECK(err < 1e-4);
}

TEST_CASE("forward is pure and batch order is immaterial") {
  TapeReset guard;
  NoGradGuard no_grad;
  const ModelConfig cfg = tiny_config();
  const ModelParams params = init_params(cfg, 3);
  Dataset ds = generate(tiny_data());
  std::vector<GroundingSample> batch(ds.train.begin(), ds.train.begin() + 4);

  // Repeated single forward agrees bitwise.
  ForwardResult a = forward(params, batch[0], {1});
  ForwardResult b = forward(params, batch[0], {1});
  CHECK(a.pred_box.data() == b.pred_box.data());
  CHECK(a.attention.layers[0].map.data() == b.attention.layers[0].map.data());

  // Batch of one equals the single forward bitwise.
  auto batch_one = forward_batch(params, {batch[0]}, {1});
  CHECK(batch_one[0].pred_box.data() == a.pred_box.data());

  // Permuting the batch permutes outputs identically.
  auto fwd = forward_batch(params, batch, {1});
  std::vector<GroundingSample> reversed(batch.rbegin(), batch.rend());
  auto fwd_rev = forward_batch(params, reversed, {1});
  for (std::size_t i = 0; i < batch.size(); ++i) {
    CHECK(fwd[i].pred_box.data() == fwd_rev[batch.size() - 1 - i].pred_box.data());
  }
}

TEST_CASE("initialization is seed-deterministic") {
  const ModelConfig cfg = tiny_config();
  const ModelParams p1 = init_params(cfg, 42);
  const ModelParams p2 = init_params(cfg, 42);
  const ModelParams p3 = init_params(cfg, 43);
  const auto n1 = p1.named();
  const auto n2 = p2.named();
  const auto n3 = p3.named();
  bool any_diff = false;
  for (std::size_t i = 0; i < n1.size(); ++i) {
    CHECK(n1[i].second.data() == n2[i].second.data());
    any_diff = any_diff || n1[i].second.data() != n3[i].second.data();
  }
  CHECK(any_diff);

  CHECK(p1.parameter_count() == parameter_count(cfg));

  // Centered initial box: the head's final bias starts at zero.
  for (const double v : p1.head_b3.data()) CHECK(v == 0.0);
}

TEST_CASE("initial forward produces a finite loss") {
  TapeReset guard;
  const ModelConfig cfg = tiny_config();
  const ModelParams params = init_params(cfg, 1234);
  Dataset ds = generate(tiny_data());
  ForwardResult fwd = forward(params, ds.train[0], {2});
  Tensor loss = add(l1_loss(fwd.pred_box, ds.train[0].box),
                    giou_loss(fwd.pred_box, ds.train[0].box));
  CHECK(std::isfinite(loss.item()));
}

TEST_CASE("scaled dot product keeps its ordering when channels double") {
  TapeReset guard;
  NoGradGuard no_grad;
  Rng rng(67);
  const int dk = 8;
  const int n = 10;
  Tensor q = testing_oracles::random_tensor(rng, {1, dk}, -1, 1);
  Tensor k = testing_oracles::random_tensor(rng, {n, dk}, -1, 1);
  Tensor row = similarity_row(q, k, 1);

  // Duplicate every channel: dot products double, sqrt(d_k) grows by sqrt 2,
  // so the row scales by sqrt 2 and the ordering (hence argmax) is unchanged.
  Tensor q2 = concat_cols({q, q});
  Tensor k2 = concat_cols({k, k});
  Tensor row2 = similarity_row(q2, k2, 1);

  const auto argmax = [](const Tensor& t) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < t.numel(); ++i) {
      if (t.data()[i] > t.data()[best]) best = i;
    }
    return best;
  };
  CHECK(argmax(row) == argmax(row2));
  for (std::size_t i = 0; i < row.numel(); ++i) {
    CHECK(row2.data()[i] == doctest::Approx(std::sqrt(2.0) * row.data()[i]).epsilon(1e-9));
  }

  // Head-splitting consistency: one head vs two heads over duplicated halves.
  Tensor split_row = similarity_row(q2, k2, 2);
  for (std::size_t i = 0; i < row.numel(); ++i) {
    CHECK(split_row.data()[i] == doctest::Approx(row.data()[i]).epsilon(1e-9));
  }
}

TEST_CASE("capture state switch changes the map but keeps the contract") {
  TapeReset guard;
  NoGradGuard no_grad;
  ModelConfig cfg = tiny_config();
  Dataset ds = generate(tiny_data());
  ModelParams pre = init_params(cfg, 9);
  ForwardResult with_pre = forward(pre, ds.train[2], {1});

  cfg.capture_post_ln = true;
  ModelParams post = init_params(cfg, 9);
  ForwardResult with_post = forward(post, ds.train[2], {1});

  CHECK(with_pre.attention.layers[0].map.data() != with_post.attention.layers[0].map.data());
  double total = 0.0;
  for (const double v : with_post.attention.layers[0].map.data()) total += v;
  CHECK(total == doctest::Approx(1.0).epsilon(1e-9));
  // The box head is untouched by the capture convention.
  CHECK(with_pre.pred_box.data() == with_post.pred_box.data());
}

TEST_CASE("forward rejects mismatched samples and bad capture sets") {
  TapeReset guard;
  const ModelConfig cfg = tiny_config();
  const ModelParams params = init_params(cfg, 2);
  Dataset ds = generate(tiny_data());

  GroundingSample wrong_grid = ds.train[0];
  wrong_grid.grid_h = 5;
  CHECK_THROWS_AS(forward(params, wrong_grid, {}), DimensionError);

  GroundingSample bad_token = ds.train[0];
  bad_token.tokens = {vocab::size()};  // one past the vocabulary
  CHECK_THROWS_AS(forward(params, bad_token, {}), DimensionError);

  GroundingSample long_text = ds.train[0];
  long_text.tokens.assign(static_cast<std::size_t>(cfg.max_text_len) + 1, 1);
  CHECK_THROWS_AS(forward(params, long_text, {}), DimensionError);

  CHECK_THROWS_AS(forward(params, ds.train[0], {cfg.n_layers}), ContractError);
}

TEST_CASE("toy-scale batch forward stays under a second") {
  TapeReset guard;
  NoGradGuard no_grad;
  ModelConfig cfg;  // defaults: d32, 6 layers, 8x8 grid
  cfg.vocab_size = vocab::size();
  cfg.visual_feature_dim = vocab::feature_dim();
  DatasetConfig dc;
  dc.n_train = 8;
  dc.n_val = 1;
  Dataset ds = generate(dc);
  const ModelParams params = init_params(cfg, 77);
  std::vector<GroundingSample> batch(ds.train.begin(), ds.train.begin() + 8);

  const auto t0 = std::chrono::steady_clock::now();
  auto results = forward_batch(params, batch, {2, 3, 4, 5});
  const double ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  CHECK(results.size() == 8);
  CHECK(ms < 1000.0);
  MESSAGE("batch of 8 forward: " << ms << " ms");
}
