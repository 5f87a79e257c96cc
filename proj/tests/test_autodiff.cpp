#include <doctest.h>

#include <functional>

#include "sslseg/autodiff.hpp"
#include "sslseg/image.hpp"
#include "sslseg/rng.hpp"
#include "testutil.hpp"

using namespace sslseg;

namespace {

Tensor<double> random_tensor(Rng& rng, std::vector<int> shape, double lo = -1.0,
                             double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  for (Eigen::Index i = 0; i < t.v.size(); ++i) t.v[i] = rng.uniform(lo, hi);
  return t;
}

/// Central-difference check of d(scalar f)/dx against the tape gradient.
/// `build` must construct the graph from leaf ids it is given.
double max_rel_err(
    const std::function<Tape<double>::Id(Tape<double>&,
                                         std::vector<Tape<double>::Id>)>& build,
    std::vector<Tensor<double>> inputs, int check_input, int max_checks,
    Rng& rng, double h = 1e-6) {
  Tape<double> tape(true);
  std::vector<Tape<double>::Id> ids;
  for (const auto& in : inputs) ids.push_back(tape.leaf(in, true));
  const auto root = build(tape, ids);
  tape.backward(root);
  const Tensor<double>& grad = tape.grad(ids[check_input]);

  const auto eval = [&](const std::vector<Tensor<double>>& ins) {
    Tape<double> t(false);
    std::vector<Tape<double>::Id> vids;
    for (const auto& in : ins) vids.push_back(t.leaf(in, false));
    return t.scalar_value(build(t, vids));
  };

  double worst = 0.0;
  const std::int64_t n = inputs[check_input].size();
  for (int k = 0; k < max_checks; ++k) {
    const std::int64_t i =
        n <= max_checks ? k : rng.uniform_int(0, n - 1);
    if (i >= n) break;
    auto plus = inputs, minus = inputs;
    plus[check_input].v[i] += h;
    minus[check_input].v[i] -= h;
    const double fd = (eval(plus) - eval(minus)) / (2.0 * h);
    const double g = grad.v[i];
    const double rel = std::abs(fd - g) / std::max({std::abs(fd), std::abs(g), 1e-6});
    worst = std::max(worst, rel);
  }
  return worst;
}

}  // namespace

TEST_SUITE("autodiff") {

TEST_CASE("conv2d forward matches a naive loop") {
  Rng rng(40, 0);
  const int n = 2, cin = 3, h = 7, w = 6, cout = 4, k = 3, stride = 2, pad = 1;
  const Tensor<double> x = random_tensor(rng, {n, cin, h, w});
  const Tensor<double> wt = random_tensor(rng, {cout, cin, k, k});
  const Tensor<double> b = random_tensor(rng, {cout});

  Tape<double> tape(false);
  const auto out = tape.val(tape.conv2d(tape.leaf(x, false),
                                        tape.leaf(wt, false),
                                        tape.leaf(b, false), stride, pad));
  const int ho = (h + 2 * pad - k) / stride + 1;
  const int wo = (w + 2 * pad - k) / stride + 1;
  REQUIRE(out.shape == std::vector<int>({n, cout, ho, wo}));

  for (int ni = 0; ni < n; ++ni)
    for (int co = 0; co < cout; ++co)
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) {
          double acc = b.v[co];
          for (int ci = 0; ci < cin; ++ci)
            for (int ky = 0; ky < k; ++ky)
              for (int kx = 0; kx < k; ++kx) {
                const int iy = oy * stride - pad + ky;
                const int ix = ox * stride - pad + kx;
                if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                acc += x.v[x.idx4(ni, ci, iy, ix)] *
                       wt.v[wt.idx4(co, ci, ky, kx)];
              }
          CHECK(out.v[out.idx4(ni, co, oy, ox)] ==
                doctest::Approx(acc).epsilon(1e-12));
        }
}

TEST_CASE("conv2d gradients match finite differences") {
  Rng rng(41, 0);
  const Tensor<double> x = random_tensor(rng, {2, 2, 6, 5});
  const Tensor<double> w = random_tensor(rng, {3, 2, 3, 3});
  const Tensor<double> b = random_tensor(rng, {3});
  const Tensor<double> tgt = random_tensor(rng, {2 * 3 * 3 * 3, 1}, 0.0, 1.0);

  const auto build = [&](Tape<double>& t, std::vector<Tape<double>::Id> ids) {
    const auto conv = t.conv2d(ids[0], ids[1], ids[2], 2, 1);
    const auto flat = t.reshape(conv, {2 * 3 * 3 * 3, 1});
    return t.smooth_l1(flat, tgt);
  };
  for (int input = 0; input < 3; ++input)
    CHECK(max_rel_err(build, {x, w, b}, input, 24, rng) < 1e-5);
}

TEST_CASE("linear gradients match finite differences") {
  Rng rng(42, 0);
  const Tensor<double> x = random_tensor(rng, {4, 6});
  const Tensor<double> w = random_tensor(rng, {6, 3});
  const Tensor<double> b = random_tensor(rng, {3});
  const Tensor<double> tgt = random_tensor(rng, {4, 3}, 0.0, 1.0);
  const auto build = [&](Tape<double>& t, std::vector<Tape<double>::Id> ids) {
    return t.smooth_l1(t.linear(ids[0], ids[1], ids[2]), tgt);
  };
  for (int input = 0; input < 3; ++input)
    CHECK(max_rel_err(build, {x, w, b}, input, 18, rng) < 1e-6);
}

TEST_CASE("activation, pooling, resampling ops pass finite differences") {
  Rng rng(43, 0);
  const Tensor<double> x = random_tensor(rng, {2, 3, 4, 4});
  const Tensor<double> y = random_tensor(rng, {2, 3, 4, 4});

  SUBCASE("relu + add") {
    const Tensor<double> tgt = random_tensor(rng, {2, 48}, 0.0, 1.0);
    const auto build = [&](Tape<double>& t, std::vector<Tape<double>::Id> ids) {
      return t.smooth_l1(
          t.reshape(t.relu(t.add(ids[0], ids[1])), {2, 48}), tgt);
    };
    CHECK(max_rel_err(build, {x, y}, 0, 20, rng) < 1e-5);
    CHECK(max_rel_err(build, {x, y}, 1, 20, rng) < 1e-5);
  }
  SUBCASE("sigmoid -> bce") {
    Tensor<double> tgt({2, 48});
    for (Eigen::Index i = 0; i < tgt.v.size(); ++i)
      tgt.v[i] = rng.bernoulli(0.5) ? 1.0 : 0.0;
    const auto build = [&](Tape<double>& t, std::vector<Tape<double>::Id> ids) {
      return t.bce(t.reshape(t.sigmoid(ids[0]), {2, 48}), tgt);
    };
    CHECK(max_rel_err(build, {x}, 0, 24, rng) < 1e-6);
  }
  SUBCASE("avgpool2 and upsample2") {
    const Tensor<double> tgt = random_tensor(rng, {2, 12}, 0.0, 1.0);
    const auto build = [&](Tape<double>& t, std::vector<Tape<double>::Id> ids) {
      return t.smooth_l1(t.reshape(t.avgpool2(ids[0]), {2, 12}), tgt);
    };
    CHECK(max_rel_err(build, {x}, 0, 20, rng) < 1e-6);

    const Tensor<double> tgt2 = random_tensor(rng, {2, 192}, 0.0, 1.0);
    const auto build2 = [&](Tape<double>& t, std::vector<Tape<double>::Id> ids) {
      return t.smooth_l1(t.reshape(t.upsample2_nearest(ids[0]), {2, 192}),
                         tgt2);
    };
    CHECK(max_rel_err(build2, {x}, 0, 20, rng) < 1e-6);
  }
  SUBCASE("concat_channels routes gradients to both inputs") {
    const Tensor<double> tgt = random_tensor(rng, {2, 96}, 0.0, 1.0);
    const auto build = [&](Tape<double>& t, std::vector<Tape<double>::Id> ids) {
      return t.smooth_l1(
          t.reshape(t.concat_channels(ids[0], ids[1]), {2, 96}), tgt);
    };
    CHECK(max_rel_err(build, {x, y}, 0, 20, rng) < 1e-6);
    CHECK(max_rel_err(build, {x, y}, 1, 20, rng) < 1e-6);
  }
  SUBCASE("gather scatter-adds repeated indices") {
    const std::vector<std::int64_t> idx{0, 5, 5, 7};
    Tensor<double> tgt({4, 1});
    const auto build = [&](Tape<double>& t, std::vector<Tape<double>::Id> ids) {
      return t.smooth_l1(t.gather(ids[0], idx, {4, 1}), tgt);
    };
    CHECK(max_rel_err(build, {x}, 0, 20, rng) < 1e-6);
  }
}

TEST_CASE("roi_align: constant features give constant patches") {
  Tensor<double> feat({1, 2, 8, 8});
  feat.v.setConstant(0.42);
  Tape<double> tape(false);
  const auto out = tape.val(tape.roi_align(
      tape.leaf(feat, false), {{0, BBox{8, 8, 40, 32}}}, 14, 8.0));
  REQUIRE(out.shape == std::vector<int>({1, 2, 14, 14}));
  for (Eigen::Index i = 0; i < out.v.size(); ++i)
    CHECK(out.v[i] == doctest::Approx(0.42).epsilon(1e-12));
}

TEST_CASE("roi_align on a cell-aligned box equals crop + corner resize") {
  Rng rng(44, 0);
  const int hf = 10, wf = 12, g = 14;
  Tensor<double> feat({1, 1, hf, wf});
  for (Eigen::Index i = 0; i < feat.v.size(); ++i) feat.v[i] = rng.uniform();
  // box [16,24) x [8,48) in image coords = cells [2,3) x [1,6)
  const BBox box{16, 8, 24, 48};

  Tape<double> tape(false);
  const auto out = tape.val(
      tape.roi_align(tape.leaf(feat, false), {{0, box}}, g, 8.0));

  ImageT<float> crop_img(5, 1);
  for (int r = 0; r < 5; ++r)
    crop_img(r, 0) = static_cast<float>(feat.v[feat.idx4(0, 0, 1 + r, 2)]);
  const ImageT<float> resized = resize_bilinear(crop_img, g, g);
  for (int i = 0; i < g; ++i)
    for (int j = 0; j < g; ++j)
      CHECK(out.v[out.idx4(0, 0, i, j)] ==
            doctest::Approx(resized(i, j)).epsilon(1e-6));
}

TEST_CASE("roi_align gradient w.r.t. features passes finite differences") {
  Rng rng(45, 0);
  const Tensor<double> feat = random_tensor(rng, {1, 2, 8, 8});
  const std::vector<Tape<double>::Roi> rois = {{0, BBox{5.5, 3.25, 41.0, 50.5}},
                                               {0, BBox{16, 8, 24, 48}}};
  const Tensor<double> tgt = random_tensor(rng, {2, 2 * 14 * 14}, 0.0, 1.0);
  const auto build = [&](Tape<double>& t, std::vector<Tape<double>::Id> ids) {
    return t.smooth_l1(
        t.reshape(t.roi_align(ids[0], rois, 14, 8.0), {2, 2 * 14 * 14}), tgt);
  };
  CHECK(max_rel_err(build, {feat}, 0, 32, rng) < 1e-3);
}

TEST_CASE("roi_align rejects degenerate boxes") {
  Tensor<double> feat({1, 1, 8, 8});
  Tape<double> tape(false);
  const auto fid = tape.leaf(feat, false);
  CHECK_THROWS_AS(tape.roi_align(fid, {{0, BBox{4, 4, 4, 9}}}, 14, 8.0),
                  std::invalid_argument);
}

TEST_CASE("softmax cross-entropy gradient and value") {
  Rng rng(46, 0);
  const Tensor<double> logits = random_tensor(rng, {5, 4});
  const std::vector<int> targets{0, 3, 1, 2, 2};
  const auto build = [&](Tape<double>& t, std::vector<Tape<double>::Id> ids) {
    return t.softmax_cross_entropy(ids[0], targets);
  };
  CHECK(max_rel_err(build, {logits}, 0, 20, rng) < 1e-6);
}

TEST_CASE("backward requires a scalar root") {
  Tape<double> tape(true);
  const auto x = tape.leaf(Tensor<double>::zeros({2, 2}), true);
  CHECK_THROWS_AS(tape.backward(x), std::logic_error);
}

}  // TEST_SUITE
