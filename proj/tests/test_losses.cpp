#include <doctest.h>

#include <cmath>

#include "sslseg/losses.hpp"
#include "sslseg/rng.hpp"

using namespace sslseg;

namespace {

Tensor<double> tensor_of(std::vector<int> shape, std::vector<double> values) {
  Tensor<double> t(std::move(shape));
  REQUIRE(t.size() == static_cast<std::int64_t>(values.size()));
  std::copy(values.begin(), values.end(), t.v.data());
  return t;
}

Tensor<double> random01(Rng& rng, std::vector<int> shape) {
  Tensor<double> t(std::move(shape));
  for (Eigen::Index i = 0; i < t.v.size(); ++i) t.v[i] = rng.uniform();
  return t;
}

// Scalar brute-force L_Restored for the oracle comparison.
double restored_reference(const Tensor<double>& p, const Tensor<double>& t) {
  const int n = p.shape[0], d = p.shape[1];
  double sq = 0, ab = 0;
  for (Eigen::Index i = 0; i < p.v.size(); ++i) {
    sq += (p.v[i] - t.v[i]) * (p.v[i] - t.v[i]);
    ab += std::abs(p.v[i] - t.v[i]);
  }
  double cs = 0;
  for (int i = 0; i < n; ++i) {
    double dot = 0, np = 0, nt = 0;
    for (int j = 0; j < d; ++j) {
      dot += p.v[i * d + j] * t.v[i * d + j];
      np += p.v[i * d + j] * p.v[i * d + j];
      nt += t.v[i * d + j] * t.v[i * d + j];
    }
    cs += 1.0 - dot / (std::max(std::sqrt(np), 1e-8) *
                       std::max(std::sqrt(nt), 1e-8));
  }
  return std::sqrt(sq / p.v.size()) + ab / p.v.size() + cs / n;
}

double fd_check_restored(const Tensor<double>& p, const Tensor<double>& t,
                         Rng& rng, int checks) {
  Tape<double> tape(true);
  const auto pid = tape.leaf(p, true);
  const auto loss = tape.restored_loss(pid, t);
  tape.backward(loss);
  double worst = 0;
  for (int k = 0; k < checks; ++k) {
    const auto i = rng.uniform_int(0, p.size() - 1);
    const double h = 1e-6;
    auto plus = p, minus = p;
    plus.v[i] += h;
    minus.v[i] -= h;
    const double fd =
        (restored_reference(plus, t) - restored_reference(minus, t)) / (2 * h);
    const double g = tape.grad(pid).v[i];
    worst = std::max(worst,
                     std::abs(fd - g) / std::max({std::abs(fd), std::abs(g), 1e-6}));
  }
  return worst;
}

}  // namespace

TEST_SUITE("losses") {

TEST_CASE("l_restored: identical nonzero patches give exactly 0") {
  const auto t = tensor_of({1, 4}, {0.2, 0.4, 0.6, 0.8});
  CHECK(l_restored_value(t, t) == 0.0);
}

TEST_CASE("l_restored: orthogonal unit vectors give 3") {
  const auto p = tensor_of({1, 2}, {1.0, 0.0});
  const auto t = tensor_of({1, 2}, {0.0, 1.0});
  CHECK(l_restored_value(p, t) == doctest::Approx(3.0).epsilon(1e-12));
}

TEST_CASE("l_restored: the +0.1 offset case") {
  const auto t = tensor_of({1, 4}, {0.2, 0.4, 0.6, 0.8});
  const auto p = tensor_of({1, 4}, {0.3, 0.5, 0.7, 0.9});
  // RMSE = MAE = 0.1; dot = 1.4, |t| = sqrt(1.2), |p| = sqrt(1.64)
  const double expected = 0.1 + 0.1 + (1.0 - 1.4 / std::sqrt(1.2 * 1.64));
  CHECK(l_restored_value(p, t) == doctest::Approx(expected).epsilon(1e-9));
  CHECK(l_restored_value(p, t) == doctest::Approx(0.2020).epsilon(1e-3));
}

TEST_CASE("l_restored matches the brute-force scalar reference") {
  Rng rng(50, 0);
  for (int trial = 0; trial < 10; ++trial) {
    const auto p = random01(rng, {3, 16});
    const auto t = random01(rng, {3, 16});
    CHECK(l_restored_value(p, t) ==
          doctest::Approx(restored_reference(p, t)).epsilon(1e-12));
  }
}

TEST_CASE("l_restored is nonnegative and zero only at equality") {
  Rng rng(51, 0);
  for (int trial = 0; trial < 20; ++trial) {
    const auto p = random01(rng, {2, 9});
    auto t = random01(rng, {2, 9});
    const double v = l_restored_value(p, t);
    CHECK(v >= 0.0);
    if (!(p.v == t.v).all()) CHECK(v > 0.0);
  }
}

TEST_CASE("cosine term is scale-invariant while RMSE is not") {
  Rng rng(52, 0);
  const auto p = random01(rng, {2, 12});
  const auto t = random01(rng, {2, 12});
  const auto scaled = [&](double a) {
    Tensor<double> q = p;
    q.v *= a;
    return q;
  };
  const auto cs_part = [&](const Tensor<double>& q) {
    // subtract the rmse/mae pieces computed independently
    double sq = 0, ab = 0;
    for (Eigen::Index i = 0; i < q.v.size(); ++i) {
      sq += (q.v[i] - t.v[i]) * (q.v[i] - t.v[i]);
      ab += std::abs(q.v[i] - t.v[i]);
    }
    return l_restored_value(q, t) - std::sqrt(sq / q.v.size()) -
           ab / q.v.size();
  };
  CHECK(cs_part(scaled(3.0)) == doctest::Approx(cs_part(p)).epsilon(1e-9));
  CHECK(cs_part(scaled(0.25)) == doctest::Approx(cs_part(p)).epsilon(1e-9));
  CHECK(std::abs(l_restored_value(scaled(3.0), t) - l_restored_value(p, t)) >
        1e-3);
}

TEST_CASE("l_restored shape mismatch is rejected") {
  Rng rng(53, 0);
  const auto p = random01(rng, {2, 8});
  const auto t = random01(rng, {2, 9});
  Tape<double> tape(false);
  CHECK_THROWS_AS(tape.restored_loss(tape.leaf(p, false), t),
                  std::invalid_argument);
}

TEST_CASE("l_cls: saturated correct logits, uniform logits, permutation") {
  const auto sat = tensor_of({2, 7}, {30, 0, 0, 0, 0, 0, 0,
                                      0, 0, 0, 30, 0, 0, 0});
  CHECK(l_cls_value(sat, {0, 3}) == doctest::Approx(0.0).epsilon(1e-9));

  Tensor<double> uniform({4, 7});
  uniform.v.setConstant(0.3);
  CHECK(l_cls_value(uniform, {0, 6, 2, 4}) ==
        doctest::Approx(std::log(7.0)).epsilon(1e-12));

  Rng rng(54, 0);
  Tensor<double> logits = random01(rng, {5, 4});
  const std::vector<int> tgt{3, 1, 0, 2, 1};
  const double base = l_cls_value(logits, tgt);
  // permute rows 0<->4, 1<->3
  Tensor<double> perm({5, 4});
  const int order[5] = {4, 3, 2, 1, 0};
  std::vector<int> ptgt(5);
  for (int r = 0; r < 5; ++r) {
    ptgt[r] = tgt[order[r]];
    for (int c = 0; c < 4; ++c) perm.v[r * 4 + c] = logits.v[order[r] * 4 + c];
  }
  CHECK(l_cls_value(perm, ptgt) == doctest::Approx(base).epsilon(1e-12));

  CHECK_THROWS_AS(l_cls_value(uniform, {0, 1, 2, 9}), std::invalid_argument);
}

TEST_CASE("l_bbox: smooth-L1 branch values") {
  const auto zero = tensor_of({1, 4}, {0, 0, 0, 0});
  CHECK(l_bbox_value(zero, zero) == 0.0);

  const auto half = tensor_of({1, 4}, {0.5, 0, 0, 0});
  CHECK(l_bbox_value(half, zero) == doctest::Approx(0.125).epsilon(1e-12));

  const auto two = tensor_of({1, 4}, {2.0, 0, 0, 0});
  CHECK(l_bbox_value(two, zero) == doctest::Approx(1.5).epsilon(1e-12));
}

TEST_CASE("l_mask: clamp floor, ln 2 at p=0.5, polarity symmetry") {
  Tensor<double> perfect({2, 4});
  Tensor<double> target({2, 4});
  for (int i = 0; i < 8; ++i) {
    target.v[i] = i % 2;
    perfect.v[i] = i % 2;  // exact probabilities, clamped internally
  }
  CHECK(l_mask_value(perfect, target) ==
        doctest::Approx(0.0).epsilon(1e-6));

  Tensor<double> half({2, 4});
  half.v.setConstant(0.5);
  CHECK(l_mask_value(half, target) ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));

  Rng rng(55, 0);
  Tensor<double> p = random01(rng, {3, 9});
  Tensor<double> t({3, 9});
  for (Eigen::Index i = 0; i < t.v.size(); ++i)
    t.v[i] = rng.bernoulli(0.5) ? 1.0 : 0.0;
  Tensor<double> p_flip = p, t_flip = t;
  p_flip.v = 1.0 - p_flip.v;
  t_flip.v = 1.0 - t_flip.v;
  CHECK(l_mask_value(p_flip, t_flip) ==
        doctest::Approx(l_mask_value(p, t)).epsilon(1e-9));

  Tensor<double> bad = t;
  bad.v[0] = 0.5;
  CHECK_THROWS_AS(l_mask_value(p, bad), std::invalid_argument);
}

TEST_CASE("finite differences agree for every loss op at 64-bit") {
  Rng rng(56, 0);
  for (int trial = 0; trial < 10; ++trial) {
    const auto p = random01(rng, {3, 12});
    const auto t = random01(rng, {3, 12});
    CHECK(fd_check_restored(p, t, rng, 8) < 1e-4);

    // smooth L1
    {
      Tape<double> tape(true);
      const auto pid = tape.leaf(p, true);
      tape.backward(tape.smooth_l1(pid, t));
      for (int k = 0; k < 6; ++k) {
        const auto i = rng.uniform_int(0, p.size() - 1);
        auto plus = p, minus = p;
        plus.v[i] += 1e-6;
        minus.v[i] -= 1e-6;
        CHECK(std::abs((l_bbox_value(plus, t) - l_bbox_value(minus, t)) / 2e-6 -
                       tape.grad(pid).v[i]) < 1e-4);
      }
    }
    // bce with binary targets
    {
      Tensor<double> bt({3, 12});
      for (Eigen::Index i = 0; i < bt.v.size(); ++i)
        bt.v[i] = rng.bernoulli(0.5) ? 1.0 : 0.0;
      Tensor<double> probs = p;
      probs.v = 0.02 + 0.96 * probs.v;  // keep away from the clamp
      Tape<double> tape(true);
      const auto pid = tape.leaf(probs, true);
      tape.backward(tape.bce(pid, bt));
      for (int k = 0; k < 6; ++k) {
        const auto i = rng.uniform_int(0, probs.size() - 1);
        auto plus = probs, minus = probs;
        plus.v[i] += 1e-7;
        minus.v[i] -= 1e-7;
        const double fd =
            (l_mask_value(plus, bt) - l_mask_value(minus, bt)) / 2e-7;
        const double g = tape.grad(pid).v[i];
        CHECK(std::abs(fd - g) / std::max({std::abs(fd), std::abs(g), 1e-6}) <
              1e-4);
      }
    }
  }
}

TEST_CASE("total_loss: all-zero parts give zero, empty terms stay finite") {
  Tape<double> tape(true);
  LossInputs<double> inputs;  // everything absent
  inputs.n_sampled = 0;
  const auto bundle = total_loss(tape, inputs, Phase::kPretext);
  CHECK(bundle.report.l_total == 0.0);
  CHECK(bundle.report.no_positives);
  CHECK(std::isfinite(bundle.report.l_total));
}

TEST_CASE("total_loss sums its parts and matches scalar addition") {
  Tape<double> tape(true);
  std::vector<Tape<double>::Id> parts;
  for (const double v : {0.1, 0.2, 0.3, 0.4, 0.5})
    parts.push_back(tape.leaf(Tensor<double>::scalar(v), false));
  CHECK(tape.scalar_value(tape.add_scalars(parts)) ==
        doctest::Approx(1.5).epsilon(1e-12));
}

TEST_CASE("total_loss gradient equals the sum of component gradients") {
  Rng rng(57, 0);
  const auto p = random01(rng, {2, 8});
  const auto t = random01(rng, {2, 8});
  Tensor<double> bt({2, 8});
  for (Eigen::Index i = 0; i < bt.v.size(); ++i)
    bt.v[i] = rng.bernoulli(0.5) ? 1.0 : 0.0;

  // combined graph: restored(p) + smooth_l1(p)
  Tape<double> tape(true);
  const auto pid = tape.leaf(p, true);
  const auto total =
      tape.add_scalars({tape.restored_loss(pid, t), tape.smooth_l1(pid, t)});
  tape.backward(total);

  Tape<double> t1(true);
  const auto id1 = t1.leaf(p, true);
  t1.backward(t1.restored_loss(id1, t));
  Tape<double> t2(true);
  const auto id2 = t2.leaf(p, true);
  t2.backward(t2.smooth_l1(id2, t));

  for (Eigen::Index i = 0; i < p.v.size(); ++i)
    CHECK(tape.grad(pid).v[i] ==
          doctest::Approx(t1.grad(id1).v[i] + t2.grad(id2).v[i])
              .epsilon(1e-12));
}

}  // TEST_SUITE
