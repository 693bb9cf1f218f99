#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "cotrain/losses.hpp"
#include "testutil.hpp"

using namespace cotrain;
using Catch::Approx;

namespace {

Tensor<double> prob_from(std::vector<double> vals, int c) {
  // one pixel, c classes
  return Tensor<double>(Shape{1, c, 1, 1}, std::move(vals));
}

double scalar_loss(const std::function<ops::Id<double>(Tape<double>&)>& build) {
  Tape<double> t;
  return t.val(build(t)).data[0];
}

}  // namespace

TEST_CASE("sup_loss is zero on an exact one-hot match", "[losses]") {
  Tensor<double> pred = prob_from({1.0, 0.0}, 2);
  const double v = scalar_loss([&](Tape<double>& t) {
    return sup_loss(t, t.constant(pred), pred);
  });
  CHECK(v == Approx(0.0).margin(1e-7));  // log clamp leaves a ~1e-8 floor
}

TEST_CASE("sup_loss matches -ln p analytically", "[losses]") {
  Tensor<double> pred = prob_from({0.9, 0.1}, 2);
  Tensor<double> target = prob_from({1.0, 0.0}, 2);
  const double v = scalar_loss([&](Tape<double>& t) {
    return sup_loss(t, t.constant(pred), target);
  });
  CHECK(v == Approx(-std::log(0.9)).epsilon(1e-9));
  CHECK(v == Approx(0.10536).margin(1e-5));
}

TEST_CASE("sup_loss of a uniform prediction is ln C for any target", "[losses]") {
  Tensor<double> pred(Shape{1, 4, 2, 2}, 0.25);
  for (int cls = 0; cls < 4; ++cls) {
    std::vector<std::uint8_t> labels(4, static_cast<std::uint8_t>(cls));
    Tensor<double> target = one_hot<double>(labels, 1, 4, 2, 2);
    const double v = scalar_loss([&](Tape<double>& t) {
      return sup_loss(t, t.constant(pred), target);
    });
    CHECK(v == Approx(std::log(4.0)).epsilon(1e-9));
  }
}

TEST_CASE("sup_loss rejects shape mismatches", "[losses]") {
  Tape<double> t;
  auto pred = t.constant(Tensor<double>(Shape{1, 2, 2, 2}, 0.5));
  CHECK_THROWS_AS(sup_loss(t, pred, Tensor<double>(Shape{1, 3, 2, 2})), ShapeError);
}

TEST_CASE("jsd is zero for identical predictions", "[losses]") {
  Rng rng = make_stream(21, RngPurpose::kInit);
  Tensor<double> p = testutil::random_prob_map(2, 4, 3, 3, rng);
  const double v = scalar_loss([&](Tape<double>& t) {
    std::vector<ops::Id<double>> preds{t.constant(p), t.constant(p), t.constant(p)};
    return jsd_agreement(t, preds);
  });
  CHECK(v == Approx(0.0).margin(1e-12));
}

TEST_CASE("jsd of opposite one-hot pairs hits ln 2", "[losses]") {
  Tensor<double> p1 = prob_from({1.0, 0.0}, 2);
  Tensor<double> p2 = prob_from({0.0, 1.0}, 2);
  const double v = scalar_loss([&](Tape<double>& t) {
    std::vector<ops::Id<double>> preds{t.constant(p1), t.constant(p2)};
    return jsd_agreement(t, preds);
  });
  CHECK(v == Approx(std::log(2.0)).margin(1e-6));
}

TEST_CASE("jsd needs at least two predictions", "[losses]") {
  Tape<double> t;
  std::vector<ops::Id<double>> one{t.constant(prob_from({0.5, 0.5}, 2))};
  CHECK_THROWS_AS(jsd_agreement(t, one), ContractError);
}

TEST_CASE("jsd equals the mean KL to the mean distribution", "[losses]") {
  Rng rng = make_stream(22, RngPurpose::kInit);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Tensor<double>> ps;
    for (int i = 0; i < 3; ++i) ps.push_back(testutil::random_prob_map(1, 4, 2, 2, rng));
    Tensor<double> mean = ps[0];
    for (int i = 1; i < 3; ++i)
      for (std::size_t j = 0; j < mean.data.size(); ++j) mean.data[j] += ps[i].data[j];
    for (auto& v : mean.data) v /= 3.0;
    double kl_form = 0;
    for (const auto& p : ps) kl_form += kl_mean(p, mean);
    kl_form /= 3.0;
    const double entropy_form = scalar_loss([&](Tape<double>& t) {
      std::vector<ops::Id<double>> preds;
      for (const auto& p : ps) preds.push_back(t.constant(p));
      return jsd_agreement(t, preds);
    });
    CHECK(entropy_form == Approx(kl_form).margin(1e-10));
  }
}

TEST_CASE("jsd stays within [0, ln k] and is permutation symmetric", "[losses]") {
  Rng rng = make_stream(23, RngPurpose::kInit);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<Tensor<double>> ps;
    const int k = 2 + trial % 3;
    for (int i = 0; i < k; ++i) ps.push_back(testutil::random_prob_map(1, 3, 2, 2, rng));
    auto eval = [&](const std::vector<int>& order) {
      return scalar_loss([&](Tape<double>& t) {
        std::vector<ops::Id<double>> preds;
        for (int idx : order) preds.push_back(t.constant(ps[idx]));
        return jsd_agreement(t, preds);
      });
    };
    std::vector<int> order(k);
    std::iota(order.begin(), order.end(), 0);
    const double v = eval(order);
    CHECK(v >= -1e-12);
    CHECK(v <= std::log(static_cast<double>(k)) + 1e-12);
    std::reverse(order.begin(), order.end());
    CHECK(eval(order) == Approx(v).margin(1e-12));
  }
}

TEST_CASE("soft cross-entropy equals entropy at q = p", "[losses]") {
  Tensor<double> p = prob_from({0.5, 0.5}, 2);
  const double v = scalar_loss([&](Tape<double>& t) {
    return soft_cross_entropy(t, t.constant(p), t.constant(p));
  });
  CHECK(v == Approx(std::log(2.0)).epsilon(1e-9));
}

TEST_CASE("soft cross-entropy against a one-hot target", "[losses]") {
  Tensor<double> p = prob_from({1.0, 0.0}, 2);
  Tensor<double> q = prob_from({0.9, 0.1}, 2);
  const double v = scalar_loss([&](Tape<double>& t) {
    return soft_cross_entropy(t, t.constant(p), t.constant(q));
  });
  CHECK(v == Approx(0.10536).margin(1e-5));
}

TEST_CASE("H(p,q) = H(p) + KL(p||q) on random draws", "[losses]") {
  Rng rng = make_stream(24, RngPurpose::kInit);
  for (int trial = 0; trial < 1000; ++trial) {
    Tensor<double> p = testutil::random_prob_map(1, 4, 1, 1, rng);
    Tensor<double> q = testutil::random_prob_map(1, 4, 1, 1, rng);
    CHECK(cross_entropy_mean(p, q) ==
          Approx(entropy_mean(p) + kl_mean(p, q)).margin(1e-10));
    // Gibbs: H(p,q) >= H(p)
    CHECK(cross_entropy_mean(p, q) >= entropy_mean(p) - 1e-12);
  }
}

TEST_CASE("entropy hits its analytic values", "[losses]") {
  CHECK(entropy_mean(prob_from({1.0, 0.0, 0.0}, 3)) == 0.0);
  CHECK(entropy_mean(prob_from({0.25, 0.25, 0.25, 0.25}, 4)) ==
        Approx(std::log(4.0)).epsilon(1e-12));
  CHECK(entropy_mean(prob_from({0.5, 0.25, 0.25}, 3)) ==
        Approx(1.5 * std::log(2.0)).epsilon(1e-12));
  CHECK(entropy_mean(prob_from({0.5, 0.25, 0.25}, 3)) == Approx(1.0397).margin(1e-4));
}

TEST_CASE("loss bundle recomposes", "[losses]") {
  Rng rng = make_stream(25, RngPurpose::kInit);
  std::uniform_real_distribution<double> u(0.0, 2.0);
  for (int trial = 0; trial < 1000; ++trial) {
    LossBundle b;
    b.l_sup = u(rng);
    b.l_cot = u(rng);
    b.l_div = u(rng);
    b.lambda_cot = u(rng) * 0.5;
    b.lambda_div = u(rng) * 0.05;
    b.total = b.l_sup + b.lambda_cot * b.l_cot + b.lambda_div * b.l_div;
    CHECK(std::abs(b.total - b.recompose()) < 1e-6);
  }
}
