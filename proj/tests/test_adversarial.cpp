#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "cotrain/adversarial.hpp"
#include "cotrain/losses.hpp"
#include "testutil.hpp"

using namespace cotrain;
using Catch::Approx;

TEST_CASE("sign convention: sign(0) = 0", "[adversarial]") {
  CHECK(detail::sign_of(0.2) == 1.0);
  CHECK(detail::sign_of(-0.3) == -1.0);
  CHECK(detail::sign_of(0.0) == 0.0);
}

TEST_CASE("fgsm with zero input gradient returns the input unchanged", "[adversarial]") {
  SegModelConfig mc;
  mc.base_width = 2;
  mc.depth = 1;
  mc.num_classes = 2;
  SegModel<double> m(mc, 1);
  for (auto* p : m.parameters()) std::fill(p->data.begin(), p->data.end(), 0.0);
  Rng rng = make_stream(1, RngPurpose::kInit);
  Tensor<double> x = rand_uniform<double>(Shape{1, 1, 8, 8}, rng);
  std::vector<std::uint8_t> labels(64, 0);
  Tensor<double> y = one_hot<double>(labels, 1, 2, 8, 8);
  Tensor<double> adv = fgsm(m, x, y, 0.03);
  CHECK(adv.data == x.data);
}

TEST_CASE("fgsm perturbs every nonzero-gradient pixel by exactly eps", "[adversarial]") {
  auto setup = testutil::make_trained_toy_model<double>(3, 30);
  const int sz = setup.spec.image_size;
  const auto& sample = setup.samples[0];
  Tensor<double> x(Shape{1, 1, sz, sz});
  x.data = sample.image.data;
  Tensor<double> y = one_hot<double>(sample.mask.labels, 1, 4, sz, sz);
  const double eps = 0.03;
  Tensor<double> adv = fgsm(setup.model, x, y, eps);
  int moved = 0;
  for (std::size_t i = 0; i < x.data.size(); ++i) {
    const double d = std::abs(adv.data[i] - x.data[i]);
    CHECK((d == Approx(0.0).margin(1e-15) || d == Approx(eps).margin(1e-12)));
    moved += d > eps / 2;
  }
  CHECK(moved > static_cast<int>(x.numel()) / 2);
}

TEST_CASE("fgsm raises the supervised loss on a trained model", "[adversarial]") {
  auto setup = testutil::make_trained_toy_model<double>(4, 60);
  const int sz = setup.spec.image_size;
  int raised = 0;
  const int trials = 50;
  for (int trial = 0; trial < trials; ++trial) {
    auto sample = synth_image<double>(setup.spec, 100 + trial);
    Tensor<double> x(Shape{1, 1, sz, sz});
    x.data = sample.image.data;
    Tensor<double> y = one_hot<double>(sample.mask.labels, 1, 4, sz, sz);
    Tensor<double> adv = fgsm(setup.model, x, y, 0.03);
    const double clean = cross_entropy_mean(y, setup.model.predict(x));
    const double attacked = cross_entropy_mean(y, setup.model.predict(adv));
    raised += attacked >= clean;
  }
  CHECK(raised >= trials * 9 / 10);
}

TEST_CASE("vat perturbation has L2 norm eps per image", "[adversarial]") {
  auto setup = testutil::make_trained_toy_model<double>(5, 30);
  const int sz = setup.spec.image_size;
  Tensor<double> batch(Shape{3, 1, sz, sz});
  for (int i = 0; i < 3; ++i) {
    auto sample = synth_image<double>(setup.spec, 200 + i);
    std::copy(sample.image.data.begin(), sample.image.data.end(),
              batch.data.begin() + static_cast<std::ptrdiff_t>(i) * sz * sz);
  }
  const double eps = 10.0;
  Rng vat_rng = make_stream(6, RngPurpose::kVatInit);
  Tensor<double> adv = vat_perturbation(setup.model, batch, eps, 1e-6, 1, vat_rng);
  for (int i = 0; i < 3; ++i) {
    double norm2 = 0;
    for (int j = 0; j < sz * sz; ++j) {
      const double d = adv.data[i * sz * sz + j] - batch.data[i * sz * sz + j];
      norm2 += d * d;
    }
    CHECK(std::sqrt(norm2) == Approx(eps).margin(1e-4));
  }
}

TEST_CASE("KL of a distribution with itself is zero", "[adversarial]") {
  Rng rng = make_stream(7, RngPurpose::kInit);
  Tensor<double> p = testutil::random_prob_map(1, 4, 4, 4, rng);
  CHECK(kl_mean(p, p) == Approx(0.0).margin(1e-14));
}

TEST_CASE("vat is deterministic for a fixed stream and leaves params alone", "[adversarial]") {
  auto setup = testutil::make_trained_toy_model<float>(8, 20);
  const int sz = setup.spec.image_size;
  auto sample = synth_image<float>(setup.spec, 300);
  Tensor<float> x(Shape{1, 1, sz, sz});
  x.data = sample.image.data;
  const std::uint64_t sum_before = setup.model.param_checksum();
  Rng r1 = make_stream(9, RngPurpose::kVatInit);
  Rng r2 = make_stream(9, RngPurpose::kVatInit);
  Tensor<float> a1 = vat_perturbation(setup.model, x, 1.0, 1e-6, 1, r1);
  Tensor<float> a2 = vat_perturbation(setup.model, x, 1.0, 1e-6, 1, r2);
  CHECK(a1.data == a2.data);
  Tensor<float> y = one_hot<float>(sample.mask.labels, 1, 4, sz, sz);
  fgsm(setup.model, x, y, 0.03f);
  CHECK(setup.model.param_checksum() == sum_before);
}

TEST_CASE("generate_for_batch produces one adversarial per input image", "[adversarial]") {
  auto setup = testutil::make_trained_toy_model<float>(10, 20);
  const int sz = setup.spec.image_size;
  const int b = 3;
  Tensor<float> labeled(Shape{b, 1, sz, sz});
  Tensor<float> unlabeled(Shape{b, 1, sz, sz});
  std::vector<std::uint8_t> labels;
  for (int i = 0; i < b; ++i) {
    auto s1 = synth_image<float>(setup.spec, 400 + i);
    auto s2 = synth_image<float>(setup.spec, 500 + i);
    std::copy(s1.image.data.begin(), s1.image.data.end(),
              labeled.data.begin() + static_cast<std::ptrdiff_t>(i) * sz * sz);
    std::copy(s2.image.data.begin(), s2.image.data.end(),
              unlabeled.data.begin() + static_cast<std::ptrdiff_t>(i) * sz * sz);
    labels.insert(labels.end(), s1.mask.labels.begin(), s1.mask.labels.end());
  }
  Tensor<float> onehot = one_hot<float>(labels, b, 4, sz, sz);
  AdvConfig cfg;
  Rng rng = make_stream(11, RngPurpose::kVatInit);
  auto out = generate_for_batch(setup.model, labeled, onehot, unlabeled, cfg, rng);
  CHECK(out.labeled.shape == labeled.shape);
  CHECK(out.unlabeled.shape == unlabeled.shape);

  // empty unlabeled batch: FGSM outputs only
  Tensor<float> empty;
  auto fg_only = generate_for_batch(setup.model, labeled, onehot, empty, cfg, rng);
  CHECK(fg_only.labeled.shape == labeled.shape);
  CHECK(fg_only.unlabeled.numel() == 0);
}

TEST_CASE("adv config must be strictly positive", "[adversarial]") {
  AdvConfig cfg;
  cfg.eps_fgsm = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}
