#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <set>

#include "cotrain/data.hpp"
#include "testutil.hpp"

using namespace cotrain;
using Catch::Approx;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string file_bytes(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

SynthSpec small_spec(std::uint64_t seed = 1) {
  SynthSpec spec;
  spec.image_size = 32;
  spec.num_train = 12;
  spec.num_val = 4;
  spec.seed = seed;
  return spec;
}

}  // namespace

TEST_CASE("tensor files round-trip through the 16-byte header format", "[data]") {
  TempDir dir("cotrain_tio_test");
  Rng rng = make_stream(41, RngPurpose::kInit);
  Tensor<float> t = rand_uniform<float>(Shape{1, 5, 7}, rng);
  const std::string path = (dir.path / "x.tns").string();
  save_tensor(path, t);
  Tensor<float> back = load_tensor<float>(path);
  CHECK(back.shape == t.shape);
  CHECK(back.data == t.data);
  SegMask m(3, 4);
  m.at(1, 2) = 3;
  save_mask((dir.path / "m.tns").string(), m);
  CHECK(load_mask((dir.path / "m.tns").string()) == m);
  CHECK_THROWS_AS(load_tensor<float>((dir.path / "m.tns").string()), IoError);  // dtype mismatch
}

TEST_CASE("generation is byte-deterministic per seed", "[data]") {
  TempDir a("cotrain_gen_a"), b("cotrain_gen_b"), c("cotrain_gen_c");
  generate_dataset<float>(small_spec(7), a.path.string());
  generate_dataset<float>(small_spec(7), b.path.string());
  generate_dataset<float>(small_spec(8), c.path.string());
  for (const auto& entry : fs::recursive_directory_iterator(a.path)) {
    if (!entry.is_regular_file()) continue;
    const auto rel = fs::relative(entry.path(), a.path);
    CHECK(file_bytes(entry.path()) == file_bytes(b.path / rel));
  }
  CHECK(file_bytes(a.path / "train/img_00000.tns") !=
        file_bytes(c.path / "train/img_00000.tns"));
}

TEST_CASE("every mask uses valid ids and all structures appear", "[data]") {
  SynthSpec spec = small_spec(9);
  spec.num_train = 40;
  int with_all = 0;
  for (int i = 0; i < spec.num_train; ++i) {
    auto sample = synth_image<float>(spec, i);
    std::set<int> classes;
    for (auto v : sample.mask.labels) {
      CHECK(v < spec.num_classes);
      classes.insert(v);
    }
    if (classes.size() == 4) ++with_all;
    for (float v : sample.image.data) {
      CHECK(v >= 0.0f);
      CHECK(v <= 1.0f);
    }
  }
  CHECK(with_all >= spec.num_train * 95 / 100);
}

TEST_CASE("zero noise gives near-piecewise-constant intensities", "[data]") {
  SynthSpec spec = small_spec(10);
  spec.noise_sigma = 0.0;
  spec.max_distractors = 0;  // distractor/clutter boundaries are intensity-only edges
  spec.max_clutter = 0;
  auto sample = synth_image<double>(spec, 0);
  // interior pixels of one class with identical neighbours vary only by the
  // (smooth) ramp: difference between horizontal neighbours of the same class
  // never exceeds the per-pixel ramp increment
  const int sz = spec.image_size;
  for (int y = 0; y < sz; ++y)
    for (int x = 0; x + 1 < sz; ++x) {
      if (sample.mask.at(y, x) != sample.mask.at(y, x + 1)) continue;
      // skip anti-aliasing bands: require both pixels' neighbours uniform
      bool uniform = true;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 2; ++dx) {
          const int yy = y + dy, xx = x + dx;
          if (yy < 0 || yy >= sz || xx < 0 || xx >= sz) continue;
          uniform = uniform && sample.mask.at(yy, xx) == sample.mask.at(y, x);
        }
      if (!uniform) continue;
      const double lhs = sample.image.data[static_cast<std::size_t>(y) * sz + x];
      const double rhs = sample.image.data[static_cast<std::size_t>(y) * sz + x + 1];
      CHECK(std::abs(lhs - rhs) < 0.2 / sz + 1e-9);
    }
}

TEST_CASE("split honours the labeled ratio and writes a stable manifest", "[data]") {
  TempDir dir("cotrain_split_test");
  SynthSpec spec = small_spec(11);
  spec.num_train = 20;
  generate_dataset<float>(spec, dir.path.string());

  auto ds = split_dataset<float>(dir.path.string(), 0.25, 5,
                                 (dir.path / "split_a.txt").string());
  CHECK(ds.labeled.size() == 5);
  CHECK(ds.unlabeled.size() == 15);
  CHECK(ds.val.size() == 4);
  CHECK(ds.labeled.masks.size() == 5);

  auto ds2 = split_dataset<float>(dir.path.string(), 0.25, 5,
                                  (dir.path / "split_b.txt").string());
  CHECK(file_bytes(dir.path / "split_a.txt") == file_bytes(dir.path / "split_b.txt"));

  // l_a = 1: no unlabeled pool
  auto full = split_dataset<float>(dir.path.string(), 1.0, 5);
  CHECK(full.unlabeled.size() == 0);
  CHECK(full.labeled.size() == 20);

  CHECK_THROWS_AS(split_dataset<float>(dir.path.string(), 0.001, 5), ContractError);
  CHECK_THROWS_AS(split_dataset<float>(dir.path.string(), 0.0, 5), ContractError);
}

TEST_CASE("N=200 at 5% yields 10 labeled and 190 unlabeled", "[data]") {
  // pure arithmetic check of the rounding rule
  CHECK(std::lround(0.05 * 200) == 10);
  TempDir dir("cotrain_split200");
  SynthSpec spec = small_spec(12);
  spec.image_size = 16;
  spec.num_train = 200;
  spec.num_val = 2;
  generate_dataset<float>(spec, dir.path.string());
  auto ds = split_dataset<float>(dir.path.string(), 0.05, 1);
  CHECK(ds.labeled.size() == 10);
  CHECK(ds.unlabeled.size() == 190);
}

TEST_CASE("the unlabeled set type carries no masks", "[data]") {
  // compile-time contract: UnlabeledSet has images only
  static_assert(sizeof(UnlabeledSet<float>) == sizeof(std::vector<Tensor<float>>));
  UnlabeledSet<float> u;
  u.images.push_back(Tensor<float>(Shape{1, 2, 2}));
  CHECK(u.size() == 1);
}

TEST_CASE("identity augmentation is exact", "[data]") {
  AugmentSpec spec;
  spec.enabled = true;
  spec.rotation_deg = 0;
  spec.flip_prob = 0;
  spec.crop_min = 1.0;  // disables cropping
  spec.crop_max = 1.0;
  Rng rng = make_stream(42, RngPurpose::kAugment);
  Tensor<float> img = rand_uniform<float>(Shape{1, 8, 8}, rng);
  SegMask mask(8, 8);
  mask.at(3, 3) = 2;
  auto [img2, mask2] = augment(img, &mask, spec, rng);
  CHECK(img2.data == img.data);
  CHECK(mask2 == mask);
}

TEST_CASE("flip is an exact involution", "[data]") {
  GeoTransform flip;
  flip.flip_h = true;
  Rng rng = make_stream(43, RngPurpose::kAugment);
  Tensor<float> img = rand_uniform<float>(Shape{2, 6, 6}, rng);
  Tensor<float> once = apply_to_field(img, flip);
  CHECK(once.data != img.data);
  CHECK(apply_to_field(once, flip).data == img.data);
  SegMask mask(6, 6);
  mask.at(0, 1) = 1;
  CHECK(apply_to_mask(apply_to_mask(mask, flip), flip) == mask);
}

TEST_CASE("augmented masks never invent class ids and images stay in range", "[data]") {
  AugmentSpec spec;  // defaults: rotation, flips, crops all active
  Rng rng = make_stream(44, RngPurpose::kAugment);
  SynthSpec sspec = small_spec(13);
  auto sample = synth_image<float>(sspec, 3);
  std::set<int> source_ids(sample.mask.labels.begin(), sample.mask.labels.end());
  for (int trial = 0; trial < 1000; ++trial) {
    auto [img, mask] = augment(sample.image, &sample.mask, spec, rng);
    CHECK(img.shape == sample.image.shape);
    CHECK(mask.labels.size() == sample.mask.labels.size());
    for (auto v : mask.labels) CHECK(source_ids.count(v) == 1);
    for (float v : img.data) {
      CHECK(v >= 0.0f);
      CHECK(v <= 1.0f);
    }
  }
}

TEST_CASE("malformed augment specs are rejected", "[data]") {
  AugmentSpec spec;
  spec.crop_min = 0.9;
  spec.crop_max = 0.8;
  CHECK_THROWS_AS(spec.validate(), ConfigError);
}
