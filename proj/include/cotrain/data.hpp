#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "cotrain/errors.hpp"
#include "cotrain/metrics.hpp"
#include "cotrain/rng.hpp"
#include "cotrain/tensor.hpp"

namespace cotrain {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Flat binary tensor files: 16-byte header (magic "TNSR", u32 dtype, u32 rank,
// u32 reserved), then u32 dims and little-endian payload.
// ---------------------------------------------------------------------------

namespace tio {

inline constexpr char kMagic[4] = {'T', 'N', 'S', 'R'};
inline constexpr std::uint32_t kF32 = 1;
inline constexpr std::uint32_t kU8 = 3;

template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw IoError("tensor file: truncated");
  return v;
}

inline void write_header(std::ostream& os, std::uint32_t dtype, const Shape& shape) {
  os.write(kMagic, 4);
  write_pod<std::uint32_t>(os, dtype);
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(shape.size()));
  write_pod<std::uint32_t>(os, 0);
  for (int d : shape) write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(d));
}

inline Shape read_header(std::istream& is, std::uint32_t expect_dtype, const std::string& path) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0) throw IoError("tensor file: bad magic in " + path);
  const auto dtype = read_pod<std::uint32_t>(is);
  if (dtype != expect_dtype) throw IoError("tensor file: unexpected dtype in " + path);
  const auto rank = read_pod<std::uint32_t>(is);
  read_pod<std::uint32_t>(is);  // reserved
  Shape shape(rank);
  for (auto& d : shape) d = static_cast<int>(read_pod<std::uint32_t>(is));
  return shape;
}

}  // namespace tio

template <typename S>
void save_tensor(const std::string& path, const Tensor<S>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  tio::write_header(os, tio::kF32, t.shape);
  for (S v : t.data) tio::write_pod<float>(os, static_cast<float>(v));
  if (!os) throw IoError("write failed for " + path);
}

template <typename S>
Tensor<S> load_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  Tensor<S> t(tio::read_header(is, tio::kF32, path));
  for (S& v : t.data) v = static_cast<S>(tio::read_pod<float>(is));
  return t;
}

inline void save_mask(const std::string& path, const SegMask& m) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  tio::write_header(os, tio::kU8, Shape{m.h, m.w});
  os.write(reinterpret_cast<const char*>(m.labels.data()),
           static_cast<std::streamsize>(m.labels.size()));
  if (!os) throw IoError("write failed for " + path);
}

inline SegMask load_mask(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  const Shape shape = tio::read_header(is, tio::kU8, path);
  if (shape.size() != 2) throw IoError("mask file: expects rank 2 in " + path);
  SegMask m(shape[0], shape[1]);
  is.read(reinterpret_cast<char*>(m.labels.data()), static_cast<std::streamsize>(m.labels.size()));
  if (!is) throw IoError("mask file: truncated " + path);
  return m;
}

// ---------------------------------------------------------------------------
// Synthetic dataset: nested ellipses on a noisy background. The inner disc
// and the detached ellipse share one intensity distribution, so telling them
// apart requires spatial context, not just intensity.
// ---------------------------------------------------------------------------

struct SynthSpec {
  int image_size = 64;
  int num_classes = 4;  // 0 background, 1 detached ellipse, 2 ring, 3 inner disc
  int num_train = 200;
  int num_val = 40;
  double noise_sigma = 0.08;
  double inner_radius_min = 0.08;  // fractions of image_size
  double inner_radius_max = 0.16;
  double ring_thickness_min = 0.045;
  double ring_thickness_max = 0.09;
  int max_distractors = 2;  // background blobs sharing the foreground intensity
  int max_clutter = 6;      // low-contrast background patches in the ring band
  std::uint64_t seed = 1;

  void validate() const {
    if (image_size < 8) throw ConfigError("synth: image_size too small");
    if (num_classes < 2 || num_classes > 4) throw ConfigError("synth: num_classes must be 2..4");
    if (num_train < 1 || num_val < 1) throw ConfigError("synth: need train and val images");
    if (noise_sigma < 0) throw ConfigError("synth: noise_sigma must be >= 0");
    if (max_distractors < 0 || max_clutter < 0)
      throw ConfigError("synth: distractor/clutter counts must be >= 0");
  }
};

namespace detail {

struct Ellipse {
  double cx, cy, a, b, theta;

  bool contains(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    const double ct = std::cos(theta), st = std::sin(theta);
    const double u = (dx * ct + dy * st) / a;
    const double v = (-dx * st + dy * ct) / b;
    return u * u + v * v <= 1.0;
  }
};

// Distractor blobs approach the blood-pool intensity and clutter patches sit
// in the ring's intensity band; both stay background in the mask, so the
// labels depend on spatial context, not intensity alone.
struct SceneGeometry {
  Ellipse inner, outer, detached;
  std::vector<Ellipse> distractors;
  std::vector<Ellipse> clutter;
  std::vector<double> clutter_intensity;
  double intensity[4];  // per class
  double distractor_intensity;
  double ramp_x, ramp_y;

  int class_at(double x, double y, int num_classes) const {
    if (inner.contains(x, y)) return num_classes >= 4 ? 3 : num_classes - 1;
    if (num_classes >= 3 && outer.contains(x, y)) return 2;
    if (num_classes >= 4 && detached.contains(x, y)) return 1;
    return 0;
  }

  // Background intensity override at (x, y), or -1 when plain background.
  double background_override(double x, double y) const {
    for (const auto& e : distractors)
      if (e.contains(x, y)) return distractor_intensity;
    for (std::size_t i = 0; i < clutter.size(); ++i)
      if (clutter[i].contains(x, y)) return clutter_intensity[i];
    return -1.0;
  }
};

inline SceneGeometry draw_scene(const SynthSpec& spec, Rng& rng) {
  auto uni = [&rng](double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
  };
  constexpr double kPi = 3.14159265358979323846;
  const double sz = spec.image_size;
  SceneGeometry g{};
  const double cx = sz / 2 + uni(-sz / 8, sz / 8);
  const double cy = sz / 2 + uni(-sz / 8, sz / 8);
  const double r1 = uni(spec.inner_radius_min, spec.inner_radius_max) * sz;
  const double aspect = uni(0.8, 1.25);
  const double theta = uni(0, kPi);
  g.inner = {cx, cy, r1 * aspect, r1 / aspect, theta};
  const double r2 = r1 + uni(spec.ring_thickness_min, spec.ring_thickness_max) * sz;
  g.outer = {cx, cy, r2 * aspect, r2 / aspect, theta};
  const double phi = uni(0, 2 * kPi);
  const double da = uni(0.06, 0.12) * sz;
  const double db = uni(0.04, 0.085) * sz;
  double ex = cx + (r2 * aspect + da * 0.7) * std::cos(phi);
  double ey = cy + (r2 / aspect + da * 0.7) * std::sin(phi);
  ex = std::clamp(ex, da + 1.0, sz - da - 1.0);
  ey = std::clamp(ey, da + 1.0, sz - da - 1.0);
  g.detached = {ex, ey, da, db, phi + kPi / 2 + uni(-0.4, 0.4)};

  const double blood = 0.72 + uni(-0.05, 0.05);
  g.intensity[0] = 0.18 + uni(-0.04, 0.04);
  g.intensity[1] = blood;  // same tissue intensity as the inner disc
  g.intensity[2] = 0.45 + uni(-0.05, 0.05);
  g.intensity[3] = blood;
  // close to the blood pool but not identical: a weak local cue that keeps
  // the distractor-vs-structure decision context-dependent without stalling
  // early training
  g.distractor_intensity = 0.63 + uni(-0.03, 0.03);
  g.ramp_x = uni(-0.1, 0.1);
  g.ramp_y = uni(-0.1, 0.1);

  const int n_distract =
      spec.max_distractors > 0
          ? std::uniform_int_distribution<int>(1, spec.max_distractors)(rng)
          : 0;
  for (int d = 0; d < n_distract; ++d) {
    const double ra = uni(0.03, 0.065) * sz;
    const double rb = uni(0.025, 0.055) * sz;
    // keep distractors clear of the heart structure
    for (int attempt = 0; attempt < 16; ++attempt) {
      const double dx = uni(ra + 1.0, sz - ra - 1.0);
      const double dy = uni(ra + 1.0, sz - ra - 1.0);
      const double dist = std::hypot(dx - cx, dy - cy);
      if (dist < r2 * 1.45 + ra || std::hypot(dx - ex, dy - ey) < da + ra) continue;
      g.distractors.push_back({dx, dy, ra, rb, uni(0, kPi)});
      break;
    }
  }
  // clutter may sit anywhere, including against the structures
  const int n_clutter =
      spec.max_clutter > 0
          ? std::uniform_int_distribution<int>(std::min(3, spec.max_clutter), spec.max_clutter)(
                rng)
          : 0;
  for (int d = 0; d < n_clutter; ++d) {
    const double ra = uni(0.04, 0.12) * sz;
    const double rb = uni(0.03, 0.09) * sz;
    g.clutter.push_back({uni(0.0, sz), uni(0.0, sz), ra, rb, uni(0, kPi)});
    g.clutter_intensity.push_back(uni(0.28, 0.55));
  }
  return g;
}

}  // namespace detail

template <typename S>
struct SynthImage {
  Tensor<S> image;  // [1,H,W] in [0,1]
  SegMask mask;
};

// Renders one image: 2x2 supersampled class coverage for anti-aliased edges,
// class-dependent intensity plus a mild linear ramp and Gaussian noise.
template <typename S>
SynthImage<S> synth_image(const SynthSpec& spec, std::uint64_t index) {
  Rng rng = make_stream(spec.seed, RngPurpose::kSynthesis, index);
  const auto scene = detail::draw_scene(spec, rng);
  const int sz = spec.image_size;
  SynthImage<S> out;
  out.image = Tensor<S>(Shape{1, sz, sz});
  out.mask = SegMask(sz, sz);
  std::normal_distribution<double> noise(0.0, spec.noise_sigma);
  int counts[4];
  for (int y = 0; y < sz; ++y) {
    for (int x = 0; x < sz; ++x) {
      counts[0] = counts[1] = counts[2] = counts[3] = 0;
      double intensity = 0;
      for (int sy = 0; sy < 2; ++sy)
        for (int sx = 0; sx < 2; ++sx) {
          const double px = x + 0.25 + 0.5 * sx, py = y + 0.25 + 0.5 * sy;
          const int c = scene.class_at(px, py, spec.num_classes);
          ++counts[c];
          double v = scene.intensity[c];
          if (c == 0) {
            const double over = scene.background_override(px, py);
            if (over >= 0) v = over;
          }
          intensity += v;
        }
      intensity *= 0.25;
      intensity += scene.ramp_x * (static_cast<double>(x) / sz - 0.5) +
                   scene.ramp_y * (static_cast<double>(y) / sz - 0.5);
      if (spec.noise_sigma > 0) intensity += noise(rng);
      out.image.data[static_cast<std::size_t>(y) * sz + x] =
          static_cast<S>(std::clamp(intensity, 0.0, 1.0));
      int best = 0;
      for (int c = 1; c < 4; ++c)
        if (counts[c] > counts[best]) best = c;
      out.mask.labels[static_cast<std::size_t>(y) * sz + x] = static_cast<std::uint8_t>(best);
    }
  }
  return out;
}

// Writes train/ and val/ image+mask pairs and a manifest with lines
// "<filename>,<split>,<has_mask>".
template <typename S>
void generate_dataset(const SynthSpec& spec, const std::string& dir) {
  spec.validate();
  fs::create_directories(fs::path(dir) / "train");
  fs::create_directories(fs::path(dir) / "val");
  std::ofstream manifest(fs::path(dir) / "manifest.txt");
  if (!manifest) throw IoError("cannot write manifest in " + dir);
  char name[64];
  for (int i = 0; i < spec.num_train + spec.num_val; ++i) {
    const bool is_val = i >= spec.num_train;
    const int local = is_val ? i - spec.num_train : i;
    const char* split = is_val ? "val" : "train";
    auto sample = synth_image<S>(spec, static_cast<std::uint64_t>(i));
    std::snprintf(name, sizeof(name), "%s/img_%05d.tns", split, local);
    save_tensor(dir + "/" + name, sample.image);
    manifest << name << ',' << split << ",1\n";
    std::snprintf(name, sizeof(name), "%s/msk_%05d.tns", split, local);
    save_mask(dir + "/" + name, sample.mask);
    manifest << name << ',' << split << ",1\n";
  }
}

// ---------------------------------------------------------------------------
// Split. The unlabeled set carries images only: masks of unlabeled images
// stay on disk and have no representation in this type.
// ---------------------------------------------------------------------------

template <typename S>
struct LabeledSet {
  std::vector<Tensor<S>> images;
  std::vector<SegMask> masks;
  std::size_t size() const { return images.size(); }
};

template <typename S>
struct UnlabeledSet {
  std::vector<Tensor<S>> images;
  std::size_t size() const { return images.size(); }
};

template <typename S>
struct DatasetSplit {
  LabeledSet<S> labeled;
  UnlabeledSet<S> unlabeled;
  LabeledSet<S> val;
};

namespace detail {
inline int count_split_images(const std::string& dir, const char* split) {
  std::ifstream manifest(fs::path(dir) / "manifest.txt");
  if (!manifest) throw IoError("missing manifest in " + dir);
  int n = 0;
  std::string line;
  while (std::getline(manifest, line))
    if (line.find(std::string(split) + "/img_") == 0) ++n;
  return n;
}
}  // namespace detail

// Loads a dataset directory and splits its training images into labeled and
// unlabeled pools: seeded shuffle, first round(l_a * N) are labeled. Writes
// the assignment to `split_file` when non-empty (one "<filename>,<role>" line
// per training image).
template <typename S>
DatasetSplit<S> split_dataset(const std::string& dir, double labeled_ratio, std::uint64_t seed,
                              const std::string& split_file = "") {
  if (labeled_ratio <= 0 || labeled_ratio > 1)
    throw ContractError("split: labeled_ratio must be in (0,1]");
  const int n_train = detail::count_split_images(dir, "train");
  const int n_val = detail::count_split_images(dir, "val");
  if (n_train == 0) throw IoError("split: no training images in " + dir);
  const int n_labeled = static_cast<int>(std::lround(labeled_ratio * n_train));
  if (n_labeled < 1) throw ContractError("split: labeled_ratio yields zero labeled images");

  std::vector<int> order(n_train);
  std::iota(order.begin(), order.end(), 0);
  Rng rng = make_stream(seed, RngPurpose::kSplit);
  std::shuffle(order.begin(), order.end(), rng);

  DatasetSplit<S> ds;
  char name[64];
  std::ofstream sf;
  if (!split_file.empty()) {
    sf.open(split_file);
    if (!sf) throw IoError("cannot write split file " + split_file);
  }
  for (int k = 0; k < n_train; ++k) {
    const int idx = order[k];
    std::snprintf(name, sizeof(name), "train/img_%05d.tns", idx);
    const std::string img_path = dir + "/" + name;
    const bool labeled = k < n_labeled;
    if (sf) sf << name << ',' << (labeled ? "labeled" : "unlabeled") << '\n';
    if (labeled) {
      ds.labeled.images.push_back(load_tensor<S>(img_path));
      std::snprintf(name, sizeof(name), "train/msk_%05d.tns", idx);
      ds.labeled.masks.push_back(load_mask(dir + "/" + name));
    } else {
      ds.unlabeled.images.push_back(load_tensor<S>(img_path));
    }
  }
  for (int i = 0; i < n_val; ++i) {
    std::snprintf(name, sizeof(name), "val/img_%05d.tns", i);
    ds.val.images.push_back(load_tensor<S>(dir + "/" + name));
    std::snprintf(name, sizeof(name), "val/msk_%05d.tns", i);
    ds.val.masks.push_back(load_mask(dir + "/" + name));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Augmentation: flip, rotation, area crop + resize back. Images resample
// bilinearly, masks by nearest neighbour, so labels stay categorical.
// ---------------------------------------------------------------------------

struct AugmentSpec {
  bool enabled = true;
  double rotation_deg = 10.0;  // uniform in +-rotation_deg
  double flip_prob = 0.5;
  double crop_min = 0.85;  // area fraction; crop_min >= 1 disables cropping
  double crop_max = 0.95;

  void validate() const {
    if (crop_min > crop_max) throw ConfigError("augment: crop_min > crop_max");
    if (crop_max <= 0) throw ConfigError("augment: crop_max must be positive");
    if (flip_prob < 0 || flip_prob > 1) throw ConfigError("augment: flip_prob must be in [0,1]");
  }
};

struct GeoTransform {
  bool flip_h = false;
  double angle_rad = 0;
  double crop_frac = 1.0;  // >= 1 means no crop
  double crop_ox = 0;      // crop window position in [0,1] of the slack
  double crop_oy = 0;
};

inline GeoTransform draw_transform(const AugmentSpec& spec, Rng& rng) {
  spec.validate();
  GeoTransform tr;
  if (!spec.enabled) return tr;
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  tr.flip_h = u01(rng) < spec.flip_prob;
  if (spec.rotation_deg > 0) {
    std::uniform_real_distribution<double> ang(-spec.rotation_deg, spec.rotation_deg);
    tr.angle_rad = ang(rng) * 3.14159265358979323846 / 180.0;
  }
  if (spec.crop_min < 1.0) {
    std::uniform_real_distribution<double> cf(spec.crop_min, spec.crop_max);
    tr.crop_frac = cf(rng);
    tr.crop_ox = u01(rng);
    tr.crop_oy = u01(rng);
  }
  return tr;
}

namespace detail {

// Maps an output pixel centre to source coordinates under the transform.
struct CoordMapper {
  const GeoTransform& tr;
  int h, w;

  void map(double yo, double xo, double& ys, double& xs) const {
    double y = yo, x = xo;
    if (tr.crop_frac < 1.0) {
      const double s = std::sqrt(tr.crop_frac);
      const double ch = s * h, cw = s * w;
      const double oy = tr.crop_oy * (h - ch), ox = tr.crop_ox * (w - cw);
      y = oy + (y + 0.5) * ch / h - 0.5;
      x = ox + (x + 0.5) * cw / w - 0.5;
    }
    if (tr.angle_rad != 0) {
      const double cy = (h - 1) / 2.0, cx = (w - 1) / 2.0;
      const double ct = std::cos(-tr.angle_rad), st = std::sin(-tr.angle_rad);
      const double dy = y - cy, dx = x - cx;
      y = cy + dx * st + dy * ct;
      x = cx + dx * ct - dy * st;
    }
    if (tr.flip_h) x = (w - 1) - x;
    ys = y;
    xs = x;
  }

  bool is_identity() const { return !tr.flip_h && tr.angle_rad == 0 && tr.crop_frac >= 1.0; }
};

template <typename S>
S bilinear_at(const S* plane, int h, int w, double y, double x) {
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  const int y0 = static_cast<int>(y), x0 = static_cast<int>(x);
  const int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
  const double fy = y - y0, fx = x - x0;
  const double v00 = plane[y0 * w + x0], v01 = plane[y0 * w + x1];
  const double v10 = plane[y1 * w + x0], v11 = plane[y1 * w + x1];
  return static_cast<S>((1 - fy) * ((1 - fx) * v00 + fx * v01) +
                        fy * ((1 - fx) * v10 + fx * v11));
}

}  // namespace detail

// Bilinear resampling of a [C,H,W] field. Exact passthrough for pure flips
// and the identity transform.
template <typename S>
Tensor<S> apply_to_field(const Tensor<S>& field, const GeoTransform& tr) {
  if (field.shape.size() != 3) throw ShapeError("augment: expects [C,H,W]");
  const int c = field.shape[0], h = field.shape[1], w = field.shape[2];
  detail::CoordMapper mapper{tr, h, w};
  if (mapper.is_identity()) return field;
  Tensor<S> out(field.shape);
  const bool pure_flip = tr.flip_h && tr.angle_rad == 0 && tr.crop_frac >= 1.0;
  for (int ch = 0; ch < c; ++ch) {
    const S* src = field.data.data() + static_cast<std::size_t>(ch) * h * w;
    S* dst = out.data.data() + static_cast<std::size_t>(ch) * h * w;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        if (pure_flip) {
          dst[y * w + x] = src[y * w + (w - 1 - x)];
          continue;
        }
        double ys, xs;
        mapper.map(y, x, ys, xs);
        dst[y * w + x] = detail::bilinear_at(src, h, w, ys, xs);
      }
  }
  return out;
}

inline SegMask apply_to_mask(const SegMask& mask, const GeoTransform& tr) {
  detail::CoordMapper mapper{tr, mask.h, mask.w};
  if (mapper.is_identity()) return mask;
  SegMask out(mask.h, mask.w);
  for (int y = 0; y < mask.h; ++y)
    for (int x = 0; x < mask.w; ++x) {
      double ys, xs;
      mapper.map(y, x, ys, xs);
      const int yi = std::clamp(static_cast<int>(std::lround(ys)), 0, mask.h - 1);
      const int xi = std::clamp(static_cast<int>(std::lround(xs)), 0, mask.w - 1);
      out.at(y, x) = mask.at(yi, xi);
    }
  return out;
}

// Draws one transform and applies it to an image and (optionally) its mask.
template <typename S>
std::pair<Tensor<S>, SegMask> augment(const Tensor<S>& image, const SegMask* mask,
                                      const AugmentSpec& spec, Rng& rng) {
  const GeoTransform tr = draw_transform(spec, rng);
  return {apply_to_field(image, tr), mask ? apply_to_mask(*mask, tr) : SegMask{}};
}

}  // namespace cotrain
