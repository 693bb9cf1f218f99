#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "cotrain/errors.hpp"
#include "cotrain/rng.hpp"
#include "cotrain/tape.hpp"
#include "cotrain/tensor.hpp"

namespace cotrain {

struct SegModelConfig {
  int in_channels = 1;
  int num_classes = 4;
  int base_width = 8;
  int depth = 3;
  double dropout_rate = 0.1;

  void validate() const {
    if (depth < 1) throw ConfigError("segnet: depth must be >= 1");
    if (base_width < 1) throw ConfigError("segnet: base_width must be >= 1");
    if (num_classes < 2) throw ConfigError("segnet: num_classes must be >= 2");
    if (in_channels < 1) throw ConfigError("segnet: in_channels must be >= 1");
    if (dropout_rate < 0 || dropout_rate >= 1)
      throw ConfigError("segnet: dropout_rate must be in [0,1)");
  }

  bool operator==(const SegModelConfig&) const = default;
};

template <typename S>
struct ConvParam {
  Tensor<S> weight;  // [Cout,Cin,kh,kw]
  Tensor<S> bias;    // [Cout]
};

// U-Net style encoder-decoder: double-conv blocks, 2x2 max-pool encoder,
// nearest-upsample + conv decoder with skip concatenation, 1x1 head, softmax
// output. Dropout sits on the deepest encoder block and the bottleneck.
template <typename S>
class SegModel {
 public:
  using Id = typename Tape<S>::Id;

  SegModel(SegModelConfig cfg, std::uint64_t seed) : cfg_(cfg), seed_(seed) {
    cfg_.validate();
    Rng init = make_stream(seed, RngPurpose::kInit);
    dropout_rng_ = make_stream(seed, RngPurpose::kDropout);
    const int w = cfg_.base_width;
    int cin = cfg_.in_channels;
    for (int i = 0; i < cfg_.depth; ++i) {
      const int c = w << i;
      enc_.push_back({make_conv(cin, c, 3, init), make_conv(c, c, 3, init)});
      cin = c;
    }
    const int cb = w << cfg_.depth;
    bottleneck_ = {make_conv(cin, cb, 3, init), make_conv(cb, cb, 3, init)};
    for (int i = cfg_.depth - 1; i >= 0; --i) {
      const int c = w << i;
      dec_.push_back({make_conv(c * 2, c, 3, init),  // after upsample
                      make_conv(c * 2, c, 3, init),  // after skip concat
                      make_conv(c, c, 3, init)});
    }
    head_ = make_conv(w, cfg_.num_classes, 1, init);
    for (Tensor<S>* p : parameters()) p->set_requires_grad(true);
  }

  const SegModelConfig& config() const { return cfg_; }
  std::uint64_t seed() const { return seed_; }
  Rng& dropout_rng() { return dropout_rng_; }

  std::vector<Tensor<S>*> parameters() {
    std::vector<Tensor<S>*> out;
    auto push = [&out](ConvParam<S>& c) {
      out.push_back(&c.weight);
      out.push_back(&c.bias);
    };
    for (auto& block : enc_) {
      push(block.c1);
      push(block.c2);
    }
    push(bottleneck_.c1);
    push(bottleneck_.c2);
    for (auto& block : dec_) {
      push(block.up);
      push(block.c1);
      push(block.c2);
    }
    push(head_);
    return out;
  }

  std::vector<const Tensor<S>*> parameters() const {
    auto* self = const_cast<SegModel*>(this);
    auto ps = self->parameters();
    return {ps.begin(), ps.end()};
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const Tensor<S>* p : parameters()) n += p->numel();
    return n;
  }

  void zero_grad() {
    for (Tensor<S>* p : parameters()) p->zero_grad();
  }

  // Builds the forward graph. `train` enables dropout; `frozen` registers the
  // parameters as constants so no gradient buffers are touched (used for
  // adversarial generation and evaluation).
  Id forward(Tape<S>& t, Id input, bool train, bool frozen = false) {
    const Tensor<S>& x = t.val(input);
    if (x.shape.size() != 4 || x.shape[1] != cfg_.in_channels)
      throw ShapeError("segnet: expects [N," + std::to_string(cfg_.in_channels) + ",H,W], got " +
                       shape_str(x.shape));
    const int div = 1 << cfg_.depth;
    if (x.shape[2] % div != 0 || x.shape[3] % div != 0)
      throw ShapeError("segnet: H,W must be divisible by " + std::to_string(div));

    auto param = [&](ConvParam<S>& c) {
      return std::pair<Id, Id>{frozen ? t.constant(c.weight) : t.leaf(c.weight),
                               frozen ? t.constant(c.bias) : t.leaf(c.bias)};
    };
    auto conv3 = [&](Id in, ConvParam<S>& c) {
      auto [kw, kb] = param(c);
      return ops::relu(t, ops::conv2d(t, in, kw, kb, 1));
    };

    std::vector<Id> skips;
    Id cur = input;
    for (int i = 0; i < cfg_.depth; ++i) {
      cur = conv3(cur, enc_[i].c1);
      cur = conv3(cur, enc_[i].c2);
      if (i == cfg_.depth - 1)
        cur = ops::dropout(t, cur, cfg_.dropout_rate, train, dropout_rng_);
      skips.push_back(cur);
      cur = ops::max_pool2d(t, cur);
    }
    cur = conv3(cur, bottleneck_.c1);
    cur = conv3(cur, bottleneck_.c2);
    cur = ops::dropout(t, cur, cfg_.dropout_rate, train, dropout_rng_);
    for (int i = 0; i < cfg_.depth; ++i) {
      cur = conv3(ops::nearest_upsample2(t, cur), dec_[i].up);
      cur = ops::concat_channels(t, skips[cfg_.depth - 1 - i], cur);
      cur = conv3(cur, dec_[i].c1);
      cur = conv3(cur, dec_[i].c2);
    }
    auto [hw, hb] = param(head_);
    cur = ops::conv2d(t, cur, hw, hb, 0);
    return ops::softmax_channel(t, cur);
  }

  // Forward-only convenience: returns the probability map for a batch.
  Tensor<S> predict(const Tensor<S>& images, bool train = false) {
    Tape<S> t;
    auto in = t.constant(images);
    auto out = forward(t, in, train, /*frozen=*/true);
    return t.val(out);
  }

  // FNV-1a over the raw parameter bytes; used to assert side-effect freedom.
  std::uint64_t param_checksum() const {
    std::uint64_t h = 1469598103934665603ULL;
    for (const Tensor<S>* p : parameters())
      for (S v : p->data) {
        unsigned char bytes[sizeof(S)];
        std::memcpy(bytes, &v, sizeof(S));
        for (unsigned char b : bytes) h = (h ^ b) * 1099511628211ULL;
      }
    return h;
  }

  void ema_update_from(const SegModel& student, double alpha) {
    auto mine = parameters();
    auto theirs = student.parameters();
    if (mine.size() != theirs.size()) throw ContractError("ema: parameter list mismatch");
    for (std::size_t i = 0; i < mine.size(); ++i) {
      if (mine[i]->shape != theirs[i]->shape) throw ContractError("ema: shape mismatch");
      for (std::size_t j = 0; j < mine[i]->data.size(); ++j)
        mine[i]->data[j] = static_cast<S>(alpha * static_cast<double>(mine[i]->data[j]) +
                                          (1.0 - alpha) * static_cast<double>(theirs[i]->data[j]));
    }
  }

  void save_checkpoint(const std::string& path) const;
  static SegModel load_checkpoint(const std::string& path);

 private:
  struct EncBlock {
    ConvParam<S> c1, c2;
  };
  struct DecBlock {
    ConvParam<S> up, c1, c2;
  };

  static ConvParam<S> make_conv(int cin, int cout, int k, Rng& rng) {
    const double fan_in = static_cast<double>(cin) * k * k;
    ConvParam<S> c;
    c.weight = randn<S>(Shape{cout, cin, k, k}, rng, std::sqrt(2.0 / fan_in));
    c.bias = Tensor<S>(Shape{cout});
    return c;
  }

  SegModelConfig cfg_;
  std::uint64_t seed_ = 0;
  Rng dropout_rng_;
  std::vector<EncBlock> enc_;
  EncBlock bottleneck_;
  std::vector<DecBlock> dec_;
  ConvParam<S> head_;
};

// --------------------------------------------------------------------------
// Checkpoint format: magic "DCTSEG01", config block, then parameter tensors
// in construction order, each as u32 rank + u32 dims + little-endian f32 data.
// --------------------------------------------------------------------------

namespace detail {
inline constexpr char kCkptMagic[8] = {'D', 'C', 'T', 'S', 'E', 'G', '0', '1'};

template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw IoError("checkpoint: truncated file");
  return v;
}
}  // namespace detail

template <typename S>
void SegModel<S>::save_checkpoint(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("checkpoint: cannot open " + path + " for writing");
  os.write(detail::kCkptMagic, sizeof(detail::kCkptMagic));
  detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(cfg_.in_channels));
  detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(cfg_.num_classes));
  detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(cfg_.base_width));
  detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(cfg_.depth));
  detail::write_pod<double>(os, cfg_.dropout_rate);
  auto params = parameters();
  detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  for (const Tensor<S>* p : params) {
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(p->shape.size()));
    for (int d : p->shape) detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    for (S v : p->data) detail::write_pod<float>(os, static_cast<float>(v));
  }
  if (!os) throw IoError("checkpoint: write failed for " + path);
}

template <typename S>
SegModel<S> SegModel<S>::load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("checkpoint: cannot open " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, detail::kCkptMagic, 8) != 0)
    throw IoError("checkpoint: bad magic in " + path);
  SegModelConfig cfg;
  cfg.in_channels = static_cast<int>(detail::read_pod<std::uint32_t>(is));
  cfg.num_classes = static_cast<int>(detail::read_pod<std::uint32_t>(is));
  cfg.base_width = static_cast<int>(detail::read_pod<std::uint32_t>(is));
  cfg.depth = static_cast<int>(detail::read_pod<std::uint32_t>(is));
  cfg.dropout_rate = detail::read_pod<double>(is);
  SegModel model(cfg, /*seed=*/0);
  auto params = model.parameters();
  const auto count = detail::read_pod<std::uint32_t>(is);
  if (count != params.size()) throw IoError("checkpoint: tensor count mismatch in " + path);
  for (Tensor<S>* p : params) {
    const auto rank = detail::read_pod<std::uint32_t>(is);
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<int>(detail::read_pod<std::uint32_t>(is));
    if (shape != p->shape) throw IoError("checkpoint: tensor shape mismatch in " + path);
    for (S& v : p->data) v = static_cast<S>(detail::read_pod<float>(is));
  }
  return model;
}

}  // namespace cotrain
