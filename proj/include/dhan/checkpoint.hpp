#pragma once

// Binary checkpoint. Layout (all integers little-endian):
//   "DHAN" | u32 version | str config | u32 count | count x tensor
//   | u64 optimizer step | u64 epoch | u64 episodes | f64 baseline | str rng
// str = u32 length + bytes; tensor = str name | u32 rank | rank x u64 extent
// | float32 payload, row-major.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dhan/config.hpp"
#include "dhan/trainer.hpp"

namespace dhan {

inline constexpr char kCheckpointMagic[4] = {'D', 'H', 'A', 'N'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StoredTensor {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  std::string config_text;
  std::vector<StoredTensor> tensors;
  std::uint64_t optimizer_step = 0;
  std::uint64_t epoch = 0;
  std::uint64_t episodes = 0;
  double baseline = 0.0;
  std::string rng_state;

  const StoredTensor* find(const std::string& name) const {
    for (const auto& t : tensors) {
      if (t.name == name) return &t;
    }
    return nullptr;
  }
};

namespace detail {

class ByteWriter {
 public:
  void u32(std::uint32_t v) { put(v); }
  void u64(std::uint64_t v) { put(v); }
  void f32(float v) { put(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { put(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes_.insert(bytes_.end(), s.begin(), s.end());
  }
  void raw(const char* p, std::size_t n) { bytes_.insert(bytes_.end(), p, p + n); }
  std::vector<char> take() { return std::move(bytes_); }

 private:
  template <class U>
  void put(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  std::vector<char> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::vector<char>& b) : b_(b) {}
  std::uint32_t u32() { return get<std::uint32_t>(); }
  std::uint64_t u64() { return get<std::uint64_t>(); }
  float f32() { return std::bit_cast<float>(get<std::uint32_t>()); }
  double f64() { return std::bit_cast<double>(get<std::uint64_t>()); }
  std::string str() {
    const auto n = u32();
    need(n);
    std::string s(b_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  void raw(char* out, std::size_t n) {
    need(n);
    std::memcpy(out, b_.data() + pos_, n);
    pos_ += n;
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  void need(std::size_t n) const {
    if (b_.size() - pos_ < n) throw CheckpointError("checkpoint: truncated file");
  }
  template <class U>
  U get() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<unsigned char>(b_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return v;
  }
  const std::vector<char>& b_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<char> serialize(const Checkpoint& c) {
  detail::ByteWriter w;
  w.raw(kCheckpointMagic, 4);
  w.u32(kCheckpointVersion);
  w.str(c.config_text);
  w.u32(static_cast<std::uint32_t>(c.tensors.size()));
  for (const auto& t : c.tensors) {
    if (t.values.size() != shape_numel(t.shape)) throw CheckpointError("checkpoint: tensor '" + t.name + "' size does not match its shape");
    w.str(t.name);
    w.u32(static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) w.u64(d);
    for (auto v : t.values) w.f32(v);
  }
  w.u64(c.optimizer_step);
  w.u64(c.epoch);
  w.u64(c.episodes);
  w.f64(c.baseline);
  w.str(c.rng_state);
  return w.take();
}

inline Checkpoint deserialize(const std::vector<char>& bytes) {
  detail::ByteReader r(bytes);
  char magic[4];
  r.raw(magic, 4);
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) throw CheckpointError("checkpoint: bad magic bytes");
  const auto version = r.u32();
  if (version != kCheckpointVersion) {
    throw CheckpointError("checkpoint: format version " + std::to_string(version) + " does not match supported version " +
                          std::to_string(kCheckpointVersion));
  }
  Checkpoint c;
  c.config_text = r.str();
  const auto count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    StoredTensor t;
    t.name = r.str();
    const auto rank = r.u32();
    for (std::uint32_t d = 0; d < rank; ++d) t.shape.push_back(r.u64());
    t.values.resize(shape_numel(t.shape));
    for (auto& v : t.values) v = r.f32();
    c.tensors.push_back(std::move(t));
  }
  c.optimizer_step = r.u64();
  c.epoch = r.u64();
  c.episodes = r.u64();
  c.baseline = r.f64();
  c.rng_state = r.str();
  if (!r.done()) throw CheckpointError("checkpoint: trailing bytes");
  return c;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& c) {
  const auto bytes = serialize(c);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw CheckpointError("cannot write checkpoint " + path);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw CheckpointError("failed writing checkpoint " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot read checkpoint " + path);
  std::vector<char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

template <class T>
Checkpoint capture(const RunConfig& cfg, const Model<T>& model, const Trainer<T>* trainer) {
  Checkpoint c;
  c.config_text = to_text(cfg);
  auto params = model.parameters();
  for (const auto& p : params) c.tensors.push_back({p.name, p.tensor.shape(), {p.tensor.data().begin(), p.tensor.data().end()}});
  if (trainer) {
    const auto& opt = trainer->optimizer_state();
    for (std::size_t k = 0; k < params.size() && k < opt.m.size(); ++k) {
      if (!params[k].trainable) continue;
      c.tensors.push_back({"adam.m/" + params[k].name, params[k].tensor.shape(), {opt.m[k].begin(), opt.m[k].end()}});
      c.tensors.push_back({"adam.v/" + params[k].name, params[k].tensor.shape(), {opt.v[k].begin(), opt.v[k].end()}});
    }
    c.optimizer_step = opt.step;
    c.epoch = trainer->epoch();
    c.episodes = trainer->episodes();
    c.baseline = trainer->baseline();
    std::ostringstream rng;
    rng << trainer->shuffle_rng();
    c.rng_state = rng.str();
  }
  return c;
}

// Copies stored values into an already constructed model of matching shape.
template <class T>
void restore_model(const Checkpoint& c, Model<T>& model) {
  for (auto& p : model.parameters()) {
    const auto* t = c.find(p.name);
    if (!t) throw CheckpointError("checkpoint: missing tensor " + p.name);
    if (t->shape != p.tensor.shape()) {
      throw CheckpointError("checkpoint: tensor " + p.name + " has shape " + shape_str(t->shape) + ", model expects " +
                            shape_str(p.tensor.shape()));
    }
    auto dst = p.tensor.data_mut();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(t->values[i]);
  }
}

template <class T>
void restore_trainer(const Checkpoint& c, Trainer<T>& trainer) {
  auto& params = trainer.params();
  auto& opt = trainer.optimizer_state();
  opt.reset(params);
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (!params[k].trainable) continue;
    const auto* m = c.find("adam.m/" + params[k].name);
    const auto* v = c.find("adam.v/" + params[k].name);
    if (!m || !v) throw CheckpointError("checkpoint: missing optimizer state for " + params[k].name);
    opt.m[k].assign(m->values.begin(), m->values.end());
    opt.v[k].assign(v->values.begin(), v->values.end());
  }
  opt.step = c.optimizer_step;
  std::istringstream rng(c.rng_state);
  rng >> trainer.shuffle_rng();
  if (!rng) throw CheckpointError("checkpoint: corrupt rng state");
  trainer.restore(c.epoch, c.baseline, c.episodes);
}

}  // namespace dhan
