#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "prcn/connectome.hpp"
#include "prcn/layers/module.hpp"

namespace prcn {

class Sequential {
 public:
  Sequential() = default;
  Sequential(Sequential&&) = default;
  Sequential& operator=(Sequential&&) = default;

  Layer& add(LayerPtr layer) {
    layers_.push_back(std::move(layer));
    return *layers_.back();
  }

  Tensor forward(const Tensor& x, Mode mode) {
    Tensor h = x;
    for (auto& l : layers_) h = l->forward(h, mode);
    return h;
  }

  Tensor backward(const Tensor& grad_out) {
    Tensor g = grad_out;
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g);
    return g;
  }

  std::vector<Param*> params() {
    std::vector<Param*> out;
    for (auto& l : layers_)
      for (auto* p : l->params()) out.push_back(p);
    return out;
  }

  void zero_grad() {
    for (auto* p : params()) p->zero_grad();
  }

  std::size_t param_count() {
    std::size_t n = 0;
    for (auto* p : params()) n += p->value.size();
    return n;
  }

  std::vector<const Connectome*> connectomes() const {
    std::vector<const Connectome*> out;
    for (const auto& l : layers_)
      for (const auto* c : l->connectomes()) out.push_back(c);
    return out;
  }

  std::size_t size() const { return layers_.size(); }
  Layer& layer(std::size_t i) { return *layers_.at(i); }
  const Layer& layer(std::size_t i) const { return *layers_.at(i); }

 private:
  std::vector<LayerPtr> layers_;
};

// ---- Checkpoints
//
// Little-endian binary:
//   "PRCNCKPT" | u32 version | u64 len + config JSON echo
//   u32 tensor count | per tensor: u32 name len, name, 4 x u64 dims, doubles
//   u32 connectome count | per connectome: u32 len, serialized blob
// Tensors are all Params then all buffers, in layer order.

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {
struct Writer {
  std::vector<std::uint8_t> buf;
  void u32(std::uint32_t v) {
    for (int b = 0; b < 4; ++b) buf.push_back(static_cast<std::uint8_t>(v >> (8 * b)));
  }
  void u64(std::uint64_t v) {
    for (int b = 0; b < 8; ++b) buf.push_back(static_cast<std::uint8_t>(v >> (8 * b)));
  }
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const std::uint8_t*>(p);
    buf.insert(buf.end(), c, c + n);
  }
  void f64(double d) {
    std::uint64_t v;
    std::memcpy(&v, &d, 8);
    u64(v);
  }
};

struct Reader {
  std::span<const std::uint8_t> s;
  std::size_t pos = 0;
  void need(std::size_t n) const {
    if (pos + n > s.size()) throw ParseError("checkpoint: truncated", pos);
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int b = 0; b < 4; ++b) v |= static_cast<std::uint32_t>(s[pos + b]) << (8 * b);
    pos += 4;
    return v;
  }
  std::uint64_t u64() {
    const std::uint64_t lo = u32();
    const std::uint64_t hi = u32();
    return lo | (hi << 32);
  }
  double f64() {
    const std::uint64_t v = u64();
    double d;
    std::memcpy(&d, &v, 8);
    return d;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string out(reinterpret_cast<const char*>(s.data() + pos), n);
    pos += n;
    return out;
  }
};

inline std::vector<std::pair<std::string, Tensor*>> named_state(Sequential& model) {
  std::vector<std::pair<std::string, Tensor*>> out;
  for (std::size_t i = 0; i < model.size(); ++i) {
    auto& l = model.layer(i);
    std::size_t j = 0;
    for (auto* p : l.params()) out.emplace_back(std::to_string(i) + "." + l.kind() + "." + std::to_string(j++) + "." + p->name, &p->value);
    for (auto& [name, t] : l.buffers()) out.emplace_back(std::to_string(i) + "." + l.kind() + "." + name, t);
  }
  return out;
}
}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(Sequential& model, const std::string& config_json) {
  detail::Writer w;
  w.bytes("PRCNCKPT", 8);
  w.u32(kCheckpointVersion);
  w.u64(config_json.size());
  w.bytes(config_json.data(), config_json.size());
  const auto state = detail::named_state(model);
  w.u32(static_cast<std::uint32_t>(state.size()));
  for (const auto& [name, t] : state) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.u64(t->n());
    w.u64(t->c());
    w.u64(t->h());
    w.u64(t->w());
    for (std::size_t i = 0; i < t->size(); ++i) w.f64((*t)[i]);
  }
  const auto cs = model.connectomes();
  w.u32(static_cast<std::uint32_t>(cs.size()));
  for (const auto* c : cs) {
    const auto blob = c->serialize();
    w.u32(static_cast<std::uint32_t>(blob.size()));
    w.bytes(blob.data(), blob.size());
  }
  return std::move(w.buf);
}

// Restores weights, buffers and connectomes into a model of identical
// architecture. Returns the config echo.
inline std::string decode_checkpoint(std::span<const std::uint8_t> bytes, Sequential& model) {
  detail::Reader r{bytes};
  if (r.str(8) != "PRCNCKPT") throw ParseError("checkpoint: bad magic", 0);
  const auto version = r.u32();
  if (version != kCheckpointVersion) throw ParseError("checkpoint: unsupported version " + std::to_string(version), 8);
  const std::string config = r.str(r.u64());
  auto state = detail::named_state(model);
  const auto count = r.u32();
  if (count != state.size())
    throw ParseError("checkpoint: tensor count " + std::to_string(count) + " != model's " + std::to_string(state.size()), r.pos);
  for (auto& [name, t] : state) {
    const std::string got = r.str(r.u32());
    if (got != name) throw ParseError("checkpoint: expected tensor '" + name + "', found '" + got + "'", r.pos);
    Shape s{r.u64(), r.u64(), r.u64(), r.u64()};
    if (s != t->shape()) throw ParseError("checkpoint: shape mismatch for " + name, r.pos);
    for (std::size_t i = 0; i < t->size(); ++i) (*t)[i] = r.f64();
  }
  const auto nc = r.u32();
  std::vector<Connectome> cs;
  for (std::uint32_t i = 0; i < nc; ++i) {
    const auto len = r.u32();
    r.need(len);
    cs.push_back(Connectome::deserialize(bytes.subspan(r.pos, len)));
    r.pos += len;
  }
  if (r.pos != bytes.size()) throw ParseError("checkpoint: trailing bytes", r.pos);
  std::size_t next = 0;
  for (std::size_t i = 0; i < model.size(); ++i) {
    auto& l = model.layer(i);
    const auto want = l.connectomes().size();
    if (want == 0) continue;
    if (next + want > cs.size()) throw ParseError("checkpoint: too few connectomes", r.pos);
    l.set_connectomes(std::vector<Connectome>(cs.begin() + next, cs.begin() + next + want));
    next += want;
  }
  if (next != cs.size()) throw ParseError("checkpoint: too many connectomes", r.pos);
  return config;
}

inline void save_checkpoint(const std::string& path, Sequential& model, const std::string& config_json) {
  const auto bytes = encode_checkpoint(model, config_json);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot write checkpoint " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open " + path);
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(f), {});
}

inline std::string load_checkpoint(const std::string& path, Sequential& model) {
  const auto bytes = read_file_bytes(path);
  return decode_checkpoint(bytes, model);
}

}  // namespace prcn
