#include "ssmlab/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

namespace ssmlab {
namespace {

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const unsigned char*>(p);
    out_.insert(out_.end(), c, c + n);
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  std::vector<unsigned char> take() { return std::move(out_); }

 private:
  std::vector<unsigned char> out_;
};

class Reader {
 public:
  explicit Reader(const std::vector<unsigned char>& in) : in_(in) {}
  void need(std::size_t n) const {
    if (pos_ + n > in_.size()) throw Error("checkpoint: truncated at byte " + std::to_string(pos_));
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(in_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  bool done() const { return pos_ == in_.size(); }

 private:
  const std::vector<unsigned char>& in_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<unsigned char> serialize_model(const Model& model) {
  Writer w;
  w.bytes(kCheckpointMagic, 5);
  const ModelConfig& c = model.config;
  for (std::uint64_t v : {std::uint64_t{c.vocab_size}, std::uint64_t{c.d_model},
                          std::uint64_t{c.d_inner}, std::uint64_t{c.d_state},
                          std::uint64_t{c.d_conv}, std::uint64_t{c.n_layers},
                          std::uint64_t{c.dt_rank}, std::uint64_t{c.attn_stride}, c.seed,
                          static_cast<std::uint64_t>(c.arch)}) {
    w.u64(v);
  }
  const auto params = named_parameters(model);
  w.u64(params.size());
  for (const auto& [name, t] : params) {
    w.u64(name.size());
    w.bytes(name.data(), name.size());
    w.u64(t->rank());
    for (auto d : t->shape()) w.u64(d);
    for (double v : t->data()) w.f64(v);
  }
  return w.take();
}

Model deserialize_model(const std::vector<unsigned char>& bytes) {
  Reader r(bytes);
  if (r.bytes(5) != std::string(kCheckpointMagic, 5)) throw Error("checkpoint: bad magic");
  ModelConfig c;
  c.vocab_size = r.u64();
  c.d_model = r.u64();
  c.d_inner = r.u64();
  c.d_state = r.u64();
  c.d_conv = r.u64();
  c.n_layers = r.u64();
  c.dt_rank = r.u64();
  c.attn_stride = r.u64();
  c.seed = r.u64();
  const std::uint64_t arch = r.u64();
  if (arch > 1) throw Error("checkpoint: unknown architecture id " + std::to_string(arch));
  c.arch = static_cast<Arch>(arch);

  Model model = init_model(c);
  std::map<std::string, Tensor*> slots;
  for (auto& [name, t] : named_parameters(model)) slots[name] = t;

  const std::uint64_t count = r.u64();
  if (count != slots.size()) {
    throw Error("checkpoint: expected " + std::to_string(slots.size()) + " tensors, found " +
                std::to_string(count));
  }
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::string name = r.bytes(r.u64());
    auto it = slots.find(name);
    if (it == slots.end()) throw Error("checkpoint: unexpected tensor '" + name + "'");
    Shape shape(r.u64());
    for (auto& d : shape) d = r.u64();
    if (shape != it->second->shape()) {
      throw Error("checkpoint: tensor '" + name + "' has shape " + shape_to_string(shape) +
                  ", expected " + shape_to_string(it->second->shape()));
    }
    for (auto& v : it->second->data()) v = r.f64();
    slots.erase(it);
  }
  if (!r.done()) throw Error("checkpoint: trailing bytes");
  return model;
}

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  const auto bytes = serialize_model(model);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("checkpoint: cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("checkpoint: write failed for " + path.string());
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("checkpoint: cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_model(bytes);
}

}  // namespace ssmlab
