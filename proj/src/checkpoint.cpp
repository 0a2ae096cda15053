#include "detrend/checkpoint.hpp"

#include <bit>
#include <fstream>
#include <iterator>
#include <stdexcept>

namespace detrend {

namespace {

constexpr char kMagic[8] = {'D', 'T', 'R', 'N', 'D', 'C', 'K', 'P'};

void put_le(std::vector<std::uint8_t>& out, std::uint64_t v, std::size_t bytes) {
  for (std::size_t i = 0; i < bytes; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : b_(b) {}
  std::uint64_t le(std::size_t bytes) {
    need(bytes);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(b_[pos_ + i]) << (8 * i);
    pos_ += bytes;
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(b_.begin() + static_cast<long>(pos_), b_.begin() + static_cast<long>(pos_ + n));
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > b_.size()) throw std::runtime_error("checkpoint: truncated file");
  }
  const std::vector<std::uint8_t>& b_;
  std::size_t pos_ = 0;
};

std::size_t width(Checkpoint::Dtype d) {
  switch (d) {
    case Checkpoint::Dtype::f32: return 4;
    case Checkpoint::Dtype::f64: return 8;
    case Checkpoint::Dtype::u64: return 8;
    case Checkpoint::Dtype::bytes: return 1;
  }
  return 1;
}

std::vector<std::uint8_t> encode_f64(const std::vector<double>& v) {
  std::vector<std::uint8_t> out;
  out.reserve(v.size() * 8);
  for (double d : v) put_le(out, std::bit_cast<std::uint64_t>(d), 8);
  return out;
}

std::vector<double> decode_f64(const std::vector<std::uint8_t>& p) {
  Reader r(p);
  std::vector<double> out(p.size() / 8);
  for (auto& d : out) d = std::bit_cast<double>(r.le(8));
  return out;
}

}  // namespace

void Checkpoint::put_tensor(const std::string& name, const Tensor& t) {
  Entry e;
  e.shape = t.shape();
  if (t.precision() == Precision::f32) {
    e.dtype = Dtype::f32;
    for (double v : t.data()) {
      put_le(e.payload, std::bit_cast<std::uint32_t>(static_cast<float>(v)), 4);
    }
  } else {
    e.dtype = Dtype::f64;
    e.payload = encode_f64(t.values());
  }
  entries_[name] = std::move(e);
}

Tensor Checkpoint::get_tensor(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw std::out_of_range("checkpoint: missing entry '" + name + "'");
  const Entry& e = it->second;
  Reader r(e.payload);
  std::vector<double> v(shape_product(e.shape));
  if (e.dtype == Dtype::f32) {
    for (auto& d : v) d = std::bit_cast<float>(static_cast<std::uint32_t>(r.le(4)));
    return Tensor(e.shape, std::move(v), Precision::f32);
  }
  if (e.dtype != Dtype::f64) throw std::runtime_error("checkpoint: '" + name + "' is not a tensor");
  for (auto& d : v) d = std::bit_cast<double>(r.le(8));
  return Tensor(e.shape, std::move(v), Precision::f64);
}

void Checkpoint::put_f64(const std::string& name, const std::vector<double>& v) {
  entries_[name] = Entry{Dtype::f64, {v.size()}, encode_f64(v)};
}

std::vector<double> Checkpoint::get_f64(const std::string& name) const {
  return decode_f64(entry(name, Dtype::f64).payload);
}

void Checkpoint::put_u64(const std::string& name, const std::vector<std::uint64_t>& v) {
  Entry e{Dtype::u64, {v.size()}, {}};
  for (auto x : v) put_le(e.payload, x, 8);
  entries_[name] = std::move(e);
}

std::vector<std::uint64_t> Checkpoint::get_u64(const std::string& name) const {
  const Entry& e = entry(name, Dtype::u64);
  Reader r(e.payload);
  std::vector<std::uint64_t> out(e.payload.size() / 8);
  for (auto& x : out) x = r.le(8);
  return out;
}

void Checkpoint::put_text(const std::string& name, const std::string& text) {
  entries_[name] = Entry{Dtype::bytes, {text.size()}, {text.begin(), text.end()}};
}

std::string Checkpoint::get_text(const std::string& name) const {
  const Entry& e = entry(name, Dtype::bytes);
  return {e.payload.begin(), e.payload.end()};
}

std::vector<std::string> Checkpoint::names(const std::string& prefix) const {
  std::vector<std::string> out;
  for (const auto& [k, _] : entries_) {
    if (k.compare(0, prefix.size(), prefix) == 0) out.push_back(k);
  }
  return out;
}

const Checkpoint::Entry& Checkpoint::entry(const std::string& name, Dtype expect) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw std::out_of_range("checkpoint: missing entry '" + name + "'");
  if (it->second.dtype != expect) throw std::runtime_error("checkpoint: '" + name + "' has another type");
  return it->second;
}

std::vector<std::uint8_t> Checkpoint::serialize() const {
  std::vector<std::uint8_t> head(kMagic, kMagic + 8);
  put_le(head, kVersion, 4);
  put_le(head, entries_.size(), 4);
  std::size_t index_size = 0;
  for (const auto& [name, e] : entries_) index_size += 2 + name.size() + 2 + 8 * e.shape.size() + 16;
  std::uint64_t offset = head.size() + index_size;
  std::vector<std::uint8_t> payload;
  for (const auto& [name, e] : entries_) {
    if (name.size() > 0xffff || e.shape.size() > 0xff) throw std::runtime_error("checkpoint: entry too large");
    put_le(head, name.size(), 2);
    head.insert(head.end(), name.begin(), name.end());
    head.push_back(static_cast<std::uint8_t>(e.dtype));
    head.push_back(static_cast<std::uint8_t>(e.shape.size()));
    for (auto d : e.shape) put_le(head, d, 8);
    put_le(head, offset, 8);
    put_le(head, e.payload.size(), 8);
    offset += e.payload.size();
    payload.insert(payload.end(), e.payload.begin(), e.payload.end());
  }
  head.insert(head.end(), payload.begin(), payload.end());
  return head;
}

Checkpoint Checkpoint::deserialize(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  if (r.str(8) != std::string(kMagic, 8)) throw std::runtime_error("checkpoint: bad magic");
  const auto version = r.le(4);
  if (version != kVersion) {
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  }
  const auto count = r.le(4);
  Checkpoint c;
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::string name = r.str(r.le(2));
    Entry e;
    e.dtype = static_cast<Dtype>(r.le(1));
    if (static_cast<std::uint8_t>(e.dtype) > 3) throw std::runtime_error("checkpoint: bad dtype");
    const auto rank = r.le(1);
    for (std::uint64_t d = 0; d < rank; ++d) e.shape.push_back(r.le(8));
    const auto offset = r.le(8), length = r.le(8);
    if (offset + length > bytes.size() || length != shape_product(e.shape) * width(e.dtype)) {
      throw std::runtime_error("checkpoint: corrupt index entry '" + name + "'");
    }
    e.payload.assign(bytes.begin() + static_cast<long>(offset),
                     bytes.begin() + static_cast<long>(offset + length));
    c.entries_.emplace(name, std::move(e));
  }
  return c;
}

void Checkpoint::save(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto bytes = serialize();
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("checkpoint: cannot write " + path.string());
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot read " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

Checkpoint snapshot(const ModelState& model, const std::string& config_text) {
  Checkpoint c;
  c.put_text("meta/config", config_text);
  c.put_u64("meta/seed", {model.seed});
  for (const auto& [name, t] : model.params) c.put_tensor("param/" + name, t);
  for (const auto& [layer, st] : model.norm) {
    for (const auto& [term, s] : st.stats) {
      const std::string p = "bn/" + layer + "/" + term + "/";
      c.put_u64(p + "features", {s.features()});
      c.put_f64(p + "momentum", {s.momentum()});
      c.put_f64(p + "mean", s.flat_mean());
      c.put_f64(p + "var", s.flat_var());
      c.put_u64(p + "count", s.counts());
    }
  }
  return c;
}

Checkpoint snapshot(Trainer& trainer, const std::string& config_text) {
  Checkpoint c = snapshot(trainer.model(), config_text);
  for (const auto& [name, v] : trainer.opt().velocity) c.put_tensor("opt/" + name, v);
  const auto& st = trainer.prng().state();
  c.put_u64("prng/state", {st.s.begin(), st.s.end()});
  c.put_f64("prng/spare", {st.has_spare ? 1.0 : 0.0, st.spare});
  c.put_u64("meta/epoch", {trainer.epoch()});
  c.put_u64("meta/iteration", {trainer.iteration()});
  return c;
}

void restore(const Checkpoint& ckpt, ModelState& model) {
  const auto names = ckpt.names("param/");
  if (names.size() != model.params.size()) {
    throw std::invalid_argument("incompatible checkpoint: parameter count differs");
  }
  for (auto& [name, t] : model.params) {
    if (!ckpt.has("param/" + name)) {
      throw std::invalid_argument("incompatible checkpoint: missing parameter " + name);
    }
    Tensor loaded = ckpt.get_tensor("param/" + name);
    if (loaded.shape() != t.shape()) {
      throw std::invalid_argument("incompatible checkpoint: " + name + " has shape " +
                                  shape_string(loaded.shape()) + ", model expects " +
                                  shape_string(t.shape()));
    }
    t = std::move(loaded);
  }
  for (auto& [layer, st] : model.norm) {
    for (auto& [term, s] : st.stats) {
      const std::string p = "bn/" + layer + "/" + term + "/";
      if (!ckpt.has(p + "mean")) {
        throw std::invalid_argument("incompatible checkpoint: missing statistics " + p);
      }
      s.restore(ckpt.get_u64(p + "features").at(0), ckpt.get_f64(p + "momentum").at(0),
                ckpt.get_f64(p + "mean"), ckpt.get_f64(p + "var"), ckpt.get_u64(p + "count"));
    }
  }
  model.seed = ckpt.get_u64("meta/seed").at(0);
}

void restore(const Checkpoint& ckpt, Trainer& trainer) {
  restore(ckpt, trainer.model());
  for (auto& [name, v] : trainer.opt().velocity) {
    Tensor loaded = ckpt.get_tensor("opt/" + name);
    if (loaded.shape() != v.shape()) throw std::invalid_argument("incompatible checkpoint: velocity " + name);
    v = std::move(loaded);
  }
  Prng::State st;
  const auto s = ckpt.get_u64("prng/state");
  const auto spare = ckpt.get_f64("prng/spare");
  if (s.size() != 4 || spare.size() != 2) throw std::runtime_error("checkpoint: bad prng state");
  std::copy(s.begin(), s.end(), st.s.begin());
  st.has_spare = spare[0] != 0.0;
  st.spare = spare[1];
  trainer.prng().set_state(st);
  trainer.restore_counters(ckpt.get_u64("meta/epoch").at(0), ckpt.get_u64("meta/iteration").at(0));
}

}  // namespace detrend
