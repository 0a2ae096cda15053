#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "detrend/trainer.hpp"

namespace detrend {

// Single-file container:
//   magic "DTRNDCKP", u32 version, u32 entry count,
//   index: per entry { u16 name length, name, u8 dtype, u8 rank, u64 dims[rank],
//                      u64 offset, u64 byte length },
//   payload bytes.
// All integers and floats are little-endian; entries are sorted by name.
class Checkpoint {
 public:
  enum class Dtype : std::uint8_t { f32 = 0, f64 = 1, u64 = 2, bytes = 3 };

  struct Entry {
    Dtype dtype = Dtype::bytes;
    Shape shape;
    std::vector<std::uint8_t> payload;
  };

  static constexpr std::uint32_t kVersion = 1;

  void put_tensor(const std::string& name, const Tensor& t);
  Tensor get_tensor(const std::string& name) const;
  void put_f64(const std::string& name, const std::vector<double>& v);
  std::vector<double> get_f64(const std::string& name) const;
  void put_u64(const std::string& name, const std::vector<std::uint64_t>& v);
  std::vector<std::uint64_t> get_u64(const std::string& name) const;
  void put_text(const std::string& name, const std::string& text);
  std::string get_text(const std::string& name) const;

  bool has(const std::string& name) const { return entries_.count(name) != 0; }
  std::vector<std::string> names(const std::string& prefix = "") const;

  std::vector<std::uint8_t> serialize() const;
  static Checkpoint deserialize(const std::vector<std::uint8_t>& bytes);
  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);

 private:
  const Entry& entry(const std::string& name, Dtype expect) const;
  std::map<std::string, Entry> entries_;
};

// Model parameters, optimizer velocities, batch-norm running statistics,
// trainer PRNG state and counters, plus the experiment text that built them.
Checkpoint snapshot(Trainer& trainer, const std::string& config_text);
Checkpoint snapshot(const ModelState& model, const std::string& config_text);

// Restores into an already constructed model/trainer of the same shape.
void restore(const Checkpoint& ckpt, ModelState& model);
void restore(const Checkpoint& ckpt, Trainer& trainer);

}  // namespace detrend
