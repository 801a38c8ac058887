#pragma once

// PARF checkpoint container.
//
//   "PARF"  u32 version (=1)  u32 count
//   count x { u32 name_len, name bytes (UTF-8), u8 dtype (0=f32, 1=f64),
//             u8 rank, u64 extents[rank], u64 offset }
//   payloads, little-endian, back to back in record order
//
// Offsets are absolute file positions. The first payload starts right after
// the last record, each next one where the previous ends, and the file ends
// with the last payload. Any deviation is rejected.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "parformer/graph.hpp"
#include "parformer/tensor.hpp"

namespace parformer {

struct CheckpointEntry {
  std::string name;
  DType dtype = DType::f32;
  Shape shape;
  std::vector<std::uint8_t> payload;  // little-endian element bytes

  friend bool operator==(const CheckpointEntry&, const CheckpointEntry&) = default;
};

class Checkpoint {
 public:
  static constexpr std::uint32_t kVersion = 1;
  static constexpr std::size_t kMaxNameLength = 4096;
  static constexpr std::size_t kMaxRank = 8;

  const std::vector<CheckpointEntry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  bool contains(const std::string& name) const { return find(name) != nullptr; }

  template <typename T>
  void add(const std::string& name, const Tensor<T>& t) {
    if (name.empty() || name.size() > kMaxNameLength) throw Error("format", "invalid tensor name '" + name + "'");
    if (t.rank() > kMaxRank) throw Error("format", name + ": rank above " + std::to_string(kMaxRank));
    if (contains(name)) throw Error("format", "duplicate tensor name '" + name + "'");
    CheckpointEntry e{name, dtype_of<T>(), t.shape(), {}};
    e.payload.resize(t.size() * sizeof(T));
    for (std::size_t i = 0; i < t.size(); ++i) store_le(t[i], e.payload.data() + i * sizeof(T));
    entries_.push_back(std::move(e));
  }

  template <typename T>
  Tensor<T> get(const std::string& name) const {
    const auto* e = find(name);
    if (!e) throw Error("format", "checkpoint has no tensor '" + name + "'");
    if (e->dtype != dtype_of<T>()) {
      throw Error("format", name + ": stored as " + dtype_name(e->dtype) + ", requested " + dtype_name(dtype_of<T>()));
    }
    Tensor<T> t(e->shape);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = load_le<T>(e->payload.data() + i * sizeof(T));
    return t;
  }

  std::vector<std::uint8_t> serialize() const {
    std::vector<std::uint8_t> out;
    auto put32 = [&](std::uint32_t v) { put_le(out, v, 4); };
    auto put64 = [&](std::uint64_t v) { put_le(out, v, 8); };
    out.insert(out.end(), {'P', 'A', 'R', 'F'});
    put32(kVersion);
    put32(static_cast<std::uint32_t>(entries_.size()));
    std::uint64_t offset = header_size();
    for (const auto& e : entries_) {
      put32(static_cast<std::uint32_t>(e.name.size()));
      out.insert(out.end(), e.name.begin(), e.name.end());
      out.push_back(static_cast<std::uint8_t>(e.dtype));
      out.push_back(static_cast<std::uint8_t>(e.shape.size()));
      for (auto d : e.shape) put64(static_cast<std::uint64_t>(d));
      put64(offset);
      offset += e.payload.size();
    }
    for (const auto& e : entries_) out.insert(out.end(), e.payload.begin(), e.payload.end());
    return out;
  }

  static Checkpoint deserialize(std::span<const std::uint8_t> bytes) {
    Reader r{bytes};
    if (bytes.size() < 12 || std::memcmp(bytes.data(), "PARF", 4) != 0) {
      throw Error("format", "not a PARF checkpoint (bad magic)");
    }
    r.pos = 4;
    const auto version = r.u32();
    if (version != kVersion) throw Error("format", "unsupported checkpoint version " + std::to_string(version));
    const auto count = r.u32();

    struct Pending {
      CheckpointEntry entry;
      std::uint64_t offset;
      std::uint64_t length;
    };
    std::vector<Pending> pending;
    std::set<std::string> names;
    for (std::uint32_t i = 0; i < count; ++i) {
      const auto len = r.u32();
      if (len == 0 || len > kMaxNameLength) throw Error("format", "record " + std::to_string(i) + ": bad name length");
      std::string name(reinterpret_cast<const char*>(r.take(len)), len);
      if (!names.insert(name).second) throw Error("format", "duplicate tensor name '" + name + "'");
      const auto tag = r.u8();
      if (tag > 1) throw Error("format", name + ": unknown dtype tag " + std::to_string(tag));
      const auto rank = r.u8();
      if (rank > kMaxRank) throw Error("format", name + ": rank " + std::to_string(rank) + " too large");
      Shape shape;
      std::uint64_t elems = 1;
      for (std::uint8_t d = 0; d < rank; ++d) {
        const auto ext = r.u64();
        if (ext > (std::uint64_t{1} << 40) || (ext != 0 && elems > (std::uint64_t{1} << 40) / ext)) {
          throw Error("format", name + ": extents too large");
        }
        elems *= ext;
        shape.push_back(static_cast<std::int64_t>(ext));
      }
      const auto dtype = static_cast<DType>(tag);
      const auto offset = r.u64();
      pending.push_back({CheckpointEntry{std::move(name), dtype, std::move(shape), {}}, offset, elems * dtype_size(dtype)});
    }

    std::uint64_t expected = r.pos;
    for (auto& p : pending) {
      if (p.offset != expected) {
        throw Error("format", p.entry.name + ": payload offset " + std::to_string(p.offset) + ", expected " +
                                  std::to_string(expected));
      }
      if (p.length > bytes.size() - expected) throw Error("format", p.entry.name + ": payload runs past end of file");
      p.entry.payload.assign(bytes.begin() + static_cast<std::ptrdiff_t>(expected),
                             bytes.begin() + static_cast<std::ptrdiff_t>(expected + p.length));
      expected += p.length;
    }
    if (expected != bytes.size()) throw Error("format", "trailing bytes after the last payload");

    Checkpoint ck;
    for (auto& p : pending) ck.entries_.push_back(std::move(p.entry));
    return ck;
  }

  void save(const std::filesystem::path& path) const {
    const auto bytes = serialize();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("io", "cannot create " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("io", "write failed: " + path.string());
  }

  static Checkpoint load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("io", "cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize(bytes);
  }

 private:
  struct Reader {
    std::span<const std::uint8_t> bytes;
    std::size_t pos = 0;
    const std::uint8_t* take(std::size_t n) {
      if (n > bytes.size() - pos) throw Error("format", "checkpoint header is truncated");
      const auto* p = bytes.data() + pos;
      pos += n;
      return p;
    }
    std::uint64_t le(std::size_t n) {
      const auto* p = take(n);
      std::uint64_t v = 0;
      for (std::size_t i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
      return v;
    }
    std::uint8_t u8() { return static_cast<std::uint8_t>(le(1)); }
    std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
    std::uint64_t u64() { return le(8); }
  };

  static void put_le(std::vector<std::uint8_t>& out, std::uint64_t v, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }

  template <typename T>
  static void store_le(T v, std::uint8_t* dst) {
    using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    const auto bits = std::bit_cast<U>(v);
    for (std::size_t i = 0; i < sizeof(T); ++i) dst[i] = static_cast<std::uint8_t>(bits >> (8 * i));
  }

  template <typename T>
  static T load_le(const std::uint8_t* src) {
    using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    U bits = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) bits |= static_cast<U>(src[i]) << (8 * i);
    return std::bit_cast<T>(bits);
  }

  std::uint64_t header_size() const {
    std::uint64_t n = 12;
    for (const auto& e : entries_) n += 4 + e.name.size() + 2 + 8 * e.shape.size() + 8;
    return n;
  }

  const CheckpointEntry* find(const std::string& name) const {
    for (const auto& e : entries_)
      if (e.name == name) return &e;
    return nullptr;
  }

  std::vector<CheckpointEntry> entries_;
};

/// Every slot of the graph, named "<layer path>.<slot name>", in layer order.
template <typename T>
Checkpoint to_checkpoint(const ModuleGraph<T>& g) {
  Checkpoint ck;
  g.for_each_slot([&](const std::string& name, const Slot<T>& s) { ck.add(name, s.value.value()); });
  return ck;
}

/// Overwrites every slot from the checkpoint. Names, shapes and dtypes must
/// match one to one.
template <typename T>
void load_into(ModuleGraph<T>& g, const Checkpoint& ck) {
  std::size_t used = 0;
  g.for_each_slot([&](const std::string& name, Slot<T>& s) {
    auto t = ck.get<T>(name);
    if (t.shape() != s.value.shape()) {
      throw Error("format", name + ": checkpoint shape " + to_string(t.shape()) + " does not match model " +
                                to_string(s.value.shape()));
    }
    s.value.mutable_value() = std::move(t);
    ++used;
  });
  if (used != ck.size()) {
    throw Error("format", "checkpoint holds " + std::to_string(ck.size() - used) + " tensors the model does not use");
  }
}

}  // namespace parformer
