#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <type_traits>
#include <vector>

#include "fpcnet/io.hpp"
#include "fpcnet/model.hpp"

namespace fpcnet {

// Binary layout (little-endian):
//   "FPCK" | u32 version | u32 config length | config text
//   u32 tensor count
//   per tensor: u16 name length | name | u8 rank | u32 extents... | u8 dtype | raw data
// dtype 0 = f32, 1 = f64. Optimizer buffers are stored under "momentum/<param>".
inline constexpr char kCheckpointMagic[4] = {'F', 'P', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline const std::string kMomentumPrefix = "momentum/";

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <class T>
struct Checkpoint {
  NetworkConfig config;
  ParamStore<T> params;
  // Optimizer velocities keyed by parameter name; may be empty.
  ParamStore<T> momentum;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

namespace checkpoint_detail {

template <class T>
constexpr std::uint8_t dtype_tag() {
  if constexpr (std::is_same_v<T, float>) return 0;
  else return 1;
}

class Writer {
 public:
  template <class I>
  void put(I v) {
    char buf[sizeof(I)];
    std::memcpy(buf, &v, sizeof(I));
    bytes_.insert(bytes_.end(), buf, buf + sizeof(I));
  }
  void put_bytes(const void* p, std::size_t n) {
    const char* c = static_cast<const char*>(p);
    bytes_.insert(bytes_.end(), c, c + n);
  }
  const std::vector<char>& bytes() const { return bytes_; }

 private:
  std::vector<char> bytes_;
};

class Reader {
 public:
  explicit Reader(std::vector<char> bytes) : bytes_(std::move(bytes)) {}

  template <class I>
  I get(const char* what) {
    I v;
    std::memcpy(&v, take(sizeof(I), what), sizeof(I));
    return v;
  }
  const char* take(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n)
      throw FormatError(std::string("checkpoint truncated while reading ") + what);
    const char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  std::vector<char> bytes_;
  std::size_t pos_ = 0;
};

template <class T>
void put_tensor(Writer& w, const std::string& name, const Tensor<T>& t) {
  if (name.size() > 0xFFFF) throw Error("tensor name too long: " + name);
  w.put<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
  w.put_bytes(name.data(), name.size());
  w.put<std::uint8_t>(static_cast<std::uint8_t>(t.rank()));
  for (auto d : t.shape().dims()) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
  w.put<std::uint8_t>(dtype_tag<T>());
  w.put_bytes(t.ptr(), t.numel() * sizeof(T));
}

}  // namespace checkpoint_detail

template <class T>
std::vector<char> serialize_checkpoint(const Checkpoint<T>& ck) {
  using namespace checkpoint_detail;
  Writer w;
  w.put_bytes(kCheckpointMagic, 4);
  w.put<std::uint32_t>(kCheckpointVersion);
  const std::string cfg = ck.config.to_text();
  w.put<std::uint32_t>(static_cast<std::uint32_t>(cfg.size()));
  w.put_bytes(cfg.data(), cfg.size());
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ck.params.size() + ck.momentum.size()));
  for (const auto& [name, t] : ck.params) put_tensor(w, name, t);
  for (const auto& [name, t] : ck.momentum) put_tensor(w, kMomentumPrefix + name, t);
  return w.bytes();
}

template <class T>
Checkpoint<T> deserialize_checkpoint(std::vector<char> bytes) {
  using namespace checkpoint_detail;
  Reader r(std::move(bytes));
  if (std::memcmp(r.take(4, "magic"), kCheckpointMagic, 4) != 0)
    throw FormatError("not a checkpoint: bad magic bytes");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const auto cfg_len = r.get<std::uint32_t>("config length");
  Checkpoint<T> ck;
  try {
    ck.config = NetworkConfig::from_text(std::string_view(r.take(cfg_len, "config"), cfg_len));
  } catch (const UsageError& e) {
    throw FormatError(std::string("checkpoint config block: ") + e.what());
  } catch (const DataError& e) {
    throw FormatError(std::string("checkpoint config block: ") + e.what());
  }
  const auto count = r.get<std::uint32_t>("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.get<std::uint16_t>("tensor name length");
    std::string name(r.take(name_len, "tensor name"), name_len);
    const auto rank = r.get<std::uint8_t>("tensor rank");
    if (rank < 1 || rank > Shape::kMaxRank)
      throw FormatError("tensor '" + name + "' has invalid rank " + std::to_string(rank));
    std::vector<std::size_t> dims;
    for (std::uint8_t d = 0; d < rank; ++d) {
      const auto e = r.get<std::uint32_t>("tensor extents");
      if (e == 0) throw FormatError("tensor '" + name + "' has a zero extent");
      dims.push_back(e);
    }
    const auto tag = r.get<std::uint8_t>("dtype");
    if (tag != dtype_tag<T>())
      throw FormatError("tensor '" + name + "' has dtype tag " + std::to_string(tag) +
                        ", expected " + std::to_string(dtype_tag<T>()));
    const Shape shape{std::span<const std::size_t>(dims)};
    std::vector<T> data(shape.numel());
    std::memcpy(data.data(), r.take(data.size() * sizeof(T), "tensor data"), data.size() * sizeof(T));
    Tensor<T> t(shape, std::move(data));
    if (name.starts_with(kMomentumPrefix))
      ck.momentum.add(name.substr(kMomentumPrefix.size()), std::move(t));
    else
      ck.params.add(std::move(name), std::move(t));
  }
  if (!r.at_end()) throw FormatError("trailing bytes after checkpoint payload");
  validate_parameters(ck.config, ck.params);
  for (const auto& [name, v] : ck.momentum) {
    if (!ck.params.contains(name)) throw ShapeError("momentum buffer '" + name + "' has no parameter");
    if (!(ck.params.get(name).shape() == v.shape()))
      throw ShapeError("momentum buffer '" + name + "' has shape " + v.shape().str());
  }
  return ck;
}

template <class T>
void save_checkpoint(const Checkpoint<T>& ck, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_checkpoint(ck));
}

template <class T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint<T>(read_file(path));
}

}  // namespace fpcnet
