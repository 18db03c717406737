// SPDX-License-Identifier: Apache-2.0
#include "riverpref/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace riverpref {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'R', 'P', 'C', 'K', 'P', 'T', '\0', '\1'};

std::uint64_t fnv1a(const char* data, std::size_t n) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 0x100000001b3ULL;
  }
  return h;
}

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::string& s) : s_(s) {}
  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, s_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string out = s_.substr(pos_, n);
    pos_ += n;
    return out;
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > s_.size()) throw FormatError("checkpoint truncated");
  }
  const std::string& s_;
  std::size_t pos_ = 0;
};

nlohmann::json meta_json(const Checkpoint& c) {
  return {{"checkpoint_id", c.meta.checkpoint_id},
          {"episode_index", c.meta.episode_index},
          {"method", c.meta.method},
          {"hyperparameters", c.meta.hyperparameters},
          {"creation_seed", c.meta.creation_seed},
          {"init_seed", c.params.init_seed},
          {"hidden_dim", c.params.hidden_dim()},
          {"frozen_encoder", c.params.frozen_encoder}};
}

}  // namespace

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  std::string out(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kCheckpointFormatVersion);
  const std::string meta = meta_json(ckpt).dump();
  put<std::uint32_t>(out, static_cast<std::uint32_t>(meta.size()));
  out += meta;
  put<std::uint32_t>(out, 17);
  for_each_tensor(ckpt.params, [&](const char* name, const auto& t) {
    const std::string n(name);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(n.size()));
    out += n;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rows()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.cols()));
    for (Eigen::Index i = 0; i < t.rows(); ++i)
      for (Eigen::Index j = 0; j < t.cols(); ++j) put<double>(out, t(i, j));
  });
  put<std::uint64_t>(out, fnv1a(out.data(), out.size()));
  return out;
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < sizeof(kMagic) + 8 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0)
    throw FormatError("not a checkpoint file (bad magic)");
  const std::size_t body = bytes.size() - sizeof(std::uint64_t);
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + body, sizeof(stored));
  Reader rd(bytes);
  rd.bytes(sizeof(kMagic));
  const auto version = rd.get<std::uint32_t>();
  if (version != kCheckpointFormatVersion)
    throw FormatError("checkpoint format_version " + std::to_string(version) + " unsupported (expected " +
                      std::to_string(kCheckpointFormatVersion) + ")");
  if (stored != fnv1a(bytes.data(), body)) throw FormatError("checkpoint checksum mismatch (corrupt file)");

  Checkpoint c;
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(rd.bytes(rd.get<std::uint32_t>()));
    c.meta.checkpoint_id = meta.at("checkpoint_id").get<std::string>();
    c.meta.episode_index = meta.at("episode_index").get<int>();
    c.meta.method = meta.at("method").get<std::string>();
    c.meta.hyperparameters = meta.at("hyperparameters");
    c.meta.creation_seed = meta.at("creation_seed").get<std::uint64_t>();
    c.params.init_seed = meta.at("init_seed").get<std::uint64_t>();
    c.params.frozen_encoder = meta.at("frozen_encoder").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint metadata: ") + e.what());
  }
  const auto count = rd.get<std::uint32_t>();
  if (count != 17) throw FormatError("checkpoint: unexpected tensor count");
  for_each_tensor(c.params, [&](const char* name, auto& t) {
    const std::string n = rd.bytes(rd.get<std::uint32_t>());
    if (n != name) throw FormatError("checkpoint: expected tensor " + std::string(name) + ", found " + n);
    const auto rows = rd.get<std::uint32_t>();
    const auto cols = rd.get<std::uint32_t>();
    using T = std::decay_t<decltype(t)>;
    if constexpr (T::ColsAtCompileTime == 1) {
      if (cols != 1) throw FormatError("checkpoint: tensor " + n + " must be a column vector");
      t.resize(rows);
    } else {
      t.resize(rows, cols);
    }
    for (Eigen::Index i = 0; i < t.rows(); ++i)
      for (Eigen::Index j = 0; j < t.cols(); ++j) t(i, j) = rd.get<double>();
  });
  if (rd.pos() != body) throw FormatError("checkpoint: trailing bytes");
  if (c.params.hidden_dim() != meta.at("hidden_dim").get<int>())
    throw FormatError("checkpoint: hidden_dim does not match tensor shapes");
  return c;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write checkpoint " + path);
  const std::string bytes = serialize_checkpoint(ckpt);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path);
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace riverpref
