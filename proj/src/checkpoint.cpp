// Copyright (c) 2026, The rfwp Authors
// SPDX-License-Identifier: Apache-2.0

#include "rfwp/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <vector>

namespace rfwp {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'R', 'F', 'W', 'P', 'C', 'K', 'P', 'T'};

class Writer {
 public:
  template <typename U>
  void put(U value) {
    const auto* p = reinterpret_cast<const char*>(&value);
    bytes_.insert(bytes_.end(), p, p + sizeof(U));
  }
  void put_bytes(const char* p, std::size_t n) { bytes_.insert(bytes_.end(), p, p + n); }
  std::vector<char>& bytes() { return bytes_; }

 private:
  std::vector<char> bytes_;
};

class Reader {
 public:
  explicit Reader(const std::vector<char>& bytes) : bytes_(bytes) {}
  template <typename U>
  U get() {
    U value;
    std::memcpy(&value, take(sizeof(U)), sizeof(U));
    return value;
  }
  const char* take(std::size_t n) {
    if (n > bytes_.size() - pos_) throw FormatError("checkpoint is truncated");
    const char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::size_t pos() const { return pos_; }

 private:
  const std::vector<char>& bytes_;
  std::size_t pos_ = 0;
};

std::vector<char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path);
  return std::vector<char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

struct Parsed {
  CheckpointInfo info;
  std::size_t payload_offset = 0;
};

Parsed parse(const std::vector<char>& bytes) {
  if (bytes.size() < sizeof(kMagic) + 8 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw FormatError("not a checkpoint (bad magic)");
  }
  if (bytes.size() < sizeof(kMagic) + 32) throw FormatError("checkpoint is truncated");
  const std::size_t body = bytes.size() - sizeof(std::uint64_t);
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + body, sizeof(stored));
  if (fnv1a64(bytes.data(), body) != stored) throw FormatError("checkpoint checksum mismatch");

  Reader r(bytes);
  r.take(sizeof(kMagic));
  Parsed out;
  out.info.version = r.get<std::uint32_t>();
  if (out.info.version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(out.info.version));
  }
  out.info.scalar_bytes = r.get<std::uint32_t>();
  if (out.info.scalar_bytes != 4 && out.info.scalar_bytes != 8) {
    throw FormatError("unsupported scalar width " + std::to_string(out.info.scalar_bytes));
  }
  const auto json_len = r.get<std::uint64_t>();
  if (json_len > body) throw FormatError("checkpoint is truncated");
  const char* json = r.take(json_len);
  try {
    out.info.spec = ModelSpec::from_json(nlohmann::json::parse(json, json + json_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint spec is not valid JSON: ") + e.what());
  } catch (const std::logic_error& e) {
    throw FormatError(std::string("checkpoint spec is invalid: ") + e.what());
  }
  out.info.scalar_count = r.get<std::uint64_t>();
  if (out.info.scalar_count != param_count(out.info.spec)) {
    throw FormatError("checkpoint payload size does not match its model spec");
  }
  out.payload_offset = r.pos();
  if (out.payload_offset + out.info.scalar_count * out.info.scalar_bytes != body) {
    throw FormatError("checkpoint payload has the wrong length");
  }
  return out;
}

}  // namespace

std::uint64_t fnv1a64(const void* data, std::size_t size, std::uint64_t seed) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

template <typename T>
void save_checkpoint(const std::string& path, const Model<T>& model) {
  Writer w;
  w.put_bytes(kMagic, sizeof(kMagic));
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint32_t>(sizeof(T));
  const std::string json = model.spec().to_json().dump();
  w.put<std::uint64_t>(json.size());
  w.put_bytes(json.data(), json.size());
  w.put<std::uint64_t>(model.params().count());
  for (const auto& p : model.params()) {
    w.put_bytes(reinterpret_cast<const char*>(p->value().data()), p->value().bytes());
  }
  w.put<std::uint64_t>(fnv1a64(w.bytes().data(), w.bytes().size()));
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path);
  out.write(w.bytes().data(), static_cast<std::streamsize>(w.bytes().size()));
  if (!out) throw std::runtime_error("failed writing checkpoint " + path);
}

CheckpointInfo read_checkpoint_info(const std::string& path) { return parse(read_file(path)).info; }

template <typename T>
std::unique_ptr<Model<T>> load_checkpoint(const std::string& path) {
  const std::vector<char> bytes = read_file(path);
  const Parsed parsed = parse(bytes);
  auto model = std::make_unique<Model<T>>(parsed.info.spec, 0);
  const char* src = bytes.data() + parsed.payload_offset;
  for (auto& p : model->params()) {
    T* dst = p->value().data();
    for (std::size_t i = 0; i < p->size(); ++i) {
      if (parsed.info.scalar_bytes == 4) {
        float v;
        std::memcpy(&v, src, 4);
        dst[i] = static_cast<T>(v);
      } else {
        double v;
        std::memcpy(&v, src, 8);
        dst[i] = static_cast<T>(v);
      }
      src += parsed.info.scalar_bytes;
    }
  }
  return model;
}

template void save_checkpoint<float>(const std::string&, const Model<float>&);
template void save_checkpoint<double>(const std::string&, const Model<double>&);
template std::unique_ptr<Model<float>> load_checkpoint<float>(const std::string&);
template std::unique_ptr<Model<double>> load_checkpoint<double>(const std::string&);

}  // namespace rfwp
