// SPDX-License-Identifier: Apache-2.0
#include "rfp/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace rfp {

namespace {

constexpr char kMagic[8] = {'R', 'F', 'P', 'C', 'K', 'P', 'T', '\0'};
const std::string kVelocityPrefix = "opt/velocity/";

class Writer {
 public:
  void bytes(const void* p, size_t n) {
    auto c = static_cast<const char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  void u32(uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void u64(uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void f64(double v) { u64(std::bit_cast<uint64_t>(v)); }
  void str(const std::string& s) {
    u32(static_cast<uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  const std::vector<char>& data() const { return buf_; }

 private:
  std::vector<char> buf_;
};

class Reader {
 public:
  explicit Reader(std::vector<char> buf) : buf_(std::move(buf)) {}
  void need(size_t n) {
    if (pos_ + n > buf_.size()) throw IoError("checkpoint truncated at byte " + std::to_string(pos_));
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<uint8_t>(buf_[pos_++])) << (8 * i);
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<uint8_t>(buf_[pos_++])) << (8 * i);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    uint32_t n = u32();
    need(n);
    std::string s(buf_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  void magic() {
    need(sizeof kMagic);
    if (std::memcmp(buf_.data(), kMagic, sizeof kMagic) != 0) throw IoError("not a checkpoint file");
    pos_ += sizeof kMagic;
  }
  bool done() const { return pos_ == buf_.size(); }

 private:
  std::vector<char> buf_;
  size_t pos_ = 0;
};

}  // namespace

const CheckpointEntry* Checkpoint::find(const std::string& name) const {
  for (const auto& e : entries) {
    if (e.name == name) return &e;
  }
  return nullptr;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  Writer w;
  w.bytes(kMagic, sizeof kMagic);
  w.u32(kCheckpointVersion);
  w.u64(ckpt.arch_hash);
  w.u64(ckpt.step);
  w.str(ckpt.config_text);
  w.u32(static_cast<uint32_t>(ckpt.entries.size()));
  for (const auto& e : ckpt.entries) {
    w.str(e.name);
    w.u32(static_cast<uint32_t>(e.shape.size()));
    int64_t numel = 1;
    for (int64_t d : e.shape) {
      w.u64(static_cast<uint64_t>(d));
      numel *= d;
    }
    if (numel != static_cast<int64_t>(e.values.size())) {
      throw ContractError("checkpoint entry " + e.name + " has inconsistent size");
    }
    for (double v : e.values) w.f64(v);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(w.data().data(), static_cast<std::streamsize>(w.data().size()));
  if (!out) throw IoError("write failed: " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  Reader r(std::vector<char>(std::istreambuf_iterator<char>(in), {}));
  r.magic();
  uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw IoError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint c;
  c.arch_hash = r.u64();
  c.step = r.u64();
  c.config_text = r.str();
  uint32_t count = r.u32();
  c.entries.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    e.name = r.str();
    uint32_t rank = r.u32();
    if (rank > 4) throw IoError("checkpoint entry " + e.name + " has rank " + std::to_string(rank));
    int64_t numel = 1;
    for (uint32_t d = 0; d < rank; ++d) {
      e.shape.push_back(static_cast<int64_t>(r.u64()));
      numel *= e.shape.back();
    }
    r.need(static_cast<size_t>(numel) * 8);
    e.values.resize(static_cast<size_t>(numel));
    for (auto& v : e.values) v = r.f64();
    c.entries.push_back(std::move(e));
  }
  if (!r.done()) throw IoError("trailing bytes in checkpoint " + path.string());
  return c;
}

std::vector<CheckpointEntry> snapshot(const ParameterStore& store) {
  std::vector<CheckpointEntry> out;
  for (const auto& p : store.all()) {
    auto v = p.tensor.values();
    out.push_back({p.name, p.tensor.shape().dims(), std::vector<double>(v.begin(), v.end())});
  }
  for (const auto& p : store.all()) {
    if (p.velocity.empty()) continue;
    out.push_back({kVelocityPrefix + p.name, p.tensor.shape().dims(),
                   std::vector<double>(p.velocity.begin(), p.velocity.end())});
  }
  return out;
}

void restore(ParameterStore& store, const Checkpoint& ckpt) {
  for (auto& p : store.all()) {
    const CheckpointEntry* e = ckpt.find(p.name);
    if (!e) throw ConfigError("checkpoint lacks parameter " + p.name);
    if (e->shape != p.tensor.shape().dims()) {
      throw ConfigError("checkpoint shape mismatch for " + p.name);
    }
    auto dst = p.tensor.mutable_values();
    for (size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<Real>(e->values[i]);
    p.velocity.clear();
    if (const CheckpointEntry* v = ckpt.find(kVelocityPrefix + p.name)) {
      p.velocity.assign(v->values.begin(), v->values.end());
    }
  }
}

}  // namespace rfp
