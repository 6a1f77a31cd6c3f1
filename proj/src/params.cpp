#include "advbyte/params.hpp"

#include <algorithm>
#include <bit>
#include <fstream>
#include <iterator>

#include "advbyte/error.hpp"

namespace advbyte::ad {

namespace {
constexpr std::string_view kMagic = "ADVBCKPT";
}

void ParamSet::add(std::string name, Tensor tensor) {
  if (contains(name)) fail(ErrorKind::InvalidConfig, "duplicate parameter " + name);
  names_.push_back(std::move(name));
  tensors_.push_back(std::move(tensor));
}

bool ParamSet::contains(std::string_view name) const noexcept {
  return std::find(names_.begin(), names_.end(), name) != names_.end();
}

Tensor& ParamSet::at(std::string_view name) {
  auto it = std::find(names_.begin(), names_.end(), name);
  if (it == names_.end()) fail(ErrorKind::CheckpointMismatch, "no parameter named " + std::string(name));
  return tensors_[static_cast<std::size_t>(it - names_.begin())];
}

const Tensor& ParamSet::at(std::string_view name) const {
  return const_cast<ParamSet*>(this)->at(name);
}

ParamSet ParamSet::zeros_like() const {
  ParamSet out;
  for (std::size_t i = 0; i < size(); ++i) out.add(names_[i], Tensor(tensors_[i].shape()));
  return out;
}

void ParamSet::accumulate(const ParamSet& other) {
  for (std::size_t i = 0; i < other.size(); ++i) {
    Tensor& dst = at(other.names_[i]);
    const Tensor& src = other.tensors_[i];
    require_same_shape(dst, src, "ParamSet::accumulate");
    for (std::size_t j = 0; j < src.size(); ++j) dst[j] += src[j];
  }
}

void ByteWriter::u32(std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void ByteWriter::u64(std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void ByteWriter::f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

void ByteWriter::raw(std::string_view bytes) { out_.insert(out_.end(), bytes.begin(), bytes.end()); }

void ByteReader::need(std::size_t n) const {
  if (bytes_.size() - pos_ < n) fail(ErrorKind::CheckpointMismatch, "truncated binary record");
}

std::uint8_t ByteReader::u8() {
  need(1);
  return bytes_[pos_++];
}

std::uint32_t ByteReader::u32() {
  need(4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_++]) << (8 * i);
  return v;
}

std::uint64_t ByteReader::u64() {
  need(8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_++]) << (8 * i);
  return v;
}

double ByteReader::f64() { return std::bit_cast<double>(u64()); }

std::string ByteReader::raw(std::size_t n) {
  need(n);
  std::string out(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
  pos_ += n;
  return out;
}

std::vector<std::uint8_t> serialize_checkpoint(const ParamSet& params) {
  ByteWriter w;
  w.raw(kMagic);
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string& name = params.names()[i];
    const Tensor& t = params.tensor(i);
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.raw(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) w.u64(d);
    for (double v : t.values()) w.f64(v);
  }
  return w.take();
}

ParamSet deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (r.raw(kMagic.size()) != kMagic) fail(ErrorKind::CheckpointMismatch, "bad checkpoint magic");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    fail(ErrorKind::CheckpointMismatch, "unsupported checkpoint version " + std::to_string(version));
  }
  const std::uint32_t count = r.u32();
  ParamSet params;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.raw(r.u32());
    Shape shape(r.u32());
    for (auto& d : shape) d = r.u64();
    std::vector<double> values(shape_size(shape));
    for (auto& v : values) v = r.f64();
    params.add(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  if (!r.done()) fail(ErrorKind::CheckpointMismatch, "trailing octets after checkpoint");
  return params;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::IoError, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorKind::IoError, "cannot write " + path.string());
}

void save_checkpoint(const std::filesystem::path& path, const ParamSet& params) {
  write_file(path, serialize_checkpoint(params));
}

ParamSet load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint(read_file(path));
}

}  // namespace advbyte::ad
