#include "s2fpn/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace s2fpn {

namespace {

template <typename U>
U to_little(U v) {
  if constexpr (std::endian::native == std::endian::big) {
    unsigned char b[sizeof(U)];
    std::memcpy(b, &v, sizeof(U));
    for (std::size_t i = 0; i < sizeof(U) / 2; ++i) std::swap(b[i], b[sizeof(U) - 1 - i]);
    std::memcpy(&v, b, sizeof(U));
  }
  return v;
}

template <typename U>
void put(std::string& out, U v) {
  v = to_little(v);
  char b[sizeof(U)];
  std::memcpy(b, &v, sizeof(U));
  out.append(b, sizeof(U));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <typename U>
  U get() {
    need(sizeof(U));
    U v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return to_little(v);
  }

  std::string_view take(std::size_t n) {
    need(n);
    std::string_view s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t pos() const { return pos_; }
  std::size_t size() const { return bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw IoError("checkpoint truncated");
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

template <typename T>
std::vector<T> decode_values(std::string_view raw, std::size_t count) {
  std::vector<T> v(count);
  std::memcpy(v.data(), raw.data(), count * sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    for (T& x : v) x = to_little(x);
  }
  return v;
}

}  // namespace

template <typename T>
void Checkpoint::add(std::string name, const Tensor<T>& tensor) {
  add<T>(std::move(name), tensor.shape(), std::vector<T>(tensor.data().begin(), tensor.data().end()));
}

template <typename T>
void Checkpoint::add(std::string name, const Shape& shape, std::vector<T> values) {
  if (static_cast<std::int64_t>(values.size()) != shape.numel()) {
    throw DimensionError("checkpoint entry '" + name + "' has " + std::to_string(values.size()) +
                         " values for shape " + shape.str());
  }
  if (find(name) != nullptr) throw UsageError("duplicate checkpoint entry '" + name + "'");
  entries_.push_back(CheckpointEntry{std::move(name), shape, std::move(values)});
}

const CheckpointEntry* Checkpoint::find(std::string_view name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return &e;
  }
  return nullptr;
}

std::int64_t Checkpoint::total_elements() const {
  std::int64_t total = 0;
  for (const auto& e : entries_) total += e.numel();
  return total;
}

std::string Checkpoint::serialize() const {
  std::string out(kMagic);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(entries_.size()));
  std::uint64_t offset = 0;
  for (const auto& e : entries_) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(e.name.size()));
    out += e.name;
    put<std::uint8_t>(out, static_cast<std::uint8_t>(e.dtype()));
    for (const std::int64_t d : e.shape.dims()) put<std::int64_t>(out, d);
    put<std::uint64_t>(out, offset);
    offset += static_cast<std::uint64_t>(e.numel()) * (e.dtype() == DType::kFloat32 ? 4 : 8);
  }
  for (const auto& e : entries_) {
    std::visit(
        [&](const auto& values) {
          for (const auto v : values) put(out, v);
        },
        e.values);
  }
  return out;
}

Checkpoint Checkpoint::deserialize(std::string_view bytes) {
  Reader in(bytes);
  if (in.take(kMagic.size()) != kMagic) throw IoError("not a checkpoint: bad magic");
  const auto count = in.get<std::uint32_t>();

  struct Pending {
    std::string name;
    DType dtype;
    Shape shape;
    std::uint64_t offset;
  };
  std::vector<Pending> manifest;
  manifest.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = in.get<std::uint32_t>();
    Pending p;
    p.name = std::string(in.take(len));
    const auto code = in.get<std::uint8_t>();
    if (code > 1) throw IoError("checkpoint entry '" + p.name + "' has unknown dtype code");
    p.dtype = static_cast<DType>(code);
    p.shape.n = in.get<std::int64_t>();
    p.shape.c = in.get<std::int64_t>();
    p.shape.h = in.get<std::int64_t>();
    p.shape.w = in.get<std::int64_t>();
    if (p.shape.n < 0 || p.shape.c < 0 || p.shape.h < 0 || p.shape.w < 0) {
      throw IoError("checkpoint entry '" + p.name + "' has a negative dimension");
    }
    p.offset = in.get<std::uint64_t>();
    manifest.push_back(std::move(p));
  }

  const std::size_t data_start = in.pos();
  Checkpoint ckpt;
  for (const auto& p : manifest) {
    const std::size_t width = p.dtype == DType::kFloat32 ? 4 : 8;
    const auto count_el = static_cast<std::size_t>(p.shape.numel());
    const std::size_t begin = data_start + p.offset;
    if (begin + count_el * width > bytes.size()) {
      throw IoError("checkpoint entry '" + p.name + "' points past the end of the file");
    }
    const std::string_view raw = bytes.substr(begin, count_el * width);
    if (p.dtype == DType::kFloat32) {
      ckpt.entries_.push_back({p.name, p.shape, decode_values<float>(raw, count_el)});
    } else {
      ckpt.entries_.push_back({p.name, p.shape, decode_values<double>(raw, count_el)});
    }
  }
  return ckpt;
}

void Checkpoint::save(const std::filesystem::path& path) const {
  const std::string bytes = serialize();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path.string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return deserialize(buf.str());
}

template void Checkpoint::add<float>(std::string, const Tensor<float>&);
template void Checkpoint::add<double>(std::string, const Tensor<double>&);
template void Checkpoint::add<float>(std::string, const Shape&, std::vector<float>);
template void Checkpoint::add<double>(std::string, const Shape&, std::vector<double>);

}  // namespace s2fpn
