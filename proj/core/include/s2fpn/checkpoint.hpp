#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "s2fpn/tensor.hpp"

namespace s2fpn {

enum class DType : std::uint8_t { kFloat32 = 0, kFloat64 = 1 };

/// One named array stored in a checkpoint.
struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::variant<std::vector<float>, std::vector<double>> values;

  DType dtype() const {
    return std::holds_alternative<std::vector<float>>(values) ? DType::kFloat32 : DType::kFloat64;
  }
  std::int64_t numel() const { return shape.numel(); }

  /// Values converted to T (exact when the stored dtype is T).
  template <typename T>
  std::vector<T> as() const {
    return std::visit([](const auto& v) { return std::vector<T>(v.begin(), v.end()); }, values);
  }
};

/// Ordered collection of named arrays with a bit-exact binary encoding.
///
/// Layout (all integers little-endian):
///   "S2FPNCKPT1"                          10-byte magic
///   u32 count
///   count x { u32 name_len, name bytes (UTF-8), u8 dtype (0=f32, 1=f64),
///             4 x i64 shape (N,C,H,W), u64 byte offset into the data block }
///   data block: raw little-endian element data of every entry, in order
class Checkpoint {
 public:
  static constexpr std::string_view kMagic = "S2FPNCKPT1";

  template <typename T>
  void add(std::string name, const Tensor<T>& tensor);
  template <typename T>
  void add(std::string name, const Shape& shape, std::vector<T> values);

  const CheckpointEntry* find(std::string_view name) const;
  const std::vector<CheckpointEntry>& entries() const { return entries_; }
  std::int64_t total_elements() const;

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);

  std::string serialize() const;
  static Checkpoint deserialize(std::string_view bytes);

 private:
  std::vector<CheckpointEntry> entries_;
};

}  // namespace s2fpn
