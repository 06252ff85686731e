#pragma once

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "zerorf/image.hpp"
#include "zerorf/tensor.hpp"

namespace zerorf {

inline constexpr int kCheckpointVersion = 1;

enum class DType { kF32, kF64, kU8, kU64 };
std::string to_string(DType dtype);
std::size_t dtype_size(DType dtype);

struct TensorRecord {
  std::string name;
  DType dtype = DType::kF32;
  Shape shape;
  std::vector<std::uint8_t> bytes;  // little-endian
};

// Named tensors plus free-form metadata. On disk:
//   "ZERORF-CHECKPOINT\n" "version <n>\n" "manifest <bytes>\n" <json> <payloads>
// where the JSON lists name, dtype, shape, offset and nbytes per tensor and
// carries the metadata under "meta".
class Checkpoint {
 public:
  nlohmann::json meta = nlohmann::json::object();

  template <typename V>
  void put(const std::string& name, std::span<const V> values, const Shape& shape);
  template <typename V>
  std::vector<V> get(const std::string& name) const;

  bool contains(const std::string& name) const;
  const TensorRecord& record(const std::string& name) const;
  const std::vector<TensorRecord>& records() const { return records_; }

  template <typename T>
  void put_tensor(const std::string& name, const Tensor<T>& t) {
    put<T>(name, t.values(), t.shape());
  }
  // Copies the stored values into `t`, which must have the stored shape.
  template <typename T>
  void load_into(const std::string& name, Tensor<T>& t) const;

 private:
  std::vector<TensorRecord> records_;
};

// Written to a temporary file and renamed into place.
void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Serialized bytes, as written by save_checkpoint.
std::string serialize_checkpoint(const Checkpoint& checkpoint);
Checkpoint deserialize_checkpoint(const std::string& bytes);

// One channel of a [C,R,R] plane, min-max scaled to [0,1] (constant planes
// map to 0.5) as a single-channel image. Rows follow the first plane axis.
template <typename T>
Image feature_plane_image(const Tensor<T>& plane, std::size_t channel);

template <typename T>
void export_feature_plane(const Tensor<T>& plane, std::size_t channel, const std::filesystem::path& path);

}  // namespace zerorf
