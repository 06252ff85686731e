#include "zerorf/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace zerorf {

namespace {

constexpr const char* kMagic = "ZERORF-CHECKPOINT";

template <typename V>
DType dtype_of();
template <>
DType dtype_of<float>() { return DType::kF32; }
template <>
DType dtype_of<double>() { return DType::kF64; }
template <>
DType dtype_of<std::uint8_t>() { return DType::kU8; }
template <>
DType dtype_of<std::uint64_t>() { return DType::kU64; }

DType parse_dtype(const std::string& s) {
  if (s == "f32") return DType::kF32;
  if (s == "f64") return DType::kF64;
  if (s == "u8") return DType::kU8;
  if (s == "u64") return DType::kU64;
  throw std::runtime_error("checkpoint: unknown dtype '" + s + "'");
}

// Reverses element byte order on big-endian hosts.
void to_little_endian(std::uint8_t* data, std::size_t bytes, std::size_t width) {
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < bytes; i += width) std::reverse(data + i, data + i + width);
  } else {
    (void)data;
    (void)bytes;
    (void)width;
  }
}

}  // namespace

std::string to_string(DType dtype) {
  switch (dtype) {
    case DType::kF32: return "f32";
    case DType::kF64: return "f64";
    case DType::kU8: return "u8";
    case DType::kU64: return "u64";
  }
  return "?";
}

std::size_t dtype_size(DType dtype) {
  switch (dtype) {
    case DType::kF32: return 4;
    case DType::kF64: return 8;
    case DType::kU8: return 1;
    case DType::kU64: return 8;
  }
  return 0;
}

template <typename V>
void Checkpoint::put(const std::string& name, std::span<const V> values, const Shape& shape) {
  if (shape_numel(shape) != values.size()) {
    throw std::invalid_argument("checkpoint: tensor '" + name + "' has " + std::to_string(values.size()) +
                                " values for shape " + shape_str(shape));
  }
  TensorRecord rec{name, dtype_of<V>(), shape, std::vector<std::uint8_t>(values.size() * sizeof(V))};
  if (!values.empty()) std::memcpy(rec.bytes.data(), values.data(), rec.bytes.size());
  to_little_endian(rec.bytes.data(), rec.bytes.size(), sizeof(V));
  auto it = std::find_if(records_.begin(), records_.end(), [&](const auto& r) { return r.name == name; });
  if (it != records_.end()) {
    *it = std::move(rec);
  } else {
    records_.push_back(std::move(rec));
  }
}

template <typename V>
std::vector<V> Checkpoint::get(const std::string& name) const {
  const auto& rec = record(name);
  if (rec.dtype != dtype_of<V>()) {
    throw std::runtime_error("checkpoint: tensor '" + name + "' is " + to_string(rec.dtype) + ", requested " +
                             to_string(dtype_of<V>()));
  }
  std::vector<std::uint8_t> bytes(rec.bytes);
  to_little_endian(bytes.data(), bytes.size(), sizeof(V));
  std::vector<V> out(bytes.size() / sizeof(V));
  if (!out.empty()) std::memcpy(out.data(), bytes.data(), bytes.size());
  return out;
}

bool Checkpoint::contains(const std::string& name) const {
  return std::any_of(records_.begin(), records_.end(), [&](const auto& r) { return r.name == name; });
}

const TensorRecord& Checkpoint::record(const std::string& name) const {
  for (const auto& r : records_) {
    if (r.name == name) return r;
  }
  throw std::runtime_error("checkpoint: no tensor named '" + name + "'");
}

template <typename T>
void Checkpoint::load_into(const std::string& name, Tensor<T>& t) const {
  const auto& rec = record(name);
  if (rec.shape != t.shape()) {
    throw std::runtime_error("checkpoint: tensor '" + name + "' has shape " + shape_str(rec.shape) + ", expected " +
                             shape_str(t.shape()));
  }
  auto values = get<T>(name);
  std::copy(values.begin(), values.end(), t.values().begin());
}

std::string serialize_checkpoint(const Checkpoint& checkpoint) {
  nlohmann::json manifest;
  manifest["meta"] = checkpoint.meta;
  manifest["tensors"] = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& r : checkpoint.records()) {
    manifest["tensors"].push_back({{"name", r.name},
                                   {"dtype", to_string(r.dtype)},
                                   {"shape", r.shape},
                                   {"offset", offset},
                                   {"nbytes", r.bytes.size()}});
    offset += r.bytes.size();
  }
  const std::string text = manifest.dump();
  std::string out = std::string(kMagic) + "\nversion " + std::to_string(kCheckpointVersion) + "\nmanifest " +
                    std::to_string(text.size()) + "\n" + text;
  out.reserve(out.size() + offset);
  for (const auto& r : checkpoint.records()) out.append(reinterpret_cast<const char*>(r.bytes.data()), r.bytes.size());
  return out;
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
  std::size_t pos = 0;
  auto next_line = [&]() {
    const auto end = bytes.find('\n', pos);
    if (end == std::string::npos) throw std::runtime_error("checkpoint: truncated header");
    std::string line = bytes.substr(pos, end - pos);
    pos = end + 1;
    return line;
  };
  if (next_line() != kMagic) throw std::runtime_error("checkpoint: bad magic, not a checkpoint file");
  const std::string version = next_line();
  if (version != "version " + std::to_string(kCheckpointVersion)) {
    throw std::runtime_error("checkpoint: unsupported " + version + " (expected version " +
                             std::to_string(kCheckpointVersion) + ")");
  }
  const std::string mline = next_line();
  if (mline.rfind("manifest ", 0) != 0) throw std::runtime_error("checkpoint: missing manifest header");
  const std::size_t mlen = std::stoull(mline.substr(9));
  if (pos + mlen > bytes.size()) throw std::runtime_error("checkpoint: truncated manifest");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.substr(pos, mlen));
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("checkpoint: malformed manifest: ") + e.what());
  }
  pos += mlen;
  Checkpoint ck;
  ck.meta = manifest.value("meta", nlohmann::json::object());
  std::size_t expected = 0;
  std::vector<TensorRecord> records;
  for (const auto& t : manifest.at("tensors")) {
    TensorRecord rec;
    rec.name = t.at("name").get<std::string>();
    rec.dtype = parse_dtype(t.at("dtype").get<std::string>());
    rec.shape = t.at("shape").get<Shape>();
    const std::size_t offset = t.at("offset").get<std::size_t>();
    const std::size_t nbytes = t.at("nbytes").get<std::size_t>();
    if (nbytes != shape_numel(rec.shape) * dtype_size(rec.dtype)) {
      throw std::runtime_error("checkpoint: tensor '" + rec.name + "' payload length " + std::to_string(nbytes) +
                               " does not match shape " + shape_str(rec.shape));
    }
    if (offset != expected || pos + offset + nbytes > bytes.size()) {
      throw std::runtime_error("checkpoint: payload of '" + rec.name + "' is truncated or misplaced");
    }
    rec.bytes.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos + offset),
                     bytes.begin() + static_cast<std::ptrdiff_t>(pos + offset + nbytes));
    expected += nbytes;
    records.push_back(std::move(rec));
  }
  if (pos + expected != bytes.size()) throw std::runtime_error("checkpoint: trailing or missing payload bytes");
  for (auto& r : records) {
    switch (r.dtype) {
      case DType::kF32: {
        std::vector<float> v(r.bytes.size() / 4);
        std::memcpy(v.data(), r.bytes.data(), r.bytes.size());
        to_little_endian(reinterpret_cast<std::uint8_t*>(v.data()), r.bytes.size(), 4);
        ck.put<float>(r.name, v, r.shape);
        break;
      }
      case DType::kF64: {
        std::vector<double> v(r.bytes.size() / 8);
        std::memcpy(v.data(), r.bytes.data(), r.bytes.size());
        to_little_endian(reinterpret_cast<std::uint8_t*>(v.data()), r.bytes.size(), 8);
        ck.put<double>(r.name, v, r.shape);
        break;
      }
      case DType::kU8: ck.put<std::uint8_t>(r.name, r.bytes, r.shape); break;
      case DType::kU64: {
        std::vector<std::uint64_t> v(r.bytes.size() / 8);
        std::memcpy(v.data(), r.bytes.data(), r.bytes.size());
        to_little_endian(reinterpret_cast<std::uint8_t*>(v.data()), r.bytes.size(), 8);
        ck.put<std::uint64_t>(r.name, v, r.shape);
        break;
      }
    }
  }
  return ck;
}

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
  const std::string bytes = serialize_checkpoint(checkpoint);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write checkpoint " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return deserialize_checkpoint(ss.str());
  } catch (const std::exception& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

template <typename T>
Image feature_plane_image(const Tensor<T>& plane, std::size_t channel) {
  if (plane.dim() != 3 || plane.size(1) == 0 || plane.size(2) == 0) {
    throw std::invalid_argument("feature plane must be [C,R,R], got " + shape_str(plane.shape()));
  }
  if (channel >= plane.size(0)) {
    throw std::invalid_argument("feature plane channel " + std::to_string(channel) + " out of range");
  }
  const std::size_t h = plane.size(1), w = plane.size(2);
  auto v = plane.values().subspan(channel * h * w, h * w);
  const auto [lo_it, hi_it] = std::minmax_element(v.begin(), v.end());
  const double lo = *lo_it, hi = *hi_it;
  Image img(w, h, 1);
  for (std::size_t i = 0; i < h * w; ++i) {
    img.data[i] = hi > lo ? static_cast<float>((static_cast<double>(v[i]) - lo) / (hi - lo)) : 0.5f;
  }
  return img;
}

template <typename T>
void export_feature_plane(const Tensor<T>& plane, std::size_t channel, const std::filesystem::path& path) {
  write_png(path, feature_plane_image(plane, channel));
}

template void Checkpoint::put<float>(const std::string&, std::span<const float>, const Shape&);
template void Checkpoint::put<double>(const std::string&, std::span<const double>, const Shape&);
template void Checkpoint::put<std::uint8_t>(const std::string&, std::span<const std::uint8_t>, const Shape&);
template void Checkpoint::put<std::uint64_t>(const std::string&, std::span<const std::uint64_t>, const Shape&);
template std::vector<float> Checkpoint::get<float>(const std::string&) const;
template std::vector<double> Checkpoint::get<double>(const std::string&) const;
template std::vector<std::uint8_t> Checkpoint::get<std::uint8_t>(const std::string&) const;
template std::vector<std::uint64_t> Checkpoint::get<std::uint64_t>(const std::string&) const;
template void Checkpoint::load_into<float>(const std::string&, Tensor<float>&) const;
template void Checkpoint::load_into<double>(const std::string&, Tensor<double>&) const;
template Image feature_plane_image<float>(const Tensor<float>&, std::size_t);
template Image feature_plane_image<double>(const Tensor<double>&, std::size_t);
template void export_feature_plane<float>(const Tensor<float>&, std::size_t, const std::filesystem::path&);
template void export_feature_plane<double>(const Tensor<double>&, std::size_t, const std::filesystem::path&);

}  // namespace zerorf
