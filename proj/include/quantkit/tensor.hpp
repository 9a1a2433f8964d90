#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "quantkit/errors.hpp"

namespace quantkit {

enum class DType : std::uint8_t { F32 = 0, I8 = 1, U8 = 2, I16 = 3, I32 = 4 };

using Shape = std::vector<std::size_t>;

std::string_view dtype_name(DType dtype);
std::size_t dtype_size(DType dtype);
std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

template <typename T>
struct dtype_of;
template <>
struct dtype_of<float> {
  static constexpr DType value = DType::F32;
};
template <>
struct dtype_of<std::int8_t> {
  static constexpr DType value = DType::I8;
};
template <>
struct dtype_of<std::uint8_t> {
  static constexpr DType value = DType::U8;
};
template <>
struct dtype_of<std::int16_t> {
  static constexpr DType value = DType::I16;
};
template <>
struct dtype_of<std::int32_t> {
  static constexpr DType value = DType::I32;
};

/// Dense row-major tensor. Activations are NCHW, conv weights OIHW.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, DType dtype);

  template <typename T>
  Tensor(Shape shape, std::vector<T> values) : shape_(std::move(shape)), storage_(std::move(values)) {
    check_shape();
    if (shape_numel(shape_) != std::get<std::vector<T>>(storage_).size()) {
      throw ValidationError("tensor data length " + std::to_string(std::get<std::vector<T>>(storage_).size()) +
                            " does not match shape " + shape_string(shape_));
    }
  }

  DType dtype() const noexcept { return static_cast<DType>(storage_.index()); }
  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t numel() const noexcept { return shape_numel(shape_); }
  bool empty() const noexcept { return shape_.empty(); }

  template <typename T>
  std::span<T> data() {
    require(dtype_of<T>::value);
    return std::get<std::vector<T>>(storage_);
  }
  template <typename T>
  std::span<const T> data() const {
    require(dtype_of<T>::value);
    return std::get<std::vector<T>>(storage_);
  }
  std::span<float> f32() { return data<float>(); }
  std::span<const float> f32() const { return data<float>(); }

  /// Element i widened to double, whatever the dtype.
  double value_at(std::size_t i) const;

  /// Same data, new shape with equal element count.
  Tensor reshaped(Shape shape) const;

  /// Bit-exact equality (floats compared by representation).
  friend bool operator==(const Tensor& a, const Tensor& b);

 private:
  void require(DType dtype) const;
  void check_shape() const;

  Shape shape_;
  std::variant<std::vector<float>, std::vector<std::int8_t>, std::vector<std::uint8_t>, std::vector<std::int16_t>,
               std::vector<std::int32_t>>
      storage_;
};

// TensorBlob: "QTNSR1" | dtype u8 | rank u8 | dims u32le[rank] | payload (little endian).
inline constexpr std::string_view kBlobMagic = "QTNSR1";

std::size_t blob_size(const Tensor& t);
std::size_t write_blob(const Tensor& t, std::ostream& sink);
/// Rejects bad magic, unknown dtype, truncated payload and trailing bytes.
Tensor read_blob(std::istream& source);

std::vector<std::uint8_t> encode_blob(const Tensor& t);
Tensor decode_blob(std::span<const std::uint8_t> bytes);

void save_tensor(const Tensor& t, const std::filesystem::path& path);
Tensor load_tensor(const std::filesystem::path& path);

}  // namespace quantkit
