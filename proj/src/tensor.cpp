#include "quantkit/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <iterator>
#include <ostream>
#include <sstream>

namespace quantkit {

std::string_view dtype_name(DType dtype) {
  switch (dtype) {
    case DType::F32: return "f32";
    case DType::I8: return "i8";
    case DType::U8: return "u8";
    case DType::I16: return "i16";
    case DType::I32: return "i32";
  }
  return "?";
}

std::size_t dtype_size(DType dtype) {
  switch (dtype) {
    case DType::F32: return 4;
    case DType::I8: return 1;
    case DType::U8: return 1;
    case DType::I16: return 2;
    case DType::I32: return 4;
  }
  return 0;
}

std::size_t shape_numel(const Shape& shape) {
  if (shape.empty()) return 0;
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

Tensor::Tensor(Shape shape, DType dtype) : shape_(std::move(shape)) {
  check_shape();
  const auto n = shape_numel(shape_);
  switch (dtype) {
    case DType::F32: storage_ = std::vector<float>(n, 0.0f); break;
    case DType::I8: storage_ = std::vector<std::int8_t>(n, 0); break;
    case DType::U8: storage_ = std::vector<std::uint8_t>(n, 0); break;
    case DType::I16: storage_ = std::vector<std::int16_t>(n, 0); break;
    case DType::I32: storage_ = std::vector<std::int32_t>(n, 0); break;
  }
}

void Tensor::check_shape() const {
  if (shape_.empty()) throw ValidationError("tensor shape must have rank >= 1");
  if (shape_.size() > 255) throw ValidationError("tensor rank exceeds 255");
  for (auto d : shape_) {
    if (d == 0) throw ValidationError("tensor dimensions must be positive, got " + shape_string(shape_));
    if (d > 0xFFFFFFFFull) throw ValidationError("tensor dimension exceeds 32 bits");
  }
}

void Tensor::require(DType dtype) const {
  if (this->dtype() != dtype) {
    throw ValidationError("tensor dtype is " + std::string(dtype_name(this->dtype())) + ", expected " +
                          std::string(dtype_name(dtype)));
  }
}

double Tensor::value_at(std::size_t i) const {
  return std::visit([i](const auto& v) { return static_cast<double>(v.at(i)); }, storage_);
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != numel()) {
    throw ValidationError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  }
  Tensor out = *this;
  out.shape_ = std::move(shape);
  out.check_shape();
  return out;
}

bool operator==(const Tensor& a, const Tensor& b) {
  if (a.shape_ != b.shape_ || a.storage_.index() != b.storage_.index()) return false;
  return std::visit(
      [&b](const auto& va) {
        using V = std::decay_t<decltype(va)>;
        const auto& vb = std::get<V>(b.storage_);
        return va.empty() || std::memcmp(va.data(), vb.data(), va.size() * sizeof(typename V::value_type)) == 0;
      },
      a.storage_);
}

namespace {

template <typename U>
void put_le(std::vector<std::uint8_t>& out, U value) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(value >> (8 * i)));
}

template <typename U>
U get_le(const std::uint8_t* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(p[i]) << (8 * i));
  return v;
}

template <typename T>
void put_element(std::vector<std::uint8_t>& out, T v) {
  if constexpr (std::is_same_v<T, float>) {
    put_le(out, std::bit_cast<std::uint32_t>(v));
  } else {
    put_le(out, static_cast<std::make_unsigned_t<T>>(v));
  }
}

template <typename T>
T get_element(const std::uint8_t* p) {
  if constexpr (std::is_same_v<T, float>) {
    return std::bit_cast<float>(get_le<std::uint32_t>(p));
  } else {
    return static_cast<T>(get_le<std::make_unsigned_t<T>>(p));
  }
}

template <typename T>
Tensor decode_payload(Shape shape, const std::uint8_t* p) {
  std::vector<T> values(shape_numel(shape));
  for (auto& v : values) {
    v = get_element<T>(p);
    p += sizeof(T);
  }
  return Tensor(std::move(shape), std::move(values));
}

}  // namespace

std::size_t blob_size(const Tensor& t) {
  return kBlobMagic.size() + 2 + 4 * t.rank() + t.numel() * dtype_size(t.dtype());
}

std::vector<std::uint8_t> encode_blob(const Tensor& t) {
  if (t.empty()) throw ValidationError("cannot serialize an empty tensor");
  std::vector<std::uint8_t> out;
  out.reserve(blob_size(t));
  out.insert(out.end(), kBlobMagic.begin(), kBlobMagic.end());
  out.push_back(static_cast<std::uint8_t>(t.dtype()));
  out.push_back(static_cast<std::uint8_t>(t.rank()));
  for (auto d : t.shape()) put_le(out, static_cast<std::uint32_t>(d));
  switch (t.dtype()) {
    case DType::F32: for (auto v : t.data<float>()) put_element(out, v); break;
    case DType::I8: for (auto v : t.data<std::int8_t>()) put_element(out, v); break;
    case DType::U8: for (auto v : t.data<std::uint8_t>()) put_element(out, v); break;
    case DType::I16: for (auto v : t.data<std::int16_t>()) put_element(out, v); break;
    case DType::I32: for (auto v : t.data<std::int32_t>()) put_element(out, v); break;
  }
  return out;
}

Tensor decode_blob(std::span<const std::uint8_t> bytes) {
  const std::size_t header = kBlobMagic.size() + 2;
  if (bytes.size() < header) throw FormatError("tensor blob truncated in header");
  if (!std::equal(kBlobMagic.begin(), kBlobMagic.end(), bytes.begin())) throw FormatError("bad tensor blob magic");
  const auto code = bytes[kBlobMagic.size()];
  if (code > 4) throw FormatError("unknown tensor dtype code " + std::to_string(code));
  const auto dtype = static_cast<DType>(code);
  const std::size_t rank = bytes[kBlobMagic.size() + 1];
  if (rank == 0) throw FormatError("tensor blob has rank 0");
  if (bytes.size() < header + 4 * rank) throw FormatError("tensor blob truncated in dims");
  Shape shape(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    shape[i] = get_le<std::uint32_t>(bytes.data() + header + 4 * i);
    if (shape[i] == 0) throw FormatError("tensor blob has a zero dimension");
  }
  const std::size_t offset = header + 4 * rank;
  const std::size_t payload = shape_numel(shape) * dtype_size(dtype);
  if (bytes.size() < offset + payload) throw FormatError("tensor blob payload truncated");
  if (bytes.size() > offset + payload) throw FormatError("tensor blob has trailing bytes");
  const auto* p = bytes.data() + offset;
  switch (dtype) {
    case DType::F32: return decode_payload<float>(std::move(shape), p);
    case DType::I8: return decode_payload<std::int8_t>(std::move(shape), p);
    case DType::U8: return decode_payload<std::uint8_t>(std::move(shape), p);
    case DType::I16: return decode_payload<std::int16_t>(std::move(shape), p);
    case DType::I32: return decode_payload<std::int32_t>(std::move(shape), p);
  }
  throw FormatError("unreachable dtype");
}

std::size_t write_blob(const Tensor& t, std::ostream& sink) {
  const auto bytes = encode_blob(t);
  sink.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!sink) throw IoError("failed to write tensor blob");
  return bytes.size();
}

Tensor read_blob(std::istream& source) {
  std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(source), std::istreambuf_iterator<char>()};
  if (source.bad()) throw IoError("failed to read tensor blob");
  return decode_blob(bytes);
}

void save_tensor(const Tensor& t, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  write_blob(t, out);
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return read_blob(in);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace quantkit
