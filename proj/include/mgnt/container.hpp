#pragma once

#include "mgnt/tensor.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace mgnt {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class DType { F64, I64 };

struct NamedArray {
  std::string name;
  DType dtype = DType::F64;
  std::vector<std::int64_t> shape;
  std::vector<double> f64;
  std::vector<std::int64_t> i64;

  std::int64_t element_count() const;
};

/// Self-describing named-array file:
///
///   "MGNTARR1" | u32 LE header length | JSON header | payloads
///
/// The header is {"arrays": [{name, dtype, shape, byte_offset}...], "meta": {...}}
/// with byte_offset counted from the first payload byte. Payloads are raw
/// little-endian values laid out in array order.
class ArrayFile {
 public:
  static constexpr char kMagic[9] = "MGNTARR1";

  void put(const std::string& name, const Tensor& t);
  void put(const std::string& name, std::vector<std::int64_t> shape, std::vector<double> data);
  void put_int(const std::string& name, std::vector<std::int64_t> shape,
               std::vector<std::int64_t> data);
  void put_scalar(const std::string& name, double v) { put(name, {}, {v}); }

  bool contains(const std::string& name) const;
  const NamedArray& at(const std::string& name) const;
  /// Rank-1 arrays load as a column; rank-2 as rows x cols.
  Tensor matrix(const std::string& name) const;
  double scalar(const std::string& name) const;
  std::vector<std::int64_t> ints(const std::string& name) const;

  const std::vector<NamedArray>& arrays() const { return arrays_; }

  nlohmann::json& meta() { return meta_; }
  const nlohmann::json& meta() const { return meta_; }

  std::string serialize() const;
  static ArrayFile parse(const std::string& bytes);

  void save(const std::filesystem::path& path) const;
  static ArrayFile load(const std::filesystem::path& path);

 private:
  std::vector<NamedArray> arrays_;
  nlohmann::json meta_ = nlohmann::json::object();
};

}  // namespace mgnt
