#include "mgnt/container.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

namespace mgnt {

namespace {

void append_u64(std::string& out, std::uint64_t v) {
  for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xff));
}

std::uint64_t read_u64(const std::string& in, std::size_t pos) {
  std::uint64_t v = 0;
  for (int b = 0; b < 8; ++b) {
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + b])) << (8 * b);
  }
  return v;
}

const char* dtype_name(DType d) { return d == DType::F64 ? "f64" : "i64"; }

}  // namespace

std::int64_t NamedArray::element_count() const {
  return std::accumulate(shape.begin(), shape.end(), std::int64_t{1}, std::multiplies<>());
}

void ArrayFile::put(const std::string& name, const Tensor& t) {
  std::vector<double> data(t.data(), t.data() + t.size());
  put(name, {t.rows(), t.cols()}, std::move(data));
}

void ArrayFile::put(const std::string& name, std::vector<std::int64_t> shape,
                    std::vector<double> data) {
  NamedArray a{name, DType::F64, std::move(shape), std::move(data), {}};
  if (a.element_count() != static_cast<std::int64_t>(a.f64.size())) {
    throw FormatError("array '" + name + "': data length does not match shape");
  }
  auto it = std::find_if(arrays_.begin(), arrays_.end(), [&](const auto& x) { return x.name == name; });
  if (it != arrays_.end()) {
    *it = std::move(a);
  } else {
    arrays_.push_back(std::move(a));
  }
}

void ArrayFile::put_int(const std::string& name, std::vector<std::int64_t> shape,
                        std::vector<std::int64_t> data) {
  NamedArray a{name, DType::I64, std::move(shape), {}, std::move(data)};
  if (a.element_count() != static_cast<std::int64_t>(a.i64.size())) {
    throw FormatError("array '" + name + "': data length does not match shape");
  }
  auto it = std::find_if(arrays_.begin(), arrays_.end(), [&](const auto& x) { return x.name == name; });
  if (it != arrays_.end()) {
    *it = std::move(a);
  } else {
    arrays_.push_back(std::move(a));
  }
}

bool ArrayFile::contains(const std::string& name) const {
  return std::any_of(arrays_.begin(), arrays_.end(), [&](const auto& a) { return a.name == name; });
}

const NamedArray& ArrayFile::at(const std::string& name) const {
  for (const auto& a : arrays_) {
    if (a.name == name) return a;
  }
  throw FormatError("missing array '" + name + "'");
}

Tensor ArrayFile::matrix(const std::string& name) const {
  const NamedArray& a = at(name);
  if (a.shape.size() > 2) throw FormatError("array '" + name + "' has rank > 2");
  Index rows = a.shape.empty() ? 1 : a.shape[0];
  Index cols = a.shape.size() == 2 ? a.shape[1] : 1;
  Tensor t(rows, cols);
  for (Index i = 0; i < t.size(); ++i) {
    t.data()[i] = a.dtype == DType::F64 ? a.f64[static_cast<std::size_t>(i)]
                                        : static_cast<double>(a.i64[static_cast<std::size_t>(i)]);
  }
  return t;
}

double ArrayFile::scalar(const std::string& name) const {
  const NamedArray& a = at(name);
  if (a.element_count() != 1) throw FormatError("array '" + name + "' is not a scalar");
  return a.dtype == DType::F64 ? a.f64[0] : static_cast<double>(a.i64[0]);
}

std::vector<std::int64_t> ArrayFile::ints(const std::string& name) const {
  const NamedArray& a = at(name);
  if (a.dtype != DType::I64) throw FormatError("array '" + name + "' is not i64");
  return a.i64;
}

std::string ArrayFile::serialize() const {
  nlohmann::json header;
  header["arrays"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& a : arrays_) {
    header["arrays"].push_back({{"name", a.name},
                                {"dtype", dtype_name(a.dtype)},
                                {"shape", a.shape},
                                {"byte_offset", offset}});
    offset += 8 * static_cast<std::uint64_t>(a.element_count());
  }
  header["meta"] = meta_;
  const std::string text = header.dump();
  if (text.size() > 0xffffffffu) throw FormatError("header too large");

  std::string out(kMagic, 8);
  const auto len = static_cast<std::uint32_t>(text.size());
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((len >> (8 * b)) & 0xff));
  out += text;
  out.reserve(out.size() + offset);
  for (const auto& a : arrays_) {
    if (a.dtype == DType::F64) {
      for (double v : a.f64) append_u64(out, std::bit_cast<std::uint64_t>(v));
    } else {
      for (std::int64_t v : a.i64) append_u64(out, static_cast<std::uint64_t>(v));
    }
  }
  return out;
}

ArrayFile ArrayFile::parse(const std::string& bytes) {
  if (bytes.size() < 12 || bytes.compare(0, 8, kMagic) != 0) {
    throw FormatError("not an MGNTARR1 container");
  }
  std::uint32_t len = 0;
  for (int b = 0; b < 4; ++b) {
    len |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[8 + b])) << (8 * b);
  }
  if (12 + static_cast<std::size_t>(len) > bytes.size()) throw FormatError("truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(12, len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed header: ") + e.what());
  }
  const std::size_t base = 12 + len;
  ArrayFile file;
  if (header.contains("meta")) file.meta_ = header["meta"];
  for (const auto& entry : header.at("arrays")) {
    NamedArray a;
    a.name = entry.at("name").get<std::string>();
    const auto dtype = entry.at("dtype").get<std::string>();
    if (dtype == "f64") {
      a.dtype = DType::F64;
    } else if (dtype == "i64") {
      a.dtype = DType::I64;
    } else {
      throw FormatError("array '" + a.name + "': unknown dtype " + dtype);
    }
    a.shape = entry.at("shape").get<std::vector<std::int64_t>>();
    const auto off = entry.at("byte_offset").get<std::uint64_t>();
    const auto n = static_cast<std::size_t>(a.element_count());
    if (base + off + 8 * n > bytes.size()) throw FormatError("array '" + a.name + "' truncated");
    for (std::size_t i = 0; i < n; ++i) {
      const std::uint64_t raw = read_u64(bytes, base + off + 8 * i);
      if (a.dtype == DType::F64) {
        a.f64.push_back(std::bit_cast<double>(raw));
      } else {
        a.i64.push_back(static_cast<std::int64_t>(raw));
      }
    }
    file.arrays_.push_back(std::move(a));
  }
  return file;
}

void ArrayFile::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  const std::string bytes = serialize();
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

ArrayFile ArrayFile::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse(ss.str());
}

}  // namespace mgnt
