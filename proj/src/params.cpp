#include "fedmoe/params.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <stdexcept>

#include "fedmoe/random.hpp"

namespace fedmoe {

static_assert(std::endian::native == std::endian::little,
              "tensor serialization assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'F', 'M', 'T', 'S'};
constexpr std::uint32_t kVersion = 1;

template <class T>
void put(std::vector<unsigned char>& out, T value) {
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.insert(out.end(), buf, buf + sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::span<const unsigned char> bytes) : bytes_(bytes) {}

  template <class T>
  T get() {
    need(sizeof(T));
    T value;
    std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }

  std::string get_string(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw std::runtime_error("tensor blob truncated");
  }

  std::span<const unsigned char> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

Parameter::Parameter(std::string role_, int layer_, Matrix value_)
    : role(std::move(role_)), layer(layer_), value(std::move(value_)) {
  grad = Matrix(value.rows(), value.cols());
}

TensorList snapshot(const ParamRefs& params) {
  TensorList out;
  out.reserve(params.size());
  for (const Parameter* p : params) out.push_back({p->layer, p->role, p->value});
  return out;
}

void load_into(const ParamRefs& params, const TensorList& tensors) {
  if (params.size() != tensors.size()) {
    throw std::invalid_argument("load_into: expected " + std::to_string(params.size()) +
                                " tensors, got " + std::to_string(tensors.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& t = tensors[i];
    Parameter& p = *params[i];
    if (p.layer != t.layer || p.role != t.role || !p.value.same_shape(t.value)) {
      throw std::invalid_argument("load_into: tensor " + std::to_string(i) + " (" + t.role +
                                  ") does not match parameter " + p.role);
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = tensors[i].value;
}

std::vector<unsigned char> serialize_tensors(const TensorList& tensors) {
  std::vector<unsigned char> out;
  out.insert(out.end(), kMagic, kMagic + 4);
  put<std::uint32_t>(out, kVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    put<std::int32_t>(out, t.layer);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.role.size()));
    out.insert(out.end(), t.role.begin(), t.role.end());
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.value.rows()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.value.cols()));
    for (double v : t.value.values()) put<double>(out, v);
  }
  return out;
}

TensorList deserialize_tensors(std::span<const unsigned char> bytes) {
  Reader in(bytes);
  if (in.get_string(4) != std::string(kMagic, 4)) throw std::runtime_error("bad tensor magic");
  if (in.get<std::uint32_t>() != kVersion) throw std::runtime_error("unsupported tensor version");
  const auto count = in.get<std::uint32_t>();
  TensorList out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.layer = in.get<std::int32_t>();
    t.role = in.get_string(in.get<std::uint32_t>());
    const auto rows = in.get<std::uint32_t>();
    const auto cols = in.get<std::uint32_t>();
    std::vector<double> data(static_cast<std::size_t>(rows) * cols);
    for (auto& v : data) v = in.get<double>();
    t.value = Matrix(rows, cols, std::move(data));
    out.push_back(std::move(t));
  }
  if (!in.done()) throw std::runtime_error("trailing bytes after tensor blob");
  return out;
}

void write_tensor_file(const std::filesystem::path& path, const TensorList& tensors) {
  const auto bytes = serialize_tensors(tensors);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

TensorList read_tensor_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  return deserialize_tensors(bytes);
}

std::uint64_t tensor_hash(const TensorList& tensors) { return fnv1a64(serialize_tensors(tensors)); }

std::string hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace fedmoe
