#include "pairdiff/params.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace pairdiff {

namespace {

constexpr char kWeightsMagic[4] = {'P', 'D', 'W', '1'};
constexpr char kAdamMagic[4] = {'P', 'D', 'A', '1'};

template <typename T>
void write_pod(std::ostream& out, const T& value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw std::runtime_error("truncated binary file");
  return value;
}

template <typename S>
void write_tensor(std::ostream& out, const Tensor<S>& t) {
  const Shape s = t.shape();
  write_pod<std::int32_t>(out, s.n);
  write_pod<std::int32_t>(out, s.h);
  write_pod<std::int32_t>(out, s.w);
  write_pod<std::int32_t>(out, s.c);
  out.write(reinterpret_cast<const char*>(t.data()), std::streamsize(t.size() * sizeof(S)));
}

template <typename S>
Tensor<S> read_tensor(std::istream& in, std::uint8_t scalar_bytes) {
  Shape s;
  s.n = read_pod<std::int32_t>(in);
  s.h = read_pod<std::int32_t>(in);
  s.w = read_pod<std::int32_t>(in);
  s.c = read_pod<std::int32_t>(in);
  Tensor<S> t(s);
  if (scalar_bytes == 4) {
    std::vector<float> buf(t.size());
    in.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size() * 4));
    for (std::size_t i = 0; i < buf.size(); ++i) t.data()[i] = S(buf[i]);
  } else if (scalar_bytes == 8) {
    std::vector<double> buf(t.size());
    in.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size() * 8));
    for (std::size_t i = 0; i < buf.size(); ++i) t.data()[i] = S(buf[i]);
  } else {
    throw std::runtime_error("unsupported scalar width in weights file");
  }
  if (!in) throw std::runtime_error("truncated tensor payload");
  return t;
}

void check_magic(std::istream& in, const char (&magic)[4], const std::filesystem::path& path) {
  char got[4];
  in.read(got, 4);
  if (!in || std::memcmp(got, magic, 4) != 0) throw std::runtime_error("bad file header: " + path.string());
}

}  // namespace

template <typename S>
void ParamStore<S>::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(kWeightsMagic, 4);
  write_pod<std::uint8_t>(out, sizeof(S));
  write_pod<std::uint32_t>(out, std::uint32_t(entries_.size()));
  for (const auto& [name, var] : entries_) {
    write_pod<std::uint32_t>(out, std::uint32_t(name.size()));
    out.write(name.data(), std::streamsize(name.size()));
    write_tensor(out, var.value());
  }
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

template <typename S>
void ParamStore<S>::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  check_magic(in, kWeightsMagic, path);
  const auto bytes = read_pod<std::uint8_t>(in);
  const auto count = read_pod<std::uint32_t>(in);
  if (count != entries_.size())
    throw std::runtime_error("parameter count mismatch in " + path.string() + ": file has " +
                             std::to_string(count) + ", model has " + std::to_string(entries_.size()));
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = read_pod<std::uint32_t>(in);
    std::string name(len, '\0');
    in.read(name.data(), len);
    Tensor<S> t = read_tensor<S>(in, bytes);
    Var<S> target = find(name);
    if (!(target.shape() == t.shape()))
      throw std::runtime_error("shape mismatch for parameter " + name + ": " + t.shape().str() + " vs " +
                               target.shape().str());
    target.value() = std::move(t);
  }
}

template <typename S>
void Adam<S>::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(kAdamMagic, 4);
  write_pod<std::uint8_t>(out, sizeof(S));
  write_pod<std::int64_t>(out, t_);
  write_pod<std::uint32_t>(out, std::uint32_t(m_.size()));
  for (std::size_t i = 0; i < m_.size(); ++i) {
    write_tensor(out, m_[i]);
    write_tensor(out, v_[i]);
  }
}

template <typename S>
void Adam<S>::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  check_magic(in, kAdamMagic, path);
  const auto bytes = read_pod<std::uint8_t>(in);
  t_ = read_pod<std::int64_t>(in);
  const auto count = read_pod<std::uint32_t>(in);
  if (count != m_.size()) throw std::runtime_error("optimizer state size mismatch in " + path.string());
  for (std::size_t i = 0; i < m_.size(); ++i) {
    m_[i] = read_tensor<S>(in, bytes);
    v_[i] = read_tensor<S>(in, bytes);
  }
}

template class ParamStore<float>;
template class ParamStore<double>;
template class Adam<float>;
template class Adam<double>;

}  // namespace pairdiff
