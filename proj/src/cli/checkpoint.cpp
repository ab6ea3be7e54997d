#include "bitfold/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "bitfold/error.hpp"

namespace bitfold {

namespace {

constexpr char kMagic[4] = {'B', 'F', 'C', 'K'};

template <typename T>
void put(std::string& out, T v) {
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  out.append(reinterpret_cast<const char*>(buf), sizeof(T));
}

void put_string(std::string& out, std::string_view s) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.append(s);
}

class Reader {
public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    unsigned char buf[sizeof(T)];
    std::memcpy(buf, bytes_.data() + at_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
    at_ += sizeof(T);
    T v;
    std::memcpy(&v, buf, sizeof(T));
    return v;
  }

  std::string_view raw(std::size_t n) {
    need(n);
    std::string_view s = bytes_.substr(at_, n);
    at_ += n;
    return s;
  }

  std::string string() { return std::string(raw(get<std::uint32_t>())); }
  bool done() const { return at_ == bytes_.size(); }
  std::size_t remaining() const { return bytes_.size() - at_; }

private:
  void need(std::size_t n) const {
    if (bytes_.size() - at_ < n)
      fail(ErrorCode::Io, "checkpoint truncated at byte " + std::to_string(at_));
  }

  std::string_view bytes_;
  std::size_t at_ = 0;
};

} // namespace

std::string encode_checkpoint(const Checkpoint& ckpt) {
  std::string out(kMagic, 4);
  put<std::uint32_t>(out, kCheckpointVersion);
  put_string(out, ckpt.config.to_text());
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.params.tensor_count()));
  for (const auto& [name, t] : ckpt.params) {
    put_string(out, name);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (int d : t.shape()) put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    for (std::size_t i = 0; i < t.size(); ++i) put<double>(out, t.data()[i]);
  }
  put<std::int64_t>(out, ckpt.step);
  put_string(out, ckpt.rng_state);
  return out;
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  Reader r(bytes);
  if (r.raw(4) != std::string_view(kMagic, 4)) fail(ErrorCode::Io, "not a checkpoint (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) fail(ErrorCode::Io, "unsupported checkpoint version " + std::to_string(version));
  Checkpoint ckpt;
  const std::string echo = r.string();
  ckpt.config = ModelConfig::from_text(echo);
  if (ckpt.config.to_text() != echo) fail(ErrorCode::InvalidConfig, "checkpoint config echo is not canonical");
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t p = 0; p < count; ++p) {
    const std::string name = r.string();
    const auto rank = r.get<std::uint32_t>();
    if (rank > 8) fail(ErrorCode::Io, "checkpoint record '" + name + "' has rank " + std::to_string(rank));
    Shape shape(rank);
    for (int& d : shape) d = static_cast<int>(r.get<std::uint32_t>());
    if (shape_size(shape) > r.remaining() / sizeof(double))
      fail(ErrorCode::Io, "checkpoint record '" + name + "' exceeds the file size");
    std::vector<double> values(shape_size(shape));
    for (double& v : values) v = r.get<double>();
    ckpt.params.add(name, Tensor(shape, std::move(values)));
  }
  ckpt.step = r.get<std::int64_t>();
  ckpt.rng_state = r.string();
  if (!r.done()) fail(ErrorCode::Io, "trailing bytes after checkpoint");
  return ckpt;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream f(path, std::ios::binary);
  if (!f) fail(ErrorCode::Io, "cannot open " + path + " for writing");
  const std::string bytes = encode_checkpoint(ckpt);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) fail(ErrorCode::Io, "write to " + path + " failed");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(ErrorCode::Io, "cannot open checkpoint " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return decode_checkpoint(ss.str());
}

Checkpoint load_checkpoint(const std::string& path, const ModelConfig& expected) {
  Checkpoint ckpt = load_checkpoint(path);
  if (!(ckpt.config == expected))
    fail(ErrorCode::InvalidConfig, "checkpoint " + path + " was written with a different configuration");
  return ckpt;
}

} // namespace bitfold
