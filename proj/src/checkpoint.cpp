#include "lumen/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>

namespace lumen {

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  bool done() const { return pos_ == bytes_.size(); }
  std::size_t offset() const { return pos_; }

  std::uint32_t u32() {
    need(4, "u32");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }

  std::string raw(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n)
      throw ParseError(std::string("checkpoint: truncated ") + what, pos_);
  }

  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_checkpoint(const std::vector<NamedTensor>& tensors) {
  std::string out(kCheckpointMagic);
  for (const auto& [name, t] : tensors) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    for (float v : t.data()) put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

std::vector<NamedTensor> decode_checkpoint(const std::string& bytes) {
  const std::size_t magic_len = std::strlen(kCheckpointMagic);
  if (bytes.compare(0, magic_len, kCheckpointMagic) != 0)
    throw ParseError("checkpoint: bad magic", 0);
  Reader in(bytes);
  in.raw(magic_len, "magic");
  std::vector<NamedTensor> out;
  while (!in.done()) {
    const std::uint32_t name_len = in.u32();
    std::string name = in.raw(name_len, "name");
    const std::uint32_t rank = in.u32();
    if (rank == 0 || rank > 8) throw ParseError("checkpoint: bad rank for '" + name + "'", in.offset());
    Shape shape;
    std::size_t count = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      const std::uint32_t d = in.u32();
      if (d == 0) throw ParseError("checkpoint: zero dimension in '" + name + "'", in.offset());
      shape.push_back(d);
      count *= d;
    }
    if (count > (bytes.size() - in.offset()) / 4)
      throw ParseError("checkpoint: truncated values of '" + name + "'", in.offset());
    std::vector<float> values(count);
    for (auto& v : values) v = std::bit_cast<float>(in.u32());
    out.push_back({std::move(name), Tensor(std::move(shape), std::move(values))});
  }
  return out;
}

void write_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("checkpoint: cannot open '" + path.string() + "' for writing");
  const std::string bytes = encode_checkpoint(tensors);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error("checkpoint: write failed for '" + path.string() + "'");
}

std::vector<NamedTensor> read_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("checkpoint: cannot open '" + path.string() + "'");
  const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

NamedTensor text_entry(const std::string& name, const std::string& text) {
  std::vector<float> values;
  values.reserve(text.size() + 1);
  for (unsigned char c : text) values.push_back(static_cast<float>(c));
  if (values.empty()) values.push_back(0.0f);  // dims must be positive; NUL marks empty
  const std::size_t n = values.size();
  return {name, Tensor(Shape{n}, std::move(values))};
}

std::string entry_text(const NamedTensor& entry) {
  std::string s;
  for (float v : entry.tensor.data()) {
    if (v == 0.0f) break;
    s.push_back(static_cast<char>(static_cast<unsigned char>(v)));
  }
  return s;
}

}  // namespace lumen
