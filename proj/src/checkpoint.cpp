#include "cpf/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace cpf {

namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

class Writer {
 public:
  explicit Writer(std::ofstream& out) : out_(out) {}
  void bytes(const void* p, std::size_t n) { out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }
  void u8(std::uint8_t v) { bytes(&v, 1); }
  void u32(std::uint32_t v) { bytes(&v, 4); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }

 private:
  std::ofstream& out_;
};

class Reader {
 public:
  Reader(std::ifstream& in, std::string where) : in_(in), where_(std::move(where)) {}
  void bytes(void* p, std::size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (!in_) throw Error(where_ + ": truncated checkpoint");
  }
  std::uint8_t u8() {
    std::uint8_t v;
    bytes(&v, 1);
    return v;
  }
  std::uint32_t u32() {
    std::uint32_t v;
    bytes(&v, 4);
    return v;
  }
  std::string str() {
    const std::uint32_t n = u32();
    if (n > (1u << 20)) throw Error(where_ + ": corrupt string length");
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }

 private:
  std::ifstream& in_;
  std::string where_;
};

}  // namespace

const NamedTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

void save_checkpoint(const fs::path& path, const std::map<std::string, std::string>& hyper,
                     const ParamList& tensors) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open '" + tmp.string() + "' for writing");
    Writer w(out);
    w.bytes("CPF1", 4);
    w.u32(kCheckpointVersion);
    w.u32(static_cast<std::uint32_t>(hyper.size()));
    for (const auto& [k, v] : hyper) {
      w.str(k);
      w.str(v);
    }
    w.u32(static_cast<std::uint32_t>(tensors.size()));
    for (const auto& t : tensors) {
      w.str(t.name);
      w.u8(t.trainable ? 1 : 0);
      w.u32(static_cast<std::uint32_t>(t.tensor.rows()));
      w.u32(static_cast<std::uint32_t>(t.tensor.cols()));
      auto v = t.tensor.values();
      w.bytes(v.data(), v.size() * sizeof(double));
    }
    if (!out) throw Error("write failed for '" + tmp.string() + "'");
  }
  fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint '" + path.string() + "'");
  Reader r(in, path.string());
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, "CPF1", 4) != 0) throw Error(path.string() + ": not a checkpoint (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw Error(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  Checkpoint c;
  const std::uint32_t nh = r.u32();
  for (std::uint32_t i = 0; i < nh; ++i) {
    std::string k = r.str();
    c.hyper[k] = r.str();
  }
  const std::uint32_t nt = r.u32();
  for (std::uint32_t i = 0; i < nt; ++i) {
    NamedTensor t;
    t.name = r.str();
    t.trainable = r.u8() != 0;
    const std::uint32_t rows = r.u32(), cols = r.u32();
    if (static_cast<std::uint64_t>(rows) * cols > (1ull << 28)) throw Error(path.string() + ": corrupt tensor shape");
    std::vector<double> v(static_cast<std::size_t>(rows) * cols);
    r.bytes(v.data(), v.size() * sizeof(double));
    t.tensor = Tensor::from(rows, cols, std::move(v));
    c.tensors.push_back(std::move(t));
  }
  return c;
}

void restore_tensors(const ParamList& target, const Checkpoint& ckpt) {
  for (const auto& t : target) {
    const NamedTensor* src = ckpt.find(t.name);
    if (!src) throw Error("checkpoint is missing tensor '" + t.name + "'");
    if (src->tensor.shape() != t.tensor.shape())
      throw ShapeError("checkpoint tensor '" + t.name + "' has shape " + to_string(src->tensor.shape()) +
                       ", model expects " + to_string(t.tensor.shape()));
    Tensor dst = t.tensor;
    auto out = dst.mutable_values();
    auto in = src->tensor.values();
    std::copy(in.begin(), in.end(), out.begin());
  }
}

}  // namespace cpf
