#include "mtalk/autodiff/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace mtalk::ad {

namespace {

constexpr char kMagic[8] = {'M', 'T', 'A', 'L', 'K', 'C', 'K', '1'};

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(const std::string& in, std::size_t pos) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  return v;
}

void put_f32(std::string& out, float f) {
  const auto bits = std::bit_cast<std::uint32_t>(f);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

float get_f32(const std::string& in, std::size_t pos) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  return std::bit_cast<float>(bits);
}

}  // namespace

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  nlohmann::json header;
  header["format_version"] = kCheckpointFormatVersion;
  header["dtype"] = "f32";
  header["step"] = ckpt.step;
  header["config"] = ckpt.config;
  auto& list = header["params"] = nlohmann::json::array();
  for (const auto& p : ckpt.params) list.push_back({{"name", p.name}, {"shape", p.value.shape}});
  const std::string h = header.dump();

  std::string out(kMagic, kMagic + 8);
  put_u64(out, h.size());
  out += h;
  out.reserve(out.size() + 4 * ckpt.params.numel());
  for (const auto& p : ckpt.params)
    for (float f : p.value.data) put_f32(out, f);
  return out;
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 8) != 0)
    throw FormatError("checkpoint: missing magic header");
  const std::uint64_t hlen = get_u64(bytes, 8);
  if (16 + hlen > bytes.size()) throw FormatError("checkpoint: truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(16, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: bad header JSON: ") + e.what());
  }
  if (header.value("format_version", 0) != kCheckpointFormatVersion)
    throw FormatError("checkpoint: unsupported format_version");
  if (header.value("dtype", std::string()) != "f32") throw FormatError("checkpoint: unsupported dtype");

  Checkpoint ck;
  ck.step = header.value("step", std::int64_t{0});
  ck.config = header.value("config", nlohmann::json::object());
  std::size_t pos = 16 + hlen;
  for (const auto& entry : header.at("params")) {
    Shape shape = entry.at("shape").get<Shape>();
    const std::size_t n = shape_numel(shape);
    if (pos + 4 * n > bytes.size()) throw FormatError("checkpoint: truncated payload");
    std::vector<float> vals(n);
    for (std::size_t i = 0; i < n; ++i) vals[i] = get_f32(bytes, pos + 4 * i);
    pos += 4 * n;
    ck.params.add(entry.at("name").get<std::string>(), Tensor<float>(std::move(shape), std::move(vals)));
  }
  if (pos != bytes.size()) throw FormatError("checkpoint: trailing bytes after payload");
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("checkpoint: cannot open " + path.string() + " for writing");
  const std::string bytes = serialize_checkpoint(ckpt);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_checkpoint(ss.str());
}

}  // namespace mtalk::ad
