#include "nowcast/grdf.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include <openssl/evp.h>

namespace nowcast {

static_assert(std::endian::native == std::endian::little,
              "GRDF payload encoding assumes a little-endian host");

std::size_t GrdfFile::element_count() const {
  std::size_t n = 1;
  for (auto d : dims) {
    if (d < 0) throw InvalidInput("negative GRDF dimension");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::vector<std::uint8_t> encode_grdf(const GrdfFile& f) {
  if (f.payload.size() != f.element_count()) {
    throw InvalidInput("GRDF payload size does not match dims");
  }
  nlohmann::json header = f.extra.is_object() ? f.extra : nlohmann::json::object();
  header["dims"] = f.dims;
  header["kind"] = f.kind;
  if (f.lead_time) header["lead_time"] = *f.lead_time;
  if (f.timestamp) header["timestamp"] = *f.timestamp;
  const std::string text = header.dump();
  const auto len = static_cast<std::uint32_t>(text.size());

  std::vector<std::uint8_t> out;
  out.reserve(8 + 4 + text.size() + f.payload.size() * 4);
  out.insert(out.end(), kGrdfMagic, kGrdfMagic + 8);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((len >> (8 * i)) & 0xFF));
  out.insert(out.end(), text.begin(), text.end());
  const auto* p = reinterpret_cast<const std::uint8_t*>(f.payload.data());
  out.insert(out.end(), p, p + f.payload.size() * sizeof(float));
  return out;
}

GrdfFile decode_grdf(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kGrdfMagic, 8) != 0) {
    throw InvalidInput("not a GRDF file (bad magic)");
  }
  std::uint32_t len = 0;
  for (int i = 0; i < 4; ++i) len |= static_cast<std::uint32_t>(bytes[8 + i]) << (8 * i);
  if (bytes.size() < 12ull + len) throw InvalidInput("truncated GRDF header");
  const std::string text(bytes.begin() + 12, bytes.begin() + 12 + len);
  nlohmann::json header = nlohmann::json::parse(text);

  GrdfFile f;
  f.dims = header.at("dims").get<std::vector<std::int64_t>>();
  f.kind = header.at("kind").get<std::string>();
  if (header.contains("lead_time")) f.lead_time = header["lead_time"].get<int>();
  if (header.contains("timestamp")) f.timestamp = header["timestamp"].get<std::int64_t>();
  for (const char* k : {"dims", "kind", "lead_time", "timestamp"}) header.erase(k);
  f.extra = std::move(header);

  const std::size_t n = f.element_count();
  const std::size_t off = 12 + len;
  if (bytes.size() != off + n * sizeof(float)) throw InvalidInput("GRDF payload size mismatch");
  f.payload.resize(n);
  std::memcpy(f.payload.data(), bytes.data() + off, n * sizeof(float));
  return f;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInput("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InvalidInput("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  write_file_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

std::string read_text_file(const std::filesystem::path& path) {
  const auto b = read_file_bytes(path);
  return {b.begin(), b.end()};
}

void write_grdf(const std::filesystem::path& path, const GrdfFile& f) {
  write_file_bytes(path, encode_grdf(f));
}

GrdfFile read_grdf(const std::filesystem::path& path) { return decode_grdf(read_file_bytes(path)); }

GrdfFile tensor_to_grdf(const Tensor& t, std::string kind) {
  GrdfFile f;
  if (t.channels() == 1) {
    f.dims = {t.height(), t.width()};
  } else {
    f.dims = {t.channels(), t.height(), t.width()};
  }
  f.kind = std::move(kind);
  f.payload.resize(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) f.payload[i] = static_cast<float>(t[i]);
  return f;
}

Tensor grdf_to_tensor(const GrdfFile& f) {
  Tensor t;
  if (f.dims.size() == 2) {
    t = Tensor(1, static_cast<int>(f.dims[0]), static_cast<int>(f.dims[1]));
  } else if (f.dims.size() == 3) {
    t = Tensor(static_cast<int>(f.dims[0]), static_cast<int>(f.dims[1]),
               static_cast<int>(f.dims[2]));
  } else if (f.dims.size() == 1) {
    t = Tensor(1, 1, static_cast<int>(f.dims[0]));
  } else {
    throw InvalidInput("GRDF grid must have 1 to 3 dims");
  }
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = f.payload[i];
  return t;
}

GrdfFile class_grid_to_grdf(const ClassGrid& g, std::string kind) {
  GrdfFile f;
  f.dims = {g.height, g.width};
  f.kind = std::move(kind);
  f.payload.assign(g.labels.begin(), g.labels.end());
  return f;
}

ClassGrid grdf_to_class_grid(const GrdfFile& f) {
  if (f.dims.size() != 2) throw InvalidInput("class grid must be 2-D");
  ClassGrid g(static_cast<int>(f.dims[0]), static_cast<int>(f.dims[1]));
  for (std::size_t i = 0; i < g.size(); ++i) g.labels[i] = static_cast<std::uint8_t>(f.payload[i]);
  g.validate();
  return g;
}

GrdfFile mask_to_grdf(const ValidityMask& m) {
  GrdfFile f;
  f.dims = {m.height, m.width};
  f.kind = "validity_mask";
  f.payload.assign(m.valid.begin(), m.valid.end());
  return f;
}

ValidityMask grdf_to_mask(const GrdfFile& f) {
  if (f.dims.size() != 2) throw InvalidInput("mask must be 2-D");
  ValidityMask m(static_cast<int>(f.dims[0]), static_cast<int>(f.dims[1]), false);
  for (std::size_t i = 0; i < m.size(); ++i) m.valid[i] = f.payload[i] != 0.0f ? 1 : 0;
  return m;
}

void quantize_to_float32(std::vector<double>& values) {
  for (double& v : values) v = static_cast<double>(static_cast<float>(v));
}

void quantize_to_float32(Tensor& t) {
  for (double& v : t.values()) v = static_cast<double>(static_cast<float>(v));
}

std::string sha256_hex(const void* data, std::size_t size) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(data, size, md, &len, EVP_sha256(), nullptr);
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(len * 2);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[md[i] >> 4]);
    out.push_back(kHex[md[i] & 0xF]);
  }
  return out;
}

std::string sha256_hex(const std::string& s) { return sha256_hex(s.data(), s.size()); }

std::string sha256_file(const std::filesystem::path& path) {
  const auto b = read_file_bytes(path);
  return sha256_hex(b.data(), b.size());
}

}  // namespace nowcast
