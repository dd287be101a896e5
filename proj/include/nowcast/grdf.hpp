#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nowcast/grid.hpp"

namespace nowcast {

/// GRDF container: 8-byte magic "GRDF0001", uint32 little-endian header length,
/// UTF-8 JSON header {dims, kind, lead_time?, timestamp?, ...}, then the
/// row-major float32 little-endian payload.
struct GrdfFile {
  std::vector<std::int64_t> dims;
  std::string kind;
  std::optional<int> lead_time;
  std::optional<std::int64_t> timestamp;
  nlohmann::json extra = nlohmann::json::object();  // additional header fields
  std::vector<float> payload;

  std::size_t element_count() const;
};

inline constexpr char kGrdfMagic[8] = {'G', 'R', 'D', 'F', '0', '0', '0', '1'};

std::vector<std::uint8_t> encode_grdf(const GrdfFile& f);
GrdfFile decode_grdf(const std::vector<std::uint8_t>& bytes);

void write_grdf(const std::filesystem::path& path, const GrdfFile& f);
GrdfFile read_grdf(const std::filesystem::path& path);

/// Tensor <-> GRDF. Single-channel tensors are written with dims [H, W].
GrdfFile tensor_to_grdf(const Tensor& t, std::string kind);
Tensor grdf_to_tensor(const GrdfFile& f);

GrdfFile class_grid_to_grdf(const ClassGrid& g, std::string kind = "class_grid");
ClassGrid grdf_to_class_grid(const GrdfFile& f);
GrdfFile mask_to_grdf(const ValidityMask& m);
ValidityMask grdf_to_mask(const GrdfFile& f);

/// Rounds every value through float32, i.e. what a GRDF round trip yields.
void quantize_to_float32(std::vector<double>& values);
void quantize_to_float32(Tensor& t);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);
void write_text_file(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);

/// Lowercase hex SHA-256.
std::string sha256_hex(const void* data, std::size_t size);
std::string sha256_hex(const std::string& s);
std::string sha256_file(const std::filesystem::path& path);

}  // namespace nowcast
