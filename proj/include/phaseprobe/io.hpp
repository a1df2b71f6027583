#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "phaseprobe/common.hpp"

namespace phaseprobe {

class IoError : public Error {
public:
    using Error::Error;
};

std::uint32_t crc32(std::span<const std::byte> bytes);
std::uint32_t crc32(std::string_view text);

std::string read_text_file(const std::filesystem::path& path);
std::vector<std::byte> read_binary_file(const std::filesystem::path& path);

/// Writes to "<path>.tmp" and renames over the target so readers never see a
/// partial file.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::byte> bytes);
void write_file_atomic(const std::filesystem::path& path, std::string_view text);

/// float32 values as little-endian bytes, independent of host byte order.
std::vector<std::byte> floats_to_le_bytes(std::span<const float> values);
std::vector<float> floats_from_le_bytes(std::span<const std::byte> bytes);

/// Shortest round-trippable decimal form of a double ("nan"/"inf" for
/// non-finite values).
std::string format_double(double v);

}  // namespace phaseprobe
