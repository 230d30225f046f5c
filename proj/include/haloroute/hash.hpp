#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <string_view>

namespace haloroute {

/// Git-style content hash: hex SHA-1 of "blob <len>\0" + bytes.
std::string content_hash(std::span<const unsigned char> bytes);
std::string content_hash(std::string_view bytes);
std::string file_content_hash(const std::filesystem::path& path);

}  // namespace haloroute
