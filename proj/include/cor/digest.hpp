#pragma once

#include <string>
#include <string_view>

namespace cor {

// Lowercase hex SHA-256 of `data`.
std::string sha256_hex(std::string_view data);

std::string base64_encode(std::string_view bytes);
// Throws Error{Malformed} on invalid input.
std::string base64_decode(std::string_view encoded);

}  // namespace cor
