#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace lrlf {

// Decodes a UTF-8 string into codepoints. Returns false on the first invalid
// byte sequence, with *bad_offset set to its byte position.
bool utf8_decode(const std::string& s, std::vector<std::uint32_t>& out,
                 std::size_t* bad_offset = nullptr);

bool utf8_valid(const std::string& s, std::size_t* bad_offset = nullptr);

std::size_t utf8_codepoint_count(const std::string& s);

std::string utf8_encode(const std::vector<std::uint32_t>& cps);

}  // namespace lrlf
