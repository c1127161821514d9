#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace cor::text {

std::string_view trim(std::string_view s) noexcept;
std::string lower(std::string_view s);
bool iequals(std::string_view a, std::string_view b) noexcept;
bool istarts_with(std::string_view s, std::string_view prefix) noexcept;
bool contains_newline(std::string_view s) noexcept;

// Splits on '\n', dropping a trailing '\r' from each line. A trailing newline
// does not produce an extra empty line.
std::vector<std::string_view> split_lines(std::string_view s);
std::string join(const std::vector<std::string>& parts, std::string_view sep);

// Collapses runs of ASCII whitespace to a single space and trims.
std::string collapse_whitespace(std::string_view s);

// Matches `words` (case-insensitive, any whitespace between them) at the
// start of `line`, followed by optional whitespace and a colon. On success
// returns the trimmed remainder after the colon.
bool match_label(std::string_view line, std::initializer_list<std::string_view> words,
                 std::string_view* rest);

std::string replace_all(std::string s, std::string_view from, std::string_view to);

}  // namespace cor::text
