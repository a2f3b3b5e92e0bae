#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace codembed {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string read_file(const std::filesystem::path& path);

/// Writes to `<path>.tmp` then renames over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

/// `key = value` lines; `#` starts a comment line. Duplicate keys and lines
/// without `=` raise std::invalid_argument naming source and line.
std::map<std::string, std::string> parse_key_values(std::string_view text, const std::string& source);

std::vector<std::string> split(std::string_view s, char sep);
std::string trim(std::string_view s);

/// Shortest decimal text that parses back to the same double.
std::string format_double(double v);

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL);

void append_le32(std::string& out, float v);
float read_le32(const unsigned char* p);
void append_le64(std::string& out, std::uint64_t v);
std::uint64_t read_le64(const unsigned char* p);

}  // namespace codembed
