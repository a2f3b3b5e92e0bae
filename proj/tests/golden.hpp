#pragma once

#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace testing {

struct GoldenPrefix {
  std::string task;
  std::string role;
  std::string prefix;
};

inline std::string unescape_newlines(const std::string& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '\\' && i + 1 < s.size() && s[i + 1] == 'n') {
      out += '\n';
      ++i;
    } else {
      out += s[i];
    }
  }
  return out;
}

inline std::vector<GoldenPrefix> load_golden_prefixes() {
  std::ifstream in(std::string(CODEMBED_GOLDEN_DIR) + "/prefixes.txt");
  if (!in) throw std::runtime_error("golden prefix file missing");
  std::vector<GoldenPrefix> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto a = line.find('\t');
    const auto b = line.find('\t', a + 1);
    rows.push_back({line.substr(0, a), line.substr(a + 1, b - a - 1), unescape_newlines(line.substr(b + 1))});
  }
  return rows;
}

}  // namespace testing
