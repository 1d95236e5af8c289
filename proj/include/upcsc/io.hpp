#ifndef UPCSC_IO_HPP
#define UPCSC_IO_HPP

#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace upcsc::io {

/// Shortest text that round-trips: 17 significant digits.
std::string format_double(double value);
double parse_double(std::string_view text);
long long parse_int(std::string_view text);

std::vector<std::string> split(std::string_view line, char sep);
std::string trim(std::string_view s);

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(std::string_view name) const;
};

CsvTable read_csv(const std::string& path);

/// `key = value` lines; `#` starts a comment. Later keys override earlier ones.
std::map<std::string, std::string> read_key_values(const std::string& path);
std::map<std::string, std::string> parse_key_values(std::string_view text);

std::string read_file(const std::string& path);

}  // namespace upcsc::io

#endif  // UPCSC_IO_HPP
