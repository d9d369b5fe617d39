#pragma once

#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

// RFC 4180 style tables: comma separated, CRLF-free (LF line ends), fields
// quoted when they contain a comma, quote, CR or LF; quotes doubled.
namespace qrt::csv {

using Row = std::vector<std::string>;

class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string escape(std::string_view field);
std::string format_row(const Row& row);
std::string format(const std::vector<Row>& rows);
std::vector<Row> parse(std::string_view text);

std::vector<Row> read_file(const std::string& path);
void write_file(const std::string& path, const std::vector<Row>& rows);

}  // namespace qrt::csv
