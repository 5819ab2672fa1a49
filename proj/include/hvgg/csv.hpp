#pragma once

// Minimal RFC-4180 style CSV: quoted fields, doubled quotes, '#' comment lines
// skipped on read.

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace hvgg::csv {

using Row = std::vector<std::string>;

std::string quote(const std::string& field);
void write_row(std::ostream& os, const Row& row);

struct Table {
  Row header;
  std::vector<Row> rows;
  std::vector<std::string> comments;  // without the leading '#'

  // Column position by header name; throws DataError when missing.
  std::size_t column(const std::string& name) const;
};

Table read(std::istream& is);
// Throws DataError when the file cannot be opened.
Table read_file(const std::filesystem::path& path);

void write_file(const std::filesystem::path& path, const Row& header,
                const std::vector<Row>& rows, const std::vector<std::string>& comments = {});

}  // namespace hvgg::csv
