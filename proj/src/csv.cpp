#include "hvgg/csv.hpp"

#include <fstream>
#include <istream>
#include <ostream>

#include "hvgg/error.hpp"

namespace hvgg::csv {

std::string quote(const std::string& field) {
  if (field.find_first_of(",\"\n\r") == std::string::npos) return field;
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

void write_row(std::ostream& os, const Row& row) {
  for (std::size_t i = 0; i < row.size(); ++i) {
    if (i) os << ',';
    os << quote(row[i]);
  }
  os << '\n';
}

std::size_t Table::column(const std::string& name) const {
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == name) return i;
  }
  throw DataError("CSV is missing column '" + name + "'");
}

namespace {

// Reads one logical record, which may span lines inside quotes.
bool read_record(std::istream& is, Row& row, std::string& raw) {
  row.clear();
  raw.clear();
  std::string field;
  bool in_quotes = false;
  bool any = false;
  char c;
  while (is.get(c)) {
    any = true;
    raw += c;
    if (in_quotes) {
      if (c == '"') {
        if (is.peek() == '"') {
          is.get(c);
          raw += c;
          field += '"';
        } else {
          in_quotes = false;
        }
      } else {
        field += c;
      }
      continue;
    }
    if (c == '"') {
      in_quotes = true;
    } else if (c == ',') {
      row.push_back(std::move(field));
      field.clear();
    } else if (c == '\n') {
      break;
    } else if (c != '\r') {
      field += c;
    }
  }
  if (in_quotes) throw DataError("CSV has an unterminated quoted field");
  if (!any) return false;
  row.push_back(std::move(field));
  return true;
}

}  // namespace

Table read(std::istream& is) {
  Table table;
  Row row;
  std::string raw;
  bool have_header = false;
  while (read_record(is, row, raw)) {
    if (!raw.empty() && raw.front() == '#') {
      auto text = raw.substr(1);
      while (!text.empty() && (text.back() == '\n' || text.back() == '\r')) text.pop_back();
      table.comments.push_back(text);
      continue;
    }
    if (row.size() == 1 && row[0].empty()) continue;
    if (!have_header) {
      table.header = row;
      have_header = true;
      continue;
    }
    if (row.size() != table.header.size()) {
      throw DataError("CSV row " + std::to_string(table.rows.size() + 1) + " has " +
                      std::to_string(row.size()) + " fields, header has " +
                      std::to_string(table.header.size()));
    }
    table.rows.push_back(row);
  }
  return table;
}

Table read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return read(in);
}

void write_file(const std::filesystem::path& path, const Row& header,
                const std::vector<Row>& rows, const std::vector<std::string>& comments) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& c : comments) out << '#' << c << '\n';
  write_row(out, header);
  for (const auto& r : rows) write_row(out, r);
}

}  // namespace hvgg::csv
