#pragma once

// Minimal CSV emission and parsing for the tool's tabular outputs. Doubles
// are printed with 17 significant digits so they parse back bit-exactly.

#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "geofaith/binary_io.hpp"
#include "geofaith/error.hpp"

namespace geofaith::csv {

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string quote(std::string_view field) {
  if (field.find_first_of(",\"\n\r") == std::string_view::npos) return std::string(field);
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out.push_back('"');
    out.push_back(c);
  }
  out.push_back('"');
  return out;
}

class Writer {
 public:
  explicit Writer(const std::vector<std::string>& header) { row(header); }

  Writer& row(const std::vector<std::string>& fields) {
    for (std::size_t i = 0; i < fields.size(); ++i) {
      if (i) text_.push_back(',');
      text_ += quote(fields[i]);
    }
    text_.push_back('\n');
    return *this;
  }

  const std::string& str() const { return text_; }
  void save(const std::filesystem::path& path) const { io::write_text_atomic(path, text_); }

 private:
  std::string text_;
};

inline std::vector<std::string> split_line(std::string_view line) {
  std::vector<std::string> fields(1);
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        fields.back().push_back('"');
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        fields.back().push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.emplace_back();
    } else if (c != '\r') {
      fields.back().push_back(c);
    }
  }
  return fields;
}

class Table {
 public:
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  static Table parse(std::string_view text, const std::string& context) {
    Table t;
    std::size_t start = 0;
    while (start < text.size()) {
      std::size_t end = text.find('\n', start);
      if (end == std::string_view::npos) end = text.size();
      const auto line = text.substr(start, end - start);
      start = end + 1;
      if (line.empty()) continue;
      auto fields = split_line(line);
      if (t.header.empty()) {
        t.header = std::move(fields);
      } else {
        if (fields.size() != t.header.size()) fail(ErrorCode::IoFailure, context + ": ragged CSV row");
        t.rows.push_back(std::move(fields));
      }
    }
    if (t.header.empty()) fail(ErrorCode::IoFailure, context + ": empty CSV");
    return t;
  }

  static Table load(const std::filesystem::path& path) {
    const auto bytes = io::read_file(path, ErrorCode::IoFailure);
    return parse(std::string_view(bytes.data(), bytes.size()), path.string());
  }

  std::size_t column(std::string_view name) const {
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (header[i] == name) return i;
    }
    fail(ErrorCode::IoFailure, "CSV lacks column '" + std::string(name) + "'");
  }

  double number(std::size_t row, std::size_t col) const {
    try {
      std::size_t used = 0;
      const double v = std::stod(rows[row][col], &used);
      if (used != rows[row][col].size()) throw std::invalid_argument("trailing");
      return v;
    } catch (const std::exception&) {
      fail(ErrorCode::IoFailure, "CSV field '" + rows[row][col] + "' is not a number");
    }
  }
};

}  // namespace geofaith::csv
