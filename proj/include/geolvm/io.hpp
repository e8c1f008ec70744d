#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "geolvm/errors.hpp"

namespace geolvm::io {

// 17 significant digits: enough to round-trip any double exactly.
inline std::string format_double(double x) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return std::string(buf);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorKind::Io, "cannot open file for reading: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Write via a temp file in the same directory, then rename. A crashed run
// never leaves a partially written artifact at the final path.
inline void atomic_write(const std::filesystem::path& path, const std::string& content) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(out.good(), ErrorKind::Io, "cannot open file for writing: " + tmp.string());
    out << content;
    out.flush();
    require(out.good(), ErrorKind::Io, "write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  require(!ec, ErrorKind::Io, "rename failed: " + tmp.string() + " -> " + path.string());
}

// FNV-1a, 64-bit. Stable across platforms; used for config digests.
inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string hex_digest(const std::string& s) {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a64(s)));
  return std::string(buf);
}

struct CsvWriter {
  explicit CsvWriter(std::vector<std::string> header) {
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (i) out << ',';
      out << header[i];
    }
    out << '\n';
    columns = header.size();
  }
  void row(const std::vector<double>& values) {
    require(values.size() == columns, ErrorKind::Dimension, "csv row width mismatch");
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (i) out << ',';
      out << format_double(values[i]);
    }
    out << '\n';
  }
  std::string str() const { return out.str(); }
  std::ostringstream out;
  std::size_t columns = 0;
};

// Minimal reader for our own CSV artifacts: numeric cells, one header line.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;
};

inline CsvTable read_csv(const std::string& content) {
  CsvTable t;
  std::istringstream in(content);
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string cell;
    if (first) {
      while (std::getline(ls, cell, ',')) t.header.push_back(cell);
      first = false;
      continue;
    }
    std::vector<double> row;
    while (std::getline(ls, cell, ',')) {
      try {
        row.push_back(std::stod(cell));
      } catch (const std::exception&) {
        fail(ErrorKind::Validation, "non-numeric csv cell: " + cell);
      }
    }
    require(row.size() == t.header.size(), ErrorKind::Validation, "csv row width mismatch");
    t.rows.push_back(std::move(row));
  }
  return t;
}

}  // namespace geolvm::io
