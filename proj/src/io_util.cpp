#include "imode/io_util.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;

namespace imode::io {

std::string fmt17(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void append17(std::string& out, double v) {
  char buf[32];
  int n = std::snprintf(buf, sizeof buf, "%.17g", v);
  out.append(buf, size_t(n));
}

std::string json_escape(const std::string& s) {
  std::string out;
  out.reserve(s.size() + 2);
  for (char c : s) {
    switch (c) {
      case '"': out += "\\\""; break;
      case '\\': out += "\\\\"; break;
      case '\n': out += "\\n"; break;
      case '\t': out += "\\t"; break;
      case '\r': out += "\\r"; break;
      default: out += c;
    }
  }
  return out;
}

void append_json_array(std::string& out, std::span<const double> vs) {
  out += '[';
  for (size_t i = 0; i < vs.size(); ++i) {
    if (i) out += ',';
    append17(out, vs[i]);
  }
  out += ']';
}

std::string read_text(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw DataError("cannot read " + p.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_text_atomic(const fs::path& p, const std::string& content) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  fs::path tmp = p;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot write " + tmp.string());
    f.write(content.data(), std::streamsize(content.size()));
    if (!f) throw DataError("short write to " + tmp.string());
  }
  fs::rename(tmp, p);
}

void ensure_dir(const fs::path& p) { fs::create_directories(p); }

std::string provenance_line(uint64_t config_hash) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "# config_hash=%016llx", (unsigned long long)config_hash);
  return buf;
}

Csv read_csv(const fs::path& p) {
  std::string text = read_text(p);
  Csv csv;
  size_t pos = 0;
  bool have_header = false;
  while (pos < text.size()) {
    size_t eol = text.find('\n', pos);
    if (eol == std::string::npos) eol = text.size();
    std::string_view line(text.data() + pos, eol - pos);
    pos = eol + 1;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty() || line[0] == '#') continue;
    if (!have_header) {
      size_t c = 0;
      while (c <= line.size()) {
        size_t comma = line.find(',', c);
        if (comma == std::string_view::npos) comma = line.size();
        csv.header.emplace_back(line.substr(c, comma - c));
        c = comma + 1;
      }
      have_header = true;
      continue;
    }
    std::vector<double> row;
    row.reserve(csv.header.size());
    size_t c = 0;
    while (c <= line.size()) {
      size_t comma = line.find(',', c);
      if (comma == std::string_view::npos) comma = line.size();
      std::string cell(line.substr(c, comma - c));
      char* end = nullptr;
      double v = std::strtod(cell.c_str(), &end);
      if (end == cell.c_str()) throw DataError("non-numeric cell '" + cell + "' in " + p.string());
      row.push_back(v);
      c = comma + 1;
    }
    if (row.size() != csv.header.size())
      throw DataError("ragged row in " + p.string());
    csv.rows.push_back(std::move(row));
  }
  if (!have_header) throw DataError("empty csv " + p.string());
  return csv;
}

}  // namespace imode::io
