#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "imode/common.hpp"

namespace imode::io {

// %.17g: shortest fixed-width format that round-trips IEEE doubles exactly.
// Every numeric file in the project goes through this, which is what makes
// byte-identical reruns feasible.
std::string fmt17(double v);
void append17(std::string& out, double v);

std::string json_escape(const std::string& s);
void append_json_array(std::string& out, std::span<const double> vs);

std::string read_text(const std::filesystem::path& p);           // DataError if unreadable
void write_text_atomic(const std::filesystem::path& p, const std::string& content);
void ensure_dir(const std::filesystem::path& p);

// "# config_hash=<16 hex digits>"
std::string provenance_line(uint64_t config_hash);

struct Csv {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;
};

// Parses a simple numeric CSV. Lines starting with '#' are skipped; the first
// remaining line is the header.
Csv read_csv(const std::filesystem::path& p);

}  // namespace imode::io
