#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

namespace revkd {

/// Named scalar metrics with provenance. Names carry their units (e.g.
/// "reverse_kld_nats"). Non-finite values are allowed but must be flagged.
struct MetricReport {
  struct Entry {
    std::string name;
    double value = 0.0;
    bool flagged = false;  // undefined or infinite by construction, not an error
  };

  std::vector<Entry> entries;
  std::uint64_t seed = 0;
  std::string config_fingerprint;
  std::string timestamp;

  void add(std::string name, double value, bool flagged = false);
  const Entry* find(const std::string& name) const;
  double at(const std::string& name) const;
  /// Throws if a non-finite value is not flagged.
  void validate() const;
};

/// CSV with pinned header: name,value,flagged,seed,config_fingerprint
std::string to_csv(const MetricReport& r);
/// One JSON object; non-finite values become null.
nlohmann::json to_json(const MetricReport& r);

/// Formats a double for CSV: shortest round-trip text, "inf"/"-inf"/"nan" otherwise.
std::string format_double(double v);
/// JSON number or null for non-finite.
nlohmann::json json_number(double v);

/// Writes via a temporary sibling and rename.
void write_file_atomic(const std::filesystem::path& path, const std::string& content);
std::string read_file(const std::filesystem::path& path);

/// UTC ISO-8601 timestamp.
std::string utc_timestamp();
/// 16-hex-digit FNV-1a fingerprint of a string.
std::string fingerprint(const std::string& text);

}  // namespace revkd
