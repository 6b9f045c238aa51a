#include "revkd/report.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace revkd {

void MetricReport::add(std::string name, double value, bool flagged) {
  entries.push_back({std::move(name), value, flagged || !std::isfinite(value)});
}

const MetricReport::Entry* MetricReport::find(const std::string& name) const {
  for (const auto& e : entries) {
    if (e.name == name) return &e;
  }
  return nullptr;
}

double MetricReport::at(const std::string& name) const {
  const Entry* e = find(name);
  if (!e) throw std::out_of_range("metric '" + name + "' not in report");
  return e->value;
}

void MetricReport::validate() const {
  for (const auto& e : entries) {
    if (!std::isfinite(e.value) && !e.flagged) {
      throw std::runtime_error("metric '" + e.name + "' is non-finite and unflagged");
    }
  }
}

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  // nlohmann's serializer emits the shortest round-trip representation
  return nlohmann::json(v).dump();
}

nlohmann::json json_number(double v) {
  if (!std::isfinite(v)) return nullptr;
  return v;
}

std::string to_csv(const MetricReport& r) {
  std::ostringstream os;
  os << "name,value,flagged,seed,config_fingerprint\n";
  for (const auto& e : r.entries) {
    os << e.name << ',' << format_double(e.value) << ',' << (e.flagged ? 1 : 0) << ',' << r.seed << ','
       << r.config_fingerprint << '\n';
  }
  return os.str();
}

nlohmann::json to_json(const MetricReport& r) {
  nlohmann::json metrics = nlohmann::json::object();
  nlohmann::json flagged = nlohmann::json::array();
  for (const auto& e : r.entries) {
    metrics[e.name] = json_number(e.value);
    if (e.flagged) flagged.push_back(e.name);
  }
  return {{"metrics", metrics},
          {"flagged", flagged},
          {"seed", r.seed},
          {"config_fingerprint", r.config_fingerprint},
          {"timestamp", r.timestamp}};
}

void write_file_atomic(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << content;
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string fingerprint(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : text) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace revkd
