#pragma once

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "json.hpp"

#include "circuit_align/digest.hpp"
#include "circuit_align/error.hpp"

namespace circuit_align {

inline constexpr const char* kToolkitVersion = "0.1.0";

// Writes to a sibling temp file and renames it over the target.
inline void atomic_write(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(out), ErrorCode::io_error, "cannot open " + tmp + " for writing");
    out << content;
    out.flush();
    require(static_cast<bool>(out), ErrorCode::io_error, "short write to " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    fail(ErrorCode::io_error, "cannot rename " + tmp + " to " + path.string() + ": " + ec.message());
  }
}

// Shortest round-tripping decimal, always '.' separated.
inline std::string format_number(double v) {
  char buf[40];
  for (int precision = 15; precision <= 17; ++precision) {
    std::snprintf(buf, sizeof(buf), "%.*g", precision, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

struct RunManifest {
  std::string command;
  nlohmann::json flags = nlohmann::json::object();
  std::map<std::string, std::string> model_digests;
  std::string dataset_hash;
  std::vector<std::uint64_t> seeds;
  std::string version = kToolkitVersion;
  double wall_clock_s = 0.0;
  std::vector<std::string> outputs;

  // Identity of the run: everything that determines numeric outputs.
  nlohmann::json identity() const {
    return {{"command", command}, {"flags", flags},     {"model_digests", model_digests},
            {"dataset_hash", dataset_hash}, {"seeds", seeds}, {"version", version}};
  }

  std::string digest() const { return sha256_hex(identity().dump()); }

  nlohmann::json to_json() const {
    auto j = identity();
    j["manifest_digest"] = digest();
    j["wall_clock_s"] = wall_clock_s;
    j["outputs"] = outputs;
    return j;
  }
};

// Provenance line heading every CSV artifact.
inline std::string provenance_comment(const RunManifest& m) {
  std::string line = "# manifest=" + m.digest() + " dataset=" + m.dataset_hash;
  for (const auto& [name, digest] : m.model_digests) line += " model:" + name + "=" + digest;
  return line + "\n";
}

class CsvTable {
 public:
  explicit CsvTable(std::vector<std::string> header) : header_(std::move(header)) {}

  CsvTable& row(std::vector<std::string> cells) {
    require(cells.size() == header_.size(), ErrorCode::invalid_argument,
            "csv row has " + std::to_string(cells.size()) + " cells, header has " + std::to_string(header_.size()));
    rows_.push_back(std::move(cells));
    return *this;
  }

  std::size_t size() const { return rows_.size(); }

  std::string render(const std::string& preamble = {}) const {
    std::ostringstream out;
    out << preamble;
    write_line(out, header_);
    for (const auto& r : rows_) write_line(out, r);
    return out.str();
  }

 private:
  static std::string escape(const std::string& cell) {
    if (cell.find_first_of(",\"\n") == std::string::npos) return cell;
    std::string q = "\"";
    for (char c : cell) {
      if (c == '"') q += '"';
      q += c;
    }
    return q + "\"";
  }

  static void write_line(std::ostringstream& out, const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) out << (i ? "," : "") << escape(cells[i]);
    out << '\n';
  }

  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
};

// Collects artifacts under one output directory and finishes with the
// manifest.
class ArtifactWriter {
 public:
  ArtifactWriter(std::filesystem::path dir, RunManifest manifest)
      : dir_(std::move(dir)), manifest_(std::move(manifest)), start_(std::chrono::steady_clock::now()) {}

  RunManifest& manifest() { return manifest_; }

  void json(const std::string& name, nlohmann::json body) {
    body["manifest_digest"] = manifest_.digest();
    body["dataset_hash"] = manifest_.dataset_hash;
    body["model_digests"] = manifest_.model_digests;
    write(name, body.dump(2) + "\n");
  }

  void csv(const std::string& name, const CsvTable& table) { write(name, table.render(provenance_comment(manifest_))); }

  void text(const std::string& name, const std::string& body) { write(name, body); }

  std::filesystem::path finish() {
    manifest_.wall_clock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    const auto path = dir_ / "manifest.json";
    atomic_write(path, manifest_.to_json().dump(2) + "\n");
    return path;
  }

 private:
  void write(const std::string& name, const std::string& body) {
    atomic_write(dir_ / name, body);
    manifest_.outputs.push_back(name);
  }

  std::filesystem::path dir_;
  RunManifest manifest_;
  std::chrono::steady_clock::time_point start_;
};

}  // namespace circuit_align
