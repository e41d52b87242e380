#pragma once

#include <cstdlib>
#include <cstring>
#include <iterator>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>

#include "json.hpp"

#include "circuit_align/digest.hpp"
#include "circuit_align/intervention.hpp"
#include "circuit_align/report.hpp"

namespace circuit_align {

// On-disk spill of corrupted means: one JSON index line followed by raw
// little-endian doubles in index order.
inline std::string serialize_means(const CorruptedMeans& means) {
  nlohmann::json index = {{"dataset_hash", means.dataset_hash}, {"n_examples", means.n_examples}};
  nlohmann::json entries = nlohmann::json::array();
  std::string payload;
  for (const auto& [length, group] : means.groups) {
    for (const auto& [h, m] : group) {
      entries.push_back({{"length", length}, {"hook", to_string(h)}, {"rows", m.rows}, {"cols", m.cols}});
      payload.append(reinterpret_cast<const char*>(m.data.data()), m.data.size() * sizeof(double));
    }
  }
  index["entries"] = entries;
  return index.dump() + "\n" + payload;
}

inline CorruptedMeans deserialize_means(const std::string& bytes) {
  const auto newline = bytes.find('\n');
  require(newline != std::string::npos, ErrorCode::parse_error, "means cache has no index line");
  nlohmann::json index;
  try {
    index = nlohmann::json::parse(bytes.substr(0, newline));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::parse_error, std::string("means cache index: ") + e.what());
  }
  CorruptedMeans means;
  means.dataset_hash = index.at("dataset_hash").get<std::string>();
  means.n_examples = index.at("n_examples").get<std::size_t>();
  std::size_t offset = newline + 1;
  for (const auto& e : index.at("entries")) {
    const auto rows = e.at("rows").get<std::size_t>();
    const auto cols = e.at("cols").get<std::size_t>();
    const std::size_t n = rows * cols * sizeof(double);
    require(offset + n <= bytes.size(), ErrorCode::parse_error, "means cache is truncated");
    Matrix m(rows, cols);
    std::memcpy(m.data.data(), bytes.data() + offset, n);
    offset += n;
    means.groups[e.at("length").get<std::size_t>()][parse_hook(e.at("hook").get<std::string>())] = std::move(m);
  }
  require(offset == bytes.size(), ErrorCode::parse_error, "means cache has trailing bytes");
  return means;
}

// Directory named by CIRCUIT_ALIGN_CACHE, if set.
inline std::optional<std::filesystem::path> cache_dir() {
  const char* env = std::getenv("CIRCUIT_ALIGN_CACHE");
  if (env == nullptr || *env == '\0') return std::nullopt;
  return std::filesystem::path(env);
}

// Computes component-output corrupted means, reusing a spilled copy keyed
// by model digest and corrupted-set hash when a cache directory is set.
inline CorruptedMeans cached_corrupted_means(const ModelBundle& model, const TaskDataset& corrupted,
                                             const RunOptions& run = {}) {
  const auto dir = cache_dir();
  if (!dir || run.perturb) {
    return compute_corrupted_means(model, corrupted, component_output_hooks(model.config), run);
  }
  const auto key = sha256_hex(model.weights_digest + "|" + corrupted.content_hash + "|means-v1");
  const auto path = *dir / (key + ".means");
  if (std::filesystem::exists(path)) {
    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize_means(bytes);
  }
  auto means = compute_corrupted_means(model, corrupted, component_output_hooks(model.config), run);
  atomic_write(path, serialize_means(means));
  return means;
}

}  // namespace circuit_align
