#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "circuit_align/digest.hpp"
#include "circuit_align/error.hpp"
#include "circuit_align/rng.hpp"
#include "circuit_align/tokenizer.hpp"

#ifndef CIRCUIT_ALIGN_DATA_DIR
#define CIRCUIT_ALIGN_DATA_DIR "data"
#endif

namespace circuit_align {

enum class TaskTag { numeral_seq, word_seq, ioi, external };

constexpr std::string_view task_name(TaskTag t) {
  switch (t) {
    case TaskTag::numeral_seq: return "numeral_seq";
    case TaskTag::word_seq: return "word_seq";
    case TaskTag::ioi: return "ioi";
    case TaskTag::external: return "external";
  }
  return "?";
}

inline TaskTag parse_task(std::string_view name) {
  for (TaskTag t : {TaskTag::numeral_seq, TaskTag::word_seq, TaskTag::ioi, TaskTag::external}) {
    if (task_name(t) == name) return t;
  }
  if (name == "numeral") return TaskTag::numeral_seq;
  if (name == "word") return TaskTag::word_seq;
  fail(ErrorCode::parse_error, "unknown task '" + std::string(name) +
                                   "' (numeral_seq, word_seq, ioi, external)");
}

struct TaskExample {
  std::vector<int> prompt_tokens;
  int correct_token = -1;
  int incorrect_token = -1;
  // Sorted-key object. Sequence tasks carry "start", "sequence_positions"
  // and "family_tokens"; IOI carries "names", "name_positions".
  nlohmann::json metadata = nlohmann::json::object();
};

struct TaskDataset {
  TaskTag task_tag = TaskTag::numeral_seq;
  std::vector<TaskExample> examples;
  std::uint64_t seed = 0;
  std::string content_hash;
  std::vector<std::string> warnings;

  std::size_t size() const { return examples.size(); }
};

inline std::string hash_examples(TaskTag tag, const std::vector<TaskExample>& examples,
                                 std::string_view extra = {}) {
  Sha256 h;
  h.update(task_name(tag)).update("\n");
  h.update(extra);
  for (const auto& ex : examples) {
    const std::uint64_t len = ex.prompt_tokens.size();
    h.update_pod(len);
    for (int t : ex.prompt_tokens) h.update_pod(static_cast<std::int32_t>(t));
    h.update_pod(static_cast<std::int32_t>(ex.correct_token));
    h.update_pod(static_cast<std::int32_t>(ex.incorrect_token));
  }
  return h.hex();
}

namespace detail {

inline int require_single(const Tokenizer& tok, const std::string& text, std::vector<std::string>& bad) {
  const int id = tok.single_token(text);
  if (id < 0) bad.push_back("'" + text + "'");
  return id;
}

inline void raise_offenders(const std::vector<std::string>& bad, std::string_view what) {
  if (bad.empty()) return;
  std::string list;
  for (const auto& b : bad) list += (list.empty() ? "" : ", ") + b;
  fail(ErrorCode::generation_error, std::string(what) + " not single-token: " + list);
}

inline const std::vector<std::string>& noun_pool() {
  static const std::vector<std::string> pool = {"Van", "Hat", "Car", "Dog", "Cup", "Pen", "Box", "Bus"};
  return pool;
}

inline const std::vector<std::string>& number_words() {
  static const std::vector<std::string> words = {"one", "two",   "three", "four",  "five",  "six",
                                                 "seven", "eight", "nine", "ten", "eleven", "twelve"};
  return words;
}

// "Van done in 1. Hat done in 2. Car done in 3. Dog done in 4. Cup done in"
inline TaskDataset gen_sequences(std::size_t n, std::uint64_t seed, const Tokenizer& tok, bool words) {
  require(n >= 1, ErrorCode::invalid_argument, "dataset size must be >= 1");
  auto spell = [&](int value) {
    return words ? " " + number_words()[static_cast<std::size_t>(value - 1)] : " " + std::to_string(value);
  };
  std::vector<std::string> bad;
  std::vector<int> first_nouns, spaced_nouns, family;
  for (const auto& noun : noun_pool()) {
    first_nouns.push_back(require_single(tok, noun, bad));
    spaced_nouns.push_back(require_single(tok, " " + noun, bad));
  }
  const int done = require_single(tok, " done", bad);
  const int in = require_single(tok, " in", bad);
  const int period = require_single(tok, ".", bad);
  for (int v = 1; v <= 10; ++v) family.push_back(require_single(tok, spell(v), bad));
  raise_offenders(bad, "template words");

  TaskDataset ds;
  ds.task_tag = words ? TaskTag::word_seq : TaskTag::numeral_seq;
  ds.seed = seed;
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    const int start = 1 + static_cast<int>(rng.index(6));
    std::vector<std::size_t> order(noun_pool().size());
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    TaskExample ex;
    std::vector<std::size_t> positions;
    nlohmann::json nouns = nlohmann::json::array();
    for (std::size_t slot = 0; slot < 5; ++slot) {
      const std::size_t noun = order[slot];
      nouns.push_back(noun_pool()[noun]);
      ex.prompt_tokens.push_back(slot == 0 ? first_nouns[noun] : spaced_nouns[noun]);
      ex.prompt_tokens.push_back(done);
      ex.prompt_tokens.push_back(in);
      if (slot == 4) break;
      positions.push_back(ex.prompt_tokens.size());
      ex.prompt_tokens.push_back(family[static_cast<std::size_t>(start + static_cast<int>(slot) - 1)]);
      ex.prompt_tokens.push_back(period);
    }
    ex.correct_token = family[static_cast<std::size_t>(start + 3)];
    ex.incorrect_token = family[static_cast<std::size_t>(start + 2)];
    ex.metadata = {{"start", start},
                   {"template_id", 0},
                   {"nouns", nouns},
                   {"sequence_positions", positions},
                   {"family_tokens", family}};
    ds.examples.push_back(std::move(ex));
  }
  ds.content_hash = hash_examples(ds.task_tag, ds.examples);
  return ds;
}

}  // namespace detail

inline TaskDataset gen_numeral_sequences(std::size_t n, std::uint64_t seed, const Tokenizer& tok) {
  return detail::gen_sequences(n, seed, tok, false);
}

inline TaskDataset gen_word_sequences(std::size_t n, std::uint64_t seed, const Tokenizer& tok) {
  return detail::gen_sequences(n, seed, tok, true);
}

inline std::vector<std::string> load_name_pool(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorCode::io_error, "cannot open name pool " + path.string());
  std::vector<std::string> names;
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (!line.empty() && line[0] != '#') names.push_back(line);
  }
  return names;
}

inline std::vector<std::string> default_name_pool() {
  return load_name_pool(std::filesystem::path(CIRCUIT_ALIGN_DATA_DIR) / "ioi_names.txt");
}

// "When Mary and John went to the store, John gave a bottle of milk to"
// Template 0 mentions the indirect object first, template 1 the subject.
inline TaskDataset gen_ioi(std::size_t n, std::uint64_t seed, const Tokenizer& tok,
                           const std::vector<std::string>& names) {
  require(n >= 1, ErrorCode::invalid_argument, "dataset size must be >= 1");
  TaskDataset ds;
  ds.task_tag = TaskTag::ioi;
  ds.seed = seed;
  std::vector<std::string> valid_names;
  std::vector<int> name_ids;
  for (const auto& name : names) {
    const int id = tok.single_token(" " + name);
    if (id < 0) {
      ds.warnings.push_back("name '" + name + "' is not a single token; skipped");
      continue;
    }
    valid_names.push_back(name);
    name_ids.push_back(id);
  }
  require(name_ids.size() >= 2, ErrorCode::generation_error,
          "IOI needs at least two single-token names");
  std::vector<std::string> bad;
  std::vector<int> frame;
  for (const char* piece : {"When", " and", " went", " to", " the", " store", ",", " gave", " a",
                            " bottle", " of", " milk"}) {
    frame.push_back(detail::require_single(tok, piece, bad));
  }
  detail::raise_offenders(bad, "IOI template words");
  const int when = frame[0], and_ = frame[1], went = frame[2], to = frame[3], the = frame[4],
            store = frame[5], comma = frame[6], gave = frame[7], a = frame[8], bottle = frame[9],
            of = frame[10], milk = frame[11];

  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t io = rng.index(name_ids.size());
    std::size_t subject = rng.index(name_ids.size() - 1);
    if (subject >= io) ++subject;
    const int tmpl = static_cast<int>(rng.index(2));
    const int first = tmpl == 0 ? name_ids[io] : name_ids[subject];
    const int second = tmpl == 0 ? name_ids[subject] : name_ids[io];
    TaskExample ex;
    ex.prompt_tokens = {when, first, and_, second, went, to, the, store, comma, name_ids[subject],
                        gave, a, bottle, of, milk, to};
    ex.correct_token = name_ids[io];
    ex.incorrect_token = name_ids[subject];
    ex.metadata = {{"template_id", tmpl},
                   {"names", {valid_names[io], valid_names[subject]}},
                   {"name_positions", {1, 3, 9}},
                   {"family_tokens", name_ids}};
    ds.examples.push_back(std::move(ex));
  }
  ds.content_hash = hash_examples(ds.task_tag, ds.examples);
  return ds;
}

// Resamples the task-relevant positions from the example's token family and
// leaves every other token, and the answer pair, untouched.
inline TaskExample corrupt_example(const TaskExample& example, std::uint64_t seed) {
  TaskExample out = example;
  Rng rng(seed);
  const auto& md = example.metadata;
  if (md.contains("sequence_positions")) {
    const auto family = md.at("family_tokens").get<std::vector<int>>();
    for (auto p : md.at("sequence_positions").get<std::vector<std::size_t>>()) {
      out.prompt_tokens.at(p) = family[rng.index(family.size())];
    }
  } else if (md.contains("name_positions")) {
    const auto family = md.at("family_tokens").get<std::vector<int>>();
    const auto positions = md.at("name_positions").get<std::vector<std::size_t>>();
    std::vector<int> fresh;
    for (int id : family) {
      if (id != example.correct_token && id != example.incorrect_token) fresh.push_back(id);
    }
    if (fresh.size() < 2) fresh = family;
    rng.shuffle(fresh);
    std::map<int, int> rename;
    for (auto p : positions) {
      const int original = example.prompt_tokens.at(p);
      if (!rename.count(original)) rename[original] = fresh[rename.size() % fresh.size()];
      out.prompt_tokens[p] = rename[original];
    }
  } else {
    fail(ErrorCode::invalid_argument, "example carries no corruptible positions");
  }
  out.metadata["corrupted"] = true;
  return out;
}

inline TaskDataset corrupt_dataset(const TaskDataset& ds, std::uint64_t seed) {
  TaskDataset out;
  out.task_tag = ds.task_tag;
  out.seed = seed;
  for (std::size_t i = 0; i < ds.examples.size(); ++i) {
    out.examples.push_back(corrupt_example(ds.examples[i], derive_seed(seed, i, 0xc0)));
  }
  out.content_hash = hash_examples(out.task_tag, out.examples, "corrupted");
  return out;
}

// One JSON object per line: {"prompt", "correct", "incorrect", "metadata"?}.
inline TaskDataset load_external_jsonl(const std::filesystem::path& path, const Tokenizer& tok) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorCode::io_error, "cannot open dataset " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  const std::string bytes = buffer.str();

  TaskDataset ds;
  ds.task_tag = TaskTag::external;
  std::istringstream lines(bytes);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(lines, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.filename().string() + ":" + std::to_string(line_no);
    nlohmann::json row;
    try {
      row = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::parse_error, "malformed JSON at line " + std::to_string(line_no) + ": " + e.what());
    }
    require(row.is_object() && row.contains("prompt") && row.contains("correct") &&
                row.contains("incorrect") && row["prompt"].is_string() && row["correct"].is_string() &&
                row["incorrect"].is_string(),
            ErrorCode::parse_error,
            "line " + std::to_string(line_no) + " needs string fields prompt, correct, incorrect");
    TaskExample ex;
    if (row.contains("metadata") && row["metadata"].is_object()) ex.metadata = row["metadata"];
    try {
      ex.prompt_tokens = tok.encode(row["prompt"].get<std::string>());
      const auto correct = tok.encode(row["correct"].get<std::string>());
      const auto incorrect = tok.encode(row["incorrect"].get<std::string>());
      require(!ex.prompt_tokens.empty() && !correct.empty() && !incorrect.empty(), ErrorCode::parse_error,
              "empty prompt or answer");
      ex.correct_token = correct[0];
      ex.incorrect_token = incorrect[0];
      if (correct.size() > 1 || incorrect.size() > 1) ex.metadata["first_token_reduced"] = true;
    } catch (const Error& e) {
      fail(ErrorCode::parse_error, where + ": " + e.what());
    }
    require(ex.correct_token != ex.incorrect_token, ErrorCode::parse_error,
            where + ": correct and incorrect answers share their first token");
    ds.examples.push_back(std::move(ex));
  }
  require(!ds.examples.empty(), ErrorCode::parse_error, "dataset " + path.string() + " has no examples");
  ds.content_hash = hash_examples(ds.task_tag, ds.examples, sha256_hex(bytes));
  return ds;
}

inline std::string to_jsonl(const TaskDataset& ds, const Tokenizer& tok) {
  std::string out;
  for (const auto& ex : ds.examples) {
    nlohmann::json row = {{"prompt", tok.decode(ex.prompt_tokens)},
                          {"correct", tok.decode({ex.correct_token})},
                          {"incorrect", tok.decode({ex.incorrect_token})},
                          {"metadata", ex.metadata}};
    out += row.dump() + "\n";
  }
  return out;
}

struct TaskRequest {
  TaskTag task = TaskTag::numeral_seq;
  std::size_t n = 100;
  std::uint64_t seed = 0;
  std::string dataset_path;
  std::vector<std::string> names;
};

inline TaskDataset make_dataset(const TaskRequest& req, const Tokenizer& tok) {
  if (!req.dataset_path.empty()) return load_external_jsonl(req.dataset_path, tok);
  switch (req.task) {
    case TaskTag::numeral_seq: return gen_numeral_sequences(req.n, req.seed, tok);
    case TaskTag::word_seq: return gen_word_sequences(req.n, req.seed, tok);
    case TaskTag::ioi: return gen_ioi(req.n, req.seed, tok, req.names.empty() ? default_name_pool() : req.names);
    case TaskTag::external: break;
  }
  fail(ErrorCode::invalid_argument, "task 'external' needs --dataset-path");
}

}  // namespace circuit_align
