#pragma once

#include <array>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"

#include "circuit_align/error.hpp"

namespace circuit_align {

namespace detail {

inline void append_utf8(std::string& out, unsigned cp) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xc0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3f)));
  } else {
    out.push_back(static_cast<char>(0xe0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3f)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3f)));
  }
}

// Byte to printable-unicode table of byte-level BPE vocabularies.
inline const std::array<std::string, 256>& byte_encoder() {
  static const std::array<std::string, 256> table = [] {
    std::array<std::string, 256> t;
    std::array<bool, 256> direct{};
    for (unsigned b = '!'; b <= '~'; ++b) direct[b] = true;
    for (unsigned b = 0xa1; b <= 0xac; ++b) direct[b] = true;
    for (unsigned b = 0xae; b <= 0xff; ++b) direct[b] = true;
    unsigned extra = 0;
    for (unsigned b = 0; b < 256; ++b) {
      const unsigned cp = direct[b] ? b : 256 + extra++;
      append_utf8(t[b], cp);
    }
    return t;
  }();
  return table;
}

inline const std::map<std::string, unsigned char>& byte_decoder() {
  static const std::map<std::string, unsigned char> table = [] {
    std::map<std::string, unsigned char> t;
    const auto& enc = byte_encoder();
    for (unsigned b = 0; b < 256; ++b) t.emplace(enc[b], static_cast<unsigned char>(b));
    return t;
  }();
  return table;
}

inline std::size_t utf8_length(unsigned char lead) {
  if (lead < 0x80) return 1;
  if ((lead >> 5) == 0x6) return 2;
  if ((lead >> 4) == 0xe) return 3;
  return 4;
}

inline bool is_space(unsigned char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f';
}
inline bool is_digit(unsigned char c) { return c >= '0' && c <= '9'; }
// Non-ASCII bytes are treated as letters.
inline bool is_letter(unsigned char c) {
  return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c >= 0x80;
}
inline bool is_other(unsigned char c) { return !is_space(c) && !is_digit(c) && !is_letter(c); }

}  // namespace detail

// Splits text the way the GPT2 pre-tokenization pattern does:
// contractions | ?letters | ?digits | ?other | trailing-space-aware whitespace.
inline std::vector<std::string> pretokenize(std::string_view text) {
  using namespace detail;
  std::vector<std::string> pieces;
  const std::size_t n = text.size();
  auto at = [&](std::size_t i) { return static_cast<unsigned char>(text[i]); };
  std::size_t i = 0;
  while (i < n) {
    if (text[i] == '\'') {
      static constexpr std::string_view kContractions[] = {"re", "ve", "ll", "s", "t", "m", "d"};
      bool matched = false;
      for (auto suffix : kContractions) {
        if (text.substr(i + 1, suffix.size()) == suffix) {
          pieces.emplace_back(text.substr(i, suffix.size() + 1));
          i += suffix.size() + 1;
          matched = true;
          break;
        }
      }
      if (matched) continue;
    }
    const bool lead_space = text[i] == ' ' && i + 1 < n;
    const std::size_t body = lead_space ? i + 1 : i;
    bool (*cls)(unsigned char) = nullptr;
    if (is_letter(at(body))) cls = is_letter;
    else if (is_digit(at(body))) cls = is_digit;
    else if (is_other(at(body))) cls = is_other;
    if (cls != nullptr && (lead_space || !is_space(at(i)))) {
      std::size_t j = body;
      while (j < n && cls(at(j))) ++j;
      pieces.emplace_back(text.substr(i, j - i));
      i = j;
      continue;
    }
    std::size_t j = i;
    while (j < n && is_space(at(j))) ++j;
    if (j < n && j - i > 1) --j;
    pieces.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return pieces;
}

class Tokenizer {
 public:
  Tokenizer() = default;

  Tokenizer(std::map<std::string, int> vocab, std::vector<std::pair<std::string, std::string>> merges)
      : vocab_(std::move(vocab)) {
    for (const auto& [token, id] : vocab_) {
      require(id >= 0, ErrorCode::load_error, "negative id for token '" + token + "'");
      if (static_cast<std::size_t>(id) >= id_to_token_.size()) id_to_token_.resize(id + 1);
      id_to_token_[id] = token;
    }
    for (std::size_t r = 0; r < merges.size(); ++r) {
      ranks_.emplace(merges[r].first + '\x01' + merges[r].second, r);
    }
    merges_ = std::move(merges);
  }

  static Tokenizer load(const std::filesystem::path& dir) {
    std::ifstream vocab_in(dir / "vocab.json");
    require(static_cast<bool>(vocab_in), ErrorCode::load_error,
            "missing vocab.json in " + dir.string());
    std::map<std::string, int> vocab;
    try {
      const auto parsed = nlohmann::json::parse(vocab_in);
      for (const auto& [token, id] : parsed.items()) vocab.emplace(token, id.get<int>());
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::load_error, std::string("vocab.json malformed: ") + e.what());
    }
    std::ifstream merges_in(dir / "merges.txt");
    require(static_cast<bool>(merges_in), ErrorCode::load_error,
            "missing merges.txt in " + dir.string());
    std::vector<std::pair<std::string, std::string>> merges;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(merges_in, line)) {
      ++line_no;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty() || (line_no == 1 && line.rfind("#version", 0) == 0)) continue;
      const auto space = line.find(' ');
      require(space != std::string::npos && space > 0 && space + 1 < line.size(),
              ErrorCode::load_error, "merges.txt line " + std::to_string(line_no) + " malformed");
      merges.emplace_back(line.substr(0, space), line.substr(space + 1));
    }
    return Tokenizer(std::move(vocab), std::move(merges));
  }

  void save(const std::filesystem::path& dir) const {
    nlohmann::json vocab = nlohmann::json::object();
    for (const auto& [token, id] : vocab_) vocab[token] = id;
    std::ofstream vout(dir / "vocab.json", std::ios::trunc);
    vout << vocab.dump() << '\n';
    std::ofstream mout(dir / "merges.txt", std::ios::trunc);
    mout << "#version: 0.2\n";
    for (const auto& [a, b] : merges_) mout << a << ' ' << b << '\n';
    require(static_cast<bool>(vout) && static_cast<bool>(mout), ErrorCode::io_error,
            "cannot write tokenizer files to " + dir.string());
  }

  std::size_t vocab_size() const { return id_to_token_.size(); }
  bool empty() const { return vocab_.empty(); }

  const std::string& token_string(int id) const {
    require(id >= 0 && static_cast<std::size_t>(id) < id_to_token_.size(), ErrorCode::invalid_argument,
            "token id " + std::to_string(id) + " out of range");
    return id_to_token_[id];
  }

  std::vector<int> encode(std::string_view text) const {
    std::vector<int> ids;
    const auto& enc = detail::byte_encoder();
    for (const auto& piece : pretokenize(text)) {
      std::vector<std::string> symbols;
      for (unsigned char c : piece) symbols.push_back(enc[c]);
      apply_merges(symbols);
      for (const auto& s : symbols) {
        auto it = vocab_.find(s);
        require(it != vocab_.end(), ErrorCode::invalid_argument,
                "text '" + std::string(text) + "' has no vocabulary entry for piece '" + s + "'");
        ids.push_back(it->second);
      }
    }
    return ids;
  }

  std::string decode(const std::vector<int>& ids) const {
    std::string out;
    const auto& dec = detail::byte_decoder();
    for (int id : ids) {
      const std::string& s = token_string(id);
      for (std::size_t i = 0; i < s.size();) {
        const std::size_t len = detail::utf8_length(static_cast<unsigned char>(s[i]));
        auto it = dec.find(s.substr(i, len));
        require(it != dec.end(), ErrorCode::invalid_argument,
                "token " + std::to_string(id) + " holds a character outside the byte table");
        out.push_back(static_cast<char>(it->second));
        i += len;
      }
    }
    return out;
  }

  // Single token id for `text`, or -1 when it encodes to anything else.
  int single_token(std::string_view text) const {
    try {
      const auto ids = encode(text);
      return ids.size() == 1 ? ids[0] : -1;
    } catch (const Error&) {
      return -1;
    }
  }

 private:
  void apply_merges(std::vector<std::string>& symbols) const {
    while (symbols.size() > 1) {
      std::size_t best_rank = std::numeric_limits<std::size_t>::max();
      std::size_t best_pos = 0;
      for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
        auto it = ranks_.find(symbols[i] + '\x01' + symbols[i + 1]);
        if (it != ranks_.end() && it->second < best_rank) {
          best_rank = it->second;
          best_pos = i;
        }
      }
      if (best_rank == std::numeric_limits<std::size_t>::max()) break;
      const std::string left = symbols[best_pos];
      const std::string right = symbols[best_pos + 1];
      std::vector<std::string> merged;
      merged.reserve(symbols.size());
      for (std::size_t i = 0; i < symbols.size();) {
        if (i + 1 < symbols.size() && symbols[i] == left && symbols[i + 1] == right) {
          merged.push_back(left + right);
          i += 2;
        } else {
          merged.push_back(symbols[i]);
          ++i;
        }
      }
      symbols = std::move(merged);
    }
  }

  std::map<std::string, int> vocab_;
  std::vector<std::string> id_to_token_;
  std::vector<std::pair<std::string, std::string>> merges_;
  std::unordered_map<std::string, std::size_t> ranks_;
};

}  // namespace circuit_align
