#include <gtest/gtest.h>

#include "support.hpp"

namespace ca = circuit_align;
namespace ts = testing_support;

namespace {

const ca::Tokenizer& tok() {
  static const auto t = ca::toy_tokenizer();
  return t;
}

std::vector<int> numerals(const ca::TaskExample& ex) {
  std::vector<int> out;
  for (auto p : ex.metadata.at("sequence_positions").get<std::vector<std::size_t>>()) {
    out.push_back(ca::toy::token_value(ex.prompt_tokens[p]));
  }
  return out;
}

}  // namespace

TEST(NumeralTask, TemplateAndAnswers) {
  const auto ds = ca::gen_numeral_sequences(1, 0, tok());
  const auto& ex = ds.examples[0];
  const int s = ex.metadata.at("start").get<int>();
  EXPECT_EQ(numerals(ex), (std::vector<int>{s, s + 1, s + 2, s + 3}));
  EXPECT_EQ(ex.correct_token, tok().single_token(" " + std::to_string(s + 4)));
  EXPECT_EQ(ex.incorrect_token, tok().single_token(" " + std::to_string(s + 3)));
  const auto text = tok().decode(ex.prompt_tokens);
  EXPECT_NE(text.find(" done in " + std::to_string(s) + "."), std::string::npos) << text;
}

TEST(NumeralTask, SequencesIncreaseByOne) {
  const auto ds = ca::gen_numeral_sequences(200, 4, tok());
  for (const auto& ex : ds.examples) {
    const auto v = numerals(ex);
    for (std::size_t i = 1; i < v.size(); ++i) EXPECT_EQ(v[i], v[i - 1] + 1);
  }
}

TEST(NumeralTask, HashIsDeterministicAndSeedSensitive) {
  EXPECT_EQ(ca::gen_numeral_sequences(20, 0, tok()).content_hash, ca::gen_numeral_sequences(20, 0, tok()).content_hash);
  EXPECT_NE(ca::gen_numeral_sequences(20, 0, tok()).content_hash, ca::gen_numeral_sequences(20, 1, tok()).content_hash);
}

TEST(WordTask, UsesWordNumerals) {
  const auto ds = ca::gen_word_sequences(50, 2, tok());
  const auto& first = ds.examples[0];
  const int start = first.metadata.at("start").get<int>();
  const auto text = tok().decode(first.prompt_tokens);
  const auto& words = ca::detail::number_words();
  EXPECT_NE(text.find(" in " + words[start - 1] + ". "), std::string::npos) << text;
  EXPECT_NE(text.find(" in " + words[start + 2] + "."), std::string::npos) << text;
  for (const auto& ex : ds.examples) {
    EXPECT_GE(ex.correct_token, ca::toy::kWordBase);
    EXPECT_GE(ex.incorrect_token, ca::toy::kWordBase);
  }
  EXPECT_EQ(ds.content_hash, ca::gen_word_sequences(50, 2, tok()).content_hash);
}

TEST(IoiTask, PaperExampleShape) {
  const auto ds = ca::gen_ioi(500, 0, tok(), ca::default_name_pool());
  EXPECT_EQ(ds.size(), 500u);
  EXPECT_FALSE(ds.warnings.empty());  // pool names outside the toy vocabulary are skipped
  bool saw = false;
  for (const auto& ex : ds.examples) {
    EXPECT_NE(ex.correct_token, ex.incorrect_token);
    const auto text = tok().decode(ex.prompt_tokens);
    if (text == "When Mary and John went to the store, John gave a bottle of milk to") {
      saw = true;
      EXPECT_EQ(ex.correct_token, tok().single_token(" Mary"));
      EXPECT_EQ(ex.incorrect_token, tok().single_token(" John"));
    }
  }
  EXPECT_TRUE(saw);
  EXPECT_EQ(ds.content_hash, ca::gen_ioi(500, 0, tok(), ca::default_name_pool()).content_hash);
}

TEST(IoiTask, TooFewNamesIsGenerationError) {
  try {
    ca::gen_ioi(3, 0, tok(), {"Mary", "Zed"});
    FAIL();
  } catch (const ca::Error& e) {
    EXPECT_EQ(e.code(), ca::ErrorCode::generation_error);
  }
}

TEST(Corruption, OnlySequencePositionsChange) {
  const auto ds = ca::gen_numeral_sequences(100, 5, tok());
  const auto bad = ca::corrupt_dataset(ds, 9);
  std::size_t changed = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto& a = ds.examples[i];
    const auto& b = bad.examples[i];
    ASSERT_EQ(a.prompt_tokens.size(), b.prompt_tokens.size());
    EXPECT_EQ(a.correct_token, b.correct_token);
    EXPECT_EQ(a.incorrect_token, b.incorrect_token);
    const auto pos = a.metadata.at("sequence_positions").get<std::vector<std::size_t>>();
    for (std::size_t p = 0; p < a.prompt_tokens.size(); ++p) {
      const bool numeral = std::find(pos.begin(), pos.end(), p) != pos.end();
      if (!numeral) EXPECT_EQ(a.prompt_tokens[p], b.prompt_tokens[p]);
      if (numeral && a.prompt_tokens[p] != b.prompt_tokens[p]) ++changed;
    }
  }
  EXPECT_GT(changed, 200u);
  EXPECT_NE(ds.content_hash, bad.content_hash);
}

TEST(Corruption, KillsPlantedBehaviour) {
  const auto m = ca::build_planted(ca::teacher_spec());
  const auto ds = ts::numeral_dataset(m, 40);
  const double clean = ca::baseline_scores(m, ds).mean;
  const double corrupted = ca::baseline_scores(m, ca::corrupt_dataset(ds, 1)).mean;
  EXPECT_GE(clean, 2.0);
  EXPECT_LT(corrupted, 0.25 * clean);
}

TEST(Corruption, IoiRenamesConsistently) {
  const auto ds = ca::gen_ioi(50, 1, tok(), ca::default_name_pool());
  const auto bad = ca::corrupt_dataset(ds, 3);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto& b = bad.examples[i].prompt_tokens;
    const auto& a = ds.examples[i].prompt_tokens;
    // The repeated name stays repeated.
    EXPECT_EQ(a[9] == a[1], b[9] == b[1]);
    EXPECT_EQ(a[9] == a[3], b[9] == b[3]);
  }
}

TEST(TaskTags, ParseAndName) {
  EXPECT_EQ(ca::parse_task("numeral_seq"), ca::TaskTag::numeral_seq);
  EXPECT_EQ(ca::parse_task("ioi"), ca::TaskTag::ioi);
  EXPECT_THROW(ca::parse_task("nope"), ca::Error);
  ca::TaskRequest req;
  req.task = ca::TaskTag::external;
  EXPECT_THROW(ca::make_dataset(req, tok()), ca::Error);
}
