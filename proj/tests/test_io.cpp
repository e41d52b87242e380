#include <gtest/gtest.h>

#include <fstream>

#include "support.hpp"

namespace ca = circuit_align;
namespace ts = testing_support;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << bytes;
}

// Hand-assembled container with one F16 tensor and one F32 tensor.
std::string hand_container() {
  const std::string header =
      R"({"a":{"dtype":"F16","shape":[2],"data_offsets":[0,4]},"b":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}})";
  std::string bytes;
  const std::uint64_t n = header.size();
  bytes.append(reinterpret_cast<const char*>(&n), 8);
  bytes += header;
  const std::uint16_t halves[2] = {0x3c00, 0xc000};  // 1.0, -2.0
  bytes.append(reinterpret_cast<const char*>(halves), 4);
  const float f = 0.375f;
  bytes.append(reinterpret_cast<const char*>(&f), 4);
  return bytes;
}

}  // namespace

TEST(Safetensors, ReadsHandAssembledContainer) {
  const auto dir = ts::scratch_dir("st_hand");
  spit(dir / "x.safetensors", hand_container());
  const auto t = ca::read_safetensors(dir / "x.safetensors");
  ASSERT_EQ(t.size(), 2u);
  EXPECT_EQ(t.at("a").values, (std::vector<float>{1.0f, -2.0f}));
  EXPECT_EQ(t.at("b").values, (std::vector<float>{0.375f}));
}

TEST(Safetensors, RoundTrip) {
  const auto dir = ts::scratch_dir("st_rt");
  ca::TensorMap in;
  in["w"] = {{2, 3}, {1, 2, 3, 4, 5, 6}};
  in["v"] = {{4}, {-1.5f, 0.0f, 1e-8f, 3e7f}};
  ca::write_safetensors(dir / "m.safetensors", in, {{"format", "pt"}});
  const auto out = ca::read_safetensors(dir / "m.safetensors");
  ASSERT_EQ(out.size(), 2u);
  for (const auto& [name, t] : in) {
    EXPECT_EQ(out.at(name).shape, t.shape);
    EXPECT_EQ(out.at(name).values, t.values);
  }
}

TEST(Safetensors, TruncatedTensorIsNamed) {
  const auto dir = ts::scratch_dir("st_trunc");
  auto bytes = hand_container();
  bytes.resize(bytes.size() - 2);
  spit(dir / "x.safetensors", bytes);
  try {
    ca::read_safetensors(dir / "x.safetensors");
    FAIL();
  } catch (const ca::Error& e) {
    EXPECT_EQ(e.code(), ca::ErrorCode::load_error);
    EXPECT_NE(std::string(e.what()).find("'b'"), std::string::npos) << e.what();
  }
}

TEST(Tokenizer, ToyRoundTripThroughFiles) {
  const auto dir = ts::scratch_dir("tok");
  const auto tok = ca::toy_tokenizer();
  tok.save(dir);
  const auto back = ca::Tokenizer::load(dir);
  const std::string text = "When Mary and John went to the store, John gave a bottle of milk to";
  EXPECT_EQ(back.encode(text), tok.encode(text));
  EXPECT_EQ(back.decode(back.encode(text)), text);
  EXPECT_EQ(back.encode(" Mary").size(), 1u);
}

TEST(Tokenizer, MergesFollowRankOrder) {
  // Byte-level BPE with merges (a b), (ab c): "abc" -> one token; "acb" stays split.
  std::map<std::string, int> vocab = {{"a", 0}, {"b", 1}, {"c", 2}, {"ab", 3}, {"abc", 4}};
  const ca::Tokenizer tok(vocab, {{"a", "b"}, {"ab", "c"}});
  EXPECT_EQ(tok.encode("abc"), (std::vector<int>{4}));
  EXPECT_EQ(tok.encode("acb"), (std::vector<int>{0, 2, 1}));
  EXPECT_EQ(tok.decode({4, 0}), "abca");
}

TEST(Tokenizer, UnknownPieceIsAnError) {
  const auto tok = ca::toy_tokenizer();
  EXPECT_THROW(tok.encode("zebra"), ca::Error);
  EXPECT_EQ(tok.single_token("zebra"), -1);
}

TEST(ModelDir, RoundTripPreservesLogitsAndConfig) {
  const auto dir = ts::scratch_dir("model_rt");
  const auto m = ts::random_model(1);
  ca::save_model_dir(m, dir / "rand");
  const auto back = ca::load_model_dir(dir / "rand");
  EXPECT_EQ(back.config.n_layers, 2u);
  EXPECT_EQ(back.config.d_model, m.config.d_model);
  EXPECT_EQ(back.name, "rand");
  const std::vector<int> prompt = {1, 2, 3, 18, 5};
  EXPECT_EQ(ca::forward(back, prompt).logits, ca::forward(m, prompt).logits);
  EXPECT_EQ(ca::weights_content_digest(back.config, back.weights), m.weights_digest);
  EXPECT_TRUE(fs::exists(dir / "rand" / "checksums.json"));
}

TEST(ModelDir, ChecksumMismatchIsLoadError) {
  const auto dir = ts::scratch_dir("model_sum");
  ca::save_model_dir(ts::random_model(2), dir / "m");
  auto config = slurp(dir / "m" / "config.json");
  spit(dir / "m" / "config.json", config + " ");
  try {
    ca::load_model_dir(dir / "m");
    FAIL();
  } catch (const ca::Error& e) {
    EXPECT_EQ(e.code(), ca::ErrorCode::load_error);
    EXPECT_NE(std::string(e.what()).find("config.json"), std::string::npos);
  }
}

TEST(ModelDir, UnsupportedArchitectureIsRefused) {
  const auto dir = ts::scratch_dir("model_arch");
  ca::save_model_dir(ts::random_model(3), dir / "m");
  fs::remove(dir / "m" / "checksums.json");
  auto j = nlohmann::json::parse(slurp(dir / "m" / "config.json"));
  j["architecture_tag"] = "llama";
  spit(dir / "m" / "config.json", j.dump());
  try {
    ca::load_model_dir(dir / "m");
    FAIL();
  } catch (const ca::Error& e) {
    EXPECT_EQ(e.code(), ca::ErrorCode::load_error);
    EXPECT_NE(std::string(e.what()).find("gpt2_family"), std::string::npos);
  }
}

TEST(ModelDir, ShippedToyBundleLoads) {
  const fs::path dir = fs::path(CIRCUIT_ALIGN_DATA_DIR) / "toys" / "teacher";
  const auto m = ca::load_model_dir(dir);
  EXPECT_EQ(m.config.n_layers, 3u);
  const auto built = ca::build_planted(ca::teacher_spec());
  EXPECT_EQ(ca::weights_content_digest(m.config, m.weights), built.weights_digest);
}

TEST(Reference, ShippedFixturesVerify) {
  for (const auto& spec : ca::builtin_toy_specs()) {
    const fs::path dir = fs::path(CIRCUIT_ALIGN_DATA_DIR) / "toys" / spec.name;
    const auto m = ca::load_model_dir(dir);
    const auto check = ca::verify_reference(m, ca::load_reference_logits(dir / "reference_logits.json"));
    EXPECT_EQ(check.max_abs.size(), 5u) << spec.name;
    EXPECT_TRUE(check.pass) << spec.name << " worst " << check.worst;
  }
}

TEST(Reference, DetectsPerturbedLogits) {
  const auto m = ts::random_model(4);
  auto ref = ca::make_reference(m, {" 1 2 3", " Mary and John"});
  ref.prompts[1].final_logits[7] += 2e-3;
  const auto check = ca::verify_reference(m, ref);
  EXPECT_FALSE(check.pass);
  EXPECT_NEAR(check.max_abs[1], 2e-3, 1e-12);
  EXPECT_EQ(check.max_abs[0], 0.0);
}

TEST(Reference, JsonRoundTrip) {
  const auto dir = ts::scratch_dir("ref_rt");
  const auto m = ts::random_model(5);
  const auto ref = ca::make_reference(m, {" 4 5 6"});
  spit(dir / "r.json", ca::reference_to_json(ref).dump());
  const auto back = ca::load_reference_logits(dir / "r.json");
  ASSERT_EQ(back.prompts.size(), 1u);
  EXPECT_EQ(back.prompts[0].final_logits, ref.prompts[0].final_logits);
  EXPECT_EQ(back.prompts[0].tokens, ref.prompts[0].tokens);
}

TEST(Reference, MalformedFileIsParseError) {
  const auto dir = ts::scratch_dir("ref_bad");
  spit(dir / "r.json", R"({"prompts": [{"text": "x"}]})");
  try {
    ca::load_reference_logits(dir / "r.json");
    FAIL();
  } catch (const ca::Error& e) {
    EXPECT_EQ(e.code(), ca::ErrorCode::parse_error);
  }
}

TEST(Jsonl, GeneratedDatasetRoundTrips) {
  const auto dir = ts::scratch_dir("jsonl");
  const auto tok = ca::toy_tokenizer();
  const auto ds = ca::gen_numeral_sequences(10, 3, tok);
  spit(dir / "d.jsonl", ca::to_jsonl(ds, tok));
  const auto back = ca::load_external_jsonl(dir / "d.jsonl", tok);
  ASSERT_EQ(back.size(), 10u);
  for (std::size_t i = 0; i < 10; ++i) {
    EXPECT_EQ(back.examples[i].prompt_tokens, ds.examples[i].prompt_tokens);
    EXPECT_EQ(back.examples[i].correct_token, ds.examples[i].correct_token);
    EXPECT_EQ(back.examples[i].incorrect_token, ds.examples[i].incorrect_token);
  }
}

TEST(Jsonl, ShippedFixtureLoads) {
  const auto tok = ca::toy_tokenizer();
  const auto ds = ca::load_external_jsonl(fs::path(CIRCUIT_ALIGN_DATA_DIR) / "fixtures" / "external.jsonl", tok);
  EXPECT_EQ(ds.size(), 2u);
  EXPECT_EQ(ds.task_tag, ca::TaskTag::external);
}

TEST(Jsonl, MultiTokenAnswerIsFlagged) {
  const auto dir = ts::scratch_dir("jsonl_multi");
  spit(dir / "d.jsonl",
       R"({"prompt": " 1 2 3", "correct": " 4 5", "incorrect": " 3"})"
       "\n");
  const auto ds = ca::load_external_jsonl(dir / "d.jsonl", ca::toy_tokenizer());
  EXPECT_TRUE(ds.examples[0].metadata.value("first_token_reduced", false));
  EXPECT_EQ(ds.examples[0].correct_token, 4);
}

TEST(Jsonl, HashTracksFileBytes) {
  const auto dir = ts::scratch_dir("jsonl_hash");
  const auto tok = ca::toy_tokenizer();
  const std::string row = R"({"prompt": " 1 2 3", "correct": " 4", "incorrect": " 3"})";
  spit(dir / "a.jsonl", row + "\n");
  spit(dir / "b.jsonl", row + "\n");
  spit(dir / "c.jsonl", row + "\n\n");
  const auto a = ca::load_external_jsonl(dir / "a.jsonl", tok);
  const auto b = ca::load_external_jsonl(dir / "b.jsonl", tok);
  const auto c = ca::load_external_jsonl(dir / "c.jsonl", tok);
  EXPECT_EQ(a.content_hash, b.content_hash);
  EXPECT_NE(a.content_hash, c.content_hash);
}

TEST(Jsonl, MalformedLineNamesTheLine) {
  const auto dir = ts::scratch_dir("jsonl_bad");
  spit(dir / "d.jsonl", R"({"prompt": " 1", "correct": " 2", "incorrect": " 3"})"
                        "\n{not json}\n");
  try {
    ca::load_external_jsonl(dir / "d.jsonl", ca::toy_tokenizer());
    FAIL();
  } catch (const ca::Error& e) {
    EXPECT_EQ(e.code(), ca::ErrorCode::parse_error);
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
}

TEST(MeansCache, SerializationRoundTrip) {
  const auto m = ts::random_model(6);
  const auto ds = ts::numeral_dataset(m, 4);
  const auto means = ca::compute_corrupted_means(m, ca::corrupt_dataset(ds, 1), ca::component_output_hooks(m.config));
  const auto back = ca::deserialize_means(ca::serialize_means(means));
  EXPECT_EQ(back.dataset_hash, means.dataset_hash);
  ASSERT_EQ(back.groups.size(), means.groups.size());
  for (const auto& [len, group] : means.groups) {
    for (const auto& [h, mat] : group) EXPECT_EQ(back.at(h, len).data, mat.data);
  }
}

TEST(MeansCache, SpillIsReused) {
  const auto dir = ts::scratch_dir("means_cache");
  setenv("CIRCUIT_ALIGN_CACHE", dir.c_str(), 1);
  const auto m = ts::random_model(7);
  const auto corrupted = ca::corrupt_dataset(ts::numeral_dataset(m, 3), 2);
  const auto first = ca::cached_corrupted_means(m, corrupted);
  std::size_t files = 0;
  for ([[maybe_unused]] const auto& e : fs::directory_iterator(dir)) ++files;
  EXPECT_EQ(files, 1u);
  const auto second = ca::cached_corrupted_means(m, corrupted);
  const auto h = ca::output_hook(ca::ComponentId::mlp(1));
  const auto len = corrupted.examples[0].prompt_tokens.size();
  EXPECT_EQ(first.at(h, len).data, second.at(h, len).data);
  unsetenv("CIRCUIT_ALIGN_CACHE");
}

TEST(Report, CsvQuotingAndProvenance) {
  ca::RunManifest m;
  m.command = "x";
  m.dataset_hash = "abc";
  m.model_digests["t"] = "d1";
  ca::CsvTable t({"a", "b"});
  t.row({"1,5", "he said \"hi\""});
  const auto text = t.render(ca::provenance_comment(m));
  EXPECT_EQ(text, "# manifest=" + m.digest() + " dataset=abc model:t=d1\na,b\n\"1,5\",\"he said \"\"hi\"\"\"\n");
  EXPECT_THROW(t.row({"only one"}), ca::Error);
}

TEST(Report, FormatNumberRoundTrips) {
  for (double v : {0.1, 1.0 / 3.0, 1e-300, -2.5, 123456789.125}) {
    EXPECT_EQ(std::strtod(ca::format_number(v).c_str(), nullptr), v);
  }
  EXPECT_EQ(ca::format_number(0.5), "0.5");
}

TEST(Report, AtomicWriteLeavesNoTempFiles) {
  const auto dir = ts::scratch_dir("atomic");
  ca::atomic_write(dir / "sub" / "a.txt", "hello");
  EXPECT_EQ(slurp(dir / "sub" / "a.txt"), "hello");
  for (const auto& e : fs::directory_iterator(dir / "sub")) EXPECT_EQ(e.path().filename(), "a.txt");
}
