/* Copyright (c) 2026 The elrea Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License. */

#include "elrea/corpus.hpp"

#include <gtest/gtest.h>

#include <functional>

namespace {

using namespace elrea;

std::filesystem::path temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "elrea_corpus_test";
  std::filesystem::create_directories(dir);
  return dir / name;
}

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected an elrea::Error";
  return ErrorCode::kIo;
}

TEST(LoadJsonl, ReadsLinesInOrderAndAssignsIds) {
  const auto path = temp_path("two.jsonl");
  write_file(path,
             "{\"id\":\"x\",\"instruction\":\"add 1+2\",\"response\":\"1+2=3\",\"source_tag\":\"add\"}\n"
             "{\"instruction\":\"copy ab\",\"response\":\"ab=ab|ab\"}\n");
  const auto examples = load_jsonl(path);
  ASSERT_EQ(examples.size(), 2u);
  EXPECT_EQ(examples[0].id, "x");
  EXPECT_EQ(examples[0].source_tag, "add");
  EXPECT_EQ(examples[1].id, "line-2");
  EXPECT_EQ(examples[1].instruction, "copy ab");
}

TEST(LoadJsonl, MissingInstructionNamesLine) {
  const auto path = temp_path("bad.jsonl");
  write_file(path, "{\"response\":\"x\"}\n");
  try {
    load_jsonl(path);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kParse);
    EXPECT_NE(std::string(e.what()).find("line 1"), std::string::npos);
  }
}

TEST(LoadJsonl, MalformedJsonNamesLine) {
  const auto path = temp_path("malformed.jsonl");
  write_file(path, "{\"instruction\":\"a\",\"response\":\"b\"}\n{oops\n");
  try {
    load_jsonl(path);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kParse);
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
}

TEST(LoadJsonl, EmptyFileIsAnError) {
  const auto path = temp_path("empty.jsonl");
  write_file(path, "");
  EXPECT_EQ(code_of([&] { load_jsonl(path); }), ErrorCode::kEmptyDataset);
}

TEST(LoadJsonl, DollySizedFile) {
  // Same instance count as the Dolly-15k fine-tuning set.
  const auto path = temp_path("dolly.jsonl");
  std::string text;
  for (int i = 0; i < 15011; ++i)
    text += "{\"instruction\":\"q" + std::to_string(i) + "\",\"response\":\"a\",\"source_tag\":\"dolly\"}\n";
  write_file(path, text);
  EXPECT_EQ(load_jsonl(path).size(), 15011u);
}

TEST(LoadJsonl, SaveThenLoadPreservesExamples) {
  const std::vector<TaskCount> mix = {{"add", 5}, {"reverse", 5}};
  const auto examples = synth_generate(mix, 3);
  const auto path = temp_path("roundtrip.jsonl");
  save_jsonl(path, examples);
  EXPECT_EQ(load_jsonl(path), examples);
}

TEST(Synth, DeterministicPerSeed) {
  const std::vector<TaskCount> mix = {{"add", 2}};
  const auto a = synth_generate(mix, 7);
  const auto b = synth_generate(mix, 7);
  ASSERT_EQ(a.size(), 2u);
  EXPECT_EQ(a, b);
  for (const auto& e : a) EXPECT_EQ(e.source_tag, "add");
  EXPECT_NE(synth_generate(mix, 8), a);
}

TEST(Synth, FourFamilyCounts) {
  const std::vector<TaskCount> mix = {{"add", 1000}, {"reverse", 1000}, {"sort", 1000}, {"copy", 1000}};
  const auto examples = synth_generate(mix, 1);
  ASSERT_EQ(examples.size(), 4000u);
  std::map<std::string, int> counts;
  std::set<std::string> ids;
  for (const auto& e : examples) {
    ++counts[e.source_tag];
    ids.insert(e.id);
  }
  EXPECT_EQ(ids.size(), 4000u);
  for (const auto& f : {"add", "reverse", "sort", "copy"}) EXPECT_EQ(counts[f], 1000) << f;
}

TEST(Synth, AnswersAreCheckable) {
  const std::vector<TaskCount> mix = {{"add", 50}, {"reverse", 50}, {"sort", 50}, {"copy", 50}};
  for (const auto& e : synth_generate(mix, 11)) {
    const auto answer = extract_answer(e.response);
    ASSERT_TRUE(answer.has_value()) << e.response;
    const std::string operand = e.instruction.substr(e.instruction.find(' ') + 1);
    if (e.source_tag == "add") {
      const auto plus = operand.find('+');
      EXPECT_EQ(std::stoi(*answer), std::stoi(operand.substr(0, plus)) + std::stoi(operand.substr(plus + 1)));
    } else if (e.source_tag == "reverse") {
      EXPECT_EQ(*answer, std::string(operand.rbegin(), operand.rend()));
    } else if (e.source_tag == "sort") {
      std::string s = operand;
      std::sort(s.begin(), s.end());
      EXPECT_EQ(*answer, s);
    } else {
      EXPECT_EQ(*answer, operand + "|" + operand);
    }
  }
}

TEST(Synth, UnknownFamily) {
  const std::vector<TaskCount> mix = {{"unknown", 1}};
  EXPECT_EQ(code_of([&] { synth_generate(mix, 1); }), ErrorCode::kUnknownFamily);
}

TEST(Tokenize, Layout) {
  const Vocab vocab = Vocab::printable_ascii();
  const auto seq = tokenize({"e", "ab", "c", "t"}, vocab, 256);
  ASSERT_TRUE(seq.has_value());
  const std::vector<int> expected = {Vocab::kBos, *vocab.id('a'), *vocab.id('b'), Vocab::kSep, *vocab.id('c'),
                                     Vocab::kEos};
  EXPECT_EQ(seq->tokens, expected);
  const std::vector<Role> roles = {Role::kInstr, Role::kInstr, Role::kInstr, Role::kInstr, Role::kResp, Role::kResp};
  EXPECT_EQ(seq->roles, roles);
}

TEST(Tokenize, EmptyResponseIsAllInstruction) {
  const Vocab vocab = Vocab::printable_ascii();
  const auto seq = tokenize({"e", "xyz", "", "t"}, vocab, 256);
  ASSERT_TRUE(seq.has_value());
  EXPECT_EQ(seq->size(), 5u);
  EXPECT_EQ(seq->tokens.back(), Vocab::kSep);
  for (Role r : seq->roles) EXPECT_EQ(r, Role::kInstr);
}

TEST(Tokenize, OverLengthIsDiscarded) {
  const Vocab vocab = Vocab::printable_ascii();
  EXPECT_FALSE(tokenize({"e", std::string(5000, 'a'), "b", "t"}, vocab, 256).has_value());
  // Exactly l_max fits.
  EXPECT_TRUE(tokenize({"e", "ab", "c", "t"}, vocab, 6).has_value());
  EXPECT_FALSE(tokenize({"e", "ab", "c", "t"}, vocab, 5).has_value());
}

TEST(Tokenize, OutOfVocabularySymbol) {
  const Vocab vocab = Vocab::from_symbols({'a', 'b'});
  EXPECT_EQ(code_of([&] { tokenize({"e", "abc", "a", "t"}, vocab, 64); }), ErrorCode::kInvalidArgument);
}

TEST(Tokenize, RoundTripAndRolePartitionProperty) {
  const Vocab vocab = Vocab::printable_ascii();
  Rng rng(99);
  for (int trial = 0; trial < 500; ++trial) {
    Example e{"id", "", "", "t"};
    const int n_instr = rng.range(1, 40);
    const int n_resp = rng.range(0, 40);
    for (int i = 0; i < n_instr; ++i) e.instruction.push_back(static_cast<char>(rng.range(0x20, 0x7e)));
    for (int i = 0; i < n_resp; ++i) e.response.push_back(static_cast<char>(rng.range(0x20, 0x7e)));
    const auto seq = tokenize(e, vocab, 256);
    ASSERT_TRUE(seq.has_value());
    ASSERT_EQ(seq->tokens.size(), seq->roles.size());
    const auto [instr, resp] = detokenize(*seq, vocab);
    EXPECT_EQ(instr, e.instruction);
    EXPECT_EQ(resp, e.response);
    // SEP is the last instruction token; everything after it is response.
    const auto sep = static_cast<std::size_t>(std::find(seq->tokens.begin(), seq->tokens.end(), Vocab::kSep) -
                                              seq->tokens.begin());
    for (std::size_t t = 0; t < seq->size(); ++t)
      EXPECT_EQ(seq->roles[t], t <= sep ? Role::kInstr : Role::kResp);
  }
}

TEST(Vocab, PrintableAsciiSizeAndOrder) {
  const Vocab vocab = Vocab::printable_ascii();
  EXPECT_EQ(vocab.size(), 99);
  EXPECT_EQ(*vocab.id(' '), Vocab::kReserved);
  EXPECT_EQ(vocab.symbol(vocab.size() - 1), '~');
  EXPECT_FALSE(vocab.id('\n').has_value());
}

TEST(Vocab, FromExamplesIsSortedAndDeterministic) {
  const std::vector<Example> ex = {{"1", "cab", "b", ""}, {"2", "zz", "a", ""}};
  const Vocab v = Vocab::from_examples(ex);
  EXPECT_EQ(v.symbols(), (std::vector<char>{'a', 'b', 'c', 'z'}));
  const auto path = temp_path("vocab.txt");
  Vocab::printable_ascii().save(path);
  EXPECT_EQ(Vocab::load(path), Vocab::printable_ascii());
  v.save(path);
  EXPECT_EQ(Vocab::load(path), v);
}

TEST(ExtractAnswer, FinalEqualsMarker) {
  EXPECT_EQ(extract_answer("12+30= 42"), "42");
  EXPECT_EQ(extract_answer("a=b=c "), "c");
  EXPECT_FALSE(extract_answer("no marker").has_value());
  EXPECT_FALSE(extract_answer("trailing=  ").has_value());
}

}  // namespace
