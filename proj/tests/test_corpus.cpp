#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <set>

#include "steerkit/corpus.hpp"
#include "test_util.hpp"

using namespace steerkit;

namespace {

InteractionRecord rec(std::string user, std::int64_t ts, std::string q, std::string a) {
  InteractionRecord r;
  r.user_id = std::move(user);
  r.ts = ts;
  r.query = std::move(q);
  r.answer = std::move(a);
  return r;
}

// Three users with ten records each; user b's answers share a token.
UserCorpus three_users() {
  std::vector<InteractionRecord> rs;
  for (const char* u : {"a", "b", "c"}) {
    for (int i = 0; i < 10; ++i) {
      rs.push_back(rec(u, 100 + i, std::string(u) + " question " + std::to_string(i), "answer " + std::to_string(i)));
    }
  }
  return UserCorpus::from_records(rs);
}

void expect_error_mentions(const std::string& text, const std::string& needle) {
  try {
    parse_logs(text);
    FAIL() << "no error for: " << text;
  } catch (const CorpusError& e) {
    EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
  }
}

}  // namespace

TEST(ParseLogs, ReadsRecordsAndSortsByTs) {
  const std::string text =
      R"({"user_id":"u","ts":5,"query":"later","answer":"x"})"
      "\n\n"
      R"({"user_id":"u","ts":1,"query":"first","answer":""})"
      "\r\n"
      R"({"user_id":"t","ts":9,"query":"q","answer":"y"})";
  const UserCorpus c = parse_logs(text, 0.0);
  EXPECT_EQ(c.users(), (std::vector<std::string>{"t", "u"}));
  ASSERT_EQ(c.records("u").size(), 2u);
  EXPECT_EQ(c.records("u")[0].query, "first");
  EXPECT_EQ(c.records("u")[1].query, "later");
  // Ids follow user order then time order.
  EXPECT_EQ(c.records("t")[0].id, 0u);
  EXPECT_EQ(c.records("u")[0].id, 1u);
  EXPECT_EQ(c.record(2).query, "later");
  EXPECT_EQ(c.record_count(), 3u);
}

TEST(ParseLogs, EmptyInputIsEmptyCorpus) {
  EXPECT_EQ(parse_logs("").user_count(), 0u);
  EXPECT_EQ(parse_logs("\n  \n").user_count(), 0u);
}

TEST(ParseLogs, ErrorsNameTheLine) {
  const std::string good = R"({"user_id":"u","ts":1,"query":"q","answer":"a"})";
  expect_error_mentions(good + "\n{not json", "line 2");
  expect_error_mentions(good + "\n\n" + R"({"user_id":"u","query":"q","answer":"a"})", "line 3");
  expect_error_mentions(R"({"user_id":"u","query":"q","answer":"a"})", "'ts'");
  expect_error_mentions(R"({"user_id":"u","ts":1.5,"query":"q","answer":"a"})", "'ts' must be an integer");
  expect_error_mentions(R"({"user_id":7,"ts":1,"query":"q","answer":"a"})", "'user_id'");
  expect_error_mentions(R"([1,2])", "expected a JSON object");
  expect_error_mentions(R"({"user_id":"","ts":1,"query":"q","answer":"a"})", "empty user_id");
  expect_error_mentions(R"({"user_id":"u","ts":1,"query":"","answer":"a"})", "empty query");
  expect_error_mentions(good + "\n" + good, "line 2: duplicate");
}

TEST(ParseLogs, RoundTripsThroughJsonl) {
  const UserCorpus c = three_users();
  const UserCorpus back = parse_logs(to_jsonl(c));
  for (const auto& u : c.users()) {
    ASSERT_EQ(back.records(u).size(), c.records(u).size());
    for (std::size_t i = 0; i < c.records(u).size(); ++i) EXPECT_EQ(back.records(u)[i], c.records(u)[i]);
  }
}

TEST(LoadLogs, MissingFileNamesPath) {
  try {
    load_logs("/nonexistent/logs.jsonl");
    FAIL();
  } catch (const CorpusError& e) {
    EXPECT_NE(std::string(e.what()).find("/nonexistent/logs.jsonl"), std::string::npos);
  }
  testutil::TempDir dir;
  const auto path = dir.path() / "logs.jsonl";
  std::ofstream(path) << to_jsonl(three_users());
  EXPECT_EQ(load_logs(path).user_count(), 3u);
}

TEST(UserCorpus, RejectsDuplicatesAndBadFraction) {
  EXPECT_THROW(UserCorpus::from_records({rec("u", 1, "q", "a"), rec("u", 1, "q", "b")}), CorpusError);
  EXPECT_NO_THROW(UserCorpus::from_records({rec("u", 1, "q", "a"), rec("v", 1, "q", "b")}));
  EXPECT_NO_THROW(UserCorpus::from_records({rec("u", 1, "q", "a"), rec("u", 1, "r", "b")}));
  EXPECT_THROW(UserCorpus::from_records({}, 1.0), InvalidArgument);
  EXPECT_THROW(UserCorpus::from_records({}, -0.1), InvalidArgument);
  EXPECT_THROW(three_users().records("zz"), CorpusError);
}

TEST(UserCorpus, SplitIsLastFloorFraction) {
  const UserCorpus c = three_users();
  EXPECT_EQ(c.train("a").size(), 8u);
  EXPECT_EQ(c.test("a").size(), 2u);
  EXPECT_EQ(c.test("a")[0].ts, 108);
  EXPECT_EQ(c.split_ts("a"), 108);
  // A single record stays in train.
  const UserCorpus one = UserCorpus::from_records({rec("u", 1, "q", "a")}, 0.9);
  EXPECT_EQ(one.train("u").size(), 1u);
  EXPECT_EQ(one.split_ts("u"), INT64_MAX);
}

TEST(UserCorpus, TestNeverSharesTimestampWithTrain) {
  std::vector<InteractionRecord> rs;
  const std::int64_t ts[] = {0, 1, 2, 3, 4, 5, 6, 7, 7, 8};
  for (int i = 0; i < 10; ++i) rs.push_back(rec("u", ts[i], "q" + std::to_string(i), "a"));
  const UserCorpus c = UserCorpus::from_records(rs);
  // The nominal boundary falls between the two ts-7 records and moves right.
  EXPECT_EQ(c.train("u").size(), 9u);
  ASSERT_EQ(c.test("u").size(), 1u);
  for (const auto& t : c.test("u")) EXPECT_GT(t.ts, c.train("u").back().ts);
}

TEST(UserCorpus, TrainFractionWindows) {
  const UserCorpus c = three_users();  // 8 train records per user
  const UserCorpus early = c.with_train_fraction(0.25, TrainWindow::kEarliest);
  const UserCorpus late = c.with_train_fraction(0.25, TrainWindow::kLatest);
  ASSERT_EQ(early.train("a").size(), 2u);
  EXPECT_EQ(early.train("a")[0].ts, 100);
  EXPECT_EQ(late.train("a")[0].ts, 106);
  EXPECT_EQ(late.train("a")[1].ts, 107);
  EXPECT_EQ(late.test("a").size(), 2u);
  EXPECT_EQ(late.record(late.train("b")[0].id), late.train("b")[0]);
  EXPECT_EQ(c.with_train_fraction(0.01, TrainWindow::kEarliest).train("a").size(), 1u);
  EXPECT_EQ(c.with_train_fraction(0.3, TrainWindow::kEarliest).train("a").size(), 3u);  // ceil(2.4)
  EXPECT_EQ(c.with_train_fraction(1.0, TrainWindow::kLatest).train("a").size(), 8u);
}

TEST(Bm25, MatchesHandComputedScores) {
  const Bm25 bm({"a b", "b c c"});
  const double avg = 2.5;
  auto tf_part = [&](double tf, double len) { return tf * 2.2 / (tf + 1.2 * (0.25 + 0.75 * len / avg)); };
  const auto c = bm.scores("c");
  EXPECT_EQ(c[0], 0.0);
  EXPECT_NEAR(c[1], std::log(2.0) * tf_part(2, 3), 1e-12);
  const auto b = bm.scores("B");
  EXPECT_NEAR(b[0], std::log(1.2) * tf_part(1, 2), 1e-12);
  EXPECT_NEAR(b[1], std::log(1.2) * tf_part(1, 3), 1e-12);
  // Repeated query terms count per occurrence.
  EXPECT_NEAR(bm.scores("c c")[1], 2 * c[1], 1e-12);
  EXPECT_EQ(bm.scores("zzz"), (std::vector<double>{0.0, 0.0}));
}

TEST(Bm25, AnyMatchScoresPositive) {
  // A term present in every document still has positive idf.
  const Bm25 bm({"x y", "x", "x z z"});
  for (double s : bm.scores("x")) EXPECT_GT(s, 0.0);
}

TEST(LexicalTokens, SplitsOnWhitespaceAndLowercases) {
  EXPECT_EQ(lexical_tokens("  Hello\tWORLD\nx "), (std::vector<std::string>{"hello", "world", "x"}));
  EXPECT_TRUE(lexical_tokens(" \n").empty());
}

TEST(RetrievePositive, RanksByBm25WithEarlierTsOnTies) {
  const UserCorpus c = UserCorpus::from_records(
      {rec("u", 1, "cats", "purr"), rec("u", 2, "dogs", "bark"), rec("u", 3, "cats and dogs", "both"),
       rec("u", 4, "fish", "swim"), rec("v", 1, "cats", "cats")},
      0.0);
  const ContextBlock b = retrieve_positive("dogs", "u", c, 2);
  ASSERT_EQ(b.source_record_ids.size(), 2u);
  EXPECT_EQ(c.record(b.source_record_ids[0]).ts, 2);  // shorter doc wins
  EXPECT_EQ(c.record(b.source_record_ids[1]).ts, 3);
  EXPECT_EQ(b.text, "Example 1:\nQ: dogs\nA: bark\nExample 2:\nQ: cats and dogs\nA: both\n");
  EXPECT_EQ(b.polarity, Polarity::kPositive);
  EXPECT_FALSE(b.empty_flag);
  // No match at all: earliest records first.
  const ContextBlock z = retrieve_positive("zyx", "u", c, 3);
  ASSERT_EQ(z.source_record_ids.size(), 3u);
  for (int i = 0; i < 3; ++i) EXPECT_EQ(c.record(z.source_record_ids[i]).ts, i + 1);
}

TEST(RetrievePositive, ExcludesOwnRecordAndFlagsEmpty) {
  const UserCorpus c = UserCorpus::from_records({rec("u", 1, "cats", "purr"), rec("v", 1, "q", "a")}, 0.0);
  const RecordId own = c.train("u")[0].id;
  const ContextBlock b = retrieve_positive("cats", "u", c, 2, &own);
  EXPECT_TRUE(b.empty_flag);
  EXPECT_TRUE(b.text.empty());
  EXPECT_TRUE(b.source_record_ids.empty());
  EXPECT_TRUE(retrieve_positive("cats", "u", c, 0).empty_flag);
  EXPECT_THROW(retrieve_positive("cats", "u", c, -1), InvalidArgument);
}

TEST(RetrievePositive, OnlyTrainRecordsOfTheUser) {
  const UserCorpus c = three_users();
  for (int i = 0; i < 10; ++i) {
    const ContextBlock b = retrieve_positive("question " + std::to_string(i), "b", c, 5);
    for (RecordId id : b.source_record_ids) {
      EXPECT_EQ(c.record(id).user_id, "b");
      EXPECT_LT(c.record(id).ts, c.split_ts("b"));
    }
  }
}

TEST(SampleNegative, NeverIncludesOwnRecords) {
  const UserCorpus c = three_users();
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const ContextBlock b = sample_negative("a", c, 2, seed);
    ASSERT_EQ(b.source_record_ids.size(), 2u);
    EXPECT_NE(b.source_record_ids[0], b.source_record_ids[1]);
    for (RecordId id : b.source_record_ids) {
      EXPECT_NE(c.record(id).user_id, "a");
      EXPECT_LT(c.record(id).ts, c.split_ts(c.record(id).user_id));
    }
    EXPECT_EQ(b.polarity, Polarity::kNegative);
  }
}

TEST(SampleNegative, DeterministicAndCoversPool) {
  const UserCorpus c = three_users();
  EXPECT_EQ(sample_negative("a", c, 3, 9).source_record_ids, sample_negative("a", c, 3, 9).source_record_ids);
  std::set<RecordId> seen;
  for (std::uint64_t seed = 0; seed < 500; ++seed) {
    for (RecordId id : sample_negative("a", c, 1, seed).source_record_ids) seen.insert(id);
  }
  EXPECT_EQ(seen.size(), 16u);  // every train record of b and c
  // Asking for more than the pool returns the whole pool.
  const ContextBlock all = sample_negative("a", c, 100, 1);
  EXPECT_EQ(std::set<RecordId>(all.source_record_ids.begin(), all.source_record_ids.end()).size(), 16u);
}

TEST(SampleNegative, SingleUserCorpusThrows) {
  const UserCorpus c = UserCorpus::from_records({rec("u", 1, "q", "a")});
  EXPECT_THROW(sample_negative("u", c, 2, 0), CorpusError);
}

TEST(RenderQueryPrompt, OmitsEmptyContext) {
  EXPECT_EQ(render_query_prompt("", "hi"), "Q: hi\nA: ");
  EXPECT_EQ(render_query_prompt("ctx", "hi"), "ctx\nQ: hi\nA: ");
}
