#pragma once

// User interaction logs: ingestion, time-split views, BM25 retrieval of
// personal context and cross-user negative sampling.

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "steerkit/error.hpp"

namespace steerkit {

class CorpusError : public Error {
 public:
  using Error::Error;
};

using RecordId = std::uint32_t;

struct InteractionRecord {
  RecordId id = 0;  // assigned by UserCorpus: users in lexicographic order, then ts order
  std::string user_id;
  std::int64_t ts = 0;
  std::string query;
  std::string answer;

  bool operator==(const InteractionRecord&) const = default;
};

/// Which slice of a user's train timeline survives a data-fraction cut.
enum class TrainWindow { kEarliest, kLatest };

inline constexpr double kDefaultTestFraction = 0.2;

/// Per-user, time-ordered records with a train/test boundary. Immutable once
/// built; all accessors are safe for concurrent readers.
class UserCorpus {
 public:
  UserCorpus() = default;

  /// Sorts each user's records by ts (stable) and rejects duplicate
  /// (user_id, ts, query) triples. The last floor(n * test_fraction) records
  /// of each user become test records, moved later when needed so no test
  /// record shares a timestamp with a train record. At least one record stays
  /// in train.
  static UserCorpus from_records(std::vector<InteractionRecord> records,
                                 double test_fraction = kDefaultTestFraction);

  std::vector<std::string> users() const;
  bool has_user(std::string_view user) const;
  std::size_t user_count() const { return by_user_.size(); }

  /// All records of a user, ascending ts. Throws CorpusError for unknown users.
  std::span<const InteractionRecord> records(std::string_view user) const;
  std::span<const InteractionRecord> train(std::string_view user) const;
  std::span<const InteractionRecord> test(std::string_view user) const;

  /// Timestamp of the first test record, or INT64_MAX when the user has none.
  std::int64_t split_ts(std::string_view user) const;

  const InteractionRecord& record(RecordId id) const;
  std::size_t record_count() const { return index_.size(); }

  /// Keeps max(1, ceil(fraction * n_train)) train records per user (all of
  /// them when fraction >= 1), drawn from the start or the end of the train
  /// timeline. Test records and record ids are preserved.
  UserCorpus with_train_fraction(double fraction, TrainWindow window) const;

 private:
  struct UserLog {
    std::vector<InteractionRecord> records;
    std::size_t n_train = 0;
  };
  const UserLog& log(std::string_view user) const;

  std::map<std::string, UserLog, std::less<>> by_user_;
  std::map<RecordId, std::pair<std::string, std::size_t>> index_;
};

/// JSON lines with keys user_id (string), ts (integer), query (string),
/// answer (string). Blank lines are skipped. Errors name the 1-based line.
UserCorpus load_logs(const std::filesystem::path& path, double test_fraction = kDefaultTestFraction);
UserCorpus parse_logs(std::string_view text, double test_fraction = kDefaultTestFraction);

/// Inverse of parse_logs for the records of a corpus (one object per line).
std::string to_jsonl(const UserCorpus& corpus);

enum class Polarity { kPositive, kNegative };

struct ContextBlock {
  std::string text;
  std::vector<RecordId> source_record_ids;
  Polarity polarity = Polarity::kPositive;
  /// Set when no candidate record existed (empty text).
  bool empty_flag = false;
};

/// "Example i:\nQ: {query}\nA: {answer}\n" for i = 1.., concatenated.
std::string render_examples(std::span<const InteractionRecord* const> records);

/// Lowercased whitespace tokens.
std::vector<std::string> lexical_tokens(std::string_view text);

/// Okapi BM25 over a fixed document set. idf = ln(1 + (N - n + 0.5) / (n + 0.5)),
/// so any matching term scores strictly positive. Query terms are summed per
/// occurrence.
class Bm25 {
 public:
  static constexpr double kK1 = 1.2;
  static constexpr double kB = 0.75;

  explicit Bm25(const std::vector<std::string>& documents);
  std::vector<double> scores(std::string_view query) const;

 private:
  std::vector<std::map<std::string, int, std::less<>>> term_freqs_;
  std::vector<double> lengths_;
  std::map<std::string, int, std::less<>> doc_freq_;
  double avg_len_ = 0;
};

inline constexpr int kDefaultContextRecords = 2;

/// Top-m train records of `user` by BM25 against query + " " + answer text;
/// ties go to the earlier ts. `exclude` removes one record from the
/// candidates (its own pair during preparation).
ContextBlock retrieve_positive(std::string_view query, std::string_view user, const UserCorpus& corpus, int m,
                               const RecordId* exclude = nullptr);

/// Uniform sample without replacement of min(m, pool) train records from every
/// other user, rendered in sample order. Deterministic in (corpus, user, m,
/// seed). Throws CorpusError when no other user has train records.
ContextBlock sample_negative(std::string_view user, const UserCorpus& corpus, int m, std::uint64_t seed);

/// "Q: {query}\nA: " preceded by "{context}\n" when a context is present.
std::string render_query_prompt(std::string_view context, std::string_view query);

}  // namespace steerkit
