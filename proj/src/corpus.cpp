#include "steerkit/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "json.hpp"
#include "steerkit/binary_io.hpp"
#include "steerkit/rng.hpp"

namespace steerkit {

using nlohmann::json;

UserCorpus UserCorpus::from_records(std::vector<InteractionRecord> records, double test_fraction) {
  if (!(test_fraction >= 0.0 && test_fraction < 1.0)) throw InvalidArgument("test_fraction must be in [0, 1)");
  UserCorpus c;
  for (auto& r : records) {
    if (r.user_id.empty()) throw CorpusError("record with empty user_id");
    if (r.query.empty()) throw CorpusError("record of user '" + r.user_id + "' has an empty query");
    c.by_user_[r.user_id].records.push_back(std::move(r));
  }
  RecordId next_id = 0;
  for (auto& [user, log] : c.by_user_) {
    auto& recs = log.records;
    std::stable_sort(recs.begin(), recs.end(),
                     [](const InteractionRecord& a, const InteractionRecord& b) { return a.ts < b.ts; });
    std::set<std::pair<std::int64_t, std::string_view>> seen;
    for (const auto& r : recs) {
      if (!seen.emplace(r.ts, r.query).second) {
        throw CorpusError("duplicate record for user '" + user + "' at ts " + std::to_string(r.ts));
      }
    }
    const std::size_t n = recs.size();
    const auto n_test = static_cast<std::size_t>(std::floor(static_cast<double>(n) * test_fraction));
    std::size_t n_train = std::max<std::size_t>(n - n_test, n > 0 ? 1 : 0);
    while (n_train < n && recs[n_train].ts == recs[n_train - 1].ts) ++n_train;
    log.n_train = n_train;
    for (std::size_t i = 0; i < n; ++i) {
      recs[i].id = next_id++;
      c.index_.emplace(recs[i].id, std::make_pair(user, i));
    }
  }
  return c;
}

std::vector<std::string> UserCorpus::users() const {
  std::vector<std::string> out;
  out.reserve(by_user_.size());
  for (const auto& [u, _] : by_user_) out.push_back(u);
  return out;
}

bool UserCorpus::has_user(std::string_view user) const { return by_user_.find(user) != by_user_.end(); }

const UserCorpus::UserLog& UserCorpus::log(std::string_view user) const {
  auto it = by_user_.find(user);
  if (it == by_user_.end()) throw CorpusError("unknown user '" + std::string(user) + "'");
  return it->second;
}

std::span<const InteractionRecord> UserCorpus::records(std::string_view user) const { return log(user).records; }

std::span<const InteractionRecord> UserCorpus::train(std::string_view user) const {
  const auto& l = log(user);
  return std::span(l.records).first(l.n_train);
}

std::span<const InteractionRecord> UserCorpus::test(std::string_view user) const {
  const auto& l = log(user);
  return std::span(l.records).subspan(l.n_train);
}

std::int64_t UserCorpus::split_ts(std::string_view user) const {
  const auto& l = log(user);
  return l.n_train < l.records.size() ? l.records[l.n_train].ts : std::numeric_limits<std::int64_t>::max();
}

const InteractionRecord& UserCorpus::record(RecordId id) const {
  auto it = index_.find(id);
  if (it == index_.end()) throw CorpusError("unknown record id " + std::to_string(id));
  return by_user_.find(it->second.first)->second.records[it->second.second];
}

UserCorpus UserCorpus::with_train_fraction(double fraction, TrainWindow window) const {
  if (!(fraction > 0.0)) throw InvalidArgument("data fraction must be > 0");
  UserCorpus c;
  for (const auto& [user, log] : by_user_) {
    UserLog out;
    std::size_t keep = log.n_train;
    if (fraction < 1.0 && log.n_train > 0) {
      keep = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(log.n_train)));
      keep = std::clamp<std::size_t>(keep, 1, log.n_train);
    }
    const std::size_t first = window == TrainWindow::kEarliest ? 0 : log.n_train - keep;
    out.records.assign(log.records.begin() + static_cast<std::ptrdiff_t>(first),
                       log.records.begin() + static_cast<std::ptrdiff_t>(first + keep));
    out.n_train = keep;
    out.records.insert(out.records.end(), log.records.begin() + static_cast<std::ptrdiff_t>(log.n_train),
                       log.records.end());
    for (std::size_t i = 0; i < out.records.size(); ++i) c.index_.emplace(out.records[i].id, std::make_pair(user, i));
    c.by_user_.emplace(user, std::move(out));
  }
  return c;
}

UserCorpus parse_logs(std::string_view text, double test_fraction) {
  std::vector<InteractionRecord> records;
  std::set<std::tuple<std::string, std::int64_t, std::string>> seen;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.find_first_not_of(" \t") == std::string_view::npos) {
      if (end == text.size()) break;
      continue;
    }
    const std::string where = "line " + std::to_string(line_no);
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw CorpusError(where + ": malformed JSON (" + e.what() + ")");
    }
    if (!j.is_object()) throw CorpusError(where + ": expected a JSON object");
    auto require = [&](const char* key) -> const json& {
      auto it = j.find(key);
      if (it == j.end()) throw CorpusError(where + ": missing required field '" + key + "'");
      return *it;
    };
    InteractionRecord r;
    const json& user = require("user_id");
    const json& ts = require("ts");
    const json& query = require("query");
    const json& answer = require("answer");
    if (!user.is_string()) throw CorpusError(where + ": field 'user_id' must be a string");
    if (!ts.is_number_integer()) throw CorpusError(where + ": field 'ts' must be an integer");
    if (!query.is_string()) throw CorpusError(where + ": field 'query' must be a string");
    if (!answer.is_string()) throw CorpusError(where + ": field 'answer' must be a string");
    r.user_id = user.get<std::string>();
    r.ts = ts.get<std::int64_t>();
    r.query = query.get<std::string>();
    r.answer = answer.get<std::string>();
    if (r.user_id.empty()) throw CorpusError(where + ": empty user_id");
    if (r.query.empty()) throw CorpusError(where + ": empty query");
    if (!seen.emplace(r.user_id, r.ts, r.query).second) {
      throw CorpusError(where + ": duplicate (user_id, ts, query) record");
    }
    records.push_back(std::move(r));
    if (end == text.size()) break;
  }
  return UserCorpus::from_records(std::move(records), test_fraction);
}

UserCorpus load_logs(const std::filesystem::path& path, double test_fraction) {
  if (!std::filesystem::exists(path)) throw CorpusError("corpus file not found: " + path.string());
  return parse_logs(io::read_file(path.string()), test_fraction);
}

std::string to_jsonl(const UserCorpus& corpus) {
  std::string out;
  for (const auto& user : corpus.users()) {
    for (const auto& r : corpus.records(user)) {
      json j = {{"user_id", r.user_id}, {"ts", r.ts}, {"query", r.query}, {"answer", r.answer}};
      out += j.dump();
      out += '\n';
    }
  }
  return out;
}

std::string render_examples(std::span<const InteractionRecord* const> records) {
  std::string out;
  for (std::size_t i = 0; i < records.size(); ++i) {
    out += "Example " + std::to_string(i + 1) + ":\nQ: " + records[i]->query + "\nA: " + records[i]->answer + "\n";
  }
  return out;
}

std::vector<std::string> lexical_tokens(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text) {
    if (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f') {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(c >= 'A' && c <= 'Z' ? static_cast<char>(c - 'A' + 'a') : c);
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

Bm25::Bm25(const std::vector<std::string>& documents) {
  double total = 0;
  for (const auto& doc : documents) {
    std::map<std::string, int, std::less<>> tf;
    const auto toks = lexical_tokens(doc);
    for (const auto& t : toks) ++tf[t];
    for (const auto& [t, _] : tf) ++doc_freq_[t];
    lengths_.push_back(static_cast<double>(toks.size()));
    total += static_cast<double>(toks.size());
    term_freqs_.push_back(std::move(tf));
  }
  avg_len_ = documents.empty() ? 0.0 : total / static_cast<double>(documents.size());
}

std::vector<double> Bm25::scores(std::string_view query) const {
  const double n_docs = static_cast<double>(term_freqs_.size());
  std::vector<double> out(term_freqs_.size(), 0.0);
  for (const auto& term : lexical_tokens(query)) {
    auto df_it = doc_freq_.find(term);
    if (df_it == doc_freq_.end()) continue;
    const double df = df_it->second;
    const double idf = std::log(1.0 + (n_docs - df + 0.5) / (df + 0.5));
    for (std::size_t d = 0; d < term_freqs_.size(); ++d) {
      auto it = term_freqs_[d].find(term);
      if (it == term_freqs_[d].end()) continue;
      const double tf = it->second;
      const double norm = avg_len_ > 0 ? lengths_[d] / avg_len_ : 1.0;
      out[d] += idf * tf * (kK1 + 1.0) / (tf + kK1 * (1.0 - kB + kB * norm));
    }
  }
  return out;
}

ContextBlock retrieve_positive(std::string_view query, std::string_view user, const UserCorpus& corpus, int m,
                               const RecordId* exclude) {
  if (m < 0) throw InvalidArgument("context size must be >= 0");
  ContextBlock block;
  block.polarity = Polarity::kPositive;
  std::vector<const InteractionRecord*> candidates;
  for (const auto& r : corpus.train(user)) {
    if (exclude && r.id == *exclude) continue;
    candidates.push_back(&r);
  }
  if (candidates.empty()) {
    block.empty_flag = true;
    return block;
  }
  std::vector<std::string> docs;
  docs.reserve(candidates.size());
  for (const auto* r : candidates) docs.push_back(r->query + " " + r->answer);
  const auto scores = Bm25(docs).scores(query);
  std::vector<std::size_t> order(candidates.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return candidates[a]->ts < candidates[b]->ts;
  });
  order.resize(std::min<std::size_t>(order.size(), static_cast<std::size_t>(m)));
  std::vector<const InteractionRecord*> picked;
  for (std::size_t i : order) {
    picked.push_back(candidates[i]);
    block.source_record_ids.push_back(candidates[i]->id);
  }
  block.text = render_examples(picked);
  block.empty_flag = picked.empty();
  return block;
}

ContextBlock sample_negative(std::string_view user, const UserCorpus& corpus, int m, std::uint64_t seed) {
  if (m < 0) throw InvalidArgument("context size must be >= 0");
  std::vector<const InteractionRecord*> pool;
  for (const auto& other : corpus.users()) {
    if (other == user) continue;
    for (const auto& r : corpus.train(other)) pool.push_back(&r);
  }
  if (pool.empty()) {
    throw CorpusError("no other user with train records to sample negatives for '" + std::string(user) + "'");
  }
  const std::size_t take = std::min<std::size_t>(pool.size(), static_cast<std::size_t>(m));
  Rng rng(seed);
  // Partial Fisher-Yates: the first `take` slots are the sample.
  for (std::size_t i = 0; i < take; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(pool.size() - i));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(take);
  ContextBlock block;
  block.polarity = Polarity::kNegative;
  for (const auto* r : pool) block.source_record_ids.push_back(r->id);
  block.text = render_examples(pool);
  block.empty_flag = pool.empty();
  return block;
}

std::string render_query_prompt(std::string_view context, std::string_view query) {
  std::string out;
  if (!context.empty()) {
    out += context;
    out += '\n';
  }
  out += "Q: ";
  out += query;
  out += "\nA: ";
  return out;
}

}  // namespace steerkit
