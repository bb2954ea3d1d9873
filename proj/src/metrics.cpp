#include "steerkit/metrics.hpp"

#include <algorithm>
#include <map>

#include "steerkit/corpus.hpp"

namespace steerkit {

namespace {

double f1(double overlap, std::size_t n_cand, std::size_t n_ref) {
  if (overlap == 0) return 0.0;
  const double p = overlap / static_cast<double>(n_cand);
  const double r = overlap / static_cast<double>(n_ref);
  return 2 * p * r / (p + r);
}

}  // namespace

double rouge1(std::string_view candidate, std::string_view reference) {
  const auto c = lexical_tokens(candidate);
  const auto r = lexical_tokens(reference);
  if (c.empty() && r.empty()) return 1.0;
  if (c.empty() || r.empty()) return 0.0;
  std::map<std::string_view, int> counts;
  for (const auto& t : r) ++counts[t];
  int overlap = 0;
  for (const auto& t : c) {
    auto it = counts.find(t);
    if (it != counts.end() && it->second > 0) {
      --it->second;
      ++overlap;
    }
  }
  return f1(overlap, c.size(), r.size());
}

double rougeL(std::string_view candidate, std::string_view reference) {
  const auto c = lexical_tokens(candidate);
  const auto r = lexical_tokens(reference);
  if (c.empty() && r.empty()) return 1.0;
  if (c.empty() || r.empty()) return 0.0;
  std::vector<int> prev(r.size() + 1, 0), cur(r.size() + 1, 0);
  for (std::size_t i = 1; i <= c.size(); ++i) {
    for (std::size_t j = 1; j <= r.size(); ++j) {
      cur[j] = c[i - 1] == r[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return f1(prev[r.size()], c.size(), r.size());
}

}  // namespace steerkit
