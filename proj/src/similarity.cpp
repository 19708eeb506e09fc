#include "dualtrack/similarity.hpp"

#include <algorithm>
#include <cmath>
#include <iterator>

#include "dualtrack/common.hpp"

namespace dualtrack {

TermVector term_vector(std::string_view s) {
  TermVector v;
  for (auto& t : text::tokens(s)) v[t] += 1.0;
  return v;
}

bool is_stopword(std::string_view t) {
  // sorted for binary search
  static const std::string_view kWords[] = {
      "a",    "about", "an",   "and",  "any",   "are",  "as",   "at",   "be",    "but",  "by",
      "can",  "could", "do",   "for",  "from",  "have", "how",  "i",    "in",    "is",   "it",
      "me",   "my",    "of",   "on",   "or",    "our",  "please", "so", "some",  "that", "the",
      "this", "to",    "up",   "us",   "we",    "what", "when", "where", "which", "will", "with",
      "would", "you",  "your"};
  return std::binary_search(std::begin(kWords), std::end(kWords), t);
}

TermVector content_vector(std::string_view s) {
  TermVector v;
  for (auto& t : text::tokens(s))
    if (!is_stopword(t)) v[t] += 1.0;
  return v;
}

double cosine(const TermVector& a, const TermVector& b) {
  double dot = 0, na = 0, nb = 0;
  for (const auto& [t, w] : a) {
    na += w * w;
    auto it = b.find(t);
    if (it != b.end()) dot += w * it->second;
  }
  for (const auto& [_, w] : b) nb += w * w;
  if (na == 0 || nb == 0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace dualtrack
