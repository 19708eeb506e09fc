#pragma once

#include <map>
#include <string>
#include <string_view>

namespace dualtrack {

/// Term-frequency vector over lowercased alphanumeric tokens.
using TermVector = std::map<std::string, double>;

TermVector term_vector(std::string_view text);
/// term_vector without function words (articles, pronouns, prepositions...).
TermVector content_vector(std::string_view text);
bool is_stopword(std::string_view token);

/// Cosine similarity; 0 when either vector is empty.
double cosine(const TermVector& a, const TermVector& b);

}  // namespace dualtrack
