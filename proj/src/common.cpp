#include "dualtrack/common.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace dualtrack {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::configuration: return "configuration";
    case ErrorKind::not_found: return "not-found";
    case ErrorKind::invalid_argument: return "invalid-argument";
    case ErrorKind::invalid_turn: return "invalid-turn";
    case ErrorKind::schema_violation: return "schema-violation";
    case ErrorKind::validity: return "validity";
    case ErrorKind::plan_validation: return "plan-validation";
    case ErrorKind::dispatch: return "dispatch";
    case ErrorKind::registration: return "registration";
    case ErrorKind::conflict: return "conflict";
    case ErrorKind::io: return "io";
    case ErrorKind::closed: return "closed";
  }
  return "unknown";
}

namespace text {

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

std::string trim(std::string_view s) {
  auto is_space = [](unsigned char c) { return std::isspace(c) != 0; };
  std::size_t b = 0;
  std::size_t e = s.size();
  while (b < e && is_space(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && is_space(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

std::string normalize(std::string_view s) {
  return join(split_words(lower(s)), " ");
}

std::vector<std::string> split_words(std::string_view s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!cur.empty()) out.push_back(std::move(cur)), cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

std::vector<std::string> tokens(std::string_view s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    auto uc = static_cast<unsigned char>(c);
    if (std::isalnum(uc) || c == '_') {
      cur.push_back(static_cast<char>(std::tolower(uc)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

bool contains(std::string_view haystack, std::string_view needle) {
  return haystack.find(needle) != std::string_view::npos;
}

std::string join(const std::vector<std::string>& parts, std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out.append(sep);
    out.append(parts[i]);
  }
  return out;
}

}  // namespace text

std::int64_t estimate_tokens(std::string_view s) {
  auto words = static_cast<std::int64_t>(text::split_words(s).size());
  // integer form of ceil(words * 1.3)
  return (words * 13 + 9) / 10;
}

std::string truncate_to_tokens(std::string_view s, std::int64_t cap) {
  auto words = text::split_words(s);
  std::vector<std::string> kept;
  for (auto& w : words) {
    auto n = static_cast<std::int64_t>(kept.size()) + 1;
    if ((n * 13 + 9) / 10 > cap) break;
    kept.push_back(std::move(w));
  }
  return text::join(kept, " ");
}

std::uint64_t fnv1a(std::string_view s, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex_id(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace dualtrack
