#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace dualtrack {

using Millis = std::int64_t;
using ArgMap = std::map<std::string, std::string>;

enum class ErrorKind {
  configuration,
  not_found,
  invalid_argument,
  invalid_turn,
  schema_violation,
  validity,
  plan_validation,
  dispatch,
  registration,
  conflict,
  io,
  closed,
};

std::string_view to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

/// Schema violation with the byte offset in the raw payload where it was detected.
class SchemaViolation : public Error {
 public:
  SchemaViolation(const std::string& message, std::size_t offset)
      : Error(ErrorKind::schema_violation,
              message + " (at byte " + std::to_string(offset) + ")"),
        offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

namespace text {

std::string lower(std::string_view s);
std::string trim(std::string_view s);
/// Lowercased, trimmed, inner whitespace collapsed to single spaces.
std::string normalize(std::string_view s);
std::vector<std::string> split_words(std::string_view s);
/// Lowercase alphanumeric tokens; punctuation separates tokens.
std::vector<std::string> tokens(std::string_view s);
bool contains(std::string_view haystack, std::string_view needle);
std::string join(const std::vector<std::string>& parts, std::string_view sep);

}  // namespace text

/// Whitespace word count x 1.3, rounded up.
std::int64_t estimate_tokens(std::string_view s);

/// Keeps the longest word prefix of `s` whose estimate fits in `cap` tokens.
std::string truncate_to_tokens(std::string_view s, std::int64_t cap);

/// Stable 64-bit FNV-1a, used for seeding and ids.
std::uint64_t fnv1a(std::string_view s, std::uint64_t seed = 0xcbf29ce484222325ULL);

std::string hex_id(std::uint64_t v);

}  // namespace dualtrack
