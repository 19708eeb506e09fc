#pragma once

#include <filesystem>
#include <istream>
#include <string>
#include <vector>

#include "dualtrack/engine.hpp"

namespace dualtrack {

/// Everything the CLI and the service read from a config file. Backends are
/// "reference" (built-in, deterministic) or "model"/"http" (external).
struct Settings {
  EngineConfig engine;
  std::string classifier = "reference";  // reference | model
  std::string responder = "template";    // template | model
  std::string planner = "template";      // template | model
  std::string perceptor = "stub";        // stub | http
  std::string model_url;
  std::string model_name = "default";
  std::string perceptor_url;

  std::string corpus = "data/corpus.json";
  Millis turn_gap_ms = 2000;

  double sample_rate = 0.1;
  double sentiment_threshold = 0.0;
  int flywheel_version = 1;

  std::string host = "127.0.0.1";
  int port = 8080;
  double time_scale = 1.0;  // virtual ms per wall ms in the live service
};

/// Applies one key. Throws configuration error on an unknown key or a value
/// that does not parse.
void set_setting(Settings& s, const std::string& key, const std::string& value);

/// Flat "key = value" lines; '#' starts a comment. Errors carry the line number.
Settings parse_settings(std::istream& in, Settings base = {});
Settings load_settings(const std::filesystem::path& path, Settings base = {});

/// Every accepted key with a one-line description, for --help style output.
std::vector<std::pair<std::string, std::string>> setting_keys();

/// Builds the pluggable backends. Throws configuration error when an
/// external backend is selected without its URL.
EngineParts make_parts(const Settings& s);

}  // namespace dualtrack
