#pragma once

#include <deque>
#include <functional>
#include <mutex>
#include <string>

#include "dualtrack/common.hpp"

namespace dualtrack {

/// Text-in/text-out model backend. Implementations may throw on failure.
class TextCompletion {
 public:
  virtual ~TextCompletion() = default;
  virtual std::string complete(const std::string& prompt) = 0;
};

/// Test fake: replays canned responses in order, or computes them from the prompt.
class CannedCompletion final : public TextCompletion {
 public:
  CannedCompletion() = default;
  explicit CannedCompletion(std::function<std::string(const std::string&)> fn) : fn_(std::move(fn)) {}

  void push(std::string response) {
    std::lock_guard g(mu_);
    queue_.push_back(std::move(response));
  }

  std::string complete(const std::string& prompt) override {
    std::lock_guard g(mu_);
    last_prompt_ = prompt;
    if (!queue_.empty()) {
      auto r = std::move(queue_.front());
      queue_.pop_front();
      return r;
    }
    if (fn_) return fn_(prompt);
    throw Error(ErrorKind::io, "canned completion exhausted");
  }

  std::string last_prompt() const {
    std::lock_guard g(mu_);
    return last_prompt_;
  }

 private:
  mutable std::mutex mu_;
  std::deque<std::string> queue_;
  std::function<std::string(const std::string&)> fn_;
  std::string last_prompt_;
};

/// OpenAI-style chat completion endpoint: POST {model, messages:[{role:user,content}]}
/// and read choices[0].message.content.
class HttpCompletion final : public TextCompletion {
 public:
  HttpCompletion(std::string base_url, std::string model, std::string path = "/v1/chat/completions");
  std::string complete(const std::string& prompt) override;

 private:
  std::string base_url_;
  std::string model_;
  std::string path_;
};

}  // namespace dualtrack
