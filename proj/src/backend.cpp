#include "dualtrack/backend.hpp"

#include <httplib.h>
#include <nlohmann/json.hpp>

namespace dualtrack {

HttpCompletion::HttpCompletion(std::string base_url, std::string model, std::string path)
    : base_url_(std::move(base_url)), model_(std::move(model)), path_(std::move(path)) {}

std::string HttpCompletion::complete(const std::string& prompt) {
  using nlohmann::json;
  httplib::Client client(base_url_);
  client.set_connection_timeout(5);
  client.set_read_timeout(60);
  json body{{"model", model_},
            {"messages", json::array({json{{"role", "user"}, {"content", prompt}}})},
            {"temperature", 0}};
  auto res = client.Post(path_, body.dump(), "application/json");
  if (!res) throw Error(ErrorKind::io, "completion backend unreachable: " + base_url_);
  if (res->status != 200)
    throw Error(ErrorKind::io, "completion backend returned HTTP " + std::to_string(res->status));
  auto reply = json::parse(res->body);
  return reply.at("choices").at(0).at("message").at("content").get<std::string>();
}

}  // namespace dualtrack
