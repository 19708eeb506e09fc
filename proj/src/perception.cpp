#include "dualtrack/perception.hpp"

#include <algorithm>
#include <set>

#include <httplib.h>

namespace dualtrack {

std::string_view to_string(Modality m) {
  switch (m) {
    case Modality::text: return "text";
    case Modality::audio: return "audio";
    case Modality::video: return "video";
  }
  return "text";
}

Modality parse_modality(std::string_view s) {
  if (s == "text") return Modality::text;
  if (s == "audio") return Modality::audio;
  if (s == "video") return Modality::video;
  throw Error(ErrorKind::invalid_argument, "unknown modality: " + std::string(s));
}

std::string_view to_string(PerceptionParadigm p) {
  return p == PerceptionParadigm::decoupled ? "decoupled" : "monolithic";
}

PerceptionParadigm parse_paradigm(std::string_view s) {
  if (s == "decoupled") return PerceptionParadigm::decoupled;
  if (s == "monolithic") return PerceptionParadigm::monolithic;
  throw Error(ErrorKind::configuration, "unknown perception paradigm: " + std::string(s));
}

void to_json(json& j, const ModalityPayload& p) {
  j = json{{"modality", to_string(p.modality)}};
  if (p.modality == Modality::video) {
    j["data"] = p.frames;
  } else {
    j["data"] = p.text;
  }
  if (p.origin_ms) j["origin_ms"] = p.origin_ms;
}

void from_json(const json& j, ModalityPayload& p) {
  p.modality = parse_modality(j.at("modality").get<std::string>());
  const auto& data = j.at("data");
  if (p.modality == Modality::video) {
    p.frames = data.get<std::vector<FrameDescriptor>>();
  } else {
    p.text = data.get<std::string>();
  }
  p.origin_ms = j.value("origin_ms", Millis{0});
}

void to_json(json& j, const RequestObject& r) {
  j = json{{"session_id", r.session_id},
           {"utterance", r.utterance},
           {"visual_tags", r.visual_tags},
           {"origin_timestamps", r.origin_timestamps}};
}

std::string caption_stub(const FrameDescriptor& frame) {
  static const char* kOrder[] = {"subject", "action", "object", "environment"};
  std::vector<std::string> parts;
  for (const char* key : kOrder) {
    auto it = frame.find(key);
    if (it != frame.end() && !it->second.empty()) parts.push_back(it->second);
  }
  for (const auto& [k, v] : frame) {
    if (std::find(std::begin(kOrder), std::end(kOrder), k) != std::end(kOrder)) continue;
    if (!v.empty()) parts.push_back(v);
  }
  return text::join(parts, " ");
}

std::vector<std::string> frame_tags(const FrameDescriptor& frame) {
  std::vector<std::string> out;
  for (const char* key : {"action", "object", "environment"}) {
    auto it = frame.find(key);
    if (it != frame.end() && !it->second.empty()) out.push_back(it->second);
  }
  for (const auto& [k, v] : frame) {
    if (k == "subject" || k == "action" || k == "object" || k == "environment") continue;
    if (!v.empty()) out.push_back(v);
  }
  return out;
}

std::vector<std::string> Perceptor::tags(const FrameDescriptor& frame) {
  auto c = caption(frame);
  if (c.empty()) return {};
  return {c};
}

std::string StubPerceptor::caption(const FrameDescriptor& frame) { return caption_stub(frame); }

std::vector<std::string> StubPerceptor::tags(const FrameDescriptor& frame) {
  return frame_tags(frame);
}

HttpPerceptor::HttpPerceptor(std::string base_url, std::string path)
    : base_url_(std::move(base_url)), path_(std::move(path)) {}

std::string HttpPerceptor::caption(const FrameDescriptor& frame) {
  httplib::Client client(base_url_);
  client.set_connection_timeout(2);
  auto res = client.Post(path_, json(frame).dump(), "application/json");
  if (!res || res->status != 200)
    throw Error(ErrorKind::io, "perceptor request failed: " + base_url_ + path_);
  return json::parse(res->body).at("caption").get<std::string>();
}

PerceptionGateway::PerceptionGateway(PerceptionConfig config, std::shared_ptr<Perceptor> perceptor)
    : config_(config),
      perceptor_(perceptor ? std::move(perceptor) : std::make_shared<StubPerceptor>()) {}

RequestObject PerceptionGateway::normalize(const std::vector<ModalityPayload>& payloads,
                                           const std::string& session_id) const {
  if (payloads.empty()) throw Error(ErrorKind::invalid_turn, "turn carries no payloads");
  RequestObject req;
  req.session_id = session_id;
  std::vector<std::string> spoken;
  std::vector<std::string> captions;
  std::set<std::string> seen;
  for (const auto& p : payloads) {
    if (p.modality == Modality::video) {
      for (const auto& frame : p.frames) {
        if (frame.empty()) continue;
        auto c = perceptor_->caption(frame);
        if (!c.empty()) captions.push_back(std::move(c));
        for (auto& tag : perceptor_->tags(frame))
          if (seen.insert(tag).second) req.visual_tags.push_back(tag);
        req.origin_timestamps.emplace("video", p.origin_ms);
      }
    } else {
      auto t = text::trim(p.text);
      if (t.empty()) continue;
      spoken.push_back(std::move(t));
      req.origin_timestamps.emplace(std::string(to_string(p.modality)), p.origin_ms);
    }
  }
  req.utterance = text::join(spoken.empty() ? captions : spoken, " ");
  if (req.utterance.empty()) throw Error(ErrorKind::invalid_turn, "all payloads are empty");
  return req;
}

Millis PerceptionGateway::perception_latency(const std::vector<ModalityPayload>& payloads) const {
  for (const auto& p : payloads) {
    if (p.modality == Modality::audio && !text::trim(p.text).empty()) return config_.per_turn_ms();
    if (p.modality == Modality::video)
      for (const auto& f : p.frames)
        if (!f.empty()) return config_.per_turn_ms();
  }
  return 0;
}

PerceivedTurn PerceptionGateway::perceive(const std::vector<ModalityPayload>& payloads,
                                          const std::string& session_id) const {
  return {normalize(payloads, session_id), perception_latency(payloads)};
}

}  // namespace dualtrack
