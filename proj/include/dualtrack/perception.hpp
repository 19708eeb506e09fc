#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dualtrack/common.hpp"

namespace dualtrack {

using json = nlohmann::json;

enum class Modality { text, audio, video };
std::string_view to_string(Modality m);
Modality parse_modality(std::string_view s);

/// Tag map describing one video frame: subject / action / object / environment.
using FrameDescriptor = std::map<std::string, std::string>;

struct ModalityPayload {
  Modality modality = Modality::text;
  std::string text;                    // raw text or audio transcript
  std::vector<FrameDescriptor> frames;  // video only
  Millis origin_ms = 0;
};

void to_json(json& j, const ModalityPayload& p);
void from_json(const json& j, ModalityPayload& p);

struct RequestObject {
  std::string session_id;
  std::string utterance;
  std::vector<std::string> visual_tags;
  std::map<std::string, Millis> origin_timestamps;  // modality -> ms

  bool operator==(const RequestObject&) const = default;
};

void to_json(json& j, const RequestObject& r);

enum class PerceptionParadigm { decoupled, monolithic };
std::string_view to_string(PerceptionParadigm p);
PerceptionParadigm parse_paradigm(std::string_view s);

struct PerceptionConfig {
  PerceptionParadigm paradigm = PerceptionParadigm::decoupled;
  Millis decoupled_ms = 480;    // caption -> LLM
  Millis monolithic_ms = 2100;  // video-in -> text-out

  Millis per_turn_ms() const {
    return paradigm == PerceptionParadigm::decoupled ? decoupled_ms : monolithic_ms;
  }
};

/// Turns one frame descriptor into a short caption.
class Perceptor {
 public:
  virtual ~Perceptor() = default;
  virtual std::string caption(const FrameDescriptor& frame) = 0;
  /// Tags contributed to the request; defaults to the caption itself.
  virtual std::vector<std::string> tags(const FrameDescriptor& frame);
};

/// Deterministic template captioner: tag values joined in subject, action,
/// object, environment order, remaining keys alphabetically.
class StubPerceptor final : public Perceptor {
 public:
  std::string caption(const FrameDescriptor& frame) override;
  std::vector<std::string> tags(const FrameDescriptor& frame) override;
};

/// Captioner backed by an external HTTP service: POSTs the frame JSON and
/// reads `{"caption": "..."}` back.
class HttpPerceptor final : public Perceptor {
 public:
  HttpPerceptor(std::string base_url, std::string path = "/caption");
  std::string caption(const FrameDescriptor& frame) override;

 private:
  std::string base_url_;
  std::string path_;
};

std::string caption_stub(const FrameDescriptor& frame);

/// Visual tags of a frame: every non-subject tag value.
std::vector<std::string> frame_tags(const FrameDescriptor& frame);

/// Result of the perception stage: the request plus the latency it charged.
struct PerceivedTurn {
  RequestObject request;
  Millis latency_ms = 0;
};

class PerceptionGateway {
 public:
  explicit PerceptionGateway(PerceptionConfig config = {},
                             std::shared_ptr<Perceptor> perceptor = nullptr);

  /// Fuses per-turn payloads into a request. Throws invalid_turn when every payload is empty.
  RequestObject normalize(const std::vector<ModalityPayload>& payloads,
                          const std::string& session_id) const;

  /// Latency charged for this turn: the paradigm constant when the turn carries
  /// audio or a non-empty frame, otherwise zero.
  Millis perception_latency(const std::vector<ModalityPayload>& payloads) const;

  PerceivedTurn perceive(const std::vector<ModalityPayload>& payloads,
                         const std::string& session_id) const;

  const PerceptionConfig& config() const { return config_; }

 private:
  PerceptionConfig config_;
  std::shared_ptr<Perceptor> perceptor_;
};

}  // namespace dualtrack
