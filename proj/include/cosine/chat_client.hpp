#pragma once

// Chat-completions client for library proposals, plus the transcript format
// used to record and replay conversations offline.

#include <cstddef>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

namespace cosine {

struct ChatMessage {
  std::string role;  // "system", "user", "assistant"
  std::string content;
  friend bool operator==(const ChatMessage&, const ChatMessage&) = default;
};

struct ChatRequest {
  std::string model;
  double temperature = 0.7;
  std::vector<ChatMessage> messages;
  friend bool operator==(const ChatRequest&, const ChatRequest&) = default;
};

// Wire body: {"model", "temperature", "messages": [{"role", "content"}]}.
std::string request_body(const ChatRequest& req);
// choices[0].message.content of a chat-completions response.
// Throws Error{ProposerUnavailable} when the body has no such field.
std::string reply_content(std::string_view response_body);

class ChatTransport {
public:
  virtual ~ChatTransport() = default;
  // Returns the assistant text. Throws Error{ProposerUnavailable} when no
  // reply can be obtained.
  virtual std::string send(const ChatRequest& req) = 0;
};

struct HttpSettings {
  std::string endpoint;  // full URL, e.g. http://127.0.0.1:8080/v1/chat/completions
  std::string token;     // sent as a bearer token when non-empty
  double timeout_s = 120.0;
  std::size_t retries = 2;  // extra attempts after the first
};

// Retries transport errors, 429 and 5xx; other statuses fail at once.
class HttpChatTransport : public ChatTransport {
public:
  explicit HttpChatTransport(HttpSettings settings);
  std::string send(const ChatRequest& req) override;

private:
  HttpSettings settings_;
};

struct Exchange {
  ChatRequest request;
  std::string reply;
  friend bool operator==(const Exchange&, const Exchange&) = default;
};

// JSON array of {"request": {...}, "reply": "..."}; parse throws Error{FormatError}.
std::string transcript_json(const std::vector<Exchange>& exchanges);
std::vector<Exchange> parse_transcript(std::string_view text);

// Plays back recorded exchanges in order. A request that differs from the
// recorded one, or running past the end, raises ProposerUnavailable.
class ReplayTransport : public ChatTransport {
public:
  explicit ReplayTransport(std::vector<Exchange> exchanges);
  std::string send(const ChatRequest& req) override;
  std::size_t remaining() const { return exchanges_.size() - next_; }

private:
  std::vector<Exchange> exchanges_;
  std::size_t next_ = 0;
};

// Loads every round_*.json file under `dir` in name order.
std::unique_ptr<ReplayTransport> replay_from_directory(const std::string& dir);

}  // namespace cosine
