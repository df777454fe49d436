#include "cosine/chat_client.hpp"

#include "cosine/error.hpp"

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include "httplib.h"
#include "json.hpp"

namespace cosine {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

ordered_json request_to_json(const ChatRequest& req) {
  ordered_json j;
  j["model"] = req.model;
  j["temperature"] = req.temperature;
  j["messages"] = ordered_json::array();
  for (const auto& m : req.messages) j["messages"].push_back({{"role", m.role}, {"content", m.content}});
  return j;
}

ChatRequest request_from_json(const nlohmann::json& j) {
  ChatRequest r;
  r.model = j.at("model").get<std::string>();
  r.temperature = j.at("temperature").get<double>();
  for (const auto& m : j.at("messages"))
    r.messages.push_back({m.at("role").get<std::string>(), m.at("content").get<std::string>()});
  return r;
}

[[noreturn]] void unavailable(const std::string& what) { throw Error(ErrorCode::ProposerUnavailable, what); }

struct Url {
  std::string origin;  // scheme://host[:port]
  std::string path;
};

Url split_url(const std::string& url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) unavailable("endpoint must start with http:// or https://: " + url);
  const auto path_start = url.find('/', scheme_end + 3);
  if (path_start == std::string::npos) return {url, "/"};
  return {url.substr(0, path_start), url.substr(path_start)};
}

}  // namespace

std::string request_body(const ChatRequest& req) { return request_to_json(req).dump(); }

std::string reply_content(std::string_view body) {
  try {
    const auto j = nlohmann::json::parse(body);
    return j.at("choices").at(0).at("message").at("content").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    unavailable(std::string("malformed chat response: ") + e.what());
  }
}

HttpChatTransport::HttpChatTransport(HttpSettings settings) : settings_(std::move(settings)) {
  if (settings_.endpoint.empty()) unavailable("no endpoint configured");
}

std::string HttpChatTransport::send(const ChatRequest& req) {
  const Url url = split_url(settings_.endpoint);
  httplib::Client client(url.origin);
  const auto secs = static_cast<time_t>(settings_.timeout_s);
  const auto usecs = static_cast<time_t>((settings_.timeout_s - static_cast<double>(secs)) * 1e6);
  client.set_connection_timeout(secs, usecs);
  client.set_read_timeout(secs, usecs);
  client.set_write_timeout(secs, usecs);
  httplib::Headers headers;
  if (!settings_.token.empty()) headers.emplace("Authorization", "Bearer " + settings_.token);
  const std::string body = request_body(req);

  std::string last;
  for (std::size_t attempt = 0; attempt <= settings_.retries; ++attempt) {
    if (attempt > 0) std::this_thread::sleep_for(std::chrono::milliseconds(200 * (1 << std::min<std::size_t>(attempt, 5))));
    auto res = client.Post(url.path, headers, body, "application/json");
    if (!res) {
      last = "transport error: " + httplib::to_string(res.error());
      continue;
    }
    if (res->status == 200) return reply_content(res->body);
    last = "HTTP " + std::to_string(res->status);
    if (res->status != 429 && res->status < 500) break;
  }
  unavailable("chat endpoint " + settings_.endpoint + " failed: " + last);
}

std::string transcript_json(const std::vector<Exchange>& exchanges) {
  ordered_json j = ordered_json::array();
  for (const auto& e : exchanges) {
    ordered_json item;
    item["request"] = request_to_json(e.request);
    item["reply"] = e.reply;
    j.push_back(std::move(item));
  }
  return j.dump(2) + "\n";
}

std::vector<Exchange> parse_transcript(std::string_view text) {
  try {
    const auto j = nlohmann::json::parse(text);
    if (!j.is_array()) throw Error(ErrorCode::FormatError, "transcript must be a JSON array");
    std::vector<Exchange> out;
    for (const auto& item : j) out.push_back({request_from_json(item.at("request")), item.at("reply").get<std::string>()});
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::FormatError, std::string("transcript: ") + e.what());
  }
}

ReplayTransport::ReplayTransport(std::vector<Exchange> exchanges) : exchanges_(std::move(exchanges)) {}

std::string ReplayTransport::send(const ChatRequest& req) {
  if (next_ >= exchanges_.size()) unavailable("replay transcript exhausted");
  const Exchange& e = exchanges_[next_];
  if (!(e.request == req)) unavailable("request " + std::to_string(next_) + " differs from the recorded one");
  ++next_;
  return e.reply;
}

std::unique_ptr<ReplayTransport> replay_from_directory(const std::string& dir) {
  std::vector<fs::path> files;
  std::error_code ec;
  for (const auto& entry : fs::directory_iterator(dir, ec)) {
    const auto name = entry.path().filename().string();
    if (entry.is_regular_file() && name.rfind("round_", 0) == 0 && entry.path().extension() == ".json")
      files.push_back(entry.path());
  }
  if (ec) throw Error(ErrorCode::IoError, "cannot list transcripts in " + dir);
  std::sort(files.begin(), files.end());
  std::vector<Exchange> all;
  for (const auto& f : files) {
    std::ifstream in(f, std::ios::binary);
    if (!in) throw Error(ErrorCode::IoError, "cannot read " + f.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    auto part = parse_transcript(ss.str());
    all.insert(all.end(), part.begin(), part.end());
  }
  return std::make_unique<ReplayTransport>(std::move(all));
}

}  // namespace cosine
