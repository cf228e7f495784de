#pragma once

#include <atomic>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <tuple>

#include <json.hpp>

#include "mtalk/service/engine.hpp"
#include "mtalk/service/session_store.hpp"

namespace httplib {
class Server;
}

namespace mtalk::service {

// Request handling independent of the transport. Methods take and return the
// wire JSON and throw the library's error types.
class ChatService {
 public:
  ChatService(std::shared_ptr<const Engine> engine, SessionStore& store, std::uint64_t decoding_seed = 0);

  // {system_message?, pose_condition?} -> {session_id}
  nlohmann::json create_session(const nlohmann::json& body);
  // {text} -> {turn_index, answer_kind, text, motion_turn_index?, truncated}
  nlohmann::json post_turn(const std::string& id, const nlohmann::json& body);
  nlohmann::json get_session(const std::string& id) const;
  nlohmann::json get_motion(const std::string& id, const std::string& strategy, int window);
  void delete_session(const std::string& id);
  nlohmann::json health() const;

  const Engine& engine() const { return *engine_; }

 private:
  std::shared_ptr<const Engine> engine_;
  SessionStore& store_;
  std::uint64_t seed_;
  std::mutex cache_mu_;
  // (session, strategy, window, turn count) -> composed clip
  std::map<std::tuple<std::string, std::string, int, std::size_t>, nlohmann::json> motion_cache_;
};

struct HttpError {
  int status = 500;
  std::string code;
};
// Maps an exception to its HTTP status and error code.
HttpError classify_error(const std::exception& e);

// Routes under /v1 with permissive CORS headers.
void register_routes(httplib::Server& server, ChatService& chat);

}  // namespace mtalk::service
