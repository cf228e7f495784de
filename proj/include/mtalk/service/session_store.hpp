#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "mtalk/common/rng.hpp"
#include "mtalk/conversation/conversation.hpp"
#include "mtalk/vision/vision.hpp"

namespace mtalk::service {

inline constexpr int kSessionLogVersion = 1;

struct TurnRecord {
  std::string user_text;
  conv::Turn turn;
  std::string kind;  // "motion" or "text"
  std::string answer_text;
  bool truncated = false;
};

struct SessionSnapshot {
  std::string id;
  std::string system_message;
  std::optional<vision::VisualFeature> visual;
  std::vector<TurnRecord> turns;

  conv::Session session() const;
};

// Sessions are kept in memory and, when a directory is given, mirrored to one
// append-only JSONL event log per session that is replayed at construction.
// Each session admits one turn in flight; a second is refused with Conflict.
class SessionStore {
 public:
  explicit SessionStore(std::filesystem::path dir = {}, std::uint64_t seed = 0);

  std::string create(const std::string& system_message, std::optional<vision::VisualFeature> visual);
  SessionSnapshot get(const std::string& id) const;
  std::vector<std::string> ids() const;

  // Marks the session busy and returns its state.
  SessionSnapshot begin_turn(const std::string& id);
  // Returns the new turn's index.
  int commit_turn(const std::string& id, TurnRecord record);
  void abort_turn(const std::string& id);
  void remove(const std::string& id);

  const std::filesystem::path& dir() const { return dir_; }

 private:
  struct Entry {
    SessionSnapshot snap;
    bool busy = false;
  };
  Entry& find(const std::string& id);
  const Entry& find(const std::string& id) const;
  void append(const std::string& id, const nlohmann::json& event) const;
  void recover();

  std::filesystem::path dir_;
  mutable std::mutex mu_;
  Rng rng_;
  std::map<std::string, Entry> sessions_;
};

}  // namespace mtalk::service
