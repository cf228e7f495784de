#include "mtalk/service/session_store.hpp"

#include <cstdio>
#include <fstream>

#include "mtalk/common/error.hpp"

namespace mtalk::service {

namespace fs = std::filesystem;
using nlohmann::json;

conv::Session SessionSnapshot::session() const {
  conv::Session s;
  s.system_message = system_message;
  for (const auto& t : turns) s.turns.push_back(t.turn);
  return s;
}

namespace {

json turn_event(int index, const TurnRecord& r) {
  return {{"format_version", kSessionLogVersion},
          {"event", "turn"},
          {"index", index},
          {"user_text", r.user_text},
          {"source_ids", r.turn.source_ids},
          {"answer_ids", r.turn.answer_ids},
          {"visual", r.turn.visual},
          {"kind", r.kind},
          {"answer_text", r.answer_text},
          {"truncated", r.truncated}};
}

TurnRecord turn_from_event(const json& e) {
  TurnRecord r;
  r.user_text = e.at("user_text").get<std::string>();
  r.turn.source_ids = e.at("source_ids").get<std::vector<int>>();
  r.turn.answer_ids = e.at("answer_ids").get<std::vector<int>>();
  r.turn.visual = e.at("visual").get<bool>();
  r.kind = e.at("kind").get<std::string>();
  r.answer_text = e.at("answer_text").get<std::string>();
  r.truncated = e.value("truncated", false);
  return r;
}

}  // namespace

SessionStore::SessionStore(fs::path dir, std::uint64_t seed) : dir_(std::move(dir)), rng_(make_rng(seed, 0x5e55)) {
  if (dir_.empty()) return;
  fs::create_directories(dir_);
  recover();
}

void SessionStore::recover() {
  for (const auto& f : fs::directory_iterator(dir_)) {
    if (f.path().extension() != ".jsonl") continue;
    std::ifstream in(f.path());
    std::vector<std::string> lines;
    for (std::string line; std::getline(in, line);)
      if (!line.empty()) lines.push_back(line);
    std::optional<Entry> e;
    bool deleted = false;
    for (std::size_t i = 0; i < lines.size(); ++i) {
      json ev;
      try {
        ev = json::parse(lines[i]);
      } catch (const json::exception&) {
        // A torn final line is what an interrupted append leaves behind.
        if (i + 1 == lines.size()) break;
        throw FormatError(f.path().string() + ": unreadable event on line " + std::to_string(i + 1));
      }
      try {
        if (ev.at("format_version").get<int>() != kSessionLogVersion)
          throw FormatError(f.path().string() + ": unsupported format_version");
        const auto kind = ev.at("event").get<std::string>();
        if (kind == "create") {
          e.emplace();
          e->snap.id = ev.at("id").get<std::string>();
          e->snap.system_message = ev.at("system_message").get<std::string>();
          if (!ev.at("visual").is_null()) e->snap.visual = vision::feature_from_json(ev["visual"]);
        } else if (kind == "turn") {
          if (!e) throw FormatError(f.path().string() + ": turn before create");
          if (ev.at("index").get<std::size_t>() != e->snap.turns.size())
            throw FormatError(f.path().string() + ": turn index out of sequence");
          e->snap.turns.push_back(turn_from_event(ev));
        } else if (kind == "delete") {
          deleted = true;
        } else {
          throw FormatError(f.path().string() + ": unknown event '" + kind + "'");
        }
      } catch (const json::exception& x) {
        throw FormatError(f.path().string() + ": " + x.what());
      }
    }
    if (e && !deleted) sessions_.emplace(e->snap.id, std::move(*e));
  }
}

void SessionStore::append(const std::string& id, const json& event) const {
  if (dir_.empty()) return;
  std::ofstream out(dir_ / (id + ".jsonl"), std::ios::app);
  out << event.dump() << '\n';
  out.flush();
  if (!out) throw std::runtime_error("cannot write session log for " + id);
}

SessionStore::Entry& SessionStore::find(const std::string& id) {
  auto it = sessions_.find(id);
  if (it == sessions_.end()) throw NotFound("no session '" + id + "'");
  return it->second;
}

const SessionStore::Entry& SessionStore::find(const std::string& id) const {
  auto it = sessions_.find(id);
  if (it == sessions_.end()) throw NotFound("no session '" + id + "'");
  return it->second;
}

std::string SessionStore::create(const std::string& system_message, std::optional<vision::VisualFeature> visual) {
  std::lock_guard lock(mu_);
  std::string id;
  do {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(rng_()));
    id = buf;
  } while (sessions_.count(id) || (!dir_.empty() && fs::exists(dir_ / (id + ".jsonl"))));
  Entry e;
  e.snap.id = id;
  e.snap.system_message = system_message;
  e.snap.visual = std::move(visual);
  append(id, {{"format_version", kSessionLogVersion},
              {"event", "create"},
              {"id", id},
              {"system_message", system_message},
              {"visual", e.snap.visual ? vision::feature_to_json(*e.snap.visual) : json(nullptr)}});
  sessions_.emplace(id, std::move(e));
  return id;
}

SessionSnapshot SessionStore::get(const std::string& id) const {
  std::lock_guard lock(mu_);
  return find(id).snap;
}

std::vector<std::string> SessionStore::ids() const {
  std::lock_guard lock(mu_);
  std::vector<std::string> out;
  for (const auto& [id, e] : sessions_) out.push_back(id);
  return out;
}

SessionSnapshot SessionStore::begin_turn(const std::string& id) {
  std::lock_guard lock(mu_);
  auto& e = find(id);
  if (e.busy) throw Conflict("session '" + id + "' already has a turn in progress");
  e.busy = true;
  return e.snap;
}

int SessionStore::commit_turn(const std::string& id, TurnRecord record) {
  std::lock_guard lock(mu_);
  auto& e = find(id);
  const int index = static_cast<int>(e.snap.turns.size());
  e.busy = false;
  append(id, turn_event(index, record));
  e.snap.turns.push_back(std::move(record));
  return index;
}

void SessionStore::abort_turn(const std::string& id) {
  std::lock_guard lock(mu_);
  auto it = sessions_.find(id);
  if (it != sessions_.end()) it->second.busy = false;
}

void SessionStore::remove(const std::string& id) {
  std::lock_guard lock(mu_);
  auto& e = find(id);
  if (e.busy) throw Conflict("session '" + id + "' has a turn in progress");
  append(id, {{"format_version", kSessionLogVersion}, {"event", "delete"}, {"id", id}});
  sessions_.erase(id);
}

}  // namespace mtalk::service
