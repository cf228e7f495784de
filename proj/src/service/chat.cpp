#include "mtalk/service/chat.hpp"

#include <httplib.h>

#include "mtalk/common/error.hpp"

namespace mtalk::service {

using nlohmann::json;

ChatService::ChatService(std::shared_ptr<const Engine> engine, SessionStore& store, std::uint64_t decoding_seed)
    : engine_(std::move(engine)), store_(store), seed_(decoding_seed) {
  if (!engine_) throw InvalidArgument("chat service needs an engine");
}

json ChatService::create_session(const json& body) {
  if (!body.is_object()) throw InvalidArgument("request body must be a JSON object");
  std::string system = conv::default_system_message();
  if (body.contains("system_message")) {
    if (!body["system_message"].is_string()) throw InvalidArgument("system_message must be a string");
    system = body["system_message"].get<std::string>();
  }
  std::optional<vision::VisualFeature> visual;
  if (body.contains("pose_condition") && !body["pose_condition"].is_null())
    visual = engine_->parse_pose_condition(body["pose_condition"]);
  return {{"session_id", store_.create(system, std::move(visual))}};
}

json ChatService::post_turn(const std::string& id, const json& body) {
  if (!body.is_object() || !body.contains("text") || !body["text"].is_string())
    throw InvalidArgument("body must be {\"text\": string}");
  const auto text = body["text"].get<std::string>();
  if (text.empty()) throw InvalidArgument("text must not be empty");

  auto snap = store_.begin_turn(id);
  Answer a;
  try {
    const auto seed = derive_seed(seed_, snap.turns.size());
    a = engine_->respond(snap.session(), text, snap.visual ? &*snap.visual : nullptr, seed);
  } catch (...) {
    store_.abort_turn(id);
    throw;
  }
  int motion_index = 0;
  for (const auto& t : snap.turns) motion_index += t.kind == "motion";
  TurnRecord r{text, a.turn, a.kind, a.text, a.truncated};
  const int index = store_.commit_turn(id, std::move(r));
  json out{{"turn_index", index}, {"answer_kind", a.kind}, {"text", a.text}, {"truncated", a.truncated}};
  if (a.kind == "motion") {
    out["motion_turn_index"] = motion_index;
    int steps = 0;
    for (const auto& m : a.motions) steps += m.length();
    out["motion_frames"] = steps * engine_->tokenizer().config().downsample;
  }
  return out;
}

json ChatService::get_session(const std::string& id) const {
  const auto snap = store_.get(id);
  json turns = json::array();
  int motion_index = 0;
  for (std::size_t i = 0; i < snap.turns.size(); ++i) {
    const auto& t = snap.turns[i];
    json tj{{"turn_index", i},
            {"user_text", t.user_text},
            {"answer_kind", t.kind},
            {"text", t.answer_text},
            {"truncated", t.truncated},
            {"answer", engine_->vocab().render(t.turn.answer_ids)}};
    if (t.kind == "motion") tj["motion_turn_index"] = motion_index++;
    turns.push_back(std::move(tj));
  }
  return {{"session_id", snap.id},
          {"system_message", snap.system_message},
          {"pose_condition", snap.visual.has_value()},
          {"turns", std::move(turns)}};
}

json ChatService::get_motion(const std::string& id, const std::string& strategy, int window) {
  const auto s = comp::parse_strategy(strategy, window);
  const auto snap = store_.get(id);
  const auto key = std::make_tuple(id, comp::strategy_name(s), s.window, snap.turns.size());
  {
    std::lock_guard lock(cache_mu_);
    if (auto it = motion_cache_.find(key); it != motion_cache_.end()) return it->second;
  }
  std::vector<tok::MotionTokens> segments;
  json turn_indices = json::array();
  for (std::size_t i = 0; i < snap.turns.size(); ++i) {
    for (auto& m : engine_->vocab().extract_motion_spans(snap.turns[i].turn.answer_ids)) {
      segments.push_back(std::move(m));
      turn_indices.push_back(i);
    }
  }
  if (segments.empty()) throw NotFound("session '" + id + "' has no motion yet");
  auto out = engine_->compose(segments, s).to_json();
  out["turn_indices"] = std::move(turn_indices);
  std::lock_guard lock(cache_mu_);
  motion_cache_[key] = out;
  return out;
}

void ChatService::delete_session(const std::string& id) {
  store_.remove(id);
  std::lock_guard lock(cache_mu_);
  std::erase_if(motion_cache_, [&](const auto& kv) { return std::get<0>(kv.first) == id; });
}

json ChatService::health() const {
  return {{"status", "ok"},
          {"vocab", engine_->vocab().size()},
          {"fps", engine_->fps()},
          {"joints", engine_->skeleton().joint_count()},
          {"visual", engine_->has_visual()}};
}

HttpError classify_error(const std::exception& e) {
  if (dynamic_cast<const NotFound*>(&e)) return {404, "not_found"};
  if (dynamic_cast<const Conflict*>(&e)) return {409, "conflict"};
  if (dynamic_cast<const ContextOverflow*>(&e)) return {422, "context_overflow"};
  if (dynamic_cast<const InvalidArgument*>(&e) || dynamic_cast<const FormatError*>(&e) ||
      dynamic_cast<const json::exception*>(&e))
    return {400, "bad_request"};
  return {500, "internal"};
}

namespace {

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

template <typename F>
httplib::Server::Handler guarded(F f) {
  return [f](const httplib::Request& req, httplib::Response& res) {
    try {
      f(req, res);
    } catch (const std::exception& e) {
      const auto err = classify_error(e);
      send_json(res, err.status, {{"error", {{"code", err.code}, {"message", e.what()}}}});
    }
  };
}

json parse_body(const httplib::Request& req) {
  if (req.body.empty()) return json::object();
  try {
    return json::parse(req.body);
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("malformed JSON body: ") + e.what());
  }
}

int int_param(const httplib::Request& req, const std::string& name, int fallback) {
  if (!req.has_param(name)) return fallback;
  const auto v = req.get_param_value(name);
  try {
    std::size_t used = 0;
    const int x = std::stoi(v, &used);
    if (used != v.size()) throw InvalidArgument("");
    return x;
  } catch (const std::exception&) {
    throw InvalidArgument("query parameter " + name + " must be an integer");
  }
}

}  // namespace

void register_routes(httplib::Server& server, ChatService& chat) {
  server.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                              {"Access-Control-Allow-Methods", "GET, POST, DELETE, OPTIONS"},
                              {"Access-Control-Allow-Headers", "Content-Type"}});
  server.Options(R"(/v1/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

  server.Get("/v1/health", guarded([&chat](const httplib::Request&, httplib::Response& res) {
               send_json(res, 200, chat.health());
             }));
  server.Post("/v1/sessions", guarded([&chat](const httplib::Request& req, httplib::Response& res) {
                send_json(res, 201, chat.create_session(parse_body(req)));
              }));
  server.Post(R"(/v1/sessions/([0-9a-zA-Z_-]+)/turns)",
              guarded([&chat](const httplib::Request& req, httplib::Response& res) {
                send_json(res, 200, chat.post_turn(req.matches[1], parse_body(req)));
              }));
  server.Get(R"(/v1/sessions/([0-9a-zA-Z_-]+)/motion)",
             guarded([&chat](const httplib::Request& req, httplib::Response& res) {
               const auto strategy = req.has_param("strategy") ? req.get_param_value("strategy") : "joint";
               send_json(res, 200, chat.get_motion(req.matches[1], strategy, int_param(req, "window", 4)));
             }));
  server.Get(R"(/v1/sessions/([0-9a-zA-Z_-]+))", guarded([&chat](const httplib::Request& req, httplib::Response& res) {
               send_json(res, 200, chat.get_session(req.matches[1]));
             }));
  server.Delete(R"(/v1/sessions/([0-9a-zA-Z_-]+))",
                guarded([&chat](const httplib::Request& req, httplib::Response& res) {
                  chat.delete_session(req.matches[1]);
                  res.status = 204;
                }));
  server.set_error_handler([](const httplib::Request&, httplib::Response& res) {
    if (!res.body.empty()) return;
    const bool missing = res.status == 404;
    send_json(res, res.status,
              {{"error", {{"code", missing ? "not_found" : "bad_request"}, {"message", missing ? "no such route" : "request rejected"}}}});
  });
}

}  // namespace mtalk::service
