#include <doctest.h>

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <filesystem>
#include <fstream>
#include <future>
#include <thread>

#include "mtalk/common/error.hpp"
#include "mtalk/common/rng.hpp"
#include "mtalk/service/chat.hpp"
#include "mtalk/service/config.hpp"
#include "mtalk/service/engine.hpp"
#include "mtalk/service/pipeline.hpp"

// After Eigen: glibc's resolver header defines a macro named _res.
#include <httplib.h>

using namespace mtalk;
using namespace mtalk::service;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("mtalk_test_service_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

const vocab::UnifiedVocab& shared_vocab() {
  static const vocab::UnifiedVocab v = [] {
    const auto corpus = motion::synth_corpus(1, 20, motion::Skeleton::toy5());
    return vocab::UnifiedVocab(vocab::train_text_vocab(vocab_training_text(corpus, "You are a helper."), 300), 2, 16);
  }();
  return v;
}

tok::MotionTokenizer small_tokenizer() {
  tok::TokenizerConfig c;
  c.codebook_size = 16;
  c.code_dim = 16;
  c.width = 32;
  return tok::MotionTokenizer(c, 3);
}

// Answers every prompt with `steps` motion timesteps followed by </s>.
std::vector<int> motion_answer(const vocab::UnifiedVocab& v, int steps, std::uint64_t seed) {
  Rng rng = make_rng(seed);
  tok::MotionTokens m;
  m.layers.resize(2);
  for (int t = 0; t < steps; ++t)
    for (auto& l : m.layers) l.push_back(uniform_int(rng, 0, 15));
  auto ids = v.motion_to_symbols(m);
  ids.push_back(v.eos());
  return ids;
}

EngineParts parts_with(GenerateFn gen, int context = 512, int max_new = 64) {
  return {shared_vocab(), small_tokenizer(), motion::Skeleton::toy5(), 20.0, context, max_new, std::nullopt, std::move(gen)};
}

std::shared_ptr<const Engine> motion_engine(int steps = 6) {
  return std::make_shared<Engine>(parts_with([steps](const std::vector<int>&, const ad::Tensor<float>*, std::uint64_t s) {
    return motion_answer(shared_vocab(), steps, s);
  }));
}

struct TestServer {
  httplib::Server server;
  int port = 0;
  std::thread thread;

  explicit TestServer(ChatService& chat) {
    register_routes(server, chat);
    port = server.bind_to_any_port("127.0.0.1");
    thread = std::thread([this] { server.listen_after_bind(); });
    server.wait_until_ready();
  }
  ~TestServer() {
    server.stop();
    thread.join();
  }
  httplib::Client client() const {
    httplib::Client c("127.0.0.1", port);
    c.set_read_timeout(30, 0);
    return c;
  }
};

json body_of(const httplib::Result& r) {
  REQUIRE(r);
  return json::parse(r->body);
}

}  // namespace

// ---- config -------------------------------------------------------------------------

TEST_CASE("config: parse, sections, comments and overrides") {
  auto cfg = parse_config(R"(
seed = 7  # global
skeleton = "toy5"
[paths]
work_dir = "/tmp/w"
[lm]
layers = 2
dim = 64
[data]
system_message = "Hi # not a comment"
high_similarity = 0.9
[decoding]
mode = "top_k"
)");
  cfg.finalize();
  CHECK(cfg.seed == 7);
  CHECK(cfg.lm.model.layers == 2);
  CHECK(cfg.lm.model.dim == 64);
  CHECK(cfg.paths.corpus == fs::path("/tmp/w/corpus"));
  CHECK(cfg.data.dataset.system_message == "Hi # not a comment");
  CHECK(cfg.data.dataset.similarity.tau_high == 0.9);
  CHECK(cfg.decoding.mode == lm::DecodingParams::Mode::top_k);
  CHECK(cfg.tokenizer.train.seed == 7);
  CHECK(cfg.data.dataset.seed == 7);
  CHECK(cfg.tokenizer.model.n_joints == 5);

  apply_override(cfg, "lm.heads=8");
  CHECK(cfg.lm.model.heads == 8);
  CHECK_THROWS_AS(apply_override(cfg, "lm.nope=1"), FormatError);
  CHECK_THROWS_AS(apply_override(cfg, "lm.heads"), FormatError);
  CHECK_THROWS_AS(apply_override(cfg, "lm.heads=eight"), FormatError);
  CHECK_THROWS_AS(parse_config("[lm]\nwidth = 3\n"), FormatError);
  CHECK_THROWS_AS(parse_config("[lm\n"), FormatError);
  CHECK_THROWS_AS(parse_config("vision.enabled\n"), FormatError);

  AppConfig bad;
  bad.skeleton = "octopus";
  CHECK_THROWS_AS(bad.finalize(), InvalidArgument);
}

TEST_CASE("config: text form round-trips every key") {
  AppConfig cfg;
  cfg.seed = 42;
  cfg.lm.lr = 3.3e-4;
  cfg.data.dataset.system_message = "line one\nwith \"quotes\"";
  cfg.vision.arch = vision::Arch::perceiver;
  cfg.finalize();
  const auto text = config_to_text(cfg);
  auto back = parse_config(text);
  back.finalize();
  CHECK(config_to_text(back) == text);
  CHECK(back.data.dataset.system_message == cfg.data.dataset.system_message);
  CHECK(back.vision.arch == vision::Arch::perceiver);
}

// ---- engine -------------------------------------------------------------------------

TEST_CASE("engine: motion and text answers, eos handling") {
  const auto& v = shared_vocab();
  const auto e = motion_engine(5);
  conv::Session h;
  h.system_message = "You are a helper.";
  const auto a = e->respond(h, "Create a motion that shows a person waves.", nullptr, 1);
  CHECK(a.kind == "motion");
  REQUIRE(a.motions.size() == 1);
  CHECK(a.motions[0].length() == 5);
  CHECK(a.turn.answer_ids.back() == v.eos());
  CHECK(!a.truncated);

  // Trailing ids after </s> are dropped; a missing </s> is appended.
  Engine text_engine(parts_with([&v](const std::vector<int>&, const ad::Tensor<float>*, std::uint64_t) {
    auto ids = v.encode_text("a person walks");
    ids.push_back(v.eos());
    ids.push_back(v.encode_text("x")[0]);
    return ids;
  }));
  const auto t = text_engine.respond(h, "Describe it.", nullptr, 0);
  CHECK(t.kind == "text");
  CHECK(t.text == "a person walks");
  CHECK(std::count(t.turn.answer_ids.begin(), t.turn.answer_ids.end(), v.eos()) == 1);

  Engine runaway(parts_with([&v](const std::vector<int>&, const ad::Tensor<float>*, std::uint64_t) {
    return v.encode_text("and then");
  }));
  const auto r = runaway.respond(h, "Describe it.", nullptr, 0);
  CHECK(r.truncated);
  CHECK(r.turn.answer_ids.back() == v.eos());
  h.turns.push_back(r.turn);
  h.validate(v);

  // The prompt handed to the generator is the session rendering before the answer.
  std::vector<int> seen;
  Engine spy(parts_with([&](const std::vector<int>& p, const ad::Tensor<float>*, std::uint64_t) {
    seen = p;
    return std::vector<int>{v.eos()};
  }));
  spy.respond(h, "Again.", nullptr, 0);
  auto full = h;
  full.turns.push_back({v.encode_text("Again."), {v.eos()}, false});
  const auto rendered = conv::render_session(full, v).ids;
  CHECK(seen == std::vector<int>(rendered.begin(), rendered.end() - 1));
}

TEST_CASE("engine: context budget and argument checks") {
  Engine small(parts_with([](const std::vector<int>&, const ad::Tensor<float>*, std::uint64_t) {
    return std::vector<int>{2};
  }, 60, 30));
  conv::Session h;
  CHECK_NOTHROW(small.respond(h, "hi", nullptr, 0));
  CHECK_THROWS_AS(small.respond(h, "Create a motion that shows a person walks forward slowly.", nullptr, 0),
                  ContextOverflow);
  CHECK_THROWS_AS(small.respond(h, "", nullptr, 0), InvalidArgument);
  vision::VisualFeature f;
  f.rows = ad::Tensor<float>({1, 512});
  CHECK_THROWS_AS(small.respond(h, "hi", &f, 0), InvalidArgument);
  CHECK_THROWS_AS(small.parse_pose_condition(json{{"pose", {{0, 1, 0}}}}), InvalidArgument);

  auto bad = parts_with([](const std::vector<int>&, const ad::Tensor<float>*, std::uint64_t) { return std::vector<int>{}; });
  bad.skeleton = motion::Skeleton::humanoid22();
  CHECK_THROWS_AS(Engine(std::move(bad)), InvalidArgument);
}

TEST_CASE("engine: pose conditions reach the generator as visual rows") {
  auto p = parts_with([](const std::vector<int>& prompt, const ad::Tensor<float>* vis, std::uint64_t) {
    const auto& v = shared_vocab();
    const bool has_img = std::count(prompt.begin(), prompt.end(), v.img()) == 1;
    return has_img && vis && vis->rows() == 2 ? motion_answer(v, 3, 0) : std::vector<int>{v.eos()};
  });
  vision::VisualEncoderConfig vc;
  vc.model_dim = 16;
  p.visual = vision::VisualEncoder(vc, 1);
  Engine e(std::move(p));
  const auto f = e.parse_pose_condition(json{{"poses", {{{0, 1, 0}, {0.2, 0.1, 0}}, {{0, 1, 0.1}, {0.2, 0.1, 0.1}}}}});
  CHECK(f.frames() == 2);
  const auto a = e.respond({}, "Recreate the motion shown in the image.", &f, 0);
  CHECK(a.kind == "motion");
  CHECK(a.turn.visual);
  CHECK_THROWS_AS(e.parse_pose_condition(json{{"pose", {{0, 1}}}}), InvalidArgument);
  CHECK_THROWS_AS(e.parse_pose_condition(json{{"pose", {{0, 1, 0}}}, {"poses", json::array()}}), InvalidArgument);
  CHECK_THROWS_AS(e.parse_pose_condition(json{{"feature", {{"provider", "x"}}}}), InvalidArgument);
}

TEST_CASE("engine: composed clip frames and seams") {
  const auto e = motion_engine();
  const auto& v = shared_vocab();
  const auto a = v.extract_motion_spans(motion_answer(v, 5, 1));
  const auto b = v.extract_motion_spans(motion_answer(v, 3, 2));
  for (const auto* s : {"independent", "past", "joint"}) {
    const auto m = e->compose({a[0], b[0]}, comp::parse_strategy(s, 2));
    CHECK(m.positions.frames == 32);
    CHECK(m.seams == std::vector<int>{20});
    const auto j = m.to_json();
    CHECK(j["frames"].size() == 32);
    CHECK(j["frames"][0].size() == 15);
    CHECK(j["parents"].size() == 5);
  }
}

// ---- session store --------------------------------------------------------------------

TEST_CASE("store: turns, conflicts and recovery from the event log") {
  const auto dir = temp_dir("store");
  const auto& v = shared_vocab();
  std::string a, b;
  {
    SessionStore s(dir, 3);
    a = s.create("sys", std::nullopt);
    vision::VisualFeature f;
    f.rows = ad::Tensor<float>({1, 4}, {1, 0, 0, 0.5f});
    f.provider = "test";
    b = s.create("other", f);
    CHECK(a != b);
    s.begin_turn(a);
    CHECK_THROWS_AS(s.begin_turn(a), Conflict);
    CHECK_THROWS_AS(s.remove(a), Conflict);
    CHECK(s.commit_turn(a, {"hello", {v.encode_text("hello"), {v.eos()}, false}, "text", "", false}) == 0);
    s.begin_turn(a);
    s.abort_turn(a);
    s.begin_turn(a);
    CHECK(s.commit_turn(a, {"move", {v.encode_text("move"), motion_answer(v, 2, 0), false}, "motion", "", false}) == 1);
    CHECK_THROWS_AS(s.get("missing"), NotFound);
    const auto c = s.create("gone", std::nullopt);
    s.remove(c);
    CHECK_THROWS_AS(s.get(c), NotFound);
  }
  // A torn trailing line is ignored.
  { std::ofstream(dir / (a + ".jsonl"), std::ios::app) << "{\"format_version\": 1, \"ev"; }
  SessionStore r(dir, 3);
  CHECK(r.ids().size() == 2);
  const auto sa = r.get(a);
  REQUIRE(sa.turns.size() == 2);
  CHECK(sa.turns[1].kind == "motion");
  CHECK(sa.turns[1].turn.answer_ids == motion_answer(v, 2, 0));
  CHECK(sa.session().turns.size() == 2);
  const auto sb = r.get(b);
  REQUIRE(sb.visual);
  CHECK(sb.visual->rows.data == std::vector<float>{1, 0, 0, 0.5f});
  // New ids never collide with recovered ones, even from the same seed.
  CHECK(r.create("x", std::nullopt) != a);

  // A corrupt line in the middle is an error.
  { std::ofstream(dir / "bad.jsonl") << "garbage\n{\"format_version\":1}\n"; }
  CHECK_THROWS_AS(SessionStore(dir, 3), FormatError);
  fs::remove_all(dir);
}

// ---- HTTP -----------------------------------------------------------------------------

TEST_CASE("http: session lifecycle, motion endpoint and error codes") {
  SessionStore store;
  ChatService chat(motion_engine(6), store);
  TestServer srv(chat);
  auto cli = srv.client();

  auto health = cli.Get("/v1/health");
  REQUIRE(health);
  CHECK(health->status == 200);
  CHECK(health->get_header_value("Access-Control-Allow-Origin") == "*");

  auto created = cli.Post("/v1/sessions", "{}", "application/json");
  REQUIRE(created);
  CHECK(created->status == 201);
  const auto id = body_of(created)["session_id"].get<std::string>();

  auto none = cli.Get("/v1/sessions/" + id + "/motion");
  CHECK(none->status == 404);

  const std::string turn_path = "/v1/sessions/" + id + "/turns";
  auto t1 = cli.Post(turn_path, R"({"text": "Create a motion that shows a person walks."})", "application/json");
  REQUIRE(t1);
  CHECK(t1->status == 200);
  const auto j1 = body_of(t1);
  CHECK(j1["answer_kind"] == "motion");
  CHECK(j1["turn_index"] == 0);
  CHECK(j1["motion_turn_index"] == 0);

  auto m1 = body_of(cli.Get("/v1/sessions/" + id + "/motion?strategy=joint"));
  CHECK(m1["frames"].size() % 4 == 0);
  CHECK(m1["frames"].size() == 24);
  CHECK(m1["seams"].empty());

  auto t2 = cli.Post(turn_path, R"({"text": "Now make it jump."})", "application/json");
  CHECK(body_of(t2)["motion_turn_index"] == 1);
  for (const auto* s : {"independent", "past", "joint"}) {
    auto m = body_of(cli.Get("/v1/sessions/" + id + "/motion?strategy=" + s + "&window=2"));
    CHECK(m["frames"].size() == 48);
    CHECK(m["seams"] == json::array({24}));
    CHECK(m["strategy"] == s);
    CHECK(m["joints"] == 5);
    CHECK(m["fps"] == 20.0);
  }

  auto hist = body_of(cli.Get("/v1/sessions/" + id));
  CHECK(hist["turns"].size() == 2);
  CHECK(hist["turns"][1]["user_text"] == "Now make it jump.");

  auto bad_strategy = cli.Get("/v1/sessions/" + id + "/motion?strategy=mixed");
  CHECK(bad_strategy->status == 400);
  CHECK(body_of(bad_strategy)["error"]["code"] == "bad_request");
  CHECK(cli.Get("/v1/sessions/" + id + "/motion?strategy=past&window=x")->status == 400);
  CHECK(cli.Post(turn_path, "{not json", "application/json")->status == 400);
  CHECK(cli.Post(turn_path, R"({"txt": "hi"})", "application/json")->status == 400);
  CHECK(cli.Post("/v1/sessions", R"({"pose_condition": {"pose": [[0,1,0]]}})", "application/json")->status == 400);

  auto missing = cli.Post("/v1/sessions/ffff/turns", R"({"text": "hi"})", "application/json");
  CHECK(missing->status == 404);
  CHECK(body_of(missing)["error"]["code"] == "not_found");

  auto pre = cli.Options("/v1/sessions");
  REQUIRE(pre);
  CHECK(pre->status == 204);
  CHECK(pre->get_header_value("Access-Control-Allow-Methods").find("POST") != std::string::npos);

  CHECK(cli.Delete("/v1/sessions/" + id)->status == 204);
  CHECK(cli.Get("/v1/sessions/" + id)->status == 404);
}

TEST_CASE("http: context overflow is 422") {
  SessionStore store;
  ChatService chat(std::make_shared<Engine>(parts_with(
                       [](const std::vector<int>&, const ad::Tensor<float>*, std::uint64_t s) {
                         return motion_answer(shared_vocab(), 4, s);
                       },
                       200, 64)),
                   store);
  TestServer srv(chat);
  auto cli = srv.client();
  const auto id = body_of(cli.Post("/v1/sessions", R"({"system_message": ""})", "application/json"))["session_id"]
                      .get<std::string>();
  const std::string path = "/v1/sessions/" + id + "/turns";
  int code = 200, turns = 0;
  while (code == 200 && turns < 20) {
    auto r = cli.Post(path, R"({"text": "Create a motion that shows a person waves."})", "application/json");
    code = r->status;
    if (code == 200) ++turns;
    else CHECK(body_of(r)["error"]["code"] == "context_overflow");
  }
  CHECK(code == 422);
  CHECK(turns >= 1);
  // The refused turn was not recorded and the session is usable again.
  CHECK(body_of(cli.Get("/v1/sessions/" + id))["turns"].size() == static_cast<std::size_t>(turns));
  CHECK(cli.Post(path, R"({"text": "hi"})", "application/json")->status != 409);
}

TEST_CASE("http: a second turn while one is in flight is 409") {
  std::mutex mu;
  std::condition_variable cv;
  bool entered = false, release = false;
  SessionStore store;
  ChatService chat(std::make_shared<Engine>(parts_with([&](const std::vector<int>&, const ad::Tensor<float>*,
                                                           std::uint64_t s) {
                     std::unique_lock lock(mu);
                     entered = true;
                     cv.notify_all();
                     cv.wait(lock, [&] { return release; });
                     return motion_answer(shared_vocab(), 2, s);
                   })),
                   store);
  TestServer srv(chat);
  auto c0 = srv.client();
  const auto id = body_of(c0.Post("/v1/sessions", "{}", "application/json"))["session_id"].get<std::string>();
  const std::string path = "/v1/sessions/" + id + "/turns";

  auto first = std::async(std::launch::async, [&] {
    auto c = srv.client();
    return c.Post(path, R"({"text": "one"})", "application/json")->status;
  });
  {
    std::unique_lock lock(mu);
    REQUIRE(cv.wait_for(lock, std::chrono::seconds(10), [&] { return entered; }));
  }
  auto c1 = srv.client();
  auto second = c1.Post(path, R"({"text": "two"})", "application/json");
  REQUIRE(second);
  CHECK(second->status == 409);
  CHECK(body_of(second)["error"]["code"] == "conflict");
  CHECK(c1.Delete("/v1/sessions/" + id)->status == 409);
  {
    std::lock_guard lock(mu);
    release = true;
  }
  cv.notify_all();
  CHECK(first.get() == 200);
  CHECK(body_of(c1.Get("/v1/sessions/" + id))["turns"].size() == 1);
}

TEST_CASE("error classification") {
  CHECK(classify_error(NotFound("x")).status == 404);
  CHECK(classify_error(Conflict("x")).status == 409);
  CHECK(classify_error(ContextOverflow("x")).status == 422);
  CHECK(classify_error(InvalidArgument("x")).status == 400);
  CHECK(classify_error(FormatError("x")).status == 400);
  CHECK(classify_error(std::runtime_error("x")).status == 500);
}

TEST_CASE("planar root speed from features") {
  motion::MotionFeatures f(5, 4);
  for (int t = 0; t < 4; ++t) {
    f.at(t, motion::FeatureLayout::root_vel_x) = 0.03;
    f.at(t, motion::FeatureLayout::root_vel_z) = 0.04;
  }
  CHECK(planar_root_speed(f, 20.0) == doctest::Approx(1.0));
  CHECK_THROWS_AS(planar_root_speed(motion::MotionFeatures(5, 0), 20.0), InvalidArgument);
}

TEST_CASE("fps: prompts carry the system message and every timestep counts l frames") {
  const auto& v = shared_vocab();
  const auto sys = v.encode_text("Be brief.");
  Engine e(parts_with([&](const std::vector<int>& p, const ad::Tensor<float>*, std::uint64_t s) {
    const bool has_sys = p.size() >= sys.size() && std::equal(sys.begin(), sys.end(), p.begin());
    return has_sys ? motion_answer(v, 6, s) : std::vector<int>{v.eos()};
  }));
  double now = 0;
  const auto r = measure_fps(e, "Be brief.", {"a person walks"}, 3, [&] { return now += 0.5; });
  const int l = e.tokenizer().config().downsample;
  CHECK(r.frames == 3 * 6 * l);
  CHECK(r.fps == doctest::Approx(3 * 6 * l / 1.5));
  CHECK_THROWS(measure_fps(e, "", {"a person walks"}, 1));
}
