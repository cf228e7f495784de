#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "mtalk/common/error.hpp"
#include "mtalk/conversation/conversation.hpp"

using namespace mtalk;
using namespace mtalk::conv;
using motion::MotionFamily;

namespace {

const vocab::UnifiedVocab& toy_vocab() {
  static const vocab::UnifiedVocab v(
      vocab::train_text_vocab({"USER: walk ASSISTANT: ", "a person waves", "a person walks forward", "jump jump"}, 300),
      2, 64);
  return v;
}

std::vector<int> answer_text(const std::string& s) {
  auto ids = toy_vocab().encode_text(s);
  ids.push_back(toy_vocab().eos());
  return ids;
}

std::vector<int> answer_motion(const tok::MotionTokens& t) {
  auto ids = toy_vocab().motion_to_symbols(t);
  ids.push_back(toy_vocab().eos());
  return ids;
}

std::string read_golden(const std::string& name) {
  std::ifstream f(std::filesystem::path(MTALK_GOLDEN_DIR) / name, std::ios::binary);
  REQUIRE(f.good());
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::vector<DatasetClip> random_clips(int n, std::uint64_t seed) {
  Rng rng = make_rng(seed);
  std::vector<DatasetClip> out;
  for (int i = 0; i < n; ++i) {
    DatasetClip c;
    c.family = motion::all_families()[static_cast<std::size_t>(i % motion::kFamilyCount)];
    c.caption = "a person does a " + motion::family_name(c.family);
    const int len = uniform_int(rng, 10, 24);
    c.frames = 4 * len;
    c.tokens.layers.assign(2, {});
    for (auto& l : c.tokens.layers)
      for (int k = 0; k < len; ++k) l.push_back(uniform_int(rng, 0, 63));
    // Siblings share a summary so the high bucket is populated.
    c.summary.resize(6);
    for (auto& x : c.summary) x = normal(rng);
    if (i % 7 == 6) c.summary = out[static_cast<std::size_t>(i - 5)].summary, c.family = out[static_cast<std::size_t>(i - 5)].family;
    out.push_back(std::move(c));
  }
  // A near-duplicate across families keeps the medium bucket non-empty.
  out[1].summary = out[0].summary;
  out[1].summary[0] += 1.5;
  return out;
}

}  // namespace

TEST_CASE("render: single turn matches the golden file") {
  Session s;
  s.turns.push_back({toy_vocab().encode_text("walk"), answer_motion({{{5}, {9}}})});
  const auto text = render_text(s, toy_vocab());
  CHECK(text == read_golden("single_turn.txt"));
  CHECK(text.rfind("USER: walk ASSISTANT: ", 0) == 0);
}

TEST_CASE("render: three turns with system message and visual placeholder match the golden file") {
  Session s;
  s.system_message = "You guide motion.";
  s.turns.push_back({toy_vocab().encode_text("Copy the pose."), answer_motion({{{1, 3}, {2, 4}}}), true});
  s.turns.push_back({toy_vocab().encode_text("What is it?"), answer_text("a person waves")});
  s.turns.push_back({toy_vocab().encode_text("Make it a jump instead."), answer_motion({{{63}, {0}}})});
  const auto r = render_session(s, toy_vocab());
  CHECK(toy_vocab().render(r.ids) == read_golden("three_turns.txt"));

  std::size_t mask_sum = 0, answers = 0;
  for (auto m : r.loss_mask) mask_sum += m;
  for (const auto& t : s.turns) answers += t.answer_ids.size();
  CHECK(mask_sum == answers);
  // Masked-in ids are exactly the answers, in order.
  std::vector<int> picked, expected;
  for (std::size_t i = 0; i < r.ids.size(); ++i)
    if (r.loss_mask[i]) picked.push_back(r.ids[i]);
  for (const auto& t : s.turns) expected.insert(expected.end(), t.answer_ids.begin(), t.answer_ids.end());
  CHECK(picked == expected);

  const auto text = toy_vocab().render(r.ids);
  std::size_t pos = 0;
  for (int k = 0; k < 3; ++k) {
    const auto u = text.find("USER:", pos);
    const auto a = text.find("ASSISTANT:", pos);
    REQUIRE(u != std::string::npos);
    REQUIRE(a != std::string::npos);
    CHECK(u < a);
    pos = a + 1;
  }
  CHECK(text.find("USER:", pos) == std::string::npos);
}

TEST_CASE("render: prompts are the session prefix before each answer") {
  Session s;
  s.system_message = "You guide motion.";
  s.turns.push_back({toy_vocab().encode_text("Copy the pose."), answer_motion({{{1, 3}, {2, 4}}}), true});
  s.turns.push_back({toy_vocab().encode_text("What is it?"), answer_text("a person waves")});
  for (std::size_t n = 0; n < s.turns.size(); ++n) {
    Session history = s;
    history.turns.resize(n);
    Session upto = s;
    upto.turns.resize(n + 1);
    auto ids = render_prompt(history, s.turns[n].source_ids, s.turns[n].visual, toy_vocab());
    ids.insert(ids.end(), s.turns[n].answer_ids.begin(), s.turns[n].answer_ids.end());
    CHECK(ids == render_session(upto, toy_vocab()).ids);
  }
  CHECK_THROWS_AS(render_prompt(s, {}, false, toy_vocab()), InvalidArgument);
  CHECK_THROWS_AS(render_prompt(s, {toy_vocab().size()}, false, toy_vocab()), InvalidArgument);
}

TEST_CASE("render: errors and the shifted training sample") {
  Session s;
  s.turns.push_back({toy_vocab().encode_text("walk"), toy_vocab().encode_text("no end")});
  CHECK_THROWS_AS(render_session(s, toy_vocab()), InvalidArgument);
  s.turns[0].answer_ids = {toy_vocab().eos(), toy_vocab().eos()};
  CHECK_THROWS_AS(render_session(s, toy_vocab()), InvalidArgument);
  CHECK_THROWS_AS(render_session(Session{}, toy_vocab()), InvalidArgument);

  s.turns[0].answer_ids = answer_text("ok");
  const auto r = render_session(s, toy_vocab());
  const auto sample = to_sample(r, "x", {"x"}, -1);
  CHECK(sample.input_ids.size() == r.ids.size() - 1);
  CHECK(sample.target_ids.back() == toy_vocab().eos());
  CHECK(sample.loss_mask.back() == 1);
  CHECK(TrainingSample::from_json(sample.to_json()).target_ids == sample.target_ids);
}

TEST_CASE("render: distinct sessions give distinct id sequences") {
  Rng rng = make_rng(9);
  std::set<std::vector<int>> seen;
  std::set<std::vector<std::vector<int>>> sessions;
  for (int i = 0; i < 300; ++i) {
    Session s;
    const int turns = uniform_int(rng, 1, 3);
    std::vector<std::vector<int>> key;
    for (int t = 0; t < turns; ++t) {
      Turn turn;
      for (int k = uniform_int(rng, 0, 3); k > 0; --k) turn.source_ids.push_back(uniform_int(rng, 4, 259));
      turn.answer_ids = {uniform_int(rng, 4, 259), toy_vocab().eos()};
      key.push_back(turn.source_ids);
      key.push_back(turn.answer_ids);
      s.turns.push_back(turn);
    }
    if (!sessions.insert(key).second) continue;
    CHECK(seen.insert(render_session(s, toy_vocab()).ids).second);
  }
}

TEST_CASE("templates: slots, seconds formatting, unfillable slots") {
  for (const auto& t : default_templates()) CHECK_NOTHROW(t.validate());
  CHECK(default_templates().size() == kTaskCount);
  CHECK(format_seconds(64, 20) == "3.2");
  CHECK(format_seconds(120, 20) == "6");
  CHECK(format_seconds(50, 20) == "2.5");
  SlotValues s;
  s.frames = 120;
  CHECK(toy_vocab().decode_text(fill_pattern("There are [frames] frames in the motion.", s, toy_vocab())) ==
        "There are 120 frames in the motion.");
  CHECK_THROWS_AS(fill_pattern("[caption]", s, toy_vocab()), InvalidArgument);
  CHECK_THROWS_AS(fill_pattern("[motion]", s, toy_vocab()), InvalidArgument);
  TaskTemplate bad{TaskId::random_caption, {"[mood]"}, {"x"}, {}};
  CHECK_THROWS_AS(bad.validate(), InvalidArgument);
  for (const auto t : all_tasks()) CHECK(parse_task(task_name(t)) == t);
}

TEST_CASE("similarity: self, orthogonal, and brute-force bucket oracle") {
  const std::vector<double> a{1, 2, 3}, b{-2, 1, 0};
  CHECK(cosine_similarity(a, a) == doctest::Approx(1.0));
  CHECK(cosine_similarity(a, b) == doctest::Approx(0.0));

  const auto clips = random_clips(60, 3);
  const auto buckets = bucket_similar_pairs(clips);
  CHECK(!buckets.high.empty());
  CHECK(!buckets.medium.empty());

  // Oracle: z-score each channel, then classify every pair.
  const std::size_t d = clips[0].summary.size(), n = clips.size();
  std::vector<std::vector<double>> z(n, std::vector<double>(d));
  for (std::size_t c = 0; c < d; ++c) {
    double m = 0, v = 0;
    for (const auto& x : clips) m += x.summary[c];
    m /= double(n);
    for (const auto& x : clips) v += (x.summary[c] - m) * (x.summary[c] - m);
    const double sd = std::sqrt(v / double(n));
    for (std::size_t i = 0; i < n; ++i) z[i][c] = (clips[i].summary[c] - m) / sd;
  }
  std::set<std::pair<int, int>> high, medium;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      double ab = 0, aa = 0, bb = 0;
      for (std::size_t c = 0; c < d; ++c) ab += z[i][c] * z[j][c], aa += z[i][c] * z[i][c], bb += z[j][c] * z[j][c];
      const double s = ab / std::sqrt(aa * bb);
      if (clips[i].family == clips[j].family && s >= 0.95) high.insert({int(i), int(j)});
      if (clips[i].family != clips[j].family && s >= 0.5 && s < 0.95) medium.insert({int(i), int(j)});
    }
  std::set<std::pair<int, int>> got_high, got_medium;
  for (const auto& p : buckets.high) got_high.insert({p.a, p.b});
  for (const auto& p : buckets.medium) got_medium.insert({p.a, p.b});
  CHECK(got_high == high);
  CHECK(got_medium == medium);

  CHECK_THROWS_AS(bucket_similar_pairs(std::vector<DatasetClip>(clips.begin(), clips.begin() + 1)), InvalidArgument);
}

TEST_CASE("edit tasks: length edits pick the sibling, family edits name both families") {
  std::vector<DatasetClip> clips(2);
  clips[0].family = clips[1].family = MotionFamily::walk;
  clips[0].frames = 64;
  clips[1].frames = 128;
  clips[0].tokens = {{std::vector<int>(16, 1), std::vector<int>(16, 2)}};
  clips[1].tokens = {{std::vector<int>(32, 3), std::vector<int>(32, 4)}};
  Buckets b;
  b.high.push_back({0, 1, 0.99});
  const auto edits = make_edit_tasks(b, clips);
  REQUIRE(edits.size() == 2);
  const auto& ext = edits[0].instruction.find("onger") != std::string::npos ||
                            edits[0].instruction.find("Extend") != std::string::npos
                        ? edits[0]
                        : edits[1];
  CHECK(ext.target == clips[1].tokens);
  CHECK(ext.source == clips[0].tokens);

  for (int v = 0; v < 3; ++v) {
    const auto s = edit_instruction(MotionFamily::walk, MotionFamily::jump, v);
    CHECK(s.find("walk") != std::string::npos);
    CHECK(s.find("jump") != std::string::npos);
  }

  const auto rc = random_clips(60, 4);
  for (const auto& e : make_edit_tasks(bucket_similar_pairs(rc), rc)) {
    Session s;
    SlotValues sv;
    sv.motion = &e.source;
    auto src = toy_vocab().encode_text(e.instruction + " ");
    const auto sym = toy_vocab().motion_to_symbols(e.source);
    src.insert(src.end(), sym.begin(), sym.end());
    s.turns.push_back({src, answer_motion(e.target)});
    CHECK_NOTHROW(render_session(s, toy_vocab()));
  }
}

TEST_CASE("dataset: coverage, turn bound, true lengths, reproducibility") {
  auto clips = random_clips(60, 5);
  clips[0].frames = 120;
  clips[0].tokens = {{std::vector<int>(30, 7), std::vector<int>(30, 8)}};
  DatasetConfig cfg;
  cfg.size = 500;
  cfg.seed = 17;
  cfg.max_tokens = 1024;
  const auto data = build_dataset(clips, default_templates(), toy_vocab(), cfg);
  REQUIRE(data.size() == 500);
  std::set<std::string> tasks;
  int multi = 0;
  for (const auto& s : data) {
    for (const auto& t : s.turn_tasks) tasks.insert(t);
    CHECK(s.turns >= 1);
    CHECK(s.turns <= 10);
    CHECK(int(s.input_ids.size()) + 1 <= cfg.max_tokens);
    multi += s.turns > 1;
    CHECK(s.target_ids.back() == toy_vocab().eos());
  }
  CHECK(tasks.size() == kTaskCount);
  CHECK(multi > 100);
  for (int i = 0; i < kTaskCount; ++i) CHECK(data[static_cast<std::size_t>(i)].task == task_name(all_tasks()[i]));

  // Motion-to-length answers state the clip's true frame count.
  bool saw120 = false;
  for (const auto& s : data) {
    const auto text = toy_vocab().render(s.target_ids);
    if (text.find("There are 120 frames in the motion.</s>") != std::string::npos) saw120 = true;
    for (std::size_t p = text.find("There are "); p != std::string::npos; p = text.find("There are ", p + 1)) {
      const int n = std::stoi(text.substr(p + 10));
      bool exists = false;
      for (const auto& c : clips) exists |= c.frames == n;
      CHECK(exists);
    }
  }
  CHECK(saw120);

  const auto dir = std::filesystem::temp_directory_path();
  write_jsonl(dir / "mtalk_ds_a.jsonl", data);
  write_jsonl(dir / "mtalk_ds_b.jsonl", build_dataset(clips, default_templates(), toy_vocab(), cfg));
  auto slurp = [](const std::filesystem::path& p) {
    std::ifstream f(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(f), {});
  };
  CHECK(slurp(dir / "mtalk_ds_a.jsonl") == slurp(dir / "mtalk_ds_b.jsonl"));
  CHECK(read_jsonl(dir / "mtalk_ds_a.jsonl").size() == 500);
  std::filesystem::remove(dir / "mtalk_ds_a.jsonl");
  std::filesystem::remove(dir / "mtalk_ds_b.jsonl");

  const auto pre = pretrain_subset(data);
  CHECK(!pre.empty());
  for (const auto& s : pre) CHECK(s.turns == 1);

  CHECK_THROWS_AS(build_dataset({}, default_templates(), toy_vocab(), cfg), InvalidArgument);
  auto missing = default_templates();
  missing.pop_back();
  CHECK_THROWS_AS(build_dataset(clips, missing, toy_vocab(), cfg), InvalidArgument);
}
