#include "mtalk/conversation/conversation.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>

#include "mtalk/common/error.hpp"
#include "mtalk/common/rng.hpp"

namespace mtalk::conv {

using motion::MotionFamily;
using vocab::UnifiedVocab;
using nlohmann::json;

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw InvalidArgument(msg);
}

const std::vector<std::pair<TaskId, const char*>>& task_names() {
  static const std::vector<std::pair<TaskId, const char*>> names{
      {TaskId::text_to_motion, "text-to-motion"},
      {TaskId::text_to_motion_with_length, "text-to-motion-with-length"},
      {TaskId::motion_length_editing, "motion-length-editing"},
      {TaskId::length_to_motion, "length-to-motion"},
      {TaskId::random_motion, "random-motion"},
      {TaskId::motion_to_text, "motion-to-text"},
      {TaskId::motion_to_text_with_length, "motion-to-text-with-length"},
      {TaskId::motion_to_length, "motion-to-length"},
      {TaskId::caption_to_length, "caption-to-length"},
      {TaskId::length_to_caption, "length-to-caption"},
      {TaskId::random_caption, "random-caption"},
      {TaskId::motion_reasoning, "motion-reasoning"},
      {TaskId::motion_editing, "motion-editing"},
      {TaskId::image_conditioned_motion, "image-conditioned-motion"},
  };
  return names;
}

const std::vector<std::string> kSlots{"[caption]", "[motion]", "[frames]", "[seconds]", "[reasoning]", "[instruction]"};

void append(std::vector<int>& dst, const std::vector<int>& src) { dst.insert(dst.end(), src.begin(), src.end()); }

}  // namespace

const std::vector<TaskId>& all_tasks() {
  static const std::vector<TaskId> tasks = [] {
    std::vector<TaskId> t;
    for (const auto& [id, _] : task_names()) t.push_back(id);
    return t;
  }();
  return tasks;
}

std::string task_name(TaskId t) {
  for (const auto& [id, name] : task_names())
    if (id == t) return name;
  throw InvalidArgument("task_name: unknown task");
}

TaskId parse_task(const std::string& name) {
  for (const auto& [id, n] : task_names())
    if (name == n) return id;
  throw InvalidArgument("unknown task '" + name + "'");
}

bool produces_motion(TaskId t) {
  switch (t) {
    case TaskId::text_to_motion:
    case TaskId::text_to_motion_with_length:
    case TaskId::motion_length_editing:
    case TaskId::length_to_motion:
    case TaskId::random_motion:
    case TaskId::motion_editing:
    case TaskId::image_conditioned_motion: return true;
    default: return false;
  }
}

const std::string& default_system_message() {
  static const std::string msg =
      "You are a motion assistant. You read requests in English and answer with text or with motion tokens.";
  return msg;
}

// ---- sessions ---------------------------------------------------------------

void Session::validate(const UnifiedVocab& v) const {
  require(!turns.empty(), "session: no turns");
  for (std::size_t i = 0; i < turns.size(); ++i) {
    const auto& t = turns[i];
    require(!t.answer_ids.empty() && t.answer_ids.back() == v.eos(),
            "session: answer of turn " + std::to_string(i + 1) + " does not end with </s>");
    require(std::count(t.answer_ids.begin(), t.answer_ids.end(), v.eos()) == 1,
            "session: answer of turn " + std::to_string(i + 1) + " contains </s> before its end");
    for (int id : t.source_ids) require(id >= 0 && id < v.size(), "session: source id out of range");
    for (int id : t.answer_ids) require(id >= 0 && id < v.size(), "session: answer id out of range");
  }
}

Rendered render_session(const Session& s, const UnifiedVocab& v) {
  s.validate(v);
  Rendered r;
  auto emit = [&](const std::vector<int>& ids, std::uint8_t m) {
    append(r.ids, ids);
    r.loss_mask.insert(r.loss_mask.end(), ids.size(), m);
  };
  const auto user = v.encode_text("USER: ");
  const auto assistant = v.encode_text(" ASSISTANT: ");
  const auto space = v.encode_text(" ");
  const auto newline = v.encode_text("\n");
  if (!s.system_message.empty()) {
    emit(v.encode_text(s.system_message), 0);
    emit(newline, 0);
  }
  for (std::size_t i = 0; i < s.turns.size(); ++i) {
    const auto& t = s.turns[i];
    if (i > 0) emit(newline, 0);
    emit(user, 0);
    if (t.visual) {
      emit({v.img()}, 0);
      emit(space, 0);
    }
    emit(t.source_ids, 0);
    emit(assistant, 0);
    emit(t.answer_ids, 1);
  }
  return r;
}

std::string render_text(const Session& s, const UnifiedVocab& v) { return v.render(render_session(s, v).ids); }

std::vector<int> render_prompt(const Session& history, const std::vector<int>& source_ids, bool visual,
                               const UnifiedVocab& v) {
  if (source_ids.empty()) throw InvalidArgument("render_prompt: empty user text");
  for (int id : source_ids)
    if (id < 0 || id >= v.size()) throw InvalidArgument("render_prompt: id " + std::to_string(id) + " out of range");
  std::vector<int> ids;
  if (!history.turns.empty()) {
    ids = render_session(history, v).ids;
    append(ids, v.encode_text("\n"));
  } else if (!history.system_message.empty()) {
    ids = v.encode_text(history.system_message);
    append(ids, v.encode_text("\n"));
  }
  append(ids, v.encode_text("USER: "));
  if (visual) {
    ids.push_back(v.img());
    append(ids, v.encode_text(" "));
  }
  append(ids, source_ids);
  append(ids, v.encode_text(" ASSISTANT: "));
  return ids;
}

json TrainingSample::to_json() const {
  return {{"input_ids", input_ids}, {"target_ids", target_ids}, {"loss_mask", loss_mask}, {"task", task},
          {"turn_tasks", turn_tasks}, {"turns", turns}, {"visual_clip", visual_clip}};
}

TrainingSample TrainingSample::from_json(const json& j) {
  try {
    TrainingSample s;
    j.at("input_ids").get_to(s.input_ids);
    j.at("target_ids").get_to(s.target_ids);
    j.at("loss_mask").get_to(s.loss_mask);
    j.at("task").get_to(s.task);
    j.at("turns").get_to(s.turns);
    if (j.contains("turn_tasks")) j.at("turn_tasks").get_to(s.turn_tasks);
    if (j.contains("visual_clip")) j.at("visual_clip").get_to(s.visual_clip);
    if (s.input_ids.size() != s.target_ids.size() || s.target_ids.size() != s.loss_mask.size())
      throw FormatError("training sample: input, target and mask lengths differ");
    return s;
  } catch (const json::exception& e) {
    throw FormatError(std::string("training sample: ") + e.what());
  }
}

TrainingSample to_sample(const Rendered& r, std::string task, std::vector<std::string> turn_tasks, int visual_clip) {
  require(r.ids.size() >= 2 && r.ids.size() == r.loss_mask.size(), "to_sample: malformed rendering");
  TrainingSample s;
  s.input_ids.assign(r.ids.begin(), r.ids.end() - 1);
  s.target_ids.assign(r.ids.begin() + 1, r.ids.end());
  s.loss_mask.assign(r.loss_mask.begin() + 1, r.loss_mask.end());
  s.task = std::move(task);
  s.turns = static_cast<int>(turn_tasks.size());
  s.turn_tasks = std::move(turn_tasks);
  s.visual_clip = visual_clip;
  return s;
}

// ---- templates --------------------------------------------------------------

void TaskTemplate::validate() const {
  require(!prompts.empty() && !answers.empty(), "template " + task_name(task) + ": needs prompts and answers");
  auto check = [&](const std::string& p) {
    for (std::size_t pos = p.find('['); pos != std::string::npos; pos = p.find('[', pos + 1)) {
      const auto end = p.find(']', pos);
      require(end != std::string::npos, "template " + task_name(task) + ": unterminated slot in '" + p + "'");
      const auto slot = p.substr(pos, end - pos + 1);
      require(std::find(kSlots.begin(), kSlots.end(), slot) != kSlots.end(),
              "template " + task_name(task) + ": unknown slot " + slot);
    }
  };
  for (const auto& p : prompts) check(p);
  for (const auto& p : answers) check(p);
  for (const auto& p : followups) check(p);
}

const std::vector<TaskTemplate>& default_templates() {
  static const std::vector<TaskTemplate> t{
      {TaskId::text_to_motion,
       {"Create a motion that shows [caption].", "Animate this description: [caption].",
        "Give me a human motion for: [caption]."},
       {"[motion]"},
       {}},
      {TaskId::text_to_motion_with_length,
       {"Make a motion of about [frames] frames for: [caption].",
        "Produce [seconds] seconds of motion matching: [caption]."},
       {"[motion]"},
       {}},
      {TaskId::motion_length_editing, {"[instruction] [motion]"}, {"[motion]"}, {"[instruction]"}},
      {TaskId::length_to_motion,
       {"Show a motion lasting [frames] frames.", "Generate [seconds] seconds of movement."},
       {"[motion]"},
       {}},
      {TaskId::random_motion, {"Show any human movement.", "Surprise me with a motion."}, {"[motion]"}, {}},
      {TaskId::motion_to_text,
       {"What is happening in [motion]?", "Describe [motion] in words."},
       {"[caption]"},
       {"Describe what you just generated.", "What does that motion show?"}},
      {TaskId::motion_to_text_with_length,
       {"Describe [motion], which runs for [frames] frames.", "In [seconds] seconds, what does [motion] show?"},
       {"[caption]"},
       {"Summarize that [frames]-frame motion.", "What happens during those [seconds] seconds?"}},
      {TaskId::motion_to_length,
       {"How many frames long is [motion]?", "How many seconds does [motion] take?"},
       {"There are [frames] frames in the motion.", "It takes [seconds] seconds."},
       {"How many frames was that?", "How long was that in seconds?"}},
      {TaskId::caption_to_length,
       {"Estimate the frame count for: [caption].", "Roughly how many seconds would this take: [caption]?"},
       {"It would take about [frames] frames.", "About [seconds] seconds."},
       {}},
      {TaskId::length_to_caption,
       {"Suggest an action that fits in [frames] frames.", "What could someone do in [seconds] seconds?"},
       {"[caption]"},
       {}},
      {TaskId::random_caption, {"Describe any motion you like.", "Tell me about some movement."}, {"[caption]"}, {}},
      {TaskId::motion_reasoning,
       {"Which muscles does [motion] rely on?", "What might the person in [motion] be doing?"},
       {"[reasoning]"},
       {"Which muscles does that rely on?", "What might that person be doing?"}},
      {TaskId::motion_editing, {"[instruction] [motion]"}, {"[motion]"}, {"[instruction]"}},
      {TaskId::image_conditioned_motion,
       {"Recreate the motion shown in the image.", "Move like the figure in the picture."},
       {"[motion]"},
       {}},
  };
  return t;
}

std::string format_seconds(int frames, double fps) {
  require(fps > 0, "format_seconds: fps must be positive");
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", frames / fps);
  std::string s = buf;
  while (s.back() == '0') s.pop_back();
  if (s.back() == '.') s.pop_back();
  return s;
}

std::vector<int> fill_pattern(const std::string& pattern, const SlotValues& slots, const UnifiedVocab& v) {
  std::vector<int> out;
  std::string text;
  auto flush = [&] {
    append(out, v.encode_text(text));
    text.clear();
  };
  auto missing = [&](const std::string& slot) { return InvalidArgument("template slot " + slot + " is unfillable"); };
  std::size_t i = 0;
  while (i < pattern.size()) {
    if (pattern[i] != '[') {
      text += pattern[i++];
      continue;
    }
    const auto end = pattern.find(']', i);
    if (end == std::string::npos) throw InvalidArgument("template: unterminated slot in '" + pattern + "'");
    const auto slot = pattern.substr(i, end - i + 1);
    i = end + 1;
    if (slot == "[caption]") {
      if (!slots.caption) throw missing(slot);
      text += *slots.caption;
    } else if (slot == "[frames]") {
      if (!slots.frames) throw missing(slot);
      text += std::to_string(*slots.frames);
    } else if (slot == "[seconds]") {
      if (!slots.frames || !slots.fps) throw missing(slot);
      text += format_seconds(*slots.frames, *slots.fps);
    } else if (slot == "[reasoning]") {
      if (!slots.reasoning) throw missing(slot);
      text += *slots.reasoning;
    } else if (slot == "[instruction]") {
      if (!slots.instruction) throw missing(slot);
      text += *slots.instruction;
    } else if (slot == "[motion]") {
      if (!slots.motion) throw missing(slot);
      flush();
      append(out, v.motion_to_symbols(*slots.motion));
    } else {
      throw InvalidArgument("template: unknown slot " + slot);
    }
  }
  flush();
  return out;
}

std::string reasoning_answer(MotionFamily f, int question) {
  static const std::map<MotionFamily, std::array<const char*, 2>> table{
      {MotionFamily::walk,
       {"Mostly the legs: thighs and calves drive each step while the hips and trunk keep balance.",
        "They could be heading somewhere on foot, maybe crossing a room."}},
      {MotionFamily::turn,
       {"The hips and the obliques rotate the body while the feet pivot.",
        "They might be turning to look at something behind them."}},
      {MotionFamily::jump,
       {"The calves, thighs and glutes push off, and the core stabilizes the landing.",
        "They could be playing, warming up, or trying to reach something high."}},
      {MotionFamily::wave,
       {"The shoulder and upper arm lift the hand while the forearm swings it.",
        "They are probably greeting someone or saying goodbye."}},
      {MotionFamily::stand,
       {"Mainly postural muscles in the legs and back hold the body upright.",
        "They might be waiting or listening to someone."}},
  };
  return table.at(f).at(static_cast<std::size_t>(question) % 2);
}

// ---- similarity and edits ---------------------------------------------------

std::vector<DatasetClip> encode_corpus(const tok::MotionTokenizer& tk, const motion::Skeleton& skel,
                                       const std::vector<motion::LabeledClip>& corpus) {
  std::vector<DatasetClip> out;
  out.reserve(corpus.size());
  const int l = tk.config().downsample;
  for (const auto& c : corpus) {
    const auto f = motion::extract_features(skel, c.clip);
    require(f.frames % l == 0, "encode_corpus: clip length " + std::to_string(f.frames) +
                                   " is not a multiple of the downsample rate");
    DatasetClip d;
    d.caption = c.caption;
    d.family = c.family;
    d.frames = f.frames;
    d.tokens = tk.encode(f);
    d.summary = motion::mean_feature(f);
    out.push_back(std::move(d));
  }
  return out;
}

double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b) {
  require(a.size() == b.size(), "cosine_similarity: length mismatch");
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) ab += a[i] * b[i], aa += a[i] * a[i], bb += b[i] * b[i];
  if (aa == 0 || bb == 0) return 0;
  return ab / std::sqrt(aa * bb);
}

std::vector<std::vector<double>> standardize(const std::vector<std::vector<double>>& summaries) {
  if (summaries.empty()) return {};
  const std::size_t d = summaries[0].size();
  const double n = static_cast<double>(summaries.size());
  std::vector<double> mean(d, 0), sd(d, 0);
  for (const auto& s : summaries) {
    require(s.size() == d, "standardize: ragged summaries");
    for (std::size_t c = 0; c < d; ++c) mean[c] += s[c] / n;
  }
  for (const auto& s : summaries)
    for (std::size_t c = 0; c < d; ++c) sd[c] += (s[c] - mean[c]) * (s[c] - mean[c]) / n;
  auto out = summaries;
  for (auto& s : out)
    for (std::size_t c = 0; c < d; ++c) {
      const double sdev = std::sqrt(sd[c]);
      s[c] = sdev > 1e-9 ? (s[c] - mean[c]) / sdev : 0.0;
    }
  return out;
}

void SimilarityConfig::validate() const {
  require(tau_low < tau_high && tau_high <= 1.0, "similarity config: need tau_low < tau_high <= 1");
}

Buckets bucket_similar_pairs(const std::vector<std::vector<double>>& summaries, const std::vector<MotionFamily>& families,
                             const SimilarityConfig& cfg) {
  cfg.validate();
  require(summaries.size() == families.size(), "bucket_similar_pairs: summaries and families differ in count");
  require(summaries.size() >= 2, "bucket_similar_pairs: need at least two clips");
  const auto z = standardize(summaries);
  Buckets b;
  for (std::size_t i = 0; i < z.size(); ++i)
    for (std::size_t j = i + 1; j < z.size(); ++j) {
      const double s = cosine_similarity(z[i], z[j]);
      const SimilarPair p{static_cast<int>(i), static_cast<int>(j), s};
      if (families[i] == families[j]) {
        if (s >= cfg.tau_high) b.high.push_back(p);
      } else if (s >= cfg.tau_low && s < cfg.tau_high) {
        b.medium.push_back(p);
      }
    }
  return b;
}

Buckets bucket_similar_pairs(const std::vector<DatasetClip>& clips, const SimilarityConfig& cfg) {
  std::vector<std::vector<double>> s;
  std::vector<MotionFamily> f;
  for (const auto& c : clips) s.push_back(c.summary), f.push_back(c.family);
  return bucket_similar_pairs(s, f, cfg);
}

std::string edit_instruction(MotionFamily from, MotionFamily to, int variant) {
  const auto a = motion::family_name(from), b = motion::family_name(to);
  switch (variant % 3) {
    case 0: return "Change the " + a + " into a " + b + ".";
    case 1: return "Replace the " + a + " with a " + b + ".";
    default: return "Make it a " + b + " instead of a " + a + ".";
  }
}

std::vector<EditTask> make_edit_tasks(const Buckets& buckets, const std::vector<DatasetClip>& clips) {
  static const std::array<const char*, 2> extend{"Extend the duration of the motion provided.",
                                                 "Make this motion last longer."};
  static const std::array<const char*, 2> shorten{"Shorten the motion but keep what it does.",
                                                  "Make this motion shorter."};
  auto at = [&](int i) -> const DatasetClip& {
    require(i >= 0 && i < static_cast<int>(clips.size()), "make_edit_tasks: pair index out of range");
    return clips[static_cast<std::size_t>(i)];
  };
  std::vector<EditTask> out;
  for (const auto& p : buckets.high) {
    const auto &a = at(p.a), &b = at(p.b);
    if (a.frames == b.frames) continue;
    const int v = (p.a + p.b) % 2;
    const bool a_short = a.frames < b.frames;
    const int lo = a_short ? p.a : p.b, hi = a_short ? p.b : p.a;
    out.push_back({extend[v], at(lo).tokens, at(hi).tokens, lo, hi, true});
    out.push_back({shorten[v], at(hi).tokens, at(lo).tokens, hi, lo, true});
  }
  for (const auto& p : buckets.medium) {
    const auto &a = at(p.a), &b = at(p.b);
    const int v = p.a + p.b;
    out.push_back({edit_instruction(a.family, b.family, v), a.tokens, b.tokens, p.a, p.b, false});
    out.push_back({edit_instruction(b.family, a.family, v + 1), b.tokens, a.tokens, p.b, p.a, false});
  }
  return out;
}

// ---- dataset ----------------------------------------------------------------

void DatasetConfig::validate() const {
  require(size >= 1, "dataset config: size must be positive");
  require(fps > 0, "dataset config: fps must be positive");
  require(max_turns >= 1 && max_turns <= 10, "dataset config: max_turns must lie in [1, 10]");
  require(max_tokens >= 16, "dataset config: max_tokens too small");
  require(multi_turn_rate >= 0 && multi_turn_rate <= 1, "dataset config: multi_turn_rate must lie in [0, 1]");
  similarity.validate();
}

namespace {

struct Builder {
  const std::vector<DatasetClip>& clips;
  const UnifiedVocab& v;
  const DatasetConfig& cfg;
  std::map<TaskId, const TaskTemplate*> templates;
  std::vector<EditTask> length_edits, family_edits;
  std::vector<std::vector<int>> edits_from;  // clip -> indices into all_edits
  std::vector<const EditTask*> all_edits;

  const TaskTemplate& tmpl(TaskId t) const {
    const auto it = templates.find(t);
    require(it != templates.end(), "build_dataset: no template for task " + task_name(t));
    return *it->second;
  }

  SlotValues slots_for(int clip) const {
    const auto& c = clips[static_cast<std::size_t>(clip)];
    SlotValues s;
    s.caption = c.caption;
    s.frames = c.frames;
    s.fps = cfg.fps;
    s.motion = &c.tokens;
    return s;
  }

  std::vector<int> answer(const std::string& pattern, const SlotValues& s) const {
    auto ids = fill_pattern(pattern, s, v);
    ids.push_back(v.eos());
    return ids;
  }

  // First turn for `task`; returns the clip whose motion is in context afterwards.
  Turn first_turn(Rng& rng, TaskId task, int& clip, int& visual_clip) const {
    const auto& t = tmpl(task);
    const int pi = uniform_int(rng, 0, static_cast<int>(t.prompts.size()) - 1);
    const auto& prompt = t.prompts[static_cast<std::size_t>(pi)];
    const auto& ans = t.answers[static_cast<std::size_t>(pi) % t.answers.size()];
    Turn turn;
    if (task == TaskId::motion_length_editing || task == TaskId::motion_editing) {
      const auto& pool = task == TaskId::motion_length_editing ? length_edits : family_edits;
      require(!pool.empty(), "build_dataset: template slot [instruction] is unfillable for " + task_name(task) +
                                 " (no similar pairs in the corpus)");
      const auto& e = pool[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(pool.size()) - 1))];
      SlotValues s = slots_for(e.source_clip);
      s.instruction = e.instruction;
      turn.source_ids = fill_pattern(prompt, s, v);
      turn.answer_ids = answer(ans, slots_for(e.target_clip));
      clip = e.target_clip;
      return turn;
    }
    clip = uniform_int(rng, 0, static_cast<int>(clips.size()) - 1);
    SlotValues s = slots_for(clip);
    s.reasoning = reasoning_answer(clips[static_cast<std::size_t>(clip)].family, pi);
    turn.source_ids = fill_pattern(prompt, s, v);
    turn.answer_ids = answer(ans, s);
    if (task == TaskId::image_conditioned_motion) {
      turn.visual = true;
      visual_clip = clip;
    }
    return turn;
  }

  // Follow-up on the motion currently in context; may move `clip` for edits.
  Turn follow_up(Rng& rng, TaskId& task, int& clip) const {
    std::vector<TaskId> options{TaskId::motion_to_text, TaskId::motion_to_text_with_length, TaskId::motion_to_length,
                                TaskId::motion_reasoning};
    const auto& edits = edits_from[static_cast<std::size_t>(clip)];
    if (!edits.empty()) options.push_back(TaskId::motion_editing);
    task = options[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(options.size()) - 1))];
    Turn turn;
    if (task == TaskId::motion_editing) {
      const auto& e = *all_edits[static_cast<std::size_t>(edits[static_cast<std::size_t>(
          uniform_int(rng, 0, static_cast<int>(edits.size()) - 1))])];
      if (e.length_edit) task = TaskId::motion_length_editing;
      const auto& t = tmpl(task);
      SlotValues s;
      s.instruction = e.instruction;
      turn.source_ids = fill_pattern(t.followups.at(0), s, v);
      turn.answer_ids = answer(t.answers.at(0), slots_for(e.target_clip));
      clip = e.target_clip;
      return turn;
    }
    const auto& t = tmpl(task);
    require(!t.followups.empty(), "build_dataset: task " + task_name(task) + " has no follow-up prompts");
    const int pi = uniform_int(rng, 0, static_cast<int>(t.followups.size()) - 1);
    SlotValues s = slots_for(clip);
    s.reasoning = reasoning_answer(clips[static_cast<std::size_t>(clip)].family, pi);
    turn.source_ids = fill_pattern(t.followups[static_cast<std::size_t>(pi)], s, v);
    turn.answer_ids = answer(t.answers[static_cast<std::size_t>(pi) % t.answers.size()], s);
    return turn;
  }

  TrainingSample sample(int index) const {
    Rng rng = make_rng(cfg.seed, static_cast<std::uint64_t>(index));
    static const std::vector<TaskId> openers{TaskId::text_to_motion, TaskId::text_to_motion_with_length,
                                             TaskId::length_to_motion, TaskId::random_motion,
                                             TaskId::image_conditioned_motion};
    const bool multi = index >= kTaskCount && cfg.max_turns > 1 && uniform(rng) < cfg.multi_turn_rate;
    TaskId task;
    if (index < kTaskCount)
      task = all_tasks()[static_cast<std::size_t>(index)];
    else if (multi)
      task = openers[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(openers.size()) - 1))];
    else
      task = all_tasks()[static_cast<std::size_t>(uniform_int(rng, 0, kTaskCount - 1))];

    Session s;
    s.system_message = cfg.system_message;
    int clip = -1;
    s.turns.push_back(first_turn(rng, task, clip, s.visual_clip));
    std::vector<std::string> names{task_name(task)};
    auto rendered = render_session(s, v);
    require(static_cast<int>(rendered.ids.size()) <= cfg.max_tokens,
            "build_dataset: a single-turn " + task_name(task) + " sample exceeds max_tokens");
    if (multi) {
      const int extra = uniform_int(rng, 1, cfg.max_turns - 1);
      for (int k = 0; k < extra; ++k) {
        TaskId ft{};
        int next_clip = clip;
        s.turns.push_back(follow_up(rng, ft, next_clip));
        auto r = render_session(s, v);
        if (static_cast<int>(r.ids.size()) > cfg.max_tokens) {
          s.turns.pop_back();
          break;
        }
        rendered = std::move(r);
        clip = next_clip;
        names.push_back(task_name(ft));
      }
    }
    return to_sample(rendered, task_name(task), names, s.visual_clip);
  }
};

}  // namespace

std::vector<TrainingSample> build_dataset(const std::vector<DatasetClip>& clips, const std::vector<TaskTemplate>& templates,
                                          const UnifiedVocab& v, const DatasetConfig& cfg) {
  cfg.validate();
  require(!clips.empty(), "build_dataset: empty corpus");
  Builder b{clips, v, cfg, {}, {}, {}, {}, {}};
  for (const auto& t : templates) {
    t.validate();
    b.templates[t.task] = &t;
  }
  for (TaskId t : all_tasks()) b.tmpl(t);
  for (const auto& c : clips) c.tokens.validate(v.codebook_size());

  if (clips.size() >= 2) {
    for (auto& e : make_edit_tasks(bucket_similar_pairs(clips, cfg.similarity), clips))
      (e.length_edit ? b.length_edits : b.family_edits).push_back(std::move(e));
  }
  b.edits_from.assign(clips.size(), {});
  for (const auto* pool : {&b.length_edits, &b.family_edits})
    for (const auto& e : *pool) {
      b.edits_from[static_cast<std::size_t>(e.source_clip)].push_back(static_cast<int>(b.all_edits.size()));
      b.all_edits.push_back(&e);
    }

  std::vector<TrainingSample> out;
  out.reserve(static_cast<std::size_t>(cfg.size));
  for (int i = 0; i < cfg.size; ++i) out.push_back(b.sample(i));
  return out;
}

std::vector<TrainingSample> pretrain_subset(const std::vector<TrainingSample>& data) {
  static const std::vector<std::string> keep{task_name(TaskId::text_to_motion), task_name(TaskId::motion_to_text),
                                             task_name(TaskId::image_conditioned_motion)};
  std::vector<TrainingSample> out;
  for (const auto& s : data)
    if (s.turns == 1 && std::find(keep.begin(), keep.end(), s.task) != keep.end()) out.push_back(s);
  return out;
}

void write_jsonl(const std::filesystem::path& path, const std::vector<TrainingSample>& data) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot write " + path.string());
  for (const auto& s : data) f << s.to_json().dump() << '\n';
  if (!f) throw FormatError("write failed for " + path.string());
}

std::vector<TrainingSample> read_jsonl(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot read " + path.string());
  std::vector<TrainingSample> out;
  std::string line;
  int n = 0;
  while (std::getline(f, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      out.push_back(TrainingSample::from_json(json::parse(line)));
    } catch (const json::parse_error& e) {
      throw FormatError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace mtalk::conv
