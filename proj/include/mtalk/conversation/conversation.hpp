#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mtalk/motion/corpus.hpp"
#include "mtalk/motion/features.hpp"
#include "mtalk/tokenizer/tokenizer.hpp"
#include "mtalk/vocab/vocab.hpp"

namespace mtalk::conv {

enum class TaskId {
  text_to_motion,
  text_to_motion_with_length,
  motion_length_editing,
  length_to_motion,
  random_motion,
  motion_to_text,
  motion_to_text_with_length,
  motion_to_length,
  caption_to_length,
  length_to_caption,
  random_caption,
  motion_reasoning,
  motion_editing,
  image_conditioned_motion,
};

inline constexpr int kTaskCount = 14;
const std::vector<TaskId>& all_tasks();
std::string task_name(TaskId t);
TaskId parse_task(const std::string& name);
bool produces_motion(TaskId t);

const std::string& default_system_message();

// ---- sessions ---------------------------------------------------------------

struct Turn {
  std::vector<int> source_ids;
  std::vector<int> answer_ids;  // must end with </s>
  bool visual = false;          // emit the <img> placeholder before the source
};

struct Session {
  std::string system_message;
  std::vector<Turn> turns;
  int visual_clip = -1;  // which clip supplies the visual embedding, if any

  void validate(const vocab::UnifiedVocab& v) const;
};

struct Rendered {
  std::vector<int> ids;
  std::vector<std::uint8_t> loss_mask;  // 1 on answer ids including </s>
};

// Layout: [system "\n"] then per turn "USER: " [<img> " "] source " ASSISTANT: " answer,
// turns separated by "\n".
Rendered render_session(const Session& s, const vocab::UnifiedVocab& v);
std::string render_text(const Session& s, const vocab::UnifiedVocab& v);

// History followed by a pending "USER: ... ASSISTANT: " turn; a completed
// session renders to this prefix plus the answer ids.
std::vector<int> render_prompt(const Session& history, const std::vector<int>& source_ids, bool visual,
                               const vocab::UnifiedVocab& v);

struct TrainingSample {
  std::vector<int> input_ids;
  std::vector<int> target_ids;
  std::vector<std::uint8_t> loss_mask;  // aligned with target_ids
  std::string task;
  std::vector<std::string> turn_tasks;
  int turns = 0;
  int visual_clip = -1;

  nlohmann::json to_json() const;
  static TrainingSample from_json(const nlohmann::json& j);
};

// Next-token shift of a rendered session.
TrainingSample to_sample(const Rendered& r, std::string task, std::vector<std::string> turn_tasks, int visual_clip);

// ---- templates --------------------------------------------------------------

// Slots: [caption] [motion] [frames] [seconds] [reasoning] [instruction].
struct TaskTemplate {
  TaskId task = TaskId::text_to_motion;
  std::vector<std::string> prompts;
  std::vector<std::string> answers;    // chosen with the same index as the prompt, modulo size
  std::vector<std::string> followups;  // prompts used when the motion is already in context

  void validate() const;
};

const std::vector<TaskTemplate>& default_templates();

struct SlotValues {
  std::optional<std::string> caption;
  std::optional<int> frames;
  std::optional<double> fps;
  const tok::MotionTokens* motion = nullptr;
  std::optional<std::string> reasoning;
  std::optional<std::string> instruction;
};

// Text pieces are encoded separately around each [motion] slot.
std::vector<int> fill_pattern(const std::string& pattern, const SlotValues& slots, const vocab::UnifiedVocab& v);
std::string format_seconds(int frames, double fps);

// Family-keyed stand-in for free-form reasoning answers.
std::string reasoning_answer(motion::MotionFamily f, int question);

// ---- similarity and edits ---------------------------------------------------

struct DatasetClip {
  std::string caption;
  motion::MotionFamily family = motion::MotionFamily::stand;
  int frames = 0;
  tok::MotionTokens tokens;
  std::vector<double> summary;  // time-averaged feature vector
};

std::vector<DatasetClip> encode_corpus(const tok::MotionTokenizer& tk, const motion::Skeleton& skel,
                                       const std::vector<motion::LabeledClip>& corpus);

double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b);
// Per-channel z-scoring across the set; constant channels become zero.
std::vector<std::vector<double>> standardize(const std::vector<std::vector<double>>& summaries);

struct SimilarityConfig {
  double tau_high = 0.95;
  double tau_low = 0.5;
  void validate() const;
};

struct SimilarPair {
  int a = 0;
  int b = 0;
  double similarity = 0;
};

struct Buckets {
  std::vector<SimilarPair> high;    // same family, similarity >= tau_high
  std::vector<SimilarPair> medium;  // different family, tau_low <= similarity < tau_high
};

Buckets bucket_similar_pairs(const std::vector<std::vector<double>>& summaries,
                             const std::vector<motion::MotionFamily>& families, const SimilarityConfig& cfg = {});
Buckets bucket_similar_pairs(const std::vector<DatasetClip>& clips, const SimilarityConfig& cfg = {});

struct EditTask {
  std::string instruction;
  tok::MotionTokens source;
  tok::MotionTokens target;
  int source_clip = -1;
  int target_clip = -1;
  bool length_edit = false;
};

std::string edit_instruction(motion::MotionFamily from, motion::MotionFamily to, int variant);
std::vector<EditTask> make_edit_tasks(const Buckets& buckets, const std::vector<DatasetClip>& clips);

// ---- dataset ----------------------------------------------------------------

struct DatasetConfig {
  int size = 1000;
  std::uint64_t seed = 0;
  double fps = 20.0;
  int max_turns = 10;
  int max_tokens = 512;  // rendered ids per session, so the LM context can hold every sample
  double multi_turn_rate = 0.5;
  std::string system_message = default_system_message();
  SimilarityConfig similarity;

  void validate() const;
};

// Samples 0..13 cover each task once as single-turn; later ones are drawn per
// index from make_rng(seed, index).
std::vector<TrainingSample> build_dataset(const std::vector<DatasetClip>& clips, const std::vector<TaskTemplate>& templates,
                                          const vocab::UnifiedVocab& v, const DatasetConfig& cfg);

// Only text-to-motion, motion-to-text and image-conditioned single-turn samples.
std::vector<TrainingSample> pretrain_subset(const std::vector<TrainingSample>& data);

void write_jsonl(const std::filesystem::path& path, const std::vector<TrainingSample>& data);
std::vector<TrainingSample> read_jsonl(const std::filesystem::path& path);

}  // namespace mtalk::conv
