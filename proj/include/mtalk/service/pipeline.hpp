#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mtalk/metrics/metrics.hpp"
#include "mtalk/service/config.hpp"
#include "mtalk/service/engine.hpp"

namespace mtalk::service {

using Log = std::function<void(const std::string&)>;

// Each stage reads what the previous one wrote under cfg.paths.
void gen_corpus(const AppConfig& cfg, const Log& log = {});
void train_tokenizer_stage(const AppConfig& cfg, const Log& log = {});
void build_data(const AppConfig& cfg, const Log& log = {});

struct LmStageResult {
  std::vector<double> pretrain_losses;
  std::vector<double> instruct_losses;
  double seconds = 0;
};
LmStageResult train_lm_stage(const AppConfig& cfg, const Log& log = {});

// Text vocabulary training text: captions, every template string and the
// conversation scaffolding.
std::vector<std::string> vocab_training_text(const std::vector<motion::LabeledClip>& corpus,
                                             const std::string& system_message);

// Prompts in the first text-to-motion and motion-to-text phrasings.
std::string t2m_prompt(const std::string& caption);
std::vector<int> m2t_prompt_ids(const tok::MotionTokens& motion, const vocab::UnifiedVocab& v);

// Motion of the first span in a text-to-motion answer, or nothing.
std::optional<motion::MotionFeatures> generate_motion(const Engine& e, const std::string& system_message,
                                                     const std::string& caption, std::uint64_t seed);

// Model evaluation on the held-out corpus: text-to-motion quality and
// motion-to-text language scores, each repeated eval.runs times.
metrics::MetricReport evaluate_model(const AppConfig& cfg, const Log& log = {});

// File evaluation: one features JSON per clip in each directory, matched by
// file name. `captions` (optional) is a JSON object {file name: caption}.
struct FileEvalInputs {
  fs::path predictions;
  fs::path ground_truth;
  fs::path captions;
  fs::path evaluator;  // needed for FID, R-precision and diversity
  int runs = 1;
  std::uint64_t seed = 0;
  int div_subset = 16;
};
metrics::MetricReport evaluate_files(const FileEvalInputs& in);

// Batch-size-one text-to-motion generation speed in frames per second.
metrics::FpsResult measure_fps(const Engine& e, const std::string& system_message,
                               const std::vector<std::string>& captions, int runs,
                               const metrics::Clock& clock = metrics::wall_clock);

// Held-out walk and stand prompts: generated planar root speed must separate
// the two by a margin, and generated motions must retrieve their captions.
struct CapabilityReport {
  double walk_speed = 0, walk_std = 0;
  double stand_speed = 0, stand_std = 0;
  double separation = 0;  // (walk mean - stand mean) / pooled std
  int walk_prompts = 0, stand_prompts = 0;
  int motion_answers = 0, prompts = 0;
  double r1 = 0;  // R@1 in a pool of 32
  bool passed(double min_separation = 3.0, double min_r1 = 5.0 / 32.0, double min_motion_rate = 0.9) const;
};
CapabilityReport probe_capability(const AppConfig& cfg, const Engine& e, const Log& log = {});

// Mean planar root speed in m/s.
double planar_root_speed(const motion::MotionFeatures& f, double fps);

}  // namespace mtalk::service
