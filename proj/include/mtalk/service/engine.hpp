#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mtalk/composition/composition.hpp"
#include "mtalk/conversation/conversation.hpp"
#include "mtalk/lm/model.hpp"
#include "mtalk/service/config.hpp"
#include "mtalk/vision/vision.hpp"
#include "mtalk/vocab/vocab.hpp"

namespace mtalk::service {

struct Answer {
  conv::Turn turn;  // answer ids always end with exactly one </s>
  std::string kind;  // "motion" or "text"
  std::string text;  // answer with motion spans and </s> removed
  std::vector<tok::MotionTokens> motions;
  bool truncated = false;  // stopped at the token budget, </s> appended
};

struct ComposedMotion {
  double fps = 20;
  comp::Strategy strategy;
  motion::MotionFeatures features;
  motion::JointPositions positions;
  std::vector<int> seams;
  std::vector<int> parents;

  // {fps, joints, parents, frames: [[x0, y0, z0, x1, ...] per frame], seams, strategy}
  nlohmann::json to_json() const;
};

// Emits answer ids for a rendered prompt; `visual` holds the encoded rows.
using GenerateFn = std::function<std::vector<int>(const std::vector<int>& prompt, const ad::Tensor<float>* visual,
                                                  std::uint64_t seed)>;

struct EngineParts {
  vocab::UnifiedVocab vocab;
  tok::MotionTokenizer tokenizer;
  motion::Skeleton skeleton;
  double fps = 20;
  int context = 512;
  int max_new_tokens = 256;
  std::optional<vision::VisualEncoder> visual;
  GenerateFn generate;
};

class Engine {
 public:
  explicit Engine(EngineParts parts);
  // Tokenizer, vocabulary, language model and (if present) visual encoder from
  // the configured checkpoint directory. `decoding` replaces cfg.decoding.
  static Engine load(const AppConfig& cfg, std::optional<lm::DecodingParams> decoding = {});

  const vocab::UnifiedVocab& vocab() const { return p_.vocab; }
  const tok::MotionTokenizer& tokenizer() const { return p_.tokenizer; }
  const motion::Skeleton& skeleton() const { return p_.skeleton; }
  double fps() const { return p_.fps; }
  bool has_visual() const { return p_.visual.has_value(); }
  const lm::LanguageModel* model() const { return model_.get(); }

  // Throws ContextOverflow when the prompt plus the answer budget exceeds the context.
  Answer respond(const conv::Session& history, const std::string& text, const vision::VisualFeature* visual,
                 std::uint64_t seed) const;
  // Same, for an already encoded user turn (may contain motion symbols).
  Answer respond_ids(const conv::Session& history, const std::vector<int>& source_ids,
                     const vision::VisualFeature* visual, std::uint64_t seed) const;

  ComposedMotion compose(const std::vector<tok::MotionTokens>& segments, const comp::Strategy& strategy) const;

  // {"pose": [[x,y,z]...]}, {"poses": [[[x,y,z]...]...]}, {"feature": {...}} or {"feature_file": path}.
  vision::VisualFeature parse_pose_condition(const nlohmann::json& j) const;

 private:
  EngineParts p_;
  std::shared_ptr<const lm::LanguageModel> model_;
};

}  // namespace mtalk::service
