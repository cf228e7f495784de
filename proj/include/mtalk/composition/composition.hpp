#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mtalk/metrics/metrics.hpp"
#include "mtalk/motion/corpus.hpp"
#include "mtalk/tokenizer/tokenizer.hpp"

namespace mtalk::comp {

enum class StrategyKind { independent, past_condition, tokens_joint };

struct Strategy {
  StrategyKind kind = StrategyKind::tokens_joint;
  int window = 4;  // tokens of the previous segment, past_condition only

  static Strategy independent() { return {StrategyKind::independent, 4}; }
  static Strategy past(int window = 4) { return {StrategyKind::past_condition, window}; }
  static Strategy joint() { return {StrategyKind::tokens_joint, 4}; }
  void validate() const;
};

// "independent" | "past" | "joint"
Strategy parse_strategy(const std::string& s, int window = 4);
std::string strategy_name(const Strategy& s);

motion::MotionFeatures compose(const tok::MotionTokenizer& tk, const std::vector<tok::MotionTokens>& segments,
                               const Strategy& strategy);

// First frame of every segment after the first.
std::vector<int> seam_frames(const std::vector<tok::MotionTokens>& segments, int downsample);

struct Seam {
  int frame = 0;
  double displacement = 0;  // max joint |p[s] - p[s-1]|, metres
  double acceleration = 0;  // max joint |p[s+1] - 2 p[s] + p[s-1]|, metres
};

struct SeamReport {
  std::vector<Seam> seams;
  std::optional<metrics::PoseErrors> errors;  // against ground truth when given
};

SeamReport seam_metrics(const motion::JointPositions& positions, const std::vector<int>& seams,
                        const motion::JointPositions* ground_truth = nullptr);

// Split-and-recompose comparison on two-phase clips: each half is encoded on
// its own, the halves are recomposed with every strategy, and the whole clip
// serves as ground truth.
struct StrategyScore {
  Strategy strategy;
  double mpjpe = 0, pa_mpjpe = 0, accl = 0;
  double seam_displacement = 0;
};

struct OrderingResult {
  std::vector<StrategyScore> scores;  // independent, past, joint
  double joint_le_independent_seam = 0;  // fraction of pairs
  int pairs = 0;

  const StrategyScore& score(StrategyKind k) const;
  bool mpjpe_ordered() const;
  bool accl_ordered() const;
};

OrderingResult ordering_experiment(const tok::MotionTokenizer& tk, const motion::Skeleton& skeleton,
                                   const std::vector<motion::TwoPhaseClip>& pairs, int window = 4);

// Reference Tokens-joint row (mm, mm, mm/frame^2), kept as a fixture.
struct ReferenceRow {
  double mpjpe, pa_mpjpe, accl;
};
inline constexpr ReferenceRow kTokensJointReference{108.77, 18.85, 2.26};

}  // namespace mtalk::comp
