#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mtalk/common/rng.hpp"
#include "mtalk/motion/skeleton.hpp"

namespace mtalk::motion {

enum class MotionFamily { walk, turn, jump, wave, stand };

inline constexpr int kFamilyCount = 5;
const std::vector<MotionFamily>& all_families();
std::string family_name(MotionFamily f);
MotionFamily parse_family(const std::string& name);

// Generator parameters; only the fields of the chosen family are meaningful.
struct FamilyParams {
  MotionFamily family = MotionFamily::stand;
  int speed = 1;       // walk: 0 slowly, 1 normal, 2 quickly
  int direction = 0;   // walk: 0 forward, 1 backward; turn/wave: 0 left, 1 right, 2 both (wave)
  int magnitude = 0;   // turn: 0 quarter turn, 1 half turn; jump: 0 low, 1 high
  int count = 1;       // jump count
  double heading = 0;  // initial yaw
  int phrasing = 0;    // caption template variant
};

struct LabeledClip {
  MotionClip clip;
  std::string caption;
  std::vector<std::string> task_tags;
  MotionFamily family = MotionFamily::stand;
  FamilyParams params;
  int sibling_of = -1;  // index of the clip this one re-times, or -1
};

struct CorpusConfig {
  double fps = 20.0;
  int downsample = 4;  // clip lengths are multiples of this
  int min_frames = 40;
  int max_frames = 96;
  double sibling_rate = 0.25;  // chance a clip re-times the previous clip's parameters
  void validate() const;
};

std::vector<LabeledClip> synth_corpus(std::uint64_t seed, int count, const Skeleton& skeleton,
                                      const CorpusConfig& config = {});

// One clip from explicit parameters; `start` sets the root's initial XZ position.
LabeledClip synth_clip(const Skeleton& skeleton, const FamilyParams& params, int frames, double fps,
                       const Vec3& start = Vec3::Zero());

FamilyParams random_params(Rng& rng, MotionFamily family);

std::string caption_for(const FamilyParams& p);

// A continuous clip made of two family segments; `whole` is the ground truth
// for splitting and recomposing at `split`.
struct TwoPhaseClip {
  LabeledClip whole;
  LabeledClip first;
  LabeledClip second;
  int split = 0;
};

std::vector<TwoPhaseClip> synth_two_phase(std::uint64_t seed, int count, const Skeleton& skeleton, int phase_frames,
                                          double fps = 20.0);

// Height of the root above the lowest rest-pose joint.
double standing_height(const Skeleton& skeleton);

}  // namespace mtalk::motion
