#pragma once

#include <filesystem>
#include <vector>

#include <json.hpp>

#include "mtalk/motion/corpus.hpp"
#include "mtalk/motion/features.hpp"

namespace mtalk::motion {

using json = nlohmann::json;

inline constexpr int kMotionFormatVersion = 1;

json skeleton_to_json(const Skeleton& s);
Skeleton skeleton_from_json(const json& j);

// {format_version, fps, skeleton, frames:[{root, quats:[[w,x,y,z]...]}]}
json clip_to_json(const Skeleton& s, const MotionClip& clip);
MotionClip clip_from_json(const json& j, Skeleton* skeleton_out = nullptr);

// {format_version, n_joints, dim, frames:[[f32...]]}
json features_to_json(const MotionFeatures& f);
MotionFeatures features_from_json(const json& j);

json params_to_json(const FamilyParams& p);
FamilyParams params_from_json(const json& j);

json smpl_to_json(const SmplLikeParams& p);
SmplLikeParams smpl_from_json(const json& j);

// Corpus directory: corpus.json manifest plus one clip file per entry.
void save_corpus(const std::filesystem::path& dir, const Skeleton& s, const std::vector<LabeledClip>& clips);
std::vector<LabeledClip> load_corpus(const std::filesystem::path& dir, Skeleton* skeleton_out = nullptr);

json read_json_file(const std::filesystem::path& path);
void write_json_file(const std::filesystem::path& path, const json& j);

}  // namespace mtalk::motion
