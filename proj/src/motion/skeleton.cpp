#include "mtalk/motion/skeleton.hpp"

#include <cmath>
#include <numbers>
#include <set>
#include <string>

#include "mtalk/common/error.hpp"

namespace mtalk::motion {

void Skeleton::validate_tree() const {
  const int n = joint_count();
  require(n >= 1, "skeleton: no joints");
  require(static_cast<int>(offsets.size()) == n, "skeleton: offsets/parents length mismatch");
  require(parents[0] == -1, "skeleton: joint 0 must be the root");
  for (int j = 1; j < n; ++j) {
    require(parents[j] >= 0 && parents[j] < j,
            "skeleton: joint " + std::to_string(j) + " must have an earlier parent");
    require(offsets[j].norm() > 0.0, "skeleton: joint " + std::to_string(j) + " has a zero-length bone");
  }
}

void Skeleton::validate() const {
  validate_tree();
  const int n = joint_count();
  std::set<int> seen;
  for (int id : heel_toe_ids) {
    require(id >= 0 && id < n, "skeleton: heel/toe id out of range");
    require(seen.insert(id).second, "skeleton: heel/toe ids must be distinct");
  }
}

Skeleton Skeleton::toy5() {
  Skeleton s;
  s.parents = {-1, 0, 0, 0, 0};
  s.offsets = {Vec3(0, 0, 0), Vec3(0.12, -0.9, 0.0), Vec3(-0.12, -0.9, 0.0), Vec3(0.35, 0.45, 0.0),
               Vec3(-0.35, 0.45, 0.0)};
  // Feet take the heel slots, hands the toe slots: the rig has no toe joints.
  s.heel_toe_ids = {1, 2, 3, 4};
  return s;
}

Skeleton Skeleton::humanoid22() {
  Skeleton s;
  s.parents = {-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19};
  s.offsets = {
      Vec3(0, 0, 0),         Vec3(0.06, -0.09, 0),  Vec3(-0.06, -0.09, 0), Vec3(0, 0.11, 0),
      Vec3(0.04, -0.38, 0),  Vec3(-0.04, -0.38, 0), Vec3(0, 0.14, 0),      Vec3(0, -0.40, -0.02),
      Vec3(0, -0.40, -0.02), Vec3(0, 0.06, 0.02),   Vec3(0, -0.06, 0.12),  Vec3(0, -0.06, 0.12),
      Vec3(0, 0.21, -0.02),  Vec3(0.08, 0.12, 0),   Vec3(-0.08, 0.12, 0),  Vec3(0, 0.09, 0.05),
      Vec3(0.11, 0.04, 0),   Vec3(-0.11, 0.04, 0),  Vec3(0.26, 0, 0),      Vec3(-0.26, 0, 0),
      Vec3(0.25, 0, 0),      Vec3(-0.25, 0, 0)};
  s.heel_toe_ids = {7, 8, 10, 11};
  return s;
}

void MotionClip::validate(int joint_count) const {
  require(!frames.empty(), "motion clip: no frames");
  require(fps > 0.0, "motion clip: fps must be positive");
  for (std::size_t f = 0; f < frames.size(); ++f) {
    require(static_cast<int>(frames[f].rotations.size()) == joint_count,
            "motion clip: frame " + std::to_string(f) + " has " + std::to_string(frames[f].rotations.size()) +
                " rotations for " + std::to_string(joint_count) + " joints");
    for (const auto& q : frames[f].rotations)
      require(std::abs(q.norm() - 1.0) <= 1e-6, "motion clip: non-unit quaternion at frame " + std::to_string(f));
  }
}

JointPositions forward_kinematics(const Skeleton& skeleton, const MotionClip& clip) {
  skeleton.validate_tree();
  const int nj = skeleton.joint_count();
  clip.validate(nj);
  JointPositions out(clip.frame_count(), nj);
  std::vector<Quat> global(nj);
  for (int f = 0; f < clip.frame_count(); ++f) {
    const Pose& pose = clip.frames[f];
    global[0] = pose.rotations[0];
    out.at(f, 0) = pose.root;
    for (int j = 1; j < nj; ++j) {
      const int p = skeleton.parents[j];
      global[j] = global[p] * pose.rotations[j];
      out.at(f, j) = out.at(f, p) + global[p] * skeleton.offsets[j];
    }
  }
  return out;
}

double yaw_of(const Quat& q) {
  const Vec3 fwd = q * Vec3::UnitZ();
  if (std::abs(fwd.x()) < 1e-12 && std::abs(fwd.z()) < 1e-12) return 0.0;
  return std::atan2(fwd.x(), fwd.z());
}

Quat yaw_rotation(double yaw) { return Quat(Eigen::AngleAxisd(yaw, Vec3::UnitY())); }

double wrap_angle(double a) {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  a = std::fmod(a + std::numbers::pi, two_pi);
  if (a < 0) a += two_pi;
  return a - std::numbers::pi;
}

}  // namespace mtalk::motion
