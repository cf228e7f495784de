#pragma once

#include <array>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

namespace mtalk::motion {

using Vec3 = Eigen::Vector3d;
using Quat = Eigen::Quaterniond;

// Kinematic tree. Joint 0 is the root; parents precede children.
struct Skeleton {
  std::vector<int> parents;
  std::vector<Vec3> offsets;
  // Contact slots: left heel, right heel, left toe, right toe.
  std::array<int, 4> heel_toe_ids{};

  int joint_count() const { return static_cast<int>(parents.size()); }
  void validate_tree() const;  // parents and offsets only
  void validate() const;       // also the contact ids

  // Five-joint desk-scale rig: pelvis, two feet, two hands.
  static Skeleton toy5();
  // 22-joint SMPL-ordered body for format parity.
  static Skeleton humanoid22();
};

struct Pose {
  Vec3 root = Vec3::Zero();
  std::vector<Quat> rotations;  // local rotation per joint, unit norm
};

struct MotionClip {
  double fps = 20.0;
  std::vector<Pose> frames;

  int frame_count() const { return static_cast<int>(frames.size()); }
  // Throws if frames are empty, fps <= 0, joint counts differ, or a quaternion is off the unit sphere.
  void validate(int joint_count) const;
};

// Per-frame global joint positions, frame-major.
struct JointPositions {
  int frames = 0;
  int joints = 0;
  std::vector<Vec3> data;

  JointPositions() = default;
  JointPositions(int f, int j) : frames(f), joints(j), data(static_cast<std::size_t>(f) * j, Vec3::Zero()) {}
  Vec3& at(int f, int j) { return data[static_cast<std::size_t>(f) * joints + j]; }
  const Vec3& at(int f, int j) const { return data[static_cast<std::size_t>(f) * joints + j]; }
};

JointPositions forward_kinematics(const Skeleton& skeleton, const MotionClip& clip);

// Heading about +Y of a rotation: the angle that takes +Z to the rotation's
// horizontal forward direction.
double yaw_of(const Quat& q);
Quat yaw_rotation(double yaw);
double wrap_angle(double a);

}  // namespace mtalk::motion
