#pragma once

#include <span>
#include <vector>

#include "mtalk/motion/skeleton.hpp"

namespace mtalk::motion {

// Redundant per-frame motion vector:
//   [0]            root angular velocity about +Y (rad/frame)
//   [1], [2]       root linear velocity on XZ in the facing frame (m/frame)
//   [3]            root height (m)
//   [4, 4+3N)      joint positions relative to the root, heading removed
//   [4+3N, 4+6N)   joint velocities, heading removed (m/frame)
//   [4+6N, 4+12N)  joint rotations, 6-D (first two rotation-matrix columns, row-major)
//   [4+12N, 8+12N) heel/toe contacts in {0, 1}
struct FeatureLayout {
  int n_joints = 0;

  int dim() const { return 8 + 12 * n_joints; }
  static constexpr int root_ang_vel = 0;
  static constexpr int root_vel_x = 1;
  static constexpr int root_vel_z = 2;
  static constexpr int root_height = 3;
  int positions() const { return 4; }
  int velocities() const { return 4 + 3 * n_joints; }
  int rotations() const { return 4 + 6 * n_joints; }
  int contacts() const { return 4 + 12 * n_joints; }
};

struct MotionFeatures {
  int n_joints = 0;
  int frames = 0;
  std::vector<double> data;  // frames x dim, row-major

  MotionFeatures() = default;
  MotionFeatures(int joints, int frame_count)
      : n_joints(joints), frames(frame_count), data(static_cast<std::size_t>(frame_count) * (8 + 12 * joints), 0.0) {}

  FeatureLayout layout() const { return {n_joints}; }
  int dim() const { return 8 + 12 * n_joints; }
  std::span<double> row(int f) { return {data.data() + static_cast<std::size_t>(f) * dim(), static_cast<std::size_t>(dim())}; }
  std::span<const double> row(int f) const {
    return {data.data() + static_cast<std::size_t>(f) * dim(), static_cast<std::size_t>(dim())};
  }
  double& at(int f, int c) { return data[static_cast<std::size_t>(f) * dim() + c]; }
  double at(int f, int c) const { return data[static_cast<std::size_t>(f) * dim() + c]; }
  void validate() const;
};

inline constexpr double kDefaultContactThreshold = 0.002;

MotionFeatures extract_features(const Skeleton& skeleton, const MotionClip& clip,
                                double contact_velocity_threshold = kDefaultContactThreshold);

struct RootState {
  Vec3 position = Vec3::Zero();  // only X and Z are used; height comes from the features
  double yaw = 0.0;
};

// Integrates root velocities from `initial` and places the root-relative
// joint positions back into the world.
JointPositions recover_positions(const MotionFeatures& features, const RootState& initial);

RootState initial_root(const MotionClip& clip);

// 6-D encoding of a rotation matrix and its Gram-Schmidt inverse.
std::array<double, 6> rotation_to_6d(const Eigen::Matrix3d& r);
Eigen::Matrix3d rotation_from_6d(std::span<const double, 6> v);

// Time-average of every feature column.
std::vector<double> mean_feature(const MotionFeatures& f);

// Parametric body record: root translation, per-joint axis-angle rotations
// (root + 23 body joints), shape coefficients. Parsed and stored only.
struct SmplLikeParams {
  Vec3 translation = Vec3::Zero();
  std::vector<double> theta;  // 3 * 24 values
  std::vector<double> beta;

  static constexpr int kThetaSize = 3 * 23 + 3;
  void validate() const;
};

}  // namespace mtalk::motion
