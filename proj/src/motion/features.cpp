#include "mtalk/motion/features.hpp"

#include <cmath>
#include <string>

#include "mtalk/common/error.hpp"

namespace mtalk::motion {

namespace {

Vec3 unyaw(double yaw, const Vec3& v) { return yaw_rotation(-yaw) * v; }

}  // namespace

void MotionFeatures::validate() const {
  require(n_joints >= 1 && frames >= 1, "features: empty feature block");
  require(data.size() == static_cast<std::size_t>(frames) * dim(),
          "features: data size does not equal frames x (8 + 12 * n_joints)");
  const int c0 = layout().contacts();
  for (int f = 0; f < frames; ++f) {
    for (int c = 0; c < dim(); ++c) require(std::isfinite(at(f, c)), "features: non-finite value");
    for (int k = 0; k < 4; ++k) {
      const double v = at(f, c0 + k);
      require(v == 0.0 || v == 1.0, "features: contact entries must be 0 or 1");
    }
  }
}

std::array<double, 6> rotation_to_6d(const Eigen::Matrix3d& r) {
  return {r(0, 0), r(0, 1), r(1, 0), r(1, 1), r(2, 0), r(2, 1)};
}

Eigen::Matrix3d rotation_from_6d(std::span<const double, 6> v) {
  Vec3 a(v[0], v[2], v[4]);
  Vec3 b(v[1], v[3], v[5]);
  const Vec3 c0 = a.normalized();
  const Vec3 c1 = (b - c0.dot(b) * c0).normalized();
  Eigen::Matrix3d r;
  r.col(0) = c0;
  r.col(1) = c1;
  r.col(2) = c0.cross(c1);
  return r;
}

MotionFeatures extract_features(const Skeleton& skeleton, const MotionClip& clip, double contact_velocity_threshold) {
  skeleton.validate();
  require(contact_velocity_threshold > 0.0, "extract_features: contact threshold must be positive");
  require(clip.frame_count() >= 2, "extract_features: need at least 2 frames for velocities");
  const JointPositions pos = forward_kinematics(skeleton, clip);
  const int nj = skeleton.joint_count();
  const int m = clip.frame_count();
  MotionFeatures out(nj, m);
  const FeatureLayout lay = out.layout();

  std::vector<double> yaw(m);
  for (int f = 0; f < m; ++f) yaw[f] = yaw_of(clip.frames[f].rotations[0]);

  for (int f = 0; f < m; ++f) {
    auto row = out.row(f);
    const Vec3 root = pos.at(f, 0);
    row[FeatureLayout::root_height] = root.y();
    for (int j = 0; j < nj; ++j) {
      const Vec3 local = unyaw(yaw[f], pos.at(f, j) - root);
      for (int a = 0; a < 3; ++a) row[lay.positions() + 3 * j + a] = local[a];
    }
    for (int j = 0; j < nj; ++j) {
      Quat q = clip.frames[f].rotations[j];
      if (j == 0) q = yaw_rotation(-yaw[f]) * q;
      const auto r6 = rotation_to_6d(q.normalized().toRotationMatrix());
      for (int a = 0; a < 6; ++a) row[lay.rotations() + 6 * j + a] = r6[a];
    }
    // Velocity entries: forward difference; the last frame copies the penultimate one.
    const int g = f + 1 < m ? f : f - 1;
    row[FeatureLayout::root_ang_vel] = wrap_angle(yaw[g + 1] - yaw[g]);
    const Vec3 root_step = unyaw(yaw[g], pos.at(g + 1, 0) - pos.at(g, 0));
    row[FeatureLayout::root_vel_x] = root_step.x();
    row[FeatureLayout::root_vel_z] = root_step.z();
    for (int j = 0; j < nj; ++j) {
      const Vec3 v = unyaw(yaw[g], pos.at(g + 1, j) - pos.at(g, j));
      for (int a = 0; a < 3; ++a) row[lay.velocities() + 3 * j + a] = v[a];
    }
    for (int k = 0; k < 4; ++k) {
      const int id = skeleton.heel_toe_ids[k];
      const double speed = (pos.at(g + 1, id) - pos.at(g, id)).norm();
      row[lay.contacts() + k] = speed < contact_velocity_threshold ? 1.0 : 0.0;
    }
  }
  return out;
}

JointPositions recover_positions(const MotionFeatures& features, const RootState& initial) {
  require(features.n_joints >= 1 && features.frames >= 1, "recover_positions: empty features");
  require(features.data.size() == static_cast<std::size_t>(features.frames) * features.dim(),
          "recover_positions: feature dimension does not match n_joints");
  const int nj = features.n_joints;
  const FeatureLayout lay = features.layout();
  JointPositions out(features.frames, nj);
  double yaw = initial.yaw;
  double x = initial.position.x();
  double z = initial.position.z();
  for (int f = 0; f < features.frames; ++f) {
    const auto row = features.row(f);
    const Vec3 root(x, row[FeatureLayout::root_height], z);
    const Quat heading = yaw_rotation(yaw);
    for (int j = 0; j < nj; ++j) {
      const Vec3 local(row[lay.positions() + 3 * j], row[lay.positions() + 3 * j + 1],
                       row[lay.positions() + 3 * j + 2]);
      out.at(f, j) = heading * local + root;
    }
    const Vec3 step = heading * Vec3(row[FeatureLayout::root_vel_x], 0.0, row[FeatureLayout::root_vel_z]);
    x += step.x();
    z += step.z();
    yaw += row[FeatureLayout::root_ang_vel];
  }
  return out;
}

RootState initial_root(const MotionClip& clip) {
  require(!clip.frames.empty(), "initial_root: empty clip");
  RootState r;
  r.position = clip.frames[0].root;
  r.yaw = yaw_of(clip.frames[0].rotations.at(0));
  return r;
}

std::vector<double> mean_feature(const MotionFeatures& f) {
  std::vector<double> mean(f.dim(), 0.0);
  for (int t = 0; t < f.frames; ++t)
    for (int c = 0; c < f.dim(); ++c) mean[c] += f.at(t, c);
  for (auto& v : mean) v /= f.frames;
  return mean;
}

void SmplLikeParams::validate() const {
  require(static_cast<int>(theta.size()) == kThetaSize,
          "smpl params: theta must have " + std::to_string(kThetaSize) + " values");
  for (double b : beta) require(std::isfinite(b), "smpl params: non-finite beta");
  for (double t : theta) require(std::isfinite(t), "smpl params: non-finite theta");
  require(translation.allFinite(), "smpl params: non-finite translation");
}

}  // namespace mtalk::motion
