#include "mtalk/motion/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "mtalk/common/error.hpp"

namespace mtalk::motion {

namespace {

constexpr double kPi = std::numbers::pi;

// Joints driven by the limb oscillators; -1 when the rig has no such joint.
struct LimbRoles {
  int left_leg = -1, right_leg = -1, left_arm = -1, right_arm = -1;
};

LimbRoles roles_for(const Skeleton& s) {
  if (s.joint_count() == 5) return {1, 2, 3, 4};
  if (s.joint_count() == 22) return {1, 2, 16, 17};
  return {};
}

struct GenState {
  double x = 0.0, z = 0.0, yaw = 0.0, height = 0.9;
};

double smoothstep(double u) {
  u = std::clamp(u, 0.0, 1.0);
  return u * u * u * (u * (u * 6.0 - 15.0) + 10.0);
}

Quat axis_angle(double angle, const Vec3& axis) { return Quat(Eigen::AngleAxisd(angle, axis)); }

// Per-frame offsets produced by a family program.
struct FrameDelta {
  double step = 0.0;  // signed displacement along the facing direction this frame
  double yaw = 0.0;   // absolute yaw for this frame
  double dy = 0.0;
  double roll = 0.0, pitch = 0.0;
  double leg = 0.0, arm = 0.0;           // swing about X, legs opposite, arms opposite legs
  double wave_left = 0.0, wave_right = 0.0;  // hand rotation about Z
};

FrameDelta program(const FamilyParams& p, int t, int n, double fps, double yaw0) {
  FrameDelta d;
  d.yaw = yaw0;
  const double time = t / fps;
  const double s = static_cast<double>(t) / n;
  const double env = std::pow(std::sin(kPi * s), 2);
  switch (p.family) {
    case MotionFamily::walk: {
      static constexpr double speeds[] = {0.025, 0.045, 0.065};
      const double freq = 1.6 + 0.3 * p.speed;
      const double ramp = std::min(1.0, std::min(t, n - 1 - t) / 4.0);
      const double phase = 2.0 * kPi * freq * time;
      d.step = speeds[std::clamp(p.speed, 0, 2)] * ramp * (p.direction == 1 ? -1.0 : 1.0);
      d.dy = -0.02 * ramp * 0.5 * (1.0 - std::cos(2.0 * phase));
      d.roll = 0.04 * ramp * std::sin(phase);
      d.leg = 0.5 * ramp * std::sin(phase);
      d.arm = -0.4 * ramp * std::sin(phase);
      break;
    }
    case MotionFamily::turn: {
      const double total = (p.magnitude == 1 ? kPi : kPi / 2.0) * (p.direction == 1 ? -1.0 : 1.0);
      d.yaw = yaw0 + total * smoothstep(n > 1 ? static_cast<double>(t) / (n - 1) : 1.0);
      const double phase = 2.0 * kPi * 1.5 * time;
      d.leg = 0.25 * env * std::sin(phase);
      d.arm = -0.15 * env * std::sin(phase);
      d.dy = -0.01 * env * 0.5 * (1.0 - std::cos(2.0 * phase));
      break;
    }
    case MotionFamily::jump: {
      const int count = std::max(1, p.count);
      const double height = p.magnitude == 1 ? 0.35 : 0.15;
      // Phase reaches an exact multiple of the count on the last frame, which lands in the rest pose.
      const double u_all = n > 1 ? static_cast<double>(t) / (n - 1) : 1.0;
      const double local = std::fmod(count * u_all, 1.0);
      if (local < 0.25) {
        const double c = std::pow(std::sin(kPi * local / 0.25), 2);
        d.dy = -0.08 * c;
        d.pitch = 0.15 * c;
        d.leg = -0.3 * c;
      } else if (local < 0.75) {
        const double u = (local - 0.25) / 0.5;
        d.dy = height * 4.0 * u * (1.0 - u);
        d.arm = 0.9 * std::sin(kPi * u);
        d.leg = 0.2 * std::sin(kPi * u);
      } else {
        const double c = std::pow(std::sin(kPi * (local - 0.75) / 0.25), 2);
        d.dy = -0.08 * c;
        d.pitch = 0.15 * c;
        d.leg = -0.3 * c;
      }
      break;
    }
    case MotionFamily::wave: {
      const double osc = std::sin(2.0 * kPi * 1.5 * time);
      const double lift = 0.6 + 0.4 * std::sin(2.0 * kPi * 1.2 * time);
      if (p.direction == 0) {
        d.roll = 0.25 * env * lift;
        d.wave_left = 0.8 * env * osc;
      } else if (p.direction == 1) {
        d.roll = -0.25 * env * lift;
        d.wave_right = 0.8 * env * osc;
      } else {
        d.pitch = -0.2 * env * lift;
        d.wave_left = 0.8 * env * osc;
        d.wave_right = -0.8 * env * osc;
      }
      break;
    }
    case MotionFamily::stand: {
      d.dy = 0.006 * env * std::sin(2.0 * kPi * 0.35 * time);
      d.roll = 0.01 * env * std::sin(2.0 * kPi * 0.2 * time);
      break;
    }
  }
  return d;
}

void append_segment(const Skeleton& sk, const FamilyParams& p, int n, double fps, GenState& st,
                    std::vector<Pose>& out) {
  const LimbRoles roles = roles_for(sk);
  const double yaw0 = st.yaw;
  for (int t = 0; t < n; ++t) {
    const FrameDelta d = program(p, t, n, fps, yaw0);
    Pose pose;
    pose.root = Vec3(st.x, st.height + d.dy, st.z);
    pose.rotations.assign(sk.joint_count(), Quat::Identity());
    pose.rotations[0] = (yaw_rotation(d.yaw) * axis_angle(d.pitch, Vec3::UnitX()) * axis_angle(d.roll, Vec3::UnitZ()))
                            .normalized();
    auto set = [&](int j, const Quat& q) {
      if (j > 0) pose.rotations[j] = q.normalized();
    };
    set(roles.left_leg, axis_angle(d.leg, Vec3::UnitX()));
    set(roles.right_leg, axis_angle(-d.leg, Vec3::UnitX()));
    set(roles.left_arm, axis_angle(d.arm, Vec3::UnitX()) * axis_angle(d.wave_left, Vec3::UnitZ()));
    set(roles.right_arm, axis_angle(-d.arm, Vec3::UnitX()) * axis_angle(d.wave_right, Vec3::UnitZ()));
    out.push_back(std::move(pose));
    const Vec3 fwd = yaw_rotation(d.yaw) * Vec3::UnitZ();
    st.x += d.step * fwd.x();
    st.z += d.step * fwd.z();
    st.yaw = d.yaw;
  }
}

std::vector<std::string> default_tags() {
  return {"text-to-motion", "motion-to-text", "motion-reasoning", "motion-editing"};
}

LabeledClip slice(const LabeledClip& src, int begin, int end, const FamilyParams& params) {
  LabeledClip c;
  c.clip.fps = src.clip.fps;
  c.clip.frames.assign(src.clip.frames.begin() + begin, src.clip.frames.begin() + end);
  c.params = params;
  c.family = params.family;
  c.caption = caption_for(params);
  c.task_tags = default_tags();
  return c;
}

}  // namespace

const std::vector<MotionFamily>& all_families() {
  static const std::vector<MotionFamily> f{MotionFamily::walk, MotionFamily::turn, MotionFamily::jump,
                                           MotionFamily::wave, MotionFamily::stand};
  return f;
}

std::string family_name(MotionFamily f) {
  switch (f) {
    case MotionFamily::walk: return "walk";
    case MotionFamily::turn: return "turn";
    case MotionFamily::jump: return "jump";
    case MotionFamily::wave: return "wave";
    case MotionFamily::stand: return "stand";
  }
  return "stand";
}

MotionFamily parse_family(const std::string& name) {
  for (auto f : all_families())
    if (family_name(f) == name) return f;
  throw InvalidArgument("unknown motion family '" + name + "'");
}

void CorpusConfig::validate() const {
  require(fps > 0.0, "corpus config: fps must be positive");
  require(downsample >= 1, "corpus config: downsample must be positive");
  require(min_frames >= 2 && min_frames <= max_frames, "corpus config: need 2 <= min_frames <= max_frames");
  const int lo = (min_frames + downsample - 1) / downsample;
  require(lo * downsample <= max_frames, "corpus config: no multiple of downsample inside the frame range");
  require(sibling_rate >= 0.0 && sibling_rate <= 1.0, "corpus config: sibling_rate must be in [0, 1]");
}

double standing_height(const Skeleton& skeleton) {
  MotionClip rest;
  rest.frames.push_back({Vec3::Zero(), std::vector<Quat>(skeleton.joint_count(), Quat::Identity())});
  const auto pos = forward_kinematics(skeleton, rest);
  double lowest = 0.0;
  for (int j = 0; j < skeleton.joint_count(); ++j) lowest = std::min(lowest, pos.at(0, j).y());
  return -lowest;
}

FamilyParams random_params(Rng& rng, MotionFamily family) {
  FamilyParams p;
  p.family = family;
  p.heading = uniform(rng, -kPi, kPi);
  p.phrasing = uniform_int(rng, 0, 2);
  switch (family) {
    case MotionFamily::walk:
      p.speed = uniform_int(rng, 0, 2);
      p.direction = uniform(rng) < 0.75 ? 0 : 1;
      break;
    case MotionFamily::turn:
      p.direction = uniform_int(rng, 0, 1);
      p.magnitude = uniform_int(rng, 0, 1);
      break;
    case MotionFamily::jump:
      p.magnitude = uniform_int(rng, 0, 1);
      p.count = uniform_int(rng, 1, 3);
      break;
    case MotionFamily::wave:
      p.direction = uniform_int(rng, 0, 2);
      break;
    case MotionFamily::stand:
      break;
  }
  return p;
}

std::string caption_for(const FamilyParams& p) {
  const int v = ((p.phrasing % 3) + 3) % 3;
  switch (p.family) {
    case MotionFamily::walk: {
      static const char* adverb[] = {"slowly", "at a normal pace", "quickly"};
      const std::string dir = p.direction == 1 ? "backward" : "forward";
      const std::string speed = adverb[std::clamp(p.speed, 0, 2)];
      if (v == 0) return "a person walks " + dir + " " + speed;
      if (v == 1) return "someone walks " + speed + " " + dir;
      return "the person is walking " + dir + " " + speed;
    }
    case MotionFamily::turn: {
      const std::string side = p.direction == 1 ? "right" : "left";
      if (p.magnitude == 1) {
        if (v == 0) return "a person turns around to the " + side;
        if (v == 1) return "someone turns all the way around toward the " + side;
        return "the person turns to the " + side + " until facing backward";
      }
      if (v == 0) return "a person turns " + side;
      if (v == 1) return "someone turns a quarter turn to the " + side;
      return "the person turns to face the " + side;
    }
    case MotionFamily::jump: {
      static const char* times[] = {"once", "twice", "three times"};
      const std::string n = times[std::clamp(p.count, 1, 3) - 1];
      const std::string h = p.magnitude == 1 ? "high" : "slightly";
      if (v == 0) return "a person jumps " + h + " " + n;
      if (v == 1) return "someone jumps " + n + " " + (p.magnitude == 1 ? "very high" : "low to the ground");
      return "the person jumps in place " + n + (p.magnitude == 1 ? " with great height" : " with small hops");
    }
    case MotionFamily::wave: {
      static const char* hands[] = {"the left hand", "the right hand", "both hands"};
      const std::string hand = hands[std::clamp(p.direction, 0, 2)];
      if (v == 0) return "a person waves " + hand;
      if (v == 1) return "someone waves hello with " + hand;
      return "the person stands and waves " + hand;
    }
    case MotionFamily::stand: {
      if (v == 0) return "a person stands still";
      if (v == 1) return "someone stands in place breathing calmly";
      return "the person is standing still and relaxed";
    }
  }
  return "a person stands still";
}

LabeledClip synth_clip(const Skeleton& skeleton, const FamilyParams& params, int frames, double fps,
                       const Vec3& start) {
  skeleton.validate();
  require(frames >= 2, "synth_clip: need at least 2 frames");
  require(fps > 0.0, "synth_clip: fps must be positive");
  GenState st;
  st.x = start.x();
  st.z = start.z();
  st.yaw = params.heading;
  st.height = standing_height(skeleton);
  LabeledClip out;
  out.clip.fps = fps;
  append_segment(skeleton, params, frames, fps, st, out.clip.frames);
  out.params = params;
  out.family = params.family;
  out.caption = caption_for(params);
  out.task_tags = default_tags();
  return out;
}

std::vector<LabeledClip> synth_corpus(std::uint64_t seed, int count, const Skeleton& skeleton,
                                      const CorpusConfig& config) {
  require(count >= 1, "synth_corpus: count must be at least 1");
  config.validate();
  skeleton.validate();
  const int lo = (config.min_frames + config.downsample - 1) / config.downsample;
  const int hi = config.max_frames / config.downsample;
  std::vector<LabeledClip> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) {
    Rng rng = make_rng(seed, static_cast<std::uint64_t>(i));
    const bool can_sibling = i > 0 && out.back().sibling_of < 0 && hi > lo;
    if (can_sibling && uniform(rng) < config.sibling_rate) {
      const LabeledClip& prev = out.back();
      const int prev_units = prev.clip.frame_count() / config.downsample;
      int units = uniform_int(rng, lo, hi - 1);
      if (units >= prev_units) ++units;
      LabeledClip c = synth_clip(skeleton, prev.params, units * config.downsample, config.fps);
      c.sibling_of = i - 1;
      out.push_back(std::move(c));
      continue;
    }
    const auto family = all_families()[uniform_int(rng, 0, kFamilyCount - 1)];
    const FamilyParams p = random_params(rng, family);
    const int units = uniform_int(rng, lo, hi);
    out.push_back(synth_clip(skeleton, p, units * config.downsample, config.fps));
  }
  return out;
}

std::vector<TwoPhaseClip> synth_two_phase(std::uint64_t seed, int count, const Skeleton& skeleton, int phase_frames,
                                          double fps) {
  require(count >= 1, "synth_two_phase: count must be at least 1");
  require(phase_frames >= 2, "synth_two_phase: phase_frames must be at least 2");
  skeleton.validate();
  std::vector<TwoPhaseClip> out;
  out.reserve(count);
  const double height = standing_height(skeleton);
  for (int i = 0; i < count; ++i) {
    Rng rng = make_rng(seed, 0x7e0000ULL + static_cast<std::uint64_t>(i));
    const auto fa = all_families()[uniform_int(rng, 0, kFamilyCount - 1)];
    auto fb = all_families()[uniform_int(rng, 0, kFamilyCount - 2)];
    if (fb == fa) fb = all_families()[kFamilyCount - 1];
    const FamilyParams pa = random_params(rng, fa);
    FamilyParams pb = random_params(rng, fb);
    GenState st;
    st.yaw = pa.heading;
    st.height = height;
    TwoPhaseClip tp;
    tp.split = phase_frames;
    tp.whole.clip.fps = fps;
    append_segment(skeleton, pa, phase_frames, fps, st, tp.whole.clip.frames);
    pb.heading = st.yaw;
    append_segment(skeleton, pb, phase_frames, fps, st, tp.whole.clip.frames);
    tp.whole.params = pa;
    tp.whole.family = fa;
    tp.whole.caption = caption_for(pa) + ", then " + caption_for(pb);
    tp.whole.task_tags = default_tags();
    tp.first = slice(tp.whole, 0, phase_frames, pa);
    tp.second = slice(tp.whole, phase_frames, 2 * phase_frames, pb);
    out.push_back(std::move(tp));
  }
  return out;
}

}  // namespace mtalk::motion
