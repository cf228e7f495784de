#include "mtalk/motion/io.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "mtalk/common/error.hpp"

namespace mtalk::motion {

namespace {

void check_version(const json& j, const char* what) {
  if (!j.is_object() || !j.contains("format_version"))
    throw FormatError(std::string(what) + ": missing format_version");
  if (j.at("format_version").get<int>() != kMotionFormatVersion)
    throw FormatError(std::string(what) + ": unsupported format_version " + j.at("format_version").dump());
}

template <typename F>
auto guarded(const char* what, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const json::exception& e) {
    throw FormatError(std::string(what) + ": " + e.what());
  }
}

}  // namespace

json skeleton_to_json(const Skeleton& s) {
  json offsets = json::array();
  for (const auto& o : s.offsets) offsets.push_back({o.x(), o.y(), o.z()});
  return {{"parents", s.parents}, {"offsets", offsets}, {"heel_toe_ids", s.heel_toe_ids}};
}

Skeleton skeleton_from_json(const json& j) {
  return guarded("skeleton", [&] {
    Skeleton s;
    s.parents = j.at("parents").get<std::vector<int>>();
    for (const auto& o : j.at("offsets")) {
      const auto v = o.get<std::vector<double>>();
      if (v.size() != 3) throw FormatError("skeleton: offset must have 3 components");
      s.offsets.emplace_back(v[0], v[1], v[2]);
    }
    s.heel_toe_ids = j.at("heel_toe_ids").get<std::array<int, 4>>();
    s.validate();
    return s;
  });
}

json clip_to_json(const Skeleton& s, const MotionClip& clip) {
  json frames = json::array();
  for (const auto& pose : clip.frames) {
    json quats = json::array();
    for (const auto& q : pose.rotations) quats.push_back({q.w(), q.x(), q.y(), q.z()});
    frames.push_back({{"root", {pose.root.x(), pose.root.y(), pose.root.z()}}, {"quats", quats}});
  }
  return {{"format_version", kMotionFormatVersion},
          {"fps", clip.fps},
          {"skeleton", skeleton_to_json(s)},
          {"frames", frames}};
}

MotionClip clip_from_json(const json& j, Skeleton* skeleton_out) {
  check_version(j, "motion clip");
  return guarded("motion clip", [&] {
    const Skeleton s = skeleton_from_json(j.at("skeleton"));
    MotionClip clip;
    clip.fps = j.at("fps").get<double>();
    for (const auto& f : j.at("frames")) {
      Pose pose;
      const auto r = f.at("root").get<std::vector<double>>();
      if (r.size() != 3) throw FormatError("motion clip: root must have 3 components");
      pose.root = Vec3(r[0], r[1], r[2]);
      for (const auto& q : f.at("quats")) {
        const auto v = q.get<std::vector<double>>();
        if (v.size() != 4) throw FormatError("motion clip: quaternion must have 4 components");
        pose.rotations.emplace_back(v[0], v[1], v[2], v[3]);
      }
      clip.frames.push_back(std::move(pose));
    }
    clip.validate(s.joint_count());
    if (skeleton_out) *skeleton_out = s;
    return clip;
  });
}

json features_to_json(const MotionFeatures& f) {
  json frames = json::array();
  for (int t = 0; t < f.frames; ++t) {
    json row = json::array();
    for (double v : f.row(t)) row.push_back(static_cast<float>(v));
    frames.push_back(std::move(row));
  }
  return {{"format_version", kMotionFormatVersion}, {"n_joints", f.n_joints}, {"dim", f.dim()}, {"frames", frames}};
}

MotionFeatures features_from_json(const json& j) {
  check_version(j, "feature file");
  return guarded("feature file", [&] {
    const int nj = j.at("n_joints").get<int>();
    const int dim = j.at("dim").get<int>();
    if (nj < 1 || dim != 8 + 12 * nj) throw FormatError("feature file: dim does not equal 8 + 12 * n_joints");
    const auto& rows = j.at("frames");
    MotionFeatures f(nj, static_cast<int>(rows.size()));
    for (int t = 0; t < f.frames; ++t) {
      const auto row = rows[t].get<std::vector<double>>();
      if (static_cast<int>(row.size()) != dim) throw FormatError("feature file: row width mismatch");
      std::copy(row.begin(), row.end(), f.row(t).begin());
    }
    f.validate();
    return f;
  });
}

json params_to_json(const FamilyParams& p) {
  return {{"family", family_name(p.family)}, {"speed", p.speed},   {"direction", p.direction},
          {"magnitude", p.magnitude},        {"count", p.count},   {"heading", p.heading},
          {"phrasing", p.phrasing}};
}

FamilyParams params_from_json(const json& j) {
  return guarded("family params", [&] {
    FamilyParams p;
    p.family = parse_family(j.at("family").get<std::string>());
    p.speed = j.value("speed", 1);
    p.direction = j.value("direction", 0);
    p.magnitude = j.value("magnitude", 0);
    p.count = j.value("count", 1);
    p.heading = j.value("heading", 0.0);
    p.phrasing = j.value("phrasing", 0);
    return p;
  });
}

json smpl_to_json(const SmplLikeParams& p) {
  p.validate();
  return {{"format_version", kMotionFormatVersion},
          {"r", {p.translation.x(), p.translation.y(), p.translation.z()}},
          {"theta", p.theta},
          {"beta", p.beta}};
}

SmplLikeParams smpl_from_json(const json& j) {
  check_version(j, "smpl params");
  return guarded("smpl params", [&] {
    SmplLikeParams p;
    const auto r = j.at("r").get<std::vector<double>>();
    if (r.size() != 3) throw FormatError("smpl params: r must have 3 components");
    p.translation = Vec3(r[0], r[1], r[2]);
    p.theta = j.at("theta").get<std::vector<double>>();
    p.beta = j.value("beta", std::vector<double>{});
    p.validate();
    return p;
  });
}

json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFound("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return json::parse(ss.str());
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_json_file(const std::filesystem::path& path, const json& j) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump() << '\n';
}

void save_corpus(const std::filesystem::path& dir, const Skeleton& s, const std::vector<LabeledClip>& clips) {
  std::filesystem::create_directories(dir / "clips");
  json entries = json::array();
  for (std::size_t i = 0; i < clips.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "clips/%05zu.json", i);
    write_json_file(dir / name, clip_to_json(s, clips[i].clip));
    entries.push_back({{"file", name},
                       {"caption", clips[i].caption},
                       {"family", family_name(clips[i].family)},
                       {"task_tags", clips[i].task_tags},
                       {"params", params_to_json(clips[i].params)},
                       {"sibling_of", clips[i].sibling_of}});
  }
  write_json_file(dir / "corpus.json",
                  {{"format_version", kMotionFormatVersion}, {"skeleton", skeleton_to_json(s)}, {"clips", entries}});
}

std::vector<LabeledClip> load_corpus(const std::filesystem::path& dir, Skeleton* skeleton_out) {
  const json manifest = read_json_file(dir / "corpus.json");
  check_version(manifest, "corpus manifest");
  return guarded("corpus manifest", [&] {
    const Skeleton s = skeleton_from_json(manifest.at("skeleton"));
    std::vector<LabeledClip> out;
    for (const auto& e : manifest.at("clips")) {
      LabeledClip c;
      Skeleton clip_skel;
      c.clip = clip_from_json(read_json_file(dir / e.at("file").get<std::string>()), &clip_skel);
      if (clip_skel.parents != s.parents) throw FormatError("corpus: clip skeleton differs from manifest");
      c.caption = e.at("caption").get<std::string>();
      if (c.caption.empty()) throw FormatError("corpus: empty caption");
      c.family = parse_family(e.at("family").get<std::string>());
      c.task_tags = e.value("task_tags", std::vector<std::string>{});
      c.params = params_from_json(e.at("params"));
      c.sibling_of = e.value("sibling_of", -1);
      out.push_back(std::move(c));
    }
    if (skeleton_out) *skeleton_out = s;
    return out;
  });
}

}  // namespace mtalk::motion
