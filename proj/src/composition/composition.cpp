#include "mtalk/composition/composition.hpp"

#include <algorithm>

#include "mtalk/common/error.hpp"

namespace mtalk::comp {

using motion::MotionFeatures;
using tok::MotionTokens;

void Strategy::validate() const {
  if (kind == StrategyKind::past_condition && window < 1)
    throw InvalidArgument("past-condition window must be at least 1 token");
}

Strategy parse_strategy(const std::string& s, int window) {
  if (s == "independent") return Strategy::independent();
  if (s == "joint") return Strategy::joint();
  if (s == "past") {
    Strategy p = Strategy::past(window);
    p.validate();
    return p;
  }
  throw InvalidArgument("unknown composition strategy '" + s + "' (independent|past|joint)");
}

std::string strategy_name(const Strategy& s) {
  switch (s.kind) {
    case StrategyKind::independent: return "independent";
    case StrategyKind::past_condition: return "past";
    case StrategyKind::tokens_joint: return "joint";
  }
  return "joint";
}

namespace {

MotionFeatures concat_frames(const std::vector<MotionFeatures>& parts) {
  MotionFeatures out(parts.front().n_joints, 0);
  for (const auto& p : parts) {
    out.data.insert(out.data.end(), p.data.begin(), p.data.end());
    out.frames += p.frames;
  }
  return out;
}

MotionTokens tail(const MotionTokens& t, int n) {
  MotionTokens out;
  for (const auto& layer : t.layers) out.layers.emplace_back(layer.end() - n, layer.end());
  return out;
}

}  // namespace

MotionFeatures compose(const tok::MotionTokenizer& tk, const std::vector<MotionTokens>& segments,
                       const Strategy& strategy) {
  strategy.validate();
  // Checks layer counts and empty segments.
  const MotionTokens joined = tok::concat_tokens(segments);
  joined.validate(tk.config().codebook_size);
  if (joined.depth() != tk.config().layers)
    throw InvalidArgument("segments have " + std::to_string(joined.depth()) + " layers, tokenizer expects " +
                          std::to_string(tk.config().layers));

  if (strategy.kind == StrategyKind::tokens_joint || segments.size() == 1) return tk.decode(joined);

  std::vector<MotionFeatures> parts;
  parts.push_back(tk.decode(segments.front()));
  const int l = tk.config().downsample;
  for (std::size_t i = 1; i < segments.size(); ++i) {
    if (strategy.kind == StrategyKind::independent) {
      parts.push_back(tk.decode(segments[i]));
      continue;
    }
    const int w = std::min(strategy.window, segments[i - 1].length());
    auto full = tk.decode(tok::concat_tokens({tail(segments[i - 1], w), segments[i]}));
    const auto drop = static_cast<std::ptrdiff_t>(w) * l * full.dim();
    full.data.erase(full.data.begin(), full.data.begin() + drop);
    full.frames -= w * l;
    parts.push_back(std::move(full));
  }
  return concat_frames(parts);
}

std::vector<int> seam_frames(const std::vector<MotionTokens>& segments, int downsample) {
  std::vector<int> out;
  int frame = 0;
  for (std::size_t i = 0; i + 1 < segments.size(); ++i) {
    frame += segments[i].length() * downsample;
    out.push_back(frame);
  }
  return out;
}

SeamReport seam_metrics(const motion::JointPositions& p, const std::vector<int>& seams,
                        const motion::JointPositions* ground_truth) {
  SeamReport r;
  for (int s : seams) {
    if (s < 1 || s + 1 >= p.frames)
      throw InvalidArgument("seam frame " + std::to_string(s) + " outside [1, " + std::to_string(p.frames - 2) + "]");
    Seam seam;
    seam.frame = s;
    for (int j = 0; j < p.joints; ++j) {
      seam.displacement = std::max(seam.displacement, (p.at(s, j) - p.at(s - 1, j)).norm());
      seam.acceleration = std::max(seam.acceleration, (p.at(s + 1, j) - 2 * p.at(s, j) + p.at(s - 1, j)).norm());
    }
    r.seams.push_back(seam);
  }
  if (ground_truth) r.errors = metrics::mpjpe_family(p, *ground_truth);
  return r;
}

const StrategyScore& OrderingResult::score(StrategyKind k) const {
  for (const auto& s : scores)
    if (s.strategy.kind == k) return s;
  throw NotFound("no score for strategy");
}

bool OrderingResult::mpjpe_ordered() const {
  return score(StrategyKind::tokens_joint).mpjpe < score(StrategyKind::past_condition).mpjpe &&
         score(StrategyKind::past_condition).mpjpe < score(StrategyKind::independent).mpjpe;
}

bool OrderingResult::accl_ordered() const {
  return score(StrategyKind::tokens_joint).accl < score(StrategyKind::past_condition).accl &&
         score(StrategyKind::past_condition).accl < score(StrategyKind::independent).accl;
}

OrderingResult ordering_experiment(const tok::MotionTokenizer& tk, const motion::Skeleton& skeleton,
                                   const std::vector<motion::TwoPhaseClip>& pairs, int window) {
  if (pairs.empty()) throw InvalidArgument("ordering experiment needs at least one pair");
  const std::vector<Strategy> strategies{Strategy::independent(), Strategy::past(window), Strategy::joint()};
  OrderingResult res;
  for (const auto& s : strategies) res.scores.push_back({s});
  int joint_wins = 0;
  for (const auto& tp : pairs) {
    const std::vector<MotionTokens> segs{tk.encode(motion::extract_features(skeleton, tp.first.clip)),
                                         tk.encode(motion::extract_features(skeleton, tp.second.clip))};
    const auto gt = motion::forward_kinematics(skeleton, tp.whole.clip);
    const auto root = motion::initial_root(tp.whole.clip);
    const auto seams = seam_frames(segs, tk.config().downsample);
    std::vector<double> disp;
    for (std::size_t k = 0; k < strategies.size(); ++k) {
      const auto pos = motion::recover_positions(compose(tk, segs, strategies[k]), root);
      const auto rep = seam_metrics(pos, seams, &gt);
      auto& sc = res.scores[k];
      sc.mpjpe += rep.errors->mpjpe;
      sc.pa_mpjpe += rep.errors->pa_mpjpe;
      sc.accl += rep.errors->accl;
      sc.seam_displacement += rep.seams.front().displacement;
      disp.push_back(rep.seams.front().displacement);
    }
    joint_wins += disp[2] <= disp[0];
  }
  const double n = static_cast<double>(pairs.size());
  for (auto& sc : res.scores) {
    sc.mpjpe /= n;
    sc.pa_mpjpe /= n;
    sc.accl /= n;
    sc.seam_displacement /= n;
  }
  res.pairs = static_cast<int>(pairs.size());
  res.joint_le_independent_seam = joint_wins / n;
  return res;
}

}  // namespace mtalk::comp
