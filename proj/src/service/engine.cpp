#include "mtalk/service/engine.hpp"

#include <algorithm>

#include "mtalk/common/error.hpp"
#include "mtalk/motion/io.hpp"

namespace mtalk::service {

using nlohmann::json;

json ComposedMotion::to_json() const {
  json frames = json::array();
  for (int f = 0; f < positions.frames; ++f) {
    std::vector<double> row;
    row.reserve(static_cast<std::size_t>(positions.joints) * 3);
    for (int j = 0; j < positions.joints; ++j) {
      const auto& p = positions.at(f, j);
      row.insert(row.end(), {p.x(), p.y(), p.z()});
    }
    frames.push_back(std::move(row));
  }
  return {{"fps", fps},
          {"joints", positions.joints},
          {"parents", parents},
          {"frames", std::move(frames)},
          {"seams", seams},
          {"strategy", comp::strategy_name(strategy)},
          {"window", strategy.window}};
}

Engine::Engine(EngineParts parts) : p_(std::move(parts)) {
  if (!p_.generate) throw InvalidArgument("engine: no generator");
  if (p_.tokenizer.config().layers != p_.vocab.layers() ||
      p_.tokenizer.config().codebook_size != p_.vocab.codebook_size())
    throw InvalidArgument("engine: tokenizer and vocabulary disagree on layers or codebook size");
  if (p_.tokenizer.config().n_joints != p_.skeleton.joint_count())
    throw InvalidArgument("engine: tokenizer joint count does not match the skeleton");
  if (p_.max_new_tokens < 1 || p_.context < 2) throw InvalidArgument("engine: bad token budget");
}

Engine Engine::load(const AppConfig& cfg, std::optional<lm::DecodingParams> decoding) {
  const auto& paths = cfg.paths;
  auto model = std::make_shared<lm::LanguageModel>(lm::LanguageModel::load(paths.lm_ckpt()));
  EngineParts parts{
      vocab::UnifiedVocab::load(paths.vocab_file()),
      tok::MotionTokenizer::load(paths.tokenizer_ckpt()),
      cfg.make_skeleton(),
      cfg.corpus.generator.fps,
      model->config().context,
      decoding.value_or(cfg.decoding).max_new_tokens,
      std::nullopt,
      {},
  };
  if (model->config().vocab != parts.vocab.size())
    throw FormatError("language model vocabulary (" + std::to_string(model->config().vocab) +
                      ") does not match vocab.json (" + std::to_string(parts.vocab.size()) + ")");
  if (cfg.vision.enabled && fs::exists(paths.visual_ckpt()))
    parts.visual = vision::VisualEncoder::from_checkpoint(ad::load_checkpoint(paths.visual_ckpt()));
  lm::DecodingParams dp = decoding.value_or(cfg.decoding);
  dp.validate();
  dp.stop_id = parts.vocab.eos();
  parts.generate = [model, dp](const std::vector<int>& prompt, const ad::Tensor<float>* visual, std::uint64_t seed) {
    auto p = dp;
    p.seed = seed;
    return model->generate(prompt, visual, p);
  };
  Engine e(std::move(parts));
  e.model_ = std::move(model);
  return e;
}

Answer Engine::respond(const conv::Session& history, const std::string& text, const vision::VisualFeature* visual,
                       std::uint64_t seed) const {
  if (text.empty()) throw InvalidArgument("empty message");
  return respond_ids(history, p_.vocab.encode_text(text), visual, seed);
}

Answer Engine::respond_ids(const conv::Session& history, const std::vector<int>& source_ids,
                           const vision::VisualFeature* visual, std::uint64_t seed) const {
  if (visual && !p_.visual) throw InvalidArgument("this model has no visual encoder");
  // The image placeholder sits in the first user turn only.
  const bool first_visual = visual && history.turns.empty();
  const auto prompt = conv::render_prompt(history, source_ids, first_visual, p_.vocab);

  std::optional<ad::Tensor<float>> rows;
  if (visual) rows = p_.visual->encode(*visual);
  const int extra = rows ? rows->rows() - 1 : 0;
  const int need = static_cast<int>(prompt.size()) + extra + p_.max_new_tokens;
  if (need > p_.context)
    throw ContextOverflow("prompt of " + std::to_string(prompt.size() + extra) + " tokens plus an answer budget of " +
                          std::to_string(p_.max_new_tokens) + " exceeds the context of " + std::to_string(p_.context));

  Answer a;
  a.turn.source_ids = source_ids;
  a.turn.visual = first_visual;
  auto out = p_.generate(prompt, rows ? &*rows : nullptr, seed);
  // Anything after the first </s> is discarded; a missing one is appended.
  const auto eos = std::find(out.begin(), out.end(), p_.vocab.eos());
  if (eos == out.end()) {
    a.truncated = true;
    out.push_back(p_.vocab.eos());
  } else {
    out.erase(eos + 1, out.end());
  }
  for (int id : out)
    if (id < 0 || id >= p_.vocab.size()) throw InvalidArgument("generator emitted id " + std::to_string(id));
  a.turn.answer_ids = out;

  a.motions = p_.vocab.extract_motion_spans(out);
  a.kind = a.motions.empty() ? "text" : "motion";
  std::vector<int> text_ids;
  bool in_span = false;
  for (int id : out) {
    if (id == p_.vocab.som()) in_span = true;
    const auto kind = p_.vocab.classify(id).kind;
    const bool motion = in_span || kind == vocab::IdKind::motion || kind == vocab::IdKind::eom;
    if (id == p_.vocab.eom()) in_span = false;
    if (!motion && id != p_.vocab.eos()) text_ids.push_back(id);
  }
  a.text = p_.vocab.decode_text(text_ids);
  return a;
}

ComposedMotion Engine::compose(const std::vector<tok::MotionTokens>& segments, const comp::Strategy& strategy) const {
  ComposedMotion m;
  m.fps = p_.fps;
  m.strategy = strategy;
  m.features = comp::compose(p_.tokenizer, segments, strategy);
  m.positions = motion::recover_positions(m.features, motion::RootState{});
  m.seams = comp::seam_frames(segments, p_.tokenizer.config().downsample);
  m.parents = p_.skeleton.parents;
  return m;
}

namespace {

std::vector<motion::Vec3> parse_pose(const json& j) {
  if (!j.is_array() || j.empty()) throw InvalidArgument("pose must be a non-empty list of [x, y, z] joints");
  std::vector<motion::Vec3> out;
  for (const auto& p : j) {
    if (!p.is_array() || p.size() != 3) throw InvalidArgument("pose joint must be [x, y, z]");
    out.emplace_back(p[0].get<double>(), p[1].get<double>(), p[2].get<double>());
  }
  return out;
}

}  // namespace

vision::VisualFeature Engine::parse_pose_condition(const json& j) const {
  if (!p_.visual) throw InvalidArgument("this model has no visual encoder");
  if (!j.is_object() || j.size() != 1)
    throw InvalidArgument("pose_condition must have exactly one of pose, poses, feature, feature_file");
  vision::VisualFeature f;
  try {
    if (j.contains("pose")) {
      f = vision::pose_render_features({parse_pose(j["pose"])});
    } else if (j.contains("poses")) {
      std::vector<std::vector<motion::Vec3>> poses;
      if (!j["poses"].is_array() || j["poses"].empty()) throw InvalidArgument("poses must be a non-empty list");
      for (const auto& p : j["poses"]) poses.push_back(parse_pose(p));
      f = vision::pose_render_features(poses);
    } else if (j.contains("feature")) {
      f = vision::feature_from_json(j["feature"]);
    } else if (j.contains("feature_file")) {
      f = vision::load_feature_file(j["feature_file"].get<std::string>());
    } else {
      throw InvalidArgument("pose_condition must have exactly one of pose, poses, feature, feature_file");
    }
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("pose_condition: ") + e.what());
  } catch (const FormatError& e) {
    throw InvalidArgument(std::string("pose_condition: ") + e.what());
  }
  if (f.dim() != p_.visual->config().feature_dim)
    throw InvalidArgument("pose_condition feature width " + std::to_string(f.dim()) + " != encoder input " +
                          std::to_string(p_.visual->config().feature_dim));
  return f;
}

}  // namespace mtalk::service
