#include "mtalk/vision/vision.hpp"

#include <cmath>
#include <fstream>

#include "mtalk/common/error.hpp"
#include "mtalk/common/rng.hpp"

namespace mtalk::vision {

using ad::Tape;
using nlohmann::json;

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw InvalidArgument(msg);
}

Tensor<float> gaussian(Rng& rng, const ad::Shape& shape, double sd) {
  Tensor<float> t(shape);
  for (auto& v : t.data) v = static_cast<float>(normal(rng, 0.0, sd));
  return t;
}

int cell(double v, double lo, double size, int res) {
  const double c = std::floor((v - lo) / size);
  return c < 0 || c >= res ? -1 : static_cast<int>(c);
}

std::string pl(int i, const char* part) { return "perceiver.layer" + std::to_string(i) + "." + part; }

}  // namespace

void VisualFeature::validate() const {
  require(rows.shape.size() == 2 && rows.rows() >= 1, "visual feature: need a [T, D_v] array with T >= 1");
  for (float v : rows.data) require(std::isfinite(v), "visual feature: non-finite value");
}

void GridSpec::validate() const {
  require(resolution >= 1, "grid: resolution must be positive");
  require(extent > 0 && std::isfinite(extent), "grid: extent must be positive");
}

std::pair<int, int> splat_cells(const motion::Vec3& p, const GridSpec& g) {
  const double size = g.extent / g.resolution;
  const double x0 = g.origin.x() - g.extent / 2, y0 = g.origin.y() - g.extent / 2, z0 = g.origin.z() - g.extent / 2;
  const int ix = cell(p.x(), x0, size, g.resolution);
  const int iy = cell(p.y(), y0, size, g.resolution);
  const int iz = cell(p.z(), z0, size, g.resolution);
  const int r = g.resolution;
  return {ix >= 0 && iz >= 0 ? iz * r + ix : -1, ix >= 0 && iy >= 0 ? r * r + iy * r + ix : -1};
}

namespace {

void splat(float* row, const std::vector<motion::Vec3>& pose, const GridSpec& g, float weight) {
  for (const auto& p : pose) {
    require(p.allFinite(), "pose_render_features: non-finite joint position");
    const auto [top, front] = splat_cells(p, g);
    if (top >= 0) row[top] += weight;
    if (front >= 0) row[front] += weight;
  }
}

}  // namespace

VisualFeature pose_render_features(const std::vector<std::vector<motion::Vec3>>& poses, const GridSpec& grid) {
  grid.validate();
  require(!poses.empty(), "pose_render_features: no poses");
  VisualFeature f{Tensor<float>({static_cast<int>(poses.size()), grid.feature_dim()}), kPoseSplatProvider};
  for (std::size_t i = 0; i < poses.size(); ++i) splat(&f.rows.at(static_cast<int>(i), 0), poses[i], grid, 1.0f);
  return f;
}

VisualFeature clip_image_features(const motion::JointPositions& pos, const GridSpec& grid) {
  grid.validate();
  require(pos.frames >= 1 && pos.joints >= 1, "clip_image_features: empty clip");
  auto frame = [&](int f) {
    return std::vector<motion::Vec3>(pos.data.begin() + static_cast<std::ptrdiff_t>(f) * pos.joints,
                                     pos.data.begin() + static_cast<std::ptrdiff_t>(f + 1) * pos.joints);
  };
  VisualFeature out{Tensor<float>({1, grid.feature_dim()}), kPoseSplatProvider};
  splat(out.rows.ptr(), frame(0), grid, 1.0f);
  splat(out.rows.ptr(), frame(pos.frames - 1), grid, 0.5f);
  return out;
}

json feature_to_json(const VisualFeature& f) {
  f.validate();
  json rows = json::array();
  for (int r = 0; r < f.frames(); ++r) rows.push_back(std::vector<float>(&f.rows.at(r, 0), &f.rows.at(r, 0) + f.dim()));
  return {{"provider", f.provider}, {"d_v", f.dim()}, {"t", f.frames()}, {"rows", rows}};
}

VisualFeature feature_from_json(const json& j) {
  try {
    const int dv = j.at("d_v"), t = j.at("t");
    if (dv < 1 || t < 1) throw FormatError("feature file: d_v and t must be positive");
    const auto& rows = j.at("rows");
    if (!rows.is_array() || static_cast<int>(rows.size()) != t) throw FormatError("feature file: row count differs from t");
    VisualFeature f{Tensor<float>({t, dv}), j.at("provider").get<std::string>()};
    for (int r = 0; r < t; ++r) {
      const auto v = rows[static_cast<std::size_t>(r)].get<std::vector<float>>();
      if (static_cast<int>(v.size()) != dv) throw FormatError("feature file: row " + std::to_string(r) + " has wrong width");
      std::copy(v.begin(), v.end(), &f.rows.at(r, 0));
    }
    try {
      f.validate();
    } catch (const InvalidArgument& e) {
      throw FormatError(std::string("feature file: ") + e.what());
    }
    return f;
  } catch (const json::exception& e) {
    throw FormatError(std::string("feature file: ") + e.what());
  }
}

void save_feature_file(const std::filesystem::path& path, const VisualFeature& f) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out << feature_to_json(f).dump();
}

VisualFeature load_feature_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot read " + path.string());
  try {
    return feature_from_json(json::parse(in));
  } catch (const json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

Arch parse_arch(const std::string& s) {
  if (s == "linear") return Arch::linear;
  if (s == "perceiver") return Arch::perceiver;
  throw InvalidArgument("unknown visual architecture '" + s + "'");
}

std::string arch_name(Arch a) { return a == Arch::linear ? "linear" : "perceiver"; }

// ---- perceiver config -------------------------------------------------------

void PerceiverConfig::validate() const {
  require(depth >= 1 && queries >= 1 && media_dim >= 1 && heads >= 1 && head_dim >= 1 && ff_mult >= 1 && out_dim >= 1,
          "perceiver config: sizes must be positive");
  require(!temporal_embeddings || max_frames >= 1, "perceiver config: max_frames must be positive");
}

json PerceiverConfig::to_json() const {
  return {{"depth", depth},     {"queries", queries}, {"media_dim", media_dim},
          {"heads", heads},     {"head_dim", head_dim}, {"ff_mult", ff_mult},
          {"out_dim", out_dim}, {"temporal_embeddings", temporal_embeddings}, {"max_frames", max_frames}};
}

PerceiverConfig PerceiverConfig::from_json(const json& j) {
  PerceiverConfig c;
  c.depth = j.value("depth", c.depth);
  c.queries = j.value("queries", c.queries);
  c.media_dim = j.value("media_dim", c.media_dim);
  c.heads = j.value("heads", c.heads);
  c.head_dim = j.value("head_dim", c.head_dim);
  c.ff_mult = j.value("ff_mult", c.ff_mult);
  c.out_dim = j.value("out_dim", c.out_dim);
  c.temporal_embeddings = j.value("temporal_embeddings", c.temporal_embeddings);
  c.max_frames = j.value("max_frames", c.max_frames);
  c.validate();
  return c;
}

std::vector<std::pair<std::string, ad::Shape>> perceiver_shapes(const PerceiverConfig& c) {
  c.validate();
  const int d = c.media_dim, inner = c.inner_dim();
  std::vector<std::pair<std::string, ad::Shape>> s;
  s.emplace_back("perceiver.latents", ad::Shape{c.queries, d});
  if (c.temporal_embeddings) s.emplace_back("perceiver.time_emb", ad::Shape{c.max_frames, d});
  for (int i = 0; i < c.depth; ++i) {
    s.emplace_back(pl(i, "norm_media.g"), ad::Shape{d});
    s.emplace_back(pl(i, "norm_media.b"), ad::Shape{d});
    s.emplace_back(pl(i, "norm_latents.g"), ad::Shape{d});
    s.emplace_back(pl(i, "norm_latents.b"), ad::Shape{d});
    s.emplace_back(pl(i, "to_q"), ad::Shape{d, inner});
    s.emplace_back(pl(i, "to_kv"), ad::Shape{d, 2 * inner});
    s.emplace_back(pl(i, "to_out"), ad::Shape{inner, d});
    s.emplace_back(pl(i, "ff.norm.g"), ad::Shape{d});
    s.emplace_back(pl(i, "ff.norm.b"), ad::Shape{d});
    s.emplace_back(pl(i, "ff.w1"), ad::Shape{d, d * c.ff_mult});
    s.emplace_back(pl(i, "ff.w2"), ad::Shape{d * c.ff_mult, d});
  }
  s.emplace_back("perceiver.norm.g", ad::Shape{d});
  s.emplace_back("perceiver.norm.b", ad::Shape{d});
  s.emplace_back("perceiver.proj.w", ad::Shape{d, c.out_dim});
  s.emplace_back("perceiver.proj.b", ad::Shape{c.out_dim});
  return s;
}

// ---- encoder ------------------------------------------------------------------

void VisualEncoderConfig::validate() const {
  require(feature_dim >= 1 && model_dim >= 1, "visual encoder: dims must be positive");
  if (arch == Arch::perceiver) {
    perceiver.validate();
    require(perceiver.media_dim == feature_dim, "visual encoder: perceiver media_dim must equal feature_dim");
    require(perceiver.out_dim == model_dim, "visual encoder: perceiver out_dim must equal model_dim");
  }
}

json VisualEncoderConfig::to_json() const {
  return {{"arch", arch_name(arch)}, {"feature_dim", feature_dim}, {"model_dim", model_dim},
          {"perceiver", perceiver.to_json()}};
}

VisualEncoderConfig VisualEncoderConfig::from_json(const json& j) {
  try {
    VisualEncoderConfig c;
    c.arch = parse_arch(j.at("arch"));
    c.feature_dim = j.at("feature_dim");
    c.model_dim = j.at("model_dim");
    if (j.contains("perceiver")) c.perceiver = PerceiverConfig::from_json(j.at("perceiver"));
    c.validate();
    return c;
  } catch (const json::exception& e) {
    throw FormatError(std::string("visual encoder config: ") + e.what());
  }
}

VisualEncoder::VisualEncoder(const VisualEncoderConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng = make_rng(seed, 0x766973);
  if (cfg_.arch == Arch::linear) {
    params_.add("visual.proj.w", gaussian(rng, {cfg_.feature_dim, cfg_.model_dim}, 1.0 / std::sqrt(cfg_.feature_dim)));
    params_.add("visual.proj.b", Tensor<float>({cfg_.model_dim}));
    return;
  }
  for (const auto& [name, shape] : perceiver_shapes(cfg_.perceiver)) {
    const bool gain = name.size() > 2 && name.compare(name.size() - 2, 2, ".g") == 0;
    const bool bias = name.size() > 2 && name.compare(name.size() - 2, 2, ".b") == 0;
    if (gain)
      params_.add(name, Tensor<float>(shape, 1.0f));
    else if (bias)
      params_.add(name, Tensor<float>(shape));
    else if (shape.size() == 2 && name != "perceiver.latents" && name != "perceiver.time_emb")
      params_.add(name, gaussian(rng, shape, 1.0 / std::sqrt(shape[0])));
    else
      params_.add(name, gaussian(rng, shape, 0.02));
  }
}

Var VisualEncoder::bind(Tape<float>& t, const std::string& name, bool trainable) const {
  return t.param(const_cast<ad::ParamSet<float>&>(params_).get(name), trainable);
}

Var VisualEncoder::build_perceiver(Tape<float>& t, Var media, bool trainable) const {
  const auto& c = cfg_.perceiver;
  auto P = [&](const std::string& n) { return bind(t, n, trainable); };
  const int frames = t.value(media).rows();
  if (c.temporal_embeddings) {
    require(frames <= c.max_frames, "perceiver: " + std::to_string(frames) + " frames exceed max_frames");
    media = t.add(media, t.slice_rows(P("perceiver.time_emb"), 0, frames));
  }
  Var x = P("perceiver.latents");
  const float inv = 1.0f / std::sqrt(static_cast<float>(c.head_dim));
  for (int i = 0; i < c.depth; ++i) {
    const Var m = t.layer_norm(media, P(pl(i, "norm_media.g")), P(pl(i, "norm_media.b")));
    const Var l = t.layer_norm(x, P(pl(i, "norm_latents.g")), P(pl(i, "norm_latents.b")));
    const Var q = t.matmul(l, P(pl(i, "to_q")));
    const std::vector<Var> both{m, l};
    const Var kv = t.matmul(t.concat_rows(both), P(pl(i, "to_kv")));
    const Var k = t.slice_cols(kv, 0, c.inner_dim()), v = t.slice_cols(kv, c.inner_dim(), c.inner_dim());
    std::vector<Var> heads;
    for (int h = 0; h < c.heads; ++h) {
      const Var qh = t.slice_cols(q, h * c.head_dim, c.head_dim);
      const Var kh = t.slice_cols(k, h * c.head_dim, c.head_dim);
      const Var vh = t.slice_cols(v, h * c.head_dim, c.head_dim);
      heads.push_back(t.matmul(t.softmax_rows(t.scale(t.matmul_nt(qh, kh), inv)), vh));
    }
    const Var attn = heads.size() == 1 ? heads[0] : t.concat_cols(heads);
    x = t.add(x, t.matmul(attn, P(pl(i, "to_out"))));
    const Var f = t.layer_norm(x, P(pl(i, "ff.norm.g")), P(pl(i, "ff.norm.b")));
    x = t.add(x, t.matmul(t.gelu(t.matmul(f, P(pl(i, "ff.w1")))), P(pl(i, "ff.w2"))));
  }
  x = t.layer_norm(x, P("perceiver.norm.g"), P("perceiver.norm.b"));
  return t.add_row(t.matmul(x, P("perceiver.proj.w")), P("perceiver.proj.b"));
}

Var VisualEncoder::build(Tape<float>& t, const VisualFeature& f, bool trainable) const {
  f.validate();
  if (f.dim() != cfg_.feature_dim)
    throw ShapeError("visual encoder: feature width " + std::to_string(f.dim()) + " != " +
                     std::to_string(cfg_.feature_dim));
  const Var media = t.constant(f.rows);
  if (cfg_.arch == Arch::linear)
    return t.add_row(t.matmul(media, bind(t, "visual.proj.w", trainable)), bind(t, "visual.proj.b", trainable));
  return build_perceiver(t, media, trainable);
}

Tensor<float> VisualEncoder::encode(const VisualFeature& f) const {
  Tape<float> t;
  return t.value(build(t, f, false));
}

ad::Checkpoint VisualEncoder::to_checkpoint() const {
  ad::Checkpoint ck;
  ck.config = {{"kind", "visual_encoder"}, {"visual", cfg_.to_json()}};
  for (const auto& p : params_) ck.params.add(p.name, p.value);
  return ck;
}

VisualEncoder VisualEncoder::from_checkpoint(const ad::Checkpoint& ck) {
  if (ck.config.value("kind", std::string()) != "visual_encoder") throw FormatError("checkpoint is not a visual encoder");
  VisualEncoder e(VisualEncoderConfig::from_json(ck.config.at("visual")), 0);
  for (auto& p : e.params_) {
    if (!ck.params.contains(p.name)) throw FormatError("visual checkpoint: missing parameter " + p.name);
    const auto& src = ck.params.get(p.name).value;
    if (src.shape != p.value.shape) throw FormatError("visual checkpoint: shape mismatch for " + p.name);
    p.value = src;
  }
  return e;
}

Tensor<float> project_linear(const VisualFeature& f, const Tensor<float>& w, const Tensor<float>& b) {
  f.validate();
  if (w.shape.size() != 2 || w.rows() != f.dim()) throw ShapeError("project_linear: weight rows must equal D_v");
  if (static_cast<int>(b.size()) != w.cols()) throw ShapeError("project_linear: bias length must equal output width");
  Tensor<float> out({f.frames(), w.cols()});
  for (int r = 0; r < f.frames(); ++r)
    for (int c = 0; c < w.cols(); ++c) {
      double s = b.data[static_cast<std::size_t>(c)];
      for (int k = 0; k < f.dim(); ++k) s += double(f.rows.at(r, k)) * w.at(k, c);
      out.at(r, c) = static_cast<float>(s);
    }
  return out;
}

}  // namespace mtalk::vision
